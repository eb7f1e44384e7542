use distransfer_core::datasets::make_gaussian_mixture;
use distransfer_core::diffusion::{default_schedule, train_diffusion};
use ndarray::{ArrayD, Axis};

fn mean_pair_distance(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    let mut total = 0.0;
    for p in a.axis_iter(Axis(0)) {
        for q in b.axis_iter(Axis(0)) {
            total += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        }
    }
    total / (a.shape()[0] * b.shape()[0]) as f64
}

/// `2 E|X - Y| - E|X - X'| - E|Y - Y'|` with V-statistics.
fn energy_distance(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    2.0 * mean_pair_distance(a, b) - mean_pair_distance(a, a) - mean_pair_distance(b, b)
}

#[test]
fn trained_point_model_reproduces_the_mixture() {
    let train = make_gaussian_mixture(300, 4, 0.1, 11).unwrap();
    let held_out = make_gaussian_mixture(250, 4, 0.1, 12).unwrap();
    let (model, report) = train_diffusion(&train, &default_schedule(), 60, 13).unwrap();

    let losses = &report.epoch_losses;
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "loss did not decrease: {head:.4} -> {tail:.4}");

    let generated = model.sample(1000, 14).unwrap();
    let ed = energy_distance(&generated, held_out.samples());
    assert!(ed < 0.05, "energy distance {ed:.4}");

    // 99% box of the held-out data per coordinate
    let mut inside = vec![true; 1000];
    for d in 0..2 {
        let mut col: Vec<f64> = held_out.samples().index_axis(Axis(1), d).iter().copied().collect();
        col.sort_by(f64::total_cmp);
        let n = col.len();
        let (lo, hi) = (col[(0.005 * n as f64) as usize], col[((0.995 * n as f64) as usize).min(n - 1)]);
        for (i, v) in generated.index_axis(Axis(1), d).iter().enumerate() {
            inside[i] &= (lo..=hi).contains(v);
        }
    }
    let frac = inside.iter().filter(|&&b| b).count() as f64 / 1000.0;
    assert!(frac >= 0.95, "only {frac:.3} of samples inside the box");
}
