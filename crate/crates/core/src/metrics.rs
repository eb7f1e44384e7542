//! Image quality metrics, accuracy, distribution distances and the
//! gradient-sensitivity probe.

use distransfer_autograd::sparse::{reflect_index, separable_filter};
use distransfer_autograd::{SparseMap, Var};
use ndarray::{ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierModel, DifferentiableClassifier, Predictor};
use crate::datasets::LabeledDataset;
use crate::error::{invalid, Error, Result};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
pub const PSNR_CAP_DB: f64 = 99.0;

/// Normalised 1-D Gaussian taps of the SSIM window.
pub fn gaussian_taps(len: usize, sigma: f64) -> Vec<f64> {
    let r = (len / 2) as f64;
    let raw: Vec<f64> = (0..len).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

fn image_dims(a: &ArrayD<f64>) -> Result<(usize, usize)> {
    match a.shape() {
        [h, w] | [1, h, w] => Ok((*h, *w)),
        s => Err(Error::UnsupportedShape(format!("expected a single-channel image, got {s:?}"))),
    }
}

fn same_shape(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid(format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn filter_plain(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (iy, ky) in taps.iter().enumerate() {
                let sy = reflect_index(y as isize + iy as isize - r, h);
                for (ix, kx) in taps.iter().enumerate() {
                    let sx = reflect_index(x as isize + ix as isize - r, w);
                    acc += ky * kx * img[sy * w + sx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Mean local SSIM of two single-channel images with data range 1.
pub fn ssim(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = image_dims(a)?;
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let av: Vec<f64> = a.iter().cloned().collect();
    let bv: Vec<f64> = b.iter().cloned().collect();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_plain(&av, h, w, &taps);
    let mu_b = filter_plain(&bv, h, w, &taps);
    let aa = filter_plain(&prod(&av, &av), h, w, &taps);
    let bb = filter_plain(&prod(&bv, &bv), h, w, &taps);
    let ab = filter_plain(&prod(&av, &bv), h, w, &taps);
    let total: f64 = (0..h * w)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
        })
        .sum();
    Ok(total / (h * w) as f64)
}

/// Differentiable SSIM for batches of `h x w` images.
#[derive(Debug, Clone)]
pub struct SsimWindow {
    h: usize,
    w: usize,
    filter: SparseMap,
}

impl SsimWindow {
    pub fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            filter: separable_filter(h, w, &gaussian_taps(SSIM_WINDOW, SSIM_SIGMA)),
        }
    }

    /// Per-sample SSIM, shape `(batch,)`, for inputs whose rows hold `h * w` values.
    pub fn var(&self, a: &Var, b: &Var) -> Var {
        let f = |x: &Var| x.sparse(&self.filter);
        let (mu_a, mu_b) = (f(a), f(b));
        let va = f(&a.square()).sub(&mu_a.square());
        let vb = f(&b.square()).sub(&mu_b.square());
        let cov = f(&a.mul(b)).sub(&mu_a.mul(&mu_b));
        let num = mu_a.mul(&mu_b).scale(2.0).add_scalar(SSIM_C1).mul(&cov.scale(2.0).add_scalar(SSIM_C2));
        let den = mu_a
            .square()
            .add(&mu_b.square())
            .add_scalar(SSIM_C1)
            .mul(&va.add(&vb).add_scalar(SSIM_C2));
        let local = num.mul(&den.recip_safe());
        let batch = a.shape()[0];
        local
            .reshape(&[batch, self.h * self.w])
            .sum_axis(1)
            .scale(1.0 / (self.h * self.w) as f64)
    }
}

/// `10 log10(1 / MSE)`, capped at 99 dB for identical inputs.
pub fn psnr(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<f64> {
    same_shape(a, b)?;
    if a.is_empty() {
        return Err(invalid("psnr of empty arrays"));
    }
    let mse = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Per-sample SSIM over two aligned image batches.
pub fn ssim_batch(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<Vec<f64>> {
    same_shape(a, b)?;
    a.outer_iter()
        .zip(b.outer_iter())
        .map(|(x, y)| ssim(&x.to_owned(), &y.to_owned()))
        .collect()
}

pub fn psnr_batch(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<Vec<f64>> {
    same_shape(a, b)?;
    a.outer_iter()
        .zip(b.outer_iter())
        .map(|(x, y)| psnr(&x.to_owned(), &y.to_owned()))
        .collect()
}

/// Fraction of correct argmax predictions.
pub fn accuracy(model: &dyn Predictor, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("accuracy of an empty dataset"));
    }
    accuracy_on(model, data.samples(), data.labels())
}

pub fn accuracy_on(model: &dyn Predictor, x: &ArrayD<f64>, y: &[usize]) -> Result<f64> {
    if y.is_empty() {
        return Err(invalid("accuracy of an empty batch"));
    }
    let pred = model.predict(x)?;
    Ok(fraction_equal(&pred, y))
}

pub fn fraction_equal(pred: &[usize], y: &[usize]) -> f64 {
    pred.iter().zip(y).filter(|(p, q)| p == q).count() as f64 / y.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub values: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (zero for fewer than two values).
    pub std: f64,
}

impl MetricReport {
    pub fn from_values(name: &str, values: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&values);
        Self {
            name: name.into(),
            values,
            mean,
            std,
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.std / (self.values.len() as f64).sqrt()
        }
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Two-sample energy distance `2 E|X-Y| - E|X-X'| - E|Y-Y'|` between the rows
/// of two point sets (V-statistic form).
pub fn energy_distance(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<f64> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(invalid("energy distance needs two (n, d) arrays of equal d"));
    }
    if a.shape()[0] == 0 || b.shape()[0] == 0 {
        return Err(invalid("energy distance of an empty set"));
    }
    let mean_dist = |x: &ArrayD<f64>, y: &ArrayD<f64>| {
        let mut acc = 0.0;
        for r in x.outer_iter() {
            for s in y.outer_iter() {
                acc += r.iter().zip(s.iter()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            }
        }
        acc / (x.shape()[0] * y.shape()[0]) as f64
    };
    Ok(2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b))
}

/// Euclidean distance between penultimate classifier features of aligned
/// batches. A diagnostic stand-in for learned perceptual metrics; this is not
/// LPIPS.
pub fn feature_distance(model: &ClassifierModel, a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<Vec<f64>> {
    same_shape(a, b)?;
    model.logits(a)?;
    let fa = distransfer_autograd::no_grad(|| model.features_var(&Var::constant(a.clone())).value().clone());
    let fb = distransfer_autograd::no_grad(|| model.features_var(&Var::constant(b.clone())).value().clone());
    Ok(fa
        .outer_iter()
        .zip(fb.outer_iter())
        .map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub std_error: f64,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self {
            mean,
            std_error: std / (values.len().max(1) as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub clean: MeanSe,
    pub augmented: MeanSe,
    pub adversarial: MeanSe,
    /// Mean of `|J(x') - J(x)| / ||x' - x||_2` over samples with `x' != x`.
    pub augmented_difference_ratio: f64,
    pub adversarial_difference_ratio: f64,
    pub n: usize,
}

/// Per-sample loss and input-gradient norm of the per-sample cross-entropy.
pub fn per_sample_loss_grad(model: &dyn DifferentiableClassifier, x: &ArrayD<f64>, y: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = y.len();
    let mut losses = Vec::with_capacity(n);
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let xi = x.select(Axis(0), &[i]);
        let (l, g) = model.loss_and_grad(&xi, &y[i..=i])?;
        losses.push(l);
        norms.push(g.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    Ok((losses, norms))
}

/// Mean input-gradient norms on clean, augmented and adversarial versions of
/// the same samples.
pub fn grad_sensitivity_probe(
    model: &dyn DifferentiableClassifier,
    clean: &LabeledDataset,
    augmented: &LabeledDataset,
    adversarial: &LabeledDataset,
) -> Result<ProbeReport> {
    let n = clean.len();
    if augmented.len() != n || adversarial.len() != n {
        return Err(invalid("probe datasets must be aligned"));
    }
    if augmented.labels() != clean.labels() || adversarial.labels() != clean.labels() {
        return Err(invalid("probe datasets must share labels"));
    }
    let (lc, gc) = per_sample_loss_grad(model, clean.samples(), clean.labels())?;
    let (la, ga) = per_sample_loss_grad(model, augmented.samples(), clean.labels())?;
    let (lv, gv) = per_sample_loss_grad(model, adversarial.samples(), clean.labels())?;
    let ratio = |other: &LabeledDataset, lo: &[f64]| {
        let mut acc = Vec::new();
        for i in 0..n {
            let dist = clean
                .samples()
                .index_axis(Axis(0), i)
                .iter()
                .zip(other.samples().index_axis(Axis(0), i).iter())
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
                .sqrt();
            if dist > 0.0 {
                acc.push((lo[i] - lc[i]).abs() / dist);
            }
        }
        mean_std(&acc).0
    };
    Ok(ProbeReport {
        clean: MeanSe::of(&gc),
        augmented: MeanSe::of(&ga),
        adversarial: MeanSe::of(&gv),
        augmented_difference_ratio: ratio(augmented, &la),
        adversarial_difference_ratio: ratio(adversarial, &lv),
        n,
    })
}
