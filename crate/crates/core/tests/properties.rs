use distransfer_core::attacks::{fgsm, pgd, scaled_budget, AttackSpec, Norm, REFERENCE_DIM};
use distransfer_core::certification::{
    binomial_lower_bound, cohen_radius, extended_radius, gamma_from_alpha_bar, normal_cdf, normal_quantile,
    ExtendedRadiusParams,
};
use distransfer_core::classifier::{Architecture, ClassifierModel, LinearSoftmax};
use distransfer_core::datasets::{corrupt, make_shape_images, CorruptionFamily, CorruptionSpec};
use distransfer_core::diffusion::make_schedule;
use distransfer_core::metrics::{psnr, ssim};
use distransfer_core::rng::{rng_from, standard_normal};
use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;

fn image(seed: u64, side: usize) -> ArrayD<f64> {
    standard_normal(&[side, side], &mut rng_from(seed)).mapv(|v| (0.5 + 0.25 * v).clamp(0.0, 1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedules_are_monotone_and_bounded(t_max in 2usize..300, b0 in 1e-5f64..0.01, span in 1e-4f64..0.5) {
        let s = make_schedule(t_max, b0, b0 + span).unwrap();
        for t in 1..=t_max {
            prop_assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            prop_assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < 1.0);
            prop_assert!(s.posterior_var(t) >= 0.0 && s.posterior_var(t) <= s.beta(t) + 1e-15);
            if t > 1 {
                prop_assert!(s.beta(t) >= s.beta(t - 1));
                prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
    }

    #[test]
    fn cohen_radius_is_nonnegative_monotone_and_linear_in_sigma(
        sigma in 0.01f64..3.0,
        p_a in 0.5f64..0.9999,
        bump in 0.0f64..0.5,
    ) {
        let p_b = 1.0 - p_a;
        let r = cohen_radius(sigma, p_a, p_b);
        prop_assert!(r >= 0.0);
        let hi = (p_a + bump * (1.0 - p_a)).min(0.99999);
        prop_assert!(cohen_radius(sigma, hi, 1.0 - hi) >= r - 1e-12);
        prop_assert!((cohen_radius(2.0 * sigma, p_a, p_b) - 2.0 * r).abs() <= 1e-12 * (1.0 + r));
    }

    #[test]
    fn extended_radius_is_nonnegative_and_matches_cohen_at_half_sigma(
        delta in 0.0f64..1.0,
        gamma in 0.0f64..2.0,
        p_a in 0.5f64..0.999,
        p_b in 0.0005f64..0.5,
    ) {
        prop_assume!(p_b <= p_a);
        let params = ExtendedRadiusParams { delta, gamma_tstar: gamma, c_alpha: 1.0, c_s: 1.0 };
        prop_assert!(extended_radius(&params, p_a, p_b).unwrap() >= 0.0);
        // prefactor delta / 2 when gamma = 0 equals sigma / 2 with sigma = delta
        let plain = ExtendedRadiusParams { delta, gamma_tstar: 0.0, c_alpha: 1.0, c_s: 1.0 };
        let e = extended_radius(&plain, p_a, p_b).unwrap();
        prop_assert!((e - cohen_radius(delta, p_a, p_b)).abs() <= 1e-12 * (1.0 + e));
    }

    #[test]
    fn quantile_inverts_the_cdf(p in 1e-10f64..(1.0 - 1e-10)) {
        let x = normal_quantile(p);
        let back = if p < 0.5 { normal_cdf(x) } else { 1.0 - normal_cdf(-x) };
        let tail = p.min(1.0 - p);
        prop_assert!((back - p).abs() <= 1e-12 * tail.max(1e-300) + 1e-16, "p {} back {}", p, back);
    }

    #[test]
    fn clopper_pearson_is_below_the_point_estimate_and_monotone(n in 1usize..2000, frac in 0.0f64..=1.0, alpha in 0.001f64..0.2) {
        let k = ((n as f64) * frac).round() as usize;
        let lb = binomial_lower_bound(k, n, alpha).unwrap();
        prop_assert!((0.0..=1.0).contains(&lb));
        prop_assert!(lb <= k as f64 / n as f64 + 1e-12);
        if k < n {
            prop_assert!(binomial_lower_bound(k + 1, n, alpha).unwrap() >= lb);
        }
        prop_assert!(binomial_lower_bound(k, n, alpha / 2.0).unwrap() <= lb + 1e-12);
    }

    #[test]
    fn gamma_inverts_the_forward_noise_ratio(a in 1e-4f64..1.0) {
        let g = gamma_from_alpha_bar(a);
        prop_assert!(g >= 0.0);
        prop_assert!(((2.0 * g).exp() - 1.0 - (1.0 - a) / a).abs() <= 1e-9 * (1.0 + (1.0 - a) / a));
    }

    #[test]
    fn ssim_is_symmetric_bounded_and_one_on_identity(s1 in 0u64..1000, s2 in 0u64..1000) {
        let (a, b) = (image(s1, 12), image(s2, 12));
        let ab = ssim(&a, &b).unwrap();
        prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12 && ab > -1.0);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((psnr(&a, &b).unwrap() - psnr(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn linf_budget_scales_with_dimension(k in 0.0f64..128.0, dim in 1usize..5000) {
        let e = scaled_budget(Norm::Linf, k, dim);
        prop_assert!((e * e * dim as f64 - (k / 255.0).powi(2) * REFERENCE_DIM as f64).abs() <= 1e-9 * (1.0 + e * e * dim as f64));
        prop_assert_eq!(scaled_budget(Norm::L2, k, dim), k / 255.0);
    }

    #[test]
    fn point_attacks_stay_inside_the_ball(
        seed in 0u64..500,
        eps in 0.01f64..1.0,
        steps in 1usize..8,
        l2 in any::<bool>(),
    ) {
        let model = LinearSoftmax::new(
            ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, -0.5, 0.2, 0.3, 0.8, -1.1]).unwrap(),
            vec![0.0, 0.1, -0.1],
        ).unwrap();
        let x = standard_normal(&[6, 2], &mut rng_from(seed));
        let y = [0, 1, 2, 0, 1, 2];
        let norm = if l2 { Norm::L2 } else { Norm::Linf };
        let r = pgd(&model, &x, &y, &AttackSpec::new(norm, eps, steps), seed).unwrap();
        for (i, n) in r.norms.iter().enumerate() {
            let d: Vec<f64> = (0..2).map(|j| r.adversarial[[i, j]] - x[[i, j]]).collect();
            prop_assert!(*n <= eps * (1.0 + 1e-12), "row {} norm {} eps {} delta {:?}", i, n, eps, d);
        }
        let f = fgsm(&model, &x, &y, eps).unwrap();
        prop_assert!(f.norms.iter().all(|n| *n <= eps * (1.0 + 1e-12)));
    }

    #[test]
    fn corruptions_keep_shape_range_and_labels(seed in 0u64..200, family in 0usize..5, severity in 0u8..=5) {
        let ds = make_shape_images(1, 16, seed).unwrap();
        let spec = CorruptionSpec::new(CorruptionFamily::ALL[family], severity).unwrap();
        let out = corrupt(&ds, spec, seed).unwrap();
        prop_assert_eq!(out.samples().shape(), ds.samples().shape());
        prop_assert_eq!(out.labels(), ds.labels());
        prop_assert!(out.samples().iter().all(|v| (0.0..=1.0).contains(v)));
        if severity == 0 {
            prop_assert_eq!(out.samples(), ds.samples());
        }
    }
}

#[test]
fn image_attacks_respect_budget_and_pixel_range() {
    let model = ClassifierModel::init(Architecture::SmallConv, &[1, 12, 12], 3, 7).unwrap();
    let ds = make_shape_images(4, 12, 3).unwrap();
    let (x, y) = (ds.samples(), ds.labels());
    for (norm, eps) in [(Norm::Linf, 0.1), (Norm::L2, 0.5)] {
        let r = pgd(&model, x, y, &AttackSpec::new(norm, eps, 10), 1).unwrap();
        assert!(r.norms.iter().all(|n| *n <= eps * (1.0 + 1e-12)));
        assert!(r.adversarial.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
