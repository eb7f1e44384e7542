//! Randomized smoothing: Monte-Carlo vote counts, exact binomial confidence
//! bounds, the Gaussian-smoothing radius and the extended radius of a
//! diffusion-prefixed classifier.

use ndarray::{ArrayD, Axis};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::beta::beta_reg;
use libm::erfc;

use crate::classifier::Predictor;
use crate::diffusion::NoiseSchedule;
use crate::error::{invalid, Result};
use crate::rng::{derive_seed, rng_from, standard_normal};

pub const DEFAULT_N0: usize = 100;
pub const DEFAULT_N: usize = 1000;
pub const DEFAULT_ALPHA: f64 = 0.01;
pub const DEFAULT_SIGMA: f64 = 0.25;
/// Upper clamp for probabilities fed to the normal quantile.
pub const P_CLAMP: f64 = 1.0 - 1e-12;
const VOTE_CHUNK: usize = 250;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile, refined by Newton steps on the lower tail where
/// the CDF keeps full relative precision.
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "quantile needs p in (0, 1), got {p}");
    if p > 0.5 {
        return -lower_quantile(1.0 - p);
    }
    lower_quantile(p)
}

fn lower_quantile(p: f64) -> f64 {
    if p == 0.5 {
        return 0.0;
    }
    let mut x = Normal::standard().inverse_cdf(p);
    for _ in 0..3 {
        let err = normal_cdf(x) - p;
        let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        x -= err / pdf;
    }
    x
}

fn clamped_quantile(p: f64) -> f64 {
    normal_quantile(p.clamp(1.0 - P_CLAMP, P_CLAMP))
}

/// `sigma / 2 * (Phi^-1(p_a) - Phi^-1(p_b))`, with both arguments clamped
/// into `[1e-12, 1 - 1e-12]`.
pub fn cohen_radius(sigma: f64, p_a: f64, p_b: f64) -> f64 {
    if p_a == p_b {
        return 0.0;
    }
    sigma / 2.0 * (clamped_quantile(p_a) - clamped_quantile(p_b))
}

/// One-sided Clopper-Pearson lower confidence bound for a binomial
/// proportion after `k` successes in `n` trials.
pub fn binomial_lower_bound(k: usize, n: usize, alpha: f64) -> Result<f64> {
    if n == 0 || k > n {
        return Err(invalid(format!("need 0 <= k <= n and n >= 1, got k={k}, n={n}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid("alpha must lie in (0, 1)"));
    }
    if k == 0 {
        return Ok(0.0);
    }
    if k == n {
        return Ok(alpha.powf(1.0 / n as f64));
    }
    let (a, b) = (k as f64, (n - k + 1) as f64);
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if beta_reg(a, b, mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtendedRadiusParams {
    pub delta: f64,
    pub gamma_tstar: f64,
    pub c_alpha: f64,
    pub c_s: f64,
}

impl ExtendedRadiusParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.delta, self.gamma_tstar, self.c_alpha, self.c_s];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("extended radius parameters must be finite and nonnegative"));
        }
        Ok(())
    }

    pub fn prefactor(&self) -> f64 {
        (self.delta + ((2.0 * self.gamma_tstar).exp() - 1.0).sqrt() * self.c_alpha + self.gamma_tstar * self.c_s) / 2.0
    }
}

/// `(delta + sqrt(e^{2 gamma} - 1) C_alpha + gamma C_s) / 2 * (Phi^-1(p_a) - Phi^-1(p_b))`,
/// floored at zero.
pub fn extended_radius(params: &ExtendedRadiusParams, p_a: f64, p_b: f64) -> Result<f64> {
    params.validate()?;
    if !(0.0..=1.0).contains(&p_a) || !(0.0..=1.0).contains(&p_b) {
        return Err(invalid("probabilities must lie in [0, 1]"));
    }
    if p_a < p_b {
        return Err(invalid(format!("p_a = {p_a} is below p_b = {p_b}")));
    }
    if p_a == p_b {
        return Ok(0.0);
    }
    let r = params.prefactor() * (clamped_quantile(p_a) - clamped_quantile(p_b));
    Ok(r.max(0.0))
}

/// `gamma(t*) = -ln(alpha_bar_{t*}) / 2`.
pub fn gamma_from_schedule(schedule: &NoiseSchedule, t_star: usize) -> Result<f64> {
    schedule.check_step(t_star)?;
    Ok(gamma_from_alpha_bar(schedule.alpha_bar(t_star)))
}

pub fn gamma_from_alpha_bar(alpha_bar: f64) -> f64 {
    -0.5 * alpha_bar.ln()
}

/// Class histogram of `model` over `n` Gaussian perturbations of the single
/// sample `x` (shape without a batch axis).
pub fn smooth_predict(model: &dyn Predictor, x: &ArrayD<f64>, sigma: f64, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(invalid("n must be at least 1"));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid("sigma must be finite and >= 0"));
    }
    let mut counts = vec![0; model.class_count()];
    let mut done = 0;
    let mut chunk_index = 0u64;
    while done < n {
        let m = VOTE_CHUNK.min(n - done);
        let mut shape = vec![m];
        shape.extend_from_slice(x.shape());
        let mut batch = standard_normal(&shape, &mut rng_from(derive_seed(seed, chunk_index)));
        batch.mapv_inplace(|z| z * sigma);
        for mut row in batch.outer_iter_mut() {
            row += x;
        }
        for c in model.predict(&batch)? {
            counts[c] += 1;
        }
        done += m;
        chunk_index += 1;
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertifyConfig {
    pub sigma: f64,
    pub n0: usize,
    pub n: usize,
    pub alpha: f64,
    pub extended: ExtendedRadiusParams,
}

impl CertifyConfig {
    pub fn defaults(extended: ExtendedRadiusParams) -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            n0: DEFAULT_N0,
            n: DEFAULT_N,
            alpha: DEFAULT_ALPHA,
            extended,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateRecord {
    /// `None` means abstain.
    pub class: Option<usize>,
    pub p_a_lower: f64,
    pub p_b_upper: f64,
    pub sigma: f64,
    pub radius_cohen: f64,
    pub radius_extended: f64,
    pub n0: usize,
    pub n: usize,
    pub alpha: f64,
    pub counts: Vec<usize>,
}

/// Selects a class from `n0` votes, lower-bounds its probability from `n`
/// fresh votes, and abstains when that bound does not exceed one half.
pub fn certify(model: &dyn Predictor, x: &ArrayD<f64>, cfg: &CertifyConfig, seed: u64) -> Result<CertificateRecord> {
    if cfg.n0 == 0 || cfg.n == 0 {
        return Err(invalid("n0 and n must be at least 1"));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha < 1.0) {
        return Err(invalid("alpha must lie in (0, 1)"));
    }
    cfg.extended.validate()?;
    let selection = smooth_predict(model, x, cfg.sigma, cfg.n0, derive_seed(seed, 0))?;
    let top = argmax(&selection);
    let counts = smooth_predict(model, x, cfg.sigma, cfg.n, derive_seed(seed, 1))?;
    let p_a = binomial_lower_bound(counts[top], cfg.n, cfg.alpha)?;
    let p_b = 1.0 - p_a;
    let (class, radius_cohen, radius_extended) = if p_a > 0.5 {
        (
            Some(top),
            cohen_radius(cfg.sigma, p_a, p_b),
            extended_radius(&cfg.extended, p_a, p_b)?,
        )
    } else {
        (None, 0.0, 0.0)
    };
    Ok(CertificateRecord {
        class,
        p_a_lower: p_a,
        p_b_upper: p_b,
        sigma: cfg.sigma,
        radius_cohen,
        radius_extended,
        n0: cfg.n0,
        n: cfg.n,
        alpha: cfg.alpha,
        counts,
    })
}

fn argmax(counts: &[usize]) -> usize {
    counts
        .iter()
        .enumerate()
        .fold((0, 0), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Majority vote of the smoothed classifier for each row of `x`.
pub fn smoothed_predictions(model: &dyn Predictor, x: &ArrayD<f64>, sigma: f64, n: usize, seed: u64) -> Result<Vec<usize>> {
    x.axis_iter(Axis(0))
        .enumerate()
        .map(|(i, row)| Ok(argmax(&smooth_predict(model, &row.to_owned(), sigma, n, derive_seed(seed, i as u64))?)))
        .collect()
}
