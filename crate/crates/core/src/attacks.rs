//! Untargeted FGSM and PGD under l-inf and l2 budgets. The adaptive attack is
//! PGD run against the gradient of a whole defended pipeline.

use ndarray::{ArrayD, ArrayViewMutD, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::classifier::DifferentiableClassifier;
use crate::error::{invalid, Result};
use crate::rng::{derive_seed, rng_from, standard_normal};

/// Input dimension the nominal `k/255` l-inf budgets refer to (32x32x3).
pub const REFERENCE_DIM: usize = 3072;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Linf,
    L2,
}

impl Norm {
    pub fn name(self) -> &'static str {
        match self {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linf" => Ok(Norm::Linf),
            "l2" => Ok(Norm::L2),
            other => Err(invalid(format!("unknown norm {other:?}"))),
        }
    }

    fn of(self, v: &[f64]) -> f64 {
        match self {
            Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        }
    }
}

/// Converts a nominal budget given in 1/255 units to the synthetic data's
/// dimension. l-inf budgets grow as `sqrt(REFERENCE_DIM / dim)` so that the
/// first-order loss change `eps * ||grad||_1` stays comparable; l2 budgets
/// are dimension-free and only rescaled by 1/255.
pub fn scaled_budget(norm: Norm, nominal_255: f64, dim: usize) -> f64 {
    let base = nominal_255 / 255.0;
    match norm {
        Norm::Linf => base * (REFERENCE_DIM as f64 / dim as f64).sqrt(),
        Norm::L2 => base,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub norm: Norm,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
}

impl AttackSpec {
    /// Spec with the default step size: `eps / 4` for l-inf, `2 eps / steps`
    /// along the normalised gradient for l2.
    pub fn new(norm: Norm, epsilon: f64, steps: usize) -> Self {
        Self {
            norm,
            epsilon,
            steps,
            step_size: default_step_size(norm, epsilon, steps),
            random_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(invalid(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(invalid("steps must be at least 1"));
        }
        if !(self.step_size > 0.0) {
            return Err(invalid(format!("step size must be > 0, got {}", self.step_size)));
        }
        Ok(())
    }
}

pub fn default_step_size(norm: Norm, epsilon: f64, steps: usize) -> f64 {
    let s = match norm {
        Norm::Linf => epsilon / 4.0,
        Norm::L2 => 2.0 * epsilon / steps.max(1) as f64,
    };
    // a zero budget still needs a valid positive step
    if s > 0.0 {
        s
    } else {
        f64::MIN_POSITIVE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub adversarial: ArrayD<f64>,
    pub pred_before: Vec<usize>,
    pub pred_after: Vec<usize>,
    pub success: Vec<bool>,
    /// Perturbation norms in the attack's norm.
    pub norms: Vec<f64>,
    pub steps_used: usize,
}

/// One JSON-lines record per attacked sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub index: usize,
    pub label: usize,
    pub pred_before: usize,
    pub pred_after: usize,
    pub norm: f64,
    pub success: bool,
}

impl AttackResult {
    pub fn success_rate(&self) -> f64 {
        if self.success.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|&&s| s).count() as f64 / self.success.len() as f64
    }

    pub fn records(&self, labels: &[usize], first_index: usize) -> Vec<AttackRecord> {
        (0..labels.len())
            .map(|i| AttackRecord {
                index: first_index + i,
                label: labels[i],
                pred_before: self.pred_before[i],
                pred_after: self.pred_after[i],
                norm: self.norms[i],
                success: self.success[i],
            })
            .collect()
    }
}

fn check_inputs(model: &dyn DifferentiableClassifier, x: &ArrayD<f64>, y: &[usize]) -> Result<()> {
    if x.ndim() < 2 || x.shape()[0] != y.len() {
        return Err(invalid(format!("{} labels for batch of shape {:?}", y.len(), x.shape())));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= model.class_count()) {
        return Err(invalid(format!("label {bad} out of range")));
    }
    Ok(())
}

fn finish(
    model: &dyn DifferentiableClassifier,
    x: &ArrayD<f64>,
    adv: ArrayD<f64>,
    y: &[usize],
    norm: Norm,
    steps_used: usize,
) -> Result<AttackResult> {
    let pred_before = model.predict(x)?;
    let pred_after = model.predict(&adv)?;
    let success = pred_after.iter().zip(y).map(|(p, t)| p != t).collect();
    let norms = x
        .outer_iter()
        .zip(adv.outer_iter())
        .map(|(a, b)| {
            let d: Vec<f64> = a.iter().zip(b.iter()).map(|(p, q)| q - p).collect();
            norm.of(&d)
        })
        .collect();
    Ok(AttackResult {
        adversarial: adv,
        pred_before,
        pred_after,
        success,
        norms,
        steps_used,
    })
}

fn clip_to_range(model: &dyn DifferentiableClassifier, x: &mut ArrayD<f64>) {
    if let Some((lo, hi)) = model.input_range() {
        x.mapv_inplace(|v| v.clamp(lo, hi));
    }
}

/// Projects every row of `adv` onto the `eps`-ball around the matching row of `x`.
fn project(adv: &mut ArrayD<f64>, x: &ArrayD<f64>, norm: Norm, eps: f64) {
    for (mut a, o) in adv.outer_iter_mut().zip(x.outer_iter()) {
        match norm {
            Norm::Linf => a.zip_mut_with(&o, |a, &o| *a = a.clamp(o - eps, o + eps)),
            Norm::L2 => {
                let n = a.iter().zip(o.iter()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                if n > eps {
                    let k = eps / n;
                    a.zip_mut_with(&o, |a, &o| *a = o + (*a - o) * k);
                }
            }
        }
    }
}

/// `clip(x + eps * sign(grad J))`.
pub fn fgsm(model: &dyn DifferentiableClassifier, x: &ArrayD<f64>, y: &[usize], epsilon: f64) -> Result<AttackResult> {
    check_inputs(model, x, y)?;
    if !(epsilon >= 0.0) {
        return Err(invalid("epsilon must be >= 0"));
    }
    let (_, g) = model.loss_and_grad(x, y)?;
    let mut adv = x.clone();
    adv.zip_mut_with(&g, |a, &g| *a += epsilon * sign(g));
    clip_to_range(model, &mut adv);
    finish(model, x, adv, y, Norm::Linf, 1)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn random_start(row: &mut ArrayViewMutD<f64>, norm: Norm, eps: f64, seed: u64) {
    let mut rng = rng_from(seed);
    match norm {
        Norm::Linf => row.mapv_inplace(|v| v + rng.random_range(-1.0..=1.0) * eps),
        Norm::L2 => {
            let dir = standard_normal(row.shape(), &mut rng);
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let r = eps * rng.random::<f64>();
            if n > 0.0 {
                row.zip_mut_with(&dir, |v, &d| *v += d * r / n);
            }
        }
    }
}

/// Projected gradient ascent on the cross-entropy. Row `i` starts from a
/// uniform draw seeded by `derive_seed(seed, i)` when `random_start` is set.
pub fn pgd(model: &dyn DifferentiableClassifier, x: &ArrayD<f64>, y: &[usize], spec: &AttackSpec, seed: u64) -> Result<AttackResult> {
    check_inputs(model, x, y)?;
    spec.validate()?;
    let eps = spec.epsilon;
    if eps == 0.0 {
        return finish(model, x, x.clone(), y, spec.norm, 0);
    }
    let mut adv = x.clone();
    if spec.random_start {
        for (i, mut row) in adv.outer_iter_mut().enumerate() {
            random_start(&mut row, spec.norm, eps, derive_seed(seed, i as u64));
        }
        project(&mut adv, x, spec.norm, eps);
        clip_to_range(model, &mut adv);
    }
    for _ in 0..spec.steps {
        let (_, g) = model.loss_and_grad(&adv, y)?;
        match spec.norm {
            Norm::Linf => adv.zip_mut_with(&g, |a, &g| *a += spec.step_size * sign(g)),
            Norm::L2 => {
                for (mut a, gr) in adv.outer_iter_mut().zip(g.outer_iter()) {
                    let n = gr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n > 0.0 {
                        a.zip_mut_with(&gr, |a, &g| *a += spec.step_size * g / n);
                    }
                }
            }
        }
        project(&mut adv, x, spec.norm, eps);
        clip_to_range(model, &mut adv);
    }
    finish(model, x, adv, y, spec.norm, spec.steps)
}

/// PGD whose gradients are the exact end-to-end gradients of `pipeline`
/// (purifier followed by classifier). Numerical failures inside the pipeline
/// gradient are propagated unchanged.
pub fn adaptive_pgd(
    pipeline: &dyn DifferentiableClassifier,
    x: &ArrayD<f64>,
    y: &[usize],
    spec: &AttackSpec,
    seed: u64,
) -> Result<AttackResult> {
    pgd(pipeline, x, y, spec, seed)
}

/// Attacks rows in fixed-size chunks; chunk `k` uses `derive_seed(seed, k)`, so
/// results do not depend on how chunks are scheduled.
pub fn chunked<F>(x: &ArrayD<f64>, y: &[usize], chunk: usize, seed: u64, mut attack: F) -> Result<ArrayD<f64>>
where
    F: FnMut(&ArrayD<f64>, &[usize], u64) -> Result<AttackResult>,
{
    let mut out = x.clone();
    let n = y.len();
    let chunk = chunk.max(1);
    for (k, start) in (0..n).step_by(chunk).enumerate() {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let r = attack(&x.select(Axis(0), &idx), &y[start..end], derive_seed(seed, k as u64))?;
        for (i, row) in r.adversarial.outer_iter().enumerate() {
            out.index_axis_mut(Axis(0), start + i).assign(&row);
        }
    }
    Ok(out)
}
