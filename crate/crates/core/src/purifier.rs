//! Guided purification: diffuse the input to depth `t*`, then run the reverse
//! chain with a mean shift `-s * posterior_var * grad D`, where `D` compares
//! classifier outputs on the current state and on a noised copy of the input,
//! plus an SSIM term against the input itself.

use distransfer_autograd::nn::{cross_entropy, softmax_rows};
use distransfer_autograd::{grad, no_grad, Var};
use ndarray::{ArrayD, IxDyn, Zip};
use serde::{Deserialize, Serialize};

use crate::classifier::{check_labels, ClassifierModel, DifferentiableClassifier, Predictor};
use crate::diffusion::{DiffusionModel, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::metrics::SsimWindow;
use crate::rng::{derive_seed, normal_rows};

pub const DEFAULT_TSTAR_FRACTION: f64 = 0.06;
pub const DEFAULT_SCALE: f64 = 1.0;
pub const DEFAULT_PHI: f64 = 0.5;

/// Seed streams inside one sample's purification seed; step noise uses the
/// step index itself.
const STREAM_FORWARD: u64 = 0;
const STREAM_REFERENCE: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    LogitL2PlusSsim,
    LogitL2Only,
    /// `0.5 * ||x_t - x'_t||^2`, summed over the sample.
    MseOnly,
    None,
}

/// How the SSIM term enters the minimised distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsimSign {
    /// Minimise `phi * (1 - SSIM)`, pulling samples toward the input.
    Similarity,
    /// Minimise `+phi * SSIM` as written.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceNoise {
    /// One draw at the start, reused at every step.
    Shared,
    FreshPerStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceTarget {
    Logits,
    Probabilities,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub t_star: usize,
    pub s: f64,
    pub phi: f64,
    pub distance: DistanceMode,
    pub differentiable_mode: bool,
    pub ssim_sign: SsimSign,
    pub reference_noise: ReferenceNoise,
    pub target: GuidanceTarget,
}

impl GuidanceConfig {
    /// `t* = floor(0.06 T)`, `s = 1`, `phi = 0.5`; SSIM is only used for images.
    pub fn defaults(schedule: &NoiseSchedule, images: bool) -> Self {
        Self {
            t_star: (DEFAULT_TSTAR_FRACTION * schedule.steps() as f64).floor() as usize,
            s: DEFAULT_SCALE,
            phi: DEFAULT_PHI,
            distance: if images {
                DistanceMode::LogitL2PlusSsim
            } else {
                DistanceMode::LogitL2Only
            },
            differentiable_mode: false,
            ssim_sign: SsimSign::Similarity,
            reference_noise: ReferenceNoise::Shared,
            target: GuidanceTarget::Logits,
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.t_star > schedule.steps() {
            return Err(invalid(format!("t_star {} exceeds T = {}", self.t_star, schedule.steps())));
        }
        if !(self.s >= 0.0 && self.s.is_finite()) {
            return Err(invalid("guidance scale must be finite and >= 0"));
        }
        if !self.phi.is_finite() {
            return Err(invalid("phi must be finite"));
        }
        Ok(())
    }

    fn guided(&self) -> bool {
        self.s > 0.0 && self.distance != DistanceMode::None
    }
}

/// Guidance distance and gradient norm of every sample at one reverse step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub distance: Vec<f64>,
    pub grad_norm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PurifyTrace {
    /// In execution order, from `t*` down to 1.
    pub steps: Vec<StepRecord>,
    pub output: ArrayD<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub sample: usize,
    pub step: usize,
    pub distance: f64,
    pub grad_norm: f64,
}

impl PurifyTrace {
    /// One JSON-lines record per (sample, step).
    pub fn lines(&self, first_sample: usize) -> Vec<TraceLine> {
        let mut out = Vec::new();
        for rec in &self.steps {
            for (i, (&d, &g)) in rec.distance.iter().zip(&rec.grad_norm).enumerate() {
                out.push(TraceLine {
                    sample: first_sample + i,
                    step: rec.t,
                    distance: d,
                    grad_norm: g,
                });
            }
        }
        out.sort_by_key(|l| (l.sample, std::cmp::Reverse(l.step)));
        out
    }
}

/// Per-sample distance between classifier outputs plus an optional SSIM term.
struct Distance<'a> {
    clf: &'a ClassifierModel,
    mode: DistanceMode,
    target: GuidanceTarget,
    ssim: Option<SsimWindow>,
}

impl<'a> Distance<'a> {
    fn new(clf: &'a ClassifierModel, mode: DistanceMode, target: GuidanceTarget) -> Result<Self> {
        let shape = clf.input_shape();
        let images = clf.is_image_model();
        if mode == DistanceMode::LogitL2PlusSsim && !images {
            return Err(Error::UnsupportedMode("the SSIM term needs image data".into()));
        }
        let ssim = images.then(|| SsimWindow::new(shape[1], shape[2]));
        Ok(Self { clf, mode, target, ssim })
    }

    fn output(&self, x: &Var) -> Var {
        let logits = self.clf.logits_var(x);
        match self.target {
            GuidanceTarget::Logits => logits,
            GuidanceTarget::Probabilities => softmax_rows(&logits),
        }
    }

    /// Shape `(batch,)`. The SSIM term enters as `ssim_weight * SSIM + ssim_offset`.
    fn eval(&self, x_t: &Var, x_ref: &Var, x_in: &Var, ssim_weight: f64, ssim_offset: f64) -> Var {
        let b = x_t.shape()[0];
        match self.mode {
            DistanceMode::None => Var::constant(ArrayD::zeros(IxDyn(&[b]))),
            DistanceMode::MseOnly => {
                let d: usize = x_t.shape()[1..].iter().product();
                x_t.sub(x_ref).square().reshape(&[b, d]).sum_axis(1).scale(0.5)
            }
            DistanceMode::LogitL2Only | DistanceMode::LogitL2PlusSsim => {
                let logit = self.output(x_ref).sub(&self.output(x_t)).square().sum_axis(1).sqrt();
                if self.mode == DistanceMode::LogitL2Only || ssim_weight == 0.0 {
                    return logit;
                }
                let ssim = self.ssim.as_ref().expect("image data").var(x_in, x_t);
                logit.add(&ssim.scale(ssim_weight).add_scalar(ssim_offset))
            }
        }
    }
}

/// Shared state for building guided reverse steps.
struct Guide<'a> {
    diff: &'a DiffusionModel,
    cfg: GuidanceConfig,
    dist: Distance<'a>,
}

impl<'a> Guide<'a> {
    fn new(diff: &'a DiffusionModel, clf: &'a ClassifierModel, cfg: GuidanceConfig) -> Result<Self> {
        cfg.validate(diff.schedule())?;
        if diff.sample_shape() != clf.input_shape() {
            return Err(invalid(format!(
                "diffusion sample shape {:?} differs from classifier input {:?}",
                diff.sample_shape(),
                clf.input_shape()
            )));
        }
        let dist = Distance::new(clf, cfg.distance, cfg.target)?;
        Ok(Self { diff, cfg, dist })
    }

    /// The quantity whose gradient drives the mean shift.
    fn guidance(&self, x_t: &Var, x_ref: &Var, x_in: &Var) -> Var {
        let phi = self.cfg.phi;
        let (w, c) = match self.cfg.ssim_sign {
            SsimSign::Similarity => (-phi, phi),
            SsimSign::Literal => (phi, 0.0),
        };
        self.dist.eval(x_t, x_ref, x_in, w, c)
    }

    /// Guidance values and their gradient with respect to `x_t`.
    fn guidance_grad(&self, x_t: &ArrayD<f64>, x_ref: &ArrayD<f64>, x_in: &ArrayD<f64>, t: usize) -> Result<(Vec<f64>, ArrayD<f64>)> {
        let xv = Var::leaf(x_t.clone());
        let d = self.guidance(&xv, &Var::constant(x_ref.clone()), &Var::constant(x_in.clone()));
        let g = grad(&d.sum(), &[&xv], false).remove(0).value().clone();
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure {
                step: t,
                detail: "non-finite guidance gradient".into(),
            });
        }
        Ok((d.value().iter().cloned().collect(), g))
    }

    /// `mean - s * var * grad + sqrt(var) * z`; `z` is ignored at `t = 1`.
    fn step(&self, x_t: &ArrayD<f64>, x_ref: &ArrayD<f64>, x_in: &ArrayD<f64>, t: usize, z: &ArrayD<f64>) -> Result<(ArrayD<f64>, Option<StepRecord>)> {
        let sched = self.diff.schedule();
        let var = sched.posterior_var(t);
        let mut x = self.diff.posterior_mean(x_t, t)?;
        let mut record = None;
        if self.cfg.guided() {
            let (d, g) = self.guidance_grad(x_t, x_ref, x_in, t)?;
            let k = self.cfg.s * var;
            x.zip_mut_with(&g, |m, &g| *m -= k * g);
            record = Some(StepRecord {
                t,
                distance: d,
                grad_norm: row_norms(&g),
            });
        }
        if t > 1 {
            let sd = var.sqrt();
            x.zip_mut_with(z, |m, &z| *m += sd * z);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure {
                step: t,
                detail: "non-finite reverse-step state".into(),
            });
        }
        Ok((x, record))
    }
}

fn row_norms(g: &ArrayD<f64>) -> Vec<f64> {
    g.outer_iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

/// `sqrt(a) * x + sqrt(1 - a) * noise` for `a = alpha_bar_t`.
fn noised(schedule: &NoiseSchedule, x: &ArrayD<f64>, t: usize, noise: &ArrayD<f64>) -> ArrayD<f64> {
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Zip::from(x).and(noise).map_collect(|&x, &z| a * x + b * z)
}

/// Deterministic noise streams of one batch, derived per sample.
struct Streams<'s> {
    sample_seeds: &'s [u64],
    shape: Vec<usize>,
}

impl Streams<'_> {
    fn draw(&self, stream: u64) -> ArrayD<f64> {
        let seeds: Vec<u64> = self.sample_seeds.iter().map(|&s| derive_seed(s, stream)).collect();
        normal_rows(&self.shape, &seeds)
    }

    fn forward(&self) -> ArrayD<f64> {
        self.draw(STREAM_FORWARD)
    }

    fn step(&self, t: usize) -> ArrayD<f64> {
        self.draw(t as u64)
    }

    fn reference(&self, cfg: &GuidanceConfig, eps_star: &ArrayD<f64>, t: usize) -> ArrayD<f64> {
        match cfg.reference_noise {
            ReferenceNoise::Shared => eps_star.clone(),
            ReferenceNoise::FreshPerStep => self.draw(STREAM_REFERENCE + t as u64),
        }
    }
}

fn check_input(diff: &DiffusionModel, x_in: &ArrayD<f64>, sample_seeds: &[u64]) -> Result<()> {
    diff.check_batch(x_in)?;
    if sample_seeds.len() != x_in.shape()[0] {
        return Err(invalid("one seed per sample is required"));
    }
    Ok(())
}

fn clamp_output(diff: &DiffusionModel, x: &mut ArrayD<f64>) {
    if diff.is_image_model() {
        x.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
}

/// Purifies a batch; sample `i` draws all of its noise from `derive_seed(seed, i)`.
pub fn purify(
    diff: &DiffusionModel,
    clf: &ClassifierModel,
    x_in: &ArrayD<f64>,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<(ArrayD<f64>, PurifyTrace)> {
    let seeds: Vec<u64> = (0..x_in.shape().first().copied().unwrap_or(0) as u64)
        .map(|i| derive_seed(seed, i))
        .collect();
    purify_with_seeds(diff, clf, x_in, cfg, &seeds)
}

/// Purifies a batch with explicit per-sample seeds, so the result for a
/// sample does not depend on which batch it is processed in.
pub fn purify_with_seeds(
    diff: &DiffusionModel,
    clf: &ClassifierModel,
    x_in: &ArrayD<f64>,
    cfg: &GuidanceConfig,
    sample_seeds: &[u64],
) -> Result<(ArrayD<f64>, PurifyTrace)> {
    let guide = Guide::new(diff, clf, *cfg)?;
    check_input(diff, x_in, sample_seeds)?;
    if cfg.t_star == 0 || x_in.shape()[0] == 0 {
        return Ok((
            x_in.clone(),
            PurifyTrace {
                steps: Vec::new(),
                output: x_in.clone(),
            },
        ));
    }
    let sched = diff.schedule();
    let streams = Streams {
        sample_seeds,
        shape: diff.sample_shape().to_vec(),
    };
    let eps_star = streams.forward();
    let mut x = noised(sched, x_in, cfg.t_star, &eps_star);
    let mut steps = Vec::with_capacity(cfg.t_star);
    for t in (1..=cfg.t_star).rev() {
        let x_ref = noised(sched, x_in, t, &streams.reference(cfg, &eps_star, t));
        let (next, record) = guide.step(&x, &x_ref, x_in, t, &streams.step(t))?;
        steps.push(record.unwrap_or_else(|| StepRecord {
            t,
            distance: vec![0.0; x_in.shape()[0]],
            grad_norm: vec![0.0; x_in.shape()[0]],
        }));
        x = next;
    }
    clamp_output(diff, &mut x);
    Ok((x.clone(), PurifyTrace { steps, output: x }))
}

/// Literal distance `||f(x'_t) - f(x_t)||_2 + phi * SSIM(x_in, x_t)` per sample
/// (the SSIM term is absent for `logit_l2_only`).
pub fn guidance_distance(
    clf: &ClassifierModel,
    x_t: &ArrayD<f64>,
    x_ref_t: &ArrayD<f64>,
    x_in: &ArrayD<f64>,
    phi: f64,
    mode: DistanceMode,
) -> Result<Vec<f64>> {
    clf.logits(x_t)?;
    if x_t.shape() != x_ref_t.shape() || x_t.shape() != x_in.shape() {
        return Err(invalid("x_t, x_ref_t and x_in must share one shape"));
    }
    let dist = Distance::new(clf, mode, GuidanceTarget::Logits)?;
    let d = no_grad(|| {
        dist.eval(
            &Var::constant(x_t.clone()),
            &Var::constant(x_ref_t.clone()),
            &Var::constant(x_in.clone()),
            phi,
            0.0,
        )
    });
    Ok(d.value().iter().cloned().collect())
}

/// One guided reverse step; row `i` draws its noise from `derive_seed(seed, i)`
/// exactly as [`DiffusionModel::reverse_step`] does.
#[allow(clippy::too_many_arguments)]
pub fn guided_reverse_step(
    diff: &DiffusionModel,
    clf: &ClassifierModel,
    x_t: &ArrayD<f64>,
    x_ref_t: &ArrayD<f64>,
    x_in: &ArrayD<f64>,
    t: usize,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<ArrayD<f64>> {
    diff.check_batch(x_t)?;
    diff.schedule().check_step(t)?;
    if x_ref_t.shape() != x_t.shape() || x_in.shape() != x_t.shape() {
        return Err(invalid("x_t, x_ref_t and x_in must share one shape"));
    }
    let mut cfg = *cfg;
    cfg.t_star = cfg.t_star.min(diff.schedule().steps());
    let guide = Guide::new(diff, clf, cfg)?;
    let seeds: Vec<u64> = (0..x_t.shape()[0] as u64).map(|i| derive_seed(seed, i)).collect();
    let z = normal_rows(diff.sample_shape(), &seeds);
    Ok(guide.step(x_t, x_ref_t, x_in, t, &z)?.0)
}

/// Gradient of the guidance quantity with respect to `x_t` (the mean shift
/// divided by `-s * posterior_var`).
pub fn guidance_gradient(
    diff: &DiffusionModel,
    clf: &ClassifierModel,
    x_t: &ArrayD<f64>,
    x_ref_t: &ArrayD<f64>,
    x_in: &ArrayD<f64>,
    cfg: &GuidanceConfig,
) -> Result<ArrayD<f64>> {
    let mut cfg = *cfg;
    cfg.t_star = 0;
    let guide = Guide::new(diff, clf, cfg)?;
    Ok(guide.guidance_grad(x_t, x_ref_t, x_in, 0)?.1)
}

/// The defended classifier `x -> f(K(x))` with fixed purification seeds.
#[derive(Debug, Clone, Copy)]
pub struct PurifiedClassifier<'a> {
    pub diff: &'a DiffusionModel,
    pub clf: &'a ClassifierModel,
    pub cfg: GuidanceConfig,
    pub seed: u64,
}

impl<'a> PurifiedClassifier<'a> {
    pub fn new(diff: &'a DiffusionModel, clf: &'a ClassifierModel, cfg: GuidanceConfig, seed: u64) -> Self {
        Self { diff, clf, cfg, seed }
    }

    fn sample_seeds(&self, n: usize) -> Vec<u64> {
        (0..n as u64).map(|i| derive_seed(self.seed, i)).collect()
    }

    pub fn purify(&self, x: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let seeds = self.sample_seeds(x.shape().first().copied().unwrap_or(0));
        Ok(purify_with_seeds(self.diff, self.clf, x, &self.cfg, &seeds)?.0)
    }

    /// Mean cross-entropy of the pipeline, forward only.
    pub fn loss(&self, x: &ArrayD<f64>, y: &[usize]) -> Result<f64> {
        let purified = self.purify(x)?;
        check_labels(y, x.shape()[0], self.clf.class_count())?;
        Ok(no_grad(|| cross_entropy(&self.clf.logits_var(&Var::constant(purified)), y).item()))
    }

    /// Exact gradient of the pipeline loss. Every reverse step is recomputed
    /// from its stored input with a graph that includes the inner guidance
    /// gradient, and its vector-Jacobian product is pulled back one step at a
    /// time, so memory stays at one step's graph.
    fn exact_loss_and_grad(&self, x_in: &ArrayD<f64>, y: &[usize]) -> Result<(f64, ArrayD<f64>)> {
        let n = x_in.shape()[0];
        check_labels(y, n, self.clf.class_count())?;
        let guide = Guide::new(self.diff, self.clf, self.cfg)?;
        let seeds = self.sample_seeds(n);
        check_input(self.diff, x_in, &seeds)?;
        let sched = self.diff.schedule();
        let t_star = self.cfg.t_star;
        if t_star == 0 {
            return self.clf.loss_and_input_grad(x_in, y);
        }
        let streams = Streams {
            sample_seeds: &seeds,
            shape: self.diff.sample_shape().to_vec(),
        };
        let eps_star = streams.forward();
        // states[k] holds x at step t* - k
        let mut states = Vec::with_capacity(t_star + 1);
        states.push(noised(sched, x_in, t_star, &eps_star));
        for t in (1..=t_star).rev() {
            let x_ref = noised(sched, x_in, t, &streams.reference(&self.cfg, &eps_star, t));
            let cur = states.last().expect("state");
            let (next, _) = guide.step(cur, &x_ref, x_in, t, &streams.step(t))?;
            states.push(next);
        }
        let x0 = Var::leaf(states[t_star].clone());
        let clipped = if self.diff.is_image_model() { x0.clamp(0.0, 1.0) } else { x0.clone() };
        let loss = cross_entropy(&self.clf.logits_var(&clipped), y);
        let mut g = grad(&loss, &[&x0], false).remove(0).value().clone();
        let mut g_in = ArrayD::zeros(x_in.raw_dim());
        for t in 1..=t_star {
            let xt = Var::leaf(states[t_star - t].clone());
            let xin = Var::leaf(x_in.clone());
            let ab = sched.alpha_bar(t);
            let ref_noise = Var::constant(streams.reference(&self.cfg, &eps_star, t));
            let x_ref = xin.scale(ab.sqrt()).add(&ref_noise.scale((1.0 - ab).sqrt()));
            let mut next = self.diff.mean_var(&xt, t);
            if self.cfg.guided() {
                let d = guide.guidance(&xt, &x_ref, &xin).sum();
                let gd = grad(&d, &[&xt], true).remove(0);
                next = next.sub(&gd.scale(self.cfg.s * sched.posterior_var(t)));
            }
            let vjp = next.mul(&Var::constant(g.clone())).sum();
            let mut grads = grad(&vjp, &[&xt, &xin], false);
            let gi = grads.pop().expect("input grad").value().clone();
            let gt = grads.pop().expect("state grad").value().clone();
            if gt.iter().chain(gi.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NumericalFailure {
                    step: t,
                    detail: "non-finite pipeline gradient".into(),
                });
            }
            g_in += &gi;
            g = gt;
        }
        let a = sched.alpha_bar(t_star).sqrt();
        g_in.zip_mut_with(&g, |acc, &v| *acc += a * v);
        Ok((loss.item(), g_in))
    }
}

impl Predictor for PurifiedClassifier<'_> {
    fn class_count(&self) -> usize {
        self.clf.class_count()
    }

    fn predict(&self, batch: &ArrayD<f64>) -> Result<Vec<usize>> {
        self.clf.predict(&self.purify(batch)?)
    }
}

impl DifferentiableClassifier for PurifiedClassifier<'_> {
    fn input_range(&self) -> Option<(f64, f64)> {
        self.clf.input_range()
    }

    fn loss_and_grad(&self, x: &ArrayD<f64>, y: &[usize]) -> Result<(f64, ArrayD<f64>)> {
        if !self.cfg.differentiable_mode {
            return Err(Error::UnsupportedMode(
                "pipeline gradients need differentiable_mode = true".into(),
            ));
        }
        self.exact_loss_and_grad(x, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Architecture;
    use crate::datasets::{make_gaussian_mixture, make_shape_images};
    use crate::diffusion::{default_schedule, make_schedule};
    use crate::metrics::ssim;
    use crate::rng::{rng_from, standard_normal};
    use ndarray::Axis;

    fn image_models() -> (DiffusionModel, ClassifierModel, ArrayD<f64>) {
        let diff = DiffusionModel::init(default_schedule(), &[1, 8, 8], 3).unwrap();
        let clf = ClassifierModel::init(Architecture::SmallConv, &[1, 8, 8], 3, 4).unwrap();
        let mut rng = rng_from(9);
        let x = standard_normal(&[2, 1, 8, 8], &mut rng).mapv(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0));
        (diff, clf, x)
    }

    fn point_models() -> (DiffusionModel, ClassifierModel, ArrayD<f64>) {
        let diff = DiffusionModel::init(make_schedule(20, 1e-3, 0.2).unwrap(), &[2], 1).unwrap();
        let clf = ClassifierModel::init(Architecture::Mlp, &[2], 4, 2).unwrap();
        let x = make_gaussian_mixture(1, 4, 0.1, 0).unwrap().samples().clone();
        (diff, clf, x)
    }

    #[test]
    fn zero_depth_is_identity() {
        let (diff, clf, x) = image_models();
        let mut cfg = GuidanceConfig::defaults(diff.schedule(), true);
        cfg.t_star = 0;
        let (out, trace) = purify(&diff, &clf, &x, &cfg, 5).unwrap();
        assert_eq!(out, x);
        assert!(trace.steps.is_empty());
    }

    #[test]
    fn trace_covers_every_step_and_output_is_clamped() {
        let (diff, clf, x) = image_models();
        let mut cfg = GuidanceConfig::defaults(diff.schedule(), true);
        cfg.t_star = 7;
        let (out, trace) = purify(&diff, &clf, &x, &cfg, 5).unwrap();
        assert_eq!(trace.steps.len(), 7);
        assert_eq!(trace.steps[0].t, 7);
        assert_eq!(out.shape(), x.shape());
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(trace.lines(0).len(), 14);
        let again = purify(&diff, &clf, &x, &cfg, 5).unwrap().0;
        assert_eq!(out, again);
    }

    #[test]
    fn zero_scale_matches_unguided_chain_bitwise() {
        let (diff, clf, x) = image_models();
        let mut cfg = GuidanceConfig::defaults(diff.schedule(), true);
        cfg.t_star = 5;
        cfg.s = 0.0;
        let a = purify(&diff, &clf, &x, &cfg, 8).unwrap().0;
        cfg.distance = DistanceMode::None;
        cfg.s = 3.0;
        let b = purify(&diff, &clf, &x, &cfg, 8).unwrap().0;
        assert_eq!(a, b);
        // the same chain built from reverse_step
        let seeds: Vec<u64> = (0..2).map(|i| derive_seed(8, i)).collect();
        let streams = Streams {
            sample_seeds: &seeds,
            shape: vec![1, 8, 8],
        };
        let mut xt = noised(diff.schedule(), &x, 5, &streams.forward());
        for t in (1..=5).rev() {
            let mut m = diff.posterior_mean(&xt, t).unwrap();
            if t > 1 {
                let sd = diff.schedule().posterior_var(t).sqrt();
                m.zip_mut_with(&streams.step(t), |m, &z| *m += sd * z);
            }
            xt = m;
        }
        xt.mapv_inplace(|v| v.clamp(0.0, 1.0));
        assert_eq!(a, xt);
    }

    #[test]
    fn zero_scale_step_equals_reverse_step() {
        let (diff, clf, x) = image_models();
        let mut cfg = GuidanceConfig::defaults(diff.schedule(), true);
        cfg.s = 0.0;
        let xt = &x + 0.1;
        for t in [1, 30] {
            let a = guided_reverse_step(&diff, &clf, &xt, &x, &x, t, &cfg, 4).unwrap();
            assert_eq!(a, diff.reverse_step(&xt, t, 4).unwrap());
        }
    }

    #[test]
    fn quadratic_distance_shifts_the_mean_analytically() {
        let (diff, clf, x) = image_models();
        let mut cfg = GuidanceConfig::defaults(diff.schedule(), true);
        cfg.distance = DistanceMode::MseOnly;
        cfg.s = 2.5;
        let c = x.mapv(|v| 1.0 - v);
        let xt = &x * 0.7;
        let t = 1;
        let guided = guided_reverse_step(&diff, &clf, &xt, &c, &x, t, &cfg, 0).unwrap();
        let plain = diff.reverse_step(&xt, t, 0).unwrap();
        let k = cfg.s * diff.schedule().posterior_var(t);
        let t = 12;
        let guided12 = guided_reverse_step(&diff, &clf, &xt, &c, &x, t, &cfg, 0).unwrap();
        let plain12 = diff.reverse_step(&xt, t, 0).unwrap();
        let k12 = cfg.s * diff.schedule().posterior_var(t);
        for i in 0..x.len() {
            let (g, p, xv, cv) = (
                guided.as_slice().unwrap()[i],
                plain.as_slice().unwrap()[i],
                xt.as_slice().unwrap()[i],
                c.as_slice().unwrap()[i],
            );
            assert!((g - p + k * (xv - cv)).abs() < 1e-14);
            let (g, p) = (guided12.as_slice().unwrap()[i], plain12.as_slice().unwrap()[i]);
            assert!((g - p + k12 * (xv - cv)).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_distance_is_phi_and_phi_zero_isolates_logits() {
        let (_, clf, x) = image_models();
        let d = guidance_distance(&clf, &x, &x, &x, 0.7, DistanceMode::LogitL2PlusSsim).unwrap();
        assert!(d.iter().all(|v| (v - 0.7).abs() < 1e-12));
        let other = x.mapv(|v| 1.0 - v);
        let d0 = guidance_distance(&clf, &x, &other, &x, 0.0, DistanceMode::LogitL2PlusSsim).unwrap();
        let la = clf.logits(&x).unwrap();
        let lb = clf.logits(&other).unwrap();
        for i in 0..2 {
            let expect = la
                .index_axis(Axis(0), i)
                .iter()
                .zip(lb.index_axis(Axis(0), i).iter())
                .map(|(p, q)| (p - q).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((d0[i] - expect).abs() < 1e-12);
            let with_ssim = guidance_distance(&clf, &x, &other, &other, 0.3, DistanceMode::LogitL2PlusSsim).unwrap();
            let s = ssim(&other.index_axis(Axis(0), i).to_owned(), &x.index_axis(Axis(0), i).to_owned()).unwrap();
            assert!((with_ssim[i] - (expect + 0.3 * s)).abs() < 1e-9);
        }
    }

    #[test]
    fn ssim_term_is_rejected_on_points() {
        let (diff, clf, x) = point_models();
        let err = guidance_distance(&clf, &x, &x, &x, 0.5, DistanceMode::LogitL2PlusSsim);
        assert!(matches!(err, Err(Error::UnsupportedMode(_))));
        let mut cfg = GuidanceConfig::defaults(diff.schedule(), false);
        cfg.distance = DistanceMode::LogitL2PlusSsim;
        cfg.t_star = 3;
        assert!(matches!(purify(&diff, &clf, &x, &cfg, 0), Err(Error::UnsupportedMode(_))));
    }

    #[test]
    fn t_star_beyond_schedule_is_rejected() {
        let (diff, clf, x) = point_models();
        let mut cfg = GuidanceConfig::defaults(diff.schedule(), false);
        cfg.t_star = 21;
        assert!(matches!(purify(&diff, &clf, &x, &cfg, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn gradients_require_differentiable_mode() {
        let (diff, clf, x) = point_models();
        let cfg = GuidanceConfig::defaults(diff.schedule(), false);
        let p = PurifiedClassifier::new(&diff, &clf, cfg, 0);
        assert!(matches!(p.loss_and_grad(&x, &[0, 1, 2, 3]), Err(Error::UnsupportedMode(_))));
    }

    fn fd_pipeline_check(cfg: GuidanceConfig, diff: &DiffusionModel, clf: &ClassifierModel, x: &ArrayD<f64>, y: &[usize]) -> f64 {
        let p = PurifiedClassifier::new(diff, clf, cfg, 11);
        let (_, g) = p.loss_and_grad(x, y).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            xm.as_slice_mut().unwrap()[i] -= h;
            let fd = (p.loss(&xp, y).unwrap() - p.loss(&xm, y).unwrap()) / (2.0 * h);
            worst = worst.max((fd - g.as_slice().unwrap()[i]).abs() / scale);
        }
        worst
    }

    #[test]
    fn pipeline_gradient_matches_finite_differences_on_points() {
        let (diff, clf, x) = point_models();
        let mut cfg = GuidanceConfig::defaults(diff.schedule(), false);
        cfg.t_star = 5;
        cfg.s = 2.0;
        cfg.differentiable_mode = true;
        let err = fd_pipeline_check(cfg, &diff, &clf, &x, &[0, 1, 2, 3]);
        assert!(err < 1e-4, "{err}");
        cfg.reference_noise = ReferenceNoise::FreshPerStep;
        cfg.target = GuidanceTarget::Probabilities;
        let err = fd_pipeline_check(cfg, &diff, &clf, &x, &[0, 1, 2, 3]);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn pipeline_gradient_matches_finite_differences_on_images() {
        let ds = make_shape_images(1, 12, 2).unwrap();
        let diff = DiffusionModel::init(make_schedule(20, 1e-3, 0.2).unwrap(), &[1, 12, 12], 3).unwrap();
        let clf = ClassifierModel::init(Architecture::SmallConv, &[1, 12, 12], 3, 4).unwrap();
        let mut cfg = GuidanceConfig::defaults(diff.schedule(), true);
        cfg.t_star = 2;
        cfg.differentiable_mode = true;
        // keep the final state inside [0, 1] so the clamp is inactive around x
        let x = ds.samples().mapv(|v| 0.3 + 0.4 * v);
        let err = fd_pipeline_check(cfg, &diff, &clf, &x.select(Axis(0), &[0]), &[0]);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn guidance_gradient_matches_finite_differences() {
        let (diff, clf, x) = image_models();
        let mut cfg = GuidanceConfig::defaults(diff.schedule(), true);
        cfg.ssim_sign = SsimSign::Literal;
        let mut rng = rng_from(1);
        let xt = &x + &(standard_normal(x.shape(), &mut rng) * 0.3);
        let xref = &x + &(standard_normal(x.shape(), &mut rng) * 0.3);
        let g = guidance_gradient(&diff, &clf, &xt, &xref, &x, &cfg).unwrap();
        let f = |v: &ArrayD<f64>| -> f64 {
            guidance_distance(&clf, v, &xref, &x, cfg.phi, cfg.distance).unwrap().iter().sum()
        };
        let h = 1e-5;
        let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..x.len() {
            let mut p = xt.clone();
            let mut m = xt.clone();
            p.as_slice_mut().unwrap()[i] += h;
            m.as_slice_mut().unwrap()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - g.as_slice().unwrap()[i]).abs() / scale < 1e-6);
        }
    }
}
