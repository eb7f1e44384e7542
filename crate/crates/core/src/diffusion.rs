//! DDPM core: linear noise schedule, closed-form and iterative forward
//! diffusion, epsilon-prediction training and ancestral reverse sampling.

use std::path::Path;

use distransfer_autograd::nn::{conv2d, linear, timestep_embedding, Adam};
use distransfer_autograd::sparse::{avg_pool2, im2col, upsample2};
use distransfer_autograd::{grad, no_grad, SparseMap, Var};
use ndarray::{ArrayD, Axis, IxDyn, Zip};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::io::{self, NamedParams};
use crate::rng::{derive_seed, rng_from, standard_normal, Rng};

pub const DEFAULT_T: usize = 200;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.05;

/// Linear beta schedule. Index `t - 1` holds the value for step `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

pub fn make_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max < 2 {
        return Err(invalid("schedule needs at least 2 steps"));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(invalid(format!(
            "need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..t_max)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64)
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let posterior_var = (0..t_max)
        .map(|i| {
            let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
            beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i])
        })
        .collect();
    Ok(NoiseSchedule {
        t_max,
        beta_start,
        beta_end,
        beta,
        alpha,
        alpha_bar,
        posterior_var,
    })
}

pub fn default_schedule() -> NoiseSchedule {
    make_schedule(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.t_max
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max {
            return Err(invalid(format!("step {t} outside 1..={}", self.t_max)));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[t - 1]
    }
}

/// `sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * noise`.
pub fn forward_sample(schedule: &NoiseSchedule, x0: &ArrayD<f64>, t: usize, noise: &ArrayD<f64>) -> Result<ArrayD<f64>> {
    schedule.check_step(t)?;
    if x0.shape() != noise.shape() {
        return Err(invalid("noise must be shaped like x0"));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Zip::from(x0).and(noise).map_collect(|&x, &z| a * x + b * z))
}

/// Runs `t` single-step transitions `x_s = sqrt(alpha_s) x_{s-1} + sqrt(beta_s) z`.
pub fn forward_chain(schedule: &NoiseSchedule, x0: &ArrayD<f64>, t: usize, seed: u64) -> Result<ArrayD<f64>> {
    schedule.check_step(t)?;
    let mut rng = rng_from(seed);
    let mut x = x0.clone();
    for s in 1..=t {
        let z = standard_normal(x.shape(), &mut rng);
        let (a, b) = (schedule.alpha(s).sqrt(), schedule.beta(s).sqrt());
        x.zip_mut_with(&z, |x, &z| *x = a * *x + b * z);
    }
    Ok(x)
}

pub const MLP_WIDTH: usize = 128;
pub const MLP_DEPTH: usize = 3;
pub const TIME_DIM: usize = 32;
pub const UNET_CHANNELS: [usize; 3] = [16, 32, 64];
const UNET_TIME_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsArchitecture {
    Mlp,
    Unet,
}

impl EpsArchitecture {
    pub fn name(self) -> &'static str {
        match self {
            EpsArchitecture::Mlp => "mlp",
            EpsArchitecture::Unet => "unet",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(EpsArchitecture::Mlp),
            "unet" => Ok(EpsArchitecture::Unet),
            other => Err(invalid(format!("unknown eps-net architecture {other:?}"))),
        }
    }

    /// MLP for point data, UNet for single-channel images.
    pub fn for_shape(sample_shape: &[usize]) -> Self {
        if sample_shape.len() == 3 {
            EpsArchitecture::Unet
        } else {
            EpsArchitecture::Mlp
        }
    }
}

#[derive(Debug, Clone)]
struct UnetMaps {
    conv: [SparseMap; 7],
    pool: [SparseMap; 2],
    up: [SparseMap; 2],
}

impl UnetMaps {
    fn new(h: usize, w: usize) -> Self {
        let [c1, c2, c3] = UNET_CHANNELS;
        let (h2, w2, h3, w3) = (h / 2, w / 2, h / 4, w / 4);
        Self {
            conv: [
                im2col(h, w, 1, 3),
                im2col(h, w, c1, 3),
                im2col(h2, w2, c1, 3),
                im2col(h3, w3, c2, 3),
                im2col(h3, w3, c3, 3),
                im2col(h2, w2, c3 + c2, 3),
                im2col(h, w, c2 + c1, 3),
            ],
            pool: [avg_pool2(h, w, c1), avg_pool2(h2, w2, c2)],
            up: [upsample2(h3, w3, c3), upsample2(h2, w2, c2)],
        }
    }
}

/// Epsilon-prediction network together with its schedule.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    schedule: NoiseSchedule,
    arch: EpsArchitecture,
    params: NamedParams,
    sample_shape: Vec<usize>,
    seed: u64,
    maps: Option<UnetMaps>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainReport {
    pub epoch_losses: Vec<f64>,
    pub seed: u64,
}

fn weight(shape: &[usize], fan_in: usize, gain: f64, rng: &mut Rng) -> ArrayD<f64> {
    standard_normal(shape, rng) * (gain / fan_in as f64).sqrt()
}

/// Nominal per-coordinate scale of the data used by the preconditioning.
pub const DATA_SCALE: f64 = 0.5;

/// Multiplies row `i` of `x` by `c[i]`.
fn row_scale(x: &Var, c: &[f64]) -> Var {
    let row: usize = x.shape()[1..].iter().product();
    let k = ArrayD::from_shape_fn(IxDyn(x.shape()), |idx| c[idx[0]]);
    debug_assert_eq!(k.len(), c.len() * row);
    x.mul(&Var::constant(k))
}

fn zeros(n: usize) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(&[n]))
}

fn dense(name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut Rng) -> [(String, ArrayD<f64>); 2] {
    [
        (format!("{name}.w"), weight(&[fan_in, fan_out], fan_in, gain, rng)),
        (format!("{name}.b"), zeros(fan_out)),
    ]
}

impl DiffusionModel {
    pub fn init(schedule: NoiseSchedule, sample_shape: &[usize], seed: u64) -> Result<Self> {
        let arch = EpsArchitecture::for_shape(sample_shape);
        let mut rng = rng_from(seed);
        let mut params = NamedParams::new();
        match arch {
            EpsArchitecture::Mlp => {
                let d = single_dim(sample_shape)?;
                let mut fan_in = d + TIME_DIM;
                for i in 0..MLP_DEPTH {
                    params.extend(dense(&format!("fc{i}"), fan_in, MLP_WIDTH, 2.0, &mut rng));
                    fan_in = MLP_WIDTH;
                }
                params.extend(dense("out", MLP_WIDTH, d, 1.0, &mut rng));
            }
            EpsArchitecture::Unet => {
                unet_dims(sample_shape)?;
                let [c1, c2, c3] = UNET_CHANNELS;
                params.extend(dense("time", TIME_DIM, UNET_TIME_HIDDEN, 2.0, &mut rng));
                let convs = [
                    ("enc1a", 1, c1),
                    ("enc1b", c1, c1),
                    ("enc2", c1, c2),
                    ("mid_a", c2, c3),
                    ("mid_b", c3, c3),
                    ("dec2", c3 + c2, c2),
                    ("dec1", c2 + c1, c1),
                ];
                for (name, cin, cout) in convs {
                    params.extend(dense(name, 9 * cin, cout, 2.0, &mut rng));
                }
                for (name, c) in [("temb1", c1), ("temb2", c2), ("temb3", c3), ("temb4", c2), ("temb5", c1)] {
                    params.extend(dense(name, UNET_TIME_HIDDEN, c, 1.0, &mut rng));
                }
                params.extend(dense("out", c1, 1, 0.1, &mut rng));
            }
        }
        Self::from_params(schedule, params, sample_shape, seed)
    }

    pub fn from_params(schedule: NoiseSchedule, params: NamedParams, sample_shape: &[usize], seed: u64) -> Result<Self> {
        let arch = EpsArchitecture::for_shape(sample_shape);
        let maps = match arch {
            EpsArchitecture::Unet => {
                let (h, w) = unet_dims(sample_shape)?;
                Some(UnetMaps::new(h, w))
            }
            EpsArchitecture::Mlp => None,
        };
        let expected = match arch {
            EpsArchitecture::Mlp => 2 * (MLP_DEPTH + 1),
            EpsArchitecture::Unet => 2 * 14,
        };
        if params.len() != expected {
            return Err(invalid(format!("expected {expected} eps-net parameter arrays, got {}", params.len())));
        }
        Ok(Self {
            schedule,
            arch,
            params,
            sample_shape: sample_shape.to_vec(),
            seed,
            maps,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn architecture(&self) -> EpsArchitecture {
        self.arch
    }

    pub fn params(&self) -> &NamedParams {
        &self.params
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_image_model(&self) -> bool {
        self.sample_shape.len() == 3
    }

    pub fn check_batch(&self, x: &ArrayD<f64>) -> Result<()> {
        if x.ndim() == 0 || x.shape()[1..] != self.sample_shape[..] {
            return Err(invalid(format!(
                "batch shape {:?} does not match diffusion model sample shape {:?}",
                x.shape(),
                self.sample_shape
            )));
        }
        Ok(())
    }

    fn param_vars(&self, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, p)| if trainable { Var::leaf(p.clone()) } else { Var::constant(p.clone()) })
            .collect()
    }

    /// Preconditioned noise prediction. With `s^2 = (1 - abar) / abar` the raw
    /// network `F` acts as a denoiser on `x / sqrt(abar)`, and
    /// `eps = x s / ((s^2 + sd^2) sqrt(abar)) + F(c_in x / sqrt(abar)) sd / sqrt(s^2 + sd^2)`.
    /// The coefficient on `F` is at most 1 at every step.
    fn net(&self, x: &Var, steps: &[usize], p: &[Var]) -> Var {
        let sd2 = DATA_SCALE * DATA_SCALE;
        let (mut c_in, mut c_x, mut c_f) = (Vec::new(), Vec::new(), Vec::new());
        for &t in steps {
            let ab = self.schedule.alpha_bar(t);
            let s2 = (1.0 - ab) / ab;
            let norm = (s2 + sd2).sqrt();
            c_in.push(1.0 / (norm * ab.sqrt()));
            c_x.push(s2.sqrt() / ((s2 + sd2) * ab.sqrt()));
            c_f.push(DATA_SCALE / norm);
        }
        let f = self.raw_net(&row_scale(x, &c_in), steps, p);
        row_scale(x, &c_x).add(&row_scale(&f, &c_f))
    }

    fn raw_net(&self, x: &Var, steps: &[usize], p: &[Var]) -> Var {
        let b = x.shape()[0];
        let temb = Var::constant(timestep_embedding(steps, TIME_DIM));
        match self.arch {
            EpsArchitecture::Mlp => {
                let mut h = x.concat_last(&temb);
                for i in 0..MLP_DEPTH {
                    h = linear(&h, &p[2 * i], &p[2 * i + 1]).silu();
                }
                linear(&h, &p[2 * MLP_DEPTH], &p[2 * MLP_DEPTH + 1])
            }
            EpsArchitecture::Unet => {
                let m = self.maps.as_ref().expect("unet maps");
                let (h, w) = (self.sample_shape[1], self.sample_shape[2]);
                let (h2, w2, h3, w3) = (h / 2, w / 2, h / 4, w / 4);
                let t = linear(&temb, &p[0], &p[1]).silu();
                let conv = |x: &Var, i: usize| conv2d(x, &m.conv[i], &p[2 + 2 * i], &p[3 + 2 * i]);
                let tadd = |x: &Var, j: usize, hh: usize, ww: usize| {
                    let c = x.shape()[3];
                    let e = linear(&t, &p[16 + 2 * j], &p[17 + 2 * j]);
                    x.add(&e.broadcast_axis(1, hh * ww).reshape(&[b, hh, ww, c]))
                };
                let x0 = x.reshape(&[b, h, w, 1]);
                let e1 = tadd(&conv(&x0, 0), 0, h, w).silu();
                let e1 = conv(&e1, 1).silu();
                let e2 = tadd(&conv(&e1.sparse(&m.pool[0]), 2), 1, h2, w2).silu();
                let mid = tadd(&conv(&e2.sparse(&m.pool[1]), 3), 2, h3, w3).silu();
                let mid = conv(&mid, 4).silu();
                let d2 = mid.sparse(&m.up[0]).concat_last(&e2);
                let d2 = tadd(&conv(&d2, 5), 3, h2, w2).silu();
                let d1 = d2.sparse(&m.up[1]).concat_last(&e1);
                let d1 = tadd(&conv(&d1, 6), 4, h, w).silu();
                let out = linear(&d1.reshape(&[b * h * w, UNET_CHANNELS[0]]), &p[26], &p[27]);
                out.reshape(x.shape())
            }
        }
    }

    /// Differentiable noise prediction for a batch at a common step.
    pub fn eps_var(&self, x_t: &Var, t: usize) -> Var {
        let steps = vec![t; x_t.shape()[0]];
        self.net(x_t, &steps, &self.param_vars(false))
    }

    pub fn eps(&self, x_t: &ArrayD<f64>, t: usize) -> Result<ArrayD<f64>> {
        self.check_batch(x_t)?;
        self.schedule.check_step(t)?;
        Ok(no_grad(|| self.eps_var(&Var::constant(x_t.clone()), t).value().clone()))
    }

    /// Differentiable posterior mean `(x_t - beta_t / sqrt(1 - alpha_bar_t) eps) / sqrt(alpha_t)`.
    pub fn mean_var(&self, x_t: &Var, t: usize) -> Var {
        let s = &self.schedule;
        let coef = s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt();
        x_t.sub(&self.eps_var(x_t, t).scale(coef)).scale(1.0 / s.alpha(t).sqrt())
    }

    pub fn posterior_mean(&self, x_t: &ArrayD<f64>, t: usize) -> Result<ArrayD<f64>> {
        self.check_batch(x_t)?;
        self.schedule.check_step(t)?;
        Ok(no_grad(|| self.mean_var(&Var::constant(x_t.clone()), t).value().clone()))
    }

    /// One ancestral step from `t` to `t - 1`; the noise of row `i` comes from
    /// `derive_seed(seed, i)`. Step 1 is noise-free.
    pub fn reverse_step(&self, x_t: &ArrayD<f64>, t: usize, seed: u64) -> Result<ArrayD<f64>> {
        let mut mean = self.posterior_mean(x_t, t)?;
        if t > 1 {
            let seeds: Vec<u64> = (0..x_t.shape()[0] as u64).map(|i| derive_seed(seed, i)).collect();
            let z = crate::rng::normal_rows(&self.sample_shape, &seeds);
            let sd = self.schedule.posterior_var(t).sqrt();
            mean.zip_mut_with(&z, |m, &z| *m += sd * z);
        }
        Ok(mean)
    }

    /// Full reverse chain from `N(0, I)` at step `T`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<ArrayD<f64>> {
        let mut shape = vec![n];
        shape.extend_from_slice(&self.sample_shape);
        let mut x = standard_normal(&shape, &mut rng_from(seed));
        for t in (1..=self.schedule.steps()).rev() {
            x = self.reverse_step(&x, t, derive_seed(seed, t as u64))?;
        }
        Ok(x)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (beta_start, beta_end) = self.schedule.beta_range();
        io::save_checkpoint(
            path,
            "diffusion",
            self.arch.name(),
            self.seed,
            &self.sample_shape,
            &self.params,
            serde_json::json!({
                "schedule": { "T": self.schedule.steps(), "beta_start": beta_start, "beta_end": beta_end },
                "time_embedding_dim": TIME_DIM,
            }),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, params) = io::load_checkpoint(path, "diffusion")?;
        let sched = &m.extra["schedule"];
        let missing = || invalid("checkpoint lacks schedule");
        let schedule = make_schedule(
            sched["T"].as_u64().ok_or_else(missing)? as usize,
            sched["beta_start"].as_f64().ok_or_else(missing)?,
            sched["beta_end"].as_f64().ok_or_else(missing)?,
        )?;
        let model = Self::from_params(schedule, params, &m.input_shape, m.seed)?;
        if model.arch != EpsArchitecture::parse(&m.architecture)? {
            return Err(invalid("architecture does not match sample shape"));
        }
        Ok(model)
    }
}

fn single_dim(sample_shape: &[usize]) -> Result<usize> {
    match sample_shape {
        [d] => Ok(*d),
        _ => Err(Error::UnsupportedShape(format!("point data must be (d,), got {sample_shape:?}"))),
    }
}

fn unet_dims(sample_shape: &[usize]) -> Result<(usize, usize)> {
    match sample_shape {
        [1, h, w] if h % 4 == 0 && w % 4 == 0 => Ok((*h, *w)),
        _ => Err(Error::UnsupportedShape(format!(
            "image eps-net needs (1, h, w) with sides divisible by 4, got {sample_shape:?}"
        ))),
    }
}

pub const DIFFUSION_BATCH: usize = 64;

/// Learning rate used by [`train_diffusion`] for each architecture.
pub fn default_learning_rate(arch: EpsArchitecture) -> f64 {
    match arch {
        EpsArchitecture::Mlp => 1e-3,
        EpsArchitecture::Unet => 2e-3,
    }
}

/// Minimises `E ||eps - eps_net(x_t, t)||^2` with Adam over uniformly drawn steps.
pub fn train_diffusion(
    data: &LabeledDataset,
    schedule: &NoiseSchedule,
    epochs: usize,
    seed: u64,
) -> Result<(DiffusionModel, DiffusionTrainReport)> {
    if epochs == 0 {
        return Err(invalid("epochs must be at least 1"));
    }
    let mut model = DiffusionModel::init(schedule.clone(), data.sample_shape(), seed)?;
    let lr = default_learning_rate(model.arch);
    let mut arrays: Vec<ArrayD<f64>> = model.params.iter().map(|(_, a)| a.clone()).collect();
    let mut adam = Adam::new(lr, &arrays);
    let mut rng = rng_from(derive_seed(seed, 1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(DIFFUSION_BATCH) {
            let x0 = data.samples().select(Axis(0), chunk);
            let steps: Vec<usize> = chunk.iter().map(|_| rng.random_range(1..=schedule.steps())).collect();
            let noise = standard_normal(x0.shape(), &mut rng);
            let mut x_t = x0.clone();
            for (i, &t) in steps.iter().enumerate() {
                let ab = schedule.alpha_bar(t);
                let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
                let mut row = x_t.index_axis_mut(Axis(0), i);
                row.zip_mut_with(&noise.index_axis(Axis(0), i), |x, &z| *x = a * *x + b * z);
            }
            let p: Vec<Var> = arrays.iter().cloned().map(Var::leaf).collect();
            let pred = model.net(&Var::constant(x_t), &steps, &p);
            let loss = pred.sub(&Var::constant(noise)).square().mean();
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::TrainingFailure {
                    epoch,
                    detail: format!("non-finite loss {value}"),
                });
            }
            total += value * chunk.len() as f64;
            let refs: Vec<&Var> = p.iter().collect();
            let grads: Vec<ArrayD<f64>> = grad(&loss, &refs, false).iter().map(|g| g.value().clone()).collect();
            adam.step(&mut arrays, &grads);
        }
        epoch_losses.push(total / data.len() as f64);
    }
    for ((_, dst), src) in model.params.iter_mut().zip(arrays) {
        *dst = src;
    }
    io::round_to_f32(&mut model.params);
    if model.params.iter().any(|(_, p)| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::TrainingFailure {
            epoch: epochs - 1,
            detail: "non-finite parameters".into(),
        });
    }
    Ok((model, DiffusionTrainReport { epoch_losses, seed }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_schedule_products() {
        let s = make_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
        // beta_1 (1 - 1) / (1 - alpha_bar_1) vanishes at the first step
        assert_eq!(s.posterior_var(1), 0.0);
        assert!((s.posterior_var(2) - 0.2 * 0.1 / 0.28).abs() < 1e-15);
    }

    #[test]
    fn bad_schedules_are_rejected() {
        assert!(matches!(make_schedule(10, 0.1, 0.1), Err(Error::InvalidArgument(_))));
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(1, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn default_schedule_ends_near_gaussian() {
        let s = default_schedule();
        let direct: f64 = (0..200).map(|i| 1.0 - (1e-4 + (0.05 - 1e-4) * i as f64 / 199.0)).product();
        assert!((s.alpha_bar(200) - direct).abs() < 1e-15);
        assert!(s.alpha_bar(200) < 0.01);
        for t in 1..=200 {
            assert_eq!(s.alpha(t) + s.beta(t), 1.0);
            if t > 1 {
                assert!(s.beta(t) > s.beta(t - 1));
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
    }

    #[test]
    fn zero_noise_forward_sample_is_scaled_input() {
        let s = default_schedule();
        let x0 = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        let out = forward_sample(&s, &x0, 40, &ArrayD::zeros(IxDyn(&[2, 2]))).unwrap();
        let a = s.alpha_bar(40).sqrt();
        for (o, x) in out.iter().zip(x0.iter()) {
            assert_eq!(*o, a * x + 0.0);
        }
        assert!(forward_sample(&s, &x0, 0, &x0).is_err());
        assert!(forward_sample(&s, &x0, 201, &x0).is_err());
    }

    #[test]
    fn tiny_first_beta_is_near_identity() {
        let s = make_schedule(10, 1e-10, 0.1).unwrap();
        let x0 = ArrayD::from_elem(IxDyn(&[1, 3]), 0.7);
        let noise = ArrayD::from_elem(IxDyn(&[1, 3]), 1.0);
        let out = forward_sample(&s, &x0, 1, &noise).unwrap();
        assert!(out.iter().all(|v| (v - 0.7).abs() < 1e-4));
    }

    #[test]
    fn eps_net_output_matches_input_shape() {
        let s = default_schedule();
        for shape in [vec![2usize], vec![1, 16, 16], vec![1, 8, 12]] {
            let m = DiffusionModel::init(s.clone(), &shape, 0).unwrap();
            let mut batch = vec![3];
            batch.extend(&shape);
            let x = ArrayD::zeros(IxDyn(&batch));
            for t in [1, 100, 200] {
                assert_eq!(m.eps(&x, t).unwrap().shape(), &batch[..]);
            }
        }
    }

    fn zero_net_model() -> DiffusionModel {
        let mut m = DiffusionModel::init(default_schedule(), &[2], 0).unwrap();
        let n = m.params.len();
        m.params[n - 2].1.fill(0.0);
        m.params[n - 1].1.fill(0.0);
        m
    }

    #[test]
    fn zero_network_predicts_gaussian_prior_noise() {
        // E[eps | x_t] when x_0 ~ N(0, DATA_SCALE^2)
        let m = zero_net_model();
        let x = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, -2.0, 0.5, 0.25]).unwrap();
        let sd2 = DATA_SCALE * DATA_SCALE;
        for t in [1, 7, 150] {
            let ab = m.schedule().alpha_bar(t);
            let k = (1.0 - ab).sqrt() / (ab * sd2 + 1.0 - ab);
            let eps = m.eps(&x, t).unwrap();
            for (o, xi) in eps.iter().zip(x.iter()) {
                assert!((o - k * xi).abs() < 1e-12 * (1.0 + xi.abs() * k));
            }
        }
    }

    #[test]
    fn last_step_is_deterministic_and_others_repeat_per_seed() {
        let m = zero_net_model();
        let x = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, -2.0, 0.5, 0.25]).unwrap();
        assert_eq!(m.reverse_step(&x, 1, 1).unwrap(), m.reverse_step(&x, 1, 2).unwrap());
        assert_eq!(m.reverse_step(&x, 1, 1).unwrap(), m.posterior_mean(&x, 1).unwrap());
        assert_eq!(m.reverse_step(&x, 50, 9).unwrap(), m.reverse_step(&x, 50, 9).unwrap());
        assert_ne!(m.reverse_step(&x, 50, 9).unwrap(), m.reverse_step(&x, 50, 10).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_keeps_schedule_and_weights() {
        let dir = tempfile::tempdir().unwrap();
        let m = DiffusionModel::init(make_schedule(50, 1e-3, 0.1).unwrap(), &[1, 8, 8], 4).unwrap();
        let mut m = m;
        io::round_to_f32(&mut m.params);
        let path = dir.path().join("diff.json");
        m.save(&path).unwrap();
        let back = DiffusionModel::load(&path).unwrap();
        assert_eq!(back.schedule(), m.schedule());
        assert_eq!(back.params(), m.params());
    }
}
