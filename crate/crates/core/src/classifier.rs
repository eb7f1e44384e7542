//! The victim classifier: a small differentiable network with exact input
//! gradients.
//!
//! Both architectures use the smooth `u * sigmoid(u)` activation so that input
//! gradients (for attacks and for sampling guidance) and their derivatives are
//! defined everywhere.

use std::path::Path;

use distransfer_autograd::nn::{conv2d, cross_entropy, linear, Adam};
use distransfer_autograd::sparse::{avg_pool2, im2col};
use distransfer_autograd::{grad, no_grad, SparseMap, Var};
use ndarray::{ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::io::{self, NamedParams};
use crate::rng::{rng_from, standard_normal};

pub const HIDDEN_WIDTH: usize = 64;
pub const CONV_CHANNELS: (usize, usize) = (8, 16);
/// Adam step size; plain SGD converged to seed-dependent plateaus.
pub const LEARNING_RATE: f64 = 1e-3;
pub const BATCH_SIZE: usize = 64;

/// Anything that maps a batch to class predictions.
pub trait Predictor: Sync {
    fn class_count(&self) -> usize;
    fn predict(&self, batch: &ArrayD<f64>) -> Result<Vec<usize>>;
}

/// A predictor with exact gradients of its mean cross-entropy loss.
pub trait DifferentiableClassifier: Predictor {
    /// Valid input range (clipping box) or `None` for unbounded inputs.
    fn input_range(&self) -> Option<(f64, f64)>;
    fn loss_and_grad(&self, x: &ArrayD<f64>, y: &[usize]) -> Result<(f64, ArrayD<f64>)>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Mlp,
    SmallConv,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Mlp => "mlp",
            Architecture::SmallConv => "small_conv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Architecture::Mlp),
            "small_conv" => Ok(Architecture::SmallConv),
            other => Err(invalid(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
struct ConvMaps {
    patches1: SparseMap,
    pool1: SparseMap,
    patches2: SparseMap,
    pool2: SparseMap,
}

impl ConvMaps {
    fn new(h: usize, w: usize) -> Self {
        let (c1, _) = CONV_CHANNELS;
        Self {
            patches1: im2col(h, w, 1, 3),
            pool1: avg_pool2(h, w, c1),
            patches2: im2col(h / 2, w / 2, c1, 3),
            pool2: avg_pool2(h / 2, w / 2, CONV_CHANNELS.1),
        }
    }
}

/// Trained (or freshly initialised) classifier `f(x; theta)`.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    arch: Architecture,
    params: NamedParams,
    class_count: usize,
    input_shape: Vec<usize>,
    seed: u64,
    maps: Option<ConvMaps>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub seed: u64,
}

fn init_weight(shape: &[usize], fan_in: usize, rng: &mut crate::rng::Rng) -> ArrayD<f64> {
    standard_normal(shape, rng) * (2.0 / fan_in as f64).sqrt()
}

fn zeros(n: usize) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(&[n]))
}

impl ClassifierModel {
    /// Freshly initialised model for samples of `input_shape`
    /// (`(d,)` for points, `(1, h, w)` for images).
    pub fn init(arch: Architecture, input_shape: &[usize], class_count: usize, seed: u64) -> Result<Self> {
        if class_count == 0 {
            return Err(invalid("class_count must be positive"));
        }
        let mut rng = rng_from(seed);
        let d: usize = input_shape.iter().product();
        let params: NamedParams = match arch {
            Architecture::Mlp => vec![
                ("fc1.w".into(), init_weight(&[d, HIDDEN_WIDTH], d, &mut rng)),
                ("fc1.b".into(), zeros(HIDDEN_WIDTH)),
                ("fc2.w".into(), init_weight(&[HIDDEN_WIDTH, HIDDEN_WIDTH], HIDDEN_WIDTH, &mut rng)),
                ("fc2.b".into(), zeros(HIDDEN_WIDTH)),
                ("out.w".into(), init_weight(&[HIDDEN_WIDTH, class_count], HIDDEN_WIDTH, &mut rng)),
                ("out.b".into(), zeros(class_count)),
            ],
            Architecture::SmallConv => {
                let (h, w) = image_dims(input_shape)?;
                let (c1, c2) = CONV_CHANNELS;
                let flat = (h / 4) * (w / 4) * c2;
                vec![
                    ("conv1.w".into(), init_weight(&[9, c1], 9, &mut rng)),
                    ("conv1.b".into(), zeros(c1)),
                    ("conv2.w".into(), init_weight(&[9 * c1, c2], 9 * c1, &mut rng)),
                    ("conv2.b".into(), zeros(c2)),
                    ("out.w".into(), init_weight(&[flat, class_count], flat, &mut rng)),
                    ("out.b".into(), zeros(class_count)),
                ]
            }
        };
        Self::from_params(arch, params, class_count, input_shape, seed)
    }

    pub fn from_params(
        arch: Architecture,
        params: NamedParams,
        class_count: usize,
        input_shape: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let maps = match arch {
            Architecture::SmallConv => {
                let (h, w) = image_dims(input_shape)?;
                Some(ConvMaps::new(h, w))
            }
            Architecture::Mlp => None,
        };
        let model = Self {
            arch,
            params,
            class_count,
            input_shape: input_shape.to_vec(),
            seed,
            maps,
        };
        model.check_params()?;
        Ok(model)
    }

    fn check_params(&self) -> Result<()> {
        let reference = match self.arch {
            Architecture::Mlp => 6,
            Architecture::SmallConv => 6,
        };
        if self.params.len() != reference {
            return Err(invalid(format!("expected {reference} parameter arrays")));
        }
        let out_w = &self.params[4].1;
        if out_w.shape().len() != 2 || out_w.shape()[1] != self.class_count {
            return Err(invalid("output layer does not match class count"));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &NamedParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NamedParams {
        &mut self.params
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_image_model(&self) -> bool {
        self.input_shape.len() == 3
    }

    fn check_batch(&self, batch: &ArrayD<f64>) -> Result<()> {
        if batch.ndim() == 0 || batch.shape()[1..] != self.input_shape[..] {
            return Err(invalid(format!(
                "batch shape {:?} does not match model input {:?}",
                batch.shape(),
                self.input_shape
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

    /// Penultimate activations and the output layer parameters.
    fn hidden(&self, x: &Var, p: &[Var]) -> Var {
        let b = x.shape()[0];
        match self.arch {
            Architecture::Mlp => {
                let d: usize = self.input_shape.iter().product();
                let flat = x.reshape(&[b, d]);
                let h1 = linear(&flat, &p[0], &p[1]).silu();
                linear(&h1, &p[2], &p[3]).silu()
            }
            Architecture::SmallConv => {
                let maps = self.maps.as_ref().expect("conv maps");
                let (h, w) = (self.input_shape[1], self.input_shape[2]);
                // (b, 1, h, w) and (b, h, w, 1) share one memory layout
                let nhwc = x.reshape(&[b, h, w, 1]);
                let a1 = conv2d(&nhwc, &maps.patches1, &p[0], &p[1]).silu().sparse(&maps.pool1);
                let a2 = conv2d(&a1, &maps.patches2, &p[2], &p[3]).silu().sparse(&maps.pool2);
                let flat: usize = a2.shape()[1..].iter().product();
                a2.reshape(&[b, flat])
            }
        }
    }

    fn forward(&self, x: &Var, p: &[Var]) -> Var {
        linear(&self.hidden(x, p), &p[4], &p[5])
    }

    /// Differentiable logits `(batch, classes)` with the parameters held fixed.
    pub fn logits_var(&self, x: &Var) -> Var {
        self.forward(x, &self.param_vars(false))
    }

    /// Differentiable penultimate features.
    pub fn features_var(&self, x: &Var) -> Var {
        self.hidden(x, &self.param_vars(false))
    }

    pub fn logits(&self, batch: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        self.check_batch(batch)?;
        if batch.shape()[0] == 0 {
            return Ok(ArrayD::zeros(IxDyn(&[0, self.class_count])));
        }
        Ok(no_grad(|| self.logits_var(&Var::constant(batch.clone())).value().clone()))
    }

    /// Mean cross-entropy and its exact gradient with respect to the input.
    pub fn loss_and_input_grad(&self, x: &ArrayD<f64>, y: &[usize]) -> Result<(f64, ArrayD<f64>)> {
        self.check_batch(x)?;
        check_labels(y, x.shape()[0], self.class_count)?;
        let xv = Var::leaf(x.clone());
        let loss = cross_entropy(&self.logits_var(&xv), y);
        let g = grad(&loss, &[&xv], false).remove(0);
        Ok((loss.item(), g.value().clone()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::save_checkpoint(
            path,
            "classifier",
            self.arch.name(),
            self.seed,
            &self.input_shape,
            &self.params,
            serde_json::json!({ "class_count": self.class_count }),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (m, params) = io::load_checkpoint(path, "classifier")?;
        let class_count = m.extra["class_count"]
            .as_u64()
            .ok_or_else(|| invalid("checkpoint lacks class_count"))? as usize;
        Self::from_params(Architecture::parse(&m.architecture)?, params, class_count, &m.input_shape, m.seed)
    }
}

pub(crate) fn check_labels(y: &[usize], n: usize, classes: usize) -> Result<()> {
    if y.len() != n {
        return Err(invalid(format!("{} labels for {n} samples", y.len())));
    }
    if let Some(&bad) = y.iter().find(|&&v| v >= classes) {
        return Err(invalid(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

fn image_dims(input_shape: &[usize]) -> Result<(usize, usize)> {
    match input_shape {
        [1, h, w] if h % 4 == 0 && w % 4 == 0 => Ok((*h, *w)),
        _ => Err(Error::UnsupportedShape(format!(
            "small_conv needs (1, h, w) with sides divisible by 4, got {input_shape:?}"
        ))),
    }
}

/// Row-wise argmax.
pub fn argmax_rows(logits: &ArrayD<f64>) -> Vec<usize> {
    logits
        .outer_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

impl Predictor for ClassifierModel {
    fn class_count(&self) -> usize {
        self.class_count
    }

    fn predict(&self, batch: &ArrayD<f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(batch)?))
    }
}

impl DifferentiableClassifier for ClassifierModel {
    fn input_range(&self) -> Option<(f64, f64)> {
        self.is_image_model().then_some((0.0, 1.0))
    }

    fn loss_and_grad(&self, x: &ArrayD<f64>, y: &[usize]) -> Result<(f64, ArrayD<f64>)> {
        self.loss_and_input_grad(x, y)
    }
}

/// Affine softmax classifier on point data with closed-form input gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSoftmax {
    /// `(d, classes)`.
    pub weights: ArrayD<f64>,
    pub bias: Vec<f64>,
}

impl LinearSoftmax {
    pub fn new(weights: ArrayD<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.ndim() != 2 || weights.shape()[1] != bias.len() || bias.is_empty() {
            return Err(invalid("weights must be (d, classes) with one bias per class"));
        }
        Ok(Self { weights, bias })
    }

    /// Every class shares the weight vector `w`, so class probabilities do not
    /// depend on the input.
    pub fn tied(w: &[f64], bias: &[f64]) -> Self {
        let weights = ArrayD::from_shape_fn(IxDyn(&[w.len(), bias.len()]), |ix| w[ix[0]]);
        Self {
            weights,
            bias: bias.to_vec(),
        }
    }

    pub fn logits(&self, x: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let d = self.weights.shape()[0];
        if x.ndim() != 2 || x.shape()[1] != d {
            return Err(invalid(format!("expected (n, {d}) input, got {:?}", x.shape())));
        }
        let mut out = ArrayD::zeros(IxDyn(&[x.shape()[0], self.bias.len()]));
        for (i, row) in x.outer_iter().enumerate() {
            for (c, b) in self.bias.iter().enumerate() {
                out[[i, c]] = b + row.iter().enumerate().map(|(j, v)| v * self.weights[[j, c]]).sum::<f64>();
            }
        }
        Ok(out)
    }
}

impl Predictor for LinearSoftmax {
    fn class_count(&self) -> usize {
        self.bias.len()
    }

    fn predict(&self, batch: &ArrayD<f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(batch)?))
    }
}

impl DifferentiableClassifier for LinearSoftmax {
    fn input_range(&self) -> Option<(f64, f64)> {
        None
    }

    /// Mean cross-entropy; the gradient of row `i` is `W (p_i - e_{y_i}) / n`.
    fn loss_and_grad(&self, x: &ArrayD<f64>, y: &[usize]) -> Result<(f64, ArrayD<f64>)> {
        let logits = self.logits(x)?;
        let (n, c) = (y.len(), self.bias.len());
        check_labels(y, x.shape()[0], c)?;
        let mut loss = 0.0;
        let mut g = ArrayD::zeros(x.raw_dim());
        for i in 0..n {
            let row: Vec<f64> = (0..c).map(|k| logits[[i, k]]).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            loss += m + z.ln() - row[y[i]];
            for k in 0..c {
                let coef = (row[k] - m).exp() / z - if k == y[i] { 1.0 } else { 0.0 };
                for j in 0..x.shape()[1] {
                    g[[i, j]] += coef * self.weights[[j, k]] / n as f64;
                }
            }
        }
        Ok((loss / n as f64, g))
    }
}

fn fraction_correct(model: &ClassifierModel, data: &LabeledDataset) -> Result<f64> {
    let pred = model.predict(data.samples())?;
    let hits = pred.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Trains with Adam on minibatch mean cross-entropy. Deterministic per seed.
pub fn train_classifier(
    train: &LabeledDataset,
    test: Option<&LabeledDataset>,
    arch: Architecture,
    epochs: usize,
    seed: u64,
) -> Result<(ClassifierModel, TrainReport)> {
    if epochs == 0 {
        return Err(invalid("epochs must be at least 1"));
    }
    let mut model = ClassifierModel::init(arch, train.sample_shape(), train.class_count(), seed)?;
    let initial: Vec<ArrayD<f64>> = model.params.iter().map(|(_, a)| a.clone()).collect();
    let mut adam = Adam::new(LEARNING_RATE, &initial);
    let mut rng = rng_from(seed ^ 0x5EED);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(BATCH_SIZE) {
            let x = Var::constant(train.samples().select(Axis(0), chunk));
            let y: Vec<usize> = chunk.iter().map(|&i| train.labels()[i]).collect();
            let p = model.param_vars(true);
            let loss = cross_entropy(&model.forward(&x, &p), &y);
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
            let mut arrays: Vec<ArrayD<f64>> = model.params.iter().map(|(_, a)| a.clone()).collect();
            adam.step(&mut arrays, &grads);
            if arrays.iter().any(|a| a.iter().any(|v| !v.is_finite())) {
                return Err(Error::TrainingFailure {
                    epoch,
                    detail: "non-finite parameters".into(),
                });
            }
            for ((_, dst), src) in model.params.iter_mut().zip(arrays) {
                *dst = src;
            }
        }
        epoch_losses.push(total / train.len() as f64);
    }
    io::round_to_f32(&mut model.params);
    let report = TrainReport {
        epoch_losses,
        train_accuracy: fraction_correct(&model, train)?,
        test_accuracy: test.map(|t| fraction_correct(&model, t)).transpose()?,
        seed,
    };
    Ok((model, report))
}
