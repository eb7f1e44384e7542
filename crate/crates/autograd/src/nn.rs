//! Layer helpers over [`Var`]: dense and channels-last convolution layers,
//! losses, and the two optimizers used for training.

use ndarray::{ArrayD, IxDyn};

use crate::sparse::SparseMap;
use crate::var::Var;

/// `x (n, in) @ w (in, out) + b (out)`.
pub fn linear(x: &Var, w: &Var, b: &Var) -> Var {
    let n = x.shape()[0];
    x.matmul(w).add(&b.broadcast_axis(0, n))
}

/// Stride-1 same-padded convolution on `(batch, h, w, c_in)` using a patch map
/// from [`crate::sparse::im2col`]. `w` has shape `(k * k * c_in, c_out)`.
pub fn conv2d(x: &Var, patches: &SparseMap, w: &Var, b: &Var) -> Var {
    let shape = x.shape();
    let (batch, h, wd) = (shape[0], shape[1], shape[2]);
    let c_out = w.shape()[1];
    let cols = x.sparse(patches);
    let k = cols.shape()[2];
    let flat = cols.reshape(&[batch * h * wd, k]);
    linear(&flat, w, b).reshape(&[batch, h, wd, c_out])
}

/// Applies a per-image spatial map to `(batch, h, w, c)` activations.
pub fn spatial(x: &Var, map: &SparseMap) -> Var {
    x.sparse(map)
}

/// Row-wise log-sum-exp of a `(batch, classes)` tensor, shape `(batch,)`.
pub fn logsumexp_rows(logits: &Var) -> Var {
    let v = logits.value();
    let (n, c) = (v.shape()[0], v.shape()[1]);
    let maxes: Vec<f64> = v
        .outer_iter()
        .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let m = Var::constant(ArrayD::from_shape_vec(IxDyn(&[n]), maxes).expect("row maxima"));
    let shifted = logits.sub(&m.broadcast_axis(1, c));
    shifted.exp().sum_axis(1).ln().add(&m)
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Var) -> Var {
    let c = logits.shape()[1];
    let lse = logsumexp_rows(logits);
    logits.sub(&lse.broadcast_axis(1, c)).exp()
}

/// One-hot `(batch, classes)` constant.
pub fn one_hot(labels: &[usize], classes: usize) -> ArrayD<f64> {
    let mut out = ArrayD::zeros(IxDyn(&[labels.len(), classes]));
    for (i, &y) in labels.iter().enumerate() {
        out[[i, y]] = 1.0;
    }
    out
}

/// Mean cross-entropy of `(batch, classes)` logits against integer labels.
pub fn cross_entropy(logits: &Var, labels: &[usize]) -> Var {
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    assert_eq!(n, labels.len(), "one label per row");
    let picked = logits.mul(&Var::constant(one_hot(labels, c))).sum_axis(1);
    logsumexp_rows(logits).sub(&picked).mean()
}

/// Sinusoidal embedding of integer time steps, shape `(batch, dim)`.
pub fn timestep_embedding(steps: &[usize], dim: usize) -> ArrayD<f64> {
    assert!(dim.is_multiple_of(2), "embedding dim must be even");
    let half = dim / 2;
    let mut out = ArrayD::zeros(IxDyn(&[steps.len(), dim]));
    for (i, &t) in steps.iter().enumerate() {
        for k in 0..half {
            let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
            let a = t as f64 * freq;
            out[[i, k]] = a.sin();
            out[[i, half + k]] = a.cos();
        }
    }
    out
}

/// Plain stochastic gradient descent.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step(&self, params: &mut [ArrayD<f64>], grads: &[ArrayD<f64>]) {
        for (p, g) in params.iter_mut().zip(grads) {
            p.zip_mut_with(g, |p, g| *p -= self.lr * g);
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[ArrayD<f64>]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [ArrayD<f64>], grads: &[ArrayD<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            m.zip_mut_with(g, |m, g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, m, v| {
                *p -= self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
            });
        }
    }
}
