//! Hermetic synthetic datasets and the five-family corruption generator.
//!
//! Two generators stand in for real benchmarks: a 2-D Gaussian mixture placed
//! on the vertices of a regular polygon, and 1-channel shape images (square,
//! disk, triangle). [`corrupt`] applies severity-graded corruptions in the
//! spirit of CIFAR10-C, restricted to gaussian/shot/impulse noise, glass blur
//! and block-DCT compression.

use std::f64::consts::PI;

use ndarray::{ArrayD, Axis, IxDyn};
use rand::Rng as _;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed, rng_from, Rng};

/// Provenance recorded alongside a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
}

/// Samples with integer labels. Point data is `(n, d)`; images are
/// `(n, 1, h, w)` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    samples: ArrayD<f64>,
    labels: Vec<usize>,
    class_count: usize,
    meta: DatasetMeta,
}

impl LabeledDataset {
    pub fn new(
        samples: ArrayD<f64>,
        labels: Vec<usize>,
        class_count: usize,
        meta: DatasetMeta,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let ndim = samples.ndim();
        if ndim != 2 && ndim != 4 {
            return Err(Error::UnsupportedShape(format!(
                "expected (n, d) or (n, 1, h, w), got {:?}",
                samples.shape()
            )));
        }
        if ndim == 4 && samples.shape()[1] != 1 {
            return Err(Error::UnsupportedShape("only single-channel images".into()));
        }
        if samples.shape()[0] != labels.len() {
            return Err(invalid(format!(
                "{} samples but {} labels",
                samples.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(invalid(format!("label {bad} outside {class_count} classes")));
        }
        if ndim == 4 && samples.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("image values must lie in [0, 1]"));
        }
        Ok(Self {
            samples: samples.as_standard_layout().into_owned(),
            labels,
            class_count,
            meta,
        })
    }

    pub fn samples(&self) -> &ArrayD<f64> {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_images(&self) -> bool {
        self.samples.ndim() == 4
    }

    /// Shape of one sample (without the batch axis).
    pub fn sample_shape(&self) -> &[usize] {
        &self.samples.shape()[1..]
    }

    /// Same labels and metadata with new samples (shape must match).
    pub fn with_samples(&self, samples: ArrayD<f64>) -> Result<Self> {
        if samples.shape() != self.samples.shape() {
            return Err(invalid("replacement samples must keep the dataset shape"));
        }
        Self::new(samples, self.labels.clone(), self.class_count, self.meta.clone())
    }

    /// Rows `indices` as a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.iter().any(|&i| i >= self.len()) {
            return Err(invalid("subset index out of range"));
        }
        let samples = self.samples.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(samples, labels, self.class_count, self.meta.clone())
    }

    /// The first `n` rows (or all of them).
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

/// 2-D Gaussian mixture: class `c` is centred on vertex `c` of a regular
/// `n_classes`-gon of unit circumradius. Labels cycle `0, 1, .., C-1, 0, ..`.
pub fn make_gaussian_mixture(
    n_per_class: usize,
    n_classes: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if n_per_class == 0 {
        return Err(Error::EmptyDataset);
    }
    if n_classes < 2 {
        return Err(invalid("gaussian mixture needs at least two classes"));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(invalid("spread must be positive"));
    }
    let mut rng = rng_from(seed);
    let n = n_per_class * n_classes;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % n_classes;
        let (vx, vy) = polygon_vertex(c, n_classes);
        let zx: f64 = StandardNormal.sample(&mut rng);
        let zy: f64 = StandardNormal.sample(&mut rng);
        data.push(vx + spread * zx);
        data.push(vy + spread * zy);
        labels.push(c);
    }
    let samples = ArrayD::from_shape_vec(IxDyn(&[n, 2]), data).expect("mixture shape");
    LabeledDataset::new(
        samples,
        labels,
        n_classes,
        DatasetMeta {
            generator: "gaussian_mixture".into(),
            seed,
        },
    )
}

/// Vertex `c` of the regular `n`-gon with unit circumradius.
pub fn polygon_vertex(c: usize, n: usize) -> (f64, f64) {
    let angle = 2.0 * PI * c as f64 / n as f64;
    (angle.cos(), angle.sin())
}

/// The three shape classes, in label order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Disk,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Disk, ShapeKind::Triangle];

    pub fn label(self) -> usize {
        self as usize
    }
}

/// Randomisation ranges for [`make_shape_images`]. Scales are fractions of
/// the image side; the rendered extent is rounded to whole pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeStyle {
    pub min_scale: f64,
    pub max_scale: f64,
    pub min_intensity: f64,
    pub max_intensity: f64,
}

pub const SHAPE_STYLE: ShapeStyle = ShapeStyle {
    min_scale: 0.4,
    max_scale: 0.75,
    min_intensity: 0.5,
    max_intensity: 1.0,
};

impl ShapeStyle {
    /// Foreground fraction of a square drawn at maximal scale.
    pub fn max_area_ratio(&self) -> f64 {
        self.max_scale * self.max_scale
    }

    /// Pixel extent range `[lo, hi]` for a given image side.
    pub fn extent_range(&self, side: usize) -> (usize, usize) {
        let lo = (self.min_scale * side as f64).round().max(1.0) as usize;
        let hi = (self.max_scale * side as f64).round().min(side as f64) as usize;
        (lo, hi.max(lo))
    }
}

/// Renders one shape with its `extent x extent` bounding box at pixel
/// offset `(top, left)`. Pixels are tested at their centres.
pub fn render_shape(
    kind: ShapeKind,
    side: usize,
    extent: usize,
    top: usize,
    left: usize,
    intensity: f64,
) -> Vec<f64> {
    let s = extent as f64;
    let (x0, y0) = (left as f64, top as f64);
    let mut img = vec![0.0; side * side];
    for row in 0..side {
        for col in 0..side {
            let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
            let (u, v) = (px - x0, py - y0);
            let inside = match kind {
                ShapeKind::Square => (0.0..s).contains(&u) && (0.0..s).contains(&v),
                ShapeKind::Disk => {
                    let (dx, dy) = (u - s / 2.0, v - s / 2.0);
                    dx * dx + dy * dy <= (s / 2.0) * (s / 2.0)
                }
                ShapeKind::Triangle => {
                    (0.0..s).contains(&v) && (u - s / 2.0).abs() <= 0.5 * (v + 0.5)
                }
            };
            if inside {
                img[row * side + col] = intensity;
            }
        }
    }
    img
}

/// Balanced shape images `(3 * n_per_class, 1, side, side)` with randomised
/// extent, position and intensity. Labels cycle square, disk, triangle.
pub fn make_shape_images(n_per_class: usize, side: usize, seed: u64) -> Result<LabeledDataset> {
    if n_per_class == 0 {
        return Err(Error::EmptyDataset);
    }
    if side < 12 {
        return Err(invalid(format!("side {side} < 12 cannot resolve the shapes")));
    }
    let style = SHAPE_STYLE;
    let (lo, hi) = style.extent_range(side);
    let mut rng = rng_from(seed);
    let n = 3 * n_per_class;
    let mut data = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let kind = ShapeKind::ALL[i % 3];
        let extent = rng.random_range(lo..=hi);
        let top = rng.random_range(0..=side - extent);
        let left = rng.random_range(0..=side - extent);
        // f32-representable so the on-disk format round-trips exactly
        let intensity = rng.random_range(style.min_intensity..=style.max_intensity) as f32 as f64;
        data.extend(render_shape(kind, side, extent, top, left, intensity));
        labels.push(kind.label());
    }
    let samples = ArrayD::from_shape_vec(IxDyn(&[n, 1, side, side]), data).expect("image shape");
    LabeledDataset::new(
        samples,
        labels,
        3,
        DatasetMeta {
            generator: "shape_images".into(),
            seed,
        },
    )
}

/// Corruption families (a subset of the CIFAR10-C list).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionFamily {
    GaussianNoise,
    GlassBlur,
    ImpulseNoise,
    JpegLike,
    ShotNoise,
}

impl CorruptionFamily {
    pub const ALL: [CorruptionFamily; 5] = [
        CorruptionFamily::GaussianNoise,
        CorruptionFamily::GlassBlur,
        CorruptionFamily::ImpulseNoise,
        CorruptionFamily::JpegLike,
        CorruptionFamily::ShotNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionFamily::GaussianNoise => "gaussian_noise",
            CorruptionFamily::GlassBlur => "glass_blur",
            CorruptionFamily::ImpulseNoise => "impulse_noise",
            CorruptionFamily::JpegLike => "jpeg_like",
            CorruptionFamily::ShotNoise => "shot_noise",
        }
    }
}

/// Severity tables for 16x16 images, indexed by `severity - 1`.
pub const GAUSSIAN_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
pub const SHOT_PHOTONS: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
pub const IMPULSE_PROB: [f64; 5] = [0.01, 0.03, 0.06, 0.10, 0.17];
pub const GLASS_SWAPS: [(usize, usize); 5] = [(1, 1), (1, 2), (2, 2), (2, 3), (3, 3)];
pub const JPEG_STEP: [f64; 5] = [0.05, 0.10, 0.18, 0.30, 0.45];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub family: CorruptionFamily,
    /// 0 is the identity; 1..=5 index the severity tables.
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(family: CorruptionFamily, severity: u8) -> Result<Self> {
        if severity > 5 {
            return Err(invalid(format!("severity {severity} outside 0..=5")));
        }
        Ok(Self { family, severity })
    }
}

/// Applies a corruption to every image; outputs are clamped to `[0, 1]`.
pub fn corrupt(dataset: &LabeledDataset, spec: CorruptionSpec, seed: u64) -> Result<LabeledDataset> {
    if !dataset.is_images() {
        return Err(Error::UnsupportedShape(
            "corruptions apply to image datasets only".into(),
        ));
    }
    if spec.severity > 5 {
        return Err(invalid(format!("severity {} outside 0..=5", spec.severity)));
    }
    if spec.severity == 0 {
        return Ok(dataset.clone());
    }
    let s = spec.severity as usize - 1;
    let shape = dataset.samples().shape().to_vec();
    let (h, w) = (shape[2], shape[3]);
    let mut out = dataset.samples().clone();
    for (i, mut img) in out.outer_iter_mut().enumerate() {
        let mut rng = rng_from(derive_seed(seed, i as u64));
        let pix = img.as_slice_mut().expect("standard layout");
        match spec.family {
            CorruptionFamily::GaussianNoise => {
                for p in pix.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *p += GAUSSIAN_SIGMA[s] * z;
                }
            }
            CorruptionFamily::ShotNoise => {
                let scale = SHOT_PHOTONS[s];
                for p in pix.iter_mut() {
                    let lambda = (*p * scale).max(0.0);
                    *p = if lambda > 0.0 {
                        let k: f64 = Poisson::new(lambda).expect("positive rate").sample(&mut rng);
                        k / scale
                    } else {
                        0.0
                    };
                }
            }
            CorruptionFamily::ImpulseNoise => {
                let prob = IMPULSE_PROB[s];
                for p in pix.iter_mut() {
                    if rng.random::<f64>() < prob {
                        *p = if rng.random::<bool>() { 1.0 } else { 0.0 };
                    }
                }
            }
            CorruptionFamily::GlassBlur => {
                let (radius, iterations) = GLASS_SWAPS[s];
                glass_swaps(pix, h, w, radius, iterations, &mut rng);
            }
            CorruptionFamily::JpegLike => block_dct_quantize(pix, h, w, JPEG_STEP[s]),
        }
        pix.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    }
    dataset.with_samples(out)
}

fn glass_swaps(pix: &mut [f64], h: usize, w: usize, radius: usize, iterations: usize, rng: &mut Rng) {
    let r = radius as i64;
    for _ in 0..iterations {
        for y in (radius..h.saturating_sub(radius)).rev() {
            for x in (radius..w.saturating_sub(radius)).rev() {
                let dy = rng.random_range(-r..=r) as isize;
                let dx = rng.random_range(-r..=r) as isize;
                let (ny, nx) = ((y as isize + dy) as usize, (x as isize + dx) as usize);
                pix.swap(y * w + x, ny * w + nx);
            }
        }
    }
}

const BLOCK: usize = 4;

fn dct_basis() -> [[f64; BLOCK]; BLOCK] {
    let mut m = [[0.0; BLOCK]; BLOCK];
    for (k, row) in m.iter_mut().enumerate() {
        let norm = if k == 0 { (1.0 / BLOCK as f64).sqrt() } else { (2.0 / BLOCK as f64).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = norm * (PI * (n as f64 + 0.5) * k as f64 / BLOCK as f64).cos();
        }
    }
    m
}

/// Orthonormal 4x4 block DCT, uniform quantisation with `step`, inverse DCT.
/// Pixels outside whole blocks are left untouched.
fn block_dct_quantize(pix: &mut [f64], h: usize, w: usize, step: f64) {
    let m = dct_basis();
    for by in (0..h / BLOCK).map(|b| b * BLOCK) {
        for bx in (0..w / BLOCK).map(|b| b * BLOCK) {
            let mut block = [[0.0; BLOCK]; BLOCK];
            for (i, row) in block.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = pix[(by + i) * w + bx + j];
                }
            }
            // coefficients = M * B * M^T
            let mut coef = [[0.0; BLOCK]; BLOCK];
            for u in 0..BLOCK {
                for v in 0..BLOCK {
                    let mut acc = 0.0;
                    for i in 0..BLOCK {
                        for j in 0..BLOCK {
                            acc += m[u][i] * block[i][j] * m[v][j];
                        }
                    }
                    coef[u][v] = (acc / step).round() * step;
                }
            }
            for i in 0..BLOCK {
                for j in 0..BLOCK {
                    let mut acc = 0.0;
                    for u in 0..BLOCK {
                        for v in 0..BLOCK {
                            acc += m[u][i] * coef[u][v] * m[v][j];
                        }
                    }
                    pix[(by + i) * w + bx + j] = acc;
                }
            }
        }
    }
}

/// Gaussian noise plus a random one-pixel shift per image (zero fill), or
/// plain Gaussian noise for point data. Used as the "augmented" set of the
/// gradient-sensitivity probe.
pub fn augment(dataset: &LabeledDataset, sigma: f64, seed: u64) -> Result<LabeledDataset> {
    let mut out = dataset.samples().clone();
    if dataset.is_images() {
        let (h, w) = (dataset.sample_shape()[1], dataset.sample_shape()[2]);
        for (i, mut img) in out.outer_iter_mut().enumerate() {
            let mut rng = rng_from(derive_seed(seed, i as u64));
            let src: Vec<f64> = img.iter().cloned().collect();
            let dy = rng.random_range(-1i64..=1) as isize;
            let dx = rng.random_range(-1i64..=1) as isize;
            let pix = img.as_slice_mut().expect("standard layout");
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let (sy, sx) = (y - dy, x - dx);
                    let v = if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                        src[sy as usize * w + sx as usize]
                    } else {
                        0.0
                    };
                    let z: f64 = StandardNormal.sample(&mut rng);
                    pix[y as usize * w + x as usize] = (v + sigma * z).clamp(0.0, 1.0);
                }
            }
        }
    } else {
        for (i, mut row) in out.outer_iter_mut().enumerate() {
            let mut rng = rng_from(derive_seed(seed, i as u64));
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += sigma * z;
            }
        }
    }
    dataset.with_samples(out)
}
