//! Fixed sparse linear maps applied per batch row.
//!
//! Convolution patches, pooling, upsampling, padding and fixed filters are all
//! linear index maps. Representing them as a CSR matrix together with its
//! transpose keeps every such op differentiable to any order, since the adjoint
//! of a sparse map is again a sparse map.

use std::sync::Arc;

#[derive(Debug)]
struct Csr {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
}

impl Csr {
    fn from_rows(n_cols: usize, rows: &[Vec<(usize, f64)>]) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        row_ptr.push(0);
        for row in rows {
            let mut entries = row.clone();
            entries.sort_by_key(|&(c, _)| c);
            // merge duplicate columns (reflective padding folds taps together)
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
            for (c, w) in entries {
                assert!(c < n_cols, "sparse map column {c} out of range {n_cols}");
                match merged.last_mut() {
                    Some((lc, lw)) if *lc == c => *lw += w,
                    _ => merged.push((c, w)),
                }
            }
            for (c, w) in merged {
                cols.push(c);
                weights.push(w);
            }
            row_ptr.push(cols.len());
        }
        Self {
            n_rows: rows.len(),
            n_cols,
            row_ptr,
            cols,
            weights,
        }
    }

    fn transpose(&self) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.n_cols];
        for r in 0..self.n_rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                rows[self.cols[k]].push((r, self.weights[k]));
            }
        }
        Self::from_rows(self.n_rows, &rows)
    }

    fn apply_into(&self, input: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.weights[k] * input[self.cols[k]];
            }
            *o = acc;
        }
    }
}

/// A linear map `R^in -> R^out` applied independently to every leading-axis row.
///
/// `in_shape` and `out_shape` describe the per-row tensor shapes; the batch
/// axis is always the first axis of the operand.
#[derive(Debug, Clone)]
pub struct SparseMap {
    fwd: Arc<Csr>,
    adj: Arc<Csr>,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
}

impl SparseMap {
    /// Builds a map from one entry list per output element: `(input index, weight)`.
    pub fn from_rows(in_shape: &[usize], out_shape: &[usize], rows: &[Vec<(usize, f64)>]) -> Self {
        let n_in: usize = in_shape.iter().product();
        let n_out: usize = out_shape.iter().product();
        assert_eq!(rows.len(), n_out, "one row per output element");
        let fwd = Csr::from_rows(n_in, rows);
        let adj = fwd.transpose();
        Self {
            fwd: Arc::new(fwd),
            adj: Arc::new(adj),
            in_shape: in_shape.to_vec(),
            out_shape: out_shape.to_vec(),
        }
    }

    pub fn transposed(&self) -> Self {
        Self {
            fwd: Arc::clone(&self.adj),
            adj: Arc::clone(&self.fwd),
            in_shape: self.out_shape.clone(),
            out_shape: self.in_shape.clone(),
        }
    }

    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn n_in(&self) -> usize {
        self.fwd.n_cols
    }

    pub fn n_out(&self) -> usize {
        self.fwd.n_rows
    }

    /// Applies the map to `batch` rows stored contiguously in `input`.
    pub fn apply(&self, input: &[f64], batch: usize) -> Vec<f64> {
        let (n_in, n_out) = (self.n_in(), self.n_out());
        assert_eq!(input.len(), batch * n_in, "sparse map input length");
        let mut out = vec![0.0; batch * n_out];
        for b in 0..batch {
            self.fwd
                .apply_into(&input[b * n_in..(b + 1) * n_in], &mut out[b * n_out..(b + 1) * n_out]);
        }
        out
    }
}

/// Patch extraction for a `k x k` convolution with zero padding `k / 2` and
/// stride 1 on a channels-last `(h, w, c)` image. Output per row: `(h * w, k * k * c)`
/// with the patch laid out as `[ky][kx][c]`.
pub fn im2col(h: usize, w: usize, c: usize, k: usize) -> SparseMap {
    let pad = (k / 2) as isize;
    let mut rows = Vec::with_capacity(h * w * k * k * c);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for ky in 0..k as isize {
                for kx in 0..k as isize {
                    let (sy, sx) = (y + ky - pad, x + kx - pad);
                    let inside = sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize;
                    for ch in 0..c {
                        if inside {
                            rows.push(vec![(((sy as usize) * w + sx as usize) * c + ch, 1.0)]);
                        } else {
                            rows.push(Vec::new());
                        }
                    }
                }
            }
        }
    }
    SparseMap::from_rows(&[h, w, c], &[h * w, k * k * c], &rows)
}

/// 2x2 average pooling on a channels-last image; `h` and `w` must be even.
pub fn avg_pool2(h: usize, w: usize, c: usize) -> SparseMap {
    assert!(h.is_multiple_of(2) && w.is_multiple_of(2), "avg_pool2 needs even sides");
    let (oh, ow) = (h / 2, w / 2);
    let mut rows = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let mut row = Vec::with_capacity(4);
                for dy in 0..2 {
                    for dx in 0..2 {
                        row.push((((2 * y + dy) * w + 2 * x + dx) * c + ch, 0.25));
                    }
                }
                rows.push(row);
            }
        }
    }
    SparseMap::from_rows(&[h, w, c], &[oh, ow, c], &rows)
}

/// Nearest-neighbour 2x upsampling on a channels-last image.
pub fn upsample2(h: usize, w: usize, c: usize) -> SparseMap {
    let (oh, ow) = (2 * h, 2 * w);
    let mut rows = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                rows.push(vec![(((y / 2) * w + x / 2) * c + ch, 1.0)]);
            }
        }
    }
    SparseMap::from_rows(&[h, w, c], &[oh, ow, c], &rows)
}

/// Reflect index `i` into `[0, n)` without repeating the edge sample
/// (`-1 -> 1`, `n -> n - 2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Single-channel `h x w` correlation with a fixed separable kernel under
/// reflective padding. `kernel` is the 1-D tap vector (odd length).
pub fn separable_filter(h: usize, w: usize, kernel: &[f64]) -> SparseMap {
    assert!(kernel.len() % 2 == 1, "kernel length must be odd");
    let r = (kernel.len() / 2) as isize;
    let mut rows = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut row = Vec::with_capacity(kernel.len() * kernel.len());
            for (iy, ky) in kernel.iter().enumerate() {
                let sy = reflect_index(y + iy as isize - r, h);
                for (ix, kx) in kernel.iter().enumerate() {
                    let sx = reflect_index(x + ix as isize - r, w);
                    row.push((sy * w + sx, ky * kx));
                }
            }
            rows.push(row);
        }
    }
    SparseMap::from_rows(&[h, w], &[h, w], &rows)
}
