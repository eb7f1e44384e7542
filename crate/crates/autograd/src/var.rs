use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use ndarray::{concatenate, ArrayD, Axis, Ix2, IxDyn, Slice};

use crate::sparse::SparseMap;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

struct GradModeGuard(bool);

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.0));
    }
}

/// Runs `f` with graph recording switched on or off for this thread.
pub fn with_grad_enabled<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    let _guard = GradModeGuard(prev);
    f()
}

/// Runs `f` without recording any graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    with_grad_enabled(false, f)
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

fn next_id() -> u64 {
    NEXT_ID.with(|n| {
        let id = n.get();
        n.set(id + 1);
        id
    })
}

#[derive(Clone)]
enum Op {
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    AddScalar,
    Sigmoid,
    Exp,
    Ln,
    Sqrt,
    RecipSafe,
    Mask(ArrayD<f64>),
    Matmul,
    Transpose,
    Reshape(Vec<usize>),
    SumAxis(usize, usize),
    BroadcastAxis(usize),
    SumAll(Vec<usize>),
    BroadcastScalar,
    Sparse(SparseMap),
    ConcatLast(usize),
    SliceLast { start: usize, total: usize },
    PadLast { start: usize, len: usize },
}

struct Node {
    id: u64,
    value: ArrayD<f64>,
    requires_grad: bool,
    op: Option<Op>,
    parents: Vec<Var>,
}

/// A node in a dynamically recorded computation graph.
///
/// Cloning is cheap (reference counted). Graphs are thread-local; build a fresh
/// graph per worker.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    /// A value that never receives gradients.
    pub fn constant(value: ArrayD<f64>) -> Self {
        Self::make(value, false, None, Vec::new())
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn leaf(value: ArrayD<f64>) -> Self {
        Self::make(value, true, None, Vec::new())
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    fn make(value: ArrayD<f64>, requires_grad: bool, op: Option<Op>, parents: Vec<Var>) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            op,
            parents,
        }))
    }

    fn from_op(value: ArrayD<f64>, op: Op, parents: Vec<Var>) -> Self {
        if grad_enabled() && parents.iter().any(|p| p.requires_grad()) {
            Self::make(value, true, Some(op), parents)
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &ArrayD<f64> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// The single element of a scalar (or one-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.0.value.len(), 1, "item() on non-scalar of shape {:?}", self.shape());
        *self.0.value.iter().next().expect("one element")
    }

    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    fn same_shape(&self, other: &Var, what: &str) {
        assert_eq!(self.shape(), other.shape(), "{what}: shape mismatch");
    }

    pub fn add(&self, other: &Var) -> Var {
        self.same_shape(other, "add");
        Self::from_op(&self.0.value + &other.0.value, Op::Add, vec![self.clone(), other.clone()])
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.same_shape(other, "sub");
        Self::from_op(&self.0.value - &other.0.value, Op::Sub, vec![self.clone(), other.clone()])
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.same_shape(other, "mul");
        Self::from_op(&self.0.value * &other.0.value, Op::Mul, vec![self.clone(), other.clone()])
    }

    pub fn neg(&self) -> Var {
        Self::from_op(self.0.value.mapv(|v| -v), Op::Neg, vec![self.clone()])
    }

    pub fn scale(&self, c: f64) -> Var {
        Self::from_op(self.0.value.mapv(|v| v * c), Op::Scale(c), vec![self.clone()])
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        Self::from_op(self.0.value.mapv(|v| v + c), Op::AddScalar, vec![self.clone()])
    }

    pub fn square(&self) -> Var {
        self.mul(self)
    }

    pub fn sigmoid(&self) -> Var {
        let v = self.0.value.mapv(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        Self::from_op(v, Op::Sigmoid, vec![self.clone()])
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Var {
        self.mul(&self.sigmoid())
    }

    pub fn exp(&self) -> Var {
        Self::from_op(self.0.value.mapv(f64::exp), Op::Exp, vec![self.clone()])
    }

    pub fn ln(&self) -> Var {
        Self::from_op(self.0.value.mapv(f64::ln), Op::Ln, vec![self.clone()])
    }

    /// Square root whose derivative is taken as zero at exactly zero.
    pub fn sqrt(&self) -> Var {
        Self::from_op(self.0.value.mapv(f64::sqrt), Op::Sqrt, vec![self.clone()])
    }

    /// `1 / x`, with both value and derivative defined as zero at `x == 0`.
    pub fn recip_safe(&self) -> Var {
        let v = self.0.value.mapv(|x| if x == 0.0 { 0.0 } else { 1.0 / x });
        Self::from_op(v, Op::RecipSafe, vec![self.clone()])
    }

    /// Clamps into `[lo, hi]`; the gradient is passed through inside the
    /// interval (boundaries included) and blocked outside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        let mask = self.0.value.mapv(|x| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 });
        let v = self.0.value.mapv(|x| x.clamp(lo, hi));
        Self::from_op(v, Op::Mask(mask), vec![self.clone()])
    }

    fn mask(&self, mask: ArrayD<f64>) -> Var {
        let v = &self.0.value * &mask;
        Self::from_op(v, Op::Mask(mask), vec![self.clone()])
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Var) -> Var {
        let a = self.0.value.view().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-D");
        let b = other.0.value.view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-D");
        assert_eq!(a.ncols(), b.nrows(), "matmul inner dimension");
        Self::from_op(a.dot(&b).into_dyn(), Op::Matmul, vec![self.clone(), other.clone()])
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Var {
        let a = self.0.value.view().into_dimensionality::<Ix2>().expect("transpose needs 2-D");
        let v = a.t().as_standard_layout().into_owned().into_dyn();
        Self::from_op(v, Op::Transpose, vec![self.clone()])
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let from = self.shape().to_vec();
        let v = self
            .0
            .value
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        Self::from_op(v, Op::Reshape(from), vec![self.clone()])
    }

    pub fn sum_axis(&self, axis: usize) -> Var {
        let len = self.shape()[axis];
        Self::from_op(self.0.value.sum_axis(Axis(axis)), Op::SumAxis(axis, len), vec![self.clone()])
    }

    /// Inserts a new axis at `axis` and repeats the tensor `len` times along it.
    pub fn broadcast_axis(&self, axis: usize, len: usize) -> Var {
        let mut shape = self.shape().to_vec();
        shape.insert(axis, len);
        let v = self
            .0
            .value
            .view()
            .insert_axis(Axis(axis))
            .broadcast(IxDyn(&shape))
            .expect("broadcast")
            .as_standard_layout()
            .into_owned();
        Self::from_op(v, Op::BroadcastAxis(axis), vec![self.clone()])
    }

    pub fn sum(&self) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[]), self.0.value.sum());
        Self::from_op(v, Op::SumAll(self.shape().to_vec()), vec![self.clone()])
    }

    pub fn mean(&self) -> Var {
        let n = self.0.value.len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Repeats a scalar into `shape`.
    pub fn broadcast_scalar(&self, shape: &[usize]) -> Var {
        let v = ArrayD::from_elem(IxDyn(shape), self.item());
        Self::from_op(v, Op::BroadcastScalar, vec![self.clone()])
    }

    /// Applies `map` to every leading-axis row.
    pub fn sparse(&self, map: &SparseMap) -> Var {
        let batch = self.shape()[0];
        let tail: usize = self.shape()[1..].iter().product();
        assert_eq!(tail, map.n_in(), "sparse map input size");
        let input = self.0.value.as_standard_layout();
        let out = map.apply(input.as_slice().expect("standard layout"), batch);
        let mut shape = vec![batch];
        shape.extend_from_slice(map.out_shape());
        let v = ArrayD::from_shape_vec(IxDyn(&shape), out).expect("sparse output shape");
        Self::from_op(v, Op::Sparse(map.clone()), vec![self.clone()])
    }

    pub fn concat_last(&self, other: &Var) -> Var {
        let last = self.shape().len() - 1;
        let v = concatenate(Axis(last), &[self.0.value.view(), other.0.value.view()])
            .expect("concat shapes")
            .as_standard_layout()
            .into_owned();
        let split = self.shape()[last];
        Self::from_op(v, Op::ConcatLast(split), vec![self.clone(), other.clone()])
    }

    pub fn slice_last(&self, start: usize, len: usize) -> Var {
        let last = self.shape().len() - 1;
        let total = self.shape()[last];
        let v = self
            .0
            .value
            .slice_axis(Axis(last), Slice::from(start..start + len))
            .as_standard_layout()
            .into_owned();
        Self::from_op(v, Op::SliceLast { start, total }, vec![self.clone()])
    }

    /// Zero-pads the last axis to `total`, placing this tensor at `start`.
    pub fn pad_last(&self, start: usize, total: usize) -> Var {
        let last = self.shape().len() - 1;
        let len = self.shape()[last];
        let mut shape = self.shape().to_vec();
        shape[last] = total;
        let mut v = ArrayD::zeros(IxDyn(&shape));
        v.slice_axis_mut(Axis(last), Slice::from(start..start + len))
            .assign(&self.0.value);
        Self::from_op(v, Op::PadLast { start, len }, vec![self.clone()])
    }

    fn ones_like(&self) -> Var {
        Var::constant(ArrayD::ones(self.0.value.raw_dim()))
    }

    fn zeros_like(&self) -> Var {
        Var::constant(ArrayD::zeros(self.0.value.raw_dim()))
    }
}

/// Vector-Jacobian products of one recorded op, expressed with recorded ops so
/// the result is itself differentiable when `create_graph` is on.
fn backward_op(op: &Op, g: &Var, parents: &[Var], out: &Var) -> Vec<Option<Var>> {
    let p0 = &parents[0];
    match op {
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::Sub => vec![Some(g.clone()), Some(g.neg())],
        Op::Mul => vec![Some(g.mul(&parents[1])), Some(g.mul(p0))],
        Op::Neg => vec![Some(g.neg())],
        Op::Scale(c) => vec![Some(g.scale(*c))],
        Op::AddScalar => vec![Some(g.clone())],
        Op::Sigmoid => {
            let ds = out.mul(&out.neg().add_scalar(1.0));
            vec![Some(g.mul(&ds))]
        }
        Op::Exp => vec![Some(g.mul(out))],
        Op::Ln => vec![Some(g.mul(&p0.recip_safe()))],
        Op::Sqrt => vec![Some(g.mul(&out.recip_safe()).scale(0.5))],
        Op::RecipSafe => vec![Some(g.mul(&out.square()).neg())],
        Op::Mask(mask) => vec![Some(g.mask(mask.clone()))],
        Op::Matmul => {
            let b = &parents[1];
            vec![Some(g.matmul(&b.t())), Some(p0.t().matmul(g))]
        }
        Op::Transpose => vec![Some(g.t())],
        Op::Reshape(from) => vec![Some(g.reshape(from))],
        Op::SumAxis(axis, len) => vec![Some(g.broadcast_axis(*axis, *len))],
        Op::BroadcastAxis(axis) => vec![Some(g.sum_axis(*axis))],
        Op::SumAll(shape) => vec![Some(g.broadcast_scalar(shape))],
        Op::BroadcastScalar => vec![Some(g.sum())],
        Op::Sparse(map) => vec![Some(g.sparse(&map.transposed()).reshape(p0.shape()))],
        Op::ConcatLast(split) => {
            let last = g.shape().len() - 1;
            let total = g.shape()[last];
            vec![Some(g.slice_last(0, *split)), Some(g.slice_last(*split, total - split))]
        }
        Op::SliceLast { start, total } => vec![Some(g.pad_last(*start, *total))],
        Op::PadLast { start, len } => vec![Some(g.slice_last(*start, *len))],
    }
}

fn topo_order(root: &Var) -> Vec<Var> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    // (node, expanded) pairs for an iterative post-order walk
    let mut stack: Vec<(Var, bool)> = vec![(root.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !v.requires_grad() || !visited.insert(v.0.id) {
            continue;
        }
        stack.push((v.clone(), true));
        for p in &v.0.parents {
            if p.requires_grad() && !visited.contains(&p.0.id) {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

/// Gradients of the scalar `output` with respect to each of `inputs`.
///
/// With `create_graph` the returned gradients are recorded and can be
/// differentiated again; otherwise they are constants.
pub fn grad(output: &Var, inputs: &[&Var], create_graph: bool) -> Vec<Var> {
    assert_eq!(output.value().len(), 1, "grad() needs a scalar output");
    let order = topo_order(output);
    let wanted: HashSet<u64> = inputs.iter().map(|v| v.0.id).collect();
    let mut grads: HashMap<u64, Var> = HashMap::new();
    if output.requires_grad() {
        grads.insert(output.0.id, output.ones_like());
    }
    with_grad_enabled(create_graph, || {
        for node in order.iter().rev() {
            let Some(op) = &node.0.op else { continue };
            let g = if wanted.contains(&node.0.id) {
                grads.get(&node.0.id).cloned()
            } else {
                grads.remove(&node.0.id)
            };
            let Some(g) = g else { continue };
            let parent_grads = backward_op(op, &g, &node.0.parents, node);
            for (p, pg) in node.0.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                let acc = match grads.remove(&p.0.id) {
                    Some(prev) => prev.add(&pg),
                    None => pg,
                };
                grads.insert(p.0.id, acc);
            }
        }
    });
    inputs
        .iter()
        .map(|v| grads.get(&v.0.id).cloned().unwrap_or_else(|| v.zeros_like()))
        .collect()
}
