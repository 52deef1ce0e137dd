//! Minimal reverse-mode differentiation engine.
//!
//! Tensors are dense row-major value grids with an optional gradient slot.
//! Every operation eagerly computes its output and records its parents, so a
//! later `backward` call on a scalar root can replay the graph in reverse and
//! accumulate vector-Jacobian products into each `requires_grad` tensor.
//!
//! The op set is exactly what the counting network, the cross-attention
//! fusion, and the mutual-information heads need — no broadcasting rules
//! beyond the few shapes that actually occur.

mod conv;
pub mod gradcheck;
pub mod optim;

use crate::error::{Error, Result};
use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt::{Debug, Display};
use std::rc::Rc;

/// Scalar element type of the engine: `f64` for verification, `f32` for
/// faster training runs.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Debug
    + Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Convert an `f64` literal/value into the engine scalar type.
pub fn rf<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("f64 converts to engine float")
}

/// Read an engine scalar back as `f64`.
pub fn f64_of<F: Real>(x: F) -> f64 {
    x.to_f64().expect("engine float converts to f64")
}

/// Guard added under the square root of row normalization.
const NORM_EPS_SQ: f64 = 1e-24;

pub(crate) struct Node<F: Real> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub grad: Option<Vec<F>>,
    pub requires_grad: bool,
    op: Op<F>,
}

enum Op<F: Real> {
    Leaf,
    Add(GradTensor<F>, GradTensor<F>),
    Sub(GradTensor<F>, GradTensor<F>),
    Mul(GradTensor<F>, GradTensor<F>),
    AddScalar(GradTensor<F>),
    Scale(GradTensor<F>, F),
    Relu(GradTensor<F>),
    Exp(GradTensor<F>),
    Clamp(GradTensor<F>, F, F),
    MatMul(GradTensor<F>, GradTensor<F>),
    Transpose(GradTensor<F>),
    Reshape(GradTensor<F>),
    ConcatFlat(Vec<GradTensor<F>>),
    SliceFlat(GradTensor<F>, usize),
    SliceCols(GradTensor<F>, usize),
    AddRowVec(GradTensor<F>, GradTensor<F>),
    Sum(GradTensor<F>),
    RowSums(GradTensor<F>),
    LogSumExpRows(GradTensor<F>),
    Diag(GradTensor<F>),
    ColBroadcast(GradTensor<F>),
    NormalizeRows(GradTensor<F>),
    SoftmaxRows(GradTensor<F>),
    SumPool2d(GradTensor<F>, usize),
    Conv2d {
        x: GradTensor<F>,
        w: GradTensor<F>,
        b: GradTensor<F>,
        stride: usize,
        pad: usize,
    },
}

impl<F: Real> Op<F> {
    fn parents(&self) -> Vec<GradTensor<F>> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => {
                vec![a.clone(), b.clone()]
            }
            Op::AddRowVec(a, v) => vec![a.clone(), v.clone()],
            Op::AddScalar(a)
            | Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Clamp(a, _, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SliceFlat(a, _)
            | Op::SliceCols(a, _)
            | Op::Sum(a)
            | Op::RowSums(a)
            | Op::LogSumExpRows(a)
            | Op::Diag(a)
            | Op::ColBroadcast(a)
            | Op::NormalizeRows(a)
            | Op::SoftmaxRows(a)
            | Op::SumPool2d(a, _) => vec![a.clone()],
            Op::ConcatFlat(parts) => parts.clone(),
            Op::Conv2d { x, w, b, .. } => vec![x.clone(), w.clone(), b.clone()],
        }
    }
}

/// Handle to a node of the recorded computation graph.
pub struct GradTensor<F: Real> {
    node: Rc<RefCell<Node<F>>>,
}

impl<F: Real> Debug for GradTensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.node.borrow();
        f.debug_struct("GradTensor")
            .field("shape", &n.shape)
            .field("requires_grad", &n.requires_grad)
            .finish()
    }
}

impl<F: Real> Clone for GradTensor<F> {
    fn clone(&self) -> Self {
        GradTensor {
            node: Rc::clone(&self.node),
        }
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Real> GradTensor<F> {
    fn from_node(node: Node<F>) -> Self {
        GradTensor {
            node: Rc::new(RefCell::new(node)),
        }
    }

    fn new_leaf(shape: Vec<usize>, data: Vec<F>, requires_grad: bool) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel_of(&shape),
                data.len()
            )));
        }
        Ok(Self::from_node(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        }))
    }

    fn new_op(shape: Vec<usize>, data: Vec<F>, op: Op<F>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        Self::from_node(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        })
    }

    /// Leaf that never receives a gradient.
    pub fn constant(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        Self::new_leaf(shape, data, false)
    }

    /// Trainable leaf.
    pub fn param(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        Self::new_leaf(shape, data, true)
    }

    pub fn scalar(v: F) -> Self {
        Self::new_leaf(vec![], vec![v], false).expect("scalar shape")
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel_of(&shape);
        Self::new_leaf(shape, vec![F::zero(); n], false).expect("zeros shape")
    }

    pub fn from_f64_slice(shape: Vec<usize>, data: &[f64], requires_grad: bool) -> Result<Self> {
        let conv: Vec<F> = data.iter().map(|&x| rf(x)).collect();
        Self::new_leaf(shape, conv, requires_grad)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.node.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.borrow().requires_grad
    }

    pub fn data_vec(&self) -> Vec<F> {
        self.node.borrow().data.clone()
    }

    pub fn data_f64(&self) -> Vec<f64> {
        self.node.borrow().data.iter().map(|&x| f64_of(x)).collect()
    }

    /// Scalar value of a one-element tensor.
    pub fn value(&self) -> F {
        let n = self.node.borrow();
        debug_assert_eq!(n.data.len(), 1, "value() on non-scalar");
        n.data[0]
    }

    pub fn grad(&self) -> Option<Vec<F>> {
        self.node.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.node.borrow_mut().grad = None;
    }

    /// Overwrite the stored values (used by the optimizer and tests).
    pub fn set_data(&self, data: &[F]) -> Result<()> {
        let mut n = self.node.borrow_mut();
        if n.data.len() != data.len() {
            return Err(Error::Dimension(format!(
                "set_data length {} does not match tensor length {}",
                data.len(),
                n.data.len()
            )));
        }
        n.data.copy_from_slice(data);
        Ok(())
    }

    /// Copy of the values as a fresh constant leaf, cut off from the graph.
    pub fn detach(&self) -> GradTensor<F> {
        let n = self.node.borrow();
        Self::new_leaf(n.shape.clone(), n.data.clone(), false).expect("detach shape")
    }

    pub(crate) fn with_node_mut<R>(&self, f: impl FnOnce(&mut Node<F>) -> R) -> R {
        f(&mut self.node.borrow_mut())
    }

    fn ptr(&self) -> *const RefCell<Node<F>> {
        Rc::as_ptr(&self.node)
    }

    fn same_shape(&self, other: &Self, op: &str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::Dimension(format!(
                "{op}: shapes {a:?} and {b:?} differ"
            )));
        }
        Ok(())
    }

    fn rows_cols(&self, op: &str) -> Result<(usize, usize)> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::Dimension(format!(
                "{op}: expected a 2-d tensor, got shape {s:?}"
            )));
        }
        Ok((s[0], s[1]))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        let data = zip_map(&self.node.borrow().data, &other.node.borrow().data, |a, b| {
            a + b
        });
        Ok(Self::new_op(
            self.shape(),
            data,
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "sub")?;
        let data = zip_map(&self.node.borrow().data, &other.node.borrow().data, |a, b| {
            a - b
        });
        Ok(Self::new_op(
            self.shape(),
            data,
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "mul")?;
        let data = zip_map(&self.node.borrow().data, &other.node.borrow().data, |a, b| {
            a * b
        });
        Ok(Self::new_op(
            self.shape(),
            data,
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn add_scalar(&self, c: F) -> Self {
        let data = self.node.borrow().data.iter().map(|&x| x + c).collect();
        Self::new_op(self.shape(), data, Op::AddScalar(self.clone()))
    }

    pub fn scale(&self, c: F) -> Self {
        let data = self.node.borrow().data.iter().map(|&x| x * c).collect();
        Self::new_op(self.shape(), data, Op::Scale(self.clone(), c))
    }

    pub fn relu(&self) -> Self {
        let z = F::zero();
        let data = self.node.borrow().data.iter().map(|&x| x.max(z)).collect();
        Self::new_op(self.shape(), data, Op::Relu(self.clone()))
    }

    pub fn exp(&self) -> Self {
        let data = self.node.borrow().data.iter().map(|&x| x.exp()).collect();
        Self::new_op(self.shape(), data, Op::Exp(self.clone()))
    }

    pub fn clamp(&self, lo: F, hi: F) -> Self {
        let data = self
            .node
            .borrow()
            .data
            .iter()
            .map(|&x| x.max(lo).min(hi))
            .collect();
        Self::new_op(self.shape(), data, Op::Clamp(self.clone(), lo, hi))
    }

    // ---- linear algebra --------------------------------------------------

    /// Standard matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.rows_cols("matmul lhs")?;
        let (k2, n) = other.rows_cols("matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: inner extents differ ({m}x{k} vs {k2}x{n})"
            )));
        }
        let mut out = vec![F::zero(); m * n];
        mm_nn(
            &self.node.borrow().data,
            &other.node.borrow().data,
            m,
            k,
            n,
            &mut out,
        );
        Ok(Self::new_op(
            vec![m, n],
            out,
            Op::MatMul(self.clone(), other.clone()),
        ))
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.rows_cols("transpose")?;
        let src = &self.node.borrow().data;
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(Self::new_op(vec![c, r], out, Op::Transpose(self.clone())))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        if numel_of(&shape) != self.numel() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        let data = self.node.borrow().data.clone();
        Ok(Self::new_op(shape, data, Op::Reshape(self.clone())))
    }

    /// Flatten-and-concatenate several tensors into one 1-d tensor.
    pub fn concat_flat(parts: &[GradTensor<F>]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_flat: empty part list".into()));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(&p.node.borrow().data);
        }
        let total = data.len();
        Ok(Self::new_op(
            vec![total],
            data,
            Op::ConcatFlat(parts.to_vec()),
        ))
    }

    /// Contiguous slice of the flattened parent, reshaped to `shape`.
    pub fn slice_flat(&self, offset: usize, shape: Vec<usize>) -> Result<Self> {
        let len = numel_of(&shape);
        if offset + len > self.numel() {
            return Err(Error::Dimension(format!(
                "slice_flat: [{offset}, {}) exceeds {} elements",
                offset + len,
                self.numel()
            )));
        }
        let data = self.node.borrow().data[offset..offset + len].to_vec();
        Ok(Self::new_op(shape, data, Op::SliceFlat(self.clone(), offset)))
    }

    /// Column block `[.., start..start+width]` of a 2-d tensor.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Self> {
        let (r, c) = self.rows_cols("slice_cols")?;
        if start + width > c {
            return Err(Error::Dimension(format!(
                "slice_cols: columns [{start}, {}) exceed width {c}",
                start + width
            )));
        }
        let src = &self.node.borrow().data;
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + width]);
        }
        Ok(Self::new_op(
            vec![r, width],
            out,
            Op::SliceCols(self.clone(), start),
        ))
    }

    /// Add a length-`d` vector to every row of an `[n,d]` tensor.
    pub fn add_row_vec(&self, v: &Self) -> Result<Self> {
        let (r, c) = self.rows_cols("add_row_vec")?;
        let vs = v.shape();
        if vs != [c] {
            return Err(Error::Dimension(format!(
                "add_row_vec: vector shape {vs:?} does not match row width {c}"
            )));
        }
        let a = &self.node.borrow().data;
        let vv = &v.node.borrow().data;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(a[i * c + j] + vv[j]);
            }
        }
        Ok(Self::new_op(
            vec![r, c],
            out,
            Op::AddRowVec(self.clone(), v.clone()),
        ))
    }

    // ---- reductions and row-structured ops -------------------------------

    /// Sum of all elements, as a scalar (shape `[]`).
    pub fn sum(&self) -> Self {
        let s: F = self.node.borrow().data.iter().copied().sum();
        Self::new_op(vec![], vec![s], Op::Sum(self.clone()))
    }

    /// Mean of all elements.
    pub fn mean(&self) -> Self {
        let n = self.numel();
        self.sum().scale(rf(1.0 / n as f64))
    }

    /// Per-row sums of an `[n,m]` tensor -> `[n]`.
    pub fn row_sums(&self) -> Result<Self> {
        let (r, c) = self.rows_cols("row_sums")?;
        let src = &self.node.borrow().data;
        let out: Vec<F> = (0..r)
            .map(|i| src[i * c..(i + 1) * c].iter().copied().sum())
            .collect();
        Ok(Self::new_op(vec![r], out, Op::RowSums(self.clone())))
    }

    /// Numerically stable per-row log-sum-exp -> `[n]`.
    pub fn logsumexp_rows(&self) -> Result<Self> {
        let (r, c) = self.rows_cols("logsumexp_rows")?;
        let src = &self.node.borrow().data;
        if src.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(
                "logsumexp_rows: non-finite input entry".into(),
            ));
        }
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let s: F = row.iter().map(|&x| (x - m).exp()).sum();
            out.push(m + s.ln());
        }
        Ok(Self::new_op(vec![r], out, Op::LogSumExpRows(self.clone())))
    }

    /// Main diagonal of an `[n,n]` tensor -> `[n]`.
    pub fn diag(&self) -> Result<Self> {
        let (r, c) = self.rows_cols("diag")?;
        if r != c {
            return Err(Error::Dimension(format!("diag: tensor is {r}x{c}")));
        }
        let src = &self.node.borrow().data;
        let out: Vec<F> = (0..r).map(|i| src[i * c + i]).collect();
        Ok(Self::new_op(vec![r], out, Op::Diag(self.clone())))
    }

    /// Tile a length-`n` vector into an `[n,m]` tensor, constant along rows.
    pub fn col_broadcast(&self, m: usize) -> Result<Self> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(Error::Dimension(format!(
                "col_broadcast: expected a vector, got shape {s:?}"
            )));
        }
        let n = s[0];
        let src = &self.node.borrow().data;
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for _ in 0..m {
                out.push(src[i]);
            }
        }
        Ok(Self::new_op(
            vec![n, m],
            out,
            Op::ColBroadcast(self.clone()),
        ))
    }

    /// Scale each row of an `[n,d]` tensor to (guarded) unit L2 norm.
    pub fn normalize_rows(&self) -> Result<Self> {
        let (r, c) = self.rows_cols("normalize_rows")?;
        let src = &self.node.borrow().data;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let s: F = row.iter().map(|&x| x * x).sum();
            let m = (s + rf(NORM_EPS_SQ)).sqrt();
            out.extend(row.iter().map(|&x| x / m));
        }
        Ok(Self::new_op(
            vec![r, c],
            out,
            Op::NormalizeRows(self.clone()),
        ))
    }

    /// Row-wise softmax with max subtraction. Rows sum to one.
    pub fn softmax_rows(&self) -> Result<Self> {
        let (r, c) = self.rows_cols("softmax_rows")?;
        let src = &self.node.borrow().data;
        if src.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("softmax_rows: non-finite input entry".into()));
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let exps: Vec<F> = row.iter().map(|&x| (x - m).exp()).collect();
            let s: F = exps.iter().copied().sum();
            out.extend(exps.iter().map(|&e| e / s));
        }
        Ok(Self::new_op(vec![r, c], out, Op::SoftmaxRows(self.clone())))
    }

    // ---- spatial ops ------------------------------------------------------

    /// Sum-pool a `[c,h,w]` tensor by `factor` in both spatial extents.
    /// Each output cell is the exact sum of its block, so total mass is kept.
    pub fn sum_pool2d(&self, factor: usize) -> Result<Self> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(Error::Dimension(format!(
                "sum_pool2d: expected [c,h,w], got {s:?}"
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::Dimension(format!(
                "sum_pool2d: extents {h}x{w} not divisible by factor {factor}"
            )));
        }
        let (ho, wo) = (h / factor, w / factor);
        let src = &self.node.borrow().data;
        let mut out = vec![F::zero(); c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = F::zero();
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc = acc + src[ch * h * w + (oy * factor + dy) * w + ox * factor + dx];
                        }
                    }
                    out[ch * ho * wo + oy * wo + ox] = acc;
                }
            }
        }
        Ok(Self::new_op(
            vec![c, ho, wo],
            out,
            Op::SumPool2d(self.clone(), factor),
        ))
    }

    /// 2-d cross-correlation of `[ci,h,w]` by `[co,ci,kh,kw]` with bias `[co]`.
    pub fn conv2d(&self, w: &Self, b: &Self, stride: usize, pad: usize) -> Result<Self> {
        conv::conv2d_forward(self, w, b, stride, pad)
    }

    pub(crate) fn new_conv_node(
        shape: Vec<usize>,
        data: Vec<F>,
        x: &Self,
        w: &Self,
        b: &Self,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self::new_op(
            shape,
            data,
            Op::Conv2d {
                x: x.clone(),
                w: w.clone(),
                b: b.clone(),
                stride,
                pad,
            },
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse-mode sweep from a scalar root. Gradients accumulate into every
    /// reachable `requires_grad` tensor; repeated calls without `zero_grad`
    /// keep accumulating.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: root must be scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Post-order DFS over the requires_grad subgraph: parents appear
        // before their consumers, so the reversed order is a valid backward
        // schedule.
        let mut order: Vec<GradTensor<F>> = Vec::new();
        let mut visited: HashSet<*const RefCell<Node<F>>> = HashSet::new();
        let mut stack: Vec<(GradTensor<F>, Vec<GradTensor<F>>, usize)> = Vec::new();
        visited.insert(self.ptr());
        let parents = self.node.borrow().op.parents();
        stack.push((self.clone(), parents, 0));
        while let Some((node, parents, idx)) = stack.last_mut() {
            if *idx < parents.len() {
                let p = parents[*idx].clone();
                *idx += 1;
                if p.requires_grad() && visited.insert(p.ptr()) {
                    let pp = p.node.borrow().op.parents();
                    stack.push((p, pp, 0));
                }
            } else {
                order.push(node.clone());
                stack.pop();
            }
        }

        let mut adjoint: HashMap<*const RefCell<Node<F>>, Vec<F>> = HashMap::new();
        adjoint.insert(self.ptr(), vec![F::one()]);

        for node in order.iter().rev() {
            let g = match adjoint.remove(&node.ptr()) {
                Some(g) => g,
                None => continue,
            };
            {
                let mut n = node.node.borrow_mut();
                if n.requires_grad {
                    match &mut n.grad {
                        Some(acc) => {
                            for (a, gi) in acc.iter_mut().zip(g.iter()) {
                                *a = *a + *gi;
                            }
                        }
                        None => n.grad = Some(g.clone()),
                    }
                }
            }
            node.propagate(&g, &mut adjoint);
        }
        Ok(())
    }

    fn propagate(&self, g: &[F], adjoint: &mut HashMap<*const RefCell<Node<F>>, Vec<F>>) {
        let node = self.node.borrow();
        let mut push = |t: &GradTensor<F>, contrib: Vec<F>| {
            if !t.requires_grad() {
                return;
            }
            let slot = adjoint
                .entry(t.ptr())
                .or_insert_with(|| vec![F::zero(); t.numel()]);
            for (s, c) in slot.iter_mut().zip(contrib.iter()) {
                *s = *s + *c;
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                push(a, g.to_vec());
                push(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                push(a, g.to_vec());
                push(b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let av = a.node.borrow().data.clone();
                let bv = b.node.borrow().data.clone();
                push(a, zip_map(g, &bv, |x, y| x * y));
                push(b, zip_map(g, &av, |x, y| x * y));
            }
            Op::AddScalar(a) => push(a, g.to_vec()),
            Op::Scale(a, c) => push(a, g.iter().map(|&x| x * *c).collect()),
            Op::Relu(a) => {
                let av = a.node.borrow().data.clone();
                push(
                    a,
                    zip_map(g, &av, |gi, x| if x > F::zero() { gi } else { F::zero() }),
                );
            }
            Op::Exp(a) => push(a, zip_map(g, &node.data, |gi, y| gi * y)),
            Op::Clamp(a, lo, hi) => {
                let av = a.node.borrow().data.clone();
                push(
                    a,
                    zip_map(g, &av, |gi, x| {
                        if x > *lo && x < *hi {
                            gi
                        } else {
                            F::zero()
                        }
                    }),
                );
            }
            Op::MatMul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if a.requires_grad() {
                    let mut da = vec![F::zero(); m * k];
                    mm_nt(g, &b.node.borrow().data, m, n, k, &mut da);
                    push(a, da);
                }
                if b.requires_grad() {
                    let mut db = vec![F::zero(); k * n];
                    mm_tn(&a.node.borrow().data, g, m, k, n, &mut db);
                    push(b, db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                // node shape is [c, r]; transpose g back to [r, c]
                let mut da = vec![F::zero(); r * c];
                for i in 0..c {
                    for j in 0..r {
                        da[j * c + i] = g[i * r + j];
                    }
                }
                push(a, da);
            }
            Op::Reshape(a) => push(a, g.to_vec()),
            Op::ConcatFlat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = p.numel();
                    push(p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::SliceFlat(a, offset) => {
                let mut da = vec![F::zero(); a.numel()];
                da[*offset..*offset + g.len()].copy_from_slice(g);
                push(a, da);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                let w = node.shape[1];
                let mut da = vec![F::zero(); r * c];
                for i in 0..r {
                    da[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                push(a, da);
            }
            Op::AddRowVec(a, v) => {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                push(a, g.to_vec());
                if v.requires_grad() {
                    let mut dv = vec![F::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            dv[j] = dv[j] + g[i * c + j];
                        }
                    }
                    push(v, dv);
                }
            }
            Op::Sum(a) => push(a, vec![g[0]; a.numel()]),
            Op::RowSums(a) => {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                let mut da = Vec::with_capacity(r * c);
                for i in 0..r {
                    for _ in 0..c {
                        da.push(g[i]);
                    }
                }
                push(a, da);
            }
            Op::LogSumExpRows(a) => {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                let av = a.node.borrow().data.clone();
                let mut da = Vec::with_capacity(r * c);
                for i in 0..r {
                    let row = &av[i * c..(i + 1) * c];
                    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
                    let exps: Vec<F> = row.iter().map(|&x| (x - m).exp()).collect();
                    let s: F = exps.iter().copied().sum();
                    da.extend(exps.iter().map(|&e| g[i] * e / s));
                }
                push(a, da);
            }
            Op::Diag(a) => {
                let n = a.shape()[0];
                let mut da = vec![F::zero(); n * n];
                for i in 0..n {
                    da[i * n + i] = g[i];
                }
                push(a, da);
            }
            Op::ColBroadcast(v) => {
                let n = v.numel();
                let m = node.shape[1];
                let mut dv = vec![F::zero(); n];
                for i in 0..n {
                    for j in 0..m {
                        dv[i] = dv[i] + g[i * m + j];
                    }
                }
                push(v, dv);
            }
            Op::NormalizeRows(a) => {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                let av = a.node.borrow().data.clone();
                let mut da = Vec::with_capacity(r * c);
                for i in 0..r {
                    let row = &av[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let s: F = row.iter().map(|&x| x * x).sum();
                    let m = (s + rf(NORM_EPS_SQ)).sqrt();
                    let gdotx: F = gr.iter().zip(row.iter()).map(|(&gi, &x)| gi * x).sum();
                    let m3 = m * m * m;
                    da.extend(
                        gr.iter()
                            .zip(row.iter())
                            .map(|(&gi, &x)| gi / m - x * gdotx / m3),
                    );
                }
                push(a, da);
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = (a.shape()[0], a.shape()[1]);
                let y = &node.data;
                let mut da = Vec::with_capacity(r * c);
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: F = yr.iter().zip(gr.iter()).map(|(&yi, &gi)| yi * gi).sum();
                    da.extend(yr.iter().zip(gr.iter()).map(|(&yi, &gi)| yi * (gi - dot)));
                }
                push(a, da);
            }
            Op::SumPool2d(a, factor) => {
                let s = a.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (ho, wo) = (h / factor, w / factor);
                let mut da = vec![F::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            da[ch * h * w + y * w + x] =
                                g[ch * ho * wo + (y / factor) * wo + x / factor];
                        }
                    }
                }
                push(a, da);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (dx, dw, db) = conv::conv2d_backward(x, w, g, &node.shape, *stride, *pad);
                push(x, dx);
                push(w, dw);
                push(b, db);
            }
        }
    }
}

fn zip_map<F: Real>(a: &[F], b: &[F], f: impl Fn(F, F) -> F) -> Vec<F> {
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

/// `out += a[m,k] * b[k,n]`
pub(crate) fn mm_nn<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + aik * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn mm_nt<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (x, y) in arow.iter().zip(brow.iter()) {
                acc = acc + *x * *y;
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// `out[m,n] += a[k,m]^T * b[k,n]`
pub(crate) fn mm_tn<F: Real>(a: &[F], b: &[F], k: usize, m: usize, n: usize, out: &mut [F]) {
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o = *o + av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: Vec<usize>, data: Vec<f64>) -> GradTensor<f64> {
        GradTensor::param(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i2 = GradTensor::constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = GradTensor::constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = i2.matmul(&a).unwrap();
        assert_eq!(out.data_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let a = t64(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t64(vec![2, 1], vec![5.0, 6.0]);
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.data_vec(), vec![17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t64(vec![2, 3], vec![0.0; 6]);
        let b = t64(vec![2, 2], vec![0.0; 4]);
        match a.matmul(&b) {
            Err(Error::Dimension(_)) => {}
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_symmetry_and_hand_value() {
        let x = t64(vec![2, 2], vec![0.0, 0.0, 0.0, 3.0f64.ln()]);
        let y = x.softmax_rows().unwrap();
        let d = y.data_vec();
        assert!((d[0] - 0.5).abs() < 1e-12);
        assert!((d[1] - 0.5).abs() < 1e-12);
        assert!((d[2] - 0.25).abs() < 1e-12);
        assert!((d[3] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_inputs_no_overflow() {
        let x = t64(vec![1, 2], vec![1000.0, 1000.0]);
        let y = x.softmax_rows().unwrap();
        let d = y.data_vec();
        assert!((d[0] - 0.5).abs() < 1e-12 && (d[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_nan_rejected() {
        let x = t64(vec![1, 2], vec![f64::NAN, 0.0]);
        match x.softmax_rows() {
            Err(Error::Numeric(_)) => {}
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn sum_pool_hand_case_and_identity() {
        let x = t64(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let p = x.sum_pool2d(2).unwrap();
        assert_eq!(p.data_vec(), vec![10.0]);
        let id = x.sum_pool2d(1).unwrap();
        assert_eq!(id.data_vec(), x.data_vec());
        match x.sum_pool2d(3) {
            Err(Error::Dimension(_)) => {}
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn backward_sum_of_squares() {
        let x = t64(vec![3], vec![1.0, -2.0, 0.5]);
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g, vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let x = t64(vec![2], vec![1.0, 2.0]);
        match x.backward() {
            Err(Error::Contract(_)) => {}
            other => panic!("expected contract error, got {other:?}"),
        }
    }

    #[test]
    fn backward_accumulates_without_reset() {
        let x = t64(vec![2], vec![1.0, 2.0]);
        let loss = x.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
    }

    #[test]
    fn constant_leaf_gets_no_grad() {
        let c = GradTensor::constant(vec![2], vec![1.0, 2.0]).unwrap();
        let x = t64(vec![2], vec![3.0, 4.0]);
        let loss = c.mul(&x).unwrap().sum();
        loss.backward().unwrap();
        assert!(c.grad().is_none());
        assert_eq!(x.grad().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn shared_parent_accumulates_product_rule() {
        let x = t64(vec![1], vec![3.0]);
        let y = x.mul(&x).unwrap().sum(); // x^2
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn concat_slice_roundtrip_and_grads() {
        let a = t64(vec![2], vec![1.0, 2.0]);
        let b = t64(vec![2], vec![3.0, 4.0]);
        let cat = GradTensor::concat_flat(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(cat.data_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        let back = cat.slice_flat(2, vec![2]).unwrap();
        assert_eq!(back.data_vec(), vec![3.0, 4.0]);
        let loss = back.sum();
        loss.backward().unwrap();
        assert!(a.grad().is_none() || a.grad().unwrap() == vec![0.0, 0.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn logsumexp_matches_direct() {
        let x = t64(vec![1, 3], vec![0.1, -0.7, 2.0]);
        let l = x.logsumexp_rows().unwrap();
        let direct = (0.1f64.exp() + (-0.7f64).exp() + 2.0f64.exp()).ln();
        assert!((l.data_vec()[0] - direct).abs() < 1e-12);
    }

    #[test]
    fn normalize_rows_unit_norm() {
        let x = t64(vec![2, 3], vec![3.0, 0.0, 4.0, 1.0, 1.0, 1.0]);
        let y = x.normalize_rows().unwrap();
        let d = y.data_vec();
        let n0 = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let n1 = (d[3] * d[3] + d[4] * d[4] + d[5] * d[5]).sqrt();
        assert!((n0 - 1.0).abs() < 1e-9 && (n1 - 1.0).abs() < 1e-9);
    }
}
