//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive application in evaluation order, so
//! node indices are already a topological order. Two reverse passes exist:
//!
//! * [`Tape::backward`] walks the tape numerically and returns gradients of a
//!   scalar root with respect to every trainable leaf.
//! * [`Tape::vjp`] builds the vector-Jacobian product out of tape primitives,
//!   so the result is itself differentiable. The flow's trace and Frobenius
//!   estimators rely on this to put `εᵀJ` inside the training loss.
//!
//! The primitive set is closed under differentiation: every backward rule is
//! expressed with primitives from the same set.

use std::collections::HashMap;
use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shared row-index list used by gather/segment primitives.
pub type Index = Arc<[usize]>;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    SliceCols { a: Var, start: usize, end: usize },
    Sum(Var),
    Expand(Var),
    Swish(Var),
    Sigmoid(Var),
    SegmentSum { a: Var, segments: Index },
    Gather { a: Var, index: Index },
    SegmentSoftmax { a: Var, segments: Index, count: usize },
    Square(Var),
    Sqrt(Var),
    Log(Var),
    Exp(Var),
    Recip(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "subtract",
            Op::Mul(..) => "multiply",
            Op::Scale(..) => "scale",
            Op::Concat(..) => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::Sum(..) => "sum",
            Op::Expand(..) => "expand",
            Op::Swish(..) => "swish",
            Op::Sigmoid(..) => "sigmoid",
            Op::SegmentSum { .. } => "segment_sum",
            Op::Gather { .. } => "gather",
            Op::SegmentSoftmax { .. } => "segment_softmax",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Recip(..) => "recip",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat(parts) => parts.clone(),
            Op::Scale(a, _)
            | Op::SliceCols { a, .. }
            | Op::Sum(a)
            | Op::Expand(a)
            | Op::Swish(a)
            | Op::Sigmoid(a)
            | Op::SegmentSum { a, .. }
            | Op::Gather { a, .. }
            | Op::SegmentSoftmax { a, .. }
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Recip(a) => vec![*a],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
}

/// Append-only record of primitive applications.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to trainable leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: HashMap<Var, Tensor>,
}

impl Gradients {
    /// Gradient for `leaf`, or `None` when the root does not depend on it.
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.by_leaf.get(&leaf)
    }

    /// Gradient for `leaf` with unreachable leaves reported as zeros.
    pub fn get_or_zeros(&self, leaf: Var, shape: [usize; 2]) -> Tensor {
        self.by_leaf.get(&leaf).cloned().unwrap_or_else(|| Tensor::zeros(shape[0], shape[1]))
    }

    pub fn add_assign(&mut self, other: Gradients) {
        for (k, v) in other.by_leaf {
            match self.by_leaf.get_mut(&k) {
                Some(acc) => acc.axpy(1.0, &v),
                None => {
                    self.by_leaf.insert(k, v);
                }
            }
        }
    }
}

fn shape_err(op: &str, shapes: &[[usize; 2]]) -> Error {
    let rendered: Vec<String> = shapes.iter().map(|s| format!("[{}, {}]", s[0], s[1])).collect();
    Error::Shape(format!("{op}: incompatible shapes {}", rendered.join(", ")))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn segment_sum_values(a: &Tensor, segments: &[usize], count: usize) -> Tensor {
    let cols = a.cols();
    let mut out = Tensor::zeros(count, cols);
    let data = out.data_mut();
    for (r, &s) in segments.iter().enumerate() {
        let src = a.row(r);
        let dst = &mut data[s * cols..(s + 1) * cols];
        for (d, v) in dst.iter_mut().zip(src) {
            *d += v;
        }
    }
    out
}

fn segment_softmax_values(a: &Tensor, segments: &[usize], count: usize) -> Tensor {
    let cols = a.cols();
    let mut max = vec![f64::NEG_INFINITY; count * cols];
    for (r, &s) in segments.iter().enumerate() {
        for (m, &v) in max[s * cols..(s + 1) * cols].iter_mut().zip(a.row(r)) {
            *m = m.max(v);
        }
    }
    let mut out = Tensor::zeros(a.rows(), cols);
    let mut denom = vec![0.0; count * cols];
    {
        let od = out.data_mut();
        for (r, &s) in segments.iter().enumerate() {
            for c in 0..cols {
                let e = (a.get(r, c) - max[s * cols + c]).exp();
                od[r * cols + c] = e;
                denom[s * cols + c] += e;
            }
        }
        for (r, &s) in segments.iter().enumerate() {
            for c in 0..cols {
                od[r * cols + c] /= denom[s * cols + c];
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after `len`. Handles to dropped nodes must
    /// not be used again.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    /// Leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant by [`Tape::backward`].
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, trainable: bool) -> Var {
        self.nodes.push(Node { value, op, trainable });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{} produced a non-finite value", op.name())));
        }
        let trainable = op.inputs().iter().any(|v| self.nodes[v.0].trainable);
        Ok(self.push_raw(value, op, trainable))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Tape(format!("node {} is not on this tape", v.0)));
        }
        Ok(())
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, &[sa, sb]));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let k1 = if ta { sa[0] } else { sa[1] };
        let k2 = if tb { sb[1] } else { sb[0] };
        if k1 != k2 {
            return Err(shape_err("matmul", &[sa, sb]));
        }
        let out = gemm(self.value(a), ta, self.value(b), tb);
        self.push(out, Op::MatMul { a, b, ta, tb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("subtract", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("multiply", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// Concatenation along the feature (column) axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat: no inputs".into()));
        }
        for &p in parts {
            self.check(p)?;
        }
        let rows = self.shape(parts[0])[0];
        if parts.iter().any(|&p| self.shape(p)[0] != rows) {
            let shapes: Vec<_> = parts.iter().map(|&p| self.shape(p)).collect();
            return Err(shape_err("concat", &shapes));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.check(a)?;
        let s = self.shape(a);
        if start > end || end > s[1] {
            return Err(Error::Shape(format!("slice_cols: range {start}..{end} outside [{}, {}]", s[0], s[1])));
        }
        let v = self.value(a);
        let out = Tensor::from_fn(s[0], end - start, |i, j| v.get(i, start + j));
        self.push(out, Op::SliceCols { a, start, end })
    }

    /// Sum of all entries, as a `1 x 1` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Shape("mean: empty tensor".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Broadcasts a `1 x 1` tensor to `rows x cols`.
    pub fn expand(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        self.check(a)?;
        if self.shape(a) != [1, 1] {
            return Err(shape_err("expand", &[self.shape(a)]));
        }
        let out = Tensor::filled(rows, cols, self.value(a).item());
        self.push(out, Op::Expand(a))
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(|x| x * sigmoid(x));
        self.push(out, Op::Swish(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Scatter-add of rows: output row `s` is the sum of input rows `r` with
    /// `segments[r] == s`.
    pub fn segment_sum(&mut self, a: Var, segments: &Index, count: usize) -> Result<Var> {
        self.check(a)?;
        self.check_segments("segment_sum", a, segments, count)?;
        let out = segment_sum_values(self.value(a), segments, count);
        self.push(out, Op::SegmentSum { a, segments: segments.clone() })
    }

    /// Row gather: output row `k` is input row `index[k]`.
    pub fn gather(&mut self, a: Var, index: &Index) -> Result<Var> {
        self.check(a)?;
        let rows = self.shape(a)[0];
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!("gather: index {bad} out of range for {rows} rows")));
        }
        let out = self.value(a).select_rows(index);
        self.push(out, Op::Gather { a, index: index.clone() })
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    pub fn segment_softmax(&mut self, a: Var, segments: &Index, count: usize) -> Result<Var> {
        self.check(a)?;
        self.check_segments("segment_softmax", a, segments, count)?;
        let out = segment_softmax_values(self.value(a), segments, count);
        self.push(out, Op::SegmentSoftmax { a, segments: segments.clone(), count })
    }

    /// Softmax along axis 0 (over rows), per column.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let rows = self.shape(a)[0];
        let segments: Index = vec![0; rows].into();
        self.segment_softmax(a, &segments, 1)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(f64::sqrt);
        self.push(out, Op::Sqrt(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(|x| 1.0 / x);
        self.push(out, Op::Recip(a))
    }

    /// Inner product of two equally shaped tensors, as `1 x 1`.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    fn check_segments(&self, op: &str, a: Var, segments: &[usize], count: usize) -> Result<()> {
        let rows = self.shape(a)[0];
        if segments.len() != rows {
            return Err(Error::Shape(format!(
                "{op}: {} segment ids for {rows} rows",
                segments.len()
            )));
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= count) {
            return Err(Error::Shape(format!("{op}: segment id {bad} >= segment count {count}")));
        }
        Ok(())
    }

    /// Gradient of the scalar `root` with respect to every trainable leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check(root)?;
        if self.shape(root) != [1, 1] {
            return Err(Error::Tape(format!(
                "backward requires a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut cot: Vec<Option<Tensor>> = Vec::new();
        cot.resize_with(root.0 + 1, || None);
        cot[root.0] = Some(Tensor::scalar(1.0));
        let mut grads = Gradients::default();
        for n in (0..=root.0).rev() {
            let Some(g) = cot[n].take() else { continue };
            let node = &self.nodes[n];
            if !node.trainable {
                continue;
            }
            if let Op::Leaf = node.op {
                grads.by_leaf.insert(Var(n), g);
                continue;
            }
            for (input, contribution) in self.numeric_rule(n, &g) {
                if !self.nodes[input.0].trainable {
                    continue;
                }
                match &mut cot[input.0] {
                    Some(acc) => acc.axpy(1.0, &contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(grads)
    }

    /// Per-input cotangent contributions of node `n` given its cotangent `g`.
    fn numeric_rule(&self, n: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[n];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, ta, tb } => {
                let ga = if *ta { gemm(val(*b), *tb, g, true) } else { gemm(g, false, val(*b), !*tb) };
                let gb = if *tb { gemm(g, true, val(*a), *ta) } else { gemm(val(*a), !*ta, g, false) };
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => {
                vec![(*a, g.zip_map(val(*b), |x, y| x * y)), (*b, g.zip_map(val(*a), |x, y| x * y))]
            }
            Op::Scale(a, f) => vec![(*a, g.map(|x| x * f))],
            Op::Concat(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let w = val(p).cols();
                        let piece = Tensor::from_fn(g.rows(), w, |i, j| g.get(i, offset + j));
                        offset += w;
                        (p, piece)
                    })
                    .collect()
            }
            Op::SliceCols { a, start, end } => {
                let s = val(*a).shape();
                let out = Tensor::from_fn(s[0], s[1], |i, j| {
                    if j >= *start && j < *end {
                        g.get(i, j - start)
                    } else {
                        0.0
                    }
                });
                vec![(*a, out)]
            }
            Op::Sum(a) => {
                let s = val(*a).shape();
                vec![(*a, Tensor::filled(s[0], s[1], g.item()))]
            }
            Op::Expand(a) => vec![(*a, Tensor::scalar(g.sum()))],
            Op::Swish(a) => {
                let out = Tensor::from_fn(g.rows(), g.cols(), |i, j| {
                    let x = val(*a).get(i, j);
                    let s = sigmoid(x);
                    g.get(i, j) * (s + x * s * (1.0 - s))
                });
                vec![(*a, out)]
            }
            Op::Sigmoid(a) => vec![(*a, g.zip_map(y, |gv, s| gv * s * (1.0 - s)))],
            Op::SegmentSum { a, segments, .. } => vec![(*a, g.select_rows(segments))],
            Op::Gather { a, index } => vec![(*a, segment_sum_values(g, index, val(*a).rows()))],
            Op::SegmentSoftmax { a, segments, count } => {
                let gy = g.zip_map(y, |x, s| x * s);
                let totals = segment_sum_values(&gy, segments, *count).select_rows(segments);
                let out = Tensor::from_fn(g.rows(), g.cols(), |i, j| {
                    y.get(i, j) * (g.get(i, j) - totals.get(i, j))
                });
                vec![(*a, out)]
            }
            Op::Square(a) => vec![(*a, g.zip_map(val(*a), |gv, x| 2.0 * gv * x))],
            Op::Sqrt(a) => vec![(*a, g.zip_map(y, |gv, s| 0.5 * gv / s))],
            Op::Log(a) => vec![(*a, g.zip_map(val(*a), |gv, x| gv / x))],
            Op::Exp(a) => vec![(*a, g.zip_map(y, |gv, e| gv * e))],
            Op::Recip(a) => vec![(*a, g.zip_map(y, |gv, r| -gv * r * r))],
        }
    }

    /// Differentiable vector-Jacobian product `cotangentᵀ · ∂output/∂wrt`.
    ///
    /// The result is recorded on the tape, so it can appear inside a loss
    /// that is later passed to [`Tape::backward`]. `wrt` may be any node,
    /// including intermediates; only paths from `wrt` to `output` count.
    pub fn vjp(&mut self, output: Var, cotangent: Var, wrt: Var) -> Result<Var> {
        self.check(output)?;
        self.check(cotangent)?;
        self.check(wrt)?;
        if self.shape(output) != self.shape(cotangent) {
            return Err(shape_err("vjp cotangent", &[self.shape(output), self.shape(cotangent)]));
        }
        let zero_like = |tape: &mut Tape| {
            let s = tape.shape(wrt);
            tape.constant(Tensor::zeros(s[0], s[1]))
        };
        if wrt.0 > output.0 {
            return Ok(zero_like(self));
        }
        let lo = wrt.0;
        let hi = output.0;
        let mut relevant = vec![false; hi - lo + 1];
        relevant[0] = true;
        for n in lo + 1..=hi {
            relevant[n - lo] = self.nodes[n].op.inputs().iter().any(|v| v.0 >= lo && relevant[v.0 - lo]);
        }
        if !relevant[hi - lo] {
            return Ok(zero_like(self));
        }
        let mut cot: Vec<Option<Var>> = vec![None; hi - lo + 1];
        cot[hi - lo] = Some(cotangent);
        for n in (lo + 1..=hi).rev() {
            let Some(g) = cot[n - lo].take() else { continue };
            if !relevant[n - lo] {
                continue;
            }
            for (input, contribution) in self.recorded_rule(n, g, |v| v.0 >= lo && relevant[v.0 - lo])? {
                let slot = &mut cot[input.0 - lo];
                *slot = Some(match *slot {
                    Some(acc) => self.add(acc, contribution)?,
                    None => contribution,
                });
            }
        }
        match cot[0] {
            Some(g) => Ok(g),
            None => Ok(zero_like(self)),
        }
    }

    /// Backward rule for node `n` expressed with tape primitives. Only inputs
    /// accepted by `want` receive contributions.
    fn recorded_rule(
        &mut self,
        n: usize,
        g: Var,
        want: impl Fn(Var) -> bool,
    ) -> Result<Vec<(Var, Var)>> {
        let y = Var(n);
        let op = self.nodes[n].op.clone();
        let mut out = Vec::new();
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                if want(a) {
                    let ga = if ta { self.matmul_t(b, tb, g, true)? } else { self.matmul_t(g, false, b, !tb)? };
                    out.push((a, ga));
                }
                if want(b) {
                    let gb = if tb { self.matmul_t(g, true, a, ta)? } else { self.matmul_t(a, !ta, g, false)? };
                    out.push((b, gb));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if want(v) {
                        out.push((v, g));
                    }
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    out.push((a, g));
                }
                if want(b) {
                    out.push((b, self.neg(g)?));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    out.push((a, self.mul(g, b)?));
                }
                if want(b) {
                    out.push((b, self.mul(g, a)?));
                }
            }
            Op::Scale(a, f) => {
                if want(a) {
                    out.push((a, self.scale(g, f)?));
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(p)[1];
                    if want(p) {
                        out.push((p, self.slice_cols(g, offset, offset + w)?));
                    }
                    offset += w;
                }
            }
            Op::SliceCols { a, start, end } => {
                if want(a) {
                    let [rows, cols] = self.shape(a);
                    let mut pieces = Vec::new();
                    if start > 0 {
                        pieces.push(self.constant(Tensor::zeros(rows, start)));
                    }
                    pieces.push(g);
                    if end < cols {
                        pieces.push(self.constant(Tensor::zeros(rows, cols - end)));
                    }
                    out.push((a, self.concat(&pieces)?));
                }
            }
            Op::Sum(a) => {
                if want(a) {
                    let [rows, cols] = self.shape(a);
                    out.push((a, self.expand(g, rows, cols)?));
                }
            }
            Op::Expand(a) => {
                if want(a) {
                    out.push((a, self.sum(g)?));
                }
            }
            Op::Swish(a) => {
                if want(a) {
                    // d/dx x·σ(x) = σ + y - y·σ
                    let s = self.sigmoid(a)?;
                    let ys = self.mul(y, s)?;
                    let t = self.add(s, y)?;
                    let d = self.sub(t, ys)?;
                    out.push((a, self.mul(g, d)?));
                }
            }
            Op::Sigmoid(a) => {
                if want(a) {
                    let yy = self.mul(y, y)?;
                    let d = self.sub(y, yy)?;
                    out.push((a, self.mul(g, d)?));
                }
            }
            Op::SegmentSum { a, segments, .. } => {
                if want(a) {
                    out.push((a, self.gather(g, &segments)?));
                }
            }
            Op::Gather { a, index } => {
                if want(a) {
                    let rows = self.shape(a)[0];
                    out.push((a, self.segment_sum(g, &index, rows)?));
                }
            }
            Op::SegmentSoftmax { a, segments, count } => {
                if want(a) {
                    let gy = self.mul(g, y)?;
                    let totals = self.segment_sum(gy, &segments, count)?;
                    let spread = self.gather(totals, &segments)?;
                    let centered = self.sub(g, spread)?;
                    out.push((a, self.mul(y, centered)?));
                }
            }
            Op::Square(a) => {
                if want(a) {
                    let ga = self.mul(g, a)?;
                    out.push((a, self.scale(ga, 2.0)?));
                }
            }
            Op::Sqrt(a) => {
                if want(a) {
                    let r = self.recip(y)?;
                    let gr = self.mul(g, r)?;
                    out.push((a, self.scale(gr, 0.5)?));
                }
            }
            Op::Log(a) => {
                if want(a) {
                    let r = self.recip(a)?;
                    out.push((a, self.mul(g, r)?));
                }
            }
            Op::Exp(a) => {
                if want(a) {
                    out.push((a, self.mul(g, y)?));
                }
            }
            Op::Recip(a) => {
                if want(a) {
                    let yy = self.mul(y, y)?;
                    let gyy = self.mul(g, yy)?;
                    out.push((a, self.neg(gyy)?));
                }
            }
        }
        Ok(out)
    }
}
