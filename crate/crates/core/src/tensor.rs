//! Dense 2-D matrices and a tape-based reverse-mode autodiff graph.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Nodes
//! are appended in evaluation order, so walking the tape backwards from the
//! loss is a reverse topological traversal. A graph lives for one
//! forward/backward pass and is then dropped.
//!
//! Every forward op checks its output for NaN/Inf and fails with
//! [`Error::Numerical`] instead of propagating garbage.

use std::fmt;

use crate::error::{Error, Result};

/// Row-major `f64` matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(6) {
            write!(f, "{:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn column_vector(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim("matmul", self.shape(), other.shape()));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        matmul_into(self, other, &mut out);
        Ok(out)
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// out += a * b
fn matmul_into(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    let n = b.cols;
    for i in 0..a.rows {
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * n..(k + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// out += a * b^T
fn matmul_nt_into(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            let dot: f64 = a_row.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
            out.data[i * out.cols + j] += dot;
        }
    }
}

/// out += a^T * b
fn matmul_tn_into(a: &Matrix, b: &Matrix, out: &mut Matrix) {
    let n = b.cols;
    for k in 0..a.rows {
        let b_row = b.row(k);
        for i in 0..a.cols {
            let aki = a.data[k * a.cols + i];
            if aki == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aki * bv;
            }
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `1 x c` operand repeated over rows.
    Row,
    /// `r x 1` operand repeated over columns.
    Col,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    SoftmaxRows(Var),
    Scale(Var, f64),
    MeanRows(Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    LayerNorm(Var, Vec<f64>),
    CrossEntropy(Var, Vec<usize>, Matrix),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Relu(..) => "relu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::Scale(..) => "scale",
            Op::MeanRows(..) => "mean_rows",
            Op::Sum(..) => "sum",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Reshape(..) => "reshape",
            Op::LayerNorm(..) => "layer_norm_rows",
            Op::CrossEntropy(..) => "cross_entropy",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b, _) | Op::Mul(a, b, _) | Op::MatMul(a, b) => vec![*a, *b],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
            Op::Transpose(a)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::Scale(a, _)
            | Op::MeanRows(a)
            | Op::Sum(a)
            | Op::GatherRows(a, _)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Reshape(a)
            | Op::LayerNorm(a, _)
            | Op::CrossEntropy(a, _, _) => vec![*a],
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation for one forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "{} produced a non-finite value",
                op.name()
            )));
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input node. Gradients are accumulated for it only when `requires_grad`.
    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numerical("leaf holds a non-finite value".into()));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Matrix) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }

    /// Forget gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn broadcast_kind(
        op: &str,
        a: (usize, usize),
        b: (usize, usize),
        allow_col: bool,
    ) -> Result<Broadcast> {
        if a == b {
            Ok(Broadcast::Same)
        } else if b.0 == 1 && b.1 == a.1 {
            Ok(Broadcast::Row)
        } else if allow_col && b.1 == 1 && b.0 == a.0 {
            Ok(Broadcast::Col)
        } else {
            Err(Error::dim(op, a, b))
        }
    }

    /// `a + b`; `b` may be `1 x c` and is then added to every row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = Self::broadcast_kind("add", self.shape(a), self.shape(b), false)?;
        let out = self.elementwise(a, b, kind, |x, y| x + y);
        self.push(out, Op::Add(a, b, kind))
    }

    /// Elementwise product; `b` may be `1 x c` (per column) or `r x 1` (per row).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = Self::broadcast_kind("mul", self.shape(a), self.shape(b), true)?;
        let out = self.elementwise(a, b, kind, |x, y| x * y);
        self.push(out, Op::Mul(a, b, kind))
    }

    fn elementwise(&self, a: Var, b: Var, kind: Broadcast, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = av.clone();
        for r in 0..av.rows {
            for c in 0..av.cols {
                let y = match kind {
                    Broadcast::Same => bv.get(r, c),
                    Broadcast::Row => bv.data[c],
                    Broadcast::Col => bv.data[r],
                };
                let x = &mut out.data[r * av.cols + c];
                *x = f(*x, y);
            }
        }
        out
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Row-wise softmax, computed after subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data.iter_mut().for_each(|x| *x *= s);
        self.push(out, Op::Scale(a, s))
    }

    /// Column means as a `1 x c` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rows == 0 {
            return Err(Error::Dimension(
                "mean_rows of a matrix with no rows".into(),
            ));
        }
        let mut out = Matrix::zeros(1, av.cols);
        for r in 0..av.rows {
            for (o, x) in out.data.iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        let n = av.rows as f64;
        out.data.iter_mut().for_each(|x| *x /= n);
        self.push(out, Op::MeanRows(a))
    }

    /// Sum of all entries as `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat_cols of nothing".into()))?;
        let rows = self.shape(*first).0;
        let mut cols = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.0 != rows {
                return Err(Error::dim("concat_cols", self.shape(*first), s));
            }
            cols += s.1;
        }
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for p in parts {
                let v = self.value(*p);
                out.row_mut(r)[offset..offset + v.cols].copy_from_slice(v.row(r));
                offset += v.cols;
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat_rows of nothing".into()))?;
        let cols = self.shape(*first).1;
        let mut data = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s.1 != cols {
                return Err(Error::dim("concat_rows", self.shape(*first), s));
            }
            data.extend_from_slice(&self.value(*p).data);
        }
        let rows = data.len() / cols.max(1);
        let out = Matrix { rows, cols, data };
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    /// Rows `ids` of `table`, in order (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows) {
            return Err(Error::Usage(format!(
                "row index {bad} out of range for a table of {} rows",
                t.rows
            )));
        }
        let mut out = Matrix::zeros(ids.len(), t.cols);
        for (k, &i) in ids.iter().enumerate() {
            out.row_mut(k).copy_from_slice(t.row(i));
        }
        self.push(out, Op::GatherRows(table, ids.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.rows {
            return Err(Error::Dimension(format!(
                "slice_rows {start}..{} of a {}x{} matrix",
                start + len,
                av.rows,
                av.cols
            )));
        }
        let out = Matrix {
            rows: len,
            cols: av.cols,
            data: av.data[start * av.cols..(start + len) * av.cols].to_vec(),
        };
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.cols {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{} of a {}x{} matrix",
                start + len,
                av.rows,
                av.cols
            )));
        }
        let mut out = Matrix::zeros(av.rows, len);
        for r in 0..av.rows {
            out.row_mut(r)
                .copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    /// Same row-major data under a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let av = self.value(a);
        if rows * cols != av.len() {
            return Err(Error::dim("reshape", av.shape(), (rows, cols)));
        }
        let out = Matrix {
            rows,
            cols,
            data: av.data.clone(),
        };
        self.push(out, Op::Reshape(a))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`, no affine part.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let mut out = self.value(a).clone();
        let n = out.cols as f64;
        let mut inv_std = Vec::with_capacity(out.rows);
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm(a, inv_std))
    }

    /// Mean over rows of `-log softmax(logits)[label]`, as `1 x 1`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if z.rows != labels.len() || z.rows == 0 {
            return Err(Error::Usage(format!(
                "cross_entropy: {} logit rows but {} labels",
                z.rows,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= z.cols) {
            return Err(Error::Usage(format!(
                "cross_entropy: label {bad} out of range for {} classes",
                z.cols
            )));
        }
        let mut probs = z.clone();
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = z.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
            softmax_in_place(probs.row_mut(r));
        }
        let loss = Matrix::filled(1, 1, total / labels.len() as f64);
        self.push(loss, Op::CrossEntropy(logits, labels.to_vec(), probs))
    }

    /// Populate gradients of the scalar `loss` for every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::Usage(format!(
                "backward needs a 1x1 loss, got {r}x{c}"
            )));
        }
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this graph; call zero_grad first".into(),
            ));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        for (node, grad) in self.nodes[..=loss.0].iter().zip(&mut self.grads) {
            if node.requires_grad && grad.is_none() {
                *grad = Some(Matrix::zeros(node.value.rows, node.value.cols));
            }
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &Matrix) {
        let Graph { nodes, grads, .. } = self;
        let node = &nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut Matrix)| {
            let parent = &nodes[v.0];
            if !parent.requires_grad {
                return;
            }
            let slot = grads[v.0]
                .get_or_insert_with(|| Matrix::zeros(parent.value.rows, parent.value.cols));
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, kind) => {
                acc(*a, &mut |ga| ga.add_assign(g));
                acc(*b, &mut |gb| reduce_broadcast(g, *kind, gb));
            }
            Op::Mul(a, b, kind) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                acc(*a, &mut |ga| {
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            let y = match kind {
                                Broadcast::Same => bv.get(r, c),
                                Broadcast::Row => bv.data[c],
                                Broadcast::Col => bv.data[r],
                            };
                            ga.data[r * g.cols + c] += g.get(r, c) * y;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    let mut prod = g.clone();
                    for (p, x) in prod.data.iter_mut().zip(&av.data) {
                        *p *= x;
                    }
                    reduce_broadcast(&prod, *kind, gb);
                });
            }
            Op::MatMul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                acc(*a, &mut |ga| matmul_nt_into(g, bv, ga));
                acc(*b, &mut |gb| matmul_tn_into(av, g, gb));
            }
            Op::Transpose(a) => {
                acc(*a, &mut |ga| ga.add_assign(&g.transpose()));
            }
            Op::Relu(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for ((o, gv), yv) in ga.data.iter_mut().zip(&g.data).zip(&y.data) {
                        if *yv > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(*a, &mut |ga| {
                    for (o, gv) in ga.data.iter_mut().zip(&g.data) {
                        *o += s * gv;
                    }
                });
            }
            Op::MeanRows(a) => {
                acc(*a, &mut |ga| {
                    let n = ga.rows as f64;
                    for r in 0..ga.rows {
                        for (o, gv) in ga.row_mut(r).iter_mut().zip(&g.data) {
                            *o += gv / n;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = g.data[0];
                acc(*a, &mut |ga| ga.data.iter_mut().for_each(|o| *o += s));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols;
                    acc(*p, &mut |gp| {
                        for r in 0..g.rows {
                            for (o, gv) in
                                gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + w])
                            {
                                *o += gv;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    acc(*p, &mut |gp| {
                        for (o, gv) in gp.data.iter_mut().zip(&g.data[offset..offset + n]) {
                            *o += gv;
                        }
                    });
                    offset += n;
                }
            }
            Op::GatherRows(table, ids) => {
                acc(*table, &mut |gt| {
                    for (k, &id) in ids.iter().enumerate() {
                        for (o, gv) in gt.row_mut(id).iter_mut().zip(g.row(k)) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                acc(*a, &mut |ga| {
                    let c = ga.cols;
                    for (o, gv) in ga.data[start * c..].iter_mut().zip(&g.data) {
                        *o += gv;
                    }
                });
            }
            Op::SliceCols(a, start) => {
                acc(*a, &mut |ga| {
                    for r in 0..g.rows {
                        for (o, gv) in ga.row_mut(r)[*start..].iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                acc(*a, &mut |ga| {
                    for (o, gv) in ga.data.iter_mut().zip(&g.data) {
                        *o += gv;
                    }
                });
            }
            Op::LayerNorm(a, inv_std) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    let n = y.cols as f64;
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                        for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o += inv_std[r] * (gr[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                });
            }
            Op::CrossEntropy(logits, labels, probs) => {
                let scale = g.data[0] / labels.len() as f64;
                acc(*logits, &mut |gz| {
                    for (r, &label) in labels.iter().enumerate() {
                        for (c, o) in gz.row_mut(r).iter_mut().enumerate() {
                            let target = if c == label { 1.0 } else { 0.0 };
                            *o += scale * (probs.get(r, c) - target);
                        }
                    }
                });
            }
        }
    }
}

/// Accumulate `g` into `target`, summing over the broadcast axis.
fn reduce_broadcast(g: &Matrix, kind: Broadcast, target: &mut Matrix) {
    match kind {
        Broadcast::Same => target.add_assign(g),
        Broadcast::Row => {
            for r in 0..g.rows {
                for (o, gv) in target.data.iter_mut().zip(g.row(r)) {
                    *o += gv;
                }
            }
        }
        Broadcast::Col => {
            for r in 0..g.rows {
                target.data[r] += g.row(r).iter().sum::<f64>();
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random(rng: &mut SplitMix64, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    /// Central finite differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Matrix, f: &dyn Fn(&Matrix) -> f64) -> Matrix {
        let h = 1e-5;
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-3);
            assert!(rel <= tol, "analytic {x} vs numeric {y}");
        }
    }

    /// Checks d(sum(w * op(x)))/dx against finite differences, where `w`
    /// is a fixed random weight so the output is not trivially summed.
    fn check_unary(shape: (usize, usize), op: &dyn Fn(&mut Graph, Var) -> Result<Var>, seed: u64) {
        let mut rng = SplitMix64::new(seed);
        let x0 = random(&mut rng, shape.0, shape.1);
        let mut g = Graph::new();
        let probe = g.constant(x0.clone()).unwrap();
        let out_shape = {
            let y = op(&mut g, probe).unwrap();
            g.shape(y)
        };
        let w = random(&mut rng, out_shape.0, out_shape.1);
        let loss_of = |x: &Matrix| -> f64 {
            let mut g = Graph::new();
            let xv = g.constant(x.clone()).unwrap();
            let wv = g.constant(w.clone()).unwrap();
            let y = op(&mut g, xv).unwrap();
            let p = g.mul(y, wv).unwrap();
            let s = g.sum(p).unwrap();
            g.value(s).get(0, 0)
        };
        let mut g = Graph::new();
        let xv = g.param(x0.clone()).unwrap();
        let wv = g.constant(w.clone()).unwrap();
        let y = op(&mut g, xv).unwrap();
        let p = g.mul(y, wv).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_close(g.grad(xv).unwrap(), &numeric_grad(&x0, &loss_of), 1e-6);
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        for seed in 0..5 {
            check_unary((3, 4), &|g, x| g.relu(x), seed);
            check_unary((3, 4), &|g, x| g.softmax_rows(x), seed);
            check_unary((3, 4), &|g, x| g.scale(x, -2.5), seed);
            check_unary((3, 4), &|g, x| g.mean_rows(x), seed);
            check_unary((3, 4), &|g, x| g.transpose(x), seed);
            check_unary((3, 4), &|g, x| g.layer_norm_rows(x, 1e-5), seed);
            check_unary((3, 4), &|g, x| g.slice_rows(x, 1, 2), seed);
            check_unary((3, 4), &|g, x| g.slice_cols(x, 1, 2), seed);
            check_unary((3, 4), &|g, x| g.reshape(x, 2, 6), seed);
            check_unary((5, 3), &|g, x| g.gather_rows(x, &[4, 0, 4, 2]), seed);
            check_unary((3, 4), &|g, x| g.mul(x, x), seed);
            check_unary((3, 4), &|g, x| g.concat_cols(&[x, x]), seed);
            check_unary((3, 4), &|g, x| g.concat_rows(&[x, x]), seed);
            check_unary((4, 2), &|g, x| g.cross_entropy(x, &[0, 1, 1, 0]), seed);
        }
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        for seed in 10..15 {
            let mut rng = SplitMix64::new(seed);
            let b_full = random(&mut rng, 3, 4);
            let b_row = random(&mut rng, 1, 4);
            let b_col = random(&mut rng, 3, 1);
            let b_mat = random(&mut rng, 4, 2);
            check_unary(
                (3, 4),
                &|g, x| {
                    let b = g.constant(b_full.clone())?;
                    g.add(x, b)
                },
                seed,
            );
            check_unary(
                (3, 4),
                &|g, x| {
                    let b = g.constant(b_row.clone())?;
                    g.mul(x, b)
                },
                seed,
            );
            check_unary(
                (3, 4),
                &|g, x| {
                    let b = g.constant(b_col.clone())?;
                    g.mul(x, b)
                },
                seed,
            );
            check_unary(
                (3, 4),
                &|g, x| {
                    let b = g.constant(b_mat.clone())?;
                    g.matmul(x, b)
                },
                seed,
            );
            // gradient flowing into the broadcast / right-hand operand
            let a = random(&mut rng, 3, 4);
            check_unary(
                (1, 4),
                &|g, x| {
                    let av = g.constant(a.clone())?;
                    g.add(av, x)
                },
                seed,
            );
            check_unary(
                (1, 4),
                &|g, x| {
                    let av = g.constant(a.clone())?;
                    g.mul(av, x)
                },
                seed,
            );
            check_unary(
                (3, 1),
                &|g, x| {
                    let av = g.constant(a.clone())?;
                    g.mul(av, x)
                },
                seed,
            );
            check_unary(
                (4, 2),
                &|g, x| {
                    let av = g.constant(a.clone())?;
                    g.matmul(av, x)
                },
                seed,
            );
        }
    }

    #[test]
    fn softmax_examples_and_properties() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::row_vector(&[0.0, 0.0])).unwrap();
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let mut rng = SplitMix64::new(4);
        for _ in 0..100 {
            let m = random(&mut rng, 3, 5);
            let c = rng.uniform(-50.0, 50.0);
            let mut shifted = m.clone();
            shifted.data_mut().iter_mut().for_each(|v| *v += c);
            let mut g = Graph::new();
            let a = g.constant(m).unwrap();
            let b = g.constant(shifted).unwrap();
            let sa = g.softmax_rows(a).unwrap();
            let sb = g.softmax_rows(b).unwrap();
            for r in 0..3 {
                let row = g.value(sa).row(r);
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
                for (p, q) in row.iter().zip(g.value(sb).row(r)) {
                    assert!((p - q).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::row_vector(&[1000.0, 0.0])).unwrap();
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn matmul_identity_and_relu() {
        let mut rng = SplitMix64::new(1);
        let a = random(&mut rng, 3, 3);
        assert_eq!(a.matmul(&Matrix::identity(3)).unwrap(), a);

        let mut g = Graph::new();
        let x = g.constant(Matrix::row_vector(&[-1.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn mean_rows_of_single_row_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::row_vector(&[1.5, -2.0, 3.25])).unwrap();
        let y = g.mean_rows(x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Matrix::filled(1, 1, 3.0)).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_sum_gradient_is_row_sums_of_weight() {
        let mut rng = SplitMix64::new(2);
        let x0 = random(&mut rng, 2, 3);
        let w = random(&mut rng, 3, 4);
        let mut g = Graph::new();
        let x = g.param(x0.clone()).unwrap();
        let wv = g.constant(w.clone()).unwrap();
        let y = g.matmul(x, wv).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        for r in 0..2 {
            for k in 0..3 {
                let row_sum: f64 = w.row(k).iter().sum();
                assert!((grad.get(r, k) - row_sum).abs() < 1e-12);
            }
        }
        let numeric = numeric_grad(&x0, &|x| x.matmul(&w).unwrap().data().iter().sum());
        assert_close(grad, &numeric, 1e-8);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Matrix::filled(1, 2, 1.0)).unwrap();
        let c = g.constant(Matrix::filled(1, 2, 2.0)).unwrap();
        let unused = g.param(Matrix::filled(2, 2, 1.0)).unwrap();
        let y = g.mul(x, c).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(g.grad(unused).unwrap(), &Matrix::zeros(2, 2));
    }

    #[test]
    fn backward_contract_errors() {
        let mut g = Graph::new();
        let x = g.param(Matrix::filled(2, 2, 1.0)).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::Usage(_))));
        g.zero_grad();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::zeros(2, 3)).unwrap();
        let b = g.constant(Matrix::zeros(2, 3)).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("matmul"), "{err}");
        let c = g.constant(Matrix::zeros(3, 1)).unwrap();
        assert!(matches!(g.add(a, c), Err(Error::Dimension(_))));
        assert!(g.gather_rows(a, &[2]).is_err());
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::filled(1, 1, 1e300)).unwrap();
        let err = g.mul(a, a).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert!(g.constant(Matrix::filled(1, 1, f64::NAN)).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::new();
        let z = g.constant(Matrix::row_vector(&[0.0, 0.0])).unwrap();
        let l = g.cross_entropy(z, &[1]).unwrap();
        assert!((g.value(l).get(0, 0) - std::f64::consts::LN_2).abs() < 1e-15);
        let z = g.constant(Matrix::row_vector(&[1000.0, 0.0])).unwrap();
        let l = g.cross_entropy(z, &[0]).unwrap();
        assert!(g.value(l).get(0, 0).abs() < 1e-300);
        assert!(matches!(g.cross_entropy(z, &[2]), Err(Error::Usage(_))));
    }
}
