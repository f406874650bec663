use std::rc::Rc;

use super::tensor::{gemm, Tensor};
use super::DiffError;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Constant sparse matrix in CSR layout, used for fixed linear maps such as
/// row-normalized session adjacencies and prefix averaging.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Duplicate coordinates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            assert!(r < rows && c < cols, "triplet ({r},{c}) outside {rows}x{cols}");
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(self.rows.max(1), self.cols.max(1));
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                out.set(r, c, out.get(r, c) + v);
            }
        }
        out
    }

    fn mul_dense(&self, x: &Tensor) -> Tensor {
        let n = x.cols();
        let mut out = vec![0.0; self.rows * n];
        for r in 0..self.rows {
            let dst = &mut out[r * n..(r + 1) * n];
            for (c, v) in self.row_entries(r) {
                for (d, s) in dst.iter_mut().zip(x.row_slice(c)) {
                    *d += v * s;
                }
            }
        }
        Tensor::matrix(self.rows, n, out).expect("sparse product shape")
    }

    fn tmul_dense(&self, g: &Tensor) -> Tensor {
        let n = g.cols();
        let mut out = vec![0.0; self.cols * n];
        for r in 0..self.rows {
            let src = g.row_slice(r);
            for (c, v) in self.row_entries(r) {
                for (d, s) in out[c * n..(c + 1) * n].iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        Tensor::matrix(self.cols, n, out).expect("sparse transpose product shape")
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine { x: Var, scale: f64 },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Transpose(Var),
    Reduce { x: Var, axis: Option<usize>, scale: f64 },
    Broadcast(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Sqrt(Var),
    Square(Var),
    Exp(Var),
    Log { x: Var, floor: f64 },
    LogSigmoid(Var),
    Softmax { x: Var, axis: usize },
    L2Norm { x: Var, axis: usize },
    Normalize { x: Var, eps: f64 },
    Gather { x: Var, index: Rc<[usize]> },
    SegmentSum { x: Var, segments: Rc<[usize]> },
    SpMM { m: Rc<SparseMatrix>, x: Var },
    PairwiseDist(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Operation tape for reverse-mode differentiation.
///
/// Values are recorded in evaluation order; [`Graph::backward`] walks the
/// tape in reverse and accumulates adjoints into every upstream node.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    inner: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.inner.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.inner.get_mut(v.0).and_then(Option::take)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = (x.rows(), x.cols());
    let mut out = x.clone();
    for i in 0..r {
        let row = &mut out.data_mut()[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn softmax_rows_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let c = y.cols();
    let mut out = g.clone();
    for i in 0..y.rows() {
        let yr = y.row_slice(i);
        let dot: f64 = yr.iter().zip(g.row_slice(i)).map(|(a, b)| a * b).sum();
        for (j, o) in out.data_mut()[i * c..(i + 1) * c].iter_mut().enumerate() {
            *o = yr[j] * (*o - dot);
        }
    }
    out
}

fn row_norms(x: &Tensor) -> Vec<f64> {
    (0..x.rows())
        .map(|r| x.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn dims(&self, v: Var) -> Result<(usize, usize), DiffError> {
        self.nodes[v.0].value.dims()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), DiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(DiffError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// Record an input value. Leaves keep their adjoint after backward.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var, DiffError> {
        value.dims()?;
        self.push("leaf", value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ar, ac) = self.dims(a)?;
        let (br, bc) = self.dims(b)?;
        if ac != br {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: vec![ar, ac],
                right: vec![br, bc],
            });
        }
        let out = gemm(self.value(a), false, self.value(b), false);
        self.push("matmul", out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape("div", a, b)?;
        if self.value(b).data().iter().any(|&d| d == 0.0) {
            return Err(DiffError::DivisionByZero);
        }
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push("div", out, Op::Div(a, b))
    }

    /// `scale * x + shift`, element-wise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var, DiffError> {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push("affine", out, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var, DiffError> {
        self.affine(x, scale, 0.0)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, DiffError> {
        if parts.is_empty() || axis > 1 {
            return Err(DiffError::InvalidArgument("concat needs parts and axis 0 or 1"));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.dims(p))
            .collect::<Result<_, _>>()?;
        let (r0, c0) = dims[0];
        for &(r, c) in &dims[1..] {
            let ok = if axis == 0 { c == c0 } else { r == r0 };
            if !ok {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    left: vec![r0, c0],
                    right: vec![r, c],
                });
            }
        }
        let out = if axis == 0 {
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::matrix(rows, c0, data)?
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row_slice(r));
                }
            }
            Tensor::matrix(r0, cols, data)?
        };
        self.push(
            "concat",
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Contiguous `len`-wide window along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, DiffError> {
        let (r, c) = self.dims(x)?;
        let extent = match axis {
            0 => r,
            1 => c,
            _ => return Err(DiffError::InvalidArgument("slice axis must be 0 or 1")),
        };
        if len == 0 || start + len > extent {
            return Err(DiffError::OutOfRange {
                op: "slice",
                index: start + len,
                extent,
            });
        }
        let src = self.value(x);
        let out = if axis == 0 {
            Tensor::matrix(len, c, src.data()[start * c..(start + len) * c].to_vec())?
        } else {
            Tensor::from_fn(r, len, |i, j| src.get(i, start + j))
        };
        self.push("slice", out, Op::Slice { x, axis, start })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, DiffError> {
        self.dims(x)?;
        let out = self.value(x).transpose();
        self.push("transpose", out, Op::Transpose(x))
    }

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var, DiffError> {
        let (r, c) = self.dims(x)?;
        let src = self.value(x);
        let (out, count) = match axis {
            None => (Tensor::scalar(src.data().iter().sum()), r * c),
            Some(0) => (
                Tensor::from_fn(1, c, |_, j| (0..r).map(|i| src.get(i, j)).sum()),
                r,
            ),
            Some(1) => (
                Tensor::from_fn(r, 1, |i, _| src.row_slice(i).iter().sum()),
                c,
            ),
            Some(_) => return Err(DiffError::InvalidArgument("reduce axis must be 0 or 1")),
        };
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        let out = if mean { out.map(|v| v * scale) } else { out };
        self.push(if mean { "mean" } else { "sum" }, out, Op::Reduce { x, axis, scale })
    }

    /// Sum over `axis` (0: down columns, 1: across rows); `None` sums everything.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var, DiffError> {
        self.reduce(x, axis, false)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var, DiffError> {
        self.reduce(x, axis, true)
    }

    /// Explicit broadcast of a `1x1`, `1xc` or `rx1` value to `rows x cols`.
    pub fn broadcast(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var, DiffError> {
        let (r, c) = self.dims(x)?;
        let compatible = (r == rows || r == 1) && (c == cols || c == 1);
        if !compatible || rows == 0 || cols == 0 {
            return Err(DiffError::ShapeMismatch {
                op: "broadcast",
                left: vec![r, c],
                right: vec![rows, cols],
            });
        }
        let src = self.value(x);
        let out = Tensor::from_fn(rows, cols, |i, j| {
            src.get(if r == 1 { 0 } else { i }, if c == 1 { 0 } else { j })
        });
        self.push("broadcast", out, Op::Broadcast(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, DiffError> {
        let out = self.value(x).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, DiffError> {
        let out = self.value(x).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, DiffError> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(x))
    }

    /// Square root; the adjoint at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var, DiffError> {
        if self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(DiffError::InvalidArgument("sqrt of a negative value"));
        }
        let out = self.value(x).map(f64::sqrt);
        self.push("sqrt", out, Op::Sqrt(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var, DiffError> {
        let out = self.value(x).map(|v| v * v);
        self.push("square", out, Op::Square(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, DiffError> {
        let out = self.value(x).map(f64::exp);
        self.push("exp", out, Op::Exp(x))
    }

    /// `ln(max(x, floor))`.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Result<Var, DiffError> {
        if floor <= 0.0 {
            return Err(DiffError::InvalidArgument("log floor must be positive"));
        }
        let out = self.value(x).map(|v| v.max(floor).ln());
        self.push("log", out, Op::Log { x, floor })
    }

    /// Numerically stable `ln(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var, DiffError> {
        let out = self.value(x).map(log_sigmoid);
        self.push("log_sigmoid", out, Op::LogSigmoid(x))
    }

    /// Softmax along `axis` (1: each row sums to one, 0: each column).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, DiffError> {
        self.dims(x)?;
        let out = match axis {
            1 => softmax_rows(self.value(x)),
            0 => softmax_rows(&self.value(x).transpose()).transpose(),
            _ => return Err(DiffError::InvalidArgument("softmax axis must be 0 or 1")),
        };
        self.push("softmax", out, Op::Softmax { x, axis })
    }

    /// Euclidean norm along `axis` (1: per row, giving `r x 1`).
    pub fn l2_norm(&mut self, x: Var, axis: usize) -> Result<Var, DiffError> {
        let (r, c) = self.dims(x)?;
        let out = match axis {
            1 => Tensor::matrix(r, 1, row_norms(self.value(x)))?,
            0 => Tensor::matrix(1, c, row_norms(&self.value(x).transpose()))?,
            _ => return Err(DiffError::InvalidArgument("norm axis must be 0 or 1")),
        };
        self.push("l2_norm", out, Op::L2Norm { x, axis })
    }

    /// Scale every row to unit L2 norm; rows with norm `<= eps` pass through.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var, DiffError> {
        self.dims(x)?;
        let src = self.value(x);
        let norms = row_norms(src);
        let c = src.cols();
        let mut out = src.clone();
        for (r, &n) in norms.iter().enumerate() {
            if n > eps {
                for v in &mut out.data_mut()[r * c..(r + 1) * c] {
                    *v /= n;
                }
            }
        }
        self.push("normalize_rows", out, Op::Normalize { x, eps })
    }

    /// Rows of `x` selected by `index` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var, DiffError> {
        let (r, c) = self.dims(x)?;
        if index.is_empty() {
            return Err(DiffError::InvalidArgument("gather needs at least one index"));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(DiffError::OutOfRange {
                    op: "gather_rows",
                    index: i,
                    extent: r,
                });
            }
            data.extend_from_slice(src.row_slice(i));
        }
        let out = Tensor::matrix(index.len(), c, data)?;
        self.push(
            "gather_rows",
            out,
            Op::Gather {
                x,
                index: index.into(),
            },
        )
    }

    /// Sum rows sharing a segment id; output has `num_segments` rows.
    pub fn segment_sum(&mut self, x: Var, segments: &[usize], num_segments: usize) -> Result<Var, DiffError> {
        let (r, c) = self.dims(x)?;
        if segments.len() != r {
            return Err(DiffError::ShapeMismatch {
                op: "segment_sum",
                left: vec![r, c],
                right: vec![segments.len()],
            });
        }
        if num_segments == 0 {
            return Err(DiffError::InvalidArgument("segment_sum needs at least one segment"));
        }
        let src = self.value(x);
        let mut out = Tensor::zeros(num_segments, c);
        for (i, &s) in segments.iter().enumerate() {
            if s >= num_segments {
                return Err(DiffError::OutOfRange {
                    op: "segment_sum",
                    index: s,
                    extent: num_segments,
                });
            }
            let row = src.row_slice(i);
            for (d, v) in out.data_mut()[s * c..(s + 1) * c].iter_mut().zip(row) {
                *d += v;
            }
        }
        self.push(
            "segment_sum",
            out,
            Op::SegmentSum {
                x,
                segments: segments.into(),
            },
        )
    }

    /// Constant sparse matrix times a recorded dense value.
    pub fn sparse_matmul(&mut self, m: Rc<SparseMatrix>, x: Var) -> Result<Var, DiffError> {
        let (r, c) = self.dims(x)?;
        if m.cols() != r || m.rows() == 0 {
            return Err(DiffError::ShapeMismatch {
                op: "sparse_matmul",
                left: vec![m.rows(), m.cols()],
                right: vec![r, c],
            });
        }
        let out = m.mul_dense(self.value(x));
        self.push("sparse_matmul", out, Op::SpMM { m, x })
    }

    /// Pairwise Euclidean distances between the rows of `x`.
    pub fn pairwise_distances(&mut self, x: Var) -> Result<Var, DiffError> {
        let (r, _) = self.dims(x)?;
        let src = self.value(x);
        let mut out = Tensor::zeros(r, r);
        for i in 0..r {
            for j in (i + 1)..r {
                let d = src
                    .row_slice(i)
                    .iter()
                    .zip(src.row_slice(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                out.set(i, j, d);
                out.set(j, i, d);
            }
        }
        self.push("pairwise_distances", out, Op::PairwiseDist(x))
    }

    /// Reverse pass from a `1x1` value.
    pub fn backward(&self, loss: Var) -> Result<Grads, DiffError> {
        let shape = self.value(loss).shape();
        if shape != [1, 1] {
            return Err(DiffError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Grads { inner: grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, gemm(g, false, val(*b), true));
                acc(*b, gemm(val(*a), true, g, false));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y));
                acc(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Div(a, b) => {
                let db = val(*b);
                acc(*a, g.zip_map(db, |x, d| x / d));
                let ratio = y.zip_map(db, |q, d| q / d);
                acc(*b, g.zip_map(&ratio, |x, r| -x * r));
            }
            Op::Affine { x, scale } => acc(*x, g.map(|v| v * scale)),
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = (val(p).rows(), val(p).cols());
                    let piece = if *axis == 0 {
                        let c = g.cols();
                        Tensor::matrix(pr, pc, g.data()[offset * c..(offset + pr) * c].to_vec())
                            .expect("concat adjoint")
                    } else {
                        Tensor::from_fn(pr, pc, |r, c| g.get(r, offset + c))
                    };
                    offset += if *axis == 0 { pr } else { pc };
                    acc(p, piece);
                }
            }
            Op::Slice { x, axis, start } => {
                let (r, c) = (val(*x).rows(), val(*x).cols());
                let mut full = Tensor::zeros(r, c);
                for gi in 0..g.rows() {
                    for gj in 0..g.cols() {
                        let (ti, tj) = if *axis == 0 { (gi + start, gj) } else { (gi, gj + start) };
                        full.set(ti, tj, g.get(gi, gj));
                    }
                }
                acc(*x, full);
            }
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::Reduce { x, axis, scale } => {
                let (r, c) = (val(*x).rows(), val(*x).cols());
                let t = Tensor::from_fn(r, c, |i, j| {
                    scale
                        * match axis {
                            None => g.item(),
                            Some(0) => g.get(0, j),
                            _ => g.get(i, 0),
                        }
                });
                acc(*x, t);
            }
            Op::Broadcast(x) => {
                let (r, c) = (val(*x).rows(), val(*x).cols());
                let mut t = Tensor::zeros(r, c);
                for gi in 0..g.rows() {
                    for gj in 0..g.cols() {
                        let (ti, tj) = (if r == 1 { 0 } else { gi }, if c == 1 { 0 } else { gj });
                        t.set(ti, tj, t.get(ti, tj) + g.get(gi, gj));
                    }
                }
                acc(*x, t);
            }
            Op::Sigmoid(x) => acc(*x, g.zip_map(y, |d, s| d * s * (1.0 - s))),
            Op::Tanh(x) => acc(*x, g.zip_map(y, |d, t| d * (1.0 - t * t))),
            Op::Relu(x) => acc(*x, g.zip_map(val(*x), |d, v| if v > 0.0 { d } else { 0.0 })),
            Op::Sqrt(x) => acc(*x, g.zip_map(y, |d, s| if s > 0.0 { d / (2.0 * s) } else { 0.0 })),
            Op::Square(x) => acc(*x, g.zip_map(val(*x), |d, v| 2.0 * v * d)),
            Op::Exp(x) => acc(*x, g.zip_map(y, |d, e| d * e)),
            Op::Log { x, floor } => {
                acc(*x, g.zip_map(val(*x), |d, v| if v > *floor { d / v } else { 0.0 }))
            }
            Op::LogSigmoid(x) => acc(*x, g.zip_map(val(*x), |d, v| d * sigmoid(-v))),
            Op::Softmax { x, axis } => {
                let t = if *axis == 1 {
                    softmax_rows_backward(y, g)
                } else {
                    softmax_rows_backward(&y.transpose(), &g.transpose()).transpose()
                };
                acc(*x, t);
            }
            Op::L2Norm { x, axis } => {
                let src = val(*x);
                let t = Tensor::from_fn(src.rows(), src.cols(), |i, j| {
                    let (n, d) = if *axis == 1 {
                        (y.get(i, 0), g.get(i, 0))
                    } else {
                        (y.get(0, j), g.get(0, j))
                    };
                    if n > 0.0 {
                        d * src.get(i, j) / n
                    } else {
                        0.0
                    }
                });
                acc(*x, t);
            }
            Op::Normalize { x, eps } => {
                let src = val(*x);
                let norms = row_norms(src);
                let c = src.cols();
                let mut t = g.clone();
                for (r, &n) in norms.iter().enumerate() {
                    if n > *eps {
                        let yr = y.row_slice(r);
                        let dot: f64 = yr.iter().zip(g.row_slice(r)).map(|(a, b)| a * b).sum();
                        for (j, o) in t.data_mut()[r * c..(r + 1) * c].iter_mut().enumerate() {
                            *o = (*o - yr[j] * dot) / n;
                        }
                    }
                }
                acc(*x, t);
            }
            Op::Gather { x, index } => {
                let src = val(*x);
                let c = src.cols();
                let mut t = Tensor::zeros(src.rows(), c);
                for (gi, &i) in index.iter().enumerate() {
                    for (d, s) in t.data_mut()[i * c..(i + 1) * c].iter_mut().zip(g.row_slice(gi)) {
                        *d += s;
                    }
                }
                acc(*x, t);
            }
            Op::SegmentSum { x, segments } => {
                let c = g.cols();
                let mut data = Vec::with_capacity(segments.len() * c);
                for &s in segments.iter() {
                    data.extend_from_slice(g.row_slice(s));
                }
                acc(*x, Tensor::matrix(segments.len(), c, data).expect("segment adjoint"));
            }
            Op::SpMM { m, x } => acc(*x, m.tmul_dense(g)),
            Op::PairwiseDist(x) => {
                let src = val(*x);
                let (r, c) = (src.rows(), src.cols());
                let mut t = Tensor::zeros(r, c);
                for a in 0..r {
                    for b in 0..r {
                        let d = y.get(a, b);
                        if a == b || d <= 0.0 {
                            continue;
                        }
                        let w = (g.get(a, b) + g.get(b, a)) / d;
                        for k in 0..c {
                            let delta = src.get(a, k) - src.get(b, k);
                            t.set(a, k, t.get(a, k) + w * delta);
                        }
                    }
                }
                acc(*x, t);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(1, 2)).unwrap();
        let y = g.softmax(x, 1).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0)).unwrap();
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).item(), 0.5);
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(&[1.0, 2.0, 3.0])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq, None).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn no_silent_broadcasting() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(2, 3)).unwrap();
        let b = g.leaf(Tensor::zeros(1, 3)).unwrap();
        assert!(matches!(g.add(a, b), Err(DiffError::ShapeMismatch { .. })));
        assert!(g.matmul(a, a).is_err());
        let wide = g.broadcast(b, 2, 3).unwrap();
        assert!(g.add(a, wide).is_ok());
        assert!(g.broadcast(a, 4, 3).is_err());
    }

    #[test]
    fn division_by_zero_is_an_error() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::row(&[1.0, 2.0])).unwrap();
        let b = g.leaf(Tensor::row(&[1.0, 0.0])).unwrap();
        assert!(matches!(g.div(a, b), Err(DiffError::DivisionByZero)));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::scalar(1000.0)).unwrap();
        assert!(matches!(g.exp(a), Err(DiffError::NonFinite { op: "exp" })));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(1, 2)).unwrap();
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn sparse_matches_dense() {
        let m = SparseMatrix::from_triplets(2, 3, &[(0, 1, 2.0), (1, 0, -1.0), (1, 2, 0.5), (0, 1, 1.0)]);
        assert_eq!(m.nnz(), 3);
        let dense = m.to_dense();
        assert_eq!(dense.get(0, 1), 3.0);
        let x = Tensor::from_fn(3, 2, |r, c| (r + 2 * c) as f64);
        let mut g = Graph::new();
        let xv = g.leaf(x.clone()).unwrap();
        let y = g.sparse_matmul(Rc::new(m), xv).unwrap();
        assert!(g.value(y).max_abs_diff(&gemm(&dense, false, &x, false)) < 1e-15);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::from_fn(4, 3, |r, c| ((r * 7 + c * 3) % 5) as f64 * 0.37 - 0.4)).unwrap();
            let w = g.leaf(Tensor::from_fn(3, 3, |r, c| (r as f64 - c as f64) * 0.21)).unwrap();
            let h = g.matmul(x, w).unwrap();
            let s = g.softmax(h, 1).unwrap();
            let t = g.tanh(s).unwrap();
            let d = g.pairwise_distances(t).unwrap();
            let o = g.sum(d, None).unwrap();
            g.value(o).item().to_bits()
        };
        assert_eq!(run(), run());
    }
}
