//! Minimal reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! A [`Graph`] is an append-only tape: every operator evaluates eagerly and
//! records its parents, so node indices are already a topological order and
//! [`Graph::backward`] walks them in reverse exactly once. Batches are laid
//! out as stacked row blocks; the `block_*` operators act independently on
//! each block, which is how per-sample attention runs over a whole batch.

mod gradcheck;
mod tensor;

use std::sync::Arc;

use thiserror::Error;

pub use gradcheck::{grad_check, operator_suite, GradCheckReport, OperatorCheck};
pub use tensor::{Matrix, Real};

use tensor::{gemm_into, Layout};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("backward root must be 1x1, got {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("no gradient available for node {0}: run backward first or mark it as a parameter")]
    NoGradient(usize),
    #[error("attention mask row {0} allows no keys")]
    EmptyMaskRow(usize),
    #[error("{0}")]
    InvalidArgument(String),
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean key mask shared by every block of a batched score matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Arc<[bool]>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(AutodiffError::InvalidArgument(format!(
                "mask data has {} entries, expected {}",
                allowed.len(),
                rows * cols
            )));
        }
        if let Some(r) = (0..rows).find(|&r| !allowed[r * cols..(r + 1) * cols].iter().any(|&a| a)) {
            return Err(AutodiffError::EmptyMaskRow(r));
        }
        Ok(Self {
            rows,
            cols,
            allowed: allowed.into(),
        })
    }

    pub fn all_allowed(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            allowed: vec![true; rows * cols].into(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.allowed[(r % self.rows) * self.cols + c]
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddRowBias(Var, Var),
    Scale(Var, T),
    Affine(Var, T),
    MulScalar(Var, Var),
    ScaleRows(Var, Var),
    SoftmaxRows(Var),
    MaskedFill(Var, Mask),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    BceWithLogits(Var, Vec<T>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    TileRows(Var, usize),
    BlockMatMulNT(Var, Var, usize),
    BlockMatMul(Var, Var, usize),
    ParityProduct(Var, Arc<Vec<Vec<usize>>>),
}

/// Append-only computation tape.
#[derive(Clone, Debug, Default)]
pub struct Graph<T: Real> {
    values: Vec<Matrix<T>>,
    ops: Vec<Op<T>>,
    requires_grad: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn std_normal_cdf<T: Real>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn std_normal_pdf<T: Real>(x: T) -> T {
    T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt()) * (T::lit(-0.5) * x * x).exp()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            requires_grad: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(requires_grad);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    fn push_op(&mut self, value: Matrix<T>, op: Op<T>, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.requires_grad[p.0]);
        self.push(value, op, rg)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Result<Matrix<T>> {
        let (r, c) = self.shape(v);
        match &self.grads[v.0] {
            Some(g) => Ok(Matrix::from_vec(r, c, g.clone())),
            None if self.requires_grad[v.0] && self.grads.iter().any(Option::is_some) => {
                Ok(Matrix::zeros(r, c))
            }
            None => Err(AutodiffError::NoGradient(v.0)),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch { op, left: sa, right: sb });
        }
        Ok(sa)
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Matrix<T> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Matrix::from_vec(va.rows(), va.cols(), data)
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Matrix<T> {
        let va = &self.values[a.0];
        Matrix::from_vec(va.rows(), va.cols(), va.data().iter().map(|&x| f(x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push_op(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push_op(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push_op(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                left: (m, k),
                right: (k2, n),
            });
        }
        let v = self.values[a.0].matmul(&self.values[b.0]);
        Ok(self.push_op(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.values[a.0].transpose();
        self.push_op(v, Op::Transpose(a), &[a])
    }

    /// Adds a 1 x cols bias to every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let ((r, c), bs) = (self.shape(x), self.shape(bias));
        if bs != (1, c) {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row_bias",
                left: (r, c),
                right: bs,
            });
        }
        let b = self.values[bias.0].data().to_vec();
        let mut v = self.values[x.0].clone();
        for row in v.data_mut().chunks_mut(c) {
            row.iter_mut().zip(&b).for_each(|(o, &bb)| *o = *o + bb);
        }
        Ok(self.push_op(v, Op::AddRowBias(x, bias), &[x, bias]))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        let v = self.map(x, |a| a * s);
        self.push_op(v, Op::Scale(x, s), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// `a * x + b` with constants `a`, `b`.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let (a, b) = (T::lit(a), T::lit(b));
        let v = self.map(x, |t| a * t + b);
        self.push_op(v, Op::Affine(x, a), &[x])
    }

    /// Multiplies every entry of `x` by the 1x1 node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul_scalar",
                left: self.shape(x),
                right: self.shape(s),
            });
        }
        let sv = self.values[s.0].item();
        let v = self.map(x, |a| a * sv);
        Ok(self.push_op(v, Op::MulScalar(x, s), &[x, s]))
    }

    /// Scales row `i` of `x` by entry `i` of the column vector `s`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let ((r, c), ss) = (self.shape(x), self.shape(s));
        if ss != (r, 1) {
            return Err(AutodiffError::ShapeMismatch {
                op: "scale_rows",
                left: (r, c),
                right: ss,
            });
        }
        let sv = self.values[s.0].data().to_vec();
        let mut v = self.values[x.0].clone();
        for (row, &f) in v.data_mut().chunks_mut(c).zip(&sv) {
            row.iter_mut().for_each(|o| *o = *o * f);
        }
        Ok(self.push_op(v, Op::ScaleRows(x, s), &[x, s]))
    }

    /// Row-wise softmax; entries equal to -inf get exactly zero weight.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.shape(x);
        let mut v = self.values[x.0].clone();
        for (r, row) in v.data_mut().chunks_mut(c).enumerate() {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                return Err(AutodiffError::EmptyMaskRow(r));
            }
            let mut sum = T::zero();
            for o in row.iter_mut() {
                *o = (*o - max).exp();
                sum = sum + *o;
            }
            let inv = T::one() / sum;
            row.iter_mut().for_each(|o| *o = *o * inv);
        }
        Ok(self.push_op(v, Op::SoftmaxRows(x), &[x]))
    }

    /// Replaces disallowed logits by -inf; the mask repeats every
    /// `mask.rows()` rows of `x`.
    pub fn masked_fill(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let (r, c) = self.shape(x);
        if c != mask.cols || r % mask.rows != 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "masked_fill",
                left: (r, c),
                right: (mask.rows, mask.cols),
            });
        }
        let mut v = self.values[x.0].clone();
        for (ri, row) in v.data_mut().chunks_mut(c).enumerate() {
            for (ci, o) in row.iter_mut().enumerate() {
                if !mask.allowed(ri, ci) {
                    *o = T::neg_infinity();
                }
            }
        }
        Ok(self.push_op(v, Op::MaskedFill(x, mask.clone()), &[x]))
    }

    /// Exact GELU, x * Phi(x).
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| a * std_normal_cdf(a));
        self.push_op(v, Op::Gelu(x), &[x])
    }

    /// Per-row layer normalization with learnable 1 x cols scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        for p in [gamma, beta] {
            if self.shape(p) != (1, c) {
                return Err(AutodiffError::ShapeMismatch {
                    op: "layer_norm",
                    left: (r, c),
                    right: self.shape(p),
                });
            }
        }
        let eps = T::lit(eps);
        let inv_c = T::one() / T::lit(c as f64);
        let (g, b) = (self.values[gamma.0].data(), self.values[beta.0].data());
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for (i, row) in self.values[x.0].data().chunks(c).enumerate() {
            let mean = row.iter().cloned().sum::<T>() * inv_c;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[i * c + j] = xh;
                out[i * c + j] = xh * g[j] + b[j];
            }
        }
        let v = Matrix::from_vec(r, c, out);
        Ok(self.push_op(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, sigmoid);
        self.push_op(v, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| a.tanh());
        self.push_op(v, Op::Tanh(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| a.ln());
        self.push_op(v, Op::Log(x), &[x])
    }

    /// Clamp to `[lo, hi]`; clamped entries pass no gradient.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::lit(lo), T::lit(hi));
        let v = self.map(x, |a| a.max(lo).min(hi));
        self.push_op(v, Op::Clamp(x, lo, hi), &[x])
    }

    /// |x| as a new constant leaf: no gradient flows back into `x`.
    pub fn abs_detached(&mut self, x: Var) -> Var {
        let v = self.map(x, |a| a.abs());
        self.constant(v)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values[x.0].data().iter().cloned().sum::<T>();
        self.push_op(Matrix::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let len = self.values[x.0].len();
        let s = self.values[x.0].data().iter().cloned().sum::<T>() / T::lit(len as f64);
        self.push_op(Matrix::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean binary cross entropy of `sigmoid(logits)` against `targets`,
    /// where a target of 1 is the class the logit favours.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let lv = &self.values[logits.0];
        if targets.len() != lv.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "bce_with_logits",
                left: lv.shape(),
                right: (targets.len(), 1),
            });
        }
        let total: T = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let v = Matrix::scalar(total / T::lit(targets.len() as f64));
        Ok(self.push_op(v, Op::BceWithLogits(logits, targets.to_vec()), &[logits]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(*parts.first().ok_or_else(|| {
            AutodiffError::InvalidArgument("concat_cols needs at least one input".into())
        })?).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    left: (rows, cols),
                    right: (r, c),
                });
            }
            cols += c;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.values[p.0].row(r));
            }
        }
        Ok(self.push_op(Matrix::from_vec(rows, cols, out), Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(*parts.first().ok_or_else(|| {
            AutodiffError::InvalidArgument("concat_rows needs at least one input".into())
        })?).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    left: (rows, cols),
                    right: (r, c),
                });
            }
            rows += r;
            out.extend_from_slice(self.values[p.0].data());
        }
        Ok(self.push_op(Matrix::from_vec(rows, cols, out), Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > c || len == 0 {
            return Err(AutodiffError::InvalidArgument(format!(
                "slice_cols {start}..{} out of range for {c} columns",
                start + len
            )));
        }
        let src = &self.values[x.0];
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src.row(i)[start..start + len]);
        }
        Ok(self.push_op(Matrix::from_vec(r, len, out), Op::SliceCols(x, start), &[x]))
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.0 * s.1 != rows * cols {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                left: s,
                right: (rows, cols),
            });
        }
        let v = Matrix::from_vec(rows, cols, self.values[x.0].data().to_vec());
        Ok(self.push_op(v, Op::Reshape(x), &[x]))
    }

    /// Stacks `times` copies of `x` vertically.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Var {
        let (r, c) = self.shape(x);
        let src = self.values[x.0].data();
        let mut out = Vec::with_capacity(times * src.len());
        for _ in 0..times {
            out.extend_from_slice(src);
        }
        self.push_op(Matrix::from_vec(times * r, c, out), Op::TileRows(x, times), &[x])
    }

    fn block_dims(&self, op: &'static str, a: Var, b: Var, blocks: usize) -> Result<(usize, usize)> {
        let ((ra, ca), (rb, cb)) = (self.shape(a), self.shape(b));
        if blocks == 0 || ra % blocks != 0 || rb % blocks != 0 {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: (ra, ca),
                right: (rb, cb),
            });
        }
        Ok((ra / blocks, rb / blocks))
    }

    /// Per-block `A_b B_b^T`: (blocks*p x c) and (blocks*q x c) give (blocks*p x q).
    pub fn block_matmul_nt(&mut self, a: Var, b: Var, blocks: usize) -> Result<Var> {
        let (p, q) = self.block_dims("block_matmul_nt", a, b, blocks)?;
        let (c, cb) = (self.shape(a).1, self.shape(b).1);
        if c != cb {
            return Err(AutodiffError::ShapeMismatch {
                op: "block_matmul_nt",
                left: self.shape(a),
                right: self.shape(b),
            });
        }
        let mut out = vec![T::zero(); blocks * p * q];
        let (va, vb) = (self.values[a.0].data(), self.values[b.0].data());
        for blk in 0..blocks {
            gemm_into(
                p,
                c,
                q,
                &va[blk * p * c..],
                Layout::Normal,
                &vb[blk * q * c..],
                Layout::Transposed,
                &mut out[blk * p * q..],
                false,
            );
        }
        let v = Matrix::from_vec(blocks * p, q, out);
        Ok(self.push_op(v, Op::BlockMatMulNT(a, b, blocks), &[a, b]))
    }

    /// Per-block `A_b B_b`: (blocks*p x q) and (blocks*q x c) give (blocks*p x c).
    pub fn block_matmul(&mut self, a: Var, b: Var, blocks: usize) -> Result<Var> {
        let (p, q) = self.block_dims("block_matmul", a, b, blocks)?;
        if self.shape(a).1 != q {
            return Err(AutodiffError::ShapeMismatch {
                op: "block_matmul",
                left: self.shape(a),
                right: self.shape(b),
            });
        }
        let c = self.shape(b).1;
        let mut out = vec![T::zero(); blocks * p * c];
        let (va, vb) = (self.values[a.0].data(), self.values[b.0].data());
        for blk in 0..blocks {
            gemm_into(
                p,
                q,
                c,
                &va[blk * p * q..],
                Layout::Normal,
                &vb[blk * q * c..],
                Layout::Normal,
                &mut out[blk * p * c..],
                false,
            );
        }
        let v = Matrix::from_vec(blocks * p, c, out);
        Ok(self.push_op(v, Op::BlockMatMul(a, b, blocks), &[a, b]))
    }

    /// `out[b, j] = prod_{i in groups[j]} x[b, i]` for x of shape (batch x n).
    pub fn parity_product(&mut self, x: Var, groups: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        let (rows, n) = self.shape(x);
        if groups.iter().flatten().any(|&i| i >= n) {
            return Err(AutodiffError::InvalidArgument("parity_product index out of range".into()));
        }
        let m = groups.len();
        let src = self.values[x.0].data();
        let mut out = Vec::with_capacity(rows * m);
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            for g in groups.iter() {
                out.push(g.iter().fold(T::one(), |acc, &i| acc * row[i]));
            }
        }
        let v = Matrix::from_vec(rows, m, out);
        Ok(self.push_op(v, Op::ParityProduct(x, groups), &[x]))
    }

    fn accumulate(&mut self, v: Var, contribution: &[T]) {
        if !self.requires_grad[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(contribution).for_each(|(a, &b)| *a = *a + b),
            slot @ None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Reverse pass from a 1x1 root; clears gradients of any previous pass.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.shape(root);
        if shape != (1, 1) {
            return Err(AutodiffError::NonScalarRoot(shape));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.requires_grad[root.0] {
            // Constant root: every leaf gradient is zero.
            for i in 0..self.len() {
                if self.requires_grad[i] {
                    self.grads[i] = Some(vec![T::zero(); self.values[i].len()]);
                }
            }
            return Ok(());
        }
        self.grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.ops[idx], Op::Leaf);
            self.backprop_node(idx, &op, &g);
            self.ops[idx] = op;
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, op: &Op<T>, g: &[T]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g);
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                if self.requires_grad[a.0] {
                    let c: Vec<T> = g.iter().zip(self.values[b.0].data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(a, &c);
                }
                if self.requires_grad[b.0] {
                    let c: Vec<T> = g.iter().zip(self.values[a.0].data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(b, &c);
                }
            }
            Op::MatMul(a, b) => {
                let ((m, k), n) = (self.shape(a), self.shape(b).1);
                if self.requires_grad[a.0] {
                    let mut ga = vec![T::zero(); m * k];
                    gemm_into(m, n, k, g, Layout::Normal, self.values[b.0].data(), Layout::Transposed, &mut ga, false);
                    self.accumulate(a, &ga);
                }
                if self.requires_grad[b.0] {
                    let mut gb = vec![T::zero(); k * n];
                    gemm_into(k, m, n, self.values[a.0].data(), Layout::Transposed, g, Layout::Normal, &mut gb, false);
                    self.accumulate(b, &gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.shape(idx_var(idx));
                let gm = Matrix::from_vec(r, c, g.to_vec()).transpose();
                self.accumulate(a, gm.data());
            }
            Op::AddRowBias(x, bias) => {
                self.accumulate(x, g);
                let c = self.shape(x).1;
                let mut gb = vec![T::zero(); c];
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                }
                self.accumulate(bias, &gb);
            }
            Op::Scale(x, s) | Op::Affine(x, s) => {
                let c: Vec<T> = g.iter().map(|&v| v * s).collect();
                self.accumulate(x, &c);
            }
            Op::MulScalar(x, s) => {
                let sv = self.values[s.0].item();
                if self.requires_grad[x.0] {
                    let c: Vec<T> = g.iter().map(|&v| v * sv).collect();
                    self.accumulate(x, &c);
                }
                if self.requires_grad[s.0] {
                    let d: T = g.iter().zip(self.values[x.0].data()).map(|(&a, &b)| a * b).sum();
                    self.accumulate(s, &[d]);
                }
            }
            Op::ScaleRows(x, s) => {
                let c = self.shape(x).1;
                if self.requires_grad[x.0] {
                    let sv = self.values[s.0].data();
                    let mut gx = g.to_vec();
                    for (row, &f) in gx.chunks_mut(c).zip(sv) {
                        row.iter_mut().for_each(|o| *o = *o * f);
                    }
                    self.accumulate(x, &gx);
                }
                if self.requires_grad[s.0] {
                    let gs: Vec<T> = g
                        .chunks(c)
                        .zip(self.values[x.0].data().chunks(c))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(&a, &b)| a * b).sum())
                        .collect();
                    self.accumulate(s, &gs);
                }
            }
            Op::SoftmaxRows(x) => {
                let c = self.shape(x).1;
                let y = self.values[idx].data();
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), out) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(x, &gx);
            }
            Op::MaskedFill(x, ref mask) => {
                let c = self.shape(x).1;
                let mut gx = g.to_vec();
                for (ri, row) in gx.chunks_mut(c).enumerate() {
                    for (ci, o) in row.iter_mut().enumerate() {
                        if !mask.allowed(ri, ci) {
                            *o = T::zero();
                        }
                    }
                }
                self.accumulate(x, &gx);
            }
            Op::Gelu(x) => {
                let gx: Vec<T> = g
                    .iter()
                    .zip(self.values[x.0].data())
                    .map(|(&gv, &a)| gv * (std_normal_cdf(a) + a * std_normal_pdf(a)))
                    .collect();
                self.accumulate(x, &gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                ref xhat,
                ref rstd,
            } => {
                let c = self.shape(x).1;
                let inv_c = T::one() / T::lit(c as f64);
                if self.requires_grad[x.0] {
                    let gam = self.values[gamma.0].data();
                    let mut gx = vec![T::zero(); g.len()];
                    for (i, ((gr, xr), out)) in g.chunks(c).zip(xhat.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for j in 0..c {
                            let dxh = gr[j] * gam[j];
                            mean_dxh = mean_dxh + dxh;
                            mean_dxh_xh = mean_dxh_xh + dxh * xr[j];
                        }
                        mean_dxh = mean_dxh * inv_c;
                        mean_dxh_xh = mean_dxh_xh * inv_c;
                        for j in 0..c {
                            out[j] = rstd[i] * (gr[j] * gam[j] - mean_dxh - xr[j] * mean_dxh_xh);
                        }
                    }
                    self.accumulate(x, &gx);
                }
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        gg[j] = gg[j] + gr[j] * xr[j];
                        gb[j] = gb[j] + gr[j];
                    }
                }
                self.accumulate(gamma, &gg);
                self.accumulate(beta, &gb);
            }
            Op::Sigmoid(x) => {
                let gx: Vec<T> = g
                    .iter()
                    .zip(self.values[idx].data())
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect();
                self.accumulate(x, &gx);
            }
            Op::Tanh(x) => {
                let gx: Vec<T> = g
                    .iter()
                    .zip(self.values[idx].data())
                    .map(|(&gv, &y)| gv * (T::one() - y * y))
                    .collect();
                self.accumulate(x, &gx);
            }
            Op::Log(x) => {
                let gx: Vec<T> = g.iter().zip(self.values[x.0].data()).map(|(&gv, &a)| gv / a).collect();
                self.accumulate(x, &gx);
            }
            Op::Clamp(x, lo, hi) => {
                let gx: Vec<T> = g
                    .iter()
                    .zip(self.values[x.0].data())
                    .map(|(&gv, &a)| if a < lo || a > hi { T::zero() } else { gv })
                    .collect();
                self.accumulate(x, &gx);
            }
            Op::Sum(x) => {
                let gx = vec![g[0]; self.values[x.0].len()];
                self.accumulate(x, &gx);
            }
            Op::Mean(x) => {
                let len = self.values[x.0].len();
                let gx = vec![g[0] / T::lit(len as f64); len];
                self.accumulate(x, &gx);
            }
            Op::BceWithLogits(x, ref targets) => {
                let scale = g[0] / T::lit(targets.len() as f64);
                let gx: Vec<T> = self.values[x.0]
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&a, &t)| (sigmoid(a) - t) * scale)
                    .collect();
                self.accumulate(x, &gx);
            }
            Op::ConcatCols(ref parts) => {
                let total = self.shape(idx_var(idx)).1;
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.requires_grad[p.0] {
                        let mut gp = Vec::with_capacity(r * c);
                        for i in 0..r {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                        }
                        self.accumulate(p, &gp);
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.values[p.0].len();
                    self.accumulate(p, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::SliceCols(x, start) => {
                let (r, c) = self.shape(x);
                let len = self.shape(idx_var(idx)).1;
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.accumulate(x, &gx);
            }
            Op::Reshape(x) => self.accumulate(x, g),
            Op::TileRows(x, times) => {
                let len = self.values[x.0].len();
                let mut gx = vec![T::zero(); len];
                for chunk in g.chunks(len).take(times) {
                    gx.iter_mut().zip(chunk).for_each(|(a, &b)| *a = *a + b);
                }
                self.accumulate(x, &gx);
            }
            Op::BlockMatMulNT(a, b, blocks) => {
                // C_b = A_b B_b^T
                let (p, q) = (self.shape(a).0 / blocks, self.shape(b).0 / blocks);
                let c = self.shape(a).1;
                let (av, bv) = (self.values[a.0].data(), self.values[b.0].data());
                let ga = self.requires_grad[a.0].then(|| {
                    let mut ga = vec![T::zero(); blocks * p * c];
                    for blk in 0..blocks {
                        gemm_into(
                            p,
                            q,
                            c,
                            &g[blk * p * q..],
                            Layout::Normal,
                            &bv[blk * q * c..],
                            Layout::Normal,
                            &mut ga[blk * p * c..],
                            false,
                        );
                    }
                    ga
                });
                let gb = self.requires_grad[b.0].then(|| {
                    let mut gb = vec![T::zero(); blocks * q * c];
                    for blk in 0..blocks {
                        gemm_into(
                            q,
                            p,
                            c,
                            &g[blk * p * q..],
                            Layout::Transposed,
                            &av[blk * p * c..],
                            Layout::Normal,
                            &mut gb[blk * q * c..],
                            false,
                        );
                    }
                    gb
                });
                if let Some(ga) = ga {
                    self.accumulate(a, &ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(b, &gb);
                }
            }
            Op::BlockMatMul(a, b, blocks) => {
                // C_b = A_b B_b with A_b p x q, B_b q x c
                let (p, q) = (self.shape(a).0 / blocks, self.shape(b).0 / blocks);
                let c = self.shape(b).1;
                let (av, bv) = (self.values[a.0].data(), self.values[b.0].data());
                let ga = self.requires_grad[a.0].then(|| {
                    let mut ga = vec![T::zero(); blocks * p * q];
                    for blk in 0..blocks {
                        gemm_into(
                            p,
                            c,
                            q,
                            &g[blk * p * c..],
                            Layout::Normal,
                            &bv[blk * q * c..],
                            Layout::Transposed,
                            &mut ga[blk * p * q..],
                            false,
                        );
                    }
                    ga
                });
                let gb = self.requires_grad[b.0].then(|| {
                    let mut gb = vec![T::zero(); blocks * q * c];
                    for blk in 0..blocks {
                        gemm_into(
                            q,
                            p,
                            c,
                            &av[blk * p * q..],
                            Layout::Transposed,
                            &g[blk * p * c..],
                            Layout::Normal,
                            &mut gb[blk * q * c..],
                            false,
                        );
                    }
                    gb
                });
                if let Some(ga) = ga {
                    self.accumulate(a, &ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(b, &gb);
                }
            }
            Op::ParityProduct(x, ref groups) => {
                let (rows, n) = self.shape(x);
                let m = groups.len();
                let src = self.values[x.0].data();
                let mut gx = vec![T::zero(); rows * n];
                let mut prefix = Vec::new();
                for r in 0..rows {
                    let row = &src[r * n..(r + 1) * n];
                    for (j, grp) in groups.iter().enumerate() {
                        let gv = g[r * m + j];
                        // Leave-one-out products via prefix/suffix scans.
                        prefix.clear();
                        let mut acc = T::one();
                        for &i in grp {
                            prefix.push(acc);
                            acc = acc * row[i];
                        }
                        let mut suffix = T::one();
                        for (t, &i) in grp.iter().enumerate().rev() {
                            gx[r * n + i] = gx[r * n + i] + gv * prefix[t] * suffix;
                            suffix = suffix * row[i];
                        }
                    }
                }
                self.accumulate(x, &gx);
            }
        }
    }
}

#[inline]
fn idx_var(idx: usize) -> Var {
    Var(idx)
}
