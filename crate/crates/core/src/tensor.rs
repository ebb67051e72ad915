//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records operations eagerly: every op computes its value
//! immediately, checks shapes and finiteness, and appends a node. Calling
//! [`Tape::backward`] on a 1×1 node walks the tape in reverse.
//!
//! Besides the elementwise and linear-algebra primitives there are a few
//! segment-aware ops (per-graph attention, per-graph row means, sparse
//! aggregation) so that a batch of graphs can be stacked row-wise into one
//! matrix without cross-graph leakage.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Constant sparse matrix in CSR layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Sparse {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Sparse {
    /// Duplicate coordinates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last = None;
        for (r, c, v) in triplets {
            assert!(r < rows && c < cols, "sparse entry out of range");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            last = Some((r, c));
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Sparse {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn matmul(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, x.ncols()));
        for r in 0..self.rows {
            let mut row = out.row_mut(r);
            for k in self.indptr[r]..self.indptr[r + 1] {
                row.scaled_add(self.values[k], &x.row(self.indices[k]));
            }
        }
        out
    }

    /// `Sᵀ x`.
    pub fn transpose_matmul(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.cols, x.ncols()));
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                out.row_mut(self.indices[k]).scaled_add(self.values[k], &x.row(r));
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                out[[r, self.indices[k]]] += self.values[k];
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    SpMM(Arc<Sparse>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SumCols(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    SoftmaxRows(Var),
    LayerNormRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    SqDist(Var, Var),
    NormalizeRows(Var),
    MaskedLogSoftmax(Var, Arc<Array2<bool>>),
    SegmentMean(Var, Arc<Vec<usize>>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        offsets: Arc<Vec<usize>>,
        heads: usize,
    },
    SegmentMmd {
        h: Var,
        v: Var,
        gamma: Var,
        offsets: Arc<Vec<usize>>,
        m: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::SpMM(..) => "spmm",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::SumCols(..) => "sum_cols",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Sqrt(..) => "sqrt",
            Op::ClampMin(..) => "clamp_min",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNormRows(..) => "layer_norm_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::Transpose(..) => "transpose",
            Op::SqDist(..) => "sq_dist",
            Op::NormalizeRows(..) => "normalize_rows",
            Op::MaskedLogSoftmax(..) => "masked_log_softmax",
            Op::SegmentMean(..) => "segment_mean",
            Op::Attention { .. } => "attention",
            Op::SegmentMmd { .. } => "segment_mmd",
        }
    }
}

struct Node {
    value: Arc<Array2<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Gradients indexed by tape node.
pub struct Gradients(Vec<Option<Array2<f64>>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of `shape` if `v` did not influence the root.
    pub fn take_or_zeros(&mut self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.0[v.0].take().unwrap_or_else(|| Array2::zeros(shape))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Running hash of the activation pattern at every relu/clamp kink.
    kinks: DefaultHasher,
}

fn shape_str(a: &Array2<f64>) -> String {
    format!("{}×{}", a.nrows(), a.ncols())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Fingerprint of which side of every kink each relu/clamp input fell on.
    pub fn kink_pattern(&self) -> u64 {
        self.kinks.finish()
    }

    fn label(&self, op: &Op) -> String {
        format!("node #{} ({})", self.nodes.len(), op.name())
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Result<Var> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                node: self.label(&op),
            });
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::ScaleBy(a, b)
            | Op::SqDist(a, b) => vec![*a, *b],
            Op::SpMM(_, a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::SumCols(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Sqrt(a)
            | Op::ClampMin(a, _)
            | Op::SoftmaxRows(a)
            | Op::LayerNormRows(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::Transpose(a)
            | Op::NormalizeRows(a)
            | Op::MaskedLogSoftmax(a, _)
            | Op::SegmentMean(a, _) => vec![*a],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::SegmentMmd { h, v, gamma, .. } => vec![*h, *v, *gamma],
        }
    }

    /// Trainable leaf sharing storage with the caller.
    pub fn param(&mut self, value: Arc<Array2<f64>>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &Op, a: Var, b: Var) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.dim() != y.dim() {
            return Err(Error::shape(
                self.label(op),
                format!("{} vs {}", shape_str(x), shape_str(y)),
            ));
        }
        Ok(())
    }

    fn row_operand(&self, op: &Op, a: Var, r: Var) -> Result<()> {
        let (x, y) = (self.value(a), self.value(r));
        if y.nrows() != 1 || y.ncols() != x.ncols() {
            return Err(Error::shape(
                self.label(op),
                format!("row operand {} for {}", shape_str(y), shape_str(x)),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::MatMul(a, b);
        let (x, y) = (self.value(a), self.value(b));
        if x.ncols() != y.nrows() {
            return Err(Error::shape(
                self.label(&op),
                format!("{} · {}", shape_str(x), shape_str(y)),
            ));
        }
        let out = x.dot(y);
        self.push(out, op)
    }

    /// `S x` for a constant sparse `S`.
    pub fn spmm(&mut self, s: Arc<Sparse>, x: Var) -> Result<Var> {
        let v = self.value(x);
        if s.cols != v.nrows() {
            return Err(Error::shape(
                self.label(&Op::SpMM(s.clone(), x)),
                format!("sparse {}×{} · {}", s.rows, s.cols, shape_str(v)),
            ));
        }
        let out = s.matmul(v.view());
        self.push(out, Op::SpMM(s, x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::Add(a, b);
        self.same_shape(&op, a, b)?;
        let out = self.value(a) + self.value(b);
        self.push(out, op)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::Sub(a, b);
        self.same_shape(&op, a, b)?;
        let out = self.value(a) - self.value(b);
        self.push(out, op)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::Mul(a, b);
        self.same_shape(&op, a, b)?;
        let out = self.value(a) * self.value(b);
        self.push(out, op)
    }

    /// Adds a 1×c row to every row of an n×c matrix.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let op = Op::AddRow(a, r);
        self.row_operand(&op, a, r)?;
        let out = self.value(a) + self.value(r);
        self.push(out, op)
    }

    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let op = Op::MulRow(a, r);
        self.row_operand(&op, a, r)?;
        let out = self.value(a) * self.value(r);
        self.push(out, op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    /// Multiplies by a 1×1 variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let op = Op::ScaleBy(a, s);
        if self.value(s).dim() != (1, 1) {
            return Err(Error::shape(self.label(&op), "scale factor must be 1×1"));
        }
        let out = self.value(a) * self.scalar(s);
        self.push(out, op)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::shape(self.label(&Op::Mean(a)), "mean of an empty matrix"));
        }
        let out = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        self.push(out, Op::Mean(a))
    }

    /// Column means as a 1×c row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.nrows() == 0 {
            return Err(Error::shape(self.label(&Op::MeanRows(a)), "no rows"));
        }
        let out = v.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        self.push(out, Op::MeanRows(a))
    }

    /// Row sums as an n×1 column.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumCols(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mapv(f64::ln);
        self.push(out, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mapv(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    fn record_kinks(&mut self, a: Var, at: f64) {
        let v = &self.nodes[a.0].value;
        let mut h = DefaultHasher::new();
        for x in v.iter() {
            (*x > at).hash(&mut h);
        }
        h.finish().hash(&mut self.kinks);
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record_kinks(a, 0.0);
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Square root; the gradient at exactly 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mapv(f64::sqrt);
        self.push(out, Op::Sqrt(a))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Result<Var> {
        self.record_kinks(a, lo);
        let out = self.value(a).mapv(|x| x.max(lo));
        self.push(out, Op::ClampMin(a, lo))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row /= z;
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Per-row standardization with variance floor [`LAYER_NORM_EPS`]; no
    /// affine part.
    pub fn layer_norm_rows(&mut self, a: Var) -> Result<Var> {
        let (out, _) = layer_norm(self.value(a).view());
        self.push(out, Op::LayerNormRows(a))
    }

    pub fn concat_cols(&mut self, vs: &[Var]) -> Result<Var> {
        let op = Op::ConcatCols(vs.to_vec());
        let first = vs
            .first()
            .ok_or_else(|| Error::shape(self.label(&op), "nothing to concatenate"))?;
        let n = self.value(*first).nrows();
        if vs.iter().any(|v| self.value(*v).nrows() != n) {
            return Err(Error::shape(self.label(&op), "row counts differ"));
        }
        let views: Vec<_> = vs.iter().map(|v| self.value(*v).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).unwrap();
        self.push(out, op)
    }

    pub fn concat_rows(&mut self, vs: &[Var]) -> Result<Var> {
        let op = Op::ConcatRows(vs.to_vec());
        let first = vs
            .first()
            .ok_or_else(|| Error::shape(self.label(&op), "nothing to concatenate"))?;
        let c = self.value(*first).ncols();
        if vs.iter().any(|v| self.value(*v).ncols() != c) {
            return Err(Error::shape(self.label(&op), "column counts differ"));
        }
        let views: Vec<_> = vs.iter().map(|v| self.value(*v).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).unwrap();
        self.push(out, op)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let op = Op::SliceCols(a, start);
        let v = self.value(a);
        if start > end || end > v.ncols() {
            return Err(Error::shape(
                self.label(&op),
                format!("columns {start}..{end} of {}", shape_str(v)),
            ));
        }
        let out = v.slice(s![.., start..end]).to_owned();
        self.push(out, op)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let op = Op::SliceRows(a, start);
        let v = self.value(a);
        if start > end || end > v.nrows() {
            return Err(Error::shape(
                self.label(&op),
                format!("rows {start}..{end} of {}", shape_str(v)),
            ));
        }
        let out = v.slice(s![start..end, ..]).to_owned();
        self.push(out, op)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a))
    }

    /// `D_ij = ‖a_i − b_j‖²`, clamped at 0 against cancellation.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::SqDist(a, b);
        let (x, y) = (self.value(a), self.value(b));
        if x.ncols() != y.ncols() {
            return Err(Error::shape(
                self.label(&op),
                format!("{} vs {}", shape_str(x), shape_str(y)),
            ));
        }
        let out = sq_dist(x.view(), y.view());
        self.push(out, op)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt().max(NORM_FLOOR);
            row /= n;
        }
        self.push(out, Op::NormalizeRows(a))
    }

    /// Row-wise log-softmax over the entries where `mask` is true. Masked-out
    /// entries are set to 0 and receive no gradient.
    pub fn masked_log_softmax(&mut self, a: Var, mask: Arc<Array2<bool>>) -> Result<Var> {
        let op = Op::MaskedLogSoftmax(a, mask.clone());
        let v = self.value(a);
        if v.dim() != mask.dim() {
            return Err(Error::shape(self.label(&op), "mask shape differs"));
        }
        let mut out = Array2::zeros(v.dim());
        for i in 0..v.nrows() {
            let m = (0..v.ncols())
                .filter(|&j| mask[[i, j]])
                .map(|j| v[[i, j]])
                .fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                continue;
            }
            let lse = m + (0..v.ncols())
                .filter(|&j| mask[[i, j]])
                .map(|j| (v[[i, j]] - m).exp())
                .sum::<f64>()
                .ln();
            for j in 0..v.ncols() {
                if mask[[i, j]] {
                    out[[i, j]] = v[[i, j]] - lse;
                }
            }
        }
        self.push(out, op)
    }

    /// Mean of each row segment `offsets[g]..offsets[g+1]`, one output row per
    /// segment.
    pub fn segment_mean(&mut self, a: Var, offsets: Arc<Vec<usize>>) -> Result<Var> {
        let op = Op::SegmentMean(a, offsets.clone());
        let v = self.value(a);
        check_offsets(&offsets, v.nrows()).map_err(|d| Error::shape(self.label(&op), d))?;
        let mut out = Array2::zeros((offsets.len() - 1, v.ncols()));
        for (g, w) in offsets.windows(2).enumerate() {
            out.row_mut(g)
                .assign(&v.slice(s![w[0]..w[1], ..]).mean_axis(Axis(0)).unwrap());
        }
        self.push(out, op)
    }

    /// Multi-head scaled dot-product attention restricted to row segments.
    /// `q`, `k`, `v` are n×d with heads taking consecutive column blocks of
    /// width d/heads.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        offsets: Arc<Vec<usize>>,
        heads: usize,
    ) -> Result<Var> {
        let op = Op::Attention {
            q,
            k,
            v,
            offsets: offsets.clone(),
            heads,
        };
        let dims = [q, k, v].map(|x| self.value(x).dim());
        if dims[0] != dims[1] || dims[0] != dims[2] {
            return Err(Error::shape(self.label(&op), "q, k, v shapes differ"));
        }
        let (n, d) = dims[0];
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                self.label(&op),
                format!("width {d} not divisible into {heads} heads"),
            ));
        }
        check_offsets(&offsets, n).map_err(|e| Error::shape(self.label(&op), e))?;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dh = d / heads;
        let mut out = Array2::zeros((n, d));
        for w in offsets.windows(2) {
            for h in 0..heads {
                let (rows, cols) = (w[0]..w[1], h * dh..(h + 1) * dh);
                let p = attention_probs(qv, kv, rows.clone(), cols.clone(), dh);
                out.slice_mut(s![rows.clone(), cols.clone()])
                    .assign(&p.dot(&vv.slice(s![rows, cols])));
            }
        }
        self.push(out, op)
    }

    /// Gaussian-kernel MMD between every row segment of `h` (one per graph)
    /// and every consecutive `m`-row block of `v` (one per reference), as a
    /// segments × references matrix. The radicand is clamped at 0 before the
    /// square root. `gamma` is a 1×1 kernel precision.
    pub fn segment_mmd(
        &mut self,
        h: Var,
        v: Var,
        gamma: Var,
        offsets: Arc<Vec<usize>>,
        m: usize,
    ) -> Result<Var> {
        let op = Op::SegmentMmd {
            h,
            v,
            gamma,
            offsets: offsets.clone(),
            m,
        };
        let (hv, vv, g) = (self.value(h), self.value(v), self.value(gamma));
        if hv.ncols() != vv.ncols() {
            return Err(Error::shape(
                self.label(&op),
                format!("{} vs {}", shape_str(hv), shape_str(vv)),
            ));
        }
        if m == 0 || vv.nrows() % m != 0 {
            return Err(Error::shape(
                self.label(&op),
                format!("{} reference rows not divisible into blocks of {m}", vv.nrows()),
            ));
        }
        if g.dim() != (1, 1) {
            return Err(Error::shape(self.label(&op), "gamma must be 1×1"));
        }
        check_offsets(&offsets, hv.nrows()).map_err(|e| Error::shape(self.label(&op), e))?;
        let radicand = mmd_radicand(hv.view(), vv.view(), g[[0, 0]], &offsets, m);
        let mut h_ = DefaultHasher::new();
        for r in radicand.iter() {
            (*r > 0.0).hash(&mut h_);
        }
        h_.finish().hash(&mut self.kinks);
        let out = radicand.mapv(|r| r.max(0.0).sqrt());
        self.push(out, op)
    }

    /// Reverse accumulation from a 1×1 root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).dim() != (1, 1) {
            return Err(Error::Contract(format!(
                "gradient root must be scalar, found {}",
                shape_str(self.value(root))
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients(grads))
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let y = &self.nodes[i].value;
        let val = |v: &Var| &*self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, g.dot(&val(b).t()));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, val(a).t().dot(g));
                }
            }
            Op::SpMM(sp, a) => self.accumulate(grads, *a, sp.transpose_matmul(g.view())),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, g * val(b));
                self.accumulate(grads, *b, g * val(a));
            }
            Op::AddRow(a, r) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulRow(a, r) => {
                self.accumulate(grads, *a, g * val(r));
                let gr = (g * val(a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accumulate(grads, *r, gr);
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g * *c),
            Op::ScaleBy(a, s) => {
                let c = val(s)[[0, 0]];
                self.accumulate(grads, *a, g * c);
                let gs = (g * val(a)).sum();
                self.accumulate(grads, *s, Array2::from_elem((1, 1), gs));
            }
            Op::Sum(a) => {
                self.accumulate(grads, *a, Array2::from_elem(val(a).dim(), g[[0, 0]]));
            }
            Op::Mean(a) => {
                let x = val(a);
                self.accumulate(grads, *a, Array2::from_elem(x.dim(), g[[0, 0]] / x.len() as f64));
            }
            Op::MeanRows(a) => {
                let x = val(a);
                let n = x.nrows() as f64;
                let row = g.row(0).mapv(|v| v / n);
                let out = row.broadcast(x.dim()).unwrap().to_owned();
                self.accumulate(grads, *a, out);
            }
            Op::SumCols(a) => {
                let x = val(a);
                let out = g.broadcast(x.dim()).unwrap().to_owned();
                self.accumulate(grads, *a, out);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g * &**y),
            Op::Log(a) => self.accumulate(grads, *a, g / val(a)),
            Op::Tanh(a) => self.accumulate(grads, *a, g * &y.mapv(|t| 1.0 - t * t)),
            Op::Relu(a) => {
                let mut out = g.clone();
                Zip::from(&mut out).and(val(a)).for_each(|o, &x| {
                    if x <= 0.0 {
                        *o = 0.0
                    }
                });
                self.accumulate(grads, *a, out);
            }
            Op::Sqrt(a) => {
                let mut out = g.clone();
                Zip::from(&mut out)
                    .and(&**y)
                    .for_each(|o, &r| *o = if r > 0.0 { *o / (2.0 * r) } else { 0.0 });
                self.accumulate(grads, *a, out);
            }
            Op::ClampMin(a, lo) => {
                let mut out = g.clone();
                Zip::from(&mut out).and(val(a)).for_each(|o, &x| {
                    if x <= *lo {
                        *o = 0.0
                    }
                });
                self.accumulate(grads, *a, out);
            }
            Op::SoftmaxRows(a) => {
                let mut out = g * &**y;
                for (mut row, yr) in out.rows_mut().into_iter().zip(y.rows()) {
                    let dot = row.sum();
                    Zip::from(&mut row).and(&yr).for_each(|o, &p| *o -= p * dot);
                }
                self.accumulate(grads, *a, out);
            }
            Op::LayerNormRows(a) => {
                let (xhat, inv) = layer_norm(val(a).view());
                let c = xhat.ncols() as f64;
                let mut out = g.clone();
                for r in 0..out.nrows() {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    let mg = gr.sum() / c;
                    let mgx = gr.dot(&xr) / c;
                    let mut o = out.row_mut(r);
                    Zip::from(&mut o)
                        .and(&xr)
                        .for_each(|o, &xh| *o = inv[r] * (*o - mg - xh * mgx));
                }
                self.accumulate(grads, *a, out);
            }
            Op::ConcatCols(vs) => {
                let mut at = 0;
                for v in vs {
                    let w = val(v).ncols();
                    self.accumulate(grads, *v, g.slice(s![.., at..at + w]).to_owned());
                    at += w;
                }
            }
            Op::ConcatRows(vs) => {
                let mut at = 0;
                for v in vs {
                    let h = val(v).nrows();
                    self.accumulate(grads, *v, g.slice(s![at..at + h, ..]).to_owned());
                    at += h;
                }
            }
            Op::SliceCols(a, start) => {
                let mut out = Array2::zeros(val(a).dim());
                out.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.accumulate(grads, *a, out);
            }
            Op::SliceRows(a, start) => {
                let mut out = Array2::zeros(val(a).dim());
                out.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                self.accumulate(grads, *a, out);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.t().to_owned()),
            Op::SqDist(a, b) => {
                // dD_ij/da_i = 2(a_i − b_j), dD_ij/db_j = 2(b_j − a_i).
                let (x, z) = (val(a), val(b));
                if self.nodes[a.0].needs_grad {
                    let rs = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = (x * &rs - g.dot(z)) * 2.0;
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    let cs = g.sum_axis(Axis(0)).insert_axis(Axis(1));
                    let gb = (z * &cs - g.t().dot(x)) * 2.0;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::NormalizeRows(a) => {
                let x = val(a);
                let mut out = g.clone();
                for r in 0..out.nrows() {
                    let n = x.row(r).dot(&x.row(r)).sqrt().max(NORM_FLOOR);
                    let yr = y.row(r);
                    let dot = g.row(r).dot(&yr);
                    let mut o = out.row_mut(r);
                    Zip::from(&mut o).and(&yr).for_each(|o, &u| *o = (*o - u * dot) / n);
                }
                self.accumulate(grads, *a, out);
            }
            Op::MaskedLogSoftmax(a, mask) => {
                let mut out = Array2::zeros(g.dim());
                for r in 0..g.nrows() {
                    let total: f64 = (0..g.ncols()).filter(|&j| mask[[r, j]]).map(|j| g[[r, j]]).sum();
                    for j in 0..g.ncols() {
                        if mask[[r, j]] {
                            out[[r, j]] = g[[r, j]] - y[[r, j]].exp() * total;
                        }
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::SegmentMean(a, offsets) => {
                let mut out = Array2::zeros(val(a).dim());
                for (s, w) in offsets.windows(2).enumerate() {
                    let row = g.row(s).mapv(|v| v / (w[1] - w[0]) as f64);
                    for r in w[0]..w[1] {
                        out.row_mut(r).assign(&row);
                    }
                }
                self.accumulate(grads, *a, out);
            }
            Op::Attention {
                q,
                k,
                v,
                offsets,
                heads,
            } => {
                let (qv, kv, vv) = (val(q), val(k), val(v));
                let (n, d) = qv.dim();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (mut gq, mut gk, mut gv) =
                    (Array2::zeros((n, d)), Array2::zeros((n, d)), Array2::zeros((n, d)));
                for w in offsets.windows(2) {
                    for h in 0..*heads {
                        let (rows, cols) = (w[0]..w[1], h * dh..(h + 1) * dh);
                        let p = attention_probs(qv, kv, rows.clone(), cols.clone(), dh);
                        let go = g.slice(s![rows.clone(), cols.clone()]);
                        let vs = vv.slice(s![rows.clone(), cols.clone()]);
                        gv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&go));
                        let dp = go.dot(&vs.t());
                        let mut ds = &p * &dp;
                        for (mut row, pr) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let dot = row.sum();
                            Zip::from(&mut row).and(&pr).for_each(|o, &pp| *o -= pp * dot);
                        }
                        ds *= scale;
                        let ks = kv.slice(s![rows.clone(), cols.clone()]);
                        let qs = qv.slice(s![rows.clone(), cols.clone()]);
                        gq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&ks));
                        gk.slice_mut(s![rows, cols]).assign(&ds.t().dot(&qs));
                    }
                }
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
            }
            Op::SegmentMmd {
                h,
                v,
                gamma,
                offsets,
                m,
            } => {
                let (hv, vv) = (val(h), val(v));
                let gm = val(gamma)[[0, 0]];
                let refs = vv.nrows() / m;
                // ρ = ∂L/∂radicand; zero where the clamp was active.
                let rho = Zip::from(g).and(&**y).map_collect(|&gg, &s| if s > 0.0 { gg / (2.0 * s) } else { 0.0 });
                let mut dh = Array2::zeros(hv.dim());
                let mut dv = Array2::zeros(vv.dim());
                let mut dgamma = 0.0;
                // Within-set terms: coefficient c on mean_{ij} K(x_i, x_j).
                let mut self_term = |x: ArrayView2<'_, f64>, c: f64, dx: &mut ndarray::ArrayViewMut2<'_, f64>| {
                    if c == 0.0 {
                        return;
                    }
                    let d = sq_dist(x, x);
                    let k = d.mapv(|e| (-gm * e).exp());
                    let w = &k * (c / (x.nrows() * x.nrows()) as f64);
                    dgamma -= (&w * &d).sum();
                    let rs = w.sum_axis(Axis(1)).insert_axis(Axis(1));
                    dx.scaled_add(-4.0 * gm, &(&x * &rs - w.dot(&x)));
                };
                for (gi, wnd) in offsets.windows(2).enumerate() {
                    let alpha = rho.row(gi).sum();
                    let rows = wnd[0]..wnd[1];
                    self_term(hv.slice(s![rows.clone(), ..]), alpha, &mut dh.slice_mut(s![rows, ..]));
                }
                for b in 0..refs {
                    let beta = rho.column(b).sum();
                    let rows = b * m..(b + 1) * m;
                    self_term(vv.slice(s![rows.clone(), ..]), beta, &mut dv.slice_mut(s![rows, ..]));
                }
                // Cross term: coefficient −2ρ on mean_{ik} K(h_i, v_k).
                let d = sq_dist(hv.view(), vv.view());
                let mut w = d.mapv(|e| (-gm * e).exp());
                for (gi, wnd) in offsets.windows(2).enumerate() {
                    let n = (wnd[1] - wnd[0]) as f64;
                    for i in wnd[0]..wnd[1] {
                        for k in 0..vv.nrows() {
                            w[[i, k]] *= -2.0 * rho[[gi, k / m]] / (n * *m as f64);
                        }
                    }
                }
                dgamma -= (&w * &d).sum();
                let rs = w.sum_axis(Axis(1)).insert_axis(Axis(1));
                dh.scaled_add(-2.0 * gm, &(hv * &rs - w.dot(vv)));
                let cs = w.sum_axis(Axis(0)).insert_axis(Axis(1));
                dv.scaled_add(-2.0 * gm, &(vv * &cs - w.t().dot(hv)));
                self.accumulate(grads, *h, dh);
                self.accumulate(grads, *v, dv);
                self.accumulate(grads, *gamma, Array2::from_elem((1, 1), dgamma));
            }
        }
    }
}

fn check_offsets(offsets: &[usize], rows: usize) -> std::result::Result<(), String> {
    if offsets.len() < 2
        || offsets[0] != 0
        || *offsets.last().unwrap() != rows
        || offsets.windows(2).any(|w| w[1] <= w[0])
    {
        return Err(format!("segments {offsets:?} do not tile {rows} rows"));
    }
    Ok(())
}

fn attention_probs(
    q: &Array2<f64>,
    k: &Array2<f64>,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    dh: usize,
) -> Array2<f64> {
    let qs = q.slice(s![rows.clone(), cols.clone()]);
    let ks = k.slice(s![rows, cols]);
    let mut p = qs.dot(&ks.t()) / (dh as f64).sqrt();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - m).exp());
        let z = row.sum();
        row /= z;
    }
    p
}

/// Mean of `exp(-γ d)` over columns `cols` of `d`, summed row-major so that
/// equal blocks give bit-equal means wherever they sit.
fn kernel_block_mean(d: &Array2<f64>, cols: std::ops::Range<usize>, gamma: f64) -> f64 {
    let mut total = 0.0;
    for row in d.rows() {
        for &e in row.slice(s![cols.clone()]) {
            total += (-gamma * e).exp();
        }
    }
    total / (d.nrows() * cols.len()) as f64
}

/// Unclamped squared MMD for every (segment, reference block) pair.
pub(crate) fn mmd_radicand(
    h: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    gamma: f64,
    offsets: &[usize],
    m: usize,
) -> Array2<f64> {
    let refs = v.nrows() / m;
    let kvv: Vec<f64> = (0..refs)
        .map(|b| {
            let vb = v.slice(s![b * m..(b + 1) * m, ..]);
            kernel_block_mean(&sq_dist(vb, vb), 0..m, gamma)
        })
        .collect();
    let mut out = Array2::zeros((offsets.len() - 1, refs));
    for (g, w) in offsets.windows(2).enumerate() {
        let hg = h.slice(s![w[0]..w[1], ..]);
        let khh = kernel_block_mean(&sq_dist(hg, hg), 0..hg.nrows(), gamma);
        let cross = sq_dist(hg, v);
        for b in 0..refs {
            out[[g, b]] = khh + kvv[b] - 2.0 * kernel_block_mean(&cross, b * m..(b + 1) * m, gamma);
        }
    }
    out
}

/// Standardized rows and per-row `1/σ`.
fn layer_norm(x: ArrayView2<'_, f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = x.to_owned();
    let c = x.ncols() as f64;
    let mut inv = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let m = row.sum() / c;
        row.mapv_inplace(|v| v - m);
        let var = row.dot(&row) / c;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row *= is;
        inv.push(is);
    }
    (out, inv)
}

/// `‖a_i − b_j‖² = ‖a_i‖² + ‖b_j‖² − 2⟨a_i, b_j⟩`, clamped at 0. Each
/// entry depends only on its two rows, not on their positions.
pub(crate) fn sq_dist(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let sq = |r: ndarray::ArrayView1<'_, f64>| r.iter().fold(0.0, |acc, x| acc + x * x);
    let na: Vec<f64> = a.rows().into_iter().map(sq).collect();
    let nb: Vec<f64> = b.rows().into_iter().map(sq).collect();
    let mut out = a.dot(&b.t());
    for ((i, j), v) in out.indexed_iter_mut() {
        *v = (na[i] + nb[j] - 2.0 * *v).max(0.0);
    }
    out
}

/// Ordered, named collection of trainable matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Array2<f64>>>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array2<f64>) -> usize {
        self.names.push(name.into());
        self.values.push(Arc::new(value));
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Array2<f64> {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Array2<f64> {
        Arc::make_mut(&mut self.values[i])
    }

    pub fn set(&mut self, i: usize, value: Array2<f64>) -> Result<()> {
        if value.dim() != self.values[i].dim() {
            return Err(Error::shape(
                self.names[i].clone(),
                format!("{} replaces {}", shape_str(&value), shape_str(&self.values[i])),
            ));
        }
        self.values[i] = Arc::new(value);
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Registers every parameter as a trainable leaf, in store order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.param(v.clone())).collect()
    }
}

/// Builds a scalar expression over leaf variables bound to the given values.
pub trait Expr: Fn(&mut Tape, &[Var]) -> Result<Var> {}
impl<F: Fn(&mut Tape, &[Var]) -> Result<Var>> Expr for F {}

fn bind(tape: &mut Tape, bindings: &[Arc<Array2<f64>>]) -> Vec<Var> {
    bindings.iter().map(|b| tape.param(b.clone())).collect()
}

/// Forward evaluation of `expr` under `bindings`.
pub fn evaluate(expr: &impl Expr, bindings: &[Array2<f64>]) -> Result<Array2<f64>> {
    let arcs: Vec<_> = bindings.iter().cloned().map(Arc::new).collect();
    let mut tape = Tape::new();
    let vars = bind(&mut tape, &arcs);
    let root = expr(&mut tape, &vars)?;
    Ok(tape.value(root).clone())
}

/// Value and gradient of a scalar `expr` for every binding.
pub fn gradients(expr: &impl Expr, bindings: &[Array2<f64>]) -> Result<(f64, Vec<Array2<f64>>)> {
    let arcs: Vec<_> = bindings.iter().cloned().map(Arc::new).collect();
    let mut tape = Tape::new();
    let vars = bind(&mut tape, &arcs);
    let root = expr(&mut tape, &vars)?;
    let mut g = tape.backward(root)?;
    let out = vars
        .iter()
        .zip(bindings)
        .map(|(v, b)| g.take_or_zeros(*v, b.dim()))
        .collect();
    Ok((tape.scalar(root), out))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose stencil evaluations landed on different sides of a
    /// relu/clamp kink.
    pub skipped: usize,
}

/// Compares analytic gradients against five-point central differences on up to
/// `max_coords` seeded coordinates per binding.
pub fn grad_check(
    expr: &impl Expr,
    bindings: &[Array2<f64>],
    step: f64,
    seed: u64,
    max_coords: usize,
) -> Result<GradCheck> {
    let (_, analytic) = gradients(expr, bindings)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut arcs: Vec<_> = bindings.iter().cloned().map(Arc::new).collect();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let eval = |arcs: &[Arc<Array2<f64>>]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars = bind(&mut tape, arcs);
        let root = expr(&mut tape, &vars)?;
        Ok((tape.scalar(root), tape.kink_pattern()))
    };
    for (b, grad) in analytic.iter().enumerate() {
        let len = bindings[b].len();
        let count = len.min(max_coords);
        let mut coords = sample(&mut rng, len, count).into_vec();
        coords.sort_unstable();
        for c in coords {
            let base = bindings[b].as_slice().unwrap()[c];
            let mut at = |offset: f64| -> Result<(f64, u64)> {
                Arc::make_mut(&mut arcs[b]).as_slice_mut().unwrap()[c] = base + offset;
                eval(&arcs)
            };
            let evals = [at(-2.0 * step)?, at(-step)?, at(step)?, at(2.0 * step)?];
            Arc::make_mut(&mut arcs[b]).as_slice_mut().unwrap()[c] = base;
            if evals.iter().any(|e| e.1 != evals[0].1) {
                report.skipped += 1;
                continue;
            }
            let [fm2, fm1, fp1, fp2] = evals.map(|e| e.0);
            let numeric = (8.0 * (fp1 - fm1) - (fp2 - fm2)) / (12.0 * step);
            let a = grad.as_slice().unwrap()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}
