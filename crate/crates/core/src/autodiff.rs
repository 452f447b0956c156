//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! are appended in execution order, so node inputs always precede the node
//! itself and [`Tape::backward`] is a single reverse sweep. The tape is
//! consumed by `backward`; build a fresh one for every forward pass.
//!
//! Only the operations the embedding model needs are provided. Segment
//! operations take CSR-style `offsets` (length `S + 1`, first 0, last `E`)
//! partitioning `E` edge entries into `S` segments.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Guard added to the product of norms in cosine similarities.
pub const COSINE_EPS: f64 = 1e-12;

/// Negative slope of the leaky ReLU used for attention scores.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    LeakyRelu,
    Tanh,
    Exp,
    Log,
    Elu,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Unary(Var, Unary),
    Reshape(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    SegmentSoftmax {
        x: Var,
        offsets: Vec<usize>,
    },
    SegmentWeightedSum {
        weights: Var,
        rows: Var,
        offsets: Vec<usize>,
    },
    SegmentMean {
        rows: Var,
        offsets: Vec<usize>,
    },
    SegmentMax {
        rows: Var,
        argmax: Vec<usize>,
    },
    RowCosine {
        u: Var,
        v: Var,
    },
    CosineMatrix {
        u: Var,
        v: Var,
    },
    RowNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Slice {
        x: Var,
        row0: usize,
        col0: usize,
    },
    ConcatCols(Vec<Var>),
    ScaleRows {
        x: Var,
        w: Var,
    },
    RowSoftmax(Var),
    ElementMax {
        inputs: Vec<Var>,
        winner: Vec<usize>,
    },
    Sum(Var),
    MeanRows(Var),
    BroadcastRows(Var),
    Diagonal(Var),
    RowLogSumExp {
        x: Var,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient buffer for `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor (zeros when `v` does not influence the loss).
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn check_offsets(offsets: &[usize], len: usize, what: &str) -> Result<()> {
    if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().unwrap() != len {
        return Err(Error::Shape(format!(
            "{what}: offsets must start at 0 and end at {len}"
        )));
    }
    for (s, w) in offsets.windows(2).enumerate() {
        if w[1] <= w[0] {
            return Err(Error::Shape(format!("{what}: segment {s} is empty")));
        }
    }
    Ok(())
}

impl Tape {
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

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, what)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a bias vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_row(self.value(bias))?;
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        let input = self.value(x);
        if f == Unary::Log {
            if let Some(bad) = input.data().iter().find(|&&v| !(v > 0.0)) {
                return Err(Error::Domain(format!("log of non-positive value {bad}")));
            }
        }
        let out = input.map(|v| f.apply(v));
        Ok(self.push(out, Op::Unary(x, f)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu).expect("relu is total")
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::LeakyRelu).expect("leaky relu is total")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh).expect("tanh is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp).expect("exp is total")
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Elu).expect("elu is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Row `e` of the result is row `idx[e]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let input = self.value(x);
        let (n, c) = (input.rows(), input.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(Error::Index(format!("gather_rows: row {i} of {n}")));
            }
            data.extend_from_slice(input.row(i));
        }
        let out = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Softmax within each segment of a length-`E` tensor. Output has shape `[E]`.
    pub fn segment_softmax(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let input = self.value(x);
        check_offsets(offsets, input.len(), "segment_softmax")?;
        let mut out = vec![0.0; input.len()];
        for w in offsets.windows(2) {
            let seg = &input.data()[w[0]..w[1]];
            let max = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, &s) in out[w[0]..w[1]].iter_mut().zip(seg) {
                *o = (s - max).exp();
                total += *o;
            }
            for o in &mut out[w[0]..w[1]] {
                *o /= total;
            }
        }
        let out = Tensor::vector(out);
        Ok(self.push(
            out,
            Op::SegmentSoftmax {
                x,
                offsets: offsets.to_vec(),
            },
        ))
    }

    /// Output row `s` is `Σ_{e ∈ segment s} weights[e] · rows[e]`.
    pub fn segment_weighted_sum(&mut self, weights: Var, rows: Var, offsets: &[usize]) -> Result<Var> {
        let (w, r) = (self.value(weights), self.value(rows));
        if w.len() != r.rows() {
            return Err(Error::Shape(format!(
                "segment_weighted_sum: {} weights for {} rows",
                w.len(),
                r.rows()
            )));
        }
        check_offsets(offsets, r.rows(), "segment_weighted_sum")?;
        let c = r.cols();
        let segments = offsets.len() - 1;
        let mut out = vec![0.0; segments * c];
        for (s, win) in offsets.windows(2).enumerate() {
            let dst = &mut out[s * c..(s + 1) * c];
            for e in win[0]..win[1] {
                let we = w.data()[e];
                for (o, &v) in dst.iter_mut().zip(r.row(e)) {
                    *o += we * v;
                }
            }
        }
        let out = Tensor::new(vec![segments, c], out)?;
        Ok(self.push(
            out,
            Op::SegmentWeightedSum {
                weights,
                rows,
                offsets: offsets.to_vec(),
            },
        ))
    }

    /// Unweighted mean of the rows in each segment.
    pub fn segment_mean(&mut self, rows: Var, offsets: &[usize]) -> Result<Var> {
        let r = self.value(rows);
        check_offsets(offsets, r.rows(), "segment_mean")?;
        let c = r.cols();
        let segments = offsets.len() - 1;
        let mut out = vec![0.0; segments * c];
        for (s, win) in offsets.windows(2).enumerate() {
            let dst = &mut out[s * c..(s + 1) * c];
            for e in win[0]..win[1] {
                for (o, &v) in dst.iter_mut().zip(r.row(e)) {
                    *o += v;
                }
            }
            let inv = 1.0 / (win[1] - win[0]) as f64;
            dst.iter_mut().for_each(|o| *o *= inv);
        }
        let out = Tensor::new(vec![segments, c], out)?;
        Ok(self.push(
            out,
            Op::SegmentMean {
                rows,
                offsets: offsets.to_vec(),
            },
        ))
    }

    /// Coordinatewise max over the rows in each segment. Ties go to the
    /// earliest row, which also receives the whole gradient.
    pub fn segment_max(&mut self, rows: Var, offsets: &[usize]) -> Result<Var> {
        let r = self.value(rows);
        check_offsets(offsets, r.rows(), "segment_max")?;
        let c = r.cols();
        let segments = offsets.len() - 1;
        let mut out = vec![0.0; segments * c];
        let mut argmax = vec![0usize; segments * c];
        for (s, win) in offsets.windows(2).enumerate() {
            for col in 0..c {
                let mut best = win[0];
                for e in win[0] + 1..win[1] {
                    if r.get(e, col) > r.get(best, col) {
                        best = e;
                    }
                }
                out[s * c + col] = r.get(best, col);
                argmax[s * c + col] = best;
            }
        }
        let out = Tensor::new(vec![segments, c], out)?;
        Ok(self.push(out, Op::SegmentMax { rows, argmax }))
    }

    /// `out[i] = ⟨u_i, v_i⟩ / (‖u_i‖‖v_i‖ + ε)`.
    pub fn row_cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        self.same_shape(u, v, "row_cosine")?;
        let (a, b) = (self.value(u), self.value(v));
        let out: Vec<f64> = (0..a.rows())
            .map(|i| {
                let (x, y) = (a.row(i), b.row(i));
                dot(x, y) / (norm(x) * norm(y) + COSINE_EPS)
            })
            .collect();
        Ok(self.push(Tensor::vector(out), Op::RowCosine { u, v }))
    }

    /// All-pairs cosine similarity: `out[i][j] = cos(u_i, v_j)` with the
    /// same ε guard as [`Tape::row_cosine`].
    pub fn cosine_matrix(&mut self, u: Var, v: Var) -> Result<Var> {
        let (a, b) = (self.value(u), self.value(v));
        let mut out = a.matmul_nt(b)?;
        let na = row_norms(a);
        let nb = row_norms(b);
        let n = b.rows();
        for (i, row) in out.data_mut().chunks_mut(n.max(1)).enumerate() {
            for (j, s) in row.iter_mut().enumerate() {
                *s /= na[i] * nb[j] + COSINE_EPS;
            }
        }
        Ok(self.push(out, Op::CosineMatrix { u, v }))
    }

    /// Inverted dropout. In training mode each entry is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Domain(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let input = self.value(x);
        let mask: Vec<f64> = (0..input.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = input.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(input.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    /// Sub-matrix `x[rows, cols]`.
    pub fn slice(&mut self, x: Var, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Result<Var> {
        let input = self.value(x);
        let (m, n) = input.as_matrix("slice")?;
        if rows.end > m || cols.end > n || rows.start > rows.end || cols.start > cols.end {
            return Err(Error::Index(format!(
                "slice [{rows:?}, {cols:?}] of [{m}x{n}]"
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            data.extend_from_slice(&input.row(i)[cols.clone()]);
        }
        let out = Tensor::new(vec![rows.len(), cols.len()], data)?;
        Ok(self.push(
            out,
            Op::Slice {
                x,
                row0: rows.start,
                col0: cols.start,
            },
        ))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat_cols: no inputs".into()))?;
        let m = self.value(*first).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Scales row `i` of `x` by `w[i]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (a, s) = (self.value(x), self.value(w));
        if s.len() != a.rows() {
            return Err(Error::Shape(format!(
                "scale_rows: {} weights for {} rows",
                s.len(),
                a.rows()
            )));
        }
        let c = a.cols();
        let mut out = a.clone();
        for (row, &si) in out.data_mut().chunks_mut(c.max(1)).zip(s.data()) {
            row.iter_mut().for_each(|v| *v *= si);
        }
        Ok(self.push(out, Op::ScaleRows { x, w }))
    }

    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        let (_, n) = input.as_matrix("row_softmax")?;
        let mut out = input.clone();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        Ok(self.push(out, Op::RowSoftmax(x)))
    }

    /// Elementwise maximum across equally shaped inputs (first wins ties).
    pub fn element_max(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Shape("element_max: no inputs".into()))?;
        for &v in &inputs[1..] {
            self.same_shape(first, v, "element_max")?;
        }
        let mut out = self.value(first).clone();
        let mut winner = vec![0usize; out.len()];
        for (k, &v) in inputs.iter().enumerate().skip(1) {
            for (e, (o, &c)) in out.data_mut().iter_mut().zip(self.nodes[v.0].value.data()).enumerate() {
                if c > *o {
                    *o = c;
                    winner[e] = k;
                }
            }
        }
        Ok(self.push(
            out,
            Op::ElementMax {
                inputs: inputs.to_vec(),
                winner,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    /// Column means of an `m×n` matrix, as a `1×n` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        let (m, n) = input.as_matrix("mean_rows")?;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(input.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let out = Tensor::new(vec![1, n], out)?;
        Ok(self.push(out, Op::MeanRows(x)))
    }

    /// Repeats a `1×n` matrix `m` times.
    pub fn broadcast_rows(&mut self, x: Var, m: usize) -> Result<Var> {
        let input = self.value(x);
        let (r, n) = input.as_matrix("broadcast_rows")?;
        if r != 1 {
            return Err(Error::Shape(format!("broadcast_rows: expected one row, got {r}")));
        }
        let data = input.data().repeat(m);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::BroadcastRows(x)))
    }

    /// Main diagonal of a square matrix, shape `[n]`.
    pub fn diagonal(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        let (m, n) = input.as_matrix("diagonal")?;
        if m != n {
            return Err(Error::Shape(format!("diagonal of [{m}x{n}]")));
        }
        let out = Tensor::vector((0..n).map(|i| input.get(i, i)).collect());
        Ok(self.push(out, Op::Diagonal(x)))
    }

    /// `out[i] = log Σ_{j : mask[i][j]} exp(x[i][j])`. Every row must keep
    /// at least one entry.
    pub fn row_logsumexp(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let input = self.value(x);
        let (m, n) = input.as_matrix("row_logsumexp")?;
        if mask.len() != m * n {
            return Err(Error::Shape(format!(
                "row_logsumexp: mask of {} for [{m}x{n}]",
                mask.len()
            )));
        }
        let mut out = Vec::with_capacity(m);
        let mut weights = vec![0.0; m * n];
        for i in 0..m {
            let row = input.row(i);
            let keep = &mask[i * n..(i + 1) * n];
            let max = row
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if row.iter().zip(keep).any(|(v, &k)| k && v.is_nan()) {
                out.push(f64::NAN);
                continue;
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Domain(format!("row_logsumexp: row {i} is fully masked")));
            }
            let w = &mut weights[i * n..(i + 1) * n];
            let mut total = 0.0;
            for ((o, &v), &k) in w.iter_mut().zip(row).zip(keep) {
                if k {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            w.iter_mut().for_each(|o| *o /= total);
            out.push(max + total.ln());
        }
        Ok(self.push(Tensor::vector(out), Op::RowLogSumExp { x, weights }))
    }

    /// Scales every row to unit length; all-zero rows stay zero.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        input.as_matrix("row_normalize")?;
        let norms = row_norms(input);
        let mut out = input.clone();
        let c = out.cols();
        for (row, &nr) in out.data_mut().chunks_mut(c.max(1)).zip(&norms) {
            if nr > 0.0 {
                row.iter_mut().for_each(|v| *v /= nr);
            }
        }
        Ok(self.push(out, Op::RowNormalize { x, norms }))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            backward_node(&nodes, node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    (0..t.rows()).map(|i| norm(t.row(i))).collect()
}

fn accumulate<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
}

fn backward_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).rows(), val(*a).cols());
            let n = val(*b).cols();
            let bv = val(*b).data().to_vec();
            let av = val(*a).data().to_vec();
            gemm(m, n, k, g, false, &bv, true, accumulate(grads, nodes, *a), true);
            gemm(k, m, n, &av, true, g, false, accumulate(grads, nodes, *b), true);
        }
        Op::MatMulNt(a, b) => {
            let (m, k) = (val(*a).rows(), val(*a).cols());
            let n = val(*b).rows();
            let bv = val(*b).data().to_vec();
            let av = val(*a).data().to_vec();
            gemm(m, n, k, g, false, &bv, false, accumulate(grads, nodes, *a), true);
            gemm(n, m, k, g, true, &av, false, accumulate(grads, nodes, *b), true);
        }
        Op::Add(a, b) => {
            add_into(accumulate(grads, nodes, *a), g);
            add_into(accumulate(grads, nodes, *b), g);
        }
        Op::Sub(a, b) => {
            add_into(accumulate(grads, nodes, *a), g);
            let gb = accumulate(grads, nodes, *b);
            gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data().to_vec(), val(*b).data().to_vec());
            let ga = accumulate(grads, nodes, *a);
            for ((o, gi), bi) in ga.iter_mut().zip(g).zip(&bv) {
                *o += gi * bi;
            }
            let gb = accumulate(grads, nodes, *b);
            for ((o, gi), ai) in gb.iter_mut().zip(g).zip(&av) {
                *o += gi * ai;
            }
        }
        Op::AddRow(x, bias) => {
            add_into(accumulate(grads, nodes, *x), g);
            let c = val(*bias).len();
            let gb = accumulate(grads, nodes, *bias);
            for row in g.chunks(c) {
                add_into(gb, row);
            }
        }
        Op::Scale(x, c) => {
            let gx = accumulate(grads, nodes, *x);
            gx.iter_mut().zip(g).for_each(|(o, v)| *o += c * v);
        }
        Op::Unary(x, f) => {
            let input = val(*x).data();
            let out = node.value.data();
            let gx = accumulate(grads, nodes, *x);
            for i in 0..gx.len() {
                gx[i] += g[i] * f.derivative(input[i], out[i]);
            }
        }
        Op::Reshape(x) => add_into(accumulate(grads, nodes, *x), g),
        Op::Gather { x, idx } => {
            let c = val(*x).cols();
            let gx = accumulate(grads, nodes, *x);
            for (e, &i) in idx.iter().enumerate() {
                add_into(&mut gx[i * c..(i + 1) * c], &g[e * c..(e + 1) * c]);
            }
        }
        Op::SegmentSoftmax { x, offsets } => {
            let y = node.value.data();
            let gx = accumulate(grads, nodes, *x);
            for w in offsets.windows(2) {
                let inner: f64 = (w[0]..w[1]).map(|e| g[e] * y[e]).sum();
                for e in w[0]..w[1] {
                    gx[e] += y[e] * (g[e] - inner);
                }
            }
        }
        Op::SegmentWeightedSum {
            weights,
            rows,
            offsets,
        } => {
            let r = val(*rows);
            let c = r.cols();
            let w = val(*weights).data().to_vec();
            let mut gw = vec![0.0; w.len()];
            for (s, win) in offsets.windows(2).enumerate() {
                let gs = &g[s * c..(s + 1) * c];
                for e in win[0]..win[1] {
                    gw[e] = dot(gs, r.row(e));
                }
            }
            add_into(accumulate(grads, nodes, *weights), &gw);
            let gr = accumulate(grads, nodes, *rows);
            for (s, win) in offsets.windows(2).enumerate() {
                let gs = &g[s * c..(s + 1) * c];
                for e in win[0]..win[1] {
                    for (o, v) in gr[e * c..(e + 1) * c].iter_mut().zip(gs) {
                        *o += w[e] * v;
                    }
                }
            }
        }
        Op::SegmentMean { rows, offsets } => {
            let c = val(*rows).cols();
            let gr = accumulate(grads, nodes, *rows);
            for (s, win) in offsets.windows(2).enumerate() {
                let inv = 1.0 / (win[1] - win[0]) as f64;
                let gs = &g[s * c..(s + 1) * c];
                for e in win[0]..win[1] {
                    for (o, v) in gr[e * c..(e + 1) * c].iter_mut().zip(gs) {
                        *o += inv * v;
                    }
                }
            }
        }
        Op::SegmentMax { rows, argmax } => {
            let c = val(*rows).cols();
            let gr = accumulate(grads, nodes, *rows);
            for (k, &e) in argmax.iter().enumerate() {
                gr[e * c + k % c] += g[k];
            }
        }
        Op::RowCosine { u, v } => {
            let (a, b) = (val(*u).clone(), val(*v).clone());
            let c = a.cols();
            let mut gu = vec![0.0; a.len()];
            let mut gv = vec![0.0; b.len()];
            for i in 0..a.rows() {
                let (x, y) = (a.row(i), b.row(i));
                let (nx, ny) = (norm(x), norm(y));
                let d = nx * ny + COSINE_EPS;
                let p = dot(x, y);
                for t in 0..c {
                    let mut du = y[t] / d;
                    let mut dv = x[t] / d;
                    if nx > 0.0 {
                        du -= p * ny * x[t] / (nx * d * d);
                    }
                    if ny > 0.0 {
                        dv -= p * nx * y[t] / (ny * d * d);
                    }
                    gu[i * c + t] = g[i] * du;
                    gv[i * c + t] = g[i] * dv;
                }
            }
            add_into(accumulate(grads, nodes, *u), &gu);
            add_into(accumulate(grads, nodes, *v), &gv);
        }
        Op::CosineMatrix { u, v } => {
            let (a, b) = (val(*u).clone(), val(*v).clone());
            let (m, k) = (a.rows(), a.cols());
            let n = b.rows();
            let na = row_norms(&a);
            let nb = row_norms(&b);
            // coef[i][j] = g_ij / D_ij; self terms collect the norm derivatives.
            let mut coef = vec![0.0; m * n];
            let mut self_u = vec![0.0; m];
            let mut self_v = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    let d = na[i] * nb[j] + COSINE_EPS;
                    let gij = g[i * n + j];
                    coef[i * n + j] = gij / d;
                    let p = node.value.data()[i * n + j] * d;
                    let common = gij * p / (d * d);
                    if na[i] > 0.0 {
                        self_u[i] += common * nb[j] / na[i];
                    }
                    if nb[j] > 0.0 {
                        self_v[j] += common * na[i] / nb[j];
                    }
                }
            }
            let mut gu = vec![0.0; m * k];
            gemm(m, n, k, &coef, false, b.data(), false, &mut gu, false);
            for i in 0..m {
                for t in 0..k {
                    gu[i * k + t] -= self_u[i] * a.get(i, t);
                }
            }
            let mut gv = vec![0.0; n * k];
            gemm(n, m, k, &coef, true, a.data(), false, &mut gv, false);
            for j in 0..n {
                for t in 0..k {
                    gv[j * k + t] -= self_v[j] * b.get(j, t);
                }
            }
            add_into(accumulate(grads, nodes, *u), &gu);
            add_into(accumulate(grads, nodes, *v), &gv);
        }
        Op::Dropout { x, mask } => {
            let gx = accumulate(grads, nodes, *x);
            for ((o, gi), m) in gx.iter_mut().zip(g).zip(mask) {
                *o += gi * m;
            }
        }
        Op::Slice { x, row0, col0 } => {
            let n = val(*x).cols();
            let (rows, cols) = (node.value.rows(), node.value.cols());
            let gx = accumulate(grads, nodes, *x);
            for i in 0..rows {
                let dst = (row0 + i) * n + col0;
                add_into(&mut gx[dst..dst + cols], &g[i * cols..(i + 1) * cols]);
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let mut start = 0;
            for &p in parts {
                let w = val(p).cols();
                let gp = accumulate(grads, nodes, p);
                for (i, row) in gp.chunks_mut(w.max(1)).enumerate() {
                    add_into(row, &g[i * total + start..i * total + start + w]);
                }
                start += w;
            }
        }
        Op::ScaleRows { x, w } => {
            let (a, s) = (val(*x).clone(), val(*w).data().to_vec());
            let c = a.cols();
            let gs: Vec<f64> = (0..a.rows()).map(|i| dot(&g[i * c..(i + 1) * c], a.row(i))).collect();
            let gx = accumulate(grads, nodes, *x);
            for (i, &si) in s.iter().enumerate() {
                for t in 0..c {
                    gx[i * c + t] += si * g[i * c + t];
                }
            }
            add_into(accumulate(grads, nodes, *w), &gs);
        }
        Op::RowSoftmax(x) => {
            let y = node.value.data();
            let n = node.value.cols();
            let gx = accumulate(grads, nodes, *x);
            for i in 0..node.value.rows() {
                let r = i * n..(i + 1) * n;
                let inner = dot(&g[r.clone()], &y[r.clone()]);
                for e in r {
                    gx[e] += y[e] * (g[e] - inner);
                }
            }
        }
        Op::ElementMax { inputs, winner } => {
            for (k, &v) in inputs.iter().enumerate() {
                let gv = accumulate(grads, nodes, v);
                for (e, &w) in winner.iter().enumerate() {
                    if w == k {
                        gv[e] += g[e];
                    }
                }
            }
        }
        Op::Sum(x) => {
            let gx = accumulate(grads, nodes, *x);
            gx.iter_mut().for_each(|o| *o += g[0]);
        }
        Op::MeanRows(x) => {
            let (m, n) = (val(*x).rows(), val(*x).cols());
            let gx = accumulate(grads, nodes, *x);
            for row in gx.chunks_mut(n.max(1)) {
                for (o, v) in row.iter_mut().zip(g) {
                    *o += v / m as f64;
                }
            }
        }
        Op::BroadcastRows(x) => {
            let n = val(*x).cols();
            let gx = accumulate(grads, nodes, *x);
            for row in g.chunks(n.max(1)) {
                add_into(gx, row);
            }
        }
        Op::Diagonal(x) => {
            let n = val(*x).cols();
            let gx = accumulate(grads, nodes, *x);
            for (i, v) in g.iter().enumerate() {
                gx[i * n + i] += v;
            }
        }
        Op::RowLogSumExp { x, weights } => {
            let n = val(*x).cols();
            let gx = accumulate(grads, nodes, *x);
            for (i, &gi) in g.iter().enumerate() {
                for (o, &w) in gx[i * n..(i + 1) * n].iter_mut().zip(&weights[i * n..(i + 1) * n]) {
                    *o += gi * w;
                }
            }
        }
        Op::RowNormalize { x, norms } => {
            let y = node.value.data();
            let c = node.value.cols();
            let gx = accumulate(grads, nodes, *x);
            for (i, &nr) in norms.iter().enumerate() {
                if nr == 0.0 {
                    continue;
                }
                let (yi, gi) = (&y[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                let proj = dot(yi, gi);
                for t in 0..c {
                    gx[i * c + t] += (gi[t] - proj * yi[t]) / nr;
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
