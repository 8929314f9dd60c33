use std::sync::Arc;

use super::gemm::gemm;
use super::Tensor;
use crate::error::{Error, Result};

/// Gather index that reads as zero (used for padding in permutations).
pub const ZERO_INDEX: usize = usize::MAX;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

enum Op {
    Leaf,
    /// Output of a primitive whose inputs carry no gradient.
    Constant,
    MatMul {
        a: Var,
        b: Var,
        b_t: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        b_t: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Map {
        a: Var,
        df: fn(f64) -> f64,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Gather {
        a: Var,
        index: Arc<Vec<usize>>,
    },
    Reshape(Var),
    Transpose {
        a: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Bilinear {
        feat: Var,
        taps: Vec<[(usize, f64); 4]>,
        channels: usize,
    },
    AvgPool2 {
        a: Var,
        w: usize,
        c: usize,
    },
    Upsample2 {
        a: Var,
        h: usize,
        w: usize,
        c: usize,
    },
    SmoothL1 {
        a: Var,
        target: Vec<f64>,
        beta: f64,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        /// softmax(logits) - smoothed target, already divided by the row count
        dlogits: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        dlogits: Vec<f64>,
    },
    Focal {
        logits: Var,
        dlogits: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Map { .. } => "map",
            Op::Embedding { .. } => "embedding",
            Op::Concat { .. } => "concat",
            Op::Gather { .. } => "gather",
            Op::Reshape(..) => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::Bilinear { .. } => "bilinear_sample",
            Op::AvgPool2 { .. } => "avg_pool2",
            Op::Upsample2 { .. } => "upsample2",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::Focal { .. } => "focal_loss",
        }
    }
}

/// Ordered record of executed primitives.
///
/// Values are kept for every node; ops whose inputs carry no gradient are
/// stored as constants so inference builds no adjoint state.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    visits: Vec<Var>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::contract(op, detail)
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(op, "produced a non-finite value"))
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
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

    /// Records an input tensor. Non-finite data is rejected.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        check_finite("leaf", t.data())?;
        let mut t = t;
        t.grad = None;
        Ok(self.push(t, Op::Leaf))
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t.with_requires_grad(false))
    }

    pub(crate) fn leaf_unchecked(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Gradient slot of a leaf, populated by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].value.grad.take()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn emit(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Result<Var> {
        check_finite(op.kind(), &data)?;
        let rg = inputs.iter().any(|&v| self.needs(v));
        let op = if rg { op } else { Op::Constant };
        Ok(self.push(Tensor::from_parts(shape, data, rg), op))
    }

    // ---------------------------------------------------------------- linear algebra

    /// `[m,k] · [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[m,k] · [n,k]^T -> [m,n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err("matmul", format!("expects 2-D operands, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if b_t { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(shape_err(
                "matmul",
                format!("inner dimensions differ: {sa:?} x {sb:?} (transposed rhs: {b_t})"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), b_t, &mut out, false);
        self.emit(vec![m, n], out, &[a, b], Op::MatMul { a, b, b_t, m, k, n })
    }

    /// `[B,m,k] · [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, false)
    }

    /// `[B,m,k] · [B,n,k]^T -> [B,m,n]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, true)
    }

    fn bmm_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err("bmm", format!("expects [B,m,k] and [B,.,.], got {sa:?} and {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if b_t { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(shape_err("bmm", format!("inner dimensions differ: {sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    false,
                    &db[i * k * n..(i + 1) * k * n],
                    b_t,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        self.emit(vec![batch, m, n], out, &[a, b], Op::BatchMatMul { a, b, b_t, batch, m, k, n })
    }

    // ---------------------------------------------------------------- elementwise

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("operand shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.kind(), a, b)?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.emit(shape, out, &[a, b], op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `[n]` vector to every row of a `[.., n]` tensor.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = last_dim(self.shape(a));
        if self.shape(b) != [n] {
            return Err(shape_err(
                "add_row",
                format!("row vector {:?} does not match last axis of {:?}", self.shape(b), self.shape(a)),
            ));
        }
        let bias = self.data(b);
        let out: Vec<f64> = self.data(a).iter().enumerate().map(|(i, &x)| x + bias[i % n]).collect();
        let shape = self.shape(a).to_vec();
        self.emit(shape, out, &[a, b], Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.emit(shape, out, &[a], Op::Scale(a, s))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.emit(shape, out, &[a], op)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Gelu(a), gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.data(a).iter().any(|&x| x <= 0.0) {
            return Err(Error::numeric("log", "argument must be strictly positive"));
        }
        self.unary(a, Op::Log(a), f64::ln)
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn map(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Result<Var> {
        self.unary(a, Op::Map { a, df }, f)
    }

    // ---------------------------------------------------------------- normalisation

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = last_dim(self.shape(a));
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let shape = self.shape(a).to_vec();
        self.emit(shape, out, &[a], Op::Softmax(a))
    }

    /// Softmax over the last axis where `allowed[q*k_len + k]` (broadcast over
    /// leading axes) selects the admissible positions. Disallowed entries are
    /// exactly zero.
    pub fn softmax_masked(&mut self, a: Var, allowed: &[bool]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(shape_err("softmax_masked", format!("needs >= 2 axes, got {shape:?}")));
        }
        let (q, k) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if allowed.len() != q * k {
            return Err(shape_err(
                "softmax_masked",
                format!("mask has {} entries, scores {shape:?} need {}", allowed.len(), q * k),
            ));
        }
        let mut out = self.data(a).to_vec();
        for (r, row) in out.chunks_mut(k).enumerate() {
            let mask = &allowed[(r % q) * k..(r % q + 1) * k];
            let mut max = f64::NEG_INFINITY;
            for (x, &ok) in row.iter().zip(mask) {
                if ok {
                    max = max.max(*x);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(shape_err("softmax_masked", format!("row {} has no admissible entry", r % q)));
            }
            let mut z = 0.0;
            for (x, &ok) in row.iter_mut().zip(mask) {
                *x = if ok { (*x - max).exp() } else { 0.0 };
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        self.emit(shape, out, &[a], Op::Softmax(a))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = last_dim(self.shape(x));
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "affine params {:?}/{:?} do not match last axis of {:?}",
                    self.shape(gamma),
                    self.shape(beta),
                    self.shape(x)
                ),
            ));
        }
        let rows = self.value(x).numel() / d;
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        {
            let (xs, g, b) = (self.data(x), self.data(gamma), self.data(beta));
            for r in 0..rows {
                let row = &xs[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rs = 1.0 / (var + LN_EPS).sqrt();
                rstd[r] = rs;
                for j in 0..d {
                    let h = (row[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * g[j] + b[j];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.emit(shape, out, &[x, gamma, beta], Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    // ---------------------------------------------------------------- indexing & layout

    /// Rows of `table[V,D]` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(shape_err("embedding", format!("table must be 2-D, got {shape:?}")));
        }
        let (v, d) = (shape[0], shape[1]);
        if ids.is_empty() {
            return Err(shape_err("embedding", "empty id list".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        let t = self.data(table);
        for &id in ids {
            if id >= v {
                return Err(Error::Index { op: "embedding", index: id, len: v });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let ids = ids.to_vec();
        self.emit(vec![ids.len(), d], out, &[table], Op::Embedding { table, ids })
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        let mut total_axis = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(shape_err("concat", format!("incompatible shapes {first:?} and {s:?} on axis {axis}")));
            }
            widths.push(s[axis] * inner);
            total_axis += s[axis];
        }
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total_axis;
        self.emit(shape, out, parts, Op::Concat { parts: parts.to_vec(), outer, widths })
    }

    /// `out[i] = a[index[i]]` (or 0 for [`ZERO_INDEX`]), viewed as `shape`.
    /// Covers permutations, window partitioning, padding and row selection.
    pub fn gather(&mut self, a: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return Err(shape_err(
                "gather",
                format!("index has {} entries but output shape {shape:?} needs {numel}", index.len()),
            ));
        }
        let src = self.data(a);
        let len = src.len();
        let mut out = Vec::with_capacity(numel);
        for &i in index.iter() {
            if i == ZERO_INDEX {
                out.push(0.0);
            } else if i < len {
                out.push(src[i]);
            } else {
                return Err(Error::Index { op: "gather", index: i, len });
            }
        }
        self.emit(shape.to_vec(), out, &[a], Op::Gather { a, index })
    }

    /// Selects rows of a 2-D (or higher, leading-axis) tensor.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = shape[0];
        let width: usize = shape[1..].iter().product();
        let mut index = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= n {
                return Err(Error::Index { op: "select_rows", index: r, len: n });
            }
            index.extend(r * width..(r + 1) * width);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        self.gather(a, Arc::new(index), &out_shape)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(shape_err("reshape", format!("cannot view {:?} as {shape:?}", self.shape(a))));
        }
        let data = self.data(a).to_vec();
        self.emit(shape.to_vec(), data, &[a], Op::Reshape(a))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(shape_err("transpose", format!("needs >= 2 axes, got {shape:?}")));
        }
        let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = self.value(a).numel() / (rows * cols);
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            let o = b * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    out[o + c * rows + r] = src[o + r * cols + c];
                }
            }
        }
        let mut out_shape = shape;
        let l = out_shape.len();
        out_shape.swap(l - 2, l - 1);
        self.emit(out_shape, out, &[a], Op::Transpose { a, batch, rows, cols })
    }

    // ---------------------------------------------------------------- spatial (channels-last [H,W,C])

    /// Bilinear samples of a `[H,W,C]` map at `(y, x)` feature coordinates
    /// (cell centres at integers, clamped to the map). Returns `[P, C]`.
    pub fn bilinear_sample(&mut self, feat: Var, points: &[(f64, f64)]) -> Result<Var> {
        let shape = self.shape(feat).to_vec();
        if shape.len() != 3 {
            return Err(shape_err("bilinear_sample", format!("expects [H,W,C], got {shape:?}")));
        }
        if points.is_empty() {
            return Err(shape_err("bilinear_sample", "no sample points".into()));
        }
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let mut taps = Vec::with_capacity(points.len());
        for &(y, x) in points {
            if !y.is_finite() || !x.is_finite() {
                return Err(Error::numeric("bilinear_sample", "non-finite sample coordinate"));
            }
            let y = y.clamp(0.0, (h - 1) as f64);
            let x = x.clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (ly, lx) = (y - y0 as f64, x - x0 as f64);
            taps.push([
                ((y0 * w + x0) * c, (1.0 - ly) * (1.0 - lx)),
                ((y0 * w + x1) * c, (1.0 - ly) * lx),
                ((y1 * w + x0) * c, ly * (1.0 - lx)),
                ((y1 * w + x1) * c, ly * lx),
            ]);
        }
        let src = self.data(feat);
        let mut out = vec![0.0; points.len() * c];
        for (p, tap) in taps.iter().enumerate() {
            let dst = &mut out[p * c..(p + 1) * c];
            for &(off, wt) in tap {
                if wt != 0.0 {
                    for (d, s) in dst.iter_mut().zip(&src[off..off + c]) {
                        *d += wt * s;
                    }
                }
            }
        }
        self.emit(vec![points.len(), c], out, &[feat], Op::Bilinear { feat, taps, channels: c })
    }

    /// Bilinear resize of `[H,W,C]` to `[oh,ow,C]` (half-pixel centres).
    pub fn resize_bilinear(&mut self, feat: Var, oh: usize, ow: usize) -> Result<Var> {
        let shape = self.shape(feat).to_vec();
        if shape.len() != 3 || oh == 0 || ow == 0 {
            return Err(shape_err("resize_bilinear", format!("bad input {shape:?} -> {oh}x{ow}")));
        }
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let mut pts = Vec::with_capacity(oh * ow);
        for i in 0..oh {
            for j in 0..ow {
                let y = (i as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
                let x = (j as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
                pts.push((y, x));
            }
        }
        let flat = self.bilinear_sample(feat, &pts)?;
        self.reshape(flat, &[oh, ow, c])
    }

    /// 2x2 stride-2 average pooling of `[H,W,C]`.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 || shape[0] % 2 != 0 || shape[1] % 2 != 0 {
            return Err(shape_err("avg_pool2", format!("expects [H,W,C] with even H, W; got {shape:?}")));
        }
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let (oh, ow) = (h / 2, w / 2);
        let src = self.data(a);
        let mut out = vec![0.0; oh * ow * c];
        for i in 0..oh {
            for j in 0..ow {
                let dst = &mut out[(i * ow + j) * c..(i * ow + j + 1) * c];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let off = ((2 * i + dy) * w + 2 * j + dx) * c;
                    for (d, s) in dst.iter_mut().zip(&src[off..off + c]) {
                        *d += 0.25 * s;
                    }
                }
            }
        }
        self.emit(vec![oh, ow, c], out, &[a], Op::AvgPool2 { a, w, c })
    }

    /// Nearest-neighbour 2x upsampling of `[H,W,C]`.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 {
            return Err(shape_err("upsample2", format!("expects [H,W,C], got {shape:?}")));
        }
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let src = self.data(a);
        let mut out = vec![0.0; 4 * h * w * c];
        for i in 0..2 * h {
            for j in 0..2 * w {
                let s = ((i / 2) * w + j / 2) * c;
                let d = (i * 2 * w + j) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
        self.emit(vec![2 * h, 2 * w, c], out, &[a], Op::Upsample2 { a, h, w, c })
    }

    // ---------------------------------------------------------------- reductions & losses

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.emit(vec![], vec![s], &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.data(a).iter().sum::<f64>() / n;
        self.emit(vec![], vec![s], &[a], Op::Mean(a))
    }

    /// Elementwise smooth-L1 (Huber with transition `beta`) against a constant target.
    pub fn smooth_l1(&mut self, a: Var, target: &[f64], beta: f64) -> Result<Var> {
        if target.len() != self.value(a).numel() {
            return Err(shape_err(
                "smooth_l1",
                format!("target has {} entries for input {:?}", target.len(), self.shape(a)),
            ));
        }
        if beta <= 0.0 {
            return Err(Error::contract("smooth_l1", "beta must be positive"));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(target)
            .map(|(&x, &t)| {
                let d = (x - t).abs();
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .collect();
        let shape = self.shape(a).to_vec();
        let target = target.to_vec();
        self.emit(shape, out, &[a], Op::SmoothL1 { a, target, beta })
    }

    /// Mean over rows of label-smoothed cross-entropy, `logits` `[V]` or `[R,V]`.
    ///
    /// The smoothed target puts `1 - eps + eps/V` on the label and `eps/V`
    /// elsewhere.
    pub fn cross_entropy_smoothed(&mut self, logits: Var, targets: &[usize], eps: f64) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let v = last_dim(&shape);
        let rows = self.value(logits).numel() / v;
        if shape.is_empty() || shape.len() > 2 || v < 2 {
            return Err(shape_err("cross_entropy", format!("logits must be [V] or [R,V] with V >= 2, got {shape:?}")));
        }
        if targets.len() != rows {
            return Err(shape_err("cross_entropy", format!("{} targets for {rows} rows", targets.len())));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::contract("cross_entropy", format!("smoothing {eps} outside [0, 1)")));
        }
        let z = self.data(logits);
        let mut total = 0.0;
        let mut dlogits = vec![0.0; z.len()];
        let off = eps / v as f64;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index { op: "cross_entropy", index: t, len: v });
            }
            let row = &z[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            let mut qz = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let q = if j == t { 1.0 - eps + off } else { off };
                qz += q * x;
                dlogits[r * v + j] = ((x - lse).exp() - q) / rows as f64;
            }
            total += lse - qz;
        }
        let loss = total / rows as f64;
        self.emit(vec![], vec![loss], &[logits], Op::CrossEntropy { logits, dlogits })
    }

    /// Mean binary cross-entropy on logits against targets in `[0,1]`, with
    /// optional per-element weights (the mean divides by the element count).
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], weights: Option<&[f64]>) -> Result<Var> {
        let n = self.value(logits).numel();
        if targets.len() != n || weights.is_some_and(|w| w.len() != n) {
            return Err(shape_err("bce_with_logits", format!("target/weight length mismatch for {n} logits")));
        }
        let z = self.data(logits);
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; n];
        for i in 0..n {
            let w = weights.map_or(1.0, |w| w[i]);
            loss += w * (softplus(z[i]) - targets[i] * z[i]);
            dlogits[i] = w * (sigmoid(z[i]) - targets[i]) / n as f64;
        }
        self.emit(vec![], vec![loss / n as f64], &[logits], Op::BceWithLogits { logits, dlogits })
    }

    /// Penalty-reduced focal loss summed over all elements.
    ///
    /// Cells with `heat == 1` are positives: `-(1-p)^alpha log p`; others
    /// contribute `-(1-heat)^beta p^alpha log(1-p)`.
    pub fn focal_loss(&mut self, logits: Var, heat: &[f64], alpha: f64, beta: f64) -> Result<Var> {
        let n = self.value(logits).numel();
        if heat.len() != n {
            return Err(shape_err("focal_loss", format!("{} heat values for {n} logits", heat.len())));
        }
        let z = self.data(logits);
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; n];
        for i in 0..n {
            let p = sigmoid(z[i]);
            if heat[i] == 1.0 {
                let logp = -softplus(-z[i]);
                let q = 1.0 - p;
                loss -= q.powf(alpha) * logp;
                dlogits[i] = alpha * p * q.powf(alpha) * logp - q.powf(alpha + 1.0);
            } else {
                let log1mp = -softplus(z[i]);
                let wneg = (1.0 - heat[i]).powf(beta);
                loss -= wneg * p.powf(alpha) * log1mp;
                dlogits[i] = wneg * (p.powf(alpha + 1.0) - alpha * p.powf(alpha) * (1.0 - p) * log1mp);
            }
        }
        self.emit(vec![], vec![loss], &[logits], Op::Focal { logits, dlogits })
    }

    // ---------------------------------------------------------------- reverse pass

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every leaf with `requires_grad` gets its gradient slot filled; the op
    /// record is cleared afterwards (values stay readable).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.visits.clear();
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.value.requires_grad || matches!(node.op, Op::Constant) {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.visits.push(Var(idx));
            self.adjoint(idx, &g, &mut grads);
        }

        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut self.nodes[idx];
                if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                    node.value.grad = Some(g);
                }
            }
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.op = Op::Constant;
            }
        }
        Ok(())
    }

    /// Primitives visited by the last [`Tape::backward`], in visit order.
    pub fn visit_log(&self) -> &[Var] {
        &self.visits
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn adjoint(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b, b_t, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = dC · B^T  (or dC · B when B is stored transposed)
                    gemm(m, n, k, g, false, self.data(*b), !*b_t, ga, true);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if *b_t {
                        gemm(n, m, k, g, true, self.data(*a), false, gb, true);
                    } else {
                        gemm(k, m, n, self.data(*a), true, g, false, gb, true);
                    }
                }
            }
            Op::BatchMatMul { a, b, b_t, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(ga) = self.acc(grads, *a) {
                    let db = self.data(*b);
                    for i in 0..*batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &db[i * k * n..(i + 1) * k * n],
                            !*b_t,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let da = self.data(*a);
                    for i in 0..*batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &da[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if *b_t {
                            gemm(n, m, k, gi, true, ai, false, out, true);
                        } else {
                            gemm(k, m, n, ai, true, gi, false, out, true);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d);
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * db[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * da[i];
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let n = gb.len();
                    for (i, d) in g.iter().enumerate() {
                        gb[i % n] += d;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += s * d);
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let n = last_dim(node.value.shape());
                    for r in 0..y.len() / n {
                        let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            ga[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = last_dim(node.value.shape());
                let rows = rstd.len();
                let gm = self.data(*gamma);
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..rows {
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for j in 0..d {
                            let gg = g[r * d + j] * gm[j];
                            mean_g += gg;
                            mean_gx += gg * xhat[r * d + j];
                        }
                        mean_g /= d as f64;
                        mean_gx /= d as f64;
                        for j in 0..d {
                            let gg = g[r * d + j] * gm[j];
                            gx[r * d + j] += rstd[r] * (gg - mean_g - xhat[r * d + j] * mean_gx);
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (i, (&dy, &h)) in g.iter().zip(xhat).enumerate() {
                        gg[i % d] += dy * h;
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for (i, &dy) in g.iter().enumerate() {
                        gb[i % d] += dy;
                    }
                }
            }
            Op::Gelu(a) => {
                let da = self.data(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_grad(da[i]);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * y[i];
                    }
                }
            }
            Op::Log(a) => {
                let da = self.data(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] / da[i];
                    }
                }
            }
            Op::Map { a, df } => {
                let da = self.data(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * df(da[i]);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.value.shape()[1];
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Concat { parts, outer, widths } => {
                let row: usize = widths.iter().sum();
                let mut col = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if let Some(gp) = self.acc(grads, p) {
                        for o in 0..*outer {
                            for j in 0..w {
                                gp[o * w + j] += g[o * row + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::Gather { a, index } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (&i, &d) in index.iter().zip(g) {
                        if i != ZERO_INDEX {
                            ga[i] += d;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
            }
            Op::Transpose { a, batch, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                if let Some(ga) = self.acc(grads, *a) {
                    for b in 0..*batch {
                        let o = b * rows * cols;
                        for r in 0..rows {
                            for c in 0..cols {
                                ga[o + r * cols + c] += g[o + c * rows + r];
                            }
                        }
                    }
                }
            }
            Op::Bilinear { feat, taps, channels } => {
                let c = *channels;
                if let Some(gf) = self.acc(grads, *feat) {
                    for (p, tap) in taps.iter().enumerate() {
                        let gp = &g[p * c..(p + 1) * c];
                        for &(off, wt) in tap {
                            if wt != 0.0 {
                                for (dst, d) in gf[off..off + c].iter_mut().zip(gp) {
                                    *dst += wt * d;
                                }
                            }
                        }
                    }
                }
            }
            Op::AvgPool2 { a, w, c } => {
                let (w, c) = (*w, *c);
                let (oh, ow) = (node.value.shape()[0], node.value.shape()[1]);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..oh {
                        for j in 0..ow {
                            let src = &g[(i * ow + j) * c..(i * ow + j + 1) * c];
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let off = ((2 * i + dy) * w + 2 * j + dx) * c;
                                for (dst, d) in ga[off..off + c].iter_mut().zip(src) {
                                    *dst += 0.25 * d;
                                }
                            }
                        }
                    }
                }
            }
            Op::Upsample2 { a, h, w, c } => {
                let (h, w, c) = (*h, *w, *c);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            let s = ((i / 2) * w + j / 2) * c;
                            let d = (i * 2 * w + j) * c;
                            for k in 0..c {
                                ga[s + k] += g[d + k];
                            }
                        }
                    }
                }
            }
            Op::SmoothL1 { a, target, beta } => {
                let da = self.data(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        let d = da[i] - target[i];
                        let slope = if d.abs() < *beta { d / beta } else { d.signum() };
                        ga[i] += g[i] * slope;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::CrossEntropy { logits, dlogits }
            | Op::BceWithLogits { logits, dlogits }
            | Op::Focal { logits, dlogits } => {
                if let Some(gl) = self.acc(grads, *logits) {
                    gl.iter_mut().zip(dlogits).for_each(|(x, d)| *x += g[0] * d);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(t: &mut Tape, shape: &[usize], data: Vec<f64>) -> Var {
        t.leaf(Tensor::new(shape, data).unwrap().with_requires_grad(true)).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let eye = t
            .constant(Tensor::new(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap())
            .unwrap();
        let a_data: Vec<f64> = (0..9).map(|i| i as f64 * 1.5 - 2.0).collect();
        let a = t.constant(Tensor::new(&[3, 3], a_data.clone()).unwrap()).unwrap();
        let c = t.matmul(eye, a).unwrap();
        assert_eq!(t.data(c), a_data.as_slice());
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = t.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[4])).unwrap();
        let s = t.softmax(x).unwrap();
        assert_eq!(t.data(s), &[0.25; 4]);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[3], vec![1000.0, 999.0, -1000.0]).unwrap()).unwrap();
        let s = t.softmax(x).unwrap();
        let sum: f64 = t.data(s).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_at_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1])).unwrap();
        let y = t.gelu(x).unwrap();
        assert_eq!(t.data(y), &[0.0]);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut t = Tape::new();
        let err = t.leaf(Tensor::new(&[2], vec![1.0, f64::NAN]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }

    #[test]
    fn overflow_is_an_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[1], vec![800.0]).unwrap()).unwrap();
        assert!(matches!(t.exp(x), Err(Error::Numeric { .. })));
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[3], vec![1.0, -2.0, 0.5]);
        let sq = t.mul(x, x).unwrap();
        let l = t.sum(sq).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_cross_entropy_is_p_minus_onehot() {
        let mut t = Tape::new();
        let z = leaf(&mut t, &[3], vec![0.3, -1.0, 2.0]);
        let l = t.cross_entropy_smoothed(z, &[1], 0.0).unwrap();
        t.backward(l).unwrap();
        let zs = [0.3f64, -1.0, 2.0];
        let s: f64 = zs.iter().map(|v| v.exp()).sum();
        for (j, g) in t.grad(z).unwrap().iter().enumerate() {
            let p = zs[j].exp() / s;
            let want = p - if j == 1 { 1.0 } else { 0.0 };
            assert!((g - want).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], vec![1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(Error::Contract { .. })));
    }

    #[test]
    fn backward_visits_each_primitive_once_in_reverse() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], vec![1.0, 2.0]);
        let a = t.scale(x, 2.0).unwrap();
        let b = t.mul(a, x).unwrap();
        let c = t.add(b, a).unwrap();
        let l = t.sum(c).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.visit_log(), &[l, c, b, a]);
        // the record is cleared: a second sweep visits nothing
        t.backward(l).unwrap();
        assert!(t.visit_log().is_empty());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::new(&[4], vec![0.0; 4]).unwrap()).unwrap();
        let l = t.cross_entropy_smoothed(z, &[2], 0.0).unwrap();
        assert!((t.data(l)[0] - 4f64.ln()).abs() < 1e-12);

        let z = t.constant(Tensor::new(&[2], vec![0.7f64.ln(), 0.3f64.ln()]).unwrap()).unwrap();
        let l = t.cross_entropy_smoothed(z, &[0], 0.1).unwrap();
        let want = -0.95 * 0.7f64.ln() - 0.05 * 0.3f64.ln();
        assert!((t.data(l)[0] - want).abs() < 1e-12);
        assert!((want - 0.39904).abs() < 1e-5);

        let z = t.constant(Tensor::new(&[3], vec![60.0, 0.0, 0.0]).unwrap()).unwrap();
        let l = t.cross_entropy_smoothed(z, &[0], 0.0).unwrap();
        assert!(t.data(l)[0] < 1e-20);

        assert!(matches!(
            t.cross_entropy_smoothed(z, &[3], 0.0),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn masked_softmax_zeroes_disallowed() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[2, 2], vec![5.0, 1.0, 2.0, 3.0]).unwrap()).unwrap();
        let s = t.softmax_masked(x, &[true, false, true, true]).unwrap();
        assert_eq!(t.data(s)[0], 1.0);
        assert_eq!(t.data(s)[1], 0.0);
        assert!(t.softmax_masked(x, &[false, false, true, true]).is_err());
    }

    #[test]
    fn transpose_round_trip_is_exact() {
        let mut t = Tape::new();
        let d: Vec<f64> = (0..24).map(|i| i as f64 / 7.0).collect();
        let x = t.constant(Tensor::new(&[2, 3, 4], d.clone()).unwrap()).unwrap();
        let y = t.transpose(x).unwrap();
        assert_eq!(t.shape(y), &[2, 4, 3]);
        let z = t.transpose(y).unwrap();
        assert_eq!(t.data(z), d.as_slice());
        let r = t.reshape(z, &[6, 4]).unwrap();
        let r = t.reshape(r, &[2, 3, 4]).unwrap();
        assert_eq!(t.data(r), d.as_slice());
    }

    #[test]
    fn bilinear_sample_at_cell_centres_reads_cells() {
        let mut t = Tape::new();
        let f = t.constant(Tensor::from_fn(&[2, 3, 2], |i| i as f64)).unwrap();
        let s = t.bilinear_sample(f, &[(1.0, 2.0), (0.5, 0.0)]).unwrap();
        assert_eq!(&t.data(s)[..2], &[10.0, 11.0]);
        assert_eq!(&t.data(s)[2..], &[3.0, 4.0]);
    }

    #[test]
    fn pooling_and_upsampling_shapes() {
        let mut t = Tape::new();
        let f = t.constant(Tensor::from_fn(&[4, 4, 3], |i| i as f64)).unwrap();
        let p = t.avg_pool2(f).unwrap();
        assert_eq!(t.shape(p), &[2, 2, 3]);
        let u = t.upsample2(p).unwrap();
        assert_eq!(t.shape(u), &[4, 4, 3]);
        let odd = t.constant(Tensor::zeros(&[3, 4, 1])).unwrap();
        assert!(t.avg_pool2(odd).is_err());
    }

    #[test]
    fn focal_loss_matches_definition() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::new(&[2], vec![0.4, -0.3]).unwrap()).unwrap();
        let l = t.focal_loss(z, &[1.0, 0.5], 2.0, 4.0).unwrap();
        let p0 = 1.0 / (1.0 + (-0.4f64).exp());
        let p1 = 1.0 / (1.0 + 0.3f64.exp());
        let want = -(1.0 - p0).powi(2) * p0.ln() - 0.5f64.powi(4) * p1 * p1 * (1.0 - p1).ln();
        assert!((t.data(l)[0] - want).abs() < 1e-12);
    }
}
