//! Reverse-mode autodiff on a linear tape.
//!
//! Every forward pass records its operations into a fresh `Tape`; the tape is
//! already topologically ordered, so `backward` is a single reverse sweep.
//! Values are `f64`; in `Precision::F32` mode every stored value (forward and
//! gradient) is rounded through `f32`.

use crate::error::{Error, Result};
use crate::tensor::{l2_norm, Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    AddRow { a: TensorId, row: TensorId },
    AddScalar { a: TensorId },
    Scale { a: TensorId, factor: f64 },
    Relu { a: TensorId },
    Gelu { a: TensorId },
    Softmax { a: TensorId, axis: usize },
    LayerNorm { a: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    L2Normalize { a: TensorId, eps: f64 },
    Transpose { a: TensorId },
    ConcatRows { parts: Vec<TensorId> },
    ConcatCols { parts: Vec<TensorId> },
    SliceRows { a: TensorId, lo: usize },
    SliceCols { a: TensorId, lo: usize },
    SumAll { a: TensorId },
    MeanAll { a: TensorId },
}

#[derive(Debug)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    /// Per-sweep gradient workspace; rebuilt by each `backward` call.
    scratch: Vec<Option<Vec<f64>>>,
}

// ── dense kernels ────────────────────────────────────────────────────

/// C[m,n] += A[m,k] · B[k,n]
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)).take(m) {
        for (&av, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Fixed-order dot product, 4-way unrolled.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// C[m,k] += A[m,n] · B[k,n]ᵀ
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for (a_row, out_row) in a.chunks_exact(n).zip(out.chunks_exact_mut(k)).take(m) {
        for (o, b_row) in out_row.iter_mut().zip(b.chunks_exact(n)) {
            *o += dot(a_row, b_row);
        }
    }
}

/// C[k,n] += A[m,k]ᵀ · B[m,n]
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for (a_row, b_row) in a.chunks_exact(k).zip(b.chunks_exact(n)).take(m) {
        for (&av, out_row) in a_row.iter().zip(out.chunks_exact_mut(n)) {
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn gelu_forward(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: Vec::with_capacity(256),
            precision,
            scratch: Vec::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn to_tensor(&self, id: TensorId) -> Tensor {
        let node = &self.nodes[id.0];
        let mut t = Tensor::new(node.shape.clone(), node.data.clone()).expect("tape node is valid");
        t.grad = node.grad.clone();
        t.requires_grad = node.requires_grad;
        t
    }

    fn push(&mut self, mut data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        self.precision.quantize_slice(&mut data);
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            requires_grad,
            op,
        });
        id
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[id.0].shape;
        match s.len() {
            1 => Ok((1, s[0])),
            2 => Ok((s[0], s[1])),
            _ => Err(Error::DimensionMismatch {
                op,
                lhs: s.clone(),
                rhs: vec![],
            }),
        }
    }

    // ── leaves ───────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(t.data().to_vec(), t.shape().to_vec(), t.requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n, &mut out);
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, vec![m, n], rg, Op::Matmul { a, b }))
    }

    fn zip_same_shape(
        &mut self,
        a: TensorId,
        b: TensorId,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::DimensionMismatch {
                op: op_name,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(&[a, b]);
        Ok(self.push(data, shape, rg, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_same_shape(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_same_shape(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_same_shape(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    /// Matrix plus broadcast row vector (the only broadcast besides scalars).
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId> {
        let (_, c) = self.dims2(a, "add_row")?;
        let (r_rows, r_cols) = self.dims2(row, "add_row")?;
        if r_rows != 1 || r_cols != c {
            return Err(Error::DimensionMismatch {
                op: "add_row",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[row.0].shape.clone(),
            });
        }
        let row_data = self.nodes[row.0].data.clone();
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .chunks_exact(c)
            .flat_map(|r| r.iter().zip(&row_data).map(|(&x, &y)| x + y).collect::<Vec<_>>())
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(&[a, row]);
        Ok(self.push(data, shape, rg, Op::AddRow { a, row }))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(&[a]);
        Ok(self.push(data, shape, rg, Op::AddScalar { a }))
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> Result<TensorId> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x * factor).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(&[a]);
        Ok(self.push(data, shape, rg, Op::Scale { a, factor }))
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(&[a]);
        Ok(self.push(data, shape, rg, Op::Relu { a }))
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| gelu_forward(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(&[a]);
        Ok(self.push(data, shape, rg, Op::Gelu { a }))
    }

    /// Max-subtracted softmax along `axis` of a rank-1/2 tensor.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let (rows, cols) = self.dims2(a, "softmax")?;
        if axis > 1 || (self.nodes[a.0].shape.len() == 1 && axis != 0) {
            return Err(Error::Contract(format!("softmax axis {axis} invalid for shape {:?}", self.nodes[a.0].shape)));
        }
        if !self.nodes[a.0].data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("softmax"));
        }
        let axis = if self.nodes[a.0].shape.len() == 1 { 1 } else { axis };
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; src.len()];
        let (outer, span, stride) = if axis == 1 { (rows, cols, 1) } else { (cols, rows, cols) };
        for o in 0..outer {
            let base = if axis == 1 { o * cols } else { o };
            let mut max_v = f64::NEG_INFINITY;
            for i in 0..span {
                max_v = max_v.max(src[base + i * stride]);
            }
            let mut sum = 0.0;
            for i in 0..span {
                let e = (src[base + i * stride] - max_v).exp();
                out[base + i * stride] = e;
                sum += e;
            }
            for i in 0..span {
                out[base + i * stride] /= sum;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(&[a]);
        Ok(self.push(out, shape, rg, Op::Softmax { a, axis }))
    }

    /// Zero-mean/unit-variance per row over the last dimension, then affine.
    pub fn layernorm(&mut self, a: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<TensorId> {
        let (_, d) = self.dims2(a, "layernorm")?;
        for (aff, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.nodes[aff.0].data.len() != d {
                return Err(Error::DimensionMismatch {
                    op: if name == "gamma" { "layernorm gamma" } else { "layernorm beta" },
                    lhs: self.nodes[a.0].shape.clone(),
                    rhs: self.nodes[aff.0].shape.clone(),
                });
            }
        }
        let g = self.nodes[gamma.0].data.clone();
        let b = self.nodes[beta.0].data.clone();
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; src.len()];
        for (row, out_row) in src.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out_row[j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(&[a, gamma, beta]);
        Ok(self.push(out, shape, rg, Op::LayerNorm { a, gamma, beta, eps }))
    }

    /// Divide each row by max(‖row‖₂, eps).
    pub fn l2_normalize(&mut self, a: TensorId, eps: f64) -> Result<TensorId> {
        let (_, d) = self.dims2(a, "l2_normalize")?;
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; src.len()];
        for (row, out_row) in src.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let denom = l2_norm(row).max(eps);
            for j in 0..d {
                out_row[j] = row[j] / denom;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs(&[a]);
        Ok(self.push(out, shape, rg, Op::L2Normalize { a, eps }))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; src.len()];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(out, vec![c, r], rg, Op::Transpose { a }))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows of zero tensors".into()));
        }
        let (_, c) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(Error::DimensionMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            rows += r;
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let rg = self.needs(parts);
        Ok(self.push(data, vec![rows, c], rg, Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols of zero tensors".into()));
        }
        let (r, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::DimensionMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            widths.push(pc);
            total += pc;
        }
        let mut data = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = &self.nodes[p.0].data;
            for i in 0..r {
                data[i * total + offset..i * total + offset + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let rg = self.needs(parts);
        Ok(self.push(data, vec![r, total], rg, Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn slice_rows(&mut self, a: TensorId, lo: usize, hi: usize) -> Result<TensorId> {
        let (r, c) = self.dims2(a, "slice_rows")?;
        if lo >= hi || hi > r {
            return Err(Error::IndexOutOfRange { op: "slice_rows", lo, hi, extent: r });
        }
        let data = self.nodes[a.0].data[lo * c..hi * c].to_vec();
        let rg = self.needs(&[a]);
        Ok(self.push(data, vec![hi - lo, c], rg, Op::SliceRows { a, lo }))
    }

    pub fn slice_cols(&mut self, a: TensorId, lo: usize, hi: usize) -> Result<TensorId> {
        let (r, c) = self.dims2(a, "slice_cols")?;
        if lo >= hi || hi > c {
            return Err(Error::IndexOutOfRange { op: "slice_cols", lo, hi, extent: c });
        }
        let src = &self.nodes[a.0].data;
        let w = hi - lo;
        let mut data = vec![0.0; r * w];
        for i in 0..r {
            data[i * w..(i + 1) * w].copy_from_slice(&src[i * c + lo..i * c + hi]);
        }
        let rg = self.needs(&[a]);
        Ok(self.push(data, vec![r, w], rg, Op::SliceCols { a, lo }))
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.needs(&[a]);
        Ok(self.push(vec![s], vec![1], rg, Op::SumAll { a }))
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.needs(&[a]);
        Ok(self.push(vec![s / n], vec![1], rg, Op::MeanAll { a }))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Add this sweep's contribution to a node's persistent gradient.
    fn persist_grad(&mut self, idx: usize, src: &[f64]) {
        let prec = self.precision;
        let node = &mut self.nodes[idx];
        let grad = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
        match prec {
            Precision::F64 => {
                for (g, &s) in grad.iter_mut().zip(src) {
                    *g += s;
                }
            }
            Precision::F32 => {
                for (g, &s) in grad.iter_mut().zip(src) {
                    *g = (*g + s) as f32 as f64;
                }
            }
        }
    }

    /// Accumulate into the per-sweep scratch buffer of `id`.
    fn accumulate(&mut self, id: TensorId, src: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let prec = self.precision;
        let numel = self.nodes[id.0].data.len();
        let slot = self.scratch[id.0].get_or_insert_with(|| vec![0.0; numel]);
        match prec {
            Precision::F64 => {
                for (g, &s) in slot.iter_mut().zip(src) {
                    *g += s;
                }
            }
            Precision::F32 => {
                for (g, &s) in slot.iter_mut().zip(src) {
                    *g = (*g + s) as f32 as f64;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Reverse sweep from a scalar loss. Repeated calls accumulate into the
    /// persistent per-node gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Contract(
                "loss is not connected to any gradient-tracked tensor".into(),
            ));
        }
        self.scratch = vec![None; loss.0 + 1];
        self.scratch[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.scratch[i].take() else { continue };
            self.persist_grad(i, &grad);
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}

                Op::Matmul { a, b } => {
                    let (m, k) = self.dims2(a, "matmul")?;
                    let n = self.nodes[i].shape[1];
                    if self.nodes[a.0].requires_grad {
                        let mut da = vec![0.0; m * k];
                        matmul_nt(&grad, &self.nodes[b.0].data, m, n, k, &mut da);
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let mut db = vec![0.0; k * n];
                        matmul_tn(&self.nodes[a.0].data, &grad, m, k, n, &mut db);
                        self.accumulate(b, &db);
                    }
                }

                Op::Add { a, b } => {
                    self.accumulate(a, &grad);
                    self.accumulate(b, &grad);
                }

                Op::Sub { a, b } => {
                    self.accumulate(a, &grad);
                    if self.nodes[b.0].requires_grad {
                        let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                        self.accumulate(b, &neg);
                    }
                }

                Op::Mul { a, b } => {
                    if self.nodes[a.0].requires_grad {
                        let da: Vec<f64> = grad.iter().zip(&self.nodes[b.0].data).map(|(g, &y)| g * y).collect();
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db: Vec<f64> = grad.iter().zip(&self.nodes[a.0].data).map(|(g, &x)| g * x).collect();
                        self.accumulate(b, &db);
                    }
                }

                Op::AddRow { a, row } => {
                    self.accumulate(a, &grad);
                    if self.nodes[row.0].requires_grad {
                        let c = self.nodes[row.0].data.len();
                        let mut drow = vec![0.0; c];
                        for r in grad.chunks_exact(c) {
                            for (d, &g) in drow.iter_mut().zip(r) {
                                *d += g;
                            }
                        }
                        self.accumulate(row, &drow);
                    }
                }

                Op::AddScalar { a } => self.accumulate(a, &grad),

                Op::Scale { a, factor } => {
                    let da: Vec<f64> = grad.iter().map(|g| g * factor).collect();
                    self.accumulate(a, &da);
                }

                Op::Relu { a } => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(a, &da);
                }

                Op::Gelu { a } => {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(g, &x)| g * gelu_derivative(x))
                        .collect();
                    self.accumulate(a, &da);
                }

                Op::Softmax { a, axis } => {
                    let out = &self.nodes[i].data;
                    let (rows, cols) = self.dims2(i_id(i), "softmax")?;
                    let (outer, span, stride) = if axis == 1 { (rows, cols, 1) } else { (cols, rows, cols) };
                    let mut da = vec![0.0; out.len()];
                    for o in 0..outer {
                        let base = if axis == 1 { o * cols } else { o };
                        let mut dot_gs = 0.0;
                        for s in 0..span {
                            let idx = base + s * stride;
                            dot_gs += grad[idx] * out[idx];
                        }
                        for s in 0..span {
                            let idx = base + s * stride;
                            da[idx] = out[idx] * (grad[idx] - dot_gs);
                        }
                    }
                    self.accumulate(a, &da);
                }

                Op::LayerNorm { a, gamma, beta, eps } => {
                    let d = *self.nodes[a.0].shape.last().expect("layernorm input has a last dim");
                    let x = self.nodes[a.0].data.clone();
                    let g_aff = self.nodes[gamma.0].data.clone();
                    let num_rows = x.len() / d;
                    let mut dx = vec![0.0; x.len()];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for r in 0..num_rows {
                        let row = &x[r * d..(r + 1) * d];
                        let grow = &grad[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                        let mut dxhat = vec![0.0; d];
                        for j in 0..d {
                            dgamma[j] += grow[j] * xhat[j];
                            dbeta[j] += grow[j];
                            dxhat[j] = grow[j] * g_aff[j];
                        }
                        let sum_dxhat: f64 = dxhat.iter().sum();
                        let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                        let df = d as f64;
                        for j in 0..d {
                            dx[r * d + j] = inv_std / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                        }
                    }
                    self.accumulate(a, &dx);
                    self.accumulate(gamma, &dgamma);
                    self.accumulate(beta, &dbeta);
                }

                Op::L2Normalize { a, eps } => {
                    let d = *self.nodes[a.0].shape.last().expect("l2_normalize input has a last dim");
                    let x = &self.nodes[a.0].data;
                    let y = &self.nodes[i].data;
                    let mut dx = vec![0.0; x.len()];
                    for r in 0..x.len() / d {
                        let row = &x[r * d..(r + 1) * d];
                        let yrow = &y[r * d..(r + 1) * d];
                        let grow = &grad[r * d..(r + 1) * d];
                        let norm = l2_norm(row);
                        if norm > eps {
                            let gy: f64 = grow.iter().zip(yrow).map(|(g, &v)| g * v).sum();
                            for j in 0..d {
                                dx[r * d + j] = (grow[j] - yrow[j] * gy) / norm;
                            }
                        } else {
                            for j in 0..d {
                                dx[r * d + j] = grow[j] / eps;
                            }
                        }
                    }
                    self.accumulate(a, &dx);
                }

                Op::Transpose { a } => {
                    let (r, c) = {
                        let s = &self.nodes[i].shape;
                        (s[0], s[1])
                    };
                    let mut da = vec![0.0; grad.len()];
                    for x in 0..r {
                        for y in 0..c {
                            da[y * r + x] = grad[x * c + y];
                        }
                    }
                    self.accumulate(a, &da);
                }

                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p.0].data.len();
                        let slice = grad[offset..offset + n].to_vec();
                        self.accumulate(p, &slice);
                        offset += n;
                    }
                }

                Op::ConcatCols { parts } => {
                    let total = self.nodes[i].shape[1];
                    let rows = self.nodes[i].shape[0];
                    let mut offset = 0;
                    for p in parts {
                        let w = self.nodes[p.0].shape[self.nodes[p.0].shape.len() - 1];
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w].copy_from_slice(&grad[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(p, &dp);
                        offset += w;
                    }
                }

                Op::SliceRows { a, lo } => {
                    let (_, c) = self.dims2(a, "slice_rows")?;
                    let mut da = vec![0.0; self.nodes[a.0].data.len()];
                    da[lo * c..lo * c + grad.len()].copy_from_slice(&grad);
                    self.accumulate(a, &da);
                }

                Op::SliceCols { a, lo } => {
                    let (r, c) = self.dims2(a, "slice_cols")?;
                    let w = self.nodes[i].shape[1];
                    let mut da = vec![0.0; r * c];
                    for x in 0..r {
                        da[x * c + lo..x * c + lo + w].copy_from_slice(&grad[x * w..(x + 1) * w]);
                    }
                    self.accumulate(a, &da);
                }

                Op::SumAll { a } => {
                    let da = vec![grad[0]; self.nodes[a.0].data.len()];
                    self.accumulate(a, &da);
                }

                Op::MeanAll { a } => {
                    let n = self.nodes[a.0].data.len();
                    let da = vec![grad[0] / n as f64; n];
                    self.accumulate(a, &da);
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn i_id(i: usize) -> TensorId {
    TensorId(i)
}
