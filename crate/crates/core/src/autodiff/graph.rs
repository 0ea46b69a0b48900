//! Dynamic tape: forward primitives record themselves, backward replays in
//! reverse order.

use ndarray::linalg::general_mat_mul;
use ndarray::ArrayView2;
use ndarray::ArrayViewMut2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::collections::HashMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use super::{AdError, Result};

pub type NodeId = usize;

/// Gradients keyed by parameter identifier. BTreeMap keeps iteration order
/// deterministic.
pub type GradMap = BTreeMap<String, Tensor>;

/// Forward behaviour of stochastic ops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphMode {
    /// Dropout active, masks drawn from the seeded stream.
    Train { dropout_seed: u64 },
    /// Dropout is the identity.
    Eval,
}

/// An op whose backward rule lives outside the engine (e.g. CTC).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    /// Accumulate input adjoints. `d_inputs[i]` is pre-zeroed with the shape
    /// of input `i`.
    fn backward(
        &self,
        inputs: &[(&[usize], &[f64])],
        out_data: &[f64],
        d_out: &[f64],
        d_inputs: &mut [Vec<f64>],
    );
}

enum Op {
    Matmul { a: NodeId, b: NodeId, out: NodeId },
    MatmulNT { a: NodeId, b: NodeId, out: NodeId },
    Add { a: NodeId, b: NodeId, out: NodeId },
    Sub { a: NodeId, b: NodeId, out: NodeId },
    Mul { a: NodeId, b: NodeId, out: NodeId },
    Scale { x: NodeId, c: f64, out: NodeId },
    AddRow { m: NodeId, v: NodeId, out: NodeId },
    MulRow { m: NodeId, v: NodeId, out: NodeId },
    Sigmoid { x: NodeId, out: NodeId },
    Relu { x: NodeId, out: NodeId },
    Swish { x: NodeId, out: NodeId },
    Exp { x: NodeId, out: NodeId },
    ClampMin { x: NodeId, lo: f64, out: NodeId },
    Softmax { x: NodeId, out: NodeId },
    LogSoftmax { x: NodeId, out: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64, out: NodeId },
    Conv2d { x: NodeId, kernel: NodeId, bias: NodeId, stride: usize, out: NodeId },
    DepthwiseConv1d { x: NodeId, kernel: NodeId, bias: NodeId, out: NodeId },
    Dropout { x: NodeId, mask: Vec<f64>, out: NodeId },
    Gather { table: NodeId, indices: Vec<usize>, out: NodeId },
    ConcatCols { xs: Vec<NodeId>, out: NodeId },
    ConcatRows { xs: Vec<NodeId>, out: NodeId },
    SliceCols { x: NodeId, from: usize, to: usize, out: NodeId },
    SliceRows { x: NodeId, from: usize, out: NodeId },
    Reshape { x: NodeId, out: NodeId },
    Transpose { x: NodeId, out: NodeId },
    SumAll { x: NodeId, out: NodeId },
    MeanAll { x: NodeId, out: NodeId },
    Custom { inputs: Vec<NodeId>, op: Box<dyn CustomOp>, out: NodeId },
}

/// A dynamic tape. Build one per forward pass.
pub struct Graph {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
    /// node -> bound parameter identifier
    bindings: Vec<Option<String>>,
    param_nodes: HashMap<String, NodeId>,
    rng: Option<ChaCha8Rng>,
    consumed: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// out = alpha * a(m,k) @ b(k,n) + beta * out
fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64], accumulate: bool) {
    let a = ArrayView2::from_shape((m, k), a).expect("gemm lhs shape");
    let b = ArrayView2::from_shape((k, n), b).expect("gemm rhs shape");
    let mut c = ArrayViewMut2::from_shape((m, n), out).expect("gemm out shape");
    general_mat_mul(1.0, &a, &b, if accumulate { 1.0 } else { 0.0 }, &mut c);
}

// out = a(m,k) @ b(n,k)^T
fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64], accumulate: bool) {
    let a = ArrayView2::from_shape((m, k), a).expect("gemm_nt lhs shape");
    let b = ArrayView2::from_shape((n, k), b).expect("gemm_nt rhs shape");
    let bt = b.t();
    let mut c = ArrayViewMut2::from_shape((m, n), out).expect("gemm_nt out shape");
    general_mat_mul(1.0, &a, &bt, if accumulate { 1.0 } else { 0.0 }, &mut c);
}

// out = a(k,m)^T @ b(k,n)
fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64], accumulate: bool) {
    let a = ArrayView2::from_shape((k, m), a).expect("gemm_tn lhs shape");
    let at = a.t();
    let b = ArrayView2::from_shape((k, n), b).expect("gemm_tn rhs shape");
    let mut c = ArrayViewMut2::from_shape((m, n), out).expect("gemm_tn out shape");
    general_mat_mul(1.0, &at, &b, if accumulate { 1.0 } else { 0.0 }, &mut c);
}

fn conv2d_dims(x: &[usize], k: &[usize], stride: usize) -> Result<(usize, usize, usize, usize, usize)> {
    if x.len() != 3 || k.len() != 4 {
        return Err(AdError::ShapeMismatch { op: "conv2d", lhs: x.to_vec(), rhs: k.to_vec() });
    }
    let (cin, h, w) = (x[0], x[1], x[2]);
    let (cout, kcin, kh, kw) = (k[0], k[1], k[2], k[3]);
    if kcin != cin || h < kh || w < kw || stride == 0 {
        return Err(AdError::ShapeMismatch { op: "conv2d", lhs: x.to_vec(), rhs: k.to_vec() });
    }
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    Ok((cin, cout, oh, ow, kh * kw))
}

fn im2col(x: &[f64], cin: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ckk = cin * kh * kw;
    let mut col = vec![0.0; oh * ow * ckk];
    for oi in 0..oh {
        for oj in 0..ow {
            let row = (oi * ow + oj) * ckk;
            for c in 0..cin {
                for u in 0..kh {
                    let src = c * h * w + (oi * stride + u) * w + oj * stride;
                    let dst = row + (c * kh + u) * kw;
                    col[dst..dst + kw].copy_from_slice(&x[src..src + kw]);
                }
            }
        }
    }
    col
}

impl Graph {
    pub fn new(mode: GraphMode) -> Self {
        let rng = match mode {
            GraphMode::Train { dropout_seed } => Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
            GraphMode::Eval => None,
        };
        Graph { nodes: Vec::new(), ops: Vec::new(), bindings: Vec::new(), param_nodes: HashMap::new(), rng, consumed: false }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id]
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id].item()
    }

    fn push(&mut self, t: Tensor) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(t);
        self.bindings.push(None);
        id
    }

    fn push_checked(&mut self, op: &'static str, t: Tensor) -> Result<NodeId> {
        if !t.all_finite() {
            return Err(AdError::NonFinite { op });
        }
        Ok(self.push(t))
    }

    /// A leaf with no gradient flow of its own (gradients still accumulate,
    /// but are discarded unless the node is bound to a parameter).
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.push(Tensor::scalar(v))
    }

    /// Leaf holding the current value of a parameter. Repeated calls for the
    /// same identifier return the same node.
    pub fn param(&mut self, store: &ParamStore, id: &str) -> Result<NodeId> {
        if let Some(&n) = self.param_nodes.get(id) {
            return Ok(n);
        }
        let p = store.get(id).ok_or_else(|| AdError::UnknownParam(id.to_string()))?;
        let n = self.push(p.value.clone());
        self.bindings[n] = Some(id.to_string());
        self.param_nodes.insert(id.to_string(), n);
        Ok(n)
    }

    fn want_matrix(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        let t = &self.nodes[id];
        match t.shape().len() {
            1 => Ok((1, t.shape()[0])),
            2 => Ok((t.shape()[0], t.shape()[1])),
            _ => Err(AdError::BadShape { op, shape: t.shape().to_vec(), reason: "expected a 1-D or 2-D tensor".into() }),
        }
    }

    // ── elementwise and broadcast ────────────────────────────────────

    fn binary_same_shape(&mut self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<(NodeId, Tensor)> {
        let (ta, tb) = (&self.nodes[a], &self.nodes[b]);
        if ta.shape() != tb.shape() {
            return Err(AdError::ShapeMismatch { op, lhs: ta.shape().to_vec(), rhs: tb.shape().to_vec() });
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok((0, t))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, t) = self.binary_same_shape("add", a, b, |x, y| x + y)?;
        let out = self.push_checked("add", t)?;
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, t) = self.binary_same_shape("sub", a, b, |x, y| x - y)?;
        let out = self.push_checked("sub", t)?;
        self.ops.push(Op::Sub { a, b, out });
        Ok(out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, t) = self.binary_same_shape("mul", a, b, |x, y| x * y)?;
        let out = self.push_checked("mul", t)?;
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let t = Tensor::new(self.nodes[x].shape().to_vec(), self.nodes[x].data().iter().map(|&v| v * c).collect())?;
        let out = self.push_checked("scale", t)?;
        self.ops.push(Op::Scale { x, c, out });
        Ok(out)
    }

    /// (rows, cols) + (cols,) broadcast over rows.
    pub fn add_row(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.want_matrix("add_row", m)?;
        if self.nodes[v].shape() != [cols] {
            return Err(AdError::ShapeMismatch { op: "add_row", lhs: self.nodes[m].shape().to_vec(), rhs: self.nodes[v].shape().to_vec() });
        }
        let mut data = self.nodes[m].data().to_vec();
        let vv = self.nodes[v].data();
        for r in 0..rows {
            for (d, &b) in data[r * cols..(r + 1) * cols].iter_mut().zip(vv) {
                *d += b;
            }
        }
        let t = Tensor::new(self.nodes[m].shape().to_vec(), data)?;
        let out = self.push_checked("add_row", t)?;
        self.ops.push(Op::AddRow { m, v, out });
        Ok(out)
    }

    /// (rows, cols) ⊙ (cols,) broadcast over rows.
    pub fn mul_row(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.want_matrix("mul_row", m)?;
        if self.nodes[v].shape() != [cols] {
            return Err(AdError::ShapeMismatch { op: "mul_row", lhs: self.nodes[m].shape().to_vec(), rhs: self.nodes[v].shape().to_vec() });
        }
        let mut data = self.nodes[m].data().to_vec();
        let vv = self.nodes[v].data();
        for r in 0..rows {
            for (d, &b) in data[r * cols..(r + 1) * cols].iter_mut().zip(vv) {
                *d *= b;
            }
        }
        let t = Tensor::new(self.nodes[m].shape().to_vec(), data)?;
        let out = self.push_checked("mul_row", t)?;
        self.ops.push(Op::MulRow { m, v, out });
        Ok(out)
    }

    // ── activations ─────────────────────────────────────────────────

    fn unary(&mut self, op: &'static str, x: NodeId, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let t = Tensor::new(self.nodes[x].shape().to_vec(), self.nodes[x].data().iter().map(|&v| f(v)).collect())?;
        self.push_checked(op, t)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.unary("sigmoid", x, sigmoid)?;
        self.ops.push(Op::Sigmoid { x, out });
        Ok(out)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.unary("relu", x, |v| if v > 0.0 { v } else { 0.0 })?;
        self.ops.push(Op::Relu { x, out });
        Ok(out)
    }

    pub fn swish(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.unary("swish", x, |v| v * sigmoid(v))?;
        self.ops.push(Op::Swish { x, out });
        Ok(out)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.unary("exp", x, f64::exp)?;
        self.ops.push(Op::Exp { x, out });
        Ok(out)
    }

    /// max(x, lo). Gradient passes only where x > lo.
    pub fn clamp_min(&mut self, x: NodeId, lo: f64) -> Result<NodeId> {
        let out = self.unary("clamp_min", x, |v| v.max(lo))?;
        self.ops.push(Op::ClampMin { x, lo, out });
        Ok(out)
    }

    // ── row-wise normalizations ─────────────────────────────────────

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.want_matrix("softmax", x)?;
        let mut data = self.nodes[x].data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let t = Tensor::new(self.nodes[x].shape().to_vec(), data)?;
        let out = self.push_checked("softmax", t)?;
        self.ops.push(Op::Softmax { x, out });
        Ok(out)
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.want_matrix("log_softmax", x)?;
        let mut data = self.nodes[x].data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
            let log_z = mx + z.ln();
            for v in row.iter_mut() {
                *v -= log_z;
            }
        }
        let t = Tensor::new(self.nodes[x].shape().to_vec(), data)?;
        let out = self.push_checked("log_softmax", t)?;
        self.ops.push(Op::LogSoftmax { x, out });
        Ok(out)
    }

    /// Row-wise layer normalization with per-column gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (rows, cols) = self.want_matrix("layer_norm", x)?;
        if self.nodes[gain].shape() != [cols] || self.nodes[bias].shape() != [cols] {
            return Err(AdError::ShapeMismatch { op: "layer_norm", lhs: self.nodes[x].shape().to_vec(), rhs: self.nodes[gain].shape().to_vec() });
        }
        let g = self.nodes[gain].data().to_vec();
        let b = self.nodes[bias].data().to_vec();
        let mut data = self.nodes[x].data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.nodes[x].shape().to_vec(), data)?;
        let out = self.push_checked("layer_norm", t)?;
        self.ops.push(Op::LayerNorm { x, gain, bias, eps, out });
        Ok(out)
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.want_matrix("matmul", a)?;
        let (kb, n) = self.want_matrix("matmul", b)?;
        if ka != kb {
            return Err(AdError::ShapeMismatch { op: "matmul", lhs: self.nodes[a].shape().to_vec(), rhs: self.nodes[b].shape().to_vec() });
        }
        let mut data = vec![0.0; m * n];
        gemm(m, ka, n, self.nodes[a].data(), self.nodes[b].data(), &mut data, false);
        let t = Tensor::matrix(m, n, data)?;
        let out = self.push_checked("matmul", t)?;
        self.ops.push(Op::Matmul { a, b, out });
        Ok(out)
    }

    /// a (m,k) @ b (n,k)ᵀ -> (m,n)
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.want_matrix("matmul_nt", a)?;
        let (n, kb) = self.want_matrix("matmul_nt", b)?;
        if ka != kb {
            return Err(AdError::ShapeMismatch { op: "matmul_nt", lhs: self.nodes[a].shape().to_vec(), rhs: self.nodes[b].shape().to_vec() });
        }
        let mut data = vec![0.0; m * n];
        gemm_nt(m, ka, n, self.nodes[a].data(), self.nodes[b].data(), &mut data, false);
        let t = Tensor::matrix(m, n, data)?;
        let out = self.push_checked("matmul_nt", t)?;
        self.ops.push(Op::MatmulNT { a, b, out });
        Ok(out)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.want_matrix("transpose", x)?;
        let src = self.nodes[x].data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = src[r * cols + c];
            }
        }
        let t = Tensor::matrix(cols, rows, data)?;
        let out = self.push_checked("transpose", t)?;
        self.ops.push(Op::Transpose { x, out });
        Ok(out)
    }

    // ── convolutions ────────────────────────────────────────────────

    /// 2-D convolution, no padding. x: (Cin,H,W), kernel: (Cout,Cin,kh,kw),
    /// bias: (Cout,), square stride.
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId, stride: usize) -> Result<NodeId> {
        let xs = self.nodes[x].shape().to_vec();
        let ks = self.nodes[kernel].shape().to_vec();
        let (cin, cout, oh, ow, _) = conv2d_dims(&xs, &ks, stride)?;
        if self.nodes[bias].shape() != [cout] {
            return Err(AdError::ShapeMismatch { op: "conv2d", lhs: ks, rhs: self.nodes[bias].shape().to_vec() });
        }
        let (kh, kw) = (ks[2], ks[3]);
        let col = im2col(self.nodes[x].data(), cin, xs[1], xs[2], kh, kw, stride, oh, ow);
        let ckk = cin * kh * kw;
        let mut out_mat = vec![0.0; oh * ow * cout];
        gemm_nt(oh * ow, ckk, cout, &col, self.nodes[kernel].data(), &mut out_mat, false);
        let bv = self.nodes[bias].data().to_vec();
        let mut data = vec![0.0; cout * oh * ow];
        for o in 0..cout {
            for p in 0..oh * ow {
                data[o * oh * ow + p] = out_mat[p * cout + o] + bv[o];
            }
        }
        let t = Tensor::new(vec![cout, oh, ow], data)?;
        let out = self.push_checked("conv2d", t)?;
        self.ops.push(Op::Conv2d { x, kernel, bias, stride, out });
        Ok(out)
    }

    /// Depthwise 1-D convolution over time with same-padding.
    /// x: (T,D), kernel: (D,k) with odd k, bias: (D,).
    pub fn depthwise_conv1d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let (t_len, d) = self.want_matrix("depthwise_conv1d", x)?;
        let ks = self.nodes[kernel].shape().to_vec();
        if ks.len() != 2 || ks[0] != d || ks[1] % 2 == 0 {
            return Err(AdError::ShapeMismatch { op: "depthwise_conv1d", lhs: self.nodes[x].shape().to_vec(), rhs: ks });
        }
        if self.nodes[bias].shape() != [d] {
            return Err(AdError::ShapeMismatch { op: "depthwise_conv1d", lhs: ks, rhs: self.nodes[bias].shape().to_vec() });
        }
        let k = ks[1];
        let pad = k / 2;
        let xv = self.nodes[x].data();
        let kv = self.nodes[kernel].data();
        let bv = self.nodes[bias].data();
        let mut data = vec![0.0; t_len * d];
        for t in 0..t_len {
            for dim in 0..d {
                let mut acc = bv[dim];
                for j in 0..k {
                    let src = t as isize + j as isize - pad as isize;
                    if src >= 0 && (src as usize) < t_len {
                        acc += xv[src as usize * d + dim] * kv[dim * k + j];
                    }
                }
                data[t * d + dim] = acc;
            }
        }
        let t = Tensor::matrix(t_len, d, data)?;
        let out = self.push_checked("depthwise_conv1d", t)?;
        self.ops.push(Op::DepthwiseConv1d { x, kernel, bias, out });
        Ok(out)
    }

    // ── structural ops ──────────────────────────────────────────────

    /// Inverted-scaling dropout. Identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId> {
        if rate <= 0.0 || self.rng.is_none() {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(AdError::Invalid(format!("dropout rate {rate} out of [0,1)")));
        }
        let keep = 1.0 - rate;
        let rng = self.rng.as_mut().expect("train mode rng");
        let mask: Vec<f64> = (0..self.nodes[x].numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data: Vec<f64> = self.nodes[x].data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let t = Tensor::new(self.nodes[x].shape().to_vec(), data)?;
        let out = self.push_checked("dropout", t)?;
        self.ops.push(Op::Dropout { x, mask, out });
        Ok(out)
    }

    /// Row lookup: table (V,D), indices (L) -> (L,D).
    pub fn gather(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (v, d) = self.want_matrix("gather", table)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(AdError::Invalid(format!("gather: index {bad} out of range for table with {v} rows")));
        }
        let src = self.nodes[table].data();
        let mut data = vec![0.0; indices.len() * d];
        for (r, &i) in indices.iter().enumerate() {
            data[r * d..(r + 1) * d].copy_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::matrix(indices.len(), d, data)?;
        let out = self.push_checked("gather", t)?;
        self.ops.push(Op::Gather { table, indices: indices.to_vec(), out });
        Ok(out)
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(AdError::Invalid("concat_cols: empty input list".into()));
        }
        let (rows, _) = self.want_matrix("concat_cols", xs[0])?;
        let mut total = 0;
        for &x in xs {
            let (r, c) = self.want_matrix("concat_cols", x)?;
            if r != rows {
                return Err(AdError::ShapeMismatch { op: "concat_cols", lhs: self.nodes[xs[0]].shape().to_vec(), rhs: self.nodes[x].shape().to_vec() });
            }
            total += c;
        }
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for &x in xs {
            let (_, c) = self.want_matrix("concat_cols", x)?;
            let src = self.nodes[x].data();
            for r in 0..rows {
                data[r * total + off..r * total + off + c].copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let t = Tensor::matrix(rows, total, data)?;
        let out = self.push_checked("concat_cols", t)?;
        self.ops.push(Op::ConcatCols { xs: xs.to_vec(), out });
        Ok(out)
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(AdError::Invalid("concat_rows: empty input list".into()));
        }
        let (_, cols) = self.want_matrix("concat_rows", xs[0])?;
        let mut total = 0;
        for &x in xs {
            let (r, c) = self.want_matrix("concat_rows", x)?;
            if c != cols {
                return Err(AdError::ShapeMismatch { op: "concat_rows", lhs: self.nodes[xs[0]].shape().to_vec(), rhs: self.nodes[x].shape().to_vec() });
            }
            total += r;
        }
        let mut data = Vec::with_capacity(total * cols);
        for &x in xs {
            data.extend_from_slice(self.nodes[x].data());
        }
        let t = Tensor::matrix(total, cols, data)?;
        let out = self.push_checked("concat_rows", t)?;
        self.ops.push(Op::ConcatRows { xs: xs.to_vec(), out });
        Ok(out)
    }

    pub fn slice_cols(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let (rows, cols) = self.want_matrix("slice_cols", x)?;
        if from >= to || to > cols {
            return Err(AdError::Invalid(format!("slice_cols: range {from}..{to} out of 0..{cols}")));
        }
        let src = self.nodes[x].data();
        let width = to - from;
        let mut data = vec![0.0; rows * width];
        for r in 0..rows {
            data[r * width..(r + 1) * width].copy_from_slice(&src[r * cols + from..r * cols + to]);
        }
        let t = Tensor::matrix(rows, width, data)?;
        let out = self.push_checked("slice_cols", t)?;
        self.ops.push(Op::SliceCols { x, from, to, out });
        Ok(out)
    }

    pub fn slice_rows(&mut self, x: NodeId, from: usize, to: usize) -> Result<NodeId> {
        let (rows, cols) = self.want_matrix("slice_rows", x)?;
        if from >= to || to > rows {
            return Err(AdError::Invalid(format!("slice_rows: range {from}..{to} out of 0..{rows}")));
        }
        let src = &self.nodes[x].data()[from * cols..to * cols];
        let t = Tensor::matrix(to - from, cols, src.to_vec())?;
        let out = self.push_checked("slice_rows", t)?;
        self.ops.push(Op::SliceRows { x, from, out });
        Ok(out)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x].numel() {
            return Err(AdError::BadShape { op: "reshape", shape, reason: format!("source has {} elements", self.nodes[x].numel()) });
        }
        let t = Tensor::new(shape, self.nodes[x].data().to_vec())?;
        let out = self.push(t);
        self.ops.push(Op::Reshape { x, out });
        Ok(out)
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let t = Tensor::scalar(self.nodes[x].data().iter().sum());
        let out = self.push_checked("sum", t)?;
        self.ops.push(Op::SumAll { x, out });
        Ok(out)
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.nodes[x].numel();
        if n == 0 {
            return Err(AdError::Invalid("mean: empty tensor".into()));
        }
        let t = Tensor::scalar(self.nodes[x].data().iter().sum::<f64>() / n as f64);
        let out = self.push_checked("mean", t)?;
        self.ops.push(Op::MeanAll { x, out });
        Ok(out)
    }

    // ── composed attention ──────────────────────────────────────────

    /// Scaled dot-product attention composed from the primitives above:
    /// softmax(q kᵀ / sqrt(dk) + mask) v. `mask` is an additive constant
    /// node of shape (Tq,Tk), typically 0 / -1e30 entries.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, mask: Option<NodeId>) -> Result<NodeId> {
        let (_, dk) = self.want_matrix("attention", k)?;
        let scores = self.matmul_nt(q, k)?;
        let scaled = self.scale(scores, 1.0 / (dk as f64).sqrt())?;
        let masked = match mask {
            Some(m) => self.add(scaled, m)?,
            None => scaled,
        };
        let weights = self.softmax(masked)?;
        self.matmul(weights, v)
    }

    // ── custom ops ──────────────────────────────────────────────────

    /// Record an op with an externally supplied backward rule. The caller
    /// computes the forward output.
    pub fn custom(&mut self, inputs: &[NodeId], output: Tensor, op: Box<dyn CustomOp>) -> Result<NodeId> {
        let name = op.name();
        if !output.all_finite() {
            return Err(AdError::NonFinite { op: name });
        }
        let out = self.push(output);
        self.ops.push(Op::Custom { inputs: inputs.to_vec(), op, out });
        Ok(out)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Replay the tape in reverse, returning gradients for every bound
    /// parameter. Parameters bound to the graph but unreachable from the
    /// loss get zero gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradMap> {
        if self.consumed {
            return Err(AdError::TapeConsumed);
        }
        if !self.nodes[loss].is_scalar() {
            return Err(AdError::LossNotScalar { shape: self.nodes[loss].shape().to_vec() });
        }
        self.consumed = true;

        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss] = Some(vec![1.0]);

        for idx in (0..self.ops.len()).rev() {
            // Split borrow: take the op out, put it back after.
            let op = std::mem::replace(&mut self.ops[idx], Op::SumAll { x: 0, out: 0 });
            self.backward_op(&op, &mut adj);
            self.ops[idx] = op;
        }

        let mut grads = GradMap::new();
        for (id, &node) in &self.param_nodes {
            let g = match adj[node].take() {
                Some(v) => Tensor::new(self.nodes[node].shape().to_vec(), v)?,
                None => Tensor::zeros(self.nodes[node].shape().to_vec()),
            };
            grads.insert(id.clone(), g);
        }
        Ok(grads)
    }

    fn accum(adj: &mut [Option<Vec<f64>>], node: NodeId, grad: &[f64]) {
        match &mut adj[node] {
            Some(existing) => {
                for (e, g) in existing.iter_mut().zip(grad) {
                    *e += g;
                }
            }
            None => adj[node] = Some(grad.to_vec()),
        }
    }

    fn backward_op(&self, op: &Op, adj: &mut Vec<Option<Vec<f64>>>) {
        match op {
            Op::Add { a, b, out } => {
                if let Some(d) = adj[*out].clone() {
                    Self::accum(adj, *a, &d);
                    Self::accum(adj, *b, &d);
                }
            }
            Op::Sub { a, b, out } => {
                if let Some(d) = adj[*out].clone() {
                    Self::accum(adj, *a, &d);
                    let neg: Vec<f64> = d.iter().map(|v| -v).collect();
                    Self::accum(adj, *b, &neg);
                }
            }
            Op::Mul { a, b, out } => {
                if let Some(d) = adj[*out].clone() {
                    let da: Vec<f64> = d.iter().zip(self.nodes[*b].data()).map(|(&g, &y)| g * y).collect();
                    let db: Vec<f64> = d.iter().zip(self.nodes[*a].data()).map(|(&g, &x)| g * x).collect();
                    Self::accum(adj, *a, &da);
                    Self::accum(adj, *b, &db);
                }
            }
            Op::Scale { x, c, out } => {
                if let Some(d) = adj[*out].clone() {
                    let dx: Vec<f64> = d.iter().map(|&g| g * c).collect();
                    Self::accum(adj, *x, &dx);
                }
            }
            Op::AddRow { m, v, out } => {
                if let Some(d) = adj[*out].clone() {
                    Self::accum(adj, *m, &d);
                    let cols = self.nodes[*v].numel();
                    let mut dv = vec![0.0; cols];
                    for chunk in d.chunks(cols) {
                        for (s, &g) in dv.iter_mut().zip(chunk) {
                            *s += g;
                        }
                    }
                    Self::accum(adj, *v, &dv);
                }
            }
            Op::MulRow { m, v, out } => {
                if let Some(d) = adj[*out].clone() {
                    let cols = self.nodes[*v].numel();
                    let vv = self.nodes[*v].data();
                    let mv = self.nodes[*m].data();
                    let mut dm = vec![0.0; d.len()];
                    let mut dv = vec![0.0; cols];
                    for (r, chunk) in d.chunks(cols).enumerate() {
                        for j in 0..cols {
                            dm[r * cols + j] = chunk[j] * vv[j];
                            dv[j] += chunk[j] * mv[r * cols + j];
                        }
                    }
                    Self::accum(adj, *m, &dm);
                    Self::accum(adj, *v, &dv);
                }
            }
            Op::Sigmoid { x, out } => {
                if let Some(d) = adj[*out].clone() {
                    let dx: Vec<f64> = d.iter().zip(self.nodes[*out].data()).map(|(&g, &s)| g * s * (1.0 - s)).collect();
                    Self::accum(adj, *x, &dx);
                }
            }
            Op::Relu { x, out } => {
                if let Some(d) = adj[*out].clone() {
                    let dx: Vec<f64> = d.iter().zip(self.nodes[*x].data()).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect();
                    Self::accum(adj, *x, &dx);
                }
            }
            Op::Swish { x, out } => {
                if let Some(d) = adj[*out].clone() {
                    let dx: Vec<f64> = d
                        .iter()
                        .zip(self.nodes[*x].data())
                        .map(|(&g, &v)| {
                            let s = sigmoid(v);
                            g * (s + v * s * (1.0 - s))
                        })
                        .collect();
                    Self::accum(adj, *x, &dx);
                }
            }
            Op::Exp { x, out } => {
                if let Some(d) = adj[*out].clone() {
                    let dx: Vec<f64> = d.iter().zip(self.nodes[*out].data()).map(|(&g, &e)| g * e).collect();
                    Self::accum(adj, *x, &dx);
                }
            }
            Op::ClampMin { x, lo, out } => {
                if let Some(d) = adj[*out].clone() {
                    let dx: Vec<f64> = d.iter().zip(self.nodes[*x].data()).map(|(&g, &v)| if v > *lo { g } else { 0.0 }).collect();
                    Self::accum(adj, *x, &dx);
                }
            }
            Op::Softmax { x, out } => {
                if let Some(d) = adj[*out].clone() {
                    let t = &self.nodes[*out];
                    let cols = t.cols();
                    let y = t.data();
                    let mut dx = vec![0.0; d.len()];
                    for r in 0..t.rows() {
                        let base = r * cols;
                        let dot: f64 = (0..cols).map(|j| d[base + j] * y[base + j]).sum();
                        for j in 0..cols {
                            dx[base + j] = y[base + j] * (d[base + j] - dot);
                        }
                    }
                    Self::accum(adj, *x, &dx);
                }
            }
            Op::LogSoftmax { x, out } => {
                if let Some(d) = adj[*out].clone() {
                    let t = &self.nodes[*out];
                    let cols = t.cols();
                    let y = t.data();
                    let mut dx = vec![0.0; d.len()];
                    for r in 0..t.rows() {
                        let base = r * cols;
                        let dsum: f64 = d[base..base + cols].iter().sum();
                        for j in 0..cols {
                            dx[base + j] = d[base + j] - y[base + j].exp() * dsum;
                        }
                    }
                    Self::accum(adj, *x, &dx);
                }
            }
            Op::LayerNorm { x, gain, bias, eps, out } => {
                if let Some(d) = adj[*out].clone() {
                    let t = &self.nodes[*x];
                    let cols = t.cols();
                    let rows = t.rows();
                    let xv = t.data();
                    let g = self.nodes[*gain].data();
                    let mut dx = vec![0.0; xv.len()];
                    let mut dg = vec![0.0; cols];
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        let base = r * cols;
                        let row = &xv[base..base + cols];
                        let mean = row.iter().sum::<f64>() / cols as f64;
                        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> = (0..cols).map(|j| d[base + j] * g[j]).collect();
                        let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                        let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            dx[base + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                            dg[j] += d[base + j] * xhat[j];
                            db[j] += d[base + j];
                        }
                    }
                    Self::accum(adj, *x, &dx);
                    Self::accum(adj, *gain, &dg);
                    Self::accum(adj, *bias, &db);
                }
            }
            Op::Matmul { a, b, out } => {
                if let Some(d) = adj[*out].clone() {
                    let (m, k) = (self.nodes[*a].rows(), self.nodes[*a].cols());
                    let n = self.nodes[*b].cols();
                    let mut da = vec![0.0; m * k];
                    gemm_nt(m, n, k, &d, self.nodes[*b].data(), &mut da, false);
                    Self::accum(adj, *a, &da);
                    let mut db = vec![0.0; k * n];
                    gemm_tn(k, m, n, self.nodes[*a].data(), &d, &mut db, false);
                    Self::accum(adj, *b, &db);
                }
            }
            Op::MatmulNT { a, b, out } => {
                if let Some(d) = adj[*out].clone() {
                    let (m, k) = (self.nodes[*a].rows(), self.nodes[*a].cols());
                    let n = self.nodes[*b].rows();
                    // da = d @ b : (m,n)x(n,k)
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, &d, self.nodes[*b].data(), &mut da, false);
                    Self::accum(adj, *a, &da);
                    // db = dᵀ @ a : (n,m)x(m,k)
                    let mut db = vec![0.0; n * k];
                    gemm_tn(n, m, k, &d, self.nodes[*a].data(), &mut db, false);
                    Self::accum(adj, *b, &db);
                }
            }
            Op::Transpose { x, out } => {
                if let Some(d) = adj[*out].clone() {
                    let (rows, cols) = (self.nodes[*x].rows(), self.nodes[*x].cols());
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] = d[c * rows + r];
                        }
                    }
                    Self::accum(adj, *x, &dx);
                }
            }
            Op::Conv2d { x, kernel, bias, stride, out } => {
                if let Some(d) = adj[*out].clone() {
                    let xs = self.nodes[*x].shape();
                    let ks = self.nodes[*kernel].shape();
                    let (cin, h, w) = (xs[0], xs[1], xs[2]);
                    let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
                    let oh = (h - kh) / stride + 1;
                    let ow = (w - kw) / stride + 1;
                    let ckk = cin * kh * kw;
                    let hw = oh * ow;
                    // (Cout,OH,OW) -> (OH*OW, Cout)
                    let mut d_mat = vec![0.0; hw * cout];
                    for o in 0..cout {
                        for p in 0..hw {
                            d_mat[p * cout + o] = d[o * hw + p];
                        }
                    }
                    let col = im2col(self.nodes[*x].data(), cin, h, w, kh, kw, *stride, oh, ow);
                    // dK = d_matᵀ @ col
                    let mut dk = vec![0.0; cout * ckk];
                    gemm_tn(cout, hw, ckk, &d_mat, &col, &mut dk, false);
                    Self::accum(adj, *kernel, &dk);
                    // d_col = d_mat @ Kmat
                    let mut d_col = vec![0.0; hw * ckk];
                    gemm(hw, cout, ckk, &d_mat, self.nodes[*kernel].data(), &mut d_col, false);
                    // col2im scatter-add
                    let mut dx = vec![0.0; cin * h * w];
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let row = (oi * ow + oj) * ckk;
                            for c in 0..cin {
                                for u in 0..kh {
                                    for vj in 0..kw {
                                        dx[c * h * w + (oi * stride + u) * w + oj * stride + vj] += d_col[row + (c * kh + u) * kw + vj];
                                    }
                                }
                            }
                        }
                    }
                    Self::accum(adj, *x, &dx);
                    let mut dbias = vec![0.0; cout];
                    for o in 0..cout {
                        dbias[o] = d[o * hw..(o + 1) * hw].iter().sum();
                    }
                    Self::accum(adj, *bias, &dbias);
                }
            }
            Op::DepthwiseConv1d { x, kernel, bias, out } => {
                if let Some(d) = adj[*out].clone() {
                    let (t_len, dim) = (self.nodes[*x].rows(), self.nodes[*x].cols());
                    let k = self.nodes[*kernel].shape()[1];
                    let pad = k / 2;
                    let xv = self.nodes[*x].data();
                    let kv = self.nodes[*kernel].data();
                    let mut dx = vec![0.0; t_len * dim];
                    let mut dk = vec![0.0; dim * k];
                    let mut db = vec![0.0; dim];
                    for t in 0..t_len {
                        for c in 0..dim {
                            let g = d[t * dim + c];
                            db[c] += g;
                            for j in 0..k {
                                let src = t as isize + j as isize - pad as isize;
                                if src >= 0 && (src as usize) < t_len {
                                    dx[src as usize * dim + c] += g * kv[c * k + j];
                                    dk[c * k + j] += g * xv[src as usize * dim + c];
                                }
                            }
                        }
                    }
                    Self::accum(adj, *x, &dx);
                    Self::accum(adj, *kernel, &dk);
                    Self::accum(adj, *bias, &db);
                }
            }
            Op::Dropout { x, mask, out } => {
                if let Some(d) = adj[*out].clone() {
                    let dx: Vec<f64> = d.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                    Self::accum(adj, *x, &dx);
                }
            }
            Op::Gather { table, indices, out } => {
                if let Some(d) = adj[*out].clone() {
                    let (v, dim) = (self.nodes[*table].rows(), self.nodes[*table].cols());
                    let mut dt = vec![0.0; v * dim];
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..dim {
                            dt[i * dim + j] += d[r * dim + j];
                        }
                    }
                    Self::accum(adj, *table, &dt);
                }
            }
            Op::ConcatCols { xs, out } => {
                if let Some(d) = adj[*out].clone() {
                    let rows = self.nodes[*out].rows();
                    let total = self.nodes[*out].cols();
                    let mut off = 0;
                    for &x in xs {
                        let c = self.nodes[x].cols();
                        let mut dx = vec![0.0; rows * c];
                        for r in 0..rows {
                            dx[r * c..(r + 1) * c].copy_from_slice(&d[r * total + off..r * total + off + c]);
                        }
                        Self::accum(adj, x, &dx);
                        off += c;
                    }
                }
            }
            Op::ConcatRows { xs, out } => {
                if let Some(d) = adj[*out].clone() {
                    let mut off = 0;
                    for &x in xs {
                        let n = self.nodes[x].numel();
                        Self::accum(adj, x, &d[off..off + n]);
                        off += n;
                    }
                }
            }
            Op::SliceCols { x, from, to, out } => {
                if let Some(d) = adj[*out].clone() {
                    let (rows, cols) = (self.nodes[*x].rows(), self.nodes[*x].cols());
                    let width = to - from;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        dx[r * cols + from..r * cols + to].copy_from_slice(&d[r * width..(r + 1) * width]);
                    }
                    Self::accum(adj, *x, &dx);
                }
            }
            Op::SliceRows { x, from, out } => {
                if let Some(d) = adj[*out].clone() {
                    let cols = self.nodes[*x].cols();
                    let mut dx = vec![0.0; self.nodes[*x].numel()];
                    dx[from * cols..from * cols + d.len()].copy_from_slice(&d);
                    Self::accum(adj, *x, &dx);
                }
            }
            Op::Reshape { x, out } => {
                if let Some(d) = adj[*out].clone() {
                    Self::accum(adj, *x, &d);
                }
            }
            Op::SumAll { x, out } => {
                if let Some(d) = adj[*out].clone() {
                    let dx = vec![d[0]; self.nodes[*x].numel()];
                    Self::accum(adj, *x, &dx);
                }
            }
            Op::MeanAll { x, out } => {
                if let Some(d) = adj[*out].clone() {
                    let n = self.nodes[*x].numel();
                    let dx = vec![d[0] / n as f64; n];
                    Self::accum(adj, *x, &dx);
                }
            }
            Op::Custom { inputs, op, out } => {
                if let Some(d) = adj[*out].clone() {
                    let views: Vec<(&[usize], &[f64])> = inputs.iter().map(|&i| (self.nodes[i].shape(), self.nodes[i].data())).collect();
                    let mut d_inputs: Vec<Vec<f64>> = inputs.iter().map(|&i| vec![0.0; self.nodes[i].numel()]).collect();
                    op.backward(&views, self.nodes[*out].data(), &d, &mut d_inputs);
                    for (&i, di) in inputs.iter().zip(&d_inputs) {
                        Self::accum(adj, i, di);
                    }
                }
            }
        }
    }
}
