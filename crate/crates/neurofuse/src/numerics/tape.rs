//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Forward execution is eager: every op validates shapes, computes its output
//! immediately, and appends one node to the tape. [`Tape::backward`] then
//! sweeps the tape once in reverse, accumulating gradients into the parameter
//! slots that were registered with [`Tape::param`].
//!
//! The tape is confined to a single training thread; parallelism happens
//! across independent model instances, never inside one tape.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::tensor::{dgemm_into, Tensor};

/// SELU scale constant.
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
/// SELU alpha constant.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Saved context for layer/batch normalization backward passes.
#[derive(Debug, Clone)]
struct NormCtx {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    /// Batch-norm only: batch statistics (train) vs running statistics (infer).
    train: bool,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize, broadcast_b: bool },
    Scale { x: usize, c: f64 },
    Hadamard { a: usize, b: usize },
    ConcatCols { parts: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    MeanRows { x: usize },
    MeanCols { x: usize },
    SumAll { x: usize },
    Selu { x: usize },
    Sigmoid { x: usize },
    Tanh { x: usize },
    LeakyRelu { x: usize, slope: f64 },
    RowSoftmax { x: usize },
    RowLogSoftmax { x: usize },
    MaskedRowSoftmax { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, ctx: NormCtx },
    BatchNorm { x: usize, gamma: usize, beta: usize, ctx: NormCtx },
    Transpose { x: usize },
    SliceRows { x: usize, start: usize, len: usize },
    SliceCols { x: usize, start: usize, len: usize },
    GatherRows { x: usize, indices: Arc<Vec<usize>> },
    TileRows { x: usize, times: usize },
    BlockLmul { x: usize, mats: Arc<Vec<Arc<Tensor>>> },
    BlockMeanRows { x: usize, block: usize },
    BlockMaxRows { x: usize, block: usize, argmax: Vec<u32> },
    BernoulliEntropy { x: usize },
    SymmetricEdgeExpand { x: usize, edges: Arc<Vec<(usize, usize)>> },
}

struct Node {
    op: Op,
    out: Tensor,
    /// Parameter slot this leaf feeds gradients into, if any.
    slot: Option<usize>,
}

/// Gradients keyed by parameter slot.
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, slot: usize) -> Option<&Tensor> {
        self.slots.get(slot).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, slot: usize) -> Option<Tensor> {
        self.slots.get_mut(slot).and_then(|g| g.take())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Running statistics owned by a batch-norm layer (state, not a parameter).
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnState {
    pub fn new(features: usize) -> Self {
        BnState { mean: vec![0.0; features], var: vec![1.0; features], momentum: 0.1, eps: 1e-5 }
    }
}

/// Recording tape. One per forward/backward pass.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Output tensor of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].out
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].out.shape()
    }

    fn push(&mut self, op: Op, out: Tensor) -> Var {
        debug_assert!(out.is_finite(), "non-finite output from {:?}", op_name(&op));
        self.nodes.push(Node { op, out, slot: None });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf. Data entering the tape must be finite.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        t.validate_finite("tape leaf")?;
        Ok(self.push(Op::Leaf, t))
    }

    /// Parameter leaf: gradients accumulate into `slot`.
    pub fn param(&mut self, t: Tensor, slot: usize) -> Result<Var> {
        t.validate_finite("tape param")?;
        self.nodes.push(Node { op: Op::Leaf, out: t, slot: Some(slot) });
        Ok(Var(self.nodes.len() - 1))
    }

    // ── Kernels ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::dim("matmul", format!("{}x{} @ {}x{}", ar, ac, br, bc)));
        }
        let mut out = Tensor::zeros(ar, bc);
        dgemm_into(&self.nodes[a.0].out, &self.nodes[b.0].out, &mut out, false, false, 1.0, 0.0);
        Ok(self.push(Op::MatMul { a: a.0, b: b.0 }, out))
    }

    /// Elementwise add; `b` may also be a 1xC row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let broadcast = br == 1 && ar != 1;
        if bc != ac || (!broadcast && br != ar) {
            return Err(Error::dim("add", format!("{}x{} + {}x{}", ar, ac, br, bc)));
        }
        let av = self.nodes[a.0].out.data();
        let bv = self.nodes[b.0].out.data();
        let mut data = Vec::with_capacity(ar * ac);
        if broadcast {
            for r in 0..ar {
                for c in 0..ac {
                    data.push(av[r * ac + c] + bv[c]);
                }
            }
        } else {
            data.extend(av.iter().zip(bv).map(|(x, y)| x + y));
        }
        let out = Tensor::from_vec(ar, ac, data)?;
        Ok(self.push(Op::Add { a: a.0, b: b.0, broadcast_b: broadcast }, out))
    }

    /// a - b, composed from scale and add.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = &self.nodes[x.0].out;
        let out = Tensor::from_vec(t.rows(), t.cols(), t.data().iter().map(|v| v * c).collect())?;
        Ok(self.push(Op::Scale { x: x.0, c }, out))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        if self.shape(b) != (ar, ac) {
            return Err(Error::dim("hadamard", format!("{:?} vs {:?}", (ar, ac), self.shape(b))));
        }
        let data = self.nodes[a.0]
            .out
            .data()
            .iter()
            .zip(self.nodes[b.0].out.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_vec(ar, ac, data)?;
        Ok(self.push(Op::Hadamard { a: a.0, b: b.0 }, out))
    }

    /// Concatenate along the last axis (columns).
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols", "no parts"));
        }
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for p in parts {
            let (r, c) = self.shape(*p);
            if r != rows {
                return Err(Error::dim("concat_cols", format!("row mismatch {} vs {}", r, rows)));
            }
            cols += c;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let t = &self.nodes[p.0].out;
            let pc = t.cols();
            for r in 0..rows {
                out.data_mut()[r * cols + offset..r * cols + offset + pc]
                    .copy_from_slice(&t.data()[r * pc..(r + 1) * pc]);
            }
            offset += pc;
        }
        Ok(self.push(Op::ConcatCols { parts: parts.iter().map(|v| v.0).collect() }, out))
    }

    /// Stack along the first axis (rows).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows", "no parts"));
        }
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        for p in parts {
            let (r, c) = self.shape(*p);
            if c != cols {
                return Err(Error::dim("concat_rows", format!("col mismatch {} vs {}", c, cols)));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(self.nodes[p.0].out.data());
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows { parts: parts.iter().map(|v| v.0).collect() }, out))
    }

    /// Mean over axis 0: RxC -> 1xC.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let t = &self.nodes[x.0].out;
        let mut out = Tensor::zeros(1, c);
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[j] += t.data()[i * c + j];
            }
        }
        for v in out.data_mut() {
            *v /= r as f64;
        }
        Ok(self.push(Op::MeanRows { x: x.0 }, out))
    }

    /// Mean over axis 1: RxC -> Rx1.
    pub fn mean_cols(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let t = &self.nodes[x.0].out;
        let mut out = Tensor::zeros(r, 1);
        for i in 0..r {
            let s: f64 = t.row_slice(i).iter().sum();
            out.data_mut()[i] = s / c as f64;
        }
        Ok(self.push(Op::MeanCols { x: x.0 }, out))
    }

    /// Sum of all entries -> 1x1.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.nodes[x.0].out.data().iter().sum();
        Ok(self.push(Op::SumAll { x: x.0 }, Tensor::scalar(s)))
    }

    pub fn selu(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].out;
        let data = t
            .data()
            .iter()
            .map(|&v| if v > 0.0 { SELU_LAMBDA * v } else { SELU_LAMBDA * SELU_ALPHA * (v.exp() - 1.0) })
            .collect();
        let out = Tensor::from_vec(t.rows(), t.cols(), data)?;
        Ok(self.push(Op::Selu { x: x.0 }, out))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].out;
        let data = t.data().iter().map(|&v| sigmoid(v)).collect();
        let out = Tensor::from_vec(t.rows(), t.cols(), data)?;
        Ok(self.push(Op::Sigmoid { x: x.0 }, out))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].out;
        let data = t.data().iter().map(|&v| v.tanh()).collect();
        let out = Tensor::from_vec(t.rows(), t.cols(), data)?;
        Ok(self.push(Op::Tanh { x: x.0 }, out))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let t = &self.nodes[x.0].out;
        let data = t.data().iter().map(|&v| if v >= 0.0 { v } else { slope * v }).collect();
        let out = Tensor::from_vec(t.rows(), t.cols(), data)?;
        Ok(self.push(Op::LeakyRelu { x: x.0, slope }, out))
    }

    /// Numerically stable softmax per row.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].out;
        let (r, c) = t.shape();
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = t.row_slice(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out.data_mut()[i * c + j] = e;
                denom += e;
            }
            for j in 0..c {
                out.data_mut()[i * c + j] /= denom;
            }
        }
        Ok(self.push(Op::RowSoftmax { x: x.0 }, out))
    }

    /// log(row_softmax(x)), computed directly in log space.
    pub fn row_log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].out;
        let (r, c) = t.shape();
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = t.row_slice(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                out.data_mut()[i * c + j] = row[j] - lse;
            }
        }
        Ok(self.push(Op::RowLogSoftmax { x: x.0 }, out))
    }

    /// Softmax per row restricted to unmasked entries; masked entries are
    /// exactly zero in the output, so no gradient or information crosses them.
    pub fn masked_row_softmax(&mut self, x: Var, mask: Arc<Vec<bool>>) -> Result<Var> {
        let t = &self.nodes[x.0].out;
        let (r, c) = t.shape();
        if mask.len() != r * c {
            return Err(Error::dim("masked_row_softmax", format!("mask len {} vs {}x{}", mask.len(), r, c)));
        }
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = t.row_slice(i);
            let mut m = f64::NEG_INFINITY;
            for j in 0..c {
                if mask[i * c + j] {
                    m = m.max(row[j]);
                }
            }
            if m == f64::NEG_INFINITY {
                return Err(Error::contract("masked_row_softmax", format!("row {} fully masked", i)));
            }
            let mut denom = 0.0;
            for j in 0..c {
                if mask[i * c + j] {
                    let e = (row[j] - m).exp();
                    out.data_mut()[i * c + j] = e;
                    denom += e;
                }
            }
            for j in 0..c {
                out.data_mut()[i * c + j] /= denom;
            }
        }
        Ok(self.push(Op::MaskedRowSoftmax { x: x.0 }, out))
    }

    /// Per-row layer normalization with affine parameters (1xC each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(Error::dim("layer_norm", "gamma/beta must be 1xC".to_string()));
        }
        let t = &self.nodes[x.0].out;
        let g = self.nodes[gamma.0].out.data().to_vec();
        let b = self.nodes[beta.0].out.data().to_vec();
        let mut mean = vec![0.0; r];
        let mut inv_std = vec![0.0; r];
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = t.row_slice(i);
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            mean[i] = mu;
            inv_std[i] = is;
            for j in 0..c {
                out.data_mut()[i * c + j] = g[j] * (row[j] - mu) * is + b[j];
            }
        }
        let ctx = NormCtx { mean, inv_std, train: true };
        Ok(self.push(Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, ctx }, out))
    }

    /// Batch normalization over the batch axis (rows), one statistic per
    /// feature column. Train mode uses biased batch statistics and updates
    /// the running state; inference mode reads the running state.
    pub fn batch_norm_1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState,
        train: bool,
    ) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(Error::dim("batch_norm_1d", "gamma/beta must be 1xC".to_string()));
        }
        if state.mean.len() != c {
            return Err(Error::dim("batch_norm_1d", format!("state has {} features, input {}", state.mean.len(), c)));
        }
        if train && r < 2 {
            return Err(Error::contract("batch_norm_1d", "training mode requires batch size >= 2"));
        }
        let t = &self.nodes[x.0].out;
        let (mean, var) = if train {
            let mut mu = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    mu[j] += t.data()[i * c + j];
                }
            }
            for m in &mut mu {
                *m /= r as f64;
            }
            let mut va = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    let d = t.data()[i * c + j] - mu[j];
                    va[j] += d * d;
                }
            }
            for v in &mut va {
                *v /= r as f64;
            }
            for j in 0..c {
                state.mean[j] = (1.0 - state.momentum) * state.mean[j] + state.momentum * mu[j];
                state.var[j] = (1.0 - state.momentum) * state.var[j] + state.momentum * va[j];
            }
            (mu, va)
        } else {
            (state.mean.clone(), state.var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let g = self.nodes[gamma.0].out.data().to_vec();
        let b = self.nodes[beta.0].out.data().to_vec();
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            for j in 0..c {
                let xhat = (t.data()[i * c + j] - mean[j]) * inv_std[j];
                out.data_mut()[i * c + j] = g[j] * xhat + b[j];
            }
        }
        let ctx = NormCtx { mean, inv_std, train };
        Ok(self.push(Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, ctx }, out))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.nodes[x.0].out.transpose();
        Ok(self.push(Op::Transpose { x: x.0 }, out))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > r {
            return Err(Error::dim("slice_rows", format!("{}+{} > {}", start, len, r)));
        }
        let data = self.nodes[x.0].out.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::from_vec(len, c, data)?;
        Ok(self.push(Op::SliceRows { x: x.0, start, len }, out))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return Err(Error::dim("slice_cols", format!("{}+{} > {}", start, len, c)));
        }
        let t = &self.nodes[x.0].out;
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::from_vec(r, len, data)?;
        Ok(self.push(Op::SliceCols { x: x.0, start, len }, out))
    }

    /// Gather rows by index (repeats allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, x: Var, indices: Arc<Vec<usize>>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::dim("gather_rows", format!("index {} out of {} rows", bad, r)));
        }
        let t = &self.nodes[x.0].out;
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices.iter() {
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::from_vec(indices.len(), c, data)?;
        Ok(self.push(Op::GatherRows { x: x.0, indices }, out))
    }

    /// Vertically tile the whole matrix `times` times.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::contract("tile_rows", "times must be >= 1"));
        }
        let (r, c) = self.shape(x);
        let src = self.nodes[x.0].out.data();
        let mut data = Vec::with_capacity(r * c * times);
        for _ in 0..times {
            data.extend_from_slice(src);
        }
        let out = Tensor::from_vec(r * times, c, data)?;
        Ok(self.push(Op::TileRows { x: x.0, times }, out))
    }

    /// Per-block left-multiplication by constant matrices: the input is a
    /// vertical stack of B blocks of `mats[b].cols()` rows each, and block b
    /// of the output is `mats[b] @ x_b`. Used to apply per-window normalized
    /// adjacencies across a whole batch in one node.
    pub fn block_lmul(&mut self, x: Var, mats: Arc<Vec<Arc<Tensor>>>) -> Result<Var> {
        let (r, c) = self.shape(x);
        let total_in: usize = mats.iter().map(|m| m.cols()).sum();
        if total_in != r {
            return Err(Error::dim("block_lmul", format!("blocks need {} rows, input has {}", total_in, r)));
        }
        let out_rows: usize = mats.iter().map(|m| m.rows()).sum();
        let mut out = Tensor::zeros(out_rows, c);
        let t = &self.nodes[x.0].out;
        let mut in_off = 0;
        let mut out_off = 0;
        for m in mats.iter() {
            // Blocks are contiguous row ranges, so dgemm can address them
            // in place through strides.
            unsafe {
                matrixmultiply::dgemm(
                    m.rows(),
                    m.cols(),
                    c,
                    1.0,
                    m.data().as_ptr(),
                    m.cols() as isize,
                    1,
                    t.data().as_ptr().add(in_off * c),
                    c as isize,
                    1,
                    0.0,
                    out.data_mut().as_mut_ptr().add(out_off * c),
                    c as isize,
                    1,
                );
            }
            in_off += m.cols();
            out_off += m.rows();
        }
        Ok(self.push(Op::BlockLmul { x: x.0, mats }, out))
    }

    /// Mean over each consecutive block of `block` rows: (B*block)xC -> BxC.
    pub fn block_mean_rows(&mut self, x: Var, block: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if block == 0 || r % block != 0 {
            return Err(Error::dim("block_mean_rows", format!("{} rows not divisible by block {}", r, block)));
        }
        let nb = r / block;
        let t = &self.nodes[x.0].out;
        let mut out = Tensor::zeros(nb, c);
        for b in 0..nb {
            for i in 0..block {
                for j in 0..c {
                    out.data_mut()[b * c + j] += t.data()[(b * block + i) * c + j];
                }
            }
        }
        for v in out.data_mut() {
            *v /= block as f64;
        }
        Ok(self.push(Op::BlockMeanRows { x: x.0, block }, out))
    }

    /// Column-wise max over each consecutive block of `block` rows.
    pub fn block_max_rows(&mut self, x: Var, block: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if block == 0 || r % block != 0 {
            return Err(Error::dim("block_max_rows", format!("{} rows not divisible by block {}", r, block)));
        }
        let nb = r / block;
        let t = &self.nodes[x.0].out;
        let mut out = Tensor::zeros(nb, c);
        let mut argmax = vec![0u32; nb * c];
        for b in 0..nb {
            for j in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for i in 0..block {
                    let v = t.data()[(b * block + i) * c + j];
                    if v > best {
                        best = v;
                        best_i = i;
                    }
                }
                out.data_mut()[b * c + j] = best;
                argmax[b * c + j] = best_i as u32;
            }
        }
        Ok(self.push(Op::BlockMaxRows { x: x.0, block, argmax }, out))
    }

    /// Elementwise Bernoulli entropy of probabilities in (0,1).
    pub fn bernoulli_entropy(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].out;
        let data = t
            .data()
            .iter()
            .map(|&p| {
                let p = p.clamp(1e-12, 1.0 - 1e-12);
                -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
            })
            .collect();
        let out = Tensor::from_vec(t.rows(), t.cols(), data)?;
        Ok(self.push(Op::BernoulliEntropy { x: x.0 }, out))
    }

    /// Expand a 1xE edge-value vector into an NxN symmetric matrix with unit
    /// diagonal and ones at non-edge positions (neutral under Hadamard
    /// masking). Gradient of each edge value collects both (i,j) and (j,i).
    pub fn symmetric_edge_expand(&mut self, x: Var, edges: Arc<Vec<(usize, usize)>>, n: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r != 1 || c != edges.len() {
            return Err(Error::dim("symmetric_edge_expand", format!("need 1x{}, got {}x{}", edges.len(), r, c)));
        }
        if let Some(&(i, j)) = edges.iter().find(|&&(i, j)| i >= n || j >= n || i == j) {
            return Err(Error::contract("symmetric_edge_expand", format!("bad edge ({}, {})", i, j)));
        }
        let vals = self.nodes[x.0].out.data().to_vec();
        let mut out = Tensor::filled(n, n, 1.0);
        for (e, &(i, j)) in edges.iter().enumerate() {
            out.set(i, j, vals[e]);
            out.set(j, i, vals[e]);
        }
        Ok(self.push(Op::SymmetricEdgeExpand { x: x.0, edges }, out))
    }

    // ── Reverse sweep ────────────────────────────────────────────────

    /// Backpropagate from a scalar loss node; returns gradients for the
    /// parameter slots `0..n_slots`. Leaves that are not parameters receive
    /// no entry.
    pub fn backward(&self, loss: Var, n_slots: usize) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::contract("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut slots: Vec<Option<Tensor>> = (0..n_slots).map(|_| None).collect();

        for i in (0..self.nodes.len()).rev() {
            let gy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &gy, &mut grads);
            if let Some(slot) = self.nodes[i].slot {
                debug_assert!(slot < n_slots, "param slot {} out of range {}", slot, n_slots);
                match &mut slots[slot] {
                    Some(acc) => accumulate(acc, &gy),
                    empty => *empty = Some(gy),
                }
            }
        }
        Ok(Gradients { slots })
    }

    fn grad_of<'a>(
        &self,
        grads: &'a mut [Option<Tensor>],
        id: usize,
    ) -> &'a mut Tensor {
        let (r, c) = self.nodes[id].out.shape();
        grads[id].get_or_insert_with(|| Tensor::zeros(r, c))
    }

    fn backprop_node(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                // dA += dC @ B^T ; dB += A^T @ dC
                let (av, bv) = (&self.nodes[*a].out, &self.nodes[*b].out);
                dgemm_into(gy, bv, self.grad_of(grads, *a), false, true, 1.0, 1.0);
                dgemm_into(av, gy, self.grad_of(grads, *b), true, false, 1.0, 1.0);
            }
            Op::Add { a, b, broadcast_b } => {
                accumulate(self.grad_of(grads, *a), gy);
                if *broadcast_b {
                    let (r, c) = gy.shape();
                    let gb = self.grad_of(grads, *b);
                    for i in 0..r {
                        for j in 0..c {
                            gb.data_mut()[j] += gy.data()[i * c + j];
                        }
                    }
                } else {
                    accumulate(self.grad_of(grads, *b), gy);
                }
            }
            Op::Scale { x, c } => {
                let gx = self.grad_of(grads, *x);
                for (g, &d) in gx.data_mut().iter_mut().zip(gy.data()) {
                    *g += c * d;
                }
            }
            Op::Hadamard { a, b } => {
                {
                    let bv = self.nodes[*b].out.data().to_vec();
                    let ga = self.grad_of(grads, *a);
                    for ((g, &d), &w) in ga.data_mut().iter_mut().zip(gy.data()).zip(&bv) {
                        *g += d * w;
                    }
                }
                let av = self.nodes[*a].out.data().to_vec();
                let gb = self.grad_of(grads, *b);
                for ((g, &d), &w) in gb.data_mut().iter_mut().zip(gy.data()).zip(&av) {
                    *g += d * w;
                }
            }
            Op::ConcatCols { parts } => {
                let (r, total) = gy.shape();
                let mut offset = 0;
                for p in parts {
                    let pc = self.nodes[*p].out.cols();
                    let gp = self.grad_of(grads, *p);
                    for i in 0..r {
                        for j in 0..pc {
                            gp.data_mut()[i * pc + j] += gy.data()[i * total + offset + j];
                        }
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows { parts } => {
                let c = gy.cols();
                let mut offset = 0;
                for p in parts {
                    let pr = self.nodes[*p].out.rows();
                    let gp = self.grad_of(grads, *p);
                    for (g, &d) in gp.data_mut().iter_mut().zip(&gy.data()[offset * c..(offset + pr) * c]) {
                        *g += d;
                    }
                    offset += pr;
                }
            }
            Op::MeanRows { x } => {
                let (r, c) = self.nodes[*x].out.shape();
                let gx = self.grad_of(grads, *x);
                let inv = 1.0 / r as f64;
                for i in 0..r {
                    for j in 0..c {
                        gx.data_mut()[i * c + j] += gy.data()[j] * inv;
                    }
                }
            }
            Op::MeanCols { x } => {
                let (r, c) = self.nodes[*x].out.shape();
                let gx = self.grad_of(grads, *x);
                let inv = 1.0 / c as f64;
                for i in 0..r {
                    for j in 0..c {
                        gx.data_mut()[i * c + j] += gy.data()[i] * inv;
                    }
                }
            }
            Op::SumAll { x } => {
                let g = gy.data()[0];
                let gx = self.grad_of(grads, *x);
                for v in gx.data_mut() {
                    *v += g;
                }
            }
            Op::Selu { x } => {
                let xv = self.nodes[*x].out.data().to_vec();
                let gx = self.grad_of(grads, *x);
                for ((g, &d), &v) in gx.data_mut().iter_mut().zip(gy.data()).zip(&xv) {
                    let slope = if v > 0.0 { SELU_LAMBDA } else { SELU_LAMBDA * SELU_ALPHA * v.exp() };
                    *g += d * slope;
                }
            }
            Op::Sigmoid { x } => {
                let yv = self.nodes[i].out.data().to_vec();
                let gx = self.grad_of(grads, *x);
                for ((g, &d), &y) in gx.data_mut().iter_mut().zip(gy.data()).zip(&yv) {
                    *g += d * y * (1.0 - y);
                }
            }
            Op::Tanh { x } => {
                let yv = self.nodes[i].out.data().to_vec();
                let gx = self.grad_of(grads, *x);
                for ((g, &d), &y) in gx.data_mut().iter_mut().zip(gy.data()).zip(&yv) {
                    *g += d * (1.0 - y * y);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.nodes[*x].out.data().to_vec();
                let gx = self.grad_of(grads, *x);
                for ((g, &d), &v) in gx.data_mut().iter_mut().zip(gy.data()).zip(&xv) {
                    *g += d * if v >= 0.0 { 1.0 } else { *slope };
                }
            }
            Op::RowSoftmax { x } | Op::MaskedRowSoftmax { x, .. } => {
                // dx = y .* (dy - sum_row(dy .* y)); masked entries have y = 0.
                let y = &self.nodes[i].out;
                let (r, c) = y.shape();
                let gx = self.grad_of(grads, *x);
                for row in 0..r {
                    let dot: f64 = (0..c).map(|j| gy.data()[row * c + j] * y.data()[row * c + j]).sum();
                    for j in 0..c {
                        let yv = y.data()[row * c + j];
                        gx.data_mut()[row * c + j] += yv * (gy.data()[row * c + j] - dot);
                    }
                }
            }
            Op::RowLogSoftmax { x } => {
                // dx = dy - softmax .* sum_row(dy)
                let y = &self.nodes[i].out;
                let (r, c) = y.shape();
                let gx = self.grad_of(grads, *x);
                for row in 0..r {
                    let s: f64 = (0..c).map(|j| gy.data()[row * c + j]).sum();
                    for j in 0..c {
                        let p = y.data()[row * c + j].exp();
                        gx.data_mut()[row * c + j] += gy.data()[row * c + j] - p * s;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, ctx } => {
                let xv = &self.nodes[*x].out;
                let g = &self.nodes[*gamma].out;
                let (r, c) = xv.shape();
                // gamma and beta grads
                {
                    let gg = self.grad_of(grads, *gamma);
                    for row in 0..r {
                        for j in 0..c {
                            let xhat = (xv.data()[row * c + j] - ctx.mean[row]) * ctx.inv_std[row];
                            gg.data_mut()[j] += gy.data()[row * c + j] * xhat;
                        }
                    }
                }
                {
                    let gb = self.grad_of(grads, *beta);
                    for row in 0..r {
                        for j in 0..c {
                            gb.data_mut()[j] += gy.data()[row * c + j];
                        }
                    }
                }
                let gvals = g.data().to_vec();
                let gx = self.grad_of(grads, *x);
                for row in 0..r {
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..c {
                        let dxhat = gy.data()[row * c + j] * gvals[j];
                        let xhat = (xv.data()[row * c + j] - ctx.mean[row]) * ctx.inv_std[row];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let n = c as f64;
                    for j in 0..c {
                        let dxhat = gy.data()[row * c + j] * gvals[j];
                        let xhat = (xv.data()[row * c + j] - ctx.mean[row]) * ctx.inv_std[row];
                        gx.data_mut()[row * c + j] +=
                            ctx.inv_std[row] / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, ctx } => {
                let xv = &self.nodes[*x].out;
                let g = &self.nodes[*gamma].out;
                let (r, c) = xv.shape();
                {
                    let gg = self.grad_of(grads, *gamma);
                    for row in 0..r {
                        for j in 0..c {
                            let xhat = (xv.data()[row * c + j] - ctx.mean[j]) * ctx.inv_std[j];
                            gg.data_mut()[j] += gy.data()[row * c + j] * xhat;
                        }
                    }
                }
                {
                    let gb = self.grad_of(grads, *beta);
                    for row in 0..r {
                        for j in 0..c {
                            gb.data_mut()[j] += gy.data()[row * c + j];
                        }
                    }
                }
                let gvals = g.data().to_vec();
                let gx = self.grad_of(grads, *x);
                if ctx.train {
                    // Batch statistics depend on x.
                    let n = r as f64;
                    for j in 0..c {
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for row in 0..r {
                            let dxhat = gy.data()[row * c + j] * gvals[j];
                            let xhat = (xv.data()[row * c + j] - ctx.mean[j]) * ctx.inv_std[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for row in 0..r {
                            let dxhat = gy.data()[row * c + j] * gvals[j];
                            let xhat = (xv.data()[row * c + j] - ctx.mean[j]) * ctx.inv_std[j];
                            gx.data_mut()[row * c + j] +=
                                ctx.inv_std[j] / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                        }
                    }
                } else {
                    // Running statistics are constants.
                    for row in 0..r {
                        for j in 0..c {
                            gx.data_mut()[row * c + j] += gy.data()[row * c + j] * gvals[j] * ctx.inv_std[j];
                        }
                    }
                }
            }
            Op::Transpose { x } => {
                let gt = gy.transpose();
                accumulate(self.grad_of(grads, *x), &gt);
            }
            Op::SliceRows { x, start, len } => {
                let c = gy.cols();
                let gx = self.grad_of(grads, *x);
                for i in 0..*len {
                    for j in 0..c {
                        gx.data_mut()[(start + i) * c + j] += gy.data()[i * c + j];
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                let xc = self.nodes[*x].out.cols();
                let r = gy.rows();
                let gx = self.grad_of(grads, *x);
                for i in 0..r {
                    for j in 0..*len {
                        gx.data_mut()[i * xc + start + j] += gy.data()[i * len + j];
                    }
                }
            }
            Op::GatherRows { x, indices } => {
                let c = gy.cols();
                let gx = self.grad_of(grads, *x);
                for (out_row, &src) in indices.iter().enumerate() {
                    for j in 0..c {
                        gx.data_mut()[src * c + j] += gy.data()[out_row * c + j];
                    }
                }
            }
            Op::TileRows { x, times } => {
                let (xr, c) = self.nodes[*x].out.shape();
                let gx = self.grad_of(grads, *x);
                for t in 0..*times {
                    for i in 0..xr {
                        for j in 0..c {
                            gx.data_mut()[i * c + j] += gy.data()[(t * xr + i) * c + j];
                        }
                    }
                }
            }
            Op::BlockLmul { x, mats } => {
                // dX_b += M_b^T @ dY_b
                let c = gy.cols();
                let gx = self.grad_of(grads, *x);
                let mut in_off = 0;
                let mut out_off = 0;
                for m in mats.iter() {
                    unsafe {
                        matrixmultiply::dgemm(
                            m.cols(),
                            m.rows(),
                            c,
                            1.0,
                            m.data().as_ptr(),
                            1,
                            m.cols() as isize,
                            gy.data().as_ptr().add(out_off * c),
                            c as isize,
                            1,
                            1.0,
                            gx.data_mut().as_mut_ptr().add(in_off * c),
                            c as isize,
                            1,
                        );
                    }
                    in_off += m.cols();
                    out_off += m.rows();
                }
            }
            Op::BlockMeanRows { x, block } => {
                let c = gy.cols();
                let nb = gy.rows();
                let inv = 1.0 / *block as f64;
                let gx = self.grad_of(grads, *x);
                for b in 0..nb {
                    for i in 0..*block {
                        for j in 0..c {
                            gx.data_mut()[(b * block + i) * c + j] += gy.data()[b * c + j] * inv;
                        }
                    }
                }
            }
            Op::BlockMaxRows { x, block, argmax } => {
                let c = gy.cols();
                let nb = gy.rows();
                let gx = self.grad_of(grads, *x);
                for b in 0..nb {
                    for j in 0..c {
                        let i = argmax[b * c + j] as usize;
                        gx.data_mut()[(b * block + i) * c + j] += gy.data()[b * c + j];
                    }
                }
            }
            Op::BernoulliEntropy { x } => {
                let xv = self.nodes[*x].out.data().to_vec();
                let gx = self.grad_of(grads, *x);
                for ((g, &d), &p) in gx.data_mut().iter_mut().zip(gy.data()).zip(&xv) {
                    let p = p.clamp(1e-12, 1.0 - 1e-12);
                    *g += d * ((1.0 - p).ln() - p.ln());
                }
            }
            Op::SymmetricEdgeExpand { x, edges } => {
                let nn = gy.cols();
                let gx = self.grad_of(grads, *x);
                for (e, &(i, j)) in edges.iter().enumerate() {
                    gx.data_mut()[e] += gy.data()[i * nn + j] + gy.data()[j * nn + i];
                }
            }
        }
    }
}

fn accumulate(acc: &mut Tensor, g: &Tensor) {
    debug_assert_eq!(acc.shape(), g.shape());
    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add { .. } => "add",
        Op::Scale { .. } => "scale",
        Op::Hadamard { .. } => "hadamard",
        Op::ConcatCols { .. } => "concat_cols",
        Op::ConcatRows { .. } => "concat_rows",
        Op::MeanRows { .. } => "mean_rows",
        Op::MeanCols { .. } => "mean_cols",
        Op::SumAll { .. } => "sum_all",
        Op::Selu { .. } => "selu",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Tanh { .. } => "tanh",
        Op::LeakyRelu { .. } => "leaky_relu",
        Op::RowSoftmax { .. } => "row_softmax",
        Op::RowLogSoftmax { .. } => "row_log_softmax",
        Op::MaskedRowSoftmax { .. } => "masked_row_softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::BatchNorm { .. } => "batch_norm_1d",
        Op::Transpose { .. } => "transpose",
        Op::SliceRows { .. } => "slice_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::GatherRows { .. } => "gather_rows",
        Op::TileRows { .. } => "tile_rows",
        Op::BlockLmul { .. } => "block_lmul",
        Op::BlockMeanRows { .. } => "block_mean_rows",
        Op::BlockMaxRows { .. } => "block_max_rows",
        Op::BernoulliEntropy { .. } => "bernoulli_entropy",
        Op::SymmetricEdgeExpand { .. } => "symmetric_edge_expand",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selu_fixes_origin_and_matches_direct_evaluation() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[0.0, 0.5, -1.0])).unwrap();
        let y = tape.selu(x).unwrap();
        let out = tape.value(y).data();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - SELU_LAMBDA * 0.5).abs() < 1e-15);
        assert!((out[1] - 0.5253504936777402).abs() < 1e-12);
        assert!((out[2] - SELU_LAMBDA * SELU_ALPHA * ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[0.0, 0.0, 0.0])).unwrap();
        let y = tape.row_softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_log_softmax_agrees() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::from_vec(2, 3, vec![1.0, -2.0, 0.5, 100.0, 100.0, -100.0]).unwrap())
            .unwrap();
        let s = tape.row_softmax(x).unwrap();
        let ls = tape.row_log_softmax(x).unwrap();
        for r in 0..2 {
            let sum: f64 = tape.value(s).row_slice(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        for (a, b) in tape.value(s).data().iter().zip(tape.value(ls).data()) {
            assert!((a.ln() - b).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), 0).unwrap();
        let loss = tape.sum_all(x).unwrap();
        let grads = tape.backward(loss, 1).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_quadratic() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(&[1.0, 2.0]), 0).unwrap();
        let sq = tape.hadamard(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = tape.backward(loss, 1).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_nonscalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::row(&[1.0, 2.0]), 0).unwrap();
        let err = tape.backward(x, 1).unwrap_err();
        assert!(matches!(err, Error::Contract { .. }));
    }

    #[test]
    fn nonfinite_leaf_is_rejected() {
        let mut tape = Tape::new();
        assert!(matches!(tape.leaf(Tensor::row(&[1.0, f64::NAN])), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn batch_norm_train_normalizes_batch() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::from_vec(4, 2, vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]).unwrap())
            .unwrap();
        let gamma = tape.leaf(Tensor::row(&[1.0, 1.0])).unwrap();
        let beta = tape.leaf(Tensor::row(&[0.0, 0.0])).unwrap();
        let mut state = BnState::new(2);
        let y = tape.batch_norm_1d(x, gamma, beta, &mut state, true).unwrap();
        let out = tape.value(y);
        for j in 0..2 {
            let mean: f64 = (0..4).map(|i| out.get(i, j)).sum::<f64>() / 4.0;
            let var: f64 = (0..4).map(|i| out.get(i, j).powi(2)).sum::<f64>() / 4.0 - mean * mean;
            assert!(mean.abs() < 1e-9, "mean {}", mean);
            assert!((var - 1.0).abs() < 1e-4, "var {}", var);
        }
        // Running stats moved toward the batch statistics.
        assert!((state.mean[0] - 0.1 * 2.5).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_train_rejects_batch_of_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[1.0, 2.0])).unwrap();
        let gamma = tape.leaf(Tensor::row(&[1.0, 1.0])).unwrap();
        let beta = tape.leaf(Tensor::row(&[0.0, 0.0])).unwrap();
        let mut state = BnState::new(2);
        assert!(tape.batch_norm_1d(x, gamma, beta, &mut state, true).is_err());
        assert!(tape.batch_norm_1d(x, gamma, beta, &mut state, false).is_ok());
    }

    #[test]
    fn masked_softmax_zeroes_masked_entries_exactly() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(2, 3, vec![5.0, 1.0, 2.0, 0.0, 3.0, 1.0]).unwrap()).unwrap();
        let mask = Arc::new(vec![true, false, true, true, true, true]);
        let y = tape.masked_row_softmax(x, mask).unwrap();
        let out = tape.value(y);
        assert_eq!(out.get(0, 1), 0.0);
        let s0: f64 = out.row_slice(0).iter().sum();
        assert!((s0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn block_ops_roundtrip() {
        let mut tape = Tape::new();
        // two blocks of 2 rows
        let x = tape
            .leaf(Tensor::from_vec(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap())
            .unwrap();
        let m1 = Arc::new(Tensor::identity(2));
        let m2 = Arc::new(Tensor::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap());
        let y = tape.block_lmul(x, Arc::new(vec![m1, m2])).unwrap();
        let out = tape.value(y);
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0, 7.0, 8.0, 5.0, 6.0]);
        let pooled = tape.block_mean_rows(y, 2).unwrap();
        assert_eq!(tape.value(pooled).data(), &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn symmetric_edge_expand_layout() {
        let mut tape = Tape::new();
        let v = tape.param(Tensor::row(&[0.25, 0.75]), 0).unwrap();
        let edges = Arc::new(vec![(0usize, 1usize), (1, 2)]);
        let m = tape.symmetric_edge_expand(v, edges, 3).unwrap();
        let out = tape.value(m);
        assert_eq!(out.get(0, 1), 0.25);
        assert_eq!(out.get(1, 0), 0.25);
        assert_eq!(out.get(2, 1), 0.75);
        assert_eq!(out.get(0, 0), 1.0);
        assert_eq!(out.get(0, 2), 1.0);
        // gradient gathers both symmetric positions
        let s = tape.sum_all(m).unwrap();
        let grads = tape.backward(s, 1).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[2.0, 2.0]);
    }
}
