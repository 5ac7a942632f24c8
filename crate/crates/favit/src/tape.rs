//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Operations execute eagerly and append a record; `backward` replays the
//! records in exact reverse order, accumulating vector-Jacobian products.
//! Every node carries a `needs_grad` flag propagated from trainable leaves,
//! so the backward pass never does work for (and never writes gradients
//! into) frozen parameter subtrees.
//!
//! Determinism: all reductions run left-to-right in a fixed order, and the
//! replay order is the exact reverse of execution order. Every forward output
//! and every accumulated gradient is checked for NaN/Inf; a non-finite value
//! aborts with the name of the producing operation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a · b
    Matmul { a: NodeId, b: NodeId },
    /// a + b, preserving `a`'s bits wherever the addend is (signed) zero so
    /// that zero-initialized adapters are bit-exact no-ops.
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// x * c with constant c.
    Scale { x: NodeId, c: f64 },
    /// x + c with constant c (the constant is not needed for the backward).
    AddScalar { x: NodeId },
    /// x * s with s a scalar (1-element) node, broadcast over x.
    ScaleBy { x: NodeId, s: NodeId },
    Sigmoid { x: NodeId },
    Gelu { x: NodeId },
    Exp { x: NodeId },
    Log { x: NodeId },
    Clamp { x: NodeId, lo: f64, hi: f64 },
    SoftmaxRows { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, inv_std: Vec<f64> },
    /// Cosine similarity of two vectors.
    CosSim { u: NodeId, v: NodeId },
    /// Column-mean of a 2-D tensor: r×c → c.
    MeanRows { x: NodeId },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    /// Columns [start, start+width) of a 2-D tensor.
    SliceCols { x: NodeId, start: usize, width: usize },
    /// One row of a 2-D tensor, as a vector.
    SliceRow { x: NodeId, row: usize },
    /// Horizontal concatenation of equally-tall 2-D tensors.
    ConcatCols { parts: Vec<NodeId> },
    /// Single element as a scalar node.
    Index { x: NodeId, i: usize },
    /// x: r×c plus a length-c vector broadcast over rows.
    AddBiasRow { x: NodeId, b: NodeId },
    Reshape { x: NodeId },
    /// 2-D transpose.
    Transpose { x: NodeId },
    /// C×H×W → [grid², C·(H/grid)·(W/grid)]: cell (gi,gj) of a grid×grid
    /// partition flattened in (channel, row, column) order. Used by both the
    /// patch embedding and the CNN-to-token projection.
    PatchFlatten { x: NodeId, grid: usize },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        ho: usize,
        wo: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::ScaleBy { .. } => "scale_by",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Gelu { .. } => "gelu",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Clamp { .. } => "clamp",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::LayerNorm { .. } => "layernorm",
            Op::CosSim { .. } => "cosine_similarity",
            Op::MeanRows { .. } => "mean_rows",
            Op::SumAll { .. } => "sum_all",
            Op::MeanAll { .. } => "mean_all",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRow { .. } => "slice_row",
            Op::ConcatCols { .. } => "concat_cols",
            Op::Index { .. } => "index",
            Op::AddBiasRow { .. } => "add_bias_row",
            Op::Reshape { .. } => "reshape",
            Op::Transpose { .. } => "transpose",
            Op::PatchFlatten { .. } => "patch_flatten",
            Op::Conv2d { .. } => "conv2d",
        }
    }
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op,
    needs_grad: bool,
    trainable_leaf: bool,
}

/// The tape. One per training step (or per forward evaluation).
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

pub const LAYERNORM_EPS: f64 = 1e-6;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Accumulated gradient of a node after `backward` (None if no gradient
    /// flowed to it, or it did not require one).
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }

    fn push(&mut self, value: Tensor<S>, op: Op, needs_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                context: None,
            });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            trainable_leaf: false,
        });
        self.grads.push(None);
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Register a constant input (no gradient will be requested for it).
    pub fn input(&mut self, value: Tensor<S>) -> Result<NodeId> {
        self.push(value, Op::Leaf, false)
    }

    /// Register a parameter leaf. Gradients are tracked only when
    /// `trainable` is true.
    pub fn param(&mut self, value: Tensor<S>, trainable: bool) -> Result<NodeId> {
        let id = self.push(value, Op::Leaf, trainable)?;
        self.nodes[id.0].trainable_leaf = trainable;
        Ok(id)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn require_2d(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("expected 2-D tensor, got {:?}", s),
            });
        }
        Ok((s[0], s[1]))
    }

    // ── Forward operations ───────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.require_2d(a, "matmul")?;
        let (kb, n) = self.require_2d(b, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("inner extents differ: {}×{} vs {}×{}", m, ka, kb, n),
            });
        }
        let mut out = Tensor::zeros(&[m, n]);
        tensor::matmul(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            m,
            ka,
            n,
        );
        let needs = self.needs(&[a, b]);
        self.push(out, Op::Matmul { a, b }, needs)
    }

    /// Element-wise sum. Wherever `b` is ±0, the output reuses `a`'s exact
    /// bits, so adding an all-zero delta is a bit-exact identity.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let out: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| if y == S::ZERO { x } else { x + y })
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a, b]);
        self.push(Tensor::new(shape, out), Op::Add { a, b }, needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let out: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a, b]);
        self.push(Tensor::new(shape, out), Op::Sub { a, b }, needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let out: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a, b]);
        self.push(Tensor::new(shape, out), Op::Mul { a, b }, needs)
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let cs = S::from_f64(c);
        let out: Vec<S> = self.value(x).data().iter().map(|&v| v * cs).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        self.push(Tensor::new(shape, out), Op::Scale { x, c }, needs)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let cs = S::from_f64(c);
        let out: Vec<S> = self.value(x).data().iter().map(|&v| v + cs).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        self.push(Tensor::new(shape, out), Op::AddScalar { x }, needs)
    }

    /// Multiply every element of `x` by the scalar node `s`. Wherever the
    /// product is ±0 because s is 0, the output is exactly +0 times nothing —
    /// combined with `add`'s zero guard this makes `x + s·y` a bit-exact
    /// identity at s = 0.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "scale_by",
                detail: format!("scale operand must be scalar, got {:?}", self.shape(s)),
            });
        }
        let sv = self.value(s).data()[0];
        let out: Vec<S> = self.value(x).data().iter().map(|&v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x, s]);
        self.push(Tensor::new(shape, out), Op::ScaleBy { x, s }, needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<S> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| S::ONE / (S::ONE + (-v).exp()))
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        self.push(Tensor::new(shape, out), Op::Sigmoid { x }, needs)
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<S> = self.value(x).data().iter().map(|&v| gelu_fwd(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        self.push(Tensor::new(shape, out), Op::Gelu { x }, needs)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<S> = self.value(x).data().iter().map(|&v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        self.push(Tensor::new(shape, out), Op::Exp { x }, needs)
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).data().iter().any(|&v| v <= S::ZERO) {
            return Err(Error::InvalidInput {
                op: "log",
                detail: "log of non-positive value".into(),
            });
        }
        let out: Vec<S> = self.value(x).data().iter().map(|&v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        self.push(Tensor::new(shape, out), Op::Log { x }, needs)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let (l, h) = (S::from_f64(lo), S::from_f64(hi));
        let out: Vec<S> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v.max(l).min(h))
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        self.push(Tensor::new(shape, out), Op::Clamp { x, lo, hi }, needs)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.require_2d(x, "softmax_rows")?;
        let xv = self.value(x).data();
        let mut out = vec![S::ZERO; r * c];
        softmax_rows_raw(xv, &mut out, r, c);
        let needs = self.needs(&[x]);
        self.push(Tensor::new(vec![r, c], out), Op::SoftmaxRows { x }, needs)
    }

    /// Layer normalization over the last axis with affine parameters,
    /// eps = 1e-6.
    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (r, c) = self.require_2d(x, "layernorm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                detail: format!(
                    "affine shapes {:?}/{:?} vs row width {}",
                    self.shape(gamma),
                    self.shape(beta),
                    c
                ),
            });
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut out = vec![S::ZERO; r * c];
        let mut inv_std = vec![0.0f64; r];
        let eps = S::from_f64(LAYERNORM_EPS);
        let cn = S::from_f64(c as f64);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mut mean = S::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean / cn;
            let mut var = S::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var / cn;
            let istd = S::ONE / (var + eps).sqrt();
            inv_std[i] = istd.to_f64();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * istd * g[j] + be[j];
            }
        }
        let needs = self.needs(&[x, gamma, beta]);
        self.push(
            Tensor::new(vec![r, c], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                inv_std,
            },
            needs,
        )
    }

    /// Cosine similarity of two vectors; errors on zero-norm input.
    pub fn cosine_similarity(&mut self, u: NodeId, v: NodeId) -> Result<NodeId> {
        let su = self.shape(u).to_vec();
        if su != self.shape(v) || su.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "cosine_similarity",
                detail: format!("{:?} vs {:?}", su, self.shape(v)),
            });
        }
        let (uv, vv) = (self.value(u).data(), self.value(v).data());
        let mut dot = S::ZERO;
        let mut nu = S::ZERO;
        let mut nv = S::ZERO;
        for i in 0..uv.len() {
            dot += uv[i] * vv[i];
            nu += uv[i] * uv[i];
            nv += vv[i] * vv[i];
        }
        if nu == S::ZERO || nv == S::ZERO {
            return Err(Error::InvalidInput {
                op: "cosine_similarity",
                detail: "zero-norm input".into(),
            });
        }
        let c = dot / (nu.sqrt() * nv.sqrt());
        let needs = self.needs(&[u, v]);
        self.push(Tensor::scalar(c), Op::CosSim { u, v }, needs)
    }

    /// Mean over rows: r×c → c.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.require_2d(x, "mean_rows")?;
        let xv = self.value(x).data();
        let rn = S::from_f64(r as f64);
        let mut out = vec![S::ZERO; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += xv[i * c + j];
            }
        }
        for v in &mut out {
            *v = *v / rn;
        }
        let needs = self.needs(&[x]);
        self.push(Tensor::new(vec![c], out), Op::MeanRows { x }, needs)
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let mut s = S::ZERO;
        for &v in self.value(x).data() {
            s += v;
        }
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll { x }, needs)
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel();
        let mut s = S::ZERO;
        for &v in self.value(x).data() {
            s += v;
        }
        let needs = self.needs(&[x]);
        self.push(
            Tensor::scalar(s / S::from_f64(n as f64)),
            Op::MeanAll { x },
            needs,
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let (r, c) = self.require_2d(x, "slice_cols")?;
        if start + width > c {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                detail: format!("columns [{start}, {}) out of width {c}", start + width),
            });
        }
        let xv = self.value(x).data();
        let mut out = vec![S::ZERO; r * width];
        for i in 0..r {
            out[i * width..(i + 1) * width]
                .copy_from_slice(&xv[i * c + start..i * c + start + width]);
        }
        let needs = self.needs(&[x]);
        self.push(
            Tensor::new(vec![r, width], out),
            Op::SliceCols { x, start, width },
            needs,
        )
    }

    pub fn slice_row(&mut self, x: NodeId, row: usize) -> Result<NodeId> {
        let (r, c) = self.require_2d(x, "slice_row")?;
        if row >= r {
            return Err(Error::ShapeMismatch {
                op: "slice_row",
                detail: format!("row {row} out of {r}"),
            });
        }
        let out = self.value(x).data()[row * c..(row + 1) * c].to_vec();
        let needs = self.needs(&[x]);
        self.push(Tensor::new(vec![c], out), Op::SliceRow { x, row }, needs)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                detail: "no parts".into(),
            });
        }
        let (r, _) = self.require_2d(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (rp, cp) = self.require_2d(p, "concat_cols")?;
            if rp != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts differ: {rp} vs {r}"),
                });
            }
            widths.push(cp);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![S::ZERO; r * total];
        let mut offset = 0;
        for (idx, &p) in parts.iter().enumerate() {
            let w = widths[idx];
            let pv = self.value(p).data();
            for i in 0..r {
                out[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let needs = self.needs(parts);
        self.push(
            Tensor::new(vec![r, total], out),
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        )
    }

    pub fn index(&mut self, x: NodeId, i: usize) -> Result<NodeId> {
        if i >= self.value(x).numel() {
            return Err(Error::ShapeMismatch {
                op: "index",
                detail: format!("index {i} out of {}", self.value(x).numel()),
            });
        }
        let v = self.value(x).data()[i];
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(v), Op::Index { x, i }, needs)
    }

    pub fn add_bias_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.require_2d(x, "add_bias_row")?;
        if self.shape(b) != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_bias_row",
                detail: format!("bias {:?} vs row width {c}", self.shape(b)),
            });
        }
        let xv = self.value(x).data();
        let bv = self.value(b).data();
        let mut out = vec![S::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xv[i * c + j] + bv[j];
            }
        }
        let needs = self.needs(&[x, b]);
        self.push(Tensor::new(vec![r, c], out), Op::AddBiasRow { x, b }, needs)
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.require_2d(x, "transpose")?;
        let mut out = vec![S::ZERO; r * c];
        tensor::transpose(self.value(x).data(), &mut out, r, c);
        let needs = self.needs(&[x]);
        self.push(Tensor::new(vec![c, r], out), Op::Transpose { x }, needs)
    }

    /// Partition a C×H×W tensor into a grid×grid array of cells and flatten
    /// each cell in (channel, row, column) order: → [grid², C·(H/g)·(W/g)].
    pub fn patch_flatten(&mut self, x: NodeId, grid: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "patch_flatten",
                detail: format!("expected C×H×W, got {:?}", xs),
            });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if h % grid != 0 || w % grid != 0 {
            return Err(Error::ShapeMismatch {
                op: "patch_flatten",
                detail: format!("extent {h}×{w} not divisible by grid {grid}"),
            });
        }
        let (ch, cw) = (h / grid, w / grid);
        let width = c * ch * cw;
        let xv = self.value(x).data();
        let mut out = vec![S::ZERO; grid * grid * width];
        for gi in 0..grid {
            for gj in 0..grid {
                let row = &mut out[(gi * grid + gj) * width..][..width];
                let mut idx = 0;
                for cc in 0..c {
                    for di in 0..ch {
                        let base = (cc * h + gi * ch + di) * w + gj * cw;
                        row[idx..idx + cw].copy_from_slice(&xv[base..base + cw]);
                        idx += cw;
                    }
                }
            }
        }
        let needs = self.needs(&[x]);
        self.push(
            Tensor::new(vec![grid * grid, width], out),
            Op::PatchFlatten { x, grid },
            needs,
        )
    }

    /// Metadata-only reshape.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape(x), shape),
            });
        }
        let out = Tensor::new(shape.to_vec(), self.value(x).data().to_vec());
        let needs = self.needs(&[x]);
        self.push(out, Op::Reshape { x }, needs)
    }

    /// 2-D cross-correlation: x: C×H×W, w: O×C×kh×kw, b: O → O×Ho×Wo.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("x {:?}, w {:?}", xs, ws),
            });
        }
        let (c, h, wth) = (xs[0], xs[1], xs[2]);
        let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input channels {c} vs kernel channels {wc}"),
            });
        }
        if self.shape(b) != [o] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("bias {:?} vs {o} output channels", self.shape(b)),
            });
        }
        let ho = tensor::conv_out_extent(h, kh, stride, pad)?;
        let wo = tensor::conv_out_extent(wth, kw, stride, pad)?;
        let mut out = Tensor::zeros(&[o, ho, wo]);
        tensor::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            c,
            h,
            wth,
            o,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
            out.data_mut(),
        );
        let needs = self.needs(&[x, w, b]);
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                ho,
                wo,
            },
            needs,
        )
    }

    // ── Backward ─────────────────────────────────────────────────────

    fn accumulate(&mut self, id: NodeId, grad: &[S]) -> Result<()> {
        if !self.nodes[id.0].needs_grad {
            return Ok(());
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: self.nodes[id.0].op.name(),
                context: Some("gradient".into()),
            });
        }
        match &mut self.grads[id.0] {
            Some(acc) => tensor::axpy_add(acc, grad),
            None => self.grads[id.0] = Some(grad.to_vec()),
        }
        Ok(())
    }

    /// Reverse pass from a scalar loss node. Visits operations in exact
    /// reverse execution order.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.shape(loss)),
            });
        }
        if !self.nodes[loss.0].needs_grad {
            // Loss does not depend on any trainable parameter; nothing to do.
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![S::ONE]);
        for idx in (0..=loss.0).rev() {
            if self.grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            let dy = self.grads[idx].clone().unwrap();
            self.backward_op(NodeId(idx), &op, &dy)?;
            // Intermediate gradients are no longer needed once propagated.
            if !self.nodes[idx].trainable_leaf {
                self.grads[idx] = None;
            }
        }
        Ok(())
    }

    fn backward_op(&mut self, out: NodeId, op: &Op, dy: &[S]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.nodes[a.0].needs_grad {
                    // dA = dY · Bᵀ
                    let mut da = vec![S::ZERO; m * k];
                    tensor::matmul_bt(dy, self.value(*b).data(), &mut da, m, n, k);
                    self.accumulate(*a, &da)?;
                }
                if self.nodes[b.0].needs_grad {
                    // dB = Aᵀ · dY
                    let mut db = vec![S::ZERO; k * n];
                    tensor::matmul_tn(self.value(*a).data(), dy, &mut db, k, m, n);
                    self.accumulate(*b, &db)?;
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, dy)?;
                self.accumulate(*b, dy)?;
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, dy)?;
                let neg: Vec<S> = dy.iter().map(|&v| -v).collect();
                self.accumulate(*b, &neg)?;
            }
            Op::Mul { a, b } => {
                if self.nodes[a.0].needs_grad {
                    let g: Vec<S> = dy
                        .iter()
                        .zip(self.value(*b).data().iter())
                        .map(|(&d, &v)| d * v)
                        .collect();
                    self.accumulate(*a, &g)?;
                }
                if self.nodes[b.0].needs_grad {
                    let g: Vec<S> = dy
                        .iter()
                        .zip(self.value(*a).data().iter())
                        .map(|(&d, &v)| d * v)
                        .collect();
                    self.accumulate(*b, &g)?;
                }
            }
            Op::Scale { x, c } => {
                let cs = S::from_f64(*c);
                let g: Vec<S> = dy.iter().map(|&v| v * cs).collect();
                self.accumulate(*x, &g)?;
            }
            Op::AddScalar { x, .. } => {
                self.accumulate(*x, dy)?;
            }
            Op::ScaleBy { x, s } => {
                let sv = self.value(*s).data()[0];
                if self.nodes[x.0].needs_grad {
                    let g: Vec<S> = dy.iter().map(|&v| v * sv).collect();
                    self.accumulate(*x, &g)?;
                }
                if self.nodes[s.0].needs_grad {
                    let xv = self.value(*x).data();
                    let mut acc = S::ZERO;
                    for i in 0..dy.len() {
                        acc += dy[i] * xv[i];
                    }
                    self.accumulate(*s, &[acc])?;
                }
            }
            Op::Sigmoid { x } => {
                let yv = self.value(out).data();
                let g: Vec<S> = dy
                    .iter()
                    .zip(yv.iter())
                    .map(|(&d, &y)| d * y * (S::ONE - y))
                    .collect();
                self.accumulate(*x, &g)?;
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                let g: Vec<S> = dy
                    .iter()
                    .zip(xv.iter())
                    .map(|(&d, &v)| d * gelu_bwd(v))
                    .collect();
                self.accumulate(*x, &g)?;
            }
            Op::Exp { x } => {
                let yv = self.value(out).data();
                let g: Vec<S> = dy.iter().zip(yv.iter()).map(|(&d, &y)| d * y).collect();
                self.accumulate(*x, &g)?;
            }
            Op::Log { x } => {
                let xv = self.value(*x).data();
                let g: Vec<S> = dy.iter().zip(xv.iter()).map(|(&d, &v)| d / v).collect();
                self.accumulate(*x, &g)?;
            }
            Op::Clamp { x, lo, hi } => {
                let (l, h) = (S::from_f64(*lo), S::from_f64(*hi));
                let xv = self.value(*x).data();
                let g: Vec<S> = dy
                    .iter()
                    .zip(xv.iter())
                    .map(|(&d, &v)| if v >= l && v <= h { d } else { S::ZERO })
                    .collect();
                self.accumulate(*x, &g)?;
            }
            Op::SoftmaxRows { x } => {
                let (r, c) = (self.shape(out)[0], self.shape(out)[1]);
                let yv = self.value(out).data();
                let mut g = vec![S::ZERO; r * c];
                for i in 0..r {
                    let yr = &yv[i * c..(i + 1) * c];
                    let dr = &dy[i * c..(i + 1) * c];
                    let mut dot = S::ZERO;
                    for j in 0..c {
                        dot += dr[j] * yr[j];
                    }
                    for j in 0..c {
                        g[i * c + j] = yr[j] * (dr[j] - dot);
                    }
                }
                self.accumulate(*x, &g)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                inv_std,
            } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let cn = S::from_f64(c as f64);
                // Recompute x̂ from saved inverse std.
                let mut dgamma = vec![S::ZERO; c];
                let mut dbeta = vec![S::ZERO; c];
                let mut dx = vec![S::ZERO; r * c];
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let dr = &dy[i * c..(i + 1) * c];
                    let istd = S::from_f64(inv_std[i]);
                    let mut mean = S::ZERO;
                    for &v in row {
                        mean += v;
                    }
                    mean = mean / cn;
                    // dxhat, plus row statistics for the dx formula.
                    let mut sum_dxhat = S::ZERO;
                    let mut sum_dxhat_xhat = S::ZERO;
                    let mut xhat = vec![S::ZERO; c];
                    let mut dxhat = vec![S::ZERO; c];
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * istd;
                        dxhat[j] = dr[j] * gv[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat[j];
                        dgamma[j] += dr[j] * xhat[j];
                        dbeta[j] += dr[j];
                    }
                    let inv_c = S::ONE / cn;
                    for j in 0..c {
                        dx[i * c + j] = istd
                            * (dxhat[j]
                                - sum_dxhat * inv_c
                                - xhat[j] * sum_dxhat_xhat * inv_c);
                    }
                }
                self.accumulate(*x, &dx)?;
                self.accumulate(*gamma, &dgamma)?;
                self.accumulate(*beta, &dbeta)?;
            }
            Op::CosSim { u, v } => {
                let uv = self.value(*u).data().to_vec();
                let vv = self.value(*v).data().to_vec();
                let mut dot = S::ZERO;
                let mut nu2 = S::ZERO;
                let mut nv2 = S::ZERO;
                for i in 0..uv.len() {
                    dot += uv[i] * vv[i];
                    nu2 += uv[i] * uv[i];
                    nv2 += vv[i] * vv[i];
                }
                let nu = nu2.sqrt();
                let nv = nv2.sqrt();
                let cos = dot / (nu * nv);
                let d = dy[0];
                if self.nodes[u.0].needs_grad {
                    let g: Vec<S> = (0..uv.len())
                        .map(|i| d * (vv[i] / (nu * nv) - cos * uv[i] / nu2))
                        .collect();
                    self.accumulate(*u, &g)?;
                }
                if self.nodes[v.0].needs_grad {
                    let g: Vec<S> = (0..vv.len())
                        .map(|i| d * (uv[i] / (nu * nv) - cos * vv[i] / nv2))
                        .collect();
                    self.accumulate(*v, &g)?;
                }
            }
            Op::MeanRows { x } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let inv_r = S::ONE / S::from_f64(r as f64);
                let mut g = vec![S::ZERO; r * c];
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] = dy[j] * inv_r;
                    }
                }
                self.accumulate(*x, &g)?;
            }
            Op::SumAll { x } => {
                let g = vec![dy[0]; self.value(*x).numel()];
                self.accumulate(*x, &g)?;
            }
            Op::MeanAll { x } => {
                let n = self.value(*x).numel();
                let g = vec![dy[0] / S::from_f64(n as f64); n];
                self.accumulate(*x, &g)?;
            }
            Op::SliceCols { x, start, width } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut g = vec![S::ZERO; r * c];
                for i in 0..r {
                    g[i * c + start..i * c + start + width]
                        .copy_from_slice(&dy[i * width..(i + 1) * width]);
                }
                self.accumulate(*x, &g)?;
            }
            Op::SliceRow { x, row } => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut g = vec![S::ZERO; r * c];
                g[row * c..(row + 1) * c].copy_from_slice(dy);
                self.accumulate(*x, &g)?;
            }
            Op::ConcatCols { parts } => {
                let r = self.shape(out)[0];
                let total = self.shape(out)[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.nodes[p.0].needs_grad {
                        let mut g = vec![S::ZERO; r * w];
                        for i in 0..r {
                            g[i * w..(i + 1) * w]
                                .copy_from_slice(&dy[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(p, &g)?;
                    }
                    offset += w;
                }
            }
            Op::Index { x, i } => {
                let mut g = vec![S::ZERO; self.value(*x).numel()];
                g[*i] = dy[0];
                self.accumulate(*x, &g)?;
            }
            Op::AddBiasRow { x, b } => {
                self.accumulate(*x, dy)?;
                if self.nodes[b.0].needs_grad {
                    let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let mut g = vec![S::ZERO; c];
                    for i in 0..r {
                        for j in 0..c {
                            g[j] += dy[i * c + j];
                        }
                    }
                    self.accumulate(*b, &g)?;
                }
            }
            Op::Reshape { x } => {
                self.accumulate(*x, dy)?;
            }
            Op::Transpose { x } => {
                let (r, c) = (self.shape(out)[0], self.shape(out)[1]);
                let mut g = vec![S::ZERO; r * c];
                tensor::transpose(dy, &mut g, r, c);
                self.accumulate(*x, &g)?;
            }
            Op::PatchFlatten { x, grid } => {
                let xs = self.shape(*x).to_vec();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (ch, cw) = (h / grid, w / grid);
                let width = c * ch * cw;
                let mut g = vec![S::ZERO; c * h * w];
                for gi in 0..*grid {
                    for gj in 0..*grid {
                        let row = &dy[(gi * grid + gj) * width..][..width];
                        let mut idx = 0;
                        for cc in 0..c {
                            for di in 0..ch {
                                let base = (cc * h + gi * ch + di) * w + gj * cw;
                                g[base..base + cw].copy_from_slice(&row[idx..idx + cw]);
                                idx += cw;
                            }
                        }
                    }
                }
                self.accumulate(*x, &g)?;
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                ho,
                wo,
            } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (c, h, wth) = (xs[0], xs[1], xs[2]);
                let (o, kh, kw) = (ws[0], ws[2], ws[3]);
                let r = c * kh * kw;
                let p = ho * wo;
                // Columns are recomputed rather than saved; the extra im2col
                // keeps tape memory proportional to activations.
                let mut cols = vec![S::ZERO; r * p];
                tensor::im2col(
                    self.value(*x).data(),
                    c,
                    h,
                    wth,
                    kh,
                    kw,
                    *stride,
                    *pad,
                    *ho,
                    *wo,
                    &mut cols,
                );
                if self.nodes[w.0].needs_grad {
                    // dW = dY · colsᵀ
                    let mut dw = vec![S::ZERO; o * r];
                    tensor::matmul_bt(dy, &cols, &mut dw, o, p, r);
                    self.accumulate(*w, &dw)?;
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![S::ZERO; o];
                    for oc in 0..o {
                        for pp in 0..p {
                            db[oc] += dy[oc * p + pp];
                        }
                    }
                    self.accumulate(*b, &db)?;
                }
                if self.nodes[x.0].needs_grad {
                    // dcols = Wᵀ · dY, then scatter back to the image.
                    let mut dcols = vec![S::ZERO; r * p];
                    tensor::matmul_tn(self.value(*w).data(), dy, &mut dcols, r, o, p);
                    let mut dx = vec![S::ZERO; c * h * wth];
                    tensor::col2im_add(
                        &dcols, c, h, wth, kh, kw, *stride, *pad, *ho, *wo, &mut dx,
                    );
                    self.accumulate(*x, &dx)?;
                }
            }
        }
        Ok(())
    }
}

/// Row-wise softmax on a raw slice, max-subtracted.
pub fn softmax_rows_raw<S: Scalar>(x: &[S], out: &mut [S], r: usize, c: usize) {
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let mut mx = row[0];
        for &v in &row[1..] {
            mx = mx.max(v);
        }
        let mut sum = S::ZERO;
        for j in 0..c {
            let e = (row[j] - mx).exp();
            out[i * c + j] = e;
            sum += e;
        }
        for j in 0..c {
            out[i * c + j] = out[i * c + j] / sum;
        }
    }
}

/// GELU, tanh form: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
pub fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::ONE + u.tanh())
}

/// Exact derivative of the tanh-form GELU above.
pub fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::ONE - t * t;
    half * (S::ONE + t) + half * x * sech2 * c * (S::ONE + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec())
    }

    /// Central-difference gradient of a scalar-valued tape program, evaluated
    /// in f64. `build` must be a pure function of its input tensor.
    fn fd_grad<F>(build: F, x0: &[f64], shape: &[usize], h: f64) -> Vec<f64>
    where
        F: Fn(&mut Tape<f64>, NodeId) -> NodeId,
    {
        let mut g = vec![0.0; x0.len()];
        for i in 0..x0.len() {
            let mut lo = x0.to_vec();
            let mut hi = x0.to_vec();
            lo[i] -= h;
            hi[i] += h;
            let eval = |data: Vec<f64>| -> f64 {
                let mut tape = Tape::<f64>::new();
                let id = tape.input(Tensor::new(shape.to_vec(), data)).unwrap();
                let loss = build(&mut tape, id);
                tape.value(loss).data()[0]
            };
            g[i] = (eval(hi) - eval(lo)) / (2.0 * h);
        }
        g
    }

    /// AD gradient of the same program in f32.
    fn ad_grad<F>(build: F, x0: &[f32], shape: &[usize]) -> Vec<f32>
    where
        F: Fn(&mut Tape<f32>, NodeId) -> NodeId,
    {
        let mut tape = Tape::<f32>::new();
        let id = tape.param(t(shape, x0), true).unwrap();
        let loss = build(&mut tape, id);
        tape.backward(loss).unwrap();
        tape.grad(id).unwrap().to_vec()
    }

    fn assert_close_rel(ad: &[f32], fd: &[f64], tol: f64) {
        for (i, (&a, &f)) in ad.iter().zip(fd.iter()).enumerate() {
            let a = a as f64;
            let rel = (a - f).abs() / f64::max(1e-8, a.abs() + f.abs());
            assert!(rel <= tol, "entry {i}: ad={a} fd={f} rel={rel}");
        }
    }

    #[test]
    fn matmul_gradient_is_ones_times_bt() {
        // d/dA sum(A·B) = 1 · Bᵀ, verified against central differences.
        let a0 = [0.3f32, -0.7, 1.2, 0.5, -0.2, 0.9];
        let b = t(&[3, 2], &[1.0, -2.0, 0.5, 0.25, -1.5, 2.0]);
        let build32 = |tape: &mut Tape<f32>, x: NodeId| {
            let bid = tape.input(b.clone()).unwrap();
            let y = tape.matmul(x, bid).unwrap();
            tape.sum_all(y).unwrap()
        };
        let b64 = b.cast::<f64>();
        let build64 = |tape: &mut Tape<f64>, x: NodeId| {
            let bid = tape.input(b64.clone()).unwrap();
            let y = tape.matmul(x, bid).unwrap();
            tape.sum_all(y).unwrap()
        };
        let ad = ad_grad(build32, &a0, &[2, 3]);
        let fd = fd_grad(build64, &a0.map(|v| v as f64), &[2, 3], 1e-3);
        assert_close_rel(&ad, &fd, 1e-4);
        // Closed form: row i of grad is the column sums of Bᵀ rows = row sums of B columns.
        for i in 0..2 {
            for k in 0..3 {
                let want: f32 = b.at2(k, 0) + b.at2(k, 1);
                assert!((ad[i * 3 + k] - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(t(&[1, 4], &[0.0; 4])).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, 0.25, 0.25, 0.25]);

        let x = tape.input(t(&[1, 2], &[1000.0, 0.0])).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 0.0);
    }

    #[test]
    fn softmax_jacobian_matches_fd() {
        let x0: Vec<f32> = (0..15).map(|i| ((i * 7) % 5) as f32 * 0.3 - 0.6).collect();
        let w: Vec<f32> = (0..15).map(|i| ((i * 3) % 7) as f32 * 0.2 - 0.5).collect();
        let wt = t(&[3, 5], &w);
        let build32 = |tape: &mut Tape<f32>, x: NodeId| {
            let y = tape.softmax_rows(x).unwrap();
            let wid = tape.input(wt.clone()).unwrap();
            let z = tape.mul(y, wid).unwrap();
            tape.sum_all(z).unwrap()
        };
        let wt64 = wt.cast::<f64>();
        let build64 = |tape: &mut Tape<f64>, x: NodeId| {
            let y = tape.softmax_rows(x).unwrap();
            let wid = tape.input(wt64.clone()).unwrap();
            let z = tape.mul(y, wid).unwrap();
            tape.sum_all(z).unwrap()
        };
        let ad = ad_grad(build32, &x0, &[3, 5]);
        let fd = fd_grad(
            build64,
            &x0.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            &[3, 5],
            1e-3,
        );
        assert_close_rel(&ad, &fd, 1e-4);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::scalar(0.0f32)).unwrap();
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data()[0], 0.5);
    }

    #[test]
    fn layernorm_constant_row_is_zero_pre_affine() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(t(&[1, 4], &[3.5; 4])).unwrap();
        let g = tape.input(t(&[4], &[1.0; 4])).unwrap();
        let b = tape.input(t(&[4], &[0.0; 4])).unwrap();
        let y = tape.layernorm(x, g, b).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn gelu_gradient_matches_fd_at_0_7() {
        let build32 = |tape: &mut Tape<f32>, x: NodeId| {
            let y = tape.gelu(x).unwrap();
            tape.sum_all(y).unwrap()
        };
        let build64 = |tape: &mut Tape<f64>, x: NodeId| {
            let y = tape.gelu(x).unwrap();
            tape.sum_all(y).unwrap()
        };
        let ad = ad_grad(build32, &[0.7], &[1]);
        let fd = fd_grad(build64, &[0.7], &[1], 1e-3);
        assert_close_rel(&ad, &fd, 1e-4);
    }

    #[test]
    fn layernorm_gradient_matches_fd() {
        let x0: Vec<f32> = vec![0.1, -0.4, 0.9, 0.3, -0.8, 0.2, 0.05, -0.15];
        let gamma = t(&[4], &[1.2, 0.8, -0.5, 1.0]);
        let beta = t(&[4], &[0.1, -0.2, 0.0, 0.3]);
        let w: Vec<f32> = (0..8).map(|i| 0.1 * (i as f32) - 0.35).collect();
        let wt = t(&[2, 4], &w);
        let g64 = gamma.cast::<f64>();
        let b64 = beta.cast::<f64>();
        let wt64 = wt.cast::<f64>();
        let build32 = |tape: &mut Tape<f32>, x: NodeId| {
            let g = tape.input(gamma.clone()).unwrap();
            let b = tape.input(beta.clone()).unwrap();
            let y = tape.layernorm(x, g, b).unwrap();
            let wid = tape.input(wt.clone()).unwrap();
            let z = tape.mul(y, wid).unwrap();
            tape.sum_all(z).unwrap()
        };
        let build64 = |tape: &mut Tape<f64>, x: NodeId| {
            let g = tape.input(g64.clone()).unwrap();
            let b = tape.input(b64.clone()).unwrap();
            let y = tape.layernorm(x, g, b).unwrap();
            let wid = tape.input(wt64.clone()).unwrap();
            let z = tape.mul(y, wid).unwrap();
            tape.sum_all(z).unwrap()
        };
        let ad = ad_grad(build32, &x0, &[2, 4]);
        let fd = fd_grad(
            build64,
            &x0.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            &[2, 4],
            1e-3,
        );
        assert_close_rel(&ad, &fd, 1e-4);
    }

    #[test]
    fn cosine_similarity_values() {
        let mut tape = Tape::<f32>::new();
        // u = v ≠ 0 → 1
        let u = tape.input(t(&[3], &[0.2, -0.5, 0.9])).unwrap();
        let v = tape.input(t(&[3], &[0.2, -0.5, 0.9])).unwrap();
        let c = tape.cosine_similarity(u, v).unwrap();
        assert!((tape.value(c).data()[0] - 1.0).abs() < 1e-6);
        // orthogonal → 0
        let u = tape.input(t(&[2], &[1.0, 0.0])).unwrap();
        let v = tape.input(t(&[2], &[0.0, 2.0])).unwrap();
        let c = tape.cosine_similarity(u, v).unwrap();
        assert_eq!(tape.value(c).data()[0], 0.0);
        // hand value: 11 / (√5·5)
        let u = tape.input(t(&[2], &[1.0, 2.0])).unwrap();
        let v = tape.input(t(&[2], &[3.0, 4.0])).unwrap();
        let c = tape.cosine_similarity(u, v).unwrap();
        let want = 11.0 / (5.0f32.sqrt() * 25.0f32.sqrt());
        assert!((tape.value(c).data()[0] - want).abs() < 1e-6);
        assert!((want - 0.98386991).abs() < 1e-6);
    }

    #[test]
    fn cosine_similarity_rejects_zero_norm() {
        let mut tape = Tape::<f32>::new();
        let u = tape.input(t(&[2], &[0.0, 0.0])).unwrap();
        let v = tape.input(t(&[2], &[1.0, 0.0])).unwrap();
        assert!(tape.cosine_similarity(u, v).is_err());
    }

    #[test]
    fn cosine_similarity_gradient_matches_fd() {
        let u0 = [0.3f32, -0.9, 0.4, 0.7];
        let v = t(&[4], &[0.8, 0.1, -0.6, 0.2]);
        let v64 = v.cast::<f64>();
        let build32 = |tape: &mut Tape<f32>, x: NodeId| {
            let vid = tape.input(v.clone()).unwrap();
            tape.cosine_similarity(x, vid).unwrap()
        };
        let build64 = |tape: &mut Tape<f64>, x: NodeId| {
            let vid = tape.input(v64.clone()).unwrap();
            tape.cosine_similarity(x, vid).unwrap()
        };
        let ad = ad_grad(build32, &u0, &[4]);
        let fd = fd_grad(build64, &u0.map(|v| v as f64), &[4], 1e-3);
        assert_close_rel(&ad, &fd, 1e-4);
    }

    #[test]
    fn conv2d_gradient_matches_fd() {
        // Gradient w.r.t. input, weight, and bias of a 3×3 pad-1 conv.
        // Weights are continuous-valued: lattice-valued weights can cancel
        // exactly in real arithmetic, leaving gradients that are pure
        // rounding residue and meaningless to compare relatively.
        let x0: Vec<f32> = (0..16).map(|i| (i as f32 * 0.83 + 0.1).sin() * 0.8).collect();
        let w0: Vec<f32> = (0..18).map(|i| (i as f32 * 1.37 + 0.5).cos() * 0.7).collect();
        let b0 = [0.2f32, -0.4];

        // w.r.t. x
        let wt = t(&[2, 1, 3, 3], &w0);
        let bt = t(&[2], &b0);
        let (wt64, bt64) = (wt.cast::<f64>(), bt.cast::<f64>());
        let ad = ad_grad(
            |tape, x| {
                let w = tape.input(wt.clone()).unwrap();
                let b = tape.input(bt.clone()).unwrap();
                let y = tape.conv2d(x, w, b, 1, 1).unwrap();
                tape.sum_all(y).unwrap()
            },
            &x0,
            &[1, 4, 4],
        );
        let fd = fd_grad(
            |tape, x| {
                let w = tape.input(wt64.clone()).unwrap();
                let b = tape.input(bt64.clone()).unwrap();
                let y = tape.conv2d(x, w, b, 1, 1).unwrap();
                tape.sum_all(y).unwrap()
            },
            &x0.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            &[1, 4, 4],
            1e-3,
        );
        assert_close_rel(&ad, &fd, 1e-4);

        // w.r.t. w (input becomes the constant)
        let xt = t(&[1, 4, 4], &x0);
        let xt64 = xt.cast::<f64>();
        let ad = ad_grad(
            |tape, w| {
                let x = tape.input(xt.clone()).unwrap();
                let b = tape.input(bt.clone()).unwrap();
                let y = tape.conv2d(x, w, b, 1, 1).unwrap();
                tape.sum_all(y).unwrap()
            },
            &w0,
            &[2, 1, 3, 3],
        );
        let fd = fd_grad(
            |tape, w| {
                let x = tape.input(xt64.clone()).unwrap();
                let b = tape.input(bt64.clone()).unwrap();
                let y = tape.conv2d(x, w, b, 1, 1).unwrap();
                tape.sum_all(y).unwrap()
            },
            &w0.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            &[2, 1, 3, 3],
            1e-3,
        );
        assert_close_rel(&ad, &fd, 1e-4);
    }

    #[test]
    fn strided_conv_gradient_matches_fd() {
        let x0: Vec<f32> = (0..2 * 6 * 6).map(|i| ((i * 11) % 13) as f32 * 0.1 - 0.6).collect();
        let wt = t(
            &[3, 2, 3, 3],
            &(0..54).map(|i| ((i * 7) % 11) as f32 * 0.15 - 0.7).collect::<Vec<_>>(),
        );
        let bt = t(&[3], &[0.1, 0.0, -0.2]);
        let (wt64, bt64) = (wt.cast::<f64>(), bt.cast::<f64>());
        let ad = ad_grad(
            |tape, x| {
                let w = tape.input(wt.clone()).unwrap();
                let b = tape.input(bt.clone()).unwrap();
                let y = tape.conv2d(x, w, b, 2, 1).unwrap();
                tape.sum_all(y).unwrap()
            },
            &x0,
            &[2, 6, 6],
        );
        let fd = fd_grad(
            |tape, x| {
                let w = tape.input(wt64.clone()).unwrap();
                let b = tape.input(bt64.clone()).unwrap();
                let y = tape.conv2d(x, w, b, 2, 1).unwrap();
                tape.sum_all(y).unwrap()
            },
            &x0.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            &[2, 6, 6],
            1e-3,
        );
        assert_close_rel(&ad, &fd, 1e-4);
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let frozen = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false).unwrap();
        let trained = tape.param(t(&[2, 2], &[0.5; 4]), true).unwrap();
        let y = tape.matmul(frozen, trained).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(frozen).is_none());
        assert!(tape.grad(trained).is_some());
    }

    #[test]
    fn add_zero_is_bitwise_identity() {
        let vals = [0.1f32, -0.0, 3.75, -2.5e-7];
        let mut tape = Tape::<f32>::new();
        let a = tape.input(t(&[4], &vals)).unwrap();
        let z = tape.input(t(&[4], &[0.0, 0.0, -0.0, 0.0])).unwrap();
        let y = tape.add(a, z).unwrap();
        for (got, want) in tape.value(y).data().iter().zip(vals.iter()) {
            assert_eq!(got.to_bits(), want.to_bits());
        }
    }

    #[test]
    fn non_finite_forward_aborts_with_op_name() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(t(&[2], &[1000.0, 1000.0])).unwrap();
        let e = tape.exp(x).unwrap_err();
        match e {
            Error::NonFinite { op, .. } => assert_eq!(op, "exp"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(t(&[2], &[1.0, 0.0])).unwrap();
        assert!(tape.log(x).is_err());
    }

    #[test]
    fn determinism_two_identical_programs() {
        let run = || -> Vec<f32> {
            let mut tape = Tape::<f32>::new();
            let x = tape
                .input(t(&[4, 4], &(0..16).map(|i| (i as f32 * 0.37).sin()).collect::<Vec<_>>()))
                .unwrap();
            let w = tape
                .param(
                    t(&[4, 4], &(0..16).map(|i| (i as f32 * 0.11).cos()).collect::<Vec<_>>()),
                    true,
                )
                .unwrap();
            let y = tape.matmul(x, w).unwrap();
            let s = tape.softmax_rows(y).unwrap();
            let l = tape.sum_all(s).unwrap();
            let loss = tape.mean_all(l).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(w).unwrap().to_vec()
        };
        let g1 = run();
        let g2 = run();
        assert_eq!(
            g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn slice_and_concat_round_trip_gradients() {
        let x0: Vec<f32> = (0..12).map(|i| i as f32 * 0.25 - 1.5).collect();
        let build32 = |tape: &mut Tape<f32>, x: NodeId| {
            let a = tape.slice_cols(x, 0, 2).unwrap();
            let b = tape.slice_cols(x, 2, 2).unwrap();
            let c = tape.concat_cols(&[b, a]).unwrap();
            let e = tape.exp(c).unwrap();
            tape.sum_all(e).unwrap()
        };
        let build64 = |tape: &mut Tape<f64>, x: NodeId| {
            let a = tape.slice_cols(x, 0, 2).unwrap();
            let b = tape.slice_cols(x, 2, 2).unwrap();
            let c = tape.concat_cols(&[b, a]).unwrap();
            let e = tape.exp(c).unwrap();
            tape.sum_all(e).unwrap()
        };
        let ad = ad_grad(build32, &x0, &[3, 4]);
        let fd = fd_grad(
            build64,
            &x0.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            &[3, 4],
            1e-3,
        );
        assert_close_rel(&ad, &fd, 1e-4);
    }
}
