//! The vision-transformer backbone and the full-model forward pass.
//!
//! Blocks are pre-norm: x += SA(LN₁(x)), then x += MLP(LN₂(x)). The global
//! adapter reads the same post-layernorm tokens the Q/K/V projections
//! consume; local adapters inject before designated blocks. Classification
//! uses the mean over patch tokens of the final block (no class token).

use crate::capture::Capture;
use crate::cnn;
use crate::error::Result;
use crate::gam;
use crate::lam::{self, SpatialMode};
use crate::model::{GamMode, ModelConfig};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::vars::{BlockVars, GamVars, HeadVars, ModelVars, PatchVars};

/// Which adapters participate in a forward pass. Strategies that do not use
/// an adapter leave it detached entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterFlags {
    pub gam: bool,
    pub spatial: SpatialMode,
}

impl AdapterFlags {
    pub fn none() -> Self {
        AdapterFlags {
            gam: false,
            spatial: SpatialMode::None,
        }
    }

    pub fn full() -> Self {
        AdapterFlags {
            gam: true,
            spatial: SpatialMode::Lam,
        }
    }
}

/// Patch embedding: per-patch linear projection plus learned position
/// embedding. Image is 3×H×W; output is [L, D].
pub fn patch_embed<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    vars: &PatchVars,
    image: NodeId,
) -> Result<NodeId> {
    let patches = tape.patch_flatten(image, cfg.grid())?; // [L, 3·P²]
    let tokens = tape.matmul(patches, vars.weight)?;
    let tokens = tape.add_bias_row(tokens, vars.bias)?;
    tape.add(tokens, vars.pos)
}

/// Source of the ΔQ/ΔK/ΔV corrections for one self-attention layer.
pub enum SaDeltas<'a> {
    None,
    /// Explicit tensors, each [L, D].
    Tensors(NodeId, NodeId, NodeId),
    /// Computed by a global adapter from the post-layernorm tokens.
    Gam(&'a GamVars),
}

/// Pre-norm self-attention with optional additive Q/K/V corrections and
/// residual connection.
pub fn self_attention<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    bv: &BlockVars,
    x: NodeId,
    deltas: SaDeltas,
    capture: &mut Capture,
    block_idx: usize,
) -> Result<NodeId> {
    let d = cfg.embed_dim;
    let dh = cfg.head_dim();
    let t = tape.layernorm(x, bv.ln1_gamma, bv.ln1_beta)?;

    let resolved = match deltas {
        SaDeltas::None => None,
        SaDeltas::Tensors(dq, dk, dv) => Some((dq, dk, dv)),
        SaDeltas::Gam(g) => Some(gam::gam_forward(tape, cfg, g, t)?),
    };

    let mut q = tape.matmul(t, bv.wq)?;
    let mut k = tape.matmul(t, bv.wk)?;
    let mut v = tape.matmul(t, bv.wv)?;
    if let Some((dq, dk, dv)) = resolved {
        q = tape.add(q, dq)?;
        k = tape.add(k, dk)?;
        v = tape.add(v, dv)?;
    }

    let scale = if cfg.per_head_scale {
        1.0 / (dh as f64).sqrt()
    } else {
        1.0 / (d as f64).sqrt()
    };
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax_rows(scores)?;
        if capture.enabled() {
            capture.record_sa(block_idx, h, tape.value(attn).cast::<f32>());
        }
        heads.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let projected = tape.matmul(merged, bv.wo)?;
    tape.add(x, projected)
}

/// Pre-norm MLP with residual connection; `gam` adds a single delta stream
/// to the MLP input (the placement ablation).
pub fn mlp<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    bv: &BlockVars,
    x: NodeId,
    gam: Option<&GamVars>,
) -> Result<NodeId> {
    let mut u = tape.layernorm(x, bv.ln2_gamma, bv.ln2_beta)?;
    if let Some(g) = gam {
        let delta = gam::gam_mlp_delta(tape, cfg, g, u)?;
        u = tape.add(u, delta)?;
    }
    let h = tape.matmul(u, bv.fc1_weight)?;
    let h = tape.add_bias_row(h, bv.fc1_bias)?;
    let h = tape.gelu(h)?;
    let o = tape.matmul(h, bv.fc2_weight)?;
    let o = tape.add_bias_row(o, bv.fc2_bias)?;
    tape.add(x, o)
}

pub struct ForwardOut {
    /// Mean over the final block's tokens, [D].
    pub pooled: NodeId,
    /// Token matrix after each block, [L, D] each.
    pub block_tokens: Vec<NodeId>,
}

/// Full forward pass: patch embedding, local injections before designated
/// blocks, global adapters inside every block, mean pooling at the end.
pub fn forward_features<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    vars: &ModelVars,
    flags: &AdapterFlags,
    image: NodeId,
    capture: &mut Capture,
) -> Result<ForwardOut> {
    let mut x = patch_embed(tape, cfg, &vars.patch, image)?;

    // CNN token projections, one per injection point (coarser scales go
    // deeper: scale p pairs with the p-th injection block).
    let mut cnn_tokens: Vec<Option<NodeId>> = vec![None; cfg.lam_injection_blocks.len()];
    if flags.spatial != SpatialMode::None {
        let scales = cnn::cnn_branch_forward(
            tape,
            &vars.cnn_stem,
            &vars.cnn_blocks,
            image,
            cfg.lam_injection_blocks.len(),
        )?;
        for (p, _) in cfg.lam_injection_blocks.iter().enumerate() {
            cnn_tokens[p] =
                Some(cnn::project_to_tokens(tape, &vars.lams[p], scales[p], cfg.grid())?);
        }
    }

    let mut block_tokens = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        if let Some(p) = cfg.lam_injection_blocks.iter().position(|&b| b == i) {
            if let Some(tokens) = cnn_tokens[p] {
                x = lam::lam_inject(
                    tape,
                    cfg,
                    &vars.lams[p],
                    x,
                    tokens,
                    flags.spatial,
                    p,
                    capture,
                )?;
            }
        }
        let sa_deltas = if flags.gam && cfg.gam_mode == GamMode::Sa {
            SaDeltas::Gam(&vars.gams[i])
        } else {
            SaDeltas::None
        };
        x = self_attention(tape, cfg, &vars.blocks[i], x, sa_deltas, capture, i)?;
        let mlp_gam = if flags.gam && cfg.gam_mode == GamMode::Mlp {
            Some(&vars.gams[i])
        } else {
            None
        };
        x = mlp(tape, cfg, &vars.blocks[i], x, mlp_gam)?;
        block_tokens.push(x);
    }

    let pooled = tape.mean_rows(x)?;
    Ok(ForwardOut {
        pooled,
        block_tokens,
    })
}

pub struct Classification {
    /// Raw logits, [1, n_classes].
    pub logits: NodeId,
    /// Softmax probabilities, [1, n_classes].
    pub probs: NodeId,
    /// probs[1]: probability of the fake class (two-class heads).
    pub p_fake: NodeId,
}

/// Linear head over the pooled feature: logits = W·pooled + b, probabilities
/// by softmax, fake probability at index 1.
pub fn classify<S: Scalar>(
    tape: &mut Tape<S>,
    head: &HeadVars,
    pooled: NodeId,
) -> Result<Classification> {
    let d = tape.shape(pooled)[0];
    let row = tape.reshape(pooled, &[1, d])?;
    let wt = tape.transpose(head.weight)?;
    let logits = tape.matmul(row, wt)?;
    let logits = tape.add_bias_row(logits, head.bias)?;
    let probs = tape.softmax_rows(logits)?;
    let p_fake = tape.index(probs, 1)?;
    Ok(Classification {
        logits,
        probs,
        p_fake,
    })
}
