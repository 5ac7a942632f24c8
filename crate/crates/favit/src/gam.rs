//! Global adaptive module: a bottleneck of three convolutions over tokens
//! laid out on their √L×√L grid, emitting additive corrections for the
//! query/key/value projections of a self-attention layer.
//!
//! The three expand convolutions are zero at initialization, so an untrained
//! module contributes exactly nothing.

use crate::error::Result;
use crate::model::ModelConfig;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::vars::GamVars;

/// Shared trunk: tokens → grid → reduce → GELU → 3×3 spatial → GELU.
/// Input is the post-layernorm token matrix [L, D]; output is a [D/2, √L, √L]
/// feature map.
fn trunk<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    vars: &GamVars,
    tokens: NodeId,
) -> Result<NodeId> {
    let g = cfg.grid();
    let d = cfg.embed_dim;
    let channels_first = tape.transpose(tokens)?; // [D, L]
    let gridded = tape.reshape(channels_first, &[d, g, g])?;
    let reduced = tape.conv2d(gridded, vars.reduce_w, vars.reduce_b, 1, 0)?;
    let reduced = tape.gelu(reduced)?;
    let spatial = tape.conv2d(reduced, vars.spatial_w, vars.spatial_b, 1, 1)?;
    tape.gelu(spatial)
}

fn expand_to_tokens<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    trunk_out: NodeId,
    w: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    let g = cfg.grid();
    let d = cfg.embed_dim;
    let expanded = tape.conv2d(trunk_out, w, b, 1, 0)?; // [D, g, g]
    let flat = tape.reshape(expanded, &[d, g * g])?;
    tape.transpose(flat) // [L, D]
}

/// ΔQ, ΔK, ΔV for the self-attention fusion, each [L, D].
pub fn gam_forward<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    vars: &GamVars,
    tokens: NodeId,
) -> Result<(NodeId, NodeId, NodeId)> {
    let t = trunk(tape, cfg, vars, tokens)?;
    let dq = expand_to_tokens(tape, cfg, t, vars.expand_q_w, vars.expand_q_b)?;
    let dk = expand_to_tokens(tape, cfg, t, vars.expand_k_w, vars.expand_k_b)?;
    let dv = expand_to_tokens(tape, cfg, t, vars.expand_v_w, vars.expand_v_b)?;
    Ok((dq, dk, dv))
}

/// Single delta stream for the MLP placement ablation (uses the Q expand).
pub fn gam_mlp_delta<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    vars: &GamVars,
    tokens: NodeId,
) -> Result<NodeId> {
    let t = trunk(tape, cfg, vars, tokens)?;
    expand_to_tokens(tape, cfg, t, vars.expand_q_w, vars.expand_q_b)
}

/// Exact trainable parameter count of one module:
/// reduce D·(D/2)+D/2, spatial 9·(D/2)²+D/2, three expands (D/2)·D+D each.
pub fn gam_param_count(d: usize) -> usize {
    let half = d / 2;
    (d * half + half) + (9 * half * half + half) + 3 * (half * d + d)
}
