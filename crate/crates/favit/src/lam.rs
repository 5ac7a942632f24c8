//! Local adaptive module: gated cross-attention from ViT tokens onto
//! projected CNN features, blending content-based attention with a purely
//! positional map built from quadratic relative-position encoding.
//!
//! The positional scores for a query at grid position `a` against position
//! `b` are Ψ·φ_{a,b} with φ_{a,b} = (‖δ‖², δ_i, δ_j), δ = b − a and
//! Ψ = (−1, 2ψ₁, 2ψ₂), which equals −‖δ − ψ‖² + ‖ψ‖²: a soft peak at the
//! fixed offset (ψ₁, ψ₂). Each head gets its own offset, so different heads
//! look in different directions. A config switch swaps in the literal
//! (unsquared) norm for comparison.

use crate::capture::Capture;
use crate::error::{Error, Result};
use crate::model::{LocalTables, ModelConfig};
use crate::scalar::Scalar;
use crate::tape::{softmax_rows_raw, NodeId, Tape};
use crate::tensor::Tensor;
use crate::vars::LamVars;

/// Relative locality strength φ_{a,b} = (‖δ‖², δ_i, δ_j) for grid positions
/// a, b (row, column). With `squared` false the first component is the
/// literal Euclidean norm instead.
pub fn quadratic_encoding(a: (usize, usize), b: (usize, usize), squared: bool) -> [f64; 3] {
    let di = b.0 as f64 - a.0 as f64;
    let dj = b.1 as f64 - a.1 as f64;
    let sq = di * di + dj * dj;
    [if squared { sq } else { sq.sqrt() }, di, dj]
}

/// Positional score Ψ·φ_{a,b} with Ψ = (−1, 2ψ₁, 2ψ₂).
pub fn local_score(a: (usize, usize), b: (usize, usize), psi: (i32, i32), squared: bool) -> f64 {
    let phi = quadratic_encoding(a, b, squared);
    -phi[0] + 2.0 * psi.0 as f64 * phi[1] + 2.0 * psi.1 as f64 * phi[2]
}

/// One row of the positional attention map: softmax of the scores of a query
/// position against every grid position, row-major. Content-independent.
pub fn local_attention_row(
    query: (usize, usize),
    psi: (i32, i32),
    grid: usize,
    squared: bool,
) -> Result<Vec<f32>> {
    if psi.0.abs() > 1 || psi.1.abs() > 1 {
        return Err(Error::InvalidInput {
            op: "local_attention",
            detail: format!("direction {:?} outside {{-1,0,1}}²", psi),
        });
    }
    if query.0 >= grid || query.1 >= grid {
        return Err(Error::InvalidInput {
            op: "local_attention",
            detail: format!("query {:?} outside {grid}×{grid} grid", query),
        });
    }
    let l = grid * grid;
    let scores: Vec<f32> = (0..l)
        .map(|b| local_score(query, (b / grid, b % grid), psi, squared) as f32)
        .collect();
    let mut row = vec![0.0f32; l];
    softmax_rows_raw(&scores, &mut row, 1, l);
    Ok(row)
}

/// Full L×L positional table for one head direction.
pub fn local_attention_table(psi: (i32, i32), grid: usize, squared: bool) -> Tensor<f32> {
    let l = grid * grid;
    let mut data = Vec::with_capacity(l * l);
    for a in 0..l {
        let row = local_attention_row((a / grid, a % grid), psi, grid, squared)
            .expect("direction from config is valid");
        data.extend_from_slice(&row);
    }
    Tensor::new(vec![l, l], data)
}

/// Tables for every head of a configuration. Computed once, shared read-only.
pub fn build_local_tables(cfg: &ModelConfig) -> LocalTables {
    let grid = cfg.grid();
    LocalTables {
        per_head: cfg
            .head_directions()
            .into_iter()
            .map(|psi| local_attention_table(psi, grid, cfg.local_norm_squared))
            .collect(),
    }
}

/// How CNN features are merged into the token stream at an injection point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialMode {
    /// CNN branch detached entirely (plain backbone).
    None,
    /// Residual addition: x + β·x̂_cnn.
    Add,
    /// Plain cross-attention: the gate is pinned to the content map.
    CrossAttention,
    /// Full local adaptive module.
    Lam,
}

/// Inject projected CNN tokens into ViT tokens. Returns the updated tokens.
///
/// Per head h: A_global = softmax(Q_h·K_hᵀ / √(D/N)) over the CNN tokens,
/// A_final = (1−φ(σ))·A_global + φ(σ)·A_local^h, output rows are
/// A_final·V_h with V the head-sliced value projection of the CNN tokens;
/// heads concatenate and re-enter the stream as x + β·out. β and σ start at
/// zero, so the whole branch is a bit-exact no-op until trained.
pub fn lam_inject<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelConfig,
    vars: &LamVars,
    x_vit: NodeId,
    x_cnn_hat: NodeId,
    mode: SpatialMode,
    point: usize,
    capture: &mut Capture,
) -> Result<NodeId> {
    match mode {
        SpatialMode::None => Ok(x_vit),
        SpatialMode::Add => {
            let scaled = tape.scale_by(x_cnn_hat, vars.beta)?;
            tape.add(x_vit, scaled)
        }
        SpatialMode::CrossAttention | SpatialMode::Lam => {
            let dh = cfg.head_dim();
            let values = tape.matmul(x_cnn_hat, vars.wv)?;
            let gate = tape.sigmoid(vars.sigma)?;
            let neg_gate = tape.scale(gate, -1.0)?;
            let one_minus_gate = tape.add_scalar(neg_gate, 1.0)?;
            let mut head_outputs = Vec::with_capacity(cfg.num_heads);
            for h in 0..cfg.num_heads {
                let q = tape.matmul(x_vit, vars.wq[h])?;
                let k = tape.matmul(x_cnn_hat, vars.wk[h])?;
                let kt = tape.transpose(k)?;
                let mut scores = tape.matmul(q, kt)?;
                if cfg.lam_per_head_scale {
                    scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
                }
                let a_global = tape.softmax_rows(scores)?;
                let a_final = match mode {
                    SpatialMode::Lam => {
                        let a_local = vars.local[h];
                        let weighted_global = tape.scale_by(a_global, one_minus_gate)?;
                        let weighted_local = tape.scale_by(a_local, gate)?;
                        tape.add(weighted_global, weighted_local)?
                    }
                    _ => a_global,
                };
                if capture.enabled() {
                    let gate_value = tape.value(gate).data()[0].to_f64() as f32;
                    let local = match mode {
                        SpatialMode::Lam => tape.value(vars.local[h]).cast::<f32>(),
                        _ => tape.value(a_global).cast::<f32>(),
                    };
                    capture.record_lam_head(
                        point,
                        h,
                        local,
                        tape.value(a_global).cast::<f32>(),
                        tape.value(a_final).cast::<f32>(),
                        gate_value,
                    );
                }
                let v_h = tape.slice_cols(values, h * dh, dh)?;
                head_outputs.push(tape.matmul(a_final, v_h)?);
            }
            let merged = tape.concat_cols(&head_outputs)?;
            let scaled = tape.scale_by(merged, vars.beta)?;
            tape.add(x_vit, scaled)
        }
    }
}
