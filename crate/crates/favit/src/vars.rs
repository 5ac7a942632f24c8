//! Per-tape handles for every model parameter.
//!
//! A training step registers the bundle's parameters on a fresh tape once and
//! reuses the returned handles for every sample in the batch. Handles are
//! registered in the canonical visit order, so gradient readback can zip the
//! id list against `visit_mut`.

use crate::error::Result;
use crate::model::ModelBundle;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

#[derive(Debug, Clone)]
pub struct PatchVars {
    pub weight: NodeId,
    pub bias: NodeId,
    pub pos: NodeId,
}

#[derive(Debug, Clone)]
pub struct BlockVars {
    pub ln1_gamma: NodeId,
    pub ln1_beta: NodeId,
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub ln2_gamma: NodeId,
    pub ln2_beta: NodeId,
    pub fc1_weight: NodeId,
    pub fc1_bias: NodeId,
    pub fc2_weight: NodeId,
    pub fc2_bias: NodeId,
}

#[derive(Debug, Clone)]
pub struct GamVars {
    pub reduce_w: NodeId,
    pub reduce_b: NodeId,
    pub spatial_w: NodeId,
    pub spatial_b: NodeId,
    pub expand_q_w: NodeId,
    pub expand_q_b: NodeId,
    pub expand_k_w: NodeId,
    pub expand_k_b: NodeId,
    pub expand_v_w: NodeId,
    pub expand_v_b: NodeId,
}

#[derive(Debug, Clone)]
pub struct ConvVars {
    pub weight: NodeId,
    pub bias: NodeId,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct LamVars {
    pub proj_w: NodeId,
    pub proj_b: NodeId,
    pub wq: Vec<NodeId>,
    pub wk: Vec<NodeId>,
    pub wv: NodeId,
    pub sigma: NodeId,
    pub beta: NodeId,
    /// Positional tables, registered as constants (content-independent).
    pub local: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct HeadVars {
    pub weight: NodeId,
    pub bias: NodeId,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub patch: PatchVars,
    pub blocks: Vec<BlockVars>,
    pub gams: Vec<GamVars>,
    pub cnn_stem: Vec<ConvVars>,
    pub cnn_blocks: Vec<Vec<ConvVars>>,
    pub lams: Vec<LamVars>,
    pub head: HeadVars,
    pub pretext: Option<HeadVars>,
    /// All parameter ids in canonical visit order, for gradient readback.
    pub param_ids: Vec<NodeId>,
}

/// Register every parameter of the bundle on the tape.
pub fn register<S: Scalar>(tape: &mut Tape<S>, model: &ModelBundle<S>) -> Result<ModelVars> {
    let mut ids = Vec::new();
    let mut reg = |tape: &mut Tape<S>, p: &crate::model::Parameter<S>| -> Result<NodeId> {
        let id = tape.param(p.value.clone(), p.trainable)?;
        ids.push(id);
        Ok(id)
    };

    let patch = PatchVars {
        weight: reg(tape, &model.backbone.patch.weight)?,
        bias: reg(tape, &model.backbone.patch.bias)?,
        pos: reg(tape, &model.backbone.patch.pos)?,
    };
    let mut blocks = Vec::with_capacity(model.backbone.blocks.len());
    for b in &model.backbone.blocks {
        blocks.push(BlockVars {
            ln1_gamma: reg(tape, &b.ln1_gamma)?,
            ln1_beta: reg(tape, &b.ln1_beta)?,
            wq: reg(tape, &b.wq)?,
            wk: reg(tape, &b.wk)?,
            wv: reg(tape, &b.wv)?,
            wo: reg(tape, &b.wo)?,
            ln2_gamma: reg(tape, &b.ln2_gamma)?,
            ln2_beta: reg(tape, &b.ln2_beta)?,
            fc1_weight: reg(tape, &b.fc1_weight)?,
            fc1_bias: reg(tape, &b.fc1_bias)?,
            fc2_weight: reg(tape, &b.fc2_weight)?,
            fc2_bias: reg(tape, &b.fc2_bias)?,
        });
    }
    let mut gams = Vec::with_capacity(model.gams.len());
    for g in &model.gams {
        gams.push(GamVars {
            reduce_w: reg(tape, &g.reduce_w)?,
            reduce_b: reg(tape, &g.reduce_b)?,
            spatial_w: reg(tape, &g.spatial_w)?,
            spatial_b: reg(tape, &g.spatial_b)?,
            expand_q_w: reg(tape, &g.expand_q_w)?,
            expand_q_b: reg(tape, &g.expand_q_b)?,
            expand_k_w: reg(tape, &g.expand_k_w)?,
            expand_k_b: reg(tape, &g.expand_k_b)?,
            expand_v_w: reg(tape, &g.expand_v_w)?,
            expand_v_b: reg(tape, &g.expand_v_b)?,
        });
    }
    let mut cnn_stem = Vec::with_capacity(model.cnn.stem.len());
    for layer in &model.cnn.stem {
        cnn_stem.push(ConvVars {
            weight: reg(tape, &layer.weight)?,
            bias: reg(tape, &layer.bias)?,
            stride: layer.stride,
            pad: layer.pad,
        });
    }
    let mut cnn_blocks = Vec::with_capacity(model.cnn.blocks.len());
    for block in &model.cnn.blocks {
        let mut layers = Vec::with_capacity(block.len());
        for layer in block {
            layers.push(ConvVars {
                weight: reg(tape, &layer.weight)?,
                bias: reg(tape, &layer.bias)?,
                stride: layer.stride,
                pad: layer.pad,
            });
        }
        cnn_blocks.push(layers);
    }
    let mut lams = Vec::with_capacity(model.lams.len());
    for (p_idx, lam) in model.lams.iter().enumerate() {
        let proj_w = reg(tape, &lam.proj_w)?;
        let proj_b = reg(tape, &lam.proj_b)?;
        let mut wq = Vec::with_capacity(lam.wq.len());
        for w in &lam.wq {
            wq.push(reg(tape, w)?);
        }
        let mut wk = Vec::with_capacity(lam.wk.len());
        for w in &lam.wk {
            wk.push(reg(tape, w)?);
        }
        let wv = reg(tape, &lam.wv)?;
        let sigma = reg(tape, &lam.sigma)?;
        let beta = reg(tape, &lam.beta)?;
        let mut local = Vec::with_capacity(model.config.num_heads);
        for h in 0..model.config.num_heads {
            let table = model.local_tables.per_head[h].cast::<S>();
            local.push(tape.input(table)?);
        }
        let _ = p_idx;
        lams.push(LamVars {
            proj_w,
            proj_b,
            wq,
            wk,
            wv,
            sigma,
            beta,
            local,
        });
    }
    let head = HeadVars {
        weight: reg(tape, &model.head.weight)?,
        bias: reg(tape, &model.head.bias)?,
    };
    let pretext = match &model.pretext {
        Some(p) => Some(HeadVars {
            weight: reg(tape, &p.weight)?,
            bias: reg(tape, &p.bias)?,
        }),
        None => None,
    };

    Ok(ModelVars {
        patch,
        blocks,
        gams,
        cnn_stem,
        cnn_blocks,
        lams,
        head,
        pretext,
        param_ids: ids,
    })
}
