//! Multi-scale CNN branch and the cell-flatten projection onto token shape.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::vars::{ConvVars, LamVars};

fn conv_gelu<S: Scalar>(tape: &mut Tape<S>, layer: &ConvVars, x: NodeId) -> Result<NodeId> {
    let y = tape.conv2d(x, layer.weight, layer.bias, layer.stride, layer.pad)?;
    tape.gelu(y)
}

/// Run the stem and the first `n_scales` scale blocks; returns one feature
/// map per scale, at descending resolution and ascending channel count.
pub fn cnn_branch_forward<S: Scalar>(
    tape: &mut Tape<S>,
    stem: &[ConvVars],
    blocks: &[Vec<ConvVars>],
    image: NodeId,
    n_scales: usize,
) -> Result<Vec<NodeId>> {
    let mut x = image;
    for layer in stem {
        x = conv_gelu(tape, layer, x)?;
    }
    let mut scales = Vec::with_capacity(n_scales);
    for block in blocks.iter().take(n_scales) {
        for layer in block {
            x = conv_gelu(tape, layer, x)?;
        }
        scales.push(x);
    }
    Ok(scales)
}

/// Project one scale feature map C×S×S onto token shape L×D: partition the
/// S×S plane into √L×√L cells, flatten each cell's C·(S/√L)² values in
/// (channel, row, column) order, and apply one linear map.
pub fn project_to_tokens<S: Scalar>(
    tape: &mut Tape<S>,
    lam: &LamVars,
    x_cnn: NodeId,
    grid: usize,
) -> Result<NodeId> {
    let cells = tape.patch_flatten(x_cnn, grid)?; // [L, C·cell²]
    let projected = tape.matmul(cells, lam.proj_w)?;
    tape.add_bias_row(projected, lam.proj_b)
}
