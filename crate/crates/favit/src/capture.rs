//! Optional forward-pass inspection: attention matrices from the backbone's
//! self-attention layers and the three maps (local / global / fused) of each
//! local-adapter head, plus gate values. Disabled captures cost nothing.

use crate::tensor::Tensor;

/// One recorded backbone self-attention matrix (post-softmax, L×L).
#[derive(Debug, Clone)]
pub struct SaRecord {
    pub block: usize,
    pub head: usize,
    pub matrix: Tensor<f32>,
}

/// Maps of one local-adapter head at one injection point.
#[derive(Debug, Clone)]
pub struct LamRecord {
    pub point: usize,
    pub head: usize,
    pub a_local: Tensor<f32>,
    pub a_global: Tensor<f32>,
    pub a_final: Tensor<f32>,
    pub gate: f32,
}

#[derive(Debug, Default)]
pub struct Capture {
    enabled: bool,
    pub sa: Vec<SaRecord>,
    pub lam: Vec<LamRecord>,
}

impl Capture {
    /// A capture that records nothing.
    pub fn disabled() -> Self {
        Capture::default()
    }

    pub fn enabled_new() -> Self {
        Capture {
            enabled: true,
            sa: Vec::new(),
            lam: Vec::new(),
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn record_sa(&mut self, block: usize, head: usize, matrix: Tensor<f32>) {
        if self.enabled {
            self.sa.push(SaRecord {
                block,
                head,
                matrix,
            });
        }
    }

    pub fn record_lam_head(
        &mut self,
        point: usize,
        head: usize,
        a_local: Tensor<f32>,
        a_global: Tensor<f32>,
        a_final: Tensor<f32>,
        gate: f32,
    ) {
        if self.enabled {
            self.lam.push(LamRecord {
                point,
                head,
                a_local,
                a_global,
                a_final,
                gate,
            });
        }
    }
}
