//! Shared helpers for integration tests.

use favit::backbone::{self, AdapterFlags};
use favit::capture::Capture;
use favit::data::{self, DomainParams};
use favit::model::{ModelBundle, ModelConfig};
use favit::tape::Tape;
use favit::tensor::Tensor;
use favit::vars;

/// The desk-scale configuration: 64×64 images, 16 tokens, 64-dim embeddings,
/// 8 blocks, 4 heads, injections before blocks 0/3/6.
pub fn desk_config() -> ModelConfig {
    ModelConfig::default()
}

/// Smaller and faster (narrow embeddings, shallow stack); generator-sized
/// images, still multi-head with one injection.
#[allow(dead_code)]
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 64,
        patch_size: 16,
        embed_dim: 16,
        depth: 3,
        num_heads: 2,
        mlp_ratio: 2,
        lam_injection_blocks: vec![0],
        ..ModelConfig::default()
    }
}

#[allow(dead_code)]
pub fn seeded_image(seed: u64) -> Tensor<f32> {
    data::generate_real(seed, &DomainParams::source(), (seed % 4) as usize).image
}

/// Run one image through the model; returns (pooled, per-block tokens).
#[allow(dead_code)]
pub fn run_forward(
    model: &ModelBundle<f32>,
    flags: &AdapterFlags,
    image: &Tensor<f32>,
    capture: &mut Capture,
) -> (Vec<f32>, Vec<Vec<f32>>) {
    let mut tape = Tape::<f32>::new();
    let mvars = vars::register(&mut tape, model).unwrap();
    let img = tape.input(image.clone()).unwrap();
    let out =
        backbone::forward_features(&mut tape, &model.config, &mvars, flags, img, capture).unwrap();
    let pooled = tape.value(out.pooled).data().to_vec();
    let blocks = out
        .block_tokens
        .iter()
        .map(|&id| tape.value(id).data().to_vec())
        .collect();
    (pooled, blocks)
}
