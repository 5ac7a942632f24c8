//! Model parameters and their canonical organization.
//!
//! A [`ModelBundle`] owns every weight of the full model: the transformer
//! backbone, one global adapter per block, the multi-scale CNN branch, one
//! local adapter per injection point, and the classifier head. Parameters are
//! named; the visit order defines the canonical enumeration used by archives,
//! the optimizer, and gradient readback.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named tensor with a trainable flag. When `trainable` is false the value
/// bytes never change across optimizer steps.
#[derive(Debug, Clone)]
pub struct Parameter<S: Scalar = f32> {
    pub name: String,
    pub value: Tensor<S>,
    pub trainable: bool,
}

impl<S: Scalar> Parameter<S> {
    fn new(name: impl Into<String>, value: Tensor<S>) -> Self {
        Parameter {
            name: name.into(),
            value,
            trainable: true,
        }
    }

    pub fn cast<T: Scalar>(&self) -> Parameter<T> {
        Parameter {
            name: self.name.clone(),
            value: self.value.cast(),
            trainable: self.trainable,
        }
    }
}

/// Where the global adapter attaches inside each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GamMode {
    /// Fused into self-attention as ΔQ/ΔK/ΔV (the default).
    Sa,
    /// Single delta stream added to the MLP input (placement ablation).
    Mlp,
}

/// Architecture configuration. The desk default is the smallest shape that
/// keeps the 1st/4th/7th-block injection topology and a multi-head layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub lam_injection_blocks: Vec<usize>,
    /// Attention logit scale 1/√(D/N) when true, literal 1/√D when false.
    #[serde(default = "default_true")]
    pub per_head_scale: bool,
    /// Scale the local adapter's content-attention logits by 1/√(D/N).
    #[serde(default = "default_true")]
    pub lam_per_head_scale: bool,
    /// Quadratic positional encoding uses the squared Euclidean norm when
    /// true (peak at the head's offset), the literal norm when false.
    #[serde(default = "default_true")]
    pub local_norm_squared: bool,
    #[serde(default = "default_gam_mode")]
    pub gam_mode: GamMode,
}

fn default_true() -> bool {
    true
}
fn default_gam_mode() -> GamMode {
    GamMode::Sa
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 16,
            embed_dim: 64,
            depth: 8,
            num_heads: 4,
            mlp_ratio: 4,
            lam_injection_blocks: vec![0, 3, 6],
            per_head_scale: true,
            lam_per_head_scale: true,
            local_norm_squared: true,
            gam_mode: GamMode::Sa,
        }
    }
}

impl ModelConfig {
    /// Patches per side of the token grid (√L).
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Token count L.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by head count {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.embed_dim % 2 != 0 {
            return Err(Error::Config("embed dim must be even".into()));
        }
        for &b in &self.lam_injection_blocks {
            if b >= self.depth {
                return Err(Error::Config(format!(
                    "injection block {} out of depth {}",
                    b, self.depth
                )));
            }
        }
        Ok(())
    }

    /// Fixed head-direction assignment: the cyclic list below, one entry per
    /// head in order.
    pub fn head_directions(&self) -> Vec<(i32, i32)> {
        const DIRS: [(i32, i32); 9] = [
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 0),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ];
        (0..self.num_heads).map(|h| DIRS[h % 9]).collect()
    }
}

// ── Weight groups ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct PatchEmbed<S: Scalar = f32> {
    /// [3·P², D] per-patch linear projection.
    pub weight: Parameter<S>,
    pub bias: Parameter<S>,
    /// [L, D] learned position embedding.
    pub pos: Parameter<S>,
}

#[derive(Debug, Clone)]
pub struct BlockWeights<S: Scalar = f32> {
    pub ln1_gamma: Parameter<S>,
    pub ln1_beta: Parameter<S>,
    pub wq: Parameter<S>,
    pub wk: Parameter<S>,
    pub wv: Parameter<S>,
    pub wo: Parameter<S>,
    pub ln2_gamma: Parameter<S>,
    pub ln2_beta: Parameter<S>,
    pub fc1_weight: Parameter<S>,
    pub fc1_bias: Parameter<S>,
    pub fc2_weight: Parameter<S>,
    pub fc2_bias: Parameter<S>,
}

#[derive(Debug, Clone)]
pub struct Backbone<S: Scalar = f32> {
    pub patch: PatchEmbed<S>,
    pub blocks: Vec<BlockWeights<S>>,
}

/// Classifier head; row 0 of the weight is the real-class prototype.
#[derive(Debug, Clone)]
pub struct ClassifierHead<S: Scalar = f32> {
    pub weight: Parameter<S>,
    pub bias: Parameter<S>,
}

#[derive(Debug, Clone)]
pub struct GamWeights<S: Scalar = f32> {
    pub reduce_w: Parameter<S>,
    pub reduce_b: Parameter<S>,
    pub spatial_w: Parameter<S>,
    pub spatial_b: Parameter<S>,
    pub expand_q_w: Parameter<S>,
    pub expand_q_b: Parameter<S>,
    pub expand_k_w: Parameter<S>,
    pub expand_k_b: Parameter<S>,
    pub expand_v_w: Parameter<S>,
    pub expand_v_b: Parameter<S>,
}

#[derive(Debug, Clone)]
pub struct ConvLayer<S: Scalar = f32> {
    pub weight: Parameter<S>,
    pub bias: Parameter<S>,
    pub stride: usize,
    pub pad: usize,
}

/// Stem (two convs, first halves H and W) plus three scale blocks of three
/// convs each, the first of each block striding by two and doubling channels.
#[derive(Debug, Clone)]
pub struct CnnBranch<S: Scalar = f32> {
    pub stem: Vec<ConvLayer<S>>,
    pub blocks: Vec<Vec<ConvLayer<S>>>,
}

pub const CNN_STEM_CHANNELS: [usize; 2] = [16, 32];
pub const CNN_BLOCK_CHANNELS: [usize; 3] = [64, 128, 256];

#[derive(Debug, Clone)]
pub struct LamWeights<S: Scalar = f32> {
    /// [C·(S/√L)², D] projection of one flattened CNN cell to token width.
    pub proj_w: Parameter<S>,
    pub proj_b: Parameter<S>,
    /// Per-head query/key projections, each [D, D/N].
    pub wq: Vec<Parameter<S>>,
    pub wk: Vec<Parameter<S>>,
    /// [D, D] value projection, head-sliced at use.
    pub wv: Parameter<S>,
    /// Gate pre-activation, zero-initialized.
    pub sigma: Parameter<S>,
    /// Injection scale, zero-initialized.
    pub beta: Parameter<S>,
}

/// One purely positional attention table per head, L×L row-major. Derived
/// from the configuration, shared read-only, never archived.
#[derive(Debug, Clone)]
pub struct LocalTables {
    pub per_head: Vec<Tensor<f32>>,
}

/// The full weight set plus configuration.
#[derive(Debug, Clone)]
pub struct ModelBundle<S: Scalar = f32> {
    pub config: ModelConfig,
    pub backbone: Backbone<S>,
    pub gams: Vec<GamWeights<S>>,
    pub cnn: CnnBranch<S>,
    pub lams: Vec<LamWeights<S>>,
    pub head: ClassifierHead<S>,
    /// Style-pretext head used only while pre-training the backbone.
    pub pretext: Option<ClassifierHead<S>>,
    pub local_tables: LocalTables,
}

fn normal_tensor(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| (rng::normal(rng) * std) as f32).collect();
    Tensor::new(shape.to_vec(), data)
}

impl ModelBundle<f32> {
    /// Initialize all weights from a seed. Expand convolutions, σ, and β are
    /// exactly zero so the adapters start as identities.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let l = config.tokens();
        let hidden = d * config.mlp_ratio;
        let patch_in = 3 * config.patch_size * config.patch_size;
        let mut r = rng::stream(seed, 0x6d6f_6465); // "mode"

        let patch = PatchEmbed {
            weight: Parameter::new(
                "backbone.patch.weight",
                normal_tensor(&mut r, &[patch_in, d], 0.02),
            ),
            bias: Parameter::new("backbone.patch.bias", Tensor::zeros(&[d])),
            pos: Parameter::new("backbone.pos", normal_tensor(&mut r, &[l, d], 0.02)),
        };

        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = |suffix: &str| format!("backbone.block{i}.{suffix}");
            blocks.push(BlockWeights {
                ln1_gamma: Parameter::new(p("ln1.gamma"), Tensor::full(&[d], 1.0)),
                ln1_beta: Parameter::new(p("ln1.beta"), Tensor::zeros(&[d])),
                wq: Parameter::new(p("wq"), normal_tensor(&mut r, &[d, d], 0.02)),
                wk: Parameter::new(p("wk"), normal_tensor(&mut r, &[d, d], 0.02)),
                wv: Parameter::new(p("wv"), normal_tensor(&mut r, &[d, d], 0.02)),
                wo: Parameter::new(p("wo"), normal_tensor(&mut r, &[d, d], 0.02)),
                ln2_gamma: Parameter::new(p("ln2.gamma"), Tensor::full(&[d], 1.0)),
                ln2_beta: Parameter::new(p("ln2.beta"), Tensor::zeros(&[d])),
                fc1_weight: Parameter::new(
                    p("mlp.fc1.weight"),
                    normal_tensor(&mut r, &[d, hidden], 0.02),
                ),
                fc1_bias: Parameter::new(p("mlp.fc1.bias"), Tensor::zeros(&[hidden])),
                fc2_weight: Parameter::new(
                    p("mlp.fc2.weight"),
                    normal_tensor(&mut r, &[hidden, d], 0.02),
                ),
                fc2_bias: Parameter::new(p("mlp.fc2.bias"), Tensor::zeros(&[d])),
            });
        }

        let half = d / 2;
        let mut gams = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = |suffix: &str| format!("gam.{i}.{suffix}");
            let he_reduce = (2.0 / d as f64).sqrt();
            let he_spatial = (2.0 / (9.0 * half as f64)).sqrt();
            gams.push(GamWeights {
                reduce_w: Parameter::new(
                    p("reduce.weight"),
                    normal_tensor(&mut r, &[half, d, 1, 1], he_reduce),
                ),
                reduce_b: Parameter::new(p("reduce.bias"), Tensor::zeros(&[half])),
                spatial_w: Parameter::new(
                    p("spatial.weight"),
                    normal_tensor(&mut r, &[half, half, 3, 3], he_spatial),
                ),
                spatial_b: Parameter::new(p("spatial.bias"), Tensor::zeros(&[half])),
                expand_q_w: Parameter::new(p("expand_q.weight"), Tensor::zeros(&[d, half, 1, 1])),
                expand_q_b: Parameter::new(p("expand_q.bias"), Tensor::zeros(&[d])),
                expand_k_w: Parameter::new(p("expand_k.weight"), Tensor::zeros(&[d, half, 1, 1])),
                expand_k_b: Parameter::new(p("expand_k.bias"), Tensor::zeros(&[d])),
                expand_v_w: Parameter::new(p("expand_v.weight"), Tensor::zeros(&[d, half, 1, 1])),
                expand_v_b: Parameter::new(p("expand_v.bias"), Tensor::zeros(&[d])),
            });
        }

        let conv = |r: &mut rand_chacha::ChaCha8Rng,
                    name: String,
                    cin: usize,
                    cout: usize,
                    k: usize,
                    stride: usize,
                    pad: usize| {
            let he = (2.0 / (cin as f64 * (k * k) as f64)).sqrt();
            ConvLayer {
                weight: Parameter::new(
                    format!("{name}.weight"),
                    normal_tensor(r, &[cout, cin, k, k], he),
                ),
                bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
                stride,
                pad,
            }
        };
        let stem = vec![
            conv(&mut r, "cnn.stem0".into(), 3, CNN_STEM_CHANNELS[0], 3, 2, 1),
            conv(
                &mut r,
                "cnn.stem1".into(),
                CNN_STEM_CHANNELS[0],
                CNN_STEM_CHANNELS[1],
                3,
                1,
                1,
            ),
        ];
        let mut cnn_blocks = Vec::with_capacity(3);
        let mut cin = CNN_STEM_CHANNELS[1];
        for (j, &cout) in CNN_BLOCK_CHANNELS.iter().enumerate() {
            let mut layers = Vec::with_capacity(3);
            for k in 0..3 {
                let stride = if k == 0 { 2 } else { 1 };
                let inp = if k == 0 { cin } else { cout };
                layers.push(conv(
                    &mut r,
                    format!("cnn.block{j}.conv{k}"),
                    inp,
                    cout,
                    3,
                    stride,
                    1,
                ));
            }
            cnn_blocks.push(layers);
            cin = cout;
        }

        let grid = config.grid();
        let mut lams = Vec::with_capacity(config.lam_injection_blocks.len());
        for (p_idx, _) in config.lam_injection_blocks.iter().enumerate() {
            let scale_side = cnn_scale_side(config.image_size, p_idx);
            let cell = scale_side / grid;
            let c = CNN_BLOCK_CHANNELS[p_idx];
            let flat = c * cell * cell;
            let name = |suffix: &str| format!("lam.{p_idx}.{suffix}");
            let dh = config.head_dim();
            let proj_std = (1.0 / flat as f64).sqrt();
            lams.push(LamWeights {
                proj_w: Parameter::new(
                    name("proj.weight"),
                    normal_tensor(&mut r, &[flat, d], proj_std),
                ),
                proj_b: Parameter::new(name("proj.bias"), Tensor::zeros(&[d])),
                wq: (0..config.num_heads)
                    .map(|h| {
                        Parameter::new(name(&format!("wq{h}")), normal_tensor(&mut r, &[d, dh], 0.02))
                    })
                    .collect(),
                wk: (0..config.num_heads)
                    .map(|h| {
                        Parameter::new(name(&format!("wk{h}")), normal_tensor(&mut r, &[d, dh], 0.02))
                    })
                    .collect(),
                wv: Parameter::new(name("wv"), normal_tensor(&mut r, &[d, d], 0.02)),
                sigma: Parameter::new(name("sigma"), Tensor::zeros(&[1])),
                beta: Parameter::new(name("beta"), Tensor::zeros(&[1])),
            });
        }

        let head = ClassifierHead {
            weight: Parameter::new("head.weight", normal_tensor(&mut r, &[2, d], 0.02)),
            bias: Parameter::new("head.bias", Tensor::zeros(&[2])),
        };

        let local_tables = crate::lam::build_local_tables(&config);

        Ok(ModelBundle {
            config,
            backbone: Backbone { patch, blocks },
            gams,
            cnn: cnn_blocks_into_branch(stem, cnn_blocks),
            lams,
            head,
            pretext: None,
            local_tables,
        })
    }

    /// Attach a fresh style-pretext head with `classes` outputs.
    pub fn with_pretext_head(mut self, classes: usize, seed: u64) -> Self {
        let d = self.config.embed_dim;
        let mut r = rng::stream(seed, 0x7072_6574); // "pret"
        self.pretext = Some(ClassifierHead {
            weight: Parameter::new("pretext.weight", normal_tensor(&mut r, &[classes, d], 0.02)),
            bias: Parameter::new("pretext.bias", Tensor::zeros(&[classes])),
        });
        self
    }
}

fn cnn_blocks_into_branch(stem: Vec<ConvLayer>, blocks: Vec<Vec<ConvLayer>>) -> CnnBranch {
    CnnBranch { stem, blocks }
}

/// Spatial side of the CNN feature map at scale index 0, 1, 2: the stem
/// halves the image once, then each scale block halves again.
pub fn cnn_scale_side(image_size: usize, scale: usize) -> usize {
    image_size >> (scale + 2)
}

impl<S: Scalar> ModelBundle<S> {
    /// Visit every parameter in canonical order.
    pub fn visit(&self, f: &mut dyn FnMut(&Parameter<S>)) {
        f(&self.backbone.patch.weight);
        f(&self.backbone.patch.bias);
        f(&self.backbone.patch.pos);
        for b in &self.backbone.blocks {
            f(&b.ln1_gamma);
            f(&b.ln1_beta);
            f(&b.wq);
            f(&b.wk);
            f(&b.wv);
            f(&b.wo);
            f(&b.ln2_gamma);
            f(&b.ln2_beta);
            f(&b.fc1_weight);
            f(&b.fc1_bias);
            f(&b.fc2_weight);
            f(&b.fc2_bias);
        }
        for g in &self.gams {
            f(&g.reduce_w);
            f(&g.reduce_b);
            f(&g.spatial_w);
            f(&g.spatial_b);
            f(&g.expand_q_w);
            f(&g.expand_q_b);
            f(&g.expand_k_w);
            f(&g.expand_k_b);
            f(&g.expand_v_w);
            f(&g.expand_v_b);
        }
        for layer in &self.cnn.stem {
            f(&layer.weight);
            f(&layer.bias);
        }
        for block in &self.cnn.blocks {
            for layer in block {
                f(&layer.weight);
                f(&layer.bias);
            }
        }
        for lam in &self.lams {
            f(&lam.proj_w);
            f(&lam.proj_b);
            for w in &lam.wq {
                f(w);
            }
            for w in &lam.wk {
                f(w);
            }
            f(&lam.wv);
            f(&lam.sigma);
            f(&lam.beta);
        }
        f(&self.head.weight);
        f(&self.head.bias);
        if let Some(p) = &self.pretext {
            f(&p.weight);
            f(&p.bias);
        }
    }

    /// Visit every parameter mutably, same order as `visit`.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<S>)) {
        f(&mut self.backbone.patch.weight);
        f(&mut self.backbone.patch.bias);
        f(&mut self.backbone.patch.pos);
        for b in &mut self.backbone.blocks {
            f(&mut b.ln1_gamma);
            f(&mut b.ln1_beta);
            f(&mut b.wq);
            f(&mut b.wk);
            f(&mut b.wv);
            f(&mut b.wo);
            f(&mut b.ln2_gamma);
            f(&mut b.ln2_beta);
            f(&mut b.fc1_weight);
            f(&mut b.fc1_bias);
            f(&mut b.fc2_weight);
            f(&mut b.fc2_bias);
        }
        for g in &mut self.gams {
            f(&mut g.reduce_w);
            f(&mut g.reduce_b);
            f(&mut g.spatial_w);
            f(&mut g.spatial_b);
            f(&mut g.expand_q_w);
            f(&mut g.expand_q_b);
            f(&mut g.expand_k_w);
            f(&mut g.expand_k_b);
            f(&mut g.expand_v_w);
            f(&mut g.expand_v_b);
        }
        for layer in &mut self.cnn.stem {
            f(&mut layer.weight);
            f(&mut layer.bias);
        }
        for block in &mut self.cnn.blocks {
            for layer in block {
                f(&mut layer.weight);
                f(&mut layer.bias);
            }
        }
        for lam in &mut self.lams {
            f(&mut lam.proj_w);
            f(&mut lam.proj_b);
            for w in &mut lam.wq {
                f(w);
            }
            for w in &mut lam.wk {
                f(w);
            }
            f(&mut lam.wv);
            f(&mut lam.sigma);
            f(&mut lam.beta);
        }
        f(&mut self.head.weight);
        f(&mut self.head.bias);
        if let Some(p) = &mut self.pretext {
            f(&mut p.weight);
            f(&mut p.bias);
        }
    }

    pub fn cast<T: Scalar>(&self) -> ModelBundle<T> {
        ModelBundle {
            config: self.config.clone(),
            backbone: Backbone {
                patch: PatchEmbed {
                    weight: self.backbone.patch.weight.cast(),
                    bias: self.backbone.patch.bias.cast(),
                    pos: self.backbone.patch.pos.cast(),
                },
                blocks: self
                    .backbone
                    .blocks
                    .iter()
                    .map(|b| BlockWeights {
                        ln1_gamma: b.ln1_gamma.cast(),
                        ln1_beta: b.ln1_beta.cast(),
                        wq: b.wq.cast(),
                        wk: b.wk.cast(),
                        wv: b.wv.cast(),
                        wo: b.wo.cast(),
                        ln2_gamma: b.ln2_gamma.cast(),
                        ln2_beta: b.ln2_beta.cast(),
                        fc1_weight: b.fc1_weight.cast(),
                        fc1_bias: b.fc1_bias.cast(),
                        fc2_weight: b.fc2_weight.cast(),
                        fc2_bias: b.fc2_bias.cast(),
                    })
                    .collect(),
            },
            gams: self
                .gams
                .iter()
                .map(|g| GamWeights {
                    reduce_w: g.reduce_w.cast(),
                    reduce_b: g.reduce_b.cast(),
                    spatial_w: g.spatial_w.cast(),
                    spatial_b: g.spatial_b.cast(),
                    expand_q_w: g.expand_q_w.cast(),
                    expand_q_b: g.expand_q_b.cast(),
                    expand_k_w: g.expand_k_w.cast(),
                    expand_k_b: g.expand_k_b.cast(),
                    expand_v_w: g.expand_v_w.cast(),
                    expand_v_b: g.expand_v_b.cast(),
                })
                .collect(),
            cnn: CnnBranch {
                stem: self
                    .cnn
                    .stem
                    .iter()
                    .map(|l| ConvLayer {
                        weight: l.weight.cast(),
                        bias: l.bias.cast(),
                        stride: l.stride,
                        pad: l.pad,
                    })
                    .collect(),
                blocks: self
                    .cnn
                    .blocks
                    .iter()
                    .map(|b| {
                        b.iter()
                            .map(|l| ConvLayer {
                                weight: l.weight.cast(),
                                bias: l.bias.cast(),
                                stride: l.stride,
                                pad: l.pad,
                            })
                            .collect()
                    })
                    .collect(),
            },
            lams: self
                .lams
                .iter()
                .map(|l| LamWeights {
                    proj_w: l.proj_w.cast(),
                    proj_b: l.proj_b.cast(),
                    wq: l.wq.iter().map(|w| w.cast()).collect(),
                    wk: l.wk.iter().map(|w| w.cast()).collect(),
                    wv: l.wv.cast(),
                    sigma: l.sigma.cast(),
                    beta: l.beta.cast(),
                })
                .collect(),
            head: ClassifierHead {
                weight: self.head.weight.cast(),
                bias: self.head.bias.cast(),
            },
            pretext: self.pretext.as_ref().map(|p| ClassifierHead {
                weight: p.weight.cast(),
                bias: p.bias.cast(),
            }),
            local_tables: self.local_tables.clone(),
        }
    }

    /// Number of trainable scalar entries.
    pub fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.trainable {
                n += p.value.numel();
            }
        });
        n
    }
}
