//! Optimizer, adaptation strategies, and the training/evaluation loops.
//!
//! One training run is single-threaded and fully determined by its seed:
//! initialization, shuffling, and data generation all derive from it.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{self, AdapterFlags};
use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::lam::SpatialMode;
use crate::loss::{self, DetachCtx, FalConfig};
use crate::metrics;
use crate::model::{GamMode, ModelBundle};
use crate::rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::vars;

const TAG_SHUFFLE: u64 = 0x7368_7566; // "shuf"

// ── Adam ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers per canonical parameter index.
pub struct AdamState {
    pub step: u64,
    pub hyper: AdamHyper,
    moments: Vec<Option<(Vec<f32>, Vec<f32>)>>,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            step: 0,
            hyper: AdamHyper::default(),
            moments: vec![None; n_params],
        }
    }
}

/// One Adam step with decoupled weight decay. `grads` is aligned with the
/// canonical parameter order; frozen parameters are untouched (no decay,
/// no moments). A trainable parameter without a gradient is an error.
pub fn adam_step(
    model: &mut ModelBundle<f32>,
    grads: &[Option<Vec<f32>>],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step;
    let h = state.hyper;
    let bc1 = 1.0 - (h.beta1 as f64).powi(t as i32);
    let bc2 = 1.0 - (h.beta2 as f64).powi(t as i32);
    let lr32 = lr as f32;
    let wd32 = weight_decay as f32;

    let mut idx = 0usize;
    let mut err: Option<Error> = None;
    model.visit_mut(&mut |p| {
        let i = idx;
        idx += 1;
        if err.is_some() || !p.trainable {
            return;
        }
        let g = match &grads[i] {
            Some(g) => g,
            None => {
                err = Some(Error::Train(format!(
                    "missing gradient for trainable parameter {}",
                    p.name
                )));
                return;
            }
        };
        let n = p.value.numel();
        let (m, v) = state.moments[i].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let theta = p.value.data_mut();
        for j in 0..n {
            let gj = g[j];
            m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * gj;
            v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * gj * gj;
            let m_hat = m[j] / bc1 as f32;
            let v_hat = v[j] / bc2 as f32;
            theta[j] -= lr32 * (m_hat / (v_hat.sqrt() + h.eps)) + lr32 * wd32 * theta[j];
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Learning rate schedule: halves every five epochs (1-based).
pub fn lr_schedule(epoch: usize, base_lr: f64) -> f64 {
    base_lr * 0.5f64.powi(((epoch - 1) / 5) as i32)
}

// ── Strategies ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    FullFinetune,
    LinearProbe,
    SaOnly,
    MlpOnly,
    GamOnly,
    LamOnly,
    GamLam,
    GamLamUnfrozen,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::FullFinetune,
        Strategy::LinearProbe,
        Strategy::SaOnly,
        Strategy::MlpOnly,
        Strategy::GamOnly,
        Strategy::LamOnly,
        Strategy::GamLam,
        Strategy::GamLamUnfrozen,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::FullFinetune => "full_finetune",
            Strategy::LinearProbe => "linear_probe",
            Strategy::SaOnly => "sa_only",
            Strategy::MlpOnly => "mlp_only",
            Strategy::GamOnly => "gam_only",
            Strategy::LamOnly => "lam_only",
            Strategy::GamLam => "gam_lam",
            Strategy::GamLamUnfrozen => "gam_lam_unfrozen",
        }
    }

    fn uses_gam(&self) -> bool {
        matches!(
            self,
            Strategy::GamOnly | Strategy::GamLam | Strategy::GamLamUnfrozen
        )
    }

    fn uses_spatial(&self) -> bool {
        matches!(
            self,
            Strategy::LamOnly | Strategy::GamLam | Strategy::GamLamUnfrozen
        )
    }

    fn backbone_trainable(&self, name: &str) -> bool {
        match self {
            Strategy::FullFinetune | Strategy::GamLamUnfrozen => true,
            Strategy::SaOnly => {
                name.contains(".ln1.")
                    || name.ends_with(".wq")
                    || name.ends_with(".wk")
                    || name.ends_with(".wv")
                    || name.ends_with(".wo")
            }
            Strategy::MlpOnly => name.contains(".ln2.") || name.contains(".mlp."),
            _ => false,
        }
    }
}

/// Override for how spatial information enters the token stream; `Auto`
/// resolves to the strategy's default (the full local adapter).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpatialInjection {
    #[default]
    Auto,
    Add,
    CrossAttention,
    Lam,
}

/// Resolve which adapters run forward for a strategy.
pub fn resolve_flags(strategy: Strategy, injection: SpatialInjection) -> AdapterFlags {
    let spatial = if strategy.uses_spatial() {
        match injection {
            SpatialInjection::Auto | SpatialInjection::Lam => SpatialMode::Lam,
            SpatialInjection::Add => SpatialMode::Add,
            SpatialInjection::CrossAttention => SpatialMode::CrossAttention,
        }
    } else {
        SpatialMode::None
    };
    AdapterFlags {
        gam: strategy.uses_gam(),
        spatial,
    }
}

/// Set the trainable flag of every parameter. The flag assignment is total:
/// the strategy (plus the resolved adapter wiring) determines every flag
/// before the first step. Parameters a wiring leaves out of the forward
/// graph are frozen so the missing-gradient check stays meaningful.
pub fn apply_strategy(
    model: &mut ModelBundle<f32>,
    strategy: Strategy,
    flags: AdapterFlags,
    gam_mode: GamMode,
) {
    // Scale blocks beyond the injection count never enter the graph.
    let n_scales = model.config.lam_injection_blocks.len();
    let unused_cnn_block = |name: &str| -> bool {
        (n_scales..3).any(|j| name.starts_with(&format!("cnn.block{j}.")))
    };
    model.visit_mut(&mut |p| {
        let name = p.name.clone();
        p.trainable = if name.starts_with("head.") {
            true
        } else if name.starts_with("pretext.") {
            false
        } else if name.starts_with("backbone.") {
            strategy.backbone_trainable(&name)
        } else if name.starts_with("gam.") {
            flags.gam
                && !(gam_mode == GamMode::Mlp
                    && (name.contains(".expand_k.") || name.contains(".expand_v.")))
        } else if name.starts_with("cnn.") {
            flags.spatial != SpatialMode::None && !unused_cnn_block(&name)
        } else if name.starts_with("lam.") {
            match flags.spatial {
                SpatialMode::None => false,
                SpatialMode::Add => name.contains(".proj.") || name.ends_with(".beta"),
                SpatialMode::CrossAttention => !name.ends_with(".sigma"),
                SpatialMode::Lam => true,
            }
        } else {
            false
        };
    });
}

/// Flags for backbone pre-training on the style pretext: backbone and
/// pretext head train, everything else is frozen and detached.
pub fn apply_pretrain_flags(model: &mut ModelBundle<f32>) {
    model.visit_mut(&mut |p| {
        p.trainable = p.name.starts_with("backbone.") || p.name.starts_with("pretext.");
    });
}

/// Freeze the backbone in place (after pre-training).
pub fn freeze_backbone(model: &mut ModelBundle<f32>) {
    model.visit_mut(&mut |p| {
        if p.name.starts_with("backbone.") {
            p.trainable = false;
        }
    });
}

// ── Step construction (shared by training, eval, and gradcheck) ──────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CeOnly,
    CeFal,
}

/// Batch input: an image with its label and pair identity.
#[derive(Debug, Clone)]
pub struct StepSample {
    pub image: crate::tensor::Tensor<f32>,
    pub label: u8,
    pub pair_id: u64,
}

pub fn pair_to_samples(pair: &(SampleRecord, SampleRecord)) -> [StepSample; 2] {
    [
        StepSample {
            image: pair.0.image.clone(),
            label: pair.0.label,
            pair_id: pair.0.pair_id,
        },
        StepSample {
            image: pair.1.image.clone(),
            label: pair.1.label,
            pair_id: pair.1.pair_id,
        },
    ]
}

/// Everything that defines the loss of one step, independent of precision.
pub struct StepSpec<'a> {
    pub samples: &'a [StepSample],
    pub flags: AdapterFlags,
    pub loss: LossKind,
    pub fal: FalConfig,
    pub epoch: usize,
    /// Compute the pair term even when the schedule weight is zero
    /// (evaluation wants the raw value; training skips the graph entirely).
    pub force_fal_value: bool,
}

pub struct BuiltStep {
    pub vars: vars::ModelVars,
    pub total: NodeId,
    pub ce: NodeId,
    pub fal: Option<NodeId>,
    pub p_fakes: Vec<f64>,
}

impl StepSpec<'_> {
    /// Register the model, run every sample forward, and assemble the batch
    /// loss: mean cross-entropy plus the scheduled pair term.
    pub fn build<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        model: &ModelBundle<S>,
        detach: &mut DetachCtx,
    ) -> Result<BuiltStep> {
        let mvars = vars::register(tape, model)?;
        let mut capture = crate::capture::Capture::disabled();
        let mut ce_terms = Vec::with_capacity(self.samples.len());
        let mut features = Vec::with_capacity(self.samples.len());
        let mut p_fakes = Vec::with_capacity(self.samples.len());
        for s in self.samples {
            let image = tape.input(s.image.cast::<S>())?;
            let out = backbone::forward_features(
                tape,
                &model.config,
                &mvars,
                &self.flags,
                image,
                &mut capture,
            )?;
            let cls = backbone::classify(tape, &mvars.head, out.pooled)?;
            p_fakes.push(tape.value(cls.p_fake).data()[0].to_f64());
            ce_terms.push(loss::ce_loss(tape, cls.p_fake, s.label)?);
            features.push(loss::SampleFeature {
                label: s.label,
                pair_id: s.pair_id,
                pooled: out.pooled,
            });
        }

        let mut ce_sum = ce_terms[0];
        for &t in &ce_terms[1..] {
            ce_sum = tape.add(ce_sum, t)?;
        }
        let ce = tape.scale(ce_sum, 1.0 / ce_terms.len() as f64)?;

        let lambda_active = loss::lambda_for_epoch(self.epoch) != 0.0;
        let want_fal =
            self.loss == LossKind::CeFal && (lambda_active || self.force_fal_value);
        let fal = if want_fal {
            let prototype = tape.slice_row(mvars.head.weight, 0)?;
            let pairs = loss::build_pairs(tape, &features, prototype, self.fal.pair_mode)?;
            Some(loss::fal_loss(tape, &pairs, &self.fal, detach)?)
        } else {
            None
        };
        let total = loss::total_loss(tape, ce, fal, self.epoch)?;
        Ok(BuiltStep {
            vars: mvars,
            total,
            ce,
            fal,
            p_fakes,
        })
    }
}

/// Read gradients for every canonical parameter after a backward pass.
pub fn collect_grads<S: Scalar>(tape: &Tape<S>, mvars: &vars::ModelVars) -> Vec<Option<Vec<f32>>> {
    mvars
        .param_ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.iter().map(|v| v.to_f64() as f32).collect())
        })
        .collect()
}

// ── Settings ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSettings {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Samples per step; must be even (batches are whole pairs).
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    pub seed: u64,
    pub strategy: Strategy,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default)]
    pub spatial_injection: SpatialInjection,
    /// Record wall-clock seconds in the metrics CSV. Off by default: timing
    /// is inherently nondeterministic and runs promise byte-identical CSVs.
    /// Real per-epoch timing always goes to stderr.
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default = "default_true")]
    pub progress: bool,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_weight_decay() -> f64 {
    1e-5
}
fn default_batch_size() -> usize {
    16
}
fn default_epochs() -> usize {
    10
}
fn default_loss() -> LossKind {
    LossKind::CeFal
}
fn default_true() -> bool {
    true
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("lr must be positive, decay nonnegative".into()));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch size must be even and ≥ 2, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        Ok(())
    }
}

// ── Metrics records ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub strategy: String,
    pub seed: u64,
    pub epoch: usize,
    pub split: String,
    pub acc: f64,
    pub auc: f64,
    pub ce_loss: f64,
    pub fal_loss: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "strategy,seed,epoch,split,acc,auc,ce_loss,fal_loss,wall_seconds";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.3}",
            self.strategy,
            self.seed,
            self.epoch,
            self.split,
            self.acc,
            self.auc,
            self.ce_loss,
            self.fal_loss,
            self.wall_seconds
        )
    }
}

pub fn rows_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

// ── Evaluation ───────────────────────────────────────────────────────

pub struct EvalOutcome {
    pub acc: f64,
    pub auc: f64,
    pub ce: f64,
    pub fal: f64,
    /// (p_fake, label) per sample, in manifest order.
    pub scores: Vec<(f64, u8)>,
}

/// Forward-only evaluation over materialized pairs, chunked so parameters
/// register once per chunk. Deterministic: manifest order, fixed chunking.
pub fn evaluate(
    model: &ModelBundle<f32>,
    pairs: &[(SampleRecord, SampleRecord)],
    flags: &AdapterFlags,
    fal_cfg: &FalConfig,
    pairs_per_chunk: usize,
) -> Result<EvalOutcome> {
    let mut scores = Vec::with_capacity(pairs.len() * 2);
    let mut ce_sum = 0.0f64;
    let mut fal_sum = 0.0f64;
    let mut chunks = 0usize;
    for chunk in pairs.chunks(pairs_per_chunk.max(1)) {
        let samples: Vec<StepSample> = chunk.iter().flat_map(|p| pair_to_samples(p)).collect();
        let spec = StepSpec {
            samples: &samples,
            flags: *flags,
            loss: LossKind::CeFal,
            fal: fal_cfg.clone(),
            epoch: 2,
            force_fal_value: true,
        };
        let mut tape = Tape::<f32>::new();
        let mut detach = DetachCtx::record();
        let built = spec.build(&mut tape, model, &mut detach)?;
        ce_sum += tape.value(built.ce).data()[0] as f64;
        if let Some(f) = built.fal {
            fal_sum += tape.value(f).data()[0] as f64;
        }
        chunks += 1;
        for (s, p) in samples.iter().zip(built.p_fakes.iter()) {
            scores.push((*p, s.label));
        }
    }
    let reals: Vec<f64> = scores
        .iter()
        .filter(|(_, y)| *y == 0)
        .map(|(s, _)| *s)
        .collect();
    let fakes: Vec<f64> = scores
        .iter()
        .filter(|(_, y)| *y == 1)
        .map(|(s, _)| *s)
        .collect();
    Ok(EvalOutcome {
        acc: metrics::accuracy(&scores),
        auc: metrics::auc(&reals, &fakes)?,
        ce: ce_sum / chunks.max(1) as f64,
        fal: fal_sum / chunks.max(1) as f64,
        scores,
    })
}

// ── Training loop ────────────────────────────────────────────────────

pub struct SplitData {
    pub name: String,
    pub pairs: Vec<(SampleRecord, SampleRecord)>,
}

pub struct TrainOutput {
    pub rows: Vec<MetricsRow>,
}

/// Train `model` in place. Per epoch: seeded pair shuffle, batches of whole
/// pairs, forward, scheduled total loss, backward, Adam with decoupled decay;
/// then an evaluation pass over every held-out split.
pub fn train(
    model: &mut ModelBundle<f32>,
    settings: &TrainSettings,
    fal_cfg: &FalConfig,
    train_pairs: &[(SampleRecord, SampleRecord)],
    held_out: &[SplitData],
) -> Result<TrainOutput> {
    settings.validate()?;
    fal_cfg.validate()?;
    let flags = resolve_flags(settings.strategy, settings.spatial_injection);
    apply_strategy(model, settings.strategy, flags, model.config.gam_mode);

    let n_params = {
        let mut n = 0;
        model.visit(&mut |_| n += 1);
        n
    };
    let mut adam = AdamState::new(n_params);
    let pairs_per_batch = settings.batch_size / 2;
    let mut rows = Vec::new();

    for epoch in 1..=settings.epochs {
        let epoch_start = Instant::now();
        let lr = lr_schedule(epoch, settings.lr);
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        let mut shuffle_rng = rng::stream(settings.seed, rng::mix(TAG_SHUFFLE, epoch as u64));
        rng::shuffle(&mut shuffle_rng, &mut order);

        let mut train_scores: Vec<(f64, u8)> = Vec::with_capacity(train_pairs.len() * 2);
        let mut ce_sum = 0.0f64;
        let mut fal_sum = 0.0f64;
        let mut steps = 0usize;

        for batch_idx in order.chunks(pairs_per_batch) {
            let samples: Vec<StepSample> = batch_idx
                .iter()
                .flat_map(|&i| pair_to_samples(&train_pairs[i]))
                .collect();
            let spec = StepSpec {
                samples: &samples,
                flags,
                loss: settings.loss,
                fal: fal_cfg.clone(),
                epoch,
                force_fal_value: false,
            };
            let mut tape = Tape::<f32>::new();
            let mut detach = DetachCtx::record();
            let built = spec.build(&mut tape, model, &mut detach).map_err(|e| {
                Error::Train(format!("epoch {epoch} step {steps}: {e}"))
            })?;
            tape.backward(built.total).map_err(|e| {
                Error::Train(format!("epoch {epoch} step {steps} backward: {e}"))
            })?;
            ce_sum += tape.value(built.ce).data()[0] as f64;
            if let Some(f) = built.fal {
                fal_sum += tape.value(f).data()[0] as f64;
            }
            for (s, p) in samples.iter().zip(built.p_fakes.iter()) {
                train_scores.push((*p, s.label));
            }
            let grads = collect_grads(&tape, &built.vars);
            drop(tape);
            adam_step(model, &grads, &mut adam, lr, settings.weight_decay)?;
            steps += 1;
        }

        let train_reals: Vec<f64> = train_scores
            .iter()
            .filter(|(_, y)| *y == 0)
            .map(|(s, _)| *s)
            .collect();
        let train_fakes: Vec<f64> = train_scores
            .iter()
            .filter(|(_, y)| *y == 1)
            .map(|(s, _)| *s)
            .collect();
        let wall = epoch_start.elapsed().as_secs_f64();
        let recorded_wall = if settings.record_timing { wall } else { 0.0 };
        rows.push(MetricsRow {
            strategy: settings.strategy.name().into(),
            seed: settings.seed,
            epoch,
            split: "train".into(),
            acc: metrics::accuracy(&train_scores),
            auc: metrics::auc(&train_reals, &train_fakes)?,
            ce_loss: ce_sum / steps.max(1) as f64,
            fal_loss: fal_sum / steps.max(1) as f64,
            wall_seconds: recorded_wall,
        });

        for split in held_out {
            let eval_start = Instant::now();
            let out = evaluate(model, &split.pairs, &flags, fal_cfg, pairs_per_batch)?;
            let eval_wall = eval_start.elapsed().as_secs_f64();
            rows.push(MetricsRow {
                strategy: settings.strategy.name().into(),
                seed: settings.seed,
                epoch,
                split: split.name.clone(),
                acc: out.acc,
                auc: out.auc,
                ce_loss: out.ce,
                fal_loss: out.fal,
                wall_seconds: if settings.record_timing { eval_wall } else { 0.0 },
            });
        }
        if settings.progress {
            let summary: Vec<String> = rows
                .iter()
                .rev()
                .take(held_out.len() + 1)
                .map(|r| format!("{} acc {:.3} auc {:.3}", r.split, r.acc, r.auc))
                .collect();
            eprintln!(
                "[{}] epoch {epoch}/{} lr {lr:.2e} wall {wall:.1}s | {}",
                settings.strategy.name(),
                settings.epochs,
                summary.join(" | ")
            );
        }
    }

    Ok(TrainOutput { rows })
}

// ── Backbone pre-training on the style pretext ───────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainSettings {
    #[serde(default = "default_pretrain_images")]
    pub images: usize,
    #[serde(default = "default_pretrain_epochs")]
    pub epochs: usize,
    #[serde(default = "default_pretrain_lr")]
    pub lr: f64,
    #[serde(default = "default_pretrain_batch")]
    pub batch_size: usize,
    #[serde(default = "default_pretrain_seed")]
    pub seed: u64,
}

fn default_pretrain_images() -> usize {
    2048
}
fn default_pretrain_epochs() -> usize {
    4
}
fn default_pretrain_lr() -> f64 {
    1e-3
}
fn default_pretrain_batch() -> usize {
    16
}
fn default_pretrain_seed() -> u64 {
    1000
}

impl Default for PretrainSettings {
    fn default() -> Self {
        PretrainSettings {
            images: default_pretrain_images(),
            epochs: default_pretrain_epochs(),
            lr: default_pretrain_lr(),
            batch_size: default_pretrain_batch(),
            seed: default_pretrain_seed(),
        }
    }
}

pub const PRETRAIN_SEED_OFFSET: u64 = 200_000_000;

/// Train the backbone from scratch to classify the global style of
/// real-only images, then freeze it. The returned accuracy is the final
/// epoch's training accuracy on the pretext task.
pub fn pretrain_backbone(
    model: &mut ModelBundle<f32>,
    settings: &PretrainSettings,
    domain: &crate::data::DomainParams,
) -> Result<f64> {
    let classes = domain.style_classes;
    apply_pretrain_flags(model);
    let flags = AdapterFlags::none();

    // Real-only pretext images, disjoint seed range from every split.
    let base = settings
        .seed
        .wrapping_mul(1_000_003)
        .wrapping_add(PRETRAIN_SEED_OFFSET);
    let images: Vec<(crate::tensor::Tensor<f32>, usize)> = (0..settings.images as u64)
        .map(|i| {
            let class = (i as usize) % classes;
            let rec = crate::data::generate_real(base + i, domain, class);
            (rec.image, class)
        })
        .collect();

    let n_params = {
        let mut n = 0;
        model.visit(&mut |_| n += 1);
        n
    };
    let mut adam = AdamState::new(n_params);
    let mut last_acc = 0.0;
    for epoch in 1..=settings.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut shuffle_rng = rng::stream(settings.seed, rng::mix(TAG_SHUFFLE, epoch as u64));
        rng::shuffle(&mut shuffle_rng, &mut order);
        let mut correct = 0usize;
        for batch in order.chunks(settings.batch_size.max(1)) {
            let mut tape = Tape::<f32>::new();
            let mvars = vars::register(&mut tape, model)?;
            let head = mvars
                .pretext
                .as_ref()
                .ok_or_else(|| Error::Train("pretext head missing".into()))?;
            let mut terms = Vec::with_capacity(batch.len());
            let mut capture = crate::capture::Capture::disabled();
            for &i in batch {
                let (image, class) = &images[i];
                let img = tape.input(image.clone())?;
                let out = backbone::forward_features(
                    &mut tape,
                    &model.config,
                    &mvars,
                    &flags,
                    img,
                    &mut capture,
                )?;
                let d = tape.shape(out.pooled)[0];
                let row = tape.reshape(out.pooled, &[1, d])?;
                let wt = tape.transpose(head.weight)?;
                let logits = tape.matmul(row, wt)?;
                let logits = tape.add_bias_row(logits, head.bias)?;
                let probs = tape.softmax_rows(logits)?;
                let pv = tape.value(probs).data();
                let pred = pv
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                if pred == *class {
                    correct += 1;
                }
                terms.push(loss::ce_multiclass(&mut tape, probs, *class)?);
            }
            let mut sum = terms[0];
            for &t in &terms[1..] {
                sum = tape.add(sum, t)?;
            }
            let total = tape.scale(sum, 1.0 / terms.len() as f64)?;
            tape.backward(total)?;
            let grads = collect_grads(&tape, &mvars);
            drop(tape);
            adam_step(model, &grads, &mut adam, settings.lr, 0.0)?;
        }
        last_acc = correct as f64 / images.len() as f64;
        eprintln!(
            "[pretext] epoch {epoch}/{} acc {last_acc:.3} wall {:.1}s",
            settings.epochs,
            start.elapsed().as_secs_f64()
        );
    }

    freeze_backbone(model);
    model.pretext = None;
    Ok(last_acc)
}
