//! Run configuration: one flat JSON document with model, data, train,
//! strategy, and fal sections, echoed verbatim into every output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DomainName, DomainParams, Manifest};
use crate::error::{Error, Result};
use crate::loss::FalConfig;
use crate::model::ModelConfig;
use crate::train::{
    LossKind, PretrainSettings, SpatialInjection, Strategy, TrainSettings,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSection {
    #[serde(default = "default_train_pairs")]
    pub train_pairs: usize,
    #[serde(default = "default_test_pairs")]
    pub test_pairs: usize,
    #[serde(default = "DomainParams::source")]
    pub source: DomainParams,
    #[serde(default = "DomainParams::shifted")]
    pub shifted: DomainParams,
}

fn default_train_pairs() -> usize {
    2000
}
fn default_test_pairs() -> usize {
    500
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_pairs: default_train_pairs(),
            test_pairs: default_test_pairs(),
            source: DomainParams::source(),
            shifted: DomainParams::shifted(),
        }
    }
}

impl DataSection {
    pub fn validate(&self) -> Result<()> {
        if self.train_pairs == 0 || self.test_pairs == 0 {
            return Err(Error::Config("pair counts must be positive".into()));
        }
        if !self.source.compatible(&self.shifted) {
            return Err(Error::Config(
                "source and shifted domains may differ only in blend width and noise amplitude"
                    .into(),
            ));
        }
        Ok(())
    }

    /// The three manifests of a run: training pairs from the source domain,
    /// held-out source pairs, and their shifted-domain twins.
    pub fn manifests(&self, seed: u64) -> Result<(Manifest, Manifest, Manifest)> {
        let train = crate::data::build_split(
            self.train_pairs,
            DomainName::Source,
            &self.source,
            seed,
            crate::data::TRAIN_SEED_OFFSET,
        );
        let test_source = crate::data::build_split(
            self.test_pairs,
            DomainName::Source,
            &self.source,
            seed,
            crate::data::TEST_SEED_OFFSET,
        );
        let test_shifted = test_source.with_domain(DomainName::Shifted, &self.shifted)?;
        Ok((train, test_source, test_shifted))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
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
fn default_seed() -> u64 {
    42
}
fn default_true() -> bool {
    true
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: default_lr(),
            weight_decay: default_weight_decay(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            seed: default_seed(),
            record_timing: false,
            progress: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategySection {
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default)]
    pub spatial_injection: SpatialInjection,
}

fn default_strategy() -> Strategy {
    Strategy::GamLam
}
fn default_loss() -> LossKind {
    LossKind::CeFal
}

impl Default for StrategySection {
    fn default() -> Self {
        StrategySection {
            strategy: default_strategy(),
            loss: default_loss(),
            spatial_injection: SpatialInjection::Auto,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct PathsSection {
    /// Frozen backbone to load before training / evaluation.
    pub backbone_archive: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckSection {
    #[serde(default = "default_samples_per_group")]
    pub samples_per_group: usize,
    #[serde(default = "default_h")]
    pub h: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Standard deviation of seeded noise added to trainable parameters
    /// before checking; zero leaves the model as configured.
    #[serde(default)]
    pub perturb: f64,
    #[serde(default = "default_gradcheck_pairs")]
    pub pairs: usize,
}

fn default_samples_per_group() -> usize {
    4
}
fn default_h() -> f64 {
    4e-3
}
fn default_tolerance() -> f64 {
    1e-4
}
fn default_gradcheck_pairs() -> usize {
    2
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection {
            samples_per_group: default_samples_per_group(),
            h: default_h(),
            tolerance: default_tolerance(),
            perturb: 0.0,
            pairs: default_gradcheck_pairs(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct AblateSection {
    /// Training pairs per suite run; defaults to the data section's count.
    pub pairs: Option<usize>,
    /// Epochs per suite run; defaults to the train section's count.
    pub epochs: Option<usize>,
    /// Run strategies on parallel threads (each run is itself
    /// single-threaded and isolated).
    #[serde(default = "default_true")]
    pub parallel: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub strategy: StrategySection,
    #[serde(default)]
    pub fal: FalConfig,
    #[serde(default)]
    pub pretrain: PretrainSettings,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(default)]
    pub gradcheck: GradcheckSection,
    #[serde(default)]
    pub ablate: AblateSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("cannot parse {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.fal.validate()?;
        self.settings().validate()?;
        if self.model.image_size != crate::data::IMAGE_SIZE {
            return Err(Error::Config(format!(
                "model image size {} must match generator size {}",
                self.model.image_size,
                crate::data::IMAGE_SIZE
            )));
        }
        Ok(())
    }

    /// Assemble the internal training settings from the train + strategy
    /// sections.
    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            seed: self.train.seed,
            strategy: self.strategy.strategy,
            loss: self.strategy.loss,
            spatial_injection: self.strategy.spatial_injection,
            record_timing: self.train.record_timing,
            progress: self.train.progress,
        }
    }

    /// Echo the configuration into an output directory.
    pub fn echo_into(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir)?;
        let text = serde_json::to_string_pretty(self)?;
        fs::write(out_dir.join("config.json"), text + "\n")?;
        Ok(())
    }
}
