//! The adaptation-strategy ablation suite: eight trainable-set strategies,
//! three spatial-injection variants, and both pair modes, all trained from
//! the same frozen backbone and seed. Emits one CSV sorted by run name;
//! failed runs become explicit failure rows instead of aborting the suite.

use crate::data::SampleRecord;
use crate::error::Result;
use crate::loss::{FalConfig, PairMode};
use crate::model::ModelBundle;
use crate::train::{
    self, LossKind, SpatialInjection, Strategy, TrainSettings,
};

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub name: &'static str,
    pub strategy: Strategy,
    pub loss: LossKind,
    pub spatial: SpatialInjection,
    pub pair_mode: PairMode,
}

/// The full suite: 8 strategies (cross-entropy only, the model-adaptation
/// comparison) + 3 spatial-injection variants + 2 pair modes (both on the
/// full model with the combined loss).
pub fn suite() -> Vec<AblationRun> {
    let mut runs = Vec::new();
    for s in Strategy::ALL {
        let name = match s {
            Strategy::FullFinetune => "adapt_full_finetune",
            Strategy::LinearProbe => "adapt_linear_probe",
            Strategy::SaOnly => "adapt_sa_only",
            Strategy::MlpOnly => "adapt_mlp_only",
            Strategy::GamOnly => "adapt_gam_only",
            Strategy::LamOnly => "adapt_lam_only",
            Strategy::GamLam => "adapt_gam_lam",
            Strategy::GamLamUnfrozen => "adapt_gam_lam_unfrozen",
        };
        runs.push(AblationRun {
            name,
            strategy: s,
            loss: LossKind::CeOnly,
            spatial: SpatialInjection::Auto,
            pair_mode: PairMode::FineGrained,
        });
    }
    for (name, spatial) in [
        ("spatial_add", SpatialInjection::Add),
        ("spatial_cross_attention", SpatialInjection::CrossAttention),
        ("spatial_lam", SpatialInjection::Lam),
    ] {
        runs.push(AblationRun {
            name,
            strategy: Strategy::GamLam,
            loss: LossKind::CeFal,
            spatial,
            pair_mode: PairMode::FineGrained,
        });
    }
    for (name, mode) in [
        ("fal_fine_grained", PairMode::FineGrained),
        ("fal_all_pairs", PairMode::AllPairs),
    ] {
        runs.push(AblationRun {
            name,
            strategy: Strategy::GamLam,
            loss: LossKind::CeFal,
            spatial: SpatialInjection::Lam,
            pair_mode: mode,
        });
    }
    runs
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: String,
    pub seed: u64,
    pub source_auc: Option<f64>,
    pub shifted_auc: Option<f64>,
    pub status: String,
}

pub const ABLATION_HEADER: &str = "strategy,seed,source_auc,shifted_auc,status";

impl AblationRow {
    pub fn to_csv(&self) -> String {
        let fmt = |v: &Option<f64>| match v {
            Some(x) => format!("{x:.6}"),
            None => String::new(),
        };
        format!(
            "{},{},{},{},{}",
            self.name,
            self.seed,
            fmt(&self.source_auc),
            fmt(&self.shifted_auc),
            self.status
        )
    }
}

pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

type Pairs = [(SampleRecord, SampleRecord)];

fn run_one(
    run: &AblationRun,
    base_model: &ModelBundle<f32>,
    base_settings: &TrainSettings,
    fal: &FalConfig,
    train_pairs: &Pairs,
    test_source: &Pairs,
    test_shifted: &Pairs,
) -> Result<(f64, f64)> {
    let mut model = base_model.clone();
    let settings = TrainSettings {
        strategy: run.strategy,
        loss: run.loss,
        spatial_injection: run.spatial,
        ..base_settings.clone()
    };
    let fal_cfg = FalConfig {
        pair_mode: run.pair_mode,
        ..fal.clone()
    };
    train::train(&mut model, &settings, &fal_cfg, train_pairs, &[])?;
    let flags = train::resolve_flags(run.strategy, run.spatial);
    let src = train::evaluate(&model, test_source, &flags, &fal_cfg, settings.batch_size / 2)?;
    let shf = train::evaluate(&model, test_shifted, &flags, &fal_cfg, settings.batch_size / 2)?;
    Ok((src.auc, shf.auc))
}

/// Train every suite run from the same initialization and seed. Runs may
/// execute on parallel threads; each is isolated and single-threaded, and
/// the output is sorted by name so the CSV is order-independent.
#[allow(clippy::too_many_arguments)]
pub fn run_suite(
    base_model: &ModelBundle<f32>,
    base_settings: &TrainSettings,
    fal: &FalConfig,
    train_pairs: &Pairs,
    test_source: &Pairs,
    test_shifted: &Pairs,
    parallel: bool,
) -> Vec<AblationRow> {
    let runs = suite();
    let mut rows: Vec<AblationRow> = if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = runs
                .iter()
                .map(|run| {
                    scope.spawn(move || {
                        let outcome = run_one(
                            run,
                            base_model,
                            base_settings,
                            fal,
                            train_pairs,
                            test_source,
                            test_shifted,
                        );
                        (run.name, outcome)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation thread panicked"))
                .map(|(name, outcome)| to_row(name, base_settings.seed, outcome))
                .collect()
        })
    } else {
        runs.iter()
            .map(|run| {
                let outcome = run_one(
                    run,
                    base_model,
                    base_settings,
                    fal,
                    train_pairs,
                    test_source,
                    test_shifted,
                );
                to_row(run.name, base_settings.seed, outcome)
            })
            .collect()
    };
    rows.sort_by(|a, b| a.name.cmp(&b.name));
    rows
}

fn to_row(name: &str, seed: u64, outcome: Result<(f64, f64)>) -> AblationRow {
    match outcome {
        Ok((source_auc, shifted_auc)) => AblationRow {
            name: name.into(),
            seed,
            source_auc: Some(source_auc),
            shifted_auc: Some(shifted_auc),
            status: "ok".into(),
        },
        Err(e) => AblationRow {
            name: name.into(),
            seed,
            source_auc: None,
            shifted_auc: None,
            status: format!("failed: {}", e.to_string().replace(',', ";")),
        },
    }
}
