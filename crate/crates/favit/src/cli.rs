//! Command-line interface: data generation, backbone pre-training, training,
//! evaluation, gradient verification, the ablation suite, attention-map
//! export, and archive inspection.
//!
//! Exit codes: 0 success, 2 config error, 3 verification failure, 4 runtime
//! numeric failure. Errors print as one line on stderr.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::archive;
use crate::config::RunConfig;
use crate::data;
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck_model, perturb_trainable, GradcheckSettings};
use crate::imgio;
use crate::model::ModelBundle;
use crate::train::{self, SplitData, StepSpec};
use crate::{ablate, capture, vars};

#[derive(Parser)]
#[command(
    name = "favit",
    about = "Forgery-aware adaptive vision transformer: synthetic task, adapter training, ablations",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON). Defaults apply for every omitted field.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the training seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write dataset manifests (train, test-source, test-shifted).
    GenData {
        #[command(flatten)]
        common: Common,
        /// Also export the first N pairs as PPM/PGM images for inspection.
        #[arg(long, default_value_t = 0)]
        export: usize,
    },
    /// Train the backbone on the style pretext, freeze it, and archive it.
    PretrainBackbone {
        #[command(flatten)]
        common: Common,
    },
    /// Train per the configured strategy; writes metrics.csv and model.favt.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a trained archive on the held-out splits.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Trained model archive (defaults to <out>/model.favt).
        #[arg(long)]
        archive: Option<PathBuf>,
    },
    /// Verify reverse-mode gradients against 64-bit central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Run the full adaptation-strategy ablation suite.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Export one head's local/global/fused attention rows as PGM maps.
    ExportAttention {
        #[command(flatten)]
        common: Common,
        /// Trained model archive (optional: fresh initialization otherwise).
        #[arg(long)]
        archive: Option<PathBuf>,
        /// ViT block index; must be a local-injection block.
        #[arg(long)]
        block: usize,
        #[arg(long)]
        head: usize,
        /// Query token index in [0, L).
        #[arg(long)]
        query: usize,
    },
    /// Print tensor names, shapes, flags, and hashes of an archive.
    InspectArchive {
        /// Archive path.
        archive: PathBuf,
    },
}

/// Entry point. Returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } => 4,
        Error::Verification(_) => 3,
        _ => 2,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Fresh model; backbone loaded from the configured archive when present.
fn build_model(cfg: &RunConfig, require_backbone: bool) -> Result<ModelBundle<f32>> {
    let mut model = ModelBundle::init(cfg.model.clone(), cfg.train.seed)?;
    match &cfg.paths.backbone_archive {
        Some(path) => {
            let entries = archive::load_archive(path)?;
            model.load_backbone(&entries)?;
        }
        None if require_backbone => {
            return Err(Error::Config(
                "paths.backbone_archive is required for this command".into(),
            ));
        }
        None => {}
    }
    Ok(model)
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenData { common, export } => gen_data(&common, export),
        Command::PretrainBackbone { common } => pretrain_backbone(&common),
        Command::Train { common } => train_cmd(&common),
        Command::Eval { common, archive } => eval_cmd(&common, archive),
        Command::Gradcheck { common } => gradcheck_cmd(&common),
        Command::Ablate { common } => ablate_cmd(&common),
        Command::ExportAttention {
            common,
            archive,
            block,
            head,
            query,
        } => export_attention(&common, archive, block, head, query),
        Command::InspectArchive { archive } => inspect_archive(&archive),
    }
}

fn gen_data(common: &Common, export: usize) -> Result<i32> {
    let cfg = load_config(common)?;
    cfg.echo_into(&common.out)?;
    let (train, test_source, test_shifted) = cfg.data.manifests(cfg.train.seed)?;
    for (name, manifest) in [
        ("train", &train),
        ("test_source", &test_source),
        ("test_shifted", &test_shifted),
    ] {
        fs::write(
            common.out.join(format!("{name}.json")),
            manifest.to_json()? + "\n",
        )?;
    }
    if export > 0 {
        let dir = common.out.join("samples");
        for i in 0..export.min(train.pairs.len()) {
            let (real, fake) = train.pair(i)?;
            imgio::sample_to_ppm(&dir.join(format!("pair{i:04}_real.ppm")), &real.image)?;
            imgio::sample_to_ppm(&dir.join(format!("pair{i:04}_fake.ppm")), &fake.image)?;
            if let Some(mask) = &fake.mask {
                imgio::mask_to_pgm(
                    &dir.join(format!("pair{i:04}_mask.pgm")),
                    mask,
                    data::IMAGE_SIZE,
                )?;
            }
        }
    }
    println!(
        "wrote manifests: train {} pairs, test {} pairs per domain",
        train.pairs.len(),
        test_source.pairs.len()
    );
    Ok(0)
}

fn pretrain_backbone(common: &Common) -> Result<i32> {
    let cfg = load_config(common)?;
    cfg.echo_into(&common.out)?;
    let mut model = ModelBundle::init(cfg.model.clone(), cfg.pretrain.seed)?
        .with_pretext_head(cfg.data.source.style_classes, cfg.pretrain.seed);
    let acc = train::pretrain_backbone(&mut model, &cfg.pretrain, &cfg.data.source)?;
    let path = common.out.join("backbone.favt");
    archive::save_archive(&path, &model.backbone_entries())?;
    println!(
        "backbone archived: {} (pretext acc {:.3}, hash {})",
        path.display(),
        acc,
        model.backbone_hash()
    );
    Ok(0)
}

fn materialize_splits(
    cfg: &RunConfig,
) -> Result<(
    Vec<(data::SampleRecord, data::SampleRecord)>,
    Vec<SplitData>,
)> {
    let (train_m, src_m, shf_m) = cfg.data.manifests(cfg.train.seed)?;
    let train_pairs = train_m.materialize()?;
    let held_out = vec![
        SplitData {
            name: "test_source".into(),
            pairs: src_m.materialize()?,
        },
        SplitData {
            name: "test_shifted".into(),
            pairs: shf_m.materialize()?,
        },
    ];
    Ok((train_pairs, held_out))
}

fn train_cmd(common: &Common) -> Result<i32> {
    let cfg = load_config(common)?;
    cfg.echo_into(&common.out)?;
    let mut model = build_model(&cfg, false)?;
    let (train_pairs, held_out) = materialize_splits(&cfg)?;
    let settings = cfg.settings();
    let out = train::train(&mut model, &settings, &cfg.fal, &train_pairs, &held_out)?;
    fs::write(common.out.join("metrics.csv"), train::rows_to_csv(&out.rows))?;
    model.save(&common.out.join("model.favt"))?;
    if let Some(last) = out.rows.iter().rev().find(|r| r.split == "test_shifted") {
        println!(
            "trained {} epochs; final shifted-domain acc {:.4} auc {:.4}",
            settings.epochs, last.acc, last.auc
        );
    }
    Ok(0)
}

fn eval_cmd(common: &Common, archive_path: Option<PathBuf>) -> Result<i32> {
    let cfg = load_config(common)?;
    let path = archive_path.unwrap_or_else(|| common.out.join("model.favt"));
    let mut model = ModelBundle::init(cfg.model.clone(), cfg.train.seed)?;
    model.load_into(&path)?;
    let settings = cfg.settings();
    let flags = train::resolve_flags(settings.strategy, settings.spatial_injection);
    let (_, held_out) = materialize_splits(&cfg)?;
    let mut rows = Vec::new();
    for split in &held_out {
        let out = train::evaluate(
            &model,
            &split.pairs,
            &flags,
            &cfg.fal,
            settings.batch_size / 2,
        )?;
        rows.push(train::MetricsRow {
            strategy: settings.strategy.name().into(),
            seed: settings.seed,
            epoch: settings.epochs,
            split: split.name.clone(),
            acc: out.acc,
            auc: out.auc,
            ce_loss: out.ce,
            fal_loss: out.fal,
            wall_seconds: 0.0,
        });
        println!("{}: acc {:.6} auc {:.6}", split.name, out.acc, out.auc);
    }
    fs::create_dir_all(&common.out)?;
    fs::write(common.out.join("eval.csv"), train::rows_to_csv(&rows))?;
    Ok(0)
}

fn gradcheck_cmd(common: &Common) -> Result<i32> {
    let cfg = load_config(common)?;
    let mut model = build_model(&cfg, false)?;
    let settings = cfg.settings();
    let flags = train::resolve_flags(settings.strategy, settings.spatial_injection);
    train::apply_strategy(&mut model, settings.strategy, flags, cfg.model.gam_mode);
    if cfg.gradcheck.perturb > 0.0 {
        perturb_trainable(&mut model, settings.seed, cfg.gradcheck.perturb);
    }

    let (train_m, _, _) = cfg.data.manifests(settings.seed)?;
    let n_pairs = cfg.gradcheck.pairs.min(train_m.pairs.len());
    let mut samples = Vec::new();
    for i in 0..n_pairs {
        let pair = train_m.pair(i)?;
        samples.extend(train::pair_to_samples(&pair));
    }
    let spec = StepSpec {
        samples: &samples,
        flags,
        loss: settings.loss,
        fal: cfg.fal.clone(),
        epoch: 2,
        force_fal_value: false,
    };
    let gc = GradcheckSettings {
        samples_per_group: cfg.gradcheck.samples_per_group,
        h: cfg.gradcheck.h,
        tolerance: cfg.gradcheck.tolerance,
        seed: settings.seed,
    };
    let report = gradcheck_model(&model, &spec, &gc)?;
    print!("{}", report.render());
    if report.passed() {
        Ok(0)
    } else {
        Err(Error::Verification(format!(
            "gradcheck max relative error {:.3e} exceeds tolerance {:.1e}",
            report.max_rel_err, report.tolerance
        )))
    }
}

fn ablate_cmd(common: &Common) -> Result<i32> {
    let mut cfg = load_config(common)?;
    if let Some(pairs) = cfg.ablate.pairs {
        cfg.data.train_pairs = pairs;
    }
    if let Some(epochs) = cfg.ablate.epochs {
        cfg.train.epochs = epochs;
    }
    cfg.echo_into(&common.out)?;
    let model = build_model(&cfg, true)?;
    let (train_pairs, held_out) = materialize_splits(&cfg)?;
    let settings = train::TrainSettings {
        progress: false,
        ..cfg.settings()
    };
    let rows = ablate::run_suite(
        &model,
        &settings,
        &cfg.fal,
        &train_pairs,
        &held_out[0].pairs,
        &held_out[1].pairs,
        cfg.ablate.parallel,
    );
    let csv = ablate::rows_to_csv(&rows);
    fs::write(common.out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    let failures = rows.iter().filter(|r| r.status != "ok").count();
    if failures > 0 {
        eprintln!("{failures} of {} runs failed (see status column)", rows.len());
    }
    Ok(0)
}

fn export_attention(
    common: &Common,
    archive_path: Option<PathBuf>,
    block: usize,
    head: usize,
    query: usize,
) -> Result<i32> {
    let cfg = load_config(common)?;
    let mut model = build_model(&cfg, false)?;
    if let Some(path) = archive_path {
        model.load_into(&path)?;
    }
    let point = cfg
        .model
        .lam_injection_blocks
        .iter()
        .position(|&b| b == block)
        .ok_or_else(|| {
            Error::Config(format!(
                "block {block} is not an injection block {:?}",
                cfg.model.lam_injection_blocks
            ))
        })?;
    if head >= cfg.model.num_heads {
        return Err(Error::Config(format!(
            "head {head} out of {}",
            cfg.model.num_heads
        )));
    }
    let l = cfg.model.tokens();
    if query >= l {
        return Err(Error::Config(format!("query {query} out of {l}")));
    }

    // The inspected input is the fake of the first seeded pair.
    let (train_m, _, _) = cfg.data.manifests(cfg.train.seed)?;
    let (_, fake) = train_m.pair(0)?;
    let mut tape = crate::tape::Tape::<f32>::new();
    let mvars = vars::register(&mut tape, &model)?;
    let img = tape.input(fake.image.clone())?;
    let mut cap = capture::Capture::enabled_new();
    let flags = crate::backbone::AdapterFlags::full();
    crate::backbone::forward_features(&mut tape, &cfg.model, &mvars, &flags, img, &mut cap)?;

    let rec = cap
        .lam
        .iter()
        .find(|r| r.point == point && r.head == head)
        .ok_or_else(|| Error::Config("no attention recorded at that point".into()))?;
    let grid = cfg.model.grid();
    fs::create_dir_all(&common.out)?;
    let stem = format!("attn_block{block}_head{head}_query{query}");
    let row = |m: &crate::tensor::Tensor<f32>| -> Vec<f32> {
        (0..l).map(|j| m.at2(query, j)).collect()
    };
    for (suffix, matrix) in [
        ("local", &rec.a_local),
        ("global", &rec.a_global),
        ("final", &rec.a_final),
    ] {
        imgio::attention_row_to_pgm(
            &common.out.join(format!("{stem}_{suffix}.pgm")),
            &row(matrix),
            grid,
        )?;
    }
    println!(
        "wrote 3 maps to {} (gate {:.4})",
        common.out.display(),
        rec.gate
    );
    Ok(0)
}

fn inspect_archive(path: &Path) -> Result<i32> {
    let entries = archive::load_archive(path)?;
    for e in &entries {
        let shape: Vec<String> = e.tensor.shape().iter().map(|s| s.to_string()).collect();
        println!(
            "{} trainable={} shape=[{}] sha256={}",
            e.name,
            e.trainable,
            shape.join("×"),
            archive::sha256_hex(&e.tensor.to_le_bytes())
        );
    }
    println!(
        "{} tensors, archive sha256={}",
        entries.len(),
        archive::entries_sha256(&entries)
    );
    Ok(0)
}
