//! Experiment driver: synthetic data generation, episodic training, detector
//! training, N-episode evaluation, the two ablations, and per-query
//! explanations. Every run writes a manifest sufficient to reproduce it.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use conceptshot::config::KvConfig;
use conceptshot::container::{
    bundle_to_bytes, load_model, model_to_bytes, ModelContainer, ARCHIVE_FORMAT_VERSION,
    BUNDLE_FORMAT_VERSION, MODEL_FORMAT_VERSION,
};
use conceptshot::eval::{
    run_evaluation, run_oracle_comparison, run_weight_ablation, EvalReport, ExperimentConfig,
    REPORT_SCHEMA_VERSION,
};
use conceptshot::util::fnv1a64;
use conceptshot::{
    build_prototype_bank_novel, classify, explain, generate_synthetic_dataset, sample_episode,
    train_concept_learners, train_detectors, validate_dataset, AugmentationConfig, DatasetBundle,
    DetectorTrainConfig, SyntheticConfig, TrainConfig, WeightingMode,
};

#[derive(Parser)]
#[command(
    name = "conceptshot",
    about = "Interpretable concept-based few-shot classification",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Key-value config file (see README for keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed; overrides the config's `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for reports, models, and manifests.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle.
    GenSynth,
    /// Validate a dataset bundle's invariants.
    ValidateData,
    /// Train the concept learners (shared trunk + per-concept heads).
    Train,
    /// Train per-concept detectors on a frozen trained backbone.
    TrainDetectors,
    /// Evaluate over seeded episodes and write a report.
    Eval,
    /// Paired comparison: probability weights vs equal weights.
    AblateWeights,
    /// Paired comparison: oracle annotations vs detectors.
    AblateOracle,
    /// Classify one query image and emit its explanation document.
    Explain,
}

struct Ctx {
    cfg: KvConfig,
    config_path: Option<PathBuf>,
    seed: u64,
    out: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let cfg = match &cli.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("cannot read config {}", path.display()))?;
                KvConfig::parse(&text)?
            }
            None => KvConfig::default(),
        };
        let seed = match cli.seed {
            Some(s) => s,
            None => cfg.get_u64("seed", 0)?,
        };
        std::fs::create_dir_all(&cli.out)
            .with_context(|| format!("cannot create output dir {}", cli.out.display()))?;
        Ok(Ctx {
            cfg,
            config_path: cli.config.clone(),
            seed,
            out: cli.out.clone(),
        })
    }

    fn experiment(&self) -> Result<ExperimentConfig> {
        Ok(ExperimentConfig::from_kv(&self.cfg, self.seed)?)
    }

    fn load_data(&self) -> Result<DatasetBundle> {
        Ok(self.experiment()?.data.load()?)
    }

    fn model_path(&self) -> Result<PathBuf> {
        self.cfg
            .get("model")
            .map(PathBuf::from)
            .ok_or_else(|| anyhow!("config needs a `model` path"))
    }

    fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig::from_kv(&self.cfg, self.seed)?)
    }

    fn augmentation(&self) -> Result<AugmentationConfig> {
        Ok(AugmentationConfig::from_kv(&self.cfg)?)
    }

    fn detector_config(&self) -> Result<DetectorTrainConfig> {
        Ok(DetectorTrainConfig::from_kv(&self.cfg, self.seed)?)
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.out.join(name);
        std::fs::write(&path, contents)
            .with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }

    /// Manifest recording everything needed to reproduce the run.
    fn write_manifest(
        &self,
        command: &str,
        hashes: BTreeMap<String, String>,
        outputs: &[&Path],
    ) -> Result<()> {
        let config_echo: BTreeMap<String, String> = self
            .cfg
            .keys()
            .map(|k| (k.to_string(), self.cfg.get(k).unwrap_or("").to_string()))
            .collect();
        let manifest = serde_json::json!({
            "command": command,
            "seed": self.seed,
            "config_path": self.config_path.as_ref().map(|p| p.display().to_string()),
            "config": config_echo,
            "format_versions": {
                "archive": ARCHIVE_FORMAT_VERSION,
                "model": MODEL_FORMAT_VERSION,
                "bundle": BUNDLE_FORMAT_VERSION,
                "report": REPORT_SCHEMA_VERSION,
            },
            "hashes": hashes,
            "outputs": outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        });
        self.write("manifest.json", &serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

fn hex(h: u64) -> String {
    format!("{h:016x}")
}

fn load_model_with_detectors(ctx: &Ctx) -> Result<(ModelContainer, u64)> {
    let path = ctx.model_path()?;
    let model = load_model(&path)?;
    let hash = fnv1a64(&model_to_bytes(&model));
    Ok((model, hash))
}

fn cmd_gen_synth(ctx: &Ctx) -> Result<()> {
    let synth = match ctx.cfg.get("synthetic_config") {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read {path}"))?;
            SyntheticConfig::from_kv(&text)?
        }
        None => SyntheticConfig::default(),
    };
    let bundle = generate_synthetic_dataset(&synth, ctx.seed)?;
    let bytes = bundle_to_bytes(&bundle);
    let path = ctx.out.join("bundle.bin");
    std::fs::write(&path, &bytes)?;
    println!(
        "wrote {} ({} base / {} val / {} novel images, {} concepts)",
        path.display(),
        bundle.base_split.len(),
        bundle.val_split.len(),
        bundle.novel_split.len(),
        bundle.n_concepts()
    );
    let mut hashes = BTreeMap::new();
    hashes.insert("bundle".into(), hex(fnv1a64(&bytes)));
    ctx.write_manifest("gen-synth", hashes, &[&path])?;
    Ok(())
}

fn cmd_validate_data(ctx: &Ctx) -> Result<()> {
    let bundle = ctx.load_data()?;
    let report = validate_dataset(&bundle);
    let json = serde_json::to_string_pretty(&report)?;
    let path = ctx.write("validation.json", &json)?;
    for warning in &report.warnings {
        eprintln!("warning: {warning}");
    }
    ctx.write_manifest("validate-data", BTreeMap::new(), &[&path])?;
    if !report.passed {
        for failure in &report.failures {
            eprintln!("failure: {failure}");
        }
        bail!("dataset validation failed ({} failures)", report.failures.len());
    }
    println!("validation passed ({} warnings)", report.warnings.len());
    Ok(())
}

fn cmd_train(ctx: &Ctx) -> Result<()> {
    let bundle = ctx.load_data()?;
    let config = ctx.train_config()?;
    let aug = ctx.augmentation()?;
    let (backbone, log) = train_concept_learners(&bundle, &config, &aug)?;
    let model = ModelContainer {
        backbone,
        detectors: None,
    };
    let bytes = model_to_bytes(&model);
    let model_path = ctx.out.join("model.ckpt");
    std::fs::write(&model_path, &bytes)?;
    let log_path = ctx.write("train_log.jsonl", &log.to_jsonl())?;
    println!(
        "trained {} epochs, best epoch {} (val accuracy {:.4}); wrote {}",
        log.epochs.len(),
        log.best_epoch,
        log.epochs[log.best_epoch].val_accuracy,
        model_path.display()
    );
    let mut hashes = BTreeMap::new();
    hashes.insert("model".into(), hex(fnv1a64(&bytes)));
    ctx.write_manifest("train", hashes, &[&model_path, &log_path])?;
    Ok(())
}

fn cmd_train_detectors(ctx: &Ctx) -> Result<()> {
    let bundle = ctx.load_data()?;
    let (model, _) = load_model_with_detectors(ctx)?;
    let config = ctx.detector_config()?;
    let (detectors, log) = train_detectors(&bundle, &model.backbone, &config)?;
    for warning in &log.warnings {
        eprintln!("warning: {warning}");
    }
    let model = ModelContainer {
        backbone: model.backbone,
        detectors: Some(detectors),
    };
    let bytes = model_to_bytes(&model);
    let model_path = ctx.out.join("model.ckpt");
    std::fs::write(&model_path, &bytes)?;
    let log_path = ctx.write("detector_log.json", &serde_json::to_string_pretty(&log)?)?;
    println!("trained {} detectors; wrote {}", bundle.n_concepts(), model_path.display());
    let mut hashes = BTreeMap::new();
    hashes.insert("model".into(), hex(fnv1a64(&bytes)));
    ctx.write_manifest("train-detectors", hashes, &[&model_path, &log_path])?;
    Ok(())
}

fn require_detectors(model: &ModelContainer) -> Result<&conceptshot::DetectorParams> {
    model
        .detectors
        .as_ref()
        .ok_or_else(|| anyhow!("model container has no detector section; run train-detectors"))
}

fn print_report(report: &EvalReport) {
    println!(
        "mode {:<20} episodes {:>5}  mean {:.4}  std {:.4}  ci95 {:.4}",
        report.mode, report.n_episodes, report.mean_accuracy, report.std_dev,
        report.ci95_halfwidth
    );
}

fn cmd_eval(ctx: &Ctx) -> Result<()> {
    let exp = ctx.experiment()?;
    let bundle = exp.data.load()?;
    let (model, model_hash) = load_model_with_detectors(ctx)?;
    let detectors = require_detectors(&model)?;
    let report = run_evaluation(
        bundle.split(&exp.split)?,
        &model.backbone,
        detectors,
        &exp.spec,
        exp.n_episodes,
        exp.mode,
        ctx.seed,
    )?;
    print_report(&report);
    let path = ctx.write("report.json", &report.to_json())?;
    let mut hashes = BTreeMap::new();
    hashes.insert("model".into(), hex(model_hash));
    ctx.write_manifest("eval", hashes, &[&path])?;
    Ok(())
}

fn cmd_ablate_weights(ctx: &Ctx) -> Result<()> {
    let exp = ctx.experiment()?;
    let bundle = exp.data.load()?;
    let (model, model_hash) = load_model_with_detectors(ctx)?;
    let detectors = require_detectors(&model)?;
    let cmp = run_weight_ablation(
        bundle.split(&exp.split)?,
        &model.backbone,
        detectors,
        &exp.spec,
        exp.n_episodes,
        ctx.seed,
    )?;
    if !cmp.is_paired() {
        bail!("ablation arms saw different episodes; pairing contract violated");
    }
    print!("{}", cmp.render_table("probability", "equal"));
    let p_path = ctx.write("ablate_weights_probability.json", &cmp.arm_a.to_json())?;
    let e_path = ctx.write("ablate_weights_equal.json", &cmp.arm_b.to_json())?;
    let mut hashes = BTreeMap::new();
    hashes.insert("model".into(), hex(model_hash));
    ctx.write_manifest("ablate-weights", hashes, &[&p_path, &e_path])?;
    Ok(())
}

fn cmd_ablate_oracle(ctx: &Ctx) -> Result<()> {
    let exp = ctx.experiment()?;
    let bundle = exp.data.load()?;
    let (model, model_hash) = load_model_with_detectors(ctx)?;
    let detectors = require_detectors(&model)?;
    let cmp = run_oracle_comparison(
        bundle.split(&exp.split)?,
        &model.backbone,
        detectors,
        &exp.spec,
        exp.n_episodes,
        ctx.seed,
        exp.detector_noise,
    )?;
    if !cmp.is_paired() {
        bail!("ablation arms saw different episodes; pairing contract violated");
    }
    print!("{}", cmp.render_table("oracle", "detected"));
    let o_path = ctx.write("ablate_oracle_oracle.json", &cmp.arm_a.to_json())?;
    let d_path = ctx.write("ablate_oracle_detected.json", &cmp.arm_b.to_json())?;
    let mut hashes = BTreeMap::new();
    hashes.insert("model".into(), hex(model_hash));
    ctx.write_manifest("ablate-oracle", hashes, &[&o_path, &d_path])?;
    Ok(())
}

fn cmd_explain(ctx: &Ctx) -> Result<()> {
    let exp = ctx.experiment()?;
    let bundle = exp.data.load()?;
    let (model, model_hash) = load_model_with_detectors(ctx)?;
    let mode = exp.mode;
    let episode_index = ctx.cfg.get_u64("episode_index", 0)?;
    let query_index = ctx.cfg.get_usize("query_index", 0)?;

    let mut rng = conceptshot::util::rng_for(ctx.seed, "episode", episode_index);
    let episode = sample_episode(bundle.split(&exp.split)?, &exp.spec, &mut rng)?;
    if query_index >= episode.query.len() {
        bail!(
            "query_index {} out of range ({} queries)",
            query_index,
            episode.query.len()
        );
    }
    let bank = build_prototype_bank_novel(&model.backbone, &episode.support)?;
    let (truth, query) = &episode.query[query_index];
    // oracle mode never consults the detectors, so a detector-less model is fine there
    let fallback = empty_detectors();
    let detectors = match mode {
        WeightingMode::Oracle => model.detectors.as_ref().unwrap_or(&fallback),
        _ => require_detectors(&model)?,
    };
    let result = classify(&model.backbone, detectors, &bank, query, mode)?;
    let class_names: Vec<String> = episode
        .class_map
        .iter()
        .map(|l| bundle.class_names.get(l).cloned().unwrap_or_else(|| l.to_string()))
        .collect();
    let doc = explain(
        &result,
        &bundle.concept_specs,
        &episode.class_map,
        &class_names,
        Some(episode_index),
        Some(query.id),
    )?;
    print!("{}", doc.render_table());
    println!(
        "true class: {} (label {})",
        truth, episode.class_map[*truth]
    );
    let path = ctx.write("explanation.json", &doc.to_json())?;
    let mut hashes = BTreeMap::new();
    hashes.insert("model".into(), hex(model_hash));
    ctx.write_manifest("explain", hashes, &[&path])?;
    Ok(())
}

/// Placeholder detector set for oracle-mode explain on a detector-less model.
fn empty_detectors() -> conceptshot::DetectorParams {
    conceptshot::DetectorParams {
        detectors: Vec::new(),
        positive_class_weight: 0.0,
        config: DetectorTrainConfig::default(),
    }
}

fn main() {
    let cli = Cli::parse();
    let result = (|| -> Result<()> {
        let ctx = Ctx::new(&cli)?;
        match cli.command {
            Command::GenSynth => cmd_gen_synth(&ctx),
            Command::ValidateData => cmd_validate_data(&ctx),
            Command::Train => cmd_train(&ctx),
            Command::TrainDetectors => cmd_train_detectors(&ctx),
            Command::Eval => cmd_eval(&ctx),
            Command::AblateWeights => cmd_ablate_weights(&ctx),
            Command::AblateOracle => cmd_ablate_oracle(&ctx),
            Command::Explain => cmd_explain(&ctx),
        }
    })();
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
