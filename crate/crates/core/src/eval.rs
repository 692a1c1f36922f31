//! The experiment driver: N-episode evaluation, the paired weighting
//! ablation, and the oracle-annotation comparison.

use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::aggregate::{build_prototype_bank_novel, classify, WeightingMode};
use crate::backbone::BackboneParams;
use crate::container::load_bundle;
use crate::data::{load_cub_dataset, AnnotatedImage, DatasetBundle, SplitConfig};
use crate::detector::{perturb_detectors, DetectorParams};
use crate::episode::{episode_stream, Episode, EpisodeSpec};
use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Accuracy over a seeded episode stream, with enough detail to recompute
/// the statistics and to verify pairing across ablation arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub mode: String,
    pub episode_spec: EpisodeSpec,
    pub n_episodes: usize,
    pub seed: u64,
    pub mean_accuracy: f64,
    /// Sample standard deviation of the per-episode accuracies.
    pub std_dev: f64,
    /// `1.96 * std_dev / sqrt(n_episodes)`
    pub ci95_halfwidth: f64,
    pub per_episode_accuracies: Vec<f64>,
    /// FNV digest of each episode's support/query image ids.
    pub episode_digests: Vec<u64>,
}

/// Mean, sample std, and 95% CI halfwidth of a list of accuracies.
pub fn accuracy_stats(accuracies: &[f64]) -> (f64, f64, f64) {
    let n = accuracies.len();
    if n == 0 {
        return (0.0, 0.0, 0.0);
    }
    let mean = accuracies.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        let ss: f64 = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    };
    let ci = 1.96 * std / (n as f64).sqrt();
    (mean, std, ci)
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad report: {e}")))
    }
}

/// Evaluate a classifier over `n_episodes` seeded episodes. The closure maps
/// an episode to the predicted local class of each query; stubbed closures
/// let tests exercise the harness without a model.
pub fn evaluate_stream<F>(
    split: &[AnnotatedImage],
    spec: &EpisodeSpec,
    seed: u64,
    n_episodes: usize,
    mode_name: &str,
    mut classify_episode: F,
) -> Result<EvalReport>
where
    F: FnMut(&Episode) -> Result<Vec<usize>>,
{
    let mut per_episode = Vec::with_capacity(n_episodes);
    let mut digests = Vec::with_capacity(n_episodes);
    for episode in episode_stream(split, spec, seed, n_episodes as u64) {
        let episode = episode?;
        let predictions = classify_episode(&episode)?;
        if predictions.len() != episode.query.len() {
            return Err(Error::Shape(format!(
                "{} predictions for {} queries",
                predictions.len(),
                episode.query.len()
            )));
        }
        let correct = predictions
            .iter()
            .zip(&episode.query)
            .filter(|(&pred, (truth, _))| pred == *truth)
            .count();
        per_episode.push(correct as f64 / episode.query.len() as f64);
        digests.push(episode.image_id_digest());
    }
    let (mean, std, ci) = accuracy_stats(&per_episode);
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        mode: mode_name.to_string(),
        episode_spec: *spec,
        n_episodes,
        seed,
        mean_accuracy: mean,
        std_dev: std,
        ci95_halfwidth: ci,
        per_episode_accuracies: per_episode,
        episode_digests: digests,
    })
}

/// The full pipeline on one episode: bank from the annotated support set,
/// then one classification per query.
pub fn classify_episode_with_model(
    backbone: &BackboneParams,
    detectors: &DetectorParams,
    episode: &Episode,
    mode: WeightingMode,
) -> Result<Vec<usize>> {
    let bank = build_prototype_bank_novel(backbone, &episode.support)?;
    episode
        .query
        .iter()
        .map(|(_, im)| classify(backbone, detectors, &bank, im, mode).map(|r| r.predicted_class))
        .collect()
}

/// Evaluate a trained model over seeded episodes from `split`.
pub fn run_evaluation(
    split: &[AnnotatedImage],
    backbone: &BackboneParams,
    detectors: &DetectorParams,
    spec: &EpisodeSpec,
    n_episodes: usize,
    mode: WeightingMode,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_stream(split, spec, seed, n_episodes, mode.name(), |episode| {
        classify_episode_with_model(backbone, detectors, episode, mode)
    })
}

/// Paired reports from two arms that must share the episode stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedComparison {
    pub arm_a: EvalReport,
    pub arm_b: EvalReport,
}

impl PairedComparison {
    /// Pairing contract: both arms saw identical episodes.
    pub fn is_paired(&self) -> bool {
        self.arm_a.episode_digests == self.arm_b.episode_digests
    }

    pub fn mean_delta(&self) -> f64 {
        self.arm_a.mean_accuracy - self.arm_b.mean_accuracy
    }

    /// Two-column table of the comparison.
    pub fn render_table(&self, label_a: &str, label_b: &str) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>10} {:>10} {:>10}\n",
            "arm", "mean", "std", "ci95"
        ));
        for (label, r) in [(label_a, &self.arm_a), (label_b, &self.arm_b)] {
            out.push_str(&format!(
                "{:<24} {:>10.4} {:>10.4} {:>10.4}\n",
                label, r.mean_accuracy, r.std_dev, r.ci95_halfwidth
            ));
        }
        out.push_str(&format!(
            "{:<24} {:>10.4}\n",
            "delta (a - b)",
            self.mean_delta()
        ));
        out
    }
}

/// Probability-weighted vs equal-weighted aggregation on identical episodes.
/// Returns (probability, equal) as arms a and b.
pub fn run_weight_ablation(
    split: &[AnnotatedImage],
    backbone: &BackboneParams,
    detectors: &DetectorParams,
    spec: &EpisodeSpec,
    n_episodes: usize,
    seed: u64,
) -> Result<PairedComparison> {
    let probability = run_evaluation(
        split,
        backbone,
        detectors,
        spec,
        n_episodes,
        WeightingMode::Probability,
        seed,
    )?;
    let equal = run_evaluation(
        split,
        backbone,
        detectors,
        spec,
        n_episodes,
        WeightingMode::Equal,
        seed,
    )?;
    let cmp = PairedComparison {
        arm_a: probability,
        arm_b: equal,
    };
    debug_assert!(cmp.is_paired());
    Ok(cmp)
}

/// Oracle-annotation evaluation vs detected evaluation on identical episodes,
/// optionally degrading the detectors with parameter noise first.
/// Returns (oracle, detected) as arms a and b.
pub fn run_oracle_comparison(
    split: &[AnnotatedImage],
    backbone: &BackboneParams,
    detectors: &DetectorParams,
    spec: &EpisodeSpec,
    n_episodes: usize,
    seed: u64,
    detector_noise: f64,
) -> Result<PairedComparison> {
    let noisy;
    let detected_arm = if detector_noise > 0.0 {
        noisy = perturb_detectors(detectors, detector_noise, seed);
        &noisy
    } else {
        detectors
    };
    let oracle = run_evaluation(
        split,
        backbone,
        detectors,
        spec,
        n_episodes,
        WeightingMode::Oracle,
        seed,
    )?;
    let detected = run_evaluation(
        split,
        backbone,
        detected_arm,
        spec,
        n_episodes,
        WeightingMode::Probability,
        seed,
    )?;
    let cmp = PairedComparison {
        arm_a: oracle,
        arm_b: detected,
    };
    debug_assert!(cmp.is_paired());
    Ok(cmp)
}

/// Where an experiment's data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// A saved bundle container.
    Bundle(PathBuf),
    /// Generate a synthetic bundle from a config file and seed.
    SyntheticConfig { path: PathBuf, seed: u64 },
    /// A CUB-200-2011 tree with an optional split file (100/50/50 default).
    Cub {
        root: PathBuf,
        split_file: Option<PathBuf>,
        input_size: usize,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<DatasetBundle> {
        match self {
            DataSource::Bundle(path) => load_bundle(path),
            DataSource::SyntheticConfig { path, seed } => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    Error::Config(format!("cannot read {}: {e}", path.display()))
                })?;
                let cfg = crate::data::SyntheticConfig::from_kv(&text)?;
                crate::data::generate_synthetic_dataset(&cfg, *seed)
            }
            DataSource::Cub {
                root,
                split_file,
                input_size,
            } => {
                let split = match split_file {
                    Some(path) => {
                        let text = std::fs::read_to_string(path).map_err(|e| {
                            Error::Config(format!("cannot read {}: {e}", path.display()))
                        })?;
                        SplitConfig::from_text(&text)?
                    }
                    None => {
                        // discover class names from the images directory
                        let mut names = Vec::new();
                        let dir = root.join("images");
                        for entry in std::fs::read_dir(&dir).map_err(|e| {
                            Error::Ingest(format!("cannot list {}: {e}", dir.display()))
                        })? {
                            let entry = entry.map_err(|e| Error::Ingest(e.to_string()))?;
                            if entry.path().is_dir() {
                                names.push(entry.file_name().to_string_lossy().into_owned());
                            }
                        }
                        SplitConfig::default_split(names)
                    }
                };
                load_cub_dataset(root, &split, *input_size)
            }
        }
    }
}

/// A full experiment as described by a config file: data, model, episode
/// shape, episode count, weighting mode, and seed.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub model_path: Option<PathBuf>,
    pub split: String,
    pub spec: EpisodeSpec,
    pub n_episodes: usize,
    pub mode: WeightingMode,
    pub seed: u64,
    pub detector_noise: f64,
}

impl ExperimentConfig {
    /// Assemble from key-value config text keys (see the README).
    pub fn from_kv(cfg: &crate::config::KvConfig, seed: u64) -> Result<Self> {
        let data = if let Some(path) = cfg.get("bundle") {
            DataSource::Bundle(path.into())
        } else if let Some(path) = cfg.get("synthetic_config") {
            DataSource::SyntheticConfig {
                path: path.into(),
                seed: cfg.get_u64("synth_seed", seed)?,
            }
        } else if let Some(root) = cfg.get("cub_root") {
            DataSource::Cub {
                root: root.into(),
                split_file: cfg.get("split_file").map(Into::into),
                input_size: cfg.get_usize("input_size", 84)?,
            }
        } else {
            return Err(Error::Config(
                "config needs a data source: one of `bundle`, `synthetic_config`, `cub_root`".into(),
            ));
        };
        Ok(ExperimentConfig {
            data,
            model_path: cfg.get("model").map(PathBuf::from),
            split: cfg.get("split").unwrap_or("novel").to_string(),
            spec: EpisodeSpec::new(
                cfg.get_usize("n_way", 5)?,
                cfg.get_usize("k_shot", 5)?,
                cfg.get_usize("n_query", 16)?,
            )?,
            n_episodes: cfg.get_usize("n_episodes", 600)?,
            mode: WeightingMode::from_name(cfg.get("mode").unwrap_or("probability"))?,
            seed,
            detector_noise: cfg.get_f64("detector_noise", 0.0)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_episodes < 1 {
            return Err(Error::Config("n_episodes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Load the experiment's data and model from disk and evaluate.
pub fn run_experiment(config: &ExperimentConfig) -> Result<EvalReport> {
    config.validate()?;
    let bundle = config.data.load()?;
    let model_path = config
        .model_path
        .as_ref()
        .ok_or_else(|| Error::Config("experiment needs a `model` path".into()))?;
    let model = crate::container::load_model(model_path)?;
    let detectors = match (&model.detectors, config.mode) {
        (Some(d), _) => d.clone(),
        (None, WeightingMode::Oracle) => DetectorParams {
            detectors: Vec::new(),
            positive_class_weight: 0.0,
            config: Default::default(),
        },
        (None, _) => {
            return Err(Error::Config(
                "model container has no detector section; run train-detectors".into(),
            ))
        }
    };
    let detectors = if config.detector_noise > 0.0 {
        perturb_detectors(&detectors, config.detector_noise, config.seed)
    } else {
        detectors
    };
    run_evaluation(
        bundle.split(&config.split)?,
        &model.backbone,
        &detectors,
        &config.spec,
        config.n_episodes,
        config.mode,
        config.seed,
    )
}
