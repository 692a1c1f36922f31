//! Python bindings: dataset bundles, model training, evaluation, and
//! per-query explanations. Reports and explanation documents cross the
//! boundary as JSON strings.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use conceptshot::config::KvConfig;
use conceptshot::container::{
    bundle_from_bytes, bundle_to_bytes, load_bundle, load_model, save_bundle, save_model,
    ModelContainer,
};
use conceptshot::eval::{run_evaluation, run_oracle_comparison, run_weight_ablation};
use conceptshot::util::rng_for;
use conceptshot::{
    build_prototype_bank_novel, classify, explain, generate_synthetic_dataset, sample_episode,
    train_concept_learners, train_detectors, validate_dataset, AugmentationConfig, DatasetBundle,
    DetectorTrainConfig, EpisodeSpec, SyntheticConfig, TrainConfig, WeightingMode,
};

fn value_err(e: conceptshot::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: conceptshot::Error) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn parse_spec(n_way: usize, k_shot: usize, n_query: usize) -> PyResult<EpisodeSpec> {
    EpisodeSpec::new(n_way, k_shot, n_query).map_err(value_err)
}

/// A dataset bundle: concept specs plus disjoint base/val/novel splits.
#[pyclass(name = "Bundle")]
struct PyBundle {
    inner: DatasetBundle,
}

#[pymethods]
impl PyBundle {
    /// Generate a synthetic bundle from key-value config text.
    #[staticmethod]
    #[pyo3(signature = (config_text = "", seed = 0))]
    fn generate(config_text: &str, seed: u64) -> PyResult<Self> {
        let cfg = SyntheticConfig::from_kv(config_text).map_err(value_err)?;
        let inner = generate_synthetic_dataset(&cfg, seed).map_err(value_err)?;
        Ok(PyBundle { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyBundle {
            inner: load_bundle(path.as_ref()).map_err(runtime_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_bundle(path.as_ref(), &self.inner).map_err(runtime_err)
    }

    /// Validation report as a JSON string.
    fn validate(&self) -> PyResult<String> {
        let report = validate_dataset(&self.inner);
        serde_json::to_string_pretty(&report)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[getter]
    fn n_concepts(&self) -> usize {
        self.inner.n_concepts()
    }

    #[getter]
    fn split_sizes(&self) -> (usize, usize, usize) {
        (
            self.inner.base_split.len(),
            self.inner.val_split.len(),
            self.inner.novel_split.len(),
        )
    }

    /// FNV digest of the serialized bundle, for reproducibility checks.
    fn digest(&self) -> String {
        format!(
            "{:016x}",
            conceptshot::util::fnv1a64(&bundle_to_bytes(&self.inner))
        )
    }

    fn __repr__(&self) -> String {
        format!(
            "Bundle(concepts={}, base={}, val={}, novel={}, input_size={})",
            self.inner.n_concepts(),
            self.inner.base_split.len(),
            self.inner.val_split.len(),
            self.inner.novel_split.len(),
            self.inner.input_size
        )
    }
}

impl PyBundle {
    fn split(&self, name: &str) -> PyResult<&[conceptshot::AnnotatedImage]> {
        self.inner.split(name).map_err(value_err)
    }
}

/// A trained backbone, optionally with its concept detectors.
#[pyclass(name = "Model")]
struct PyModel {
    inner: ModelContainer,
}

#[pymethods]
impl PyModel {
    /// Train the concept learners on the bundle's base split. Returns the
    /// model and the training log (one JSON record per epoch).
    #[staticmethod]
    #[pyo3(signature = (bundle, config_text = "", seed = 0))]
    fn train(bundle: &PyBundle, config_text: &str, seed: u64) -> PyResult<(Self, String)> {
        let kv = KvConfig::parse(config_text).map_err(value_err)?;
        let config = TrainConfig::from_kv(&kv, seed).map_err(value_err)?;
        let aug = AugmentationConfig::from_kv(&kv).map_err(value_err)?;
        let (backbone, log) =
            train_concept_learners(&bundle.inner, &config, &aug).map_err(runtime_err)?;
        Ok((
            PyModel {
                inner: ModelContainer {
                    backbone,
                    detectors: None,
                },
            },
            log.to_jsonl(),
        ))
    }

    /// Train per-concept detectors on the frozen backbone. Returns the
    /// detector training log as JSON.
    #[pyo3(signature = (bundle, config_text = "", seed = 0))]
    fn train_detectors(
        &mut self,
        bundle: &PyBundle,
        config_text: &str,
        seed: u64,
    ) -> PyResult<String> {
        let kv = KvConfig::parse(config_text).map_err(value_err)?;
        let config = DetectorTrainConfig::from_kv(&kv, seed).map_err(value_err)?;
        let (detectors, log) =
            train_detectors(&bundle.inner, &self.inner.backbone, &config).map_err(runtime_err)?;
        self.inner.detectors = Some(detectors);
        serde_json::to_string_pretty(&log).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: load_model(path.as_ref()).map_err(runtime_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_model(path.as_ref(), &self.inner).map_err(runtime_err)
    }

    #[getter]
    fn has_detectors(&self) -> bool {
        self.inner.detectors.is_some()
    }

    /// Evaluate over seeded episodes; returns the report as JSON.
    #[pyo3(signature = (bundle, split = "novel", mode = "probability", n_way = 5, k_shot = 5,
                        n_query = 16, n_episodes = 600, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn evaluate(
        &self,
        bundle: &PyBundle,
        split: &str,
        mode: &str,
        n_way: usize,
        k_shot: usize,
        n_query: usize,
        n_episodes: usize,
        seed: u64,
    ) -> PyResult<String> {
        let detectors = self
            .inner
            .detectors
            .as_ref()
            .ok_or_else(|| PyRuntimeError::new_err("model has no detectors; train them first"))?;
        let report = run_evaluation(
            bundle.split(split)?,
            &self.inner.backbone,
            detectors,
            &parse_spec(n_way, k_shot, n_query)?,
            n_episodes,
            WeightingMode::from_name(mode).map_err(value_err)?,
            seed,
        )
        .map_err(runtime_err)?;
        Ok(report.to_json())
    }

    /// Paired probability-vs-equal ablation; returns both reports as JSON.
    #[pyo3(signature = (bundle, split = "novel", n_way = 5, k_shot = 5, n_query = 16,
                        n_episodes = 100, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn ablate_weights(
        &self,
        bundle: &PyBundle,
        split: &str,
        n_way: usize,
        k_shot: usize,
        n_query: usize,
        n_episodes: usize,
        seed: u64,
    ) -> PyResult<(String, String)> {
        let detectors = self
            .inner
            .detectors
            .as_ref()
            .ok_or_else(|| PyRuntimeError::new_err("model has no detectors; train them first"))?;
        let cmp = run_weight_ablation(
            bundle.split(split)?,
            &self.inner.backbone,
            detectors,
            &parse_spec(n_way, k_shot, n_query)?,
            n_episodes,
            seed,
        )
        .map_err(runtime_err)?;
        Ok((cmp.arm_a.to_json(), cmp.arm_b.to_json()))
    }

    /// Paired oracle-vs-detected comparison; returns both reports as JSON.
    #[pyo3(signature = (bundle, split = "novel", n_way = 5, k_shot = 5, n_query = 16,
                        n_episodes = 100, seed = 0, detector_noise = 0.0))]
    #[allow(clippy::too_many_arguments)]
    fn ablate_oracle(
        &self,
        bundle: &PyBundle,
        split: &str,
        n_way: usize,
        k_shot: usize,
        n_query: usize,
        n_episodes: usize,
        seed: u64,
        detector_noise: f64,
    ) -> PyResult<(String, String)> {
        let detectors = self
            .inner
            .detectors
            .as_ref()
            .ok_or_else(|| PyRuntimeError::new_err("model has no detectors; train them first"))?;
        let cmp = run_oracle_comparison(
            bundle.split(split)?,
            &self.inner.backbone,
            detectors,
            &parse_spec(n_way, k_shot, n_query)?,
            n_episodes,
            seed,
            detector_noise,
        )
        .map_err(runtime_err)?;
        Ok((cmp.arm_a.to_json(), cmp.arm_b.to_json()))
    }

    /// Classify one query of one seeded episode and return the explanation
    /// document as JSON.
    #[pyo3(signature = (bundle, split = "novel", mode = "probability", n_way = 5, k_shot = 5,
                        n_query = 16, seed = 0, episode_index = 0, query_index = 0))]
    #[allow(clippy::too_many_arguments)]
    fn explain_query(
        &self,
        bundle: &PyBundle,
        split: &str,
        mode: &str,
        n_way: usize,
        k_shot: usize,
        n_query: usize,
        seed: u64,
        episode_index: u64,
        query_index: usize,
    ) -> PyResult<String> {
        let detectors = self
            .inner
            .detectors
            .as_ref()
            .ok_or_else(|| PyRuntimeError::new_err("model has no detectors; train them first"))?;
        let mode = WeightingMode::from_name(mode).map_err(value_err)?;
        let spec = parse_spec(n_way, k_shot, n_query)?;
        let mut rng = rng_for(seed, "episode", episode_index);
        let episode = sample_episode(bundle.split(split)?, &spec, &mut rng).map_err(value_err)?;
        let (_, query) = episode
            .query
            .get(query_index)
            .ok_or_else(|| PyValueError::new_err("query_index out of range"))?;
        let bank =
            build_prototype_bank_novel(&self.inner.backbone, &episode.support).map_err(runtime_err)?;
        let result =
            classify(&self.inner.backbone, detectors, &bank, query, mode).map_err(runtime_err)?;
        let class_names: Vec<String> = episode
            .class_map
            .iter()
            .map(|l| {
                bundle
                    .inner
                    .class_names
                    .get(l)
                    .cloned()
                    .unwrap_or_else(|| l.to_string())
            })
            .collect();
        let doc = explain(
            &result,
            &bundle.inner.concept_specs,
            &episode.class_map,
            &class_names,
            Some(episode_index),
            Some(query.id),
        )
        .map_err(runtime_err)?;
        Ok(doc.to_json())
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.backbone.config;
        format!(
            "Model(input={}, channels={}, concepts={}, detectors={})",
            c.input_size,
            c.channels,
            c.n_concepts,
            self.inner.detectors.is_some()
        )
    }
}

/// Bundle a dataset round-trip check into one call (used by the smoke test).
#[pyfunction]
fn roundtrip_bundle_bytes(bundle: &PyBundle) -> PyResult<bool> {
    let bytes = bundle_to_bytes(&bundle.inner);
    let back = bundle_from_bytes(&bytes).map_err(runtime_err)?;
    Ok(back == bundle.inner)
}

#[pymodule]
fn conceptshot_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBundle>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(roundtrip_bundle_bytes, m)?)?;
    Ok(())
}
