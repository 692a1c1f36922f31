//! Interpretable concept-based few-shot classification.
//!
//! Concept-specific metric spaces are learned episodically over a shared
//! convolutional trunk with per-concept heads. At test time, per-concept
//! binary detectors locate each concept in the final feature map and emit a
//! presence probability; queries are classified by presence-weighted
//! aggregation of per-concept nearest-prototype distances, and every decision
//! carries a per-concept explanation record.

pub mod aggregate;
pub mod backbone;
pub mod config;
pub mod container;
pub mod data;
pub mod detector;
pub mod episode;
pub mod error;
pub mod eval;
pub mod metric;
pub mod nn;
pub mod train;
pub mod util;

pub use aggregate::{
    aggregate_distance, build_prototype_bank_novel, classify, explain, ClassificationResult,
    ExplanationDoc, WeightingMode,
};
pub use backbone::{
    gap_embedding, map_image_coords_to_cell, pick_concept_embedding, BackboneConfig,
    BackboneParams, ConceptEmbedding, EmbeddingSource, FeatureMap,
};
pub use container::{
    load_bundle, load_model, save_bundle, save_model, ModelContainer, BUNDLE_FORMAT_VERSION,
    MODEL_FORMAT_VERSION,
};
pub use data::{
    generate_synthetic_dataset, load_cub_dataset, validate_dataset, AnnotatedImage,
    ConceptAnnotation, ConceptSpec, DatasetBundle, PixelNormalization, SplitConfig,
    SyntheticConfig, ValidationReport,
};
pub use detector::{
    build_detector_examples, detect_concept, perturb_detectors, train_detectors, DetectionResult,
    DetectorParams, DetectorTrainConfig,
};
pub use episode::{episode_stream, sample_episode, Episode, EpisodeSpec};
pub use error::{Error, Result};
pub use eval::{
    run_evaluation, run_oracle_comparison, run_weight_ablation, DataSource, EvalReport,
    ExperimentConfig, PairedComparison,
};
pub use metric::DistanceKind;
pub use train::{
    augment, classify_query_training, compute_prototypes, episode_loss, episode_loss_with_grads,
    train_concept_learners, AugmentationConfig, PrototypeBank, TrainConfig, TrainLog,
};
