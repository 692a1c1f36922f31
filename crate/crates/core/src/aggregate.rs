//! Few-shot classification of unannotated queries: presence-weighted
//! aggregation of per-concept nearest-prototype distances, with equal-weight
//! and oracle modes for ablations, plus the per-decision explanation record.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneParams, ConceptEmbedding, EmbeddingSource, FeatureMap};
use crate::data::{AnnotatedImage, ConceptSpec};
use crate::detector::{detect_concept, DetectorParams};
use crate::error::{Error, Result};
use crate::metric::DistanceKind;
use crate::train::{compute_prototypes, softmax_neg_distances, PrototypeBank};

/// Division floor for inverse-probability weights.
pub const INVERSE_WEIGHT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightingMode {
    /// w = detector probability (default; concepts present in the query count
    /// more).
    Probability,
    /// w = 1 / max(p, eps); kept for fidelity to the alternative reading.
    InverseProbability,
    /// w = 1 for every concept.
    Equal,
    /// Ground-truth query annotations select the cells; w = 1.
    Oracle,
}

impl WeightingMode {
    pub fn name(&self) -> &'static str {
        match self {
            WeightingMode::Probability => "probability",
            WeightingMode::InverseProbability => "inverse_probability",
            WeightingMode::Equal => "equal",
            WeightingMode::Oracle => "oracle",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "probability" => Ok(WeightingMode::Probability),
            "inverse_probability" => Ok(WeightingMode::InverseProbability),
            "equal" => Ok(WeightingMode::Equal),
            "oracle" => Ok(WeightingMode::Oracle),
            other => Err(Error::Config(format!("unknown weighting mode '{other}'"))),
        }
    }
}

/// Weighted mean of per-concept distances to one class's prototypes:
/// `D(y) = sum_j w_j * d(e_j, proto_y_j) / sum_j w_j`. An all-zero weight vector
/// falls back to equal weights.
pub fn aggregate_distance(
    embeddings: &[ConceptEmbedding],
    weights: &[f64],
    bank: &PrototypeBank,
    class: usize,
    distance: DistanceKind,
) -> Result<f64> {
    let n = bank.n_concepts();
    if embeddings.len() != n || weights.len() != n {
        return Err(Error::Shape(format!(
            "expected {n} concepts, got {} embeddings and {} weights",
            embeddings.len(),
            weights.len()
        )));
    }
    if class >= bank.n_classes() {
        return Err(Error::Bounds(format!("class {class} out of range")));
    }
    for (j, e) in embeddings.iter().enumerate() {
        if e.concept_id != j {
            return Err(Error::Shape(format!(
                "embedding at position {j} is for concept {}",
                e.concept_id
            )));
        }
    }
    if weights.iter().any(|&w| w < 0.0) {
        return Err(Error::Config("weights must be nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    let uniform = 1.0 / n as f64;
    let mut acc = 0.0;
    for j in 0..n {
        let w = if total == 0.0 { uniform } else { weights[j] / total };
        acc += w * distance.eval(embeddings[j].vector.view(), bank.get(class, j).view());
    }
    Ok(acc)
}

/// One concept's part in a decision: its weight, where it was found, and its
/// distance to each class's prototype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptReport {
    pub concept_id: usize,
    pub cell: Option<(usize, usize)>,
    pub source: EmbeddingSource,
    /// Raw mode weight before normalization.
    pub weight: f64,
    /// Distance to each episode class's prototype.
    pub distances: Vec<f64>,
}

/// The decision plus its interpretability record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub mode: WeightingMode,
    pub predicted_class: usize,
    /// softmax of the negated aggregated distances, over episode classes
    pub class_scores: Vec<f64>,
    /// The per-class aggregated distances themselves.
    pub class_distances: Vec<f64>,
    pub per_concept: Vec<ConceptReport>,
}

fn argmax_lowest_tie(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Classify one query image against a prototype bank.
///
/// Non-oracle modes ignore query annotations entirely: every concept is
/// located by its detector. Oracle mode picks at the ground-truth cells
/// (GAP for invisible concepts) with unit weights.
pub fn classify(
    params: &BackboneParams,
    detectors: &DetectorParams,
    bank: &PrototypeBank,
    query: &AnnotatedImage,
    mode: WeightingMode,
) -> Result<ClassificationResult> {
    let n_concepts = params.n_concepts();
    if bank.n_concepts() != n_concepts {
        return Err(Error::Shape(format!(
            "bank has {} concepts, backbone has {n_concepts}",
            bank.n_concepts()
        )));
    }
    if mode == WeightingMode::Oracle && query.annotations.is_empty() {
        return Err(Error::Config(
            "oracle mode requires query annotations".into(),
        ));
    }

    let batch = params.normalize_batch(&[query])?;
    let trunk_out = params.trunk_forward_eval(&batch);
    let mut embeddings = Vec::with_capacity(n_concepts);
    let mut weights = Vec::with_capacity(n_concepts);
    let mut cells: Vec<Option<(usize, usize)>> = Vec::with_capacity(n_concepts);
    for j in 0..n_concepts {
        let head_out = params.head_forward_eval(&trunk_out, j)?;
        let fmap = FeatureMap::from_nchw(&head_out, 0, j);
        match mode {
            WeightingMode::Oracle => {
                let emb = params.extract_annotated(&fmap, query.annotation_for(j))?;
                cells.push(match emb.source {
                    EmbeddingSource::Picked => {
                        let ann = query.annotation_for(j).expect("picked implies annotated");
                        Some(crate::backbone::map_image_coords_to_cell(
                            ann.x,
                            ann.y,
                            params.config.input_size,
                            fmap.height(),
                        )?)
                    }
                    _ => None,
                });
                embeddings.push(emb);
                weights.push(1.0);
            }
            _ => {
                let det = detect_concept(&fmap, detectors)?;
                let w = match mode {
                    WeightingMode::Probability => det.probability,
                    WeightingMode::InverseProbability => {
                        1.0 / det.probability.max(INVERSE_WEIGHT_EPS)
                    }
                    WeightingMode::Equal => 1.0,
                    WeightingMode::Oracle => unreachable!(),
                };
                cells.push(Some(det.cell));
                embeddings.push(det.embedding);
                weights.push(w);
            }
        }
    }

    let n_classes = bank.n_classes();
    let mut class_distances = Vec::with_capacity(n_classes);
    for y in 0..n_classes {
        class_distances.push(aggregate_distance(
            &embeddings,
            &weights,
            bank,
            y,
            params.distance,
        )?);
    }
    let class_scores = softmax_neg_distances(&class_distances);
    let predicted_class = argmax_lowest_tie(&class_scores);

    let per_concept = (0..n_concepts)
        .map(|j| ConceptReport {
            concept_id: j,
            cell: cells[j],
            source: embeddings[j].source,
            weight: weights[j],
            distances: (0..n_classes)
                .map(|y| {
                    params
                        .distance
                        .eval(embeddings[j].vector.view(), bank.get(y, j).view())
                })
                .collect(),
        })
        .collect();

    Ok(ClassificationResult {
        mode,
        predicted_class,
        class_scores,
        class_distances,
        per_concept,
    })
}

/// Prototypes for a novel-class support set: annotated extraction (GAP for
/// invisible concepts) then the usual per-class mean. Groups must be
/// label-consistent and non-empty.
pub fn build_prototype_bank_novel(
    params: &BackboneParams,
    support: &[Vec<AnnotatedImage>],
) -> Result<PrototypeBank> {
    if support.is_empty() {
        return Err(Error::Shape("empty support set".into()));
    }
    let n_concepts = params.n_concepts();
    let mut class_map = Vec::with_capacity(support.len());
    let mut grouped: Vec<Vec<Vec<ConceptEmbedding>>> = Vec::with_capacity(support.len());
    for group in support {
        let first = group
            .first()
            .ok_or_else(|| Error::Shape("support class with no images".into()))?;
        if group.iter().any(|im| im.class_label != first.class_label) {
            return Err(Error::Shape(format!(
                "support group mixes labels (saw {} and others)",
                first.class_label
            )));
        }
        class_map.push(first.class_label);
        let refs: Vec<&AnnotatedImage> = group.iter().collect();
        let embs = params.embed_batch_annotated(&refs)?;
        let mut per_concept = vec![Vec::with_capacity(group.len()); n_concepts];
        for image_embs in embs {
            for (j, e) in image_embs.into_iter().enumerate() {
                per_concept[j].push(e);
            }
        }
        grouped.push(per_concept);
    }
    compute_prototypes(&grouped, class_map)
}

/// One concept's line in an explanation document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptExplanation {
    pub concept_id: usize,
    pub name: String,
    pub source: String,
    pub cell: Option<(usize, usize)>,
    pub detector_probability: Option<f64>,
    pub weight: f64,
    /// Effective weight after normalization (and the equal-weight fallback).
    pub normalized_weight: f64,
    /// Global label of the class nearest by this concept alone.
    pub nearest_class_alone: u32,
    pub distances: Vec<f64>,
    /// `normalized_weight * distance` per class; summing over concepts
    /// reconstructs each class's aggregated distance.
    pub contributions: Vec<f64>,
}

/// Machine-readable explanation of one classification, with an aligned
/// plain-text rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationDoc {
    pub schema_version: u32,
    pub episode_id: Option<u64>,
    pub query_id: Option<u64>,
    pub mode: String,
    /// Episode-local class labels, mapped to global labels.
    pub classes: Vec<u32>,
    pub class_names: Vec<String>,
    pub predicted_class: usize,
    pub predicted_label: u32,
    pub class_scores: Vec<f64>,
    pub class_distances: Vec<f64>,
    pub concepts: Vec<ConceptExplanation>,
}

pub const EXPLANATION_SCHEMA_VERSION: u32 = 1;

/// Assemble the explanation document for one decision. Contribution totals
/// reconcile with `class_distances` by construction.
pub fn explain(
    result: &ClassificationResult,
    concept_specs: &[ConceptSpec],
    class_map: &[u32],
    class_names: &[String],
    episode_id: Option<u64>,
    query_id: Option<u64>,
) -> Result<ExplanationDoc> {
    let n = result.per_concept.len();
    if concept_specs.len() != n {
        return Err(Error::Shape(format!(
            "{} concept specs for {n} concept reports",
            concept_specs.len()
        )));
    }
    if class_map.len() != result.class_scores.len() {
        return Err(Error::Shape("class map size mismatch".into()));
    }
    let total: f64 = result.per_concept.iter().map(|c| c.weight).sum();
    let uniform = 1.0 / n as f64;
    let concepts = result
        .per_concept
        .iter()
        .map(|c| {
            let normalized = if total == 0.0 {
                uniform
            } else {
                c.weight / total
            };
            let nearest = {
                let mut best = 0;
                for (y, &d) in c.distances.iter().enumerate().skip(1) {
                    if d < c.distances[best] {
                        best = y;
                    }
                }
                class_map[best]
            };
            ConceptExplanation {
                concept_id: c.concept_id,
                name: concept_specs[c.concept_id].name.clone(),
                source: match c.source {
                    EmbeddingSource::Picked => "picked".into(),
                    EmbeddingSource::Gap => "gap".into(),
                    EmbeddingSource::Detected { .. } => "detected".into(),
                },
                cell: c.cell,
                detector_probability: match c.source {
                    EmbeddingSource::Detected { probability } => Some(probability),
                    _ => None,
                },
                weight: c.weight,
                normalized_weight: normalized,
                nearest_class_alone: nearest,
                distances: c.distances.clone(),
                contributions: c.distances.iter().map(|d| normalized * d).collect(),
            }
        })
        .collect();

    Ok(ExplanationDoc {
        schema_version: EXPLANATION_SCHEMA_VERSION,
        episode_id,
        query_id,
        mode: result.mode.name().to_string(),
        classes: class_map.to_vec(),
        class_names: class_names.to_vec(),
        predicted_class: result.predicted_class,
        predicted_label: class_map[result.predicted_class],
        class_scores: result.class_scores.clone(),
        class_distances: result.class_distances.clone(),
        concepts,
    })
}

impl ExplanationDoc {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("explanation serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("bad explanation document: {e}")))
    }

    /// Aligned plain-text table of the per-concept record.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "mode: {}    predicted: {} (label {})\n",
            self.mode, self.predicted_class, self.predicted_label
        ));
        out.push_str(&format!(
            "{:<12} {:<9} {:<8} {:>8} {:>8}",
            "concept", "source", "cell", "weight", "w_norm"
        ));
        for name in &self.class_names {
            out.push_str(&format!(" {:>12.12}", name));
        }
        out.push('\n');
        for c in &self.concepts {
            let cell = c
                .cell
                .map(|(r, q)| format!("({r},{q})"))
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{:<12.12} {:<9} {:<8} {:>8.4} {:>8.4}",
                c.name, c.source, cell, c.weight, c.normalized_weight
            ));
            for d in &c.distances {
                out.push_str(&format!(" {:>12.4}", d));
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "{:<48}",
            "aggregated distance"
        ));
        for d in &self.class_distances {
            out.push_str(&format!(" {:>12.4}", d));
        }
        out.push('\n');
        out.push_str(&format!("{:<48}", "class score"));
        for s in &self.class_scores {
            out.push_str(&format!(" {:>12.4}", s));
        }
        out.push('\n');
        out
    }
}
