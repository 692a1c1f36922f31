//! Per-concept binary classifiers that locate a concept's feature vector in
//! the final feature map at test time and emit a presence probability.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    map_image_coords_to_cell, BackboneParams, ConceptEmbedding, EmbeddingSource, FeatureMap,
};
use crate::data::{ConceptAnnotation, DatasetBundle};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Adam, Linear, Parameterized};
use crate::util::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        DetectorTrainConfig {
            epochs: 20,
            batch_size: 256,
            learning_rate: 1e-3,
            hidden_dim: 64,
            seed: 0,
        }
    }
}

impl DetectorTrainConfig {
    pub fn from_kv(cfg: &crate::config::KvConfig, seed: u64) -> Result<Self> {
        Ok(DetectorTrainConfig {
            epochs: cfg.get_usize("detector_epochs", 20)?,
            batch_size: cfg.get_usize("detector_batch_size", 256)?,
            learning_rate: cfg.get_f64("detector_lr", 1e-3)?,
            hidden_dim: cfg.get_usize("detector_hidden", 64)?,
            seed,
        })
    }
}

/// Two-layer perceptron scoring one feature vector: input c, rectified
/// hidden layer, sigmoid output. Inputs are standardized with statistics
/// frozen from the detector's training examples, so feature-map magnitude
/// does not saturate the sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptDetector {
    pub lin1: Linear,
    pub lin2: Linear,
    pub input_mean: Array1<f64>,
    pub input_std: Array1<f64>,
    /// True when the concept had no visible annotations and the detector is
    /// the identically-0.5 fallback.
    pub stub: bool,
}

impl ConceptDetector {
    fn new(input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> Self {
        ConceptDetector {
            lin1: Linear::new(input_dim, hidden_dim, rng),
            lin2: Linear::new(hidden_dim, 1, rng),
            input_mean: Array1::zeros(input_dim),
            input_std: Array1::ones(input_dim),
            stub: false,
        }
    }

    /// Zero weights: sigmoid(0) = 0.5 everywhere.
    fn stub(input_dim: usize, hidden_dim: usize) -> Self {
        ConceptDetector {
            lin1: Linear::zeroed(input_dim, hidden_dim),
            lin2: Linear::zeroed(hidden_dim, 1),
            input_mean: Array1::zeros(input_dim),
            input_std: Array1::ones(input_dim),
            stub: true,
        }
    }

    fn standardize(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - self.input_mean[i]) / self.input_std[i];
            }
        }
        out
    }

    fn logits(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let h = self.lin1.forward(x);
        let a = h.mapv(|v| if v > 0.0 { v } else { 0.0 });
        let z = self.lin2.forward(&a);
        (z, a)
    }

    /// Presence probability for one feature vector.
    pub fn score(&self, v: ArrayView1<f64>) -> f64 {
        let x = v.to_owned().insert_axis(ndarray::Axis(0));
        let x = self.standardize(&x);
        let (z, _) = self.logits(&x);
        sigmoid(z[[0, 0]])
    }
}

impl Parameterized for ConceptDetector {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.lin1.visit_params(f);
        self.lin2.visit_params(f);
    }
}

/// The trained per-concept classifiers plus their training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub detectors: Vec<ConceptDetector>,
    pub positive_class_weight: f64,
    pub config: DetectorTrainConfig,
}

impl DetectorParams {
    pub fn n_concepts(&self) -> usize {
        self.detectors.len()
    }
}

/// The selected cell, its probability, and the embedding found there.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub cell: (usize, usize),
    pub probability: f64,
    pub embedding: ConceptEmbedding,
}

/// The positive vector and the negatives from one feature map.
pub type ExamplePair = (Array1<f64>, Vec<Array1<f64>>);

/// Positive/negative training vectors from one annotated feature map: the
/// mapped center cell is the positive, every other cell a negative. Returns
/// `None` (skip) for invisible annotations.
pub fn build_detector_examples(
    fmap: &FeatureMap,
    annotation: &ConceptAnnotation,
    image_size: usize,
) -> Result<Option<ExamplePair>> {
    if !annotation.visible {
        return Ok(None);
    }
    let (row, col) =
        map_image_coords_to_cell(annotation.x, annotation.y, image_size, fmap.height())?;
    let positive = fmap.cell_vector(row, col);
    let mut negatives = Vec::with_capacity(fmap.height() * fmap.width() - 1);
    for r in 0..fmap.height() {
        for c in 0..fmap.width() {
            if (r, c) != (row, col) {
                negatives.push(fmap.cell_vector(r, c));
            }
        }
    }
    Ok(Some((positive, negatives)))
}

/// One training vector with its provenance; provenance gives examples a
/// canonical order so gathering order cannot affect the trained function.
#[derive(Debug, Clone)]
pub struct DetectorExample {
    pub vector: Array1<f64>,
    pub positive: bool,
    pub image_id: u64,
    pub cell: (usize, usize),
}

/// Class-weighted binary cross-entropy on logits; the positive term carries
/// `pos_weight`. Returns the mean loss and writes dL/dlogit into `grad`.
fn weighted_bce(
    logits: &Array2<f64>,
    labels: &[f64],
    pos_weight: f64,
    grad: &mut Array2<f64>,
) -> f64 {
    let n = labels.len() as f64;
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let z = logits[[i, 0]];
        let p = sigmoid(z).clamp(1e-12, 1.0 - 1e-12);
        loss += -(pos_weight * y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        grad[[i, 0]] = (pos_weight * y * (p - 1.0) + (1.0 - y) * p) / n;
    }
    loss / n
}

/// Train one concept's detector from its example set. Examples are sorted
/// into canonical (image, cell) order before the seeded shuffle, so the
/// caller's ordering is irrelevant.
pub fn train_detector_from_examples(
    mut examples: Vec<DetectorExample>,
    input_dim: usize,
    pos_weight: f64,
    config: &DetectorTrainConfig,
    concept_id: usize,
) -> ConceptDetector {
    if examples.is_empty() {
        return ConceptDetector::stub(input_dim, config.hidden_dim);
    }
    examples.sort_by(|a, b| {
        (a.image_id, a.cell, a.positive).cmp(&(b.image_id, b.cell, b.positive))
    });
    let mut rng = rng_for(config.seed, "detector-init", concept_id as u64);
    let mut det = ConceptDetector::new(input_dim, config.hidden_dim, &mut rng);
    // freeze input statistics from the training examples
    let n = examples.len() as f64;
    for ex in &examples {
        det.input_mean += &ex.vector;
    }
    det.input_mean /= n;
    let mut var = Array1::<f64>::zeros(input_dim);
    for ex in &examples {
        let d = &ex.vector - &det.input_mean;
        var += &(&d * &d);
    }
    det.input_std = (var / n).mapv(|v| v.sqrt().max(1e-6));

    let mut opt = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..config.epochs {
        let mut shuffle_rng = rng_for(
            config.seed,
            "detector-shuffle",
            (concept_id * 1_000_003 + epoch) as u64,
        );
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(config.batch_size) {
            let mut x = Array2::<f64>::zeros((batch.len(), input_dim));
            let mut labels = Vec::with_capacity(batch.len());
            for (row, &idx) in batch.iter().enumerate() {
                x.row_mut(row).assign(&examples[idx].vector);
                labels.push(if examples[idx].positive { 1.0 } else { 0.0 });
            }
            let x = det.standardize(&x);
            det.zero_grads();
            let (z, a) = det.logits(&x);
            let mut dz = Array2::<f64>::zeros(z.dim());
            weighted_bce(&z, &labels, pos_weight, &mut dz);
            let da = det.lin2.backward(&a, &dz);
            let mut dh = da;
            dh.zip_mut_with(&a, |d, &act| {
                if act <= 0.0 {
                    *d = 0.0;
                }
            });
            det.lin1.backward(&x, &dh);
            opt.step(&mut det);
        }
    }
    det
}

/// Per-concept training statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorTrainLog {
    pub per_concept_positives: Vec<usize>,
    pub per_concept_negatives: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Train one binary classifier per concept on the frozen backbone's base
/// split features. The positive class carries weight `h*w - 1` (the
/// negative:positive count ratio of one feature map).
pub fn train_detectors(
    bundle: &DatasetBundle,
    backbone: &BackboneParams,
    config: &DetectorTrainConfig,
) -> Result<(DetectorParams, DetectorTrainLog)> {
    let n_concepts = backbone.n_concepts();
    if bundle.n_concepts() != n_concepts {
        return Err(Error::Shape(format!(
            "bundle has {} concepts, backbone has {n_concepts}",
            bundle.n_concepts()
        )));
    }
    let map_size = backbone.config.feature_map_size();
    let pos_weight = ((map_size * map_size).max(2) - 1) as f64;
    let channels = backbone.config.channels;

    let mut per_concept: Vec<Vec<DetectorExample>> = vec![Vec::new(); n_concepts];
    // frozen backbone: eval-mode forwards over an immutable borrow
    for chunk in bundle.base_split.chunks(32) {
        let refs: Vec<_> = chunk.iter().collect();
        let batch = backbone.normalize_batch(&refs)?;
        let trunk_out = backbone.trunk_forward_eval(&batch);
        for j in 0..n_concepts {
            let head_out = backbone.head_forward_eval(&trunk_out, j)?;
            for (i, im) in chunk.iter().enumerate() {
                let Some(ann) = im.annotation_for(j) else {
                    continue;
                };
                let fmap = FeatureMap::from_nchw(&head_out, i, j);
                if let Some((pos, negs)) =
                    build_detector_examples(&fmap, ann, backbone.config.input_size)?
                {
                    let (row, col) = map_image_coords_to_cell(
                        ann.x,
                        ann.y,
                        backbone.config.input_size,
                        fmap.height(),
                    )?;
                    per_concept[j].push(DetectorExample {
                        vector: pos,
                        positive: true,
                        image_id: im.id,
                        cell: (row, col),
                    });
                    let mut neg_iter = negs.into_iter();
                    for r in 0..fmap.height() {
                        for c in 0..fmap.width() {
                            if (r, c) != (row, col) {
                                per_concept[j].push(DetectorExample {
                                    vector: neg_iter.next().expect("negative per cell"),
                                    positive: false,
                                    image_id: im.id,
                                    cell: (r, c),
                                });
                            }
                        }
                    }
                }
            }
        }
    }

    let mut detectors = Vec::with_capacity(n_concepts);
    let mut log = DetectorTrainLog {
        per_concept_positives: Vec::with_capacity(n_concepts),
        per_concept_negatives: Vec::with_capacity(n_concepts),
        warnings: Vec::new(),
    };
    for (j, examples) in per_concept.into_iter().enumerate() {
        let n_pos = examples.iter().filter(|e| e.positive).count();
        let n_neg = examples.len() - n_pos;
        log.per_concept_positives.push(n_pos);
        log.per_concept_negatives.push(n_neg);
        if n_pos == 0 {
            log.warnings.push(format!(
                "concept {j} has no visible annotations in the base split; using a 0.5 stub detector"
            ));
            detectors.push(ConceptDetector::stub(channels, config.hidden_dim));
            continue;
        }
        detectors.push(train_detector_from_examples(
            examples, channels, pos_weight, config, j,
        ));
    }

    Ok((
        DetectorParams {
            detectors,
            positive_class_weight: pos_weight,
            config: *config,
        },
        log,
    ))
}

/// Score every cell of the feature map and return the argmax cell, its
/// probability, and its embedding. Ties break row-major (lowest row, then
/// lowest column).
pub fn detect_concept(fmap: &FeatureMap, params: &DetectorParams) -> Result<DetectionResult> {
    let detector = params.detectors.get(fmap.concept_id).ok_or_else(|| {
        Error::Bounds(format!(
            "no detector for concept {} (have {})",
            fmap.concept_id,
            params.detectors.len()
        ))
    })?;
    let mut best_cell = (0usize, 0usize);
    let mut best_p = f64::NEG_INFINITY;
    for r in 0..fmap.height() {
        for c in 0..fmap.width() {
            let p = detector.score(fmap.values.slice(ndarray::s![r, c, ..]));
            if p > best_p {
                best_p = p;
                best_cell = (r, c);
            }
        }
    }
    let vector = fmap.cell_vector(best_cell.0, best_cell.1);
    Ok(DetectionResult {
        cell: best_cell,
        probability: best_p,
        embedding: ConceptEmbedding {
            vector,
            concept_id: fmap.concept_id,
            source: EmbeddingSource::Detected {
                probability: best_p,
            },
        },
    })
}

/// Add Gaussian noise to every detector parameter (ablation utility for
/// degrading localization).
pub fn perturb_detectors(params: &DetectorParams, sigma: f64, seed: u64) -> DetectorParams {
    use rand_distr::{Distribution, Normal};
    let mut out = params.clone();
    let normal = Normal::new(0.0, sigma).unwrap();
    let mut rng = rng_for(seed, "detector-noise", 0);
    for det in &mut out.detectors {
        det.visit_params(&mut |v, _| {
            for value in v.iter_mut() {
                *value += normal.sample(&mut rng);
            }
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data::{generate_synthetic_dataset, PixelNormalization, SyntheticConfig};
    use crate::metric::DistanceKind;
    use ndarray::Array3;

    fn fmap_with(h: usize, w: usize, c: usize, concept_id: usize) -> FeatureMap {
        let mut rng = rng_for(1, "fmap", concept_id as u64);
        FeatureMap {
            values: Array3::from_shape_fn((h, w, c), |_| rng.random::<f64>()),
            concept_id,
        }
    }

    #[test]
    fn example_counts_match_map_size() {
        let fmap = fmap_with(5, 5, 4, 0);
        let ann = ConceptAnnotation {
            concept_id: 0,
            x: 42,
            y: 42,
            visible: true,
        };
        let (pos, negs) = build_detector_examples(&fmap, &ann, 84).unwrap().unwrap();
        assert_eq!(negs.len(), 24);
        assert_eq!(pos, fmap.cell_vector(2, 2));

        let one = fmap_with(1, 1, 4, 0);
        let (_, negs) = build_detector_examples(&one, &ann, 84).unwrap().unwrap();
        assert!(negs.is_empty());

        let invisible = ConceptAnnotation {
            concept_id: 0,
            x: 0,
            y: 0,
            visible: false,
        };
        assert!(build_detector_examples(&fmap, &invisible, 84)
            .unwrap()
            .is_none());
    }

    fn small_setup() -> (DatasetBundle, BackboneParams) {
        let cfg = SyntheticConfig {
            image_size: 16,
            grid_size: 2,
            n_concepts: 2,
            n_base_classes: 3,
            n_val_classes: 1,
            n_novel_classes: 1,
            images_per_class: 4,
            attribute_values: 4,
            ..Default::default()
        };
        let bundle = generate_synthetic_dataset(&cfg, 21).unwrap();
        let backbone = BackboneParams::new(
            BackboneConfig {
                input_size: 16,
                n_blocks_shared: 2,
                n_blocks_head: 1,
                channels: 4,
                n_concepts: 2,
            },
            PixelNormalization::default(),
            DistanceKind::Euclidean,
            2,
        )
        .unwrap();
        (bundle, backbone)
    }

    #[test]
    fn positive_weight_is_neg_to_pos_ratio() {
        let (bundle, backbone) = small_setup();
        // 16 input through 3 blocks -> 2x2 map: weight = 3
        let config = DetectorTrainConfig {
            epochs: 1,
            ..Default::default()
        };
        let (params, _) = train_detectors(&bundle, &backbone, &config).unwrap();
        assert_eq!(params.positive_class_weight, 3.0);
        assert_eq!(params.n_concepts(), 2);
    }

    #[test]
    fn default_conv4_map_gives_weight_24() {
        // 84 input -> 5x5 map -> positive weight h*w - 1 = 24
        let cfg = SyntheticConfig {
            image_size: 84,
            grid_size: 3,
            n_concepts: 1,
            n_base_classes: 1,
            n_val_classes: 1,
            n_novel_classes: 1,
            images_per_class: 2,
            attribute_values: 3,
            ..Default::default()
        };
        let bundle = generate_synthetic_dataset(&cfg, 5).unwrap();
        let backbone = BackboneParams::new(
            BackboneConfig {
                input_size: 84,
                n_blocks_shared: 3,
                n_blocks_head: 1,
                channels: 4,
                n_concepts: 1,
            },
            PixelNormalization::default(),
            DistanceKind::Euclidean,
            3,
        )
        .unwrap();
        assert_eq!(backbone.config.feature_map_size(), 5);
        let config = DetectorTrainConfig {
            epochs: 1,
            ..Default::default()
        };
        let (params, _) = train_detectors(&bundle, &backbone, &config).unwrap();
        assert_eq!(params.positive_class_weight, 24.0);
    }

    #[test]
    fn backbone_is_frozen_during_detector_training() {
        let (bundle, backbone) = small_setup();
        let before = backbone.clone();
        let config = DetectorTrainConfig {
            epochs: 2,
            ..Default::default()
        };
        train_detectors(&bundle, &backbone, &config).unwrap();
        assert_eq!(backbone, before);
    }

    #[test]
    fn argmax_probability_and_embedding_are_consistent() {
        let (bundle, backbone) = small_setup();
        let config = DetectorTrainConfig {
            epochs: 3,
            ..Default::default()
        };
        let (params, _) = train_detectors(&bundle, &backbone, &config).unwrap();
        let im = &bundle.novel_split[0];
        for j in 0..2 {
            let fmap = backbone.forward_feature_map(im, j).unwrap();
            let det = detect_concept(&fmap, &params).unwrap();
            // probability equals the max score over all cells, exactly
            let mut max_p = f64::NEG_INFINITY;
            for r in 0..fmap.height() {
                for c in 0..fmap.width() {
                    max_p = max_p.max(params.detectors[j].score(fmap.values.slice(ndarray::s![r, c, ..])));
                }
            }
            assert_eq!(det.probability, max_p);
            assert!((0.0..=1.0).contains(&det.probability));
            // embedding equals pick at the selected cell
            let picked = crate::backbone::pick_concept_embedding(&fmap, det.cell).unwrap();
            assert_eq!(det.embedding.vector, picked.vector);
            assert_eq!(
                det.embedding.source,
                EmbeddingSource::Detected {
                    probability: det.probability
                }
            );
        }
    }

    #[test]
    fn uniform_scores_tie_break_to_origin() {
        let stub = ConceptDetector::stub(4, 8);
        let params = DetectorParams {
            detectors: vec![stub],
            positive_class_weight: 24.0,
            config: DetectorTrainConfig::default(),
        };
        let fmap = fmap_with(3, 3, 4, 0);
        let det = detect_concept(&fmap, &params).unwrap();
        assert_eq!(det.cell, (0, 0));
        assert_eq!(det.probability, 0.5);
    }

    #[test]
    fn missing_detector_is_an_error() {
        let params = DetectorParams {
            detectors: vec![],
            positive_class_weight: 24.0,
            config: DetectorTrainConfig::default(),
        };
        let fmap = fmap_with(2, 2, 4, 0);
        assert!(detect_concept(&fmap, &params).is_err());
    }

    #[test]
    fn invisible_everywhere_gives_stub_and_warning() {
        let (mut bundle, backbone) = small_setup();
        for im in &mut bundle.base_split {
            for ann in &mut im.annotations {
                if ann.concept_id == 1 {
                    ann.visible = false;
                }
            }
        }
        let config = DetectorTrainConfig {
            epochs: 1,
            ..Default::default()
        };
        let (params, log) = train_detectors(&bundle, &backbone, &config).unwrap();
        assert!(params.detectors[1].stub);
        assert!(log.warnings.iter().any(|w| w.contains("concept 1")));
        // stub scores exactly 0.5 on any input
        let fmap = fmap_with(2, 2, 4, 1);
        let det = detect_concept(&fmap, &params).unwrap();
        assert_eq!(det.probability, 0.5);
    }

    #[test]
    fn example_order_does_not_change_the_trained_detector() {
        let (bundle, backbone) = small_setup();
        // gather concept 0's examples by hand
        let mut examples = Vec::new();
        for im in &bundle.base_split {
            let fmap = backbone.forward_feature_map(im, 0).unwrap();
            let ann = im.annotation_for(0).unwrap();
            if let Some((pos, _)) = build_detector_examples(&fmap, ann, 16).unwrap() {
                let cell = map_image_coords_to_cell(ann.x, ann.y, 16, fmap.height()).unwrap();
                examples.push(DetectorExample {
                    vector: pos,
                    positive: true,
                    image_id: im.id,
                    cell,
                });
                for r in 0..fmap.height() {
                    for c in 0..fmap.width() {
                        if (r, c) != cell {
                            examples.push(DetectorExample {
                                vector: fmap.cell_vector(r, c),
                                positive: false,
                                image_id: im.id,
                                cell: (r, c),
                            });
                        }
                    }
                }
            }
        }
        let config = DetectorTrainConfig {
            epochs: 2,
            ..Default::default()
        };
        let a = train_detector_from_examples(examples.clone(), 4, 3.0, &config, 0);
        let mut permuted = examples;
        permuted.reverse();
        let b = train_detector_from_examples(permuted, 4, 3.0, &config, 0);
        assert_eq!(a, b);
    }
}
