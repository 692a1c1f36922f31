//! Episodic training of the concept learners: prototype computation,
//! summed-distance classification, negative log-likelihood, augmentation,
//! and the optimization loop.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::backbone::{
    map_image_coords_to_cell, BackboneConfig, BackboneParams, BlockCache, ConceptEmbedding,
};
use crate::data::{AnnotatedImage, ConceptAnnotation, DatasetBundle};
use crate::episode::{sample_episode, Episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::metric::DistanceKind;
use crate::nn::{Adam, Parameterized};
use crate::util::rng_for;

/// Per-class, per-concept prototype vectors with the episode's class map.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    /// `prototypes[class][concept]`
    pub prototypes: Vec<Vec<Array1<f64>>>,
    pub class_map: Vec<u32>,
}

impl PrototypeBank {
    pub fn n_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn n_concepts(&self) -> usize {
        self.prototypes.first().map_or(0, |c| c.len())
    }

    pub fn get(&self, class: usize, concept: usize) -> &Array1<f64> {
        &self.prototypes[class][concept]
    }
}

/// Mean of each class's support embeddings, per concept.
///
/// `support_embeddings[class][concept]` is the list of embeddings backing
/// that prototype (fallback embeddings included); every list must be
/// non-empty.
pub fn compute_prototypes(
    support_embeddings: &[Vec<Vec<ConceptEmbedding>>],
    class_map: Vec<u32>,
) -> Result<PrototypeBank> {
    if support_embeddings.is_empty() {
        return Err(Error::Shape("no classes in support set".into()));
    }
    if support_embeddings.len() != class_map.len() {
        return Err(Error::Shape(format!(
            "{} embedding classes vs {} class map entries",
            support_embeddings.len(),
            class_map.len()
        )));
    }
    let n_concepts = support_embeddings[0].len();
    let mut prototypes = Vec::with_capacity(support_embeddings.len());
    for (class, per_concept) in support_embeddings.iter().enumerate() {
        if per_concept.len() != n_concepts {
            return Err(Error::Shape(format!(
                "class {class} has {} concepts, expected {n_concepts}",
                per_concept.len()
            )));
        }
        let mut class_protos = Vec::with_capacity(n_concepts);
        for (concept, embeddings) in per_concept.iter().enumerate() {
            if embeddings.is_empty() {
                return Err(Error::Shape(format!(
                    "class {class} concept {concept}: empty support embedding list"
                )));
            }
            let dim = embeddings[0].vector.len();
            let mut mean = Array1::<f64>::zeros(dim);
            for e in embeddings {
                if e.vector.len() != dim {
                    return Err(Error::Shape(format!(
                        "class {class} concept {concept}: embedding length {} != {dim}",
                        e.vector.len()
                    )));
                }
                mean += &e.vector;
            }
            mean /= embeddings.len() as f64;
            class_protos.push(mean);
        }
        prototypes.push(class_protos);
    }
    Ok(PrototypeBank {
        prototypes,
        class_map,
    })
}

/// Stable softmax of negated distance aggregates: `softmax(-sums)`.
pub fn softmax_neg_distances(sums: &[f64]) -> Vec<f64> {
    let max_logit = sums.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    // logits are -sums; max logit corresponds to min sum
    let exps: Vec<f64> = sums.iter().map(|&d| (-(d - max_logit)).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / total).collect()
}

/// Probability of each episode class for one query: softmax over classes of
/// the negated per-concept distance sums.
pub fn classify_query_training(
    query_embeddings: &[ConceptEmbedding],
    bank: &PrototypeBank,
    distance: DistanceKind,
) -> Result<Vec<f64>> {
    let n_concepts = bank.n_concepts();
    if query_embeddings.len() != n_concepts {
        return Err(Error::Shape(format!(
            "query has {} concept embeddings, bank has {n_concepts}",
            query_embeddings.len()
        )));
    }
    for (j, e) in query_embeddings.iter().enumerate() {
        if e.concept_id != j {
            return Err(Error::Shape(format!(
                "query concepts must be sorted: found id {} at position {j}",
                e.concept_id
            )));
        }
    }
    let sums: Vec<f64> = (0..bank.n_classes())
        .map(|y| {
            (0..n_concepts)
                .map(|j| distance.eval(query_embeddings[j].vector.view(), bank.get(y, j).view()))
                .sum()
        })
        .collect();
    Ok(softmax_neg_distances(&sums))
}

/// Augmentation switches and ranges. All geometric transforms move the
/// annotations with the pixels; annotations pushed out of frame become
/// invisible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub hflip: bool,
    pub crop: bool,
    pub crop_padding: usize,
    pub rotation: bool,
    pub rotation_max_deg: f64,
    pub color_jitter: bool,
    pub jitter_strength: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            hflip: true,
            crop: true,
            crop_padding: 4,
            rotation: true,
            rotation_max_deg: 10.0,
            color_jitter: true,
            jitter_strength: 0.2,
        }
    }
}

impl AugmentationConfig {
    pub fn from_kv(cfg: &crate::config::KvConfig) -> Result<Self> {
        if !cfg.get_bool("augment", true)? {
            return Ok(AugmentationConfig::disabled());
        }
        let mut aug = AugmentationConfig::default();
        aug.crop_padding = cfg.get_usize("crop_padding", aug.crop_padding)?;
        aug.rotation_max_deg = cfg.get_f64("rotation_max_deg", aug.rotation_max_deg)?;
        aug.jitter_strength = cfg.get_f64("jitter_strength", aug.jitter_strength)?;
        if !(0.0..=180.0).contains(&aug.rotation_max_deg) {
            return Err(Error::Config(
                "rotation_max_deg must be in [0, 180]".into(),
            ));
        }
        if !(0.0..1.0).contains(&aug.jitter_strength) {
            return Err(Error::Config("jitter_strength must be in [0, 1)".into()));
        }
        Ok(aug)
    }

    pub fn disabled() -> Self {
        AugmentationConfig {
            hflip: false,
            crop: false,
            crop_padding: 0,
            rotation: false,
            rotation_max_deg: 0.0,
            color_jitter: false,
            jitter_strength: 0.0,
        }
    }
}

fn shift_annotation(ann: &ConceptAnnotation, dx: i64, dy: i64, size: i64) -> ConceptAnnotation {
    if !ann.visible {
        return *ann;
    }
    let nx = ann.x as i64 + dx;
    let ny = ann.y as i64 + dy;
    if nx < 0 || nx >= size || ny < 0 || ny >= size {
        return ConceptAnnotation {
            concept_id: ann.concept_id,
            x: 0,
            y: 0,
            visible: false,
        };
    }
    ConceptAnnotation {
        concept_id: ann.concept_id,
        x: nx as u32,
        y: ny as u32,
        visible: true,
    }
}

/// Apply the configured random transforms to pixels and annotations jointly.
pub fn augment(image: &AnnotatedImage, aug: &AugmentationConfig, rng: &mut impl Rng) -> AnnotatedImage {
    let (_, h, w) = image.pixels.dim();
    debug_assert_eq!(h, w, "augmentation assumes square images");
    let size = h as i64;
    let mut pixels = image.pixels.clone();
    let mut annotations = image.annotations.clone();

    if aug.hflip && rng.random::<f64>() < 0.5 {
        let mut flipped = pixels.clone();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    flipped[[c, y, x]] = pixels[[c, y, w - 1 - x]];
                }
            }
        }
        pixels = flipped;
        for ann in &mut annotations {
            if ann.visible {
                ann.x = (w as u32) - 1 - ann.x;
            }
        }
    }

    if aug.crop && aug.crop_padding > 0 {
        let p = aug.crop_padding as i64;
        let ox = rng.random_range(0..=2 * p);
        let oy = rng.random_range(0..=2 * p);
        // shift: out(y, x) = in(y - sy, x - sx), zero padded
        let sx = p - ox;
        let sy = p - oy;
        let mut shifted = Array3::<f64>::zeros(pixels.dim());
        for c in 0..3 {
            for y in 0..h {
                let iy = y as i64 - sy;
                if iy < 0 || iy >= size {
                    continue;
                }
                for x in 0..w {
                    let ix = x as i64 - sx;
                    if ix < 0 || ix >= size {
                        continue;
                    }
                    shifted[[c, y, x]] = pixels[[c, iy as usize, ix as usize]];
                }
            }
        }
        pixels = shifted;
        annotations = annotations
            .iter()
            .map(|a| shift_annotation(a, sx, sy, size))
            .collect();
    }

    if aug.rotation && aug.rotation_max_deg > 0.0 {
        let deg = rng.random_range(-aug.rotation_max_deg..=aug.rotation_max_deg);
        let theta = deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        let center = (size as f64 - 1.0) / 2.0;
        let mut rotated = Array3::<f64>::zeros(pixels.dim());
        for y in 0..h {
            for x in 0..w {
                // inverse map with bilinear sampling, zero outside
                let dx = x as f64 - center;
                let dy = y as f64 - center;
                let src_x = center + dx * cos + dy * sin;
                let src_y = center - dx * sin + dy * cos;
                if src_x < 0.0 || src_y < 0.0 || src_x > (w - 1) as f64 || src_y > (h - 1) as f64 {
                    continue;
                }
                let x0 = src_x.floor() as usize;
                let y0 = src_y.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let fx = src_x - x0 as f64;
                let fy = src_y - y0 as f64;
                for c in 0..3 {
                    let v00 = pixels[[c, y0, x0]];
                    let v01 = pixels[[c, y0, x1]];
                    let v10 = pixels[[c, y1, x0]];
                    let v11 = pixels[[c, y1, x1]];
                    rotated[[c, y, x]] = v00 * (1.0 - fx) * (1.0 - fy)
                        + v01 * fx * (1.0 - fy)
                        + v10 * (1.0 - fx) * fy
                        + v11 * fx * fy;
                }
            }
        }
        pixels = rotated;
        annotations = annotations
            .iter()
            .map(|ann| {
                if !ann.visible {
                    return *ann;
                }
                let dx = ann.x as f64 - center;
                let dy = ann.y as f64 - center;
                let nx = (center + dx * cos - dy * sin).round() as i64;
                let ny = (center + dx * sin + dy * cos).round() as i64;
                if nx < 0 || nx >= size || ny < 0 || ny >= size {
                    ConceptAnnotation {
                        concept_id: ann.concept_id,
                        x: 0,
                        y: 0,
                        visible: false,
                    }
                } else {
                    ConceptAnnotation {
                        concept_id: ann.concept_id,
                        x: nx as u32,
                        y: ny as u32,
                        visible: true,
                    }
                }
            })
            .collect();
    }

    if aug.color_jitter && aug.jitter_strength > 0.0 {
        let s = aug.jitter_strength;
        let brightness = rng.random_range(1.0 - s..=1.0 + s);
        let contrast = rng.random_range(1.0 - s..=1.0 + s);
        pixels.mapv_inplace(|v| (((v * brightness) - 0.5) * contrast + 0.5).clamp(0.0, 1.0));
    }

    AnnotatedImage {
        id: image.id,
        pixels,
        class_label: image.class_label,
        annotations,
    }
}

/// How each embedding was pulled out of its feature map (training path).
#[derive(Clone, Copy)]
enum Extraction {
    Cell(usize, usize),
    Gap,
}

/// Everything a training step caches between forward and backward.
struct TrainForward {
    trunk_caches: Vec<BlockCache>,
    head_caches: Vec<Vec<BlockCache>>,
    /// `[concept]` -> embeddings `[image, channel]`
    embeddings: Vec<Array2<f64>>,
    extraction: Vec<Vec<Extraction>>,
    map_h: usize,
    map_w: usize,
}

fn forward_train_episode(
    params: &mut BackboneParams,
    images: &[&AnnotatedImage],
) -> Result<TrainForward> {
    let batch = params.normalize_batch(images)?;
    let n = images.len();
    let channels = params.config.channels;
    let input_size = params.config.input_size;

    let mut cur = batch;
    let mut trunk_caches = Vec::with_capacity(params.trunk.len());
    for block in &mut params.trunk {
        let (next, cache) = block.forward_train(&cur);
        trunk_caches.push(cache);
        cur = next;
    }
    let trunk_out = cur;

    let mut head_caches = Vec::with_capacity(params.heads.len());
    let mut embeddings = Vec::with_capacity(params.heads.len());
    let mut extraction = Vec::with_capacity(params.heads.len());
    let mut map_h = 0;
    let mut map_w = 0;
    for (j, head) in params.heads.iter_mut().enumerate() {
        let mut hcur = trunk_out.clone();
        let mut caches = Vec::with_capacity(head.len());
        for block in head.iter_mut() {
            let (next, cache) = block.forward_train(&hcur);
            caches.push(cache);
            hcur = next;
        }
        let (_, _, hm, wm) = hcur.dim();
        map_h = hm;
        map_w = wm;
        let mut emb = Array2::<f64>::zeros((n, channels));
        let mut extr = Vec::with_capacity(n);
        for (i, im) in images.iter().enumerate() {
            let how = match im.annotation_for(j) {
                Some(ann) if ann.visible => {
                    let (r, c) = map_image_coords_to_cell(ann.x, ann.y, input_size, hm)?;
                    Extraction::Cell(r, c)
                }
                _ => Extraction::Gap,
            };
            match how {
                Extraction::Cell(r, c) => {
                    for ch in 0..channels {
                        emb[[i, ch]] = hcur[[i, ch, r, c]];
                    }
                }
                Extraction::Gap => {
                    let scale = 1.0 / (hm * wm) as f64;
                    for ch in 0..channels {
                        let mut s = 0.0;
                        for y in 0..hm {
                            for x in 0..wm {
                                s += hcur[[i, ch, y, x]];
                            }
                        }
                        emb[[i, ch]] = s * scale;
                    }
                }
            }
            extr.push(how);
        }
        head_caches.push(caches);
        embeddings.push(emb);
        extraction.push(extr);
    }

    Ok(TrainForward {
        trunk_caches,
        head_caches,
        embeddings,
        extraction,
        map_h,
        map_w,
    })
}

/// Loss (and optionally parameter gradients) of one training episode.
///
/// Layout: images are stacked support-first (class-major), queries after.
fn episode_loss_impl(
    params: &mut BackboneParams,
    episode: &Episode,
    aug: &AugmentationConfig,
    rng: &mut impl Rng,
    with_grads: bool,
) -> Result<f64> {
    let n_way = episode.n_way();
    let k_shot = episode
        .support
        .first()
        .map(|s| s.len())
        .ok_or_else(|| Error::Shape("episode has no support set".into()))?;
    let n_query = episode.query.len();
    if n_query == 0 {
        return Err(Error::Shape("episode has no query set".into()));
    }

    let augmented: Vec<AnnotatedImage> = episode
        .support
        .iter()
        .flatten()
        .chain(episode.query.iter().map(|(_, im)| im))
        .map(|im| augment(im, aug, rng))
        .collect();
    let refs: Vec<&AnnotatedImage> = augmented.iter().collect();
    let n_support = n_way * k_shot;

    let fw = forward_train_episode(params, &refs)?;
    let n_concepts = params.n_concepts();
    let channels = params.config.channels;
    let distance = params.distance;

    // prototypes[class][concept] from the support rows
    let mut prototypes = vec![vec![Array1::<f64>::zeros(channels); n_concepts]; n_way];
    for y in 0..n_way {
        for j in 0..n_concepts {
            let mut mean = Array1::<f64>::zeros(channels);
            for s in 0..k_shot {
                let row = fw.embeddings[j].row(y * k_shot + s);
                mean += &row;
            }
            mean /= k_shot as f64;
            prototypes[y][j] = mean;
        }
    }

    // per-query distance sums and probabilities
    let mut loss = 0.0;
    // d_loss/d_distance[q][y]
    let mut d_dist = vec![vec![0.0; n_way]; n_query];
    for (q, (true_class, _)) in episode.query.iter().enumerate() {
        let qrow = n_support + q;
        let mut sums = vec![0.0; n_way];
        for y in 0..n_way {
            for j in 0..n_concepts {
                let e = fw.embeddings[j].row(qrow);
                sums[y] += distance.eval(e, prototypes[y][j].view());
            }
        }
        let probs = softmax_neg_distances(&sums);
        let p_true = probs[*true_class].max(1e-300);
        loss -= p_true.ln();
        if with_grads {
            for y in 0..n_way {
                let one = if y == *true_class { 1.0 } else { 0.0 };
                // dL/dd = (onehot - p) / n_query
                d_dist[q][y] = (one - probs[y]) / n_query as f64;
            }
        }
    }
    loss /= n_query as f64;

    if !with_grads {
        return Ok(loss);
    }

    // gradient w.r.t. embeddings, per concept: [image, channel]
    let n_images = refs.len();
    let mut d_emb: Vec<Array2<f64>> = (0..n_concepts)
        .map(|_| Array2::<f64>::zeros((n_images, channels)))
        .collect();
    let mut d_proto = vec![vec![Array1::<f64>::zeros(channels); n_concepts]; n_way];
    for (q, _) in episode.query.iter().enumerate() {
        let qrow = n_support + q;
        for y in 0..n_way {
            let g = d_dist[q][y];
            if g == 0.0 {
                continue;
            }
            for j in 0..n_concepts {
                let e = fw.embeddings[j].row(qrow);
                let p = prototypes[y][j].view();
                let ge = distance.grad_wrt_a(e, p) * g;
                {
                    let mut row = d_emb[j].row_mut(qrow);
                    row += &ge;
                }
                let gp = distance.grad_wrt_a(p, e) * g;
                d_proto[y][j] += &gp;
            }
        }
    }
    // prototype mean spreads gradient uniformly over its support embeddings
    for y in 0..n_way {
        for j in 0..n_concepts {
            let gp = &d_proto[y][j] / k_shot as f64;
            for s in 0..k_shot {
                let mut row = d_emb[j].row_mut(y * k_shot + s);
                row += &gp;
            }
        }
    }

    // extraction backward into each head's final feature map
    let (hm, wm) = (fw.map_h, fw.map_w);
    let mut d_trunk_out: Option<Array4<f64>> = None;
    for (j, head) in params.heads.iter_mut().enumerate() {
        let mut d_fmap = Array4::<f64>::zeros((n_images, channels, hm, wm));
        for i in 0..n_images {
            match fw.extraction[j][i] {
                Extraction::Cell(r, c) => {
                    for ch in 0..channels {
                        d_fmap[[i, ch, r, c]] += d_emb[j][[i, ch]];
                    }
                }
                Extraction::Gap => {
                    let scale = 1.0 / (hm * wm) as f64;
                    for ch in 0..channels {
                        let g = d_emb[j][[i, ch]] * scale;
                        for y in 0..hm {
                            for x in 0..wm {
                                d_fmap[[i, ch, y, x]] += g;
                            }
                        }
                    }
                }
            }
        }
        let mut d_cur = d_fmap;
        for (block, cache) in head.iter_mut().rev().zip(fw.head_caches[j].iter().rev()) {
            d_cur = block.backward(cache, &d_cur);
        }
        match &mut d_trunk_out {
            Some(acc) => *acc += &d_cur,
            None => d_trunk_out = Some(d_cur),
        }
    }

    let mut d_cur = d_trunk_out.expect("at least one concept head");
    for (block, cache) in params
        .trunk
        .iter_mut()
        .rev()
        .zip(fw.trunk_caches.iter().rev())
    {
        d_cur = block.backward(cache, &d_cur);
    }

    Ok(loss)
}

/// Mean negative log-likelihood of the episode's queries (training-mode
/// forward, no gradients).
pub fn episode_loss(
    params: &mut BackboneParams,
    episode: &Episode,
    aug: &AugmentationConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    episode_loss_impl(params, episode, aug, rng, false)
}

/// As [`episode_loss`], additionally accumulating parameter gradients.
pub fn episode_loss_with_grads(
    params: &mut BackboneParams,
    episode: &Episode,
    aug: &AugmentationConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    episode_loss_impl(params, episode, aug, rng, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub episodes_per_epoch: usize,
    pub max_epochs: usize,
    pub val_episodes: usize,
    pub patience: usize,
    pub episode_spec: EpisodeSpec,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub distance: DistanceKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            episodes_per_epoch: 100,
            max_epochs: 100,
            val_episodes: 100,
            patience: 10,
            episode_spec: EpisodeSpec {
                n_way: 5,
                k_shot: 5,
                n_query: 16,
            },
            seed: 0,
            backbone: BackboneConfig::default(),
            distance: DistanceKind::Euclidean,
        }
    }
}

impl TrainConfig {
    /// Assemble from key-value config text keys (documented in the README),
    /// with `seed` supplied by the caller. The backbone concept count and
    /// input size are placeholders until training binds them to a bundle.
    pub fn from_kv(cfg: &crate::config::KvConfig, seed: u64) -> Result<Self> {
        let spec = EpisodeSpec::new(
            cfg.get_usize("n_way", 5)?,
            cfg.get_usize("k_shot", 5)?,
            cfg.get_usize("n_query", 16)?,
        )?;
        Ok(TrainConfig {
            learning_rate: cfg.get_f64("learning_rate", 1e-3)?,
            episodes_per_epoch: cfg.get_usize("episodes_per_epoch", 100)?,
            max_epochs: cfg.get_usize("max_epochs", 100)?,
            val_episodes: cfg.get_usize("val_episodes", 100)?,
            patience: cfg.get_usize("patience", 10)?,
            episode_spec: spec,
            seed,
            backbone: crate::backbone::BackboneConfig {
                input_size: cfg.get_usize("input_size", 84)?,
                n_blocks_shared: cfg.get_usize("blocks_shared", 3)?,
                n_blocks_head: cfg.get_usize("blocks_head", 1)?,
                channels: cfg.get_usize("channels", 64)?,
                n_concepts: 1,
            },
            distance: crate::metric::DistanceKind::from_name(
                cfg.get("distance").unwrap_or("euclidean"),
            )?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be >= 0".into()));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.max_epochs < 1 || self.episodes_per_epoch < 1 {
            return Err(Error::Config("max_epochs and episodes_per_epoch must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub warnings: Vec<String>,
}

impl TrainLog {
    /// The deterministic part of the log (wall times excluded), for
    /// reproducibility comparisons.
    pub fn series(&self) -> Vec<(usize, f64, f64)> {
        self.epochs
            .iter()
            .map(|r| (r.epoch, r.mean_loss, r.val_accuracy))
            .collect()
    }

    /// Line-delimited records, one JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("epoch record serializes"))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Episode accuracy with annotated (oracle) query extraction and equal-weight
/// summed-distance argmax; used for validation during training, before
/// detectors exist.
pub fn oracle_episode_accuracy(params: &BackboneParams, episode: &Episode) -> Result<f64> {
    let support_refs: Vec<&AnnotatedImage> = episode.support.iter().flatten().collect();
    let k_shot = episode.support[0].len();
    let support_embs = params.embed_batch_annotated(&support_refs)?;
    let n_concepts = params.n_concepts();
    let mut grouped: Vec<Vec<Vec<ConceptEmbedding>>> = Vec::with_capacity(episode.n_way());
    for y in 0..episode.n_way() {
        let mut per_concept = vec![Vec::with_capacity(k_shot); n_concepts];
        for s in 0..k_shot {
            for (j, e) in support_embs[y * k_shot + s].iter().enumerate() {
                per_concept[j].push(e.clone());
            }
        }
        grouped.push(per_concept);
    }
    let bank = compute_prototypes(&grouped, episode.class_map.clone())?;

    let query_refs: Vec<&AnnotatedImage> = episode.query.iter().map(|(_, im)| im).collect();
    let query_embs = params.embed_batch_annotated(&query_refs)?;
    let mut correct = 0usize;
    for (q, (true_class, _)) in episode.query.iter().enumerate() {
        let probs = classify_query_training(&query_embs[q], &bank, params.distance)?;
        let mut best = 0;
        for y in 1..probs.len() {
            if probs[y] > probs[best] {
                best = y;
            }
        }
        if best == *true_class {
            correct += 1;
        }
    }
    Ok(correct as f64 / episode.query.len() as f64)
}

fn val_accuracy(
    params: &BackboneParams,
    val_split: &[AnnotatedImage],
    spec: &EpisodeSpec,
    n_episodes: usize,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for k in 0..n_episodes {
        let mut rng = rng_for(seed, "val-episode", k as u64);
        let episode = sample_episode(val_split, spec, &mut rng)?;
        total += oracle_episode_accuracy(params, &episode)?;
    }
    Ok(total / n_episodes.max(1) as f64)
}

/// Episodic optimization with Adam; returns the parameters of the epoch with
/// the best validation accuracy (annotated-oracle mode) and the training log.
///
/// The backbone's input size and concept count follow the bundle.
pub fn train_concept_learners(
    bundle: &DatasetBundle,
    config: &TrainConfig,
    aug: &AugmentationConfig,
) -> Result<(BackboneParams, TrainLog)> {
    config.validate()?;
    let mut backbone_config = config.backbone;
    backbone_config.n_concepts = bundle.n_concepts();
    backbone_config.input_size = bundle.input_size;
    let mut params = BackboneParams::new(
        backbone_config,
        bundle.normalization.clone(),
        config.distance,
        config.seed,
    )?;
    let mut opt = Adam::new(config.learning_rate);
    let mut log = TrainLog::default();
    let mut best_params = params.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut epochs_since_best = 0usize;

    for epoch in 0..config.max_epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0;
        for k in 0..config.episodes_per_epoch {
            let step = (epoch * config.episodes_per_epoch + k) as u64;
            let mut ep_rng = rng_for(config.seed, "train-episode", step);
            let episode = sample_episode(&bundle.base_split, &config.episode_spec, &mut ep_rng)?;
            let mut aug_rng = rng_for(config.seed, "train-aug", step);
            params.zero_grads();
            let loss = episode_loss_with_grads(&mut params, &episode, aug, &mut aug_rng)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss} at epoch {epoch} episode {k}"
                )));
            }
            opt.step(&mut params);
            loss_sum += loss;
        }
        let mean_loss = loss_sum / config.episodes_per_epoch as f64;
        let val_acc = val_accuracy(
            &params,
            &bundle.val_split,
            &config.episode_spec,
            config.val_episodes,
            config.seed,
        )?;
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss,
            val_accuracy: val_acc,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        if val_acc > best_acc {
            best_acc = val_acc;
            best_params = params.clone();
            log.best_epoch = epoch;
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= config.patience {
                break;
            }
        }
    }
    Ok((best_params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::EmbeddingSource;
    use crate::data::{generate_synthetic_dataset, PixelNormalization, SyntheticConfig};
    use ndarray::array;

    fn emb(concept_id: usize, v: &[f64]) -> ConceptEmbedding {
        ConceptEmbedding {
            vector: Array1::from_vec(v.to_vec()),
            concept_id,
            source: EmbeddingSource::Picked,
        }
    }

    #[test]
    fn prototype_of_one_is_the_embedding() {
        let support = vec![vec![vec![emb(0, &[1.5, -2.0])]]];
        let bank = compute_prototypes(&support, vec![7]).unwrap();
        assert_eq!(bank.get(0, 0), &array![1.5, -2.0]);
        assert_eq!(bank.class_map, vec![7]);
    }

    #[test]
    fn prototype_is_componentwise_mean() {
        let support = vec![vec![vec![emb(0, &[0.0, 0.0]), emb(0, &[2.0, 4.0])]]];
        let bank = compute_prototypes(&support, vec![0]).unwrap();
        assert_eq!(bank.get(0, 0), &array![1.0, 2.0]);
    }

    #[test]
    fn bank_size_is_classes_times_concepts() {
        let per_concept: Vec<Vec<ConceptEmbedding>> = (0..15)
            .map(|j| vec![emb(j, &[j as f64])])
            .collect();
        let support: Vec<Vec<Vec<ConceptEmbedding>>> = (0..5).map(|_| per_concept.clone()).collect();
        let bank = compute_prototypes(&support, (0..5).collect()).unwrap();
        assert_eq!(bank.n_classes() * bank.n_concepts(), 75);
    }

    #[test]
    fn prototypes_are_permutation_invariant() {
        let a = vec![vec![vec![
            emb(0, &[1.0, 0.0]),
            emb(0, &[3.0, 2.0]),
            emb(0, &[-1.0, 5.0]),
        ]]];
        let b = vec![vec![vec![
            emb(0, &[-1.0, 5.0]),
            emb(0, &[1.0, 0.0]),
            emb(0, &[3.0, 2.0]),
        ]]];
        let pa = compute_prototypes(&a, vec![0]).unwrap();
        let pb = compute_prototypes(&b, vec![0]).unwrap();
        let diff = (pa.get(0, 0) - pb.get(0, 0)).mapv(f64::abs).sum();
        assert!(diff < 1e-12);
    }

    #[test]
    fn empty_support_list_errors() {
        let support = vec![vec![Vec::<ConceptEmbedding>::new()]];
        assert!(compute_prototypes(&support, vec![0]).is_err());
    }

    #[test]
    fn equal_distances_split_evenly() {
        let bank = PrototypeBank {
            prototypes: vec![vec![array![1.0, 0.0]], vec![array![-1.0, 0.0]]],
            class_map: vec![0, 1],
        };
        let q = vec![emb(0, &[0.0, 0.0])];
        let p = classify_query_training(&q, &bank, DistanceKind::Euclidean).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn distance_gap_of_ln3_gives_three_to_one() {
        // D_1 = 0, D_2 = ln 3 -> p = (0.75, 0.25)
        let p = softmax_neg_distances(&[0.0, 3.0f64.ln()]);
        assert!((p[0] - 0.75).abs() < 1e-12);
        assert!((p[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn shift_invariance_of_distance_softmax() {
        let sums = [1.3, 0.2, 4.0, 2.2];
        let base = softmax_neg_distances(&sums);
        for kappa in [-3.0, 0.5, 100.0] {
            let shifted: Vec<f64> = sums.iter().map(|d| d + kappa).collect();
            let p = softmax_neg_distances(&shifted);
            for (a, b) in base.iter().zip(&p) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn increasing_a_distance_decreases_that_class() {
        let sums = [1.0, 2.0, 3.0];
        let base = softmax_neg_distances(&sums);
        let bumped = softmax_neg_distances(&[1.0, 2.5, 3.0]);
        assert!(bumped[1] < base[1]);
        assert!(bumped[0] > base[0]);
        assert!(bumped[2] > base[2]);
    }

    #[test]
    fn probabilities_match_brute_force_softmax() {
        use rand::Rng;
        let mut rng = crate::util::rng_for(99, "test", 0);
        for _ in 0..50 {
            let n_classes = 5;
            let n_concepts = 3;
            let dim = 8;
            let bank = PrototypeBank {
                prototypes: (0..n_classes)
                    .map(|_| {
                        (0..n_concepts)
                            .map(|_| Array1::from_shape_fn(dim, |_| rng.random::<f64>() * 2.0 - 1.0))
                            .collect()
                    })
                    .collect(),
                class_map: (0..n_classes as u32).collect(),
            };
            let query: Vec<ConceptEmbedding> = (0..n_concepts)
                .map(|j| {
                    ConceptEmbedding {
                        vector: Array1::from_shape_fn(dim, |_| rng.random::<f64>() * 2.0 - 1.0),
                        concept_id: j,
                        source: EmbeddingSource::Picked,
                    }
                })
                .collect();
            let got = classify_query_training(&query, &bank, DistanceKind::Euclidean).unwrap();

            // independent oracle: explicit sums then textbook softmax
            let mut sums = vec![0.0; n_classes];
            for y in 0..n_classes {
                for j in 0..n_concepts {
                    let mut sq = 0.0;
                    for d in 0..dim {
                        let diff = query[j].vector[d] - bank.get(y, j)[d];
                        sq += diff * diff;
                    }
                    sums[y] += sq.sqrt();
                }
            }
            let exps: Vec<f64> = sums.iter().map(|&s| (-s).exp()).collect();
            let z: f64 = exps.iter().sum();
            let total: f64 = got.iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
            for y in 0..n_classes {
                assert!((got[y] - exps[y] / z).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn hflip_moves_annotation() {
        let cfg = SyntheticConfig {
            image_size: 84,
            grid_size: 3,
            n_concepts: 1,
            n_base_classes: 1,
            n_val_classes: 1,
            n_novel_classes: 1,
            images_per_class: 1,
            ..Default::default()
        };
        let mut im = generate_synthetic_dataset(&cfg, 1).unwrap().base_split[0].clone();
        im.annotations[0].x = 10;
        let aug = AugmentationConfig {
            hflip: true,
            ..AugmentationConfig::disabled()
        };
        // find a seed whose first draw flips
        let mut rng = crate::util::rng_for(0, "flip", 1);
        let out = augment(&im, &aug, &mut rng);
        if out.annotations[0].x != im.annotations[0].x {
            assert_eq!(out.annotations[0].x, 73);
            assert_eq!(out.pixels[[0, 0, 0]], im.pixels[[0, 0, 83]]);
        } else {
            // not flipped this draw; force by trying another stream
            let mut rng2 = crate::util::rng_for(0, "flip", 2);
            let out2 = augment(&im, &aug, &mut rng2);
            assert!(
                out.annotations[0].x == 10 || out2.annotations[0].x == 73,
                "one of two independent draws should flip"
            );
        }
    }

    #[test]
    fn photometric_only_keeps_coordinates() {
        let cfg = SyntheticConfig {
            image_size: 24,
            grid_size: 3,
            n_concepts: 2,
            n_base_classes: 1,
            n_val_classes: 1,
            n_novel_classes: 1,
            images_per_class: 1,
            ..Default::default()
        };
        let im = generate_synthetic_dataset(&cfg, 2).unwrap().base_split[0].clone();
        let aug = AugmentationConfig {
            color_jitter: true,
            jitter_strength: 0.3,
            ..AugmentationConfig::disabled()
        };
        let mut rng = crate::util::rng_for(1, "jitter", 0);
        let out = augment(&im, &aug, &mut rng);
        assert_eq!(out.annotations, im.annotations);
        assert_ne!(out.pixels, im.pixels);
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let cfg = SyntheticConfig {
            image_size: 24,
            grid_size: 3,
            n_concepts: 2,
            n_base_classes: 1,
            n_val_classes: 1,
            n_novel_classes: 1,
            images_per_class: 1,
            ..Default::default()
        };
        let im = generate_synthetic_dataset(&cfg, 3).unwrap().base_split[0].clone();
        let mut rng = crate::util::rng_for(2, "noop", 0);
        let out = augment(&im, &AugmentationConfig::disabled(), &mut rng);
        assert_eq!(out, im);
    }

    fn tiny_bundle() -> DatasetBundle {
        let cfg = SyntheticConfig {
            image_size: 16,
            grid_size: 2,
            n_concepts: 2,
            n_base_classes: 3,
            n_val_classes: 2,
            n_novel_classes: 2,
            images_per_class: 6,
            attribute_values: 4,
            ..Default::default()
        };
        generate_synthetic_dataset(&cfg, 5).unwrap()
    }

    fn tiny_train_config() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            episodes_per_epoch: 3,
            max_epochs: 2,
            val_episodes: 2,
            patience: 2,
            episode_spec: EpisodeSpec {
                n_way: 2,
                k_shot: 1,
                n_query: 2,
            },
            seed: 9,
            backbone: BackboneConfig {
                input_size: 16,
                n_blocks_shared: 2,
                n_blocks_head: 1,
                channels: 4,
                n_concepts: 2,
            },
            distance: DistanceKind::Euclidean,
        }
    }

    #[test]
    fn loss_is_nonnegative_and_low_for_identical_query() {
        let bundle = tiny_bundle();
        let spec = EpisodeSpec {
            n_way: 2,
            k_shot: 1,
            n_query: 1,
        };
        let mut rng = crate::util::rng_for(4, "ep", 0);
        let episode = sample_episode(&bundle.base_split, &spec, &mut rng).unwrap();
        // replace the query with a copy of its own class's sole support image
        let mut ep = episode.clone();
        ep.query = vec![(0, ep.support[0][0].clone())];

        let mut params = BackboneParams::new(
            tiny_train_config().backbone,
            PixelNormalization::default(),
            DistanceKind::Euclidean,
            11,
        )
        .unwrap();
        let mut loss_rng = crate::util::rng_for(4, "loss", 0);
        let loss = episode_loss(
            &mut params,
            &ep,
            &AugmentationConfig::disabled(),
            &mut loss_rng,
        )
        .unwrap();
        assert!(loss >= 0.0);
        assert!(loss <= (ep.n_way() as f64).ln() + 1e-9);

        // mislabeling the same query must give a strictly larger loss
        let mut mislabeled = ep.clone();
        mislabeled.query[0].0 = 1;
        let mut loss_rng2 = crate::util::rng_for(4, "loss", 0);
        let worse = episode_loss(
            &mut params,
            &mislabeled,
            &AugmentationConfig::disabled(),
            &mut loss_rng2,
        )
        .unwrap();
        assert!(worse > loss);
    }

    #[test]
    fn gradients_match_finite_differences_on_tiny_config() {
        let bundle = tiny_bundle();
        let spec = EpisodeSpec {
            n_way: 2,
            k_shot: 1,
            n_query: 1,
        };
        let mut rng = crate::util::rng_for(6, "ep", 0);
        let episode = sample_episode(&bundle.base_split, &spec, &mut rng).unwrap();
        let mut params = BackboneParams::new(
            BackboneConfig {
                input_size: 16,
                n_blocks_shared: 2,
                n_blocks_head: 1,
                channels: 4,
                n_concepts: 2,
            },
            PixelNormalization::default(),
            DistanceKind::Euclidean,
            13,
        )
        .unwrap();
        let aug = AugmentationConfig::disabled();

        params.zero_grads();
        let mut g_rng = crate::util::rng_for(6, "g", 0);
        episode_loss_with_grads(&mut params, &episode, &aug, &mut g_rng).unwrap();

        let n = params.param_count();
        let mut pick = crate::util::rng_for(6, "pick", 0);
        let h = 1e-5;
        for _ in 0..12 {
            let idx = pick.random_range(0..n);
            let ana = params.grad_at(idx);
            let mut plus = params.clone();
            plus.nudge_param(idx, h);
            let mut m_rng = crate::util::rng_for(6, "g", 0);
            let lp = episode_loss(&mut plus, &episode, &aug, &mut m_rng).unwrap();
            let mut minus = params.clone();
            minus.nudge_param(idx, -h);
            let mut m_rng = crate::util::rng_for(6, "g", 0);
            let lm = episode_loss(&mut minus, &episode, &aug, &mut m_rng).unwrap();
            let num = (lp - lm) / (2.0 * h);
            if num.abs() < 1e-8 && ana.abs() < 1e-8 {
                // below central-difference resolution; both are zero
                continue;
            }
            let denom = (num.abs() + ana.abs()).max(1e-8);
            assert!(
                (num - ana).abs() / denom < 1e-4,
                "param {idx}: numeric {num:.3e} analytic {ana:.3e}"
            );
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let bundle = tiny_bundle();
        let mut config = tiny_train_config();
        config.learning_rate = 0.0;
        let (trained, _) = train_concept_learners(&bundle, &config, &AugmentationConfig::disabled())
            .unwrap();
        let mut init = BackboneParams::new(
            BackboneConfig {
                input_size: bundle.input_size,
                n_concepts: bundle.n_concepts(),
                ..config.backbone
            },
            bundle.normalization.clone(),
            config.distance,
            config.seed,
        )
        .unwrap();
        let mut trained = trained;
        let mut trained_flat = Vec::new();
        trained.visit_params(&mut |v, _| trained_flat.extend_from_slice(v));
        let mut init_flat = Vec::new();
        init.visit_params(&mut |v, _| init_flat.extend_from_slice(v));
        assert_eq!(trained_flat, init_flat);
    }

    #[test]
    fn training_is_deterministic_for_a_seed() {
        let bundle = tiny_bundle();
        let config = tiny_train_config();
        let aug = AugmentationConfig::default();
        let (_, log_a) = train_concept_learners(&bundle, &config, &aug).unwrap();
        let (_, log_b) = train_concept_learners(&bundle, &config, &aug).unwrap();
        assert_eq!(log_a.series(), log_b.series());
    }
}
