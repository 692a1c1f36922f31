//! Concept learners: a shared convolutional trunk composed with per-concept
//! heads, plus extraction of concept embeddings from the final feature map.

use ndarray::{Array1, Array3, Array4};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::data::{AnnotatedImage, ConceptAnnotation, PixelNormalization};
use crate::error::{Error, Result};
use crate::metric::DistanceKind;
use crate::nn::{relu, relu_backward, BatchNorm2d, BnCache, Conv2d, MaxPool2, Parameterized, PoolCache};
use crate::util::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_size: usize,
    pub n_blocks_shared: usize,
    pub n_blocks_head: usize,
    pub channels: usize,
    pub n_concepts: usize,
}

impl Default for BackboneConfig {
    /// Conv-4 at 84x84: three shared blocks and one per-concept head block.
    fn default() -> Self {
        BackboneConfig {
            input_size: 84,
            n_blocks_shared: 3,
            n_blocks_head: 1,
            channels: 64,
            n_concepts: 15,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 1 {
            return Err(Error::Config("channels must be >= 1".into()));
        }
        if self.n_concepts < 1 {
            return Err(Error::Config("n_concepts must be >= 1".into()));
        }
        if self.n_blocks_shared < 1 || self.n_blocks_head < 1 {
            return Err(Error::Config("need at least one shared and one head block".into()));
        }
        if self.feature_map_size() == 0 {
            return Err(Error::Config(format!(
                "input size {} collapses to an empty feature map after {} poolings",
                self.input_size,
                self.n_blocks_shared + self.n_blocks_head
            )));
        }
        Ok(())
    }

    /// Spatial edge of the final feature map (each block halves, flooring).
    pub fn feature_map_size(&self) -> usize {
        let mut s = self.input_size;
        for _ in 0..self.n_blocks_shared + self.n_blocks_head {
            s /= 2;
        }
        s
    }
}

/// conv 3x3 (pad 1) -> batch norm -> rectifier -> 2x2 max pool
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

/// Intermediate activations one block needs for its backward pass.
pub struct BlockCache {
    x_in: Array4<f64>,
    bn: BnCache,
    relu_out: Array4<f64>,
    pool: PoolCache,
}

impl ConvBlock {
    fn new(in_channels: usize, out_channels: usize, rng: &mut impl rand::Rng) -> Self {
        ConvBlock {
            conv: Conv2d::new(in_channels, out_channels, rng),
            bn: BatchNorm2d::new(out_channels),
        }
    }

    pub fn forward_train(&mut self, x: &Array4<f64>) -> (Array4<f64>, BlockCache) {
        let conv_out = self.conv.forward(x);
        let (bn_out, bn_cache) = self.bn.forward_train(&conv_out);
        let relu_out = relu(&bn_out);
        let (pooled, pool_cache) = MaxPool2::forward(&relu_out);
        (
            pooled,
            BlockCache {
                x_in: x.clone(),
                bn: bn_cache,
                relu_out,
                pool: pool_cache,
            },
        )
    }

    pub fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let conv_out = self.conv.forward(x);
        let bn_out = self.bn.forward_eval(&conv_out);
        let (pooled, _) = MaxPool2::forward(&relu(&bn_out));
        pooled
    }

    pub fn backward(&mut self, cache: &BlockCache, dy: &Array4<f64>) -> Array4<f64> {
        let d_relu = MaxPool2::backward(&cache.pool, dy);
        let d_bn = relu_backward(&cache.relu_out, &d_relu);
        let d_conv = self.bn.backward(&cache.bn, &d_bn);
        self.conv.backward(&cache.x_in, &d_conv)
    }
}

impl Parameterized for ConvBlock {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.conv.visit_params(f);
        self.bn.visit_params(f);
    }
}

/// Final feature map for one concept, stored `[height, width, channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Array3<f64>,
    pub concept_id: usize,
}

impl FeatureMap {
    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn channels(&self) -> usize {
        self.values.dim().2
    }

    pub fn cell_vector(&self, row: usize, col: usize) -> Array1<f64> {
        self.values
            .slice(ndarray::s![row, col, ..])
            .to_owned()
    }

    /// Convert one batch item of an NCHW tensor into HWC form.
    pub fn from_nchw(batch: &Array4<f64>, item: usize, concept_id: usize) -> FeatureMap {
        let (_, c, h, w) = batch.dim();
        let mut values = Array3::<f64>::zeros((h, w, c));
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    values[[y, x, ch]] = batch[[item, ch, y, x]];
                }
            }
        }
        FeatureMap { values, concept_id }
    }
}

/// How a concept embedding was extracted from the feature map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EmbeddingSource {
    /// Picked at the annotated center cell.
    Picked,
    /// Global average pool fallback for a missing concept.
    Gap,
    /// Selected by the concept detector, with its presence probability.
    Detected { probability: f64 },
}

/// A length-c embedding for one concept of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptEmbedding {
    pub vector: Array1<f64>,
    pub concept_id: usize,
    pub source: EmbeddingSource,
}

impl ConceptEmbedding {
    pub fn detector_probability(&self) -> Option<f64> {
        match self.source {
            EmbeddingSource::Detected { probability } => Some(probability),
            _ => None,
        }
    }
}

/// Map an image-space coordinate to its final feature map cell:
/// `floor(coord * map_size / image_size)`, clamped into the map.
pub fn map_image_coords_to_cell(
    x: u32,
    y: u32,
    image_size: usize,
    map_size: usize,
) -> Result<(usize, usize)> {
    if (x as usize) >= image_size || (y as usize) >= image_size {
        return Err(Error::Bounds(format!(
            "coordinate ({x}, {y}) outside image of size {image_size}"
        )));
    }
    let row = ((y as usize * map_size) / image_size).min(map_size - 1);
    let col = ((x as usize * map_size) / image_size).min(map_size - 1);
    Ok((row, col))
}

/// The embedding vector at one cell of the feature map.
pub fn pick_concept_embedding(fmap: &FeatureMap, cell: (usize, usize)) -> Result<ConceptEmbedding> {
    let (row, col) = cell;
    if row >= fmap.height() || col >= fmap.width() {
        return Err(Error::Bounds(format!(
            "cell ({row}, {col}) outside {}x{} feature map",
            fmap.height(),
            fmap.width()
        )));
    }
    Ok(ConceptEmbedding {
        vector: fmap.cell_vector(row, col),
        concept_id: fmap.concept_id,
        source: EmbeddingSource::Picked,
    })
}

/// Mean over all spatial positions of the feature map.
pub fn gap_embedding(fmap: &FeatureMap) -> ConceptEmbedding {
    let (h, w, c) = fmap.values.dim();
    let mut vector = Array1::<f64>::zeros(c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                vector[ch] += fmap.values[[y, x, ch]];
            }
        }
    }
    vector /= (h * w) as f64;
    ConceptEmbedding {
        vector,
        concept_id: fmap.concept_id,
        source: EmbeddingSource::Gap,
    }
}

/// The full set of concept learners: shared trunk, per-concept heads, and the
/// metadata a checkpoint must carry (config, pixel normalization, distance).
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub trunk: Vec<ConvBlock>,
    pub heads: Vec<Vec<ConvBlock>>,
    pub normalization: PixelNormalization,
    pub distance: DistanceKind,
}

impl BackboneParams {
    pub fn new(
        config: BackboneConfig,
        normalization: PixelNormalization,
        distance: DistanceKind,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "backbone-init", 0);
        let mut trunk = Vec::with_capacity(config.n_blocks_shared);
        let mut in_c = 3;
        for _ in 0..config.n_blocks_shared {
            trunk.push(ConvBlock::new(in_c, config.channels, &mut rng));
            in_c = config.channels;
        }
        let mut heads = Vec::with_capacity(config.n_concepts);
        for _ in 0..config.n_concepts {
            let mut head = Vec::with_capacity(config.n_blocks_head);
            for _ in 0..config.n_blocks_head {
                head.push(ConvBlock::new(config.channels, config.channels, &mut rng));
            }
            heads.push(head);
        }
        Ok(BackboneParams {
            config,
            trunk,
            heads,
            normalization,
            distance,
        })
    }

    pub fn n_concepts(&self) -> usize {
        self.heads.len()
    }

    /// Stack images into a normalized NCHW batch.
    pub fn normalize_batch(&self, images: &[&AnnotatedImage]) -> Result<Array4<f64>> {
        let s = self.config.input_size;
        let mut batch = Array4::<f64>::zeros((images.len(), 3, s, s));
        for (i, im) in images.iter().enumerate() {
            let (c, h, w) = im.pixels.dim();
            if c != 3 || h != s || w != s {
                return Err(Error::Shape(format!(
                    "image {} is {c}x{h}x{w}, backbone expects 3x{s}x{s}",
                    im.id
                )));
            }
            for ch in 0..3 {
                let mean = self.normalization.mean[ch];
                let std = self.normalization.std[ch];
                for y in 0..s {
                    for x in 0..s {
                        batch[[i, ch, y, x]] = (im.pixels[[ch, y, x]] - mean) / std;
                    }
                }
            }
        }
        Ok(batch)
    }

    pub fn trunk_forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let mut cur = x.clone();
        for block in &self.trunk {
            cur = block.forward_eval(&cur);
        }
        cur
    }

    pub fn head_forward_eval(&self, trunk_out: &Array4<f64>, concept_id: usize) -> Result<Array4<f64>> {
        let head = self.heads.get(concept_id).ok_or_else(|| {
            Error::Bounds(format!(
                "concept {concept_id} out of range (N = {})",
                self.heads.len()
            ))
        })?;
        let mut cur = trunk_out.clone();
        for block in head {
            cur = block.forward_eval(&cur);
        }
        Ok(cur)
    }

    /// Eval-mode feature map of one image through one concept learner.
    pub fn forward_feature_map(
        &self,
        image: &AnnotatedImage,
        concept_id: usize,
    ) -> Result<FeatureMap> {
        if concept_id >= self.heads.len() {
            return Err(Error::Bounds(format!(
                "concept {concept_id} out of range (N = {})",
                self.heads.len()
            )));
        }
        let batch = self.normalize_batch(&[image])?;
        let trunk_out = self.trunk_forward_eval(&batch);
        let head_out = self.head_forward_eval(&trunk_out, concept_id)?;
        Ok(FeatureMap::from_nchw(&head_out, 0, concept_id))
    }

    /// Extract one concept's embedding given its (possibly absent) annotation:
    /// picked at the mapped cell when visible, GAP fallback otherwise.
    pub fn extract_annotated(
        &self,
        fmap: &FeatureMap,
        annotation: Option<&ConceptAnnotation>,
    ) -> Result<ConceptEmbedding> {
        match annotation {
            Some(ann) if ann.visible => {
                let cell = map_image_coords_to_cell(
                    ann.x,
                    ann.y,
                    self.config.input_size,
                    fmap.height(),
                )?;
                pick_concept_embedding(fmap, cell)
            }
            _ => Ok(gap_embedding(fmap)),
        }
    }

    /// All concept embeddings of one annotated image (eval mode).
    pub fn embed_concepts_annotated(
        &self,
        image: &AnnotatedImage,
    ) -> Result<BTreeMap<usize, ConceptEmbedding>> {
        let batch = self.normalize_batch(&[image])?;
        let trunk_out = self.trunk_forward_eval(&batch);
        let mut out = BTreeMap::new();
        for j in 0..self.n_concepts() {
            let head_out = self.head_forward_eval(&trunk_out, j)?;
            let fmap = FeatureMap::from_nchw(&head_out, 0, j);
            let emb = self.extract_annotated(&fmap, image.annotation_for(j))?;
            out.insert(j, emb);
        }
        Ok(out)
    }

    /// Annotated embeddings for a whole batch of images (eval mode), shaped
    /// `[image][concept]`.
    pub fn embed_batch_annotated(
        &self,
        images: &[&AnnotatedImage],
    ) -> Result<Vec<Vec<ConceptEmbedding>>> {
        let batch = self.normalize_batch(images)?;
        let trunk_out = self.trunk_forward_eval(&batch);
        let mut out = vec![Vec::with_capacity(self.n_concepts()); images.len()];
        for j in 0..self.n_concepts() {
            let head_out = self.head_forward_eval(&trunk_out, j)?;
            for (i, im) in images.iter().enumerate() {
                let fmap = FeatureMap::from_nchw(&head_out, i, j);
                out[i].push(self.extract_annotated(&fmap, im.annotation_for(j))?);
            }
        }
        Ok(out)
    }
}

impl Parameterized for BackboneParams {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        for block in &mut self.trunk {
            block.visit_params(f);
        }
        for head in &mut self.heads {
            for block in head {
                block.visit_params(f);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SyntheticConfig};

    fn tiny_backbone(n_concepts: usize) -> BackboneParams {
        let config = BackboneConfig {
            input_size: 16,
            n_blocks_shared: 2,
            n_blocks_head: 1,
            channels: 4,
            n_concepts,
        };
        BackboneParams::new(config, PixelNormalization::default(), DistanceKind::Euclidean, 5)
            .unwrap()
    }

    fn test_image(size: usize) -> AnnotatedImage {
        let cfg = SyntheticConfig {
            image_size: size,
            grid_size: 2,
            n_concepts: 2,
            n_base_classes: 1,
            n_val_classes: 1,
            n_novel_classes: 1,
            images_per_class: 1,
            ..Default::default()
        };
        generate_synthetic_dataset(&cfg, 1).unwrap().base_split[0].clone()
    }

    #[test]
    fn conv4_default_produces_5x5x64() {
        let config = BackboneConfig::default();
        assert_eq!(config.feature_map_size(), 5);
        let params = BackboneParams::new(
            config,
            PixelNormalization::default(),
            DistanceKind::Euclidean,
            0,
        )
        .unwrap();
        let cfg = SyntheticConfig {
            image_size: 84,
            grid_size: 3,
            n_concepts: 3,
            n_base_classes: 1,
            n_val_classes: 1,
            n_novel_classes: 1,
            images_per_class: 1,
            ..Default::default()
        };
        let im = generate_synthetic_dataset(&cfg, 2).unwrap().base_split[0].clone();
        let fmap = params.forward_feature_map(&im, 0).unwrap();
        assert_eq!(fmap.values.dim(), (5, 5, 64));
    }

    #[test]
    fn coordinate_mapping_matches_floor_scaling() {
        assert_eq!(map_image_coords_to_cell(42, 42, 84, 5).unwrap(), (2, 2));
        assert_eq!(map_image_coords_to_cell(0, 0, 84, 5).unwrap(), (0, 0));
        assert_eq!(map_image_coords_to_cell(83, 83, 84, 5).unwrap(), (4, 4));
        assert!(map_image_coords_to_cell(84, 0, 84, 5).is_err());
    }

    #[test]
    fn pick_and_gap_follow_definitions() {
        let mut values = Array3::<f64>::zeros((2, 1, 1));
        values[[0, 0, 0]] = 1.0;
        values[[1, 0, 0]] = 3.0;
        let fmap = FeatureMap { values, concept_id: 0 };
        let gap = gap_embedding(&fmap);
        assert!((gap.vector[0] - 2.0).abs() < 1e-12);
        assert_eq!(gap.source, EmbeddingSource::Gap);

        let picked = pick_concept_embedding(&fmap, (1, 0)).unwrap();
        assert_eq!(picked.vector[0], 3.0);
        assert_eq!(picked.source, EmbeddingSource::Picked);
        assert!(pick_concept_embedding(&fmap, (2, 0)).is_err());

        // GAP of a 1x1 map equals pick at its only cell
        let one = FeatureMap {
            values: Array3::from_elem((1, 1, 3), 0.7),
            concept_id: 1,
        };
        assert_eq!(
            gap_embedding(&one).vector,
            pick_concept_embedding(&one, (0, 0)).unwrap().vector
        );
    }

    #[test]
    fn head_isolation_and_trunk_sharing() {
        let mut params = tiny_backbone(3);
        let im = test_image(16);
        let batch = params.normalize_batch(&[&im]).unwrap();
        let trunk_out = params.trunk_forward_eval(&batch);
        let before: Vec<Array4<f64>> = (0..3)
            .map(|j| params.head_forward_eval(&trunk_out, j).unwrap())
            .collect();

        // perturb head 1 only (beta shift moves every output cell)
        params.heads[1][0].bn.beta += 1.0;
        let trunk_out2 = params.trunk_forward_eval(&batch);
        assert_eq!(trunk_out, trunk_out2);
        for j in 0..3 {
            let after = params.head_forward_eval(&trunk_out2, j).unwrap();
            if j == 1 {
                assert_ne!(before[j], after);
            } else {
                assert_eq!(before[j], after, "head {j} affected by head 1");
            }
        }

        // perturbing the trunk changes every concept's output
        params.trunk[0].bn.beta += 1.0;
        let trunk_out3 = params.trunk_forward_eval(&batch);
        for j in 0..3 {
            let after = params.head_forward_eval(&trunk_out3, j).unwrap();
            assert_ne!(before[j], after, "concept {j} unaffected by trunk change");
        }
    }

    #[test]
    fn zeroed_head_outputs_zero() {
        let mut params = tiny_backbone(2);
        let head = &mut params.heads[0][0];
        head.conv.w.fill(0.0);
        head.conv.b.fill(0.0);
        head.bn.gamma.fill(0.0);
        head.bn.beta.fill(0.0);
        // with gamma = beta = 0 the block output is 0 whatever the stats
        let im = test_image(16);
        let fmap = params.forward_feature_map(&im, 0).unwrap();
        assert!(fmap.values.iter().all(|&v| v == 0.0));
        let other = params.forward_feature_map(&im, 1).unwrap();
        assert!(other.values.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn forward_is_pure() {
        let params = tiny_backbone(2);
        let im = test_image(16);
        let a = params.forward_feature_map(&im, 0).unwrap();
        let b = params.forward_feature_map(&im, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn embeddings_have_channel_length_and_sources() {
        let params = tiny_backbone(2);
        let mut im = test_image(16);
        // make concept 1 invisible
        for ann in &mut im.annotations {
            if ann.concept_id == 1 {
                ann.visible = false;
            }
        }
        let embs = params.embed_concepts_annotated(&im).unwrap();
        assert_eq!(embs.len(), 2);
        assert_eq!(embs[&0].vector.len(), 4);
        assert_eq!(embs[&0].source, EmbeddingSource::Picked);
        assert_eq!(embs[&1].source, EmbeddingSource::Gap);
        assert_eq!(embs[&0].detector_probability(), None);
    }

    #[test]
    fn fifteen_concepts_give_fifteen_entries() {
        let config = BackboneConfig {
            input_size: 16,
            n_blocks_shared: 2,
            n_blocks_head: 1,
            channels: 2,
            n_concepts: 15,
        };
        let params = BackboneParams::new(
            config,
            PixelNormalization::default(),
            DistanceKind::Euclidean,
            8,
        )
        .unwrap();
        let im = test_image(16);
        let embs = params.embed_concepts_annotated(&im).unwrap();
        assert_eq!(embs.len(), 15);
    }

    #[test]
    fn locality_bright_patch_maps_to_strongest_cell() {
        // black image with one bright patch; on an untrained net the mapped
        // cell must carry the largest activation norm
        let config = BackboneConfig {
            input_size: 32,
            n_blocks_shared: 2,
            n_blocks_head: 1,
            channels: 8,
            n_concepts: 1,
        };
        let params = BackboneParams::new(
            config,
            PixelNormalization {
                mean: [0.0; 3],
                std: [1.0; 3],
            },
            DistanceKind::Euclidean,
            3,
        )
        .unwrap();
        let map_size = params.config.feature_map_size();
        assert_eq!(map_size, 4);

        let mut pixels = Array3::<f64>::zeros((3, 32, 32));
        // patch centered at (ypix, xpix) = (26, 10)
        for y in 23..30 {
            for x in 7..14 {
                for c in 0..3 {
                    pixels[[c, y, x]] = 1.0;
                }
            }
        }
        let im = AnnotatedImage {
            id: 0,
            pixels,
            class_label: 0,
            annotations: vec![],
        };
        let fmap = params.forward_feature_map(&im, 0).unwrap();
        let expected = map_image_coords_to_cell(10, 26, 32, map_size).unwrap();
        let mut best = (0, 0);
        let mut best_norm = f64::NEG_INFINITY;
        for r in 0..map_size {
            for c in 0..map_size {
                let norm: f64 = fmap.cell_vector(r, c).iter().map(|v| v * v).sum();
                if norm > best_norm {
                    best_norm = norm;
                    best = (r, c);
                }
            }
        }
        assert_eq!(best, expected);
    }
}
