//! Binary containers for models and dataset bundles.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic            8 bytes  b"CSHOTAR1"
//! format_version   u32
//! section_count    u32
//! section*         name_len u16, name utf-8, payload_len u64, payload
//! checksum         u64      FNV-1a over everything before it
//! ```
//!
//! Tensor payloads are `ndim u32, dims u64*, values f64*`; metadata payloads
//! are JSON. Readers verify magic, version, and checksum; truncation or a
//! bad checksum yields a container error and no partial state.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

use crate::backbone::{BackboneConfig, BackboneParams, ConvBlock};
use crate::data::{
    AnnotatedImage, ConceptAnnotation, ConceptSpec, DatasetBundle, PixelNormalization,
};
use crate::detector::{ConceptDetector, DetectorParams, DetectorTrainConfig};
use crate::error::{Error, Result};
use crate::metric::DistanceKind;
use crate::nn::{BatchNorm2d, Conv2d, Linear};
use crate::util::fnv1a64;

const MAGIC: &[u8; 8] = b"CSHOTAR1";
pub const ARCHIVE_FORMAT_VERSION: u32 = 1;
pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const BUNDLE_FORMAT_VERSION: u32 = 1;

/// Ordered named sections; the generic layer under both container kinds.
#[derive(Debug, Default)]
pub struct Archive {
    sections: Vec<(String, Vec<u8>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Container(format!(
                "truncated container: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Archive {
    pub fn new() -> Self {
        Archive::default()
    }

    pub fn put_bytes(&mut self, name: &str, payload: Vec<u8>) {
        self.sections.push((name.to_string(), payload));
    }

    pub fn put_json<T: Serialize>(&mut self, name: &str, value: &T) {
        let text = serde_json::to_string(value).expect("metadata serializes");
        self.put_bytes(name, text.into_bytes());
    }

    pub fn put_tensor(&mut self, name: &str, dims: &[usize], values: &[f64]) {
        debug_assert_eq!(dims.iter().product::<usize>(), values.len());
        let mut payload = Vec::with_capacity(4 + dims.len() * 8 + values.len() * 8);
        payload.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            payload.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        self.put_bytes(name, payload);
    }

    pub fn has(&self, name: &str) -> bool {
        self.sections.iter().any(|(n, _)| n == name)
    }

    pub fn get_bytes(&self, name: &str) -> Result<&[u8]> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p.as_slice())
            .ok_or_else(|| Error::Container(format!("missing section '{name}'")))
    }

    pub fn get_json<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T> {
        let bytes = self.get_bytes(name)?;
        serde_json::from_slice(bytes)
            .map_err(|e| Error::Container(format!("bad metadata in '{name}': {e}")))
    }

    pub fn get_tensor(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let bytes = self.get_bytes(name)?;
        let mut r = Reader { buf: bytes, pos: 0 };
        let ndim = r.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u64()? as usize);
        }
        let count: usize = dims.iter().product();
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        if r.pos != bytes.len() {
            return Err(Error::Container(format!(
                "section '{name}': {} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok((dims, values))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&ARCHIVE_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, payload) in &self.sections {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
        }
        let checksum = fnv1a64(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 8 + 4 + 4 + 8 {
            return Err(Error::Container("container too short".into()));
        }
        let body_len = buf.len() - 8;
        let declared = u64::from_le_bytes(buf[body_len..].try_into().unwrap());
        let actual = fnv1a64(&buf[..body_len]);
        if declared != actual {
            return Err(Error::Container(
                "checksum mismatch: container is corrupt or truncated".into(),
            ));
        }
        let mut r = Reader {
            buf: &buf[..body_len],
            pos: 0,
        };
        if r.take(8)? != MAGIC {
            return Err(Error::Container("bad magic: not a model/bundle container".into()));
        }
        let version = r.u32()?;
        if version != ARCHIVE_FORMAT_VERSION {
            return Err(Error::Container(format!(
                "unsupported container version {version} (supported: {ARCHIVE_FORMAT_VERSION})"
            )));
        }
        let count = r.u32()? as usize;
        let mut sections = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Container("section name is not utf-8".into()))?
                .to_string();
            let payload_len = r.u64()? as usize;
            sections.push((name, r.take(payload_len)?.to_vec()));
        }
        if r.pos != body_len {
            return Err(Error::Container("trailing bytes after last section".into()));
        }
        Ok(Archive { sections })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Container(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

// ---------------------------------------------------------------------------
// model container
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    format: String,
    version: u32,
    backbone: BackboneConfig,
    normalization: PixelNormalization,
    distance: String,
    /// Normalization layer convention: biased batch variance, momentum 0.1.
    norm_convention: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectorMeta {
    version: u32,
    positive_class_weight: f64,
    config: DetectorTrainConfig,
    stubs: Vec<bool>,
    hidden_dim: usize,
}

/// A trained backbone with (optionally) its detectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelContainer {
    pub backbone: BackboneParams,
    pub detectors: Option<DetectorParams>,
}

fn put_conv_block(archive: &mut Archive, prefix: &str, block: &ConvBlock) {
    let (o, k) = block.conv.w.dim();
    archive.put_tensor(
        &format!("{prefix}.conv.w"),
        &[o, k],
        block.conv.w.as_slice().unwrap(),
    );
    archive.put_tensor(
        &format!("{prefix}.conv.b"),
        &[o],
        block.conv.b.as_slice().unwrap(),
    );
    for (field, values) in [
        ("bn.gamma", &block.bn.gamma),
        ("bn.beta", &block.bn.beta),
        ("bn.running_mean", &block.bn.running_mean),
        ("bn.running_var", &block.bn.running_var),
    ] {
        archive.put_tensor(
            &format!("{prefix}.{field}"),
            &[values.len()],
            values.as_slice().unwrap(),
        );
    }
}

fn get_conv_block(
    archive: &Archive,
    prefix: &str,
    in_channels: usize,
    out_channels: usize,
) -> Result<ConvBlock> {
    let (dims, w) = archive.get_tensor(&format!("{prefix}.conv.w"))?;
    if dims != vec![out_channels, in_channels * 9] {
        return Err(Error::Container(format!(
            "{prefix}.conv.w has dims {dims:?}, expected [{out_channels}, {}]",
            in_channels * 9
        )));
    }
    let (_, b) = archive.get_tensor(&format!("{prefix}.conv.b"))?;
    let conv = Conv2d {
        in_channels,
        out_channels,
        w: Array2::from_shape_vec((out_channels, in_channels * 9), w).unwrap(),
        b: Array1::from_vec(b),
        gw: Array2::zeros((out_channels, in_channels * 9)),
        gb: Array1::zeros(out_channels),
    };
    let mut bn = BatchNorm2d::new(out_channels);
    let (_, gamma) = archive.get_tensor(&format!("{prefix}.bn.gamma"))?;
    let (_, beta) = archive.get_tensor(&format!("{prefix}.bn.beta"))?;
    let (_, rm) = archive.get_tensor(&format!("{prefix}.bn.running_mean"))?;
    let (_, rv) = archive.get_tensor(&format!("{prefix}.bn.running_var"))?;
    for (target, values) in [
        (&mut bn.gamma, gamma),
        (&mut bn.beta, beta),
        (&mut bn.running_mean, rm),
        (&mut bn.running_var, rv),
    ] {
        if values.len() != out_channels {
            return Err(Error::Container(format!(
                "{prefix}: normalization vector of length {}, expected {out_channels}",
                values.len()
            )));
        }
        *target = Array1::from_vec(values);
    }
    Ok(ConvBlock { conv, bn })
}

fn put_linear(archive: &mut Archive, prefix: &str, lin: &Linear) {
    archive.put_tensor(
        &format!("{prefix}.w"),
        &[lin.out_features, lin.in_features],
        lin.w.as_slice().unwrap(),
    );
    archive.put_tensor(
        &format!("{prefix}.b"),
        &[lin.out_features],
        lin.b.as_slice().unwrap(),
    );
}

fn get_linear(archive: &Archive, prefix: &str) -> Result<Linear> {
    let (dims, w) = archive.get_tensor(&format!("{prefix}.w"))?;
    if dims.len() != 2 {
        return Err(Error::Container(format!("{prefix}.w is not a matrix")));
    }
    let (out_features, in_features) = (dims[0], dims[1]);
    let (_, b) = archive.get_tensor(&format!("{prefix}.b"))?;
    Ok(Linear {
        in_features,
        out_features,
        w: Array2::from_shape_vec((out_features, in_features), w).unwrap(),
        b: Array1::from_vec(b),
        gw: Array2::zeros((out_features, in_features)),
        gb: Array1::zeros(out_features),
    })
}

pub fn model_to_bytes(model: &ModelContainer) -> Vec<u8> {
    let mut archive = Archive::new();
    let backbone = &model.backbone;
    archive.put_json(
        "model.meta",
        &ModelMeta {
            format: "conceptshot-model".into(),
            version: MODEL_FORMAT_VERSION,
            backbone: backbone.config,
            normalization: backbone.normalization.clone(),
            distance: backbone.distance.name().into(),
            norm_convention: "batchnorm-biased-var-momentum-0.1".into(),
        },
    );
    for (i, block) in backbone.trunk.iter().enumerate() {
        put_conv_block(&mut archive, &format!("trunk.{i}"), block);
    }
    for (j, head) in backbone.heads.iter().enumerate() {
        for (i, block) in head.iter().enumerate() {
            put_conv_block(&mut archive, &format!("head.{j}.{i}"), block);
        }
    }
    if let Some(detectors) = &model.detectors {
        archive.put_json(
            "detectors.meta",
            &DetectorMeta {
                version: MODEL_FORMAT_VERSION,
                positive_class_weight: detectors.positive_class_weight,
                config: detectors.config,
                stubs: detectors.detectors.iter().map(|d| d.stub).collect(),
                hidden_dim: detectors.config.hidden_dim,
            },
        );
        for (j, det) in detectors.detectors.iter().enumerate() {
            put_linear(&mut archive, &format!("detector.{j}.lin1"), &det.lin1);
            put_linear(&mut archive, &format!("detector.{j}.lin2"), &det.lin2);
            archive.put_tensor(
                &format!("detector.{j}.input_mean"),
                &[det.input_mean.len()],
                det.input_mean.as_slice().unwrap(),
            );
            archive.put_tensor(
                &format!("detector.{j}.input_std"),
                &[det.input_std.len()],
                det.input_std.as_slice().unwrap(),
            );
        }
    }
    archive.to_bytes()
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelContainer> {
    let archive = Archive::from_bytes(bytes)?;
    let meta: ModelMeta = archive.get_json("model.meta")?;
    if meta.format != "conceptshot-model" {
        return Err(Error::Container(format!(
            "container holds '{}', not a model",
            meta.format
        )));
    }
    if meta.version != MODEL_FORMAT_VERSION {
        return Err(Error::Container(format!(
            "model format version {} unsupported (supported: {MODEL_FORMAT_VERSION})",
            meta.version
        )));
    }
    let config = meta.backbone;
    config.validate()?;
    let mut trunk = Vec::with_capacity(config.n_blocks_shared);
    let mut in_c = 3;
    for i in 0..config.n_blocks_shared {
        trunk.push(get_conv_block(
            &archive,
            &format!("trunk.{i}"),
            in_c,
            config.channels,
        )?);
        in_c = config.channels;
    }
    let mut heads = Vec::with_capacity(config.n_concepts);
    for j in 0..config.n_concepts {
        let mut head = Vec::with_capacity(config.n_blocks_head);
        for i in 0..config.n_blocks_head {
            head.push(get_conv_block(
                &archive,
                &format!("head.{j}.{i}"),
                config.channels,
                config.channels,
            )?);
        }
        heads.push(head);
    }
    let backbone = BackboneParams {
        config,
        trunk,
        heads,
        normalization: meta.normalization,
        distance: DistanceKind::from_name(&meta.distance)?,
    };

    let detectors = if archive.has("detectors.meta") {
        let dmeta: DetectorMeta = archive.get_json("detectors.meta")?;
        let mut detectors = Vec::with_capacity(config.n_concepts);
        for j in 0..config.n_concepts {
            let lin1 = get_linear(&archive, &format!("detector.{j}.lin1"))?;
            let lin2 = get_linear(&archive, &format!("detector.{j}.lin2"))?;
            let (_, mean) = archive.get_tensor(&format!("detector.{j}.input_mean"))?;
            let (_, std) = archive.get_tensor(&format!("detector.{j}.input_std"))?;
            detectors.push(ConceptDetector {
                lin1,
                lin2,
                input_mean: Array1::from_vec(mean),
                input_std: Array1::from_vec(std),
                stub: dmeta.stubs.get(j).copied().unwrap_or(false),
            });
        }
        Some(DetectorParams {
            detectors,
            positive_class_weight: dmeta.positive_class_weight,
            config: dmeta.config,
        })
    } else {
        None
    };

    Ok(ModelContainer {
        backbone,
        detectors,
    })
}

pub fn save_model(path: &Path, model: &ModelContainer) -> Result<()> {
    std::fs::write(path, model_to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelContainer> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Container(format!("cannot read {}: {e}", path.display())))?;
    model_from_bytes(&bytes)
}

// ---------------------------------------------------------------------------
// bundle container
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct BundleMeta {
    format: String,
    version: u32,
    concept_specs: Vec<ConceptSpec>,
    class_names: BTreeMap<u32, String>,
    normalization: PixelNormalization,
    concept_id_map: BTreeMap<u32, usize>,
    input_size: usize,
    split_sizes: [usize; 3],
}

fn put_images(buf: &mut Vec<u8>, images: &[AnnotatedImage]) {
    for im in images {
        buf.extend_from_slice(&im.id.to_le_bytes());
        buf.extend_from_slice(&im.class_label.to_le_bytes());
        let (_, h, w) = im.pixels.dim();
        buf.extend_from_slice(&(h as u32).to_le_bytes());
        buf.extend_from_slice(&(w as u32).to_le_bytes());
        buf.extend_from_slice(&(im.annotations.len() as u16).to_le_bytes());
        for ann in &im.annotations {
            buf.extend_from_slice(&(ann.concept_id as u32).to_le_bytes());
            buf.extend_from_slice(&ann.x.to_le_bytes());
            buf.extend_from_slice(&ann.y.to_le_bytes());
            buf.push(ann.visible as u8);
        }
        for v in im.pixels.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn get_images(r: &mut Reader, count: usize) -> Result<Vec<AnnotatedImage>> {
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.u64()?;
        let class_label = r.u32()?;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let n_ann = r.u16()? as usize;
        let mut annotations = Vec::with_capacity(n_ann);
        for _ in 0..n_ann {
            let concept_id = r.u32()? as usize;
            let x = r.u32()?;
            let y = r.u32()?;
            let visible = r.take(1)?[0] != 0;
            annotations.push(ConceptAnnotation {
                concept_id,
                x,
                y,
                visible,
            });
        }
        let mut values = Vec::with_capacity(3 * h * w);
        for _ in 0..3 * h * w {
            values.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        images.push(AnnotatedImage {
            id,
            pixels: Array3::from_shape_vec((3, h, w), values).unwrap(),
            class_label,
            annotations,
        });
    }
    Ok(images)
}

pub fn bundle_to_bytes(bundle: &DatasetBundle) -> Vec<u8> {
    let mut archive = Archive::new();
    archive.put_json(
        "bundle.meta",
        &BundleMeta {
            format: "conceptshot-bundle".into(),
            version: BUNDLE_FORMAT_VERSION,
            concept_specs: bundle.concept_specs.clone(),
            class_names: bundle.class_names.clone(),
            normalization: bundle.normalization.clone(),
            concept_id_map: bundle.concept_id_map.clone(),
            input_size: bundle.input_size,
            split_sizes: [
                bundle.base_split.len(),
                bundle.val_split.len(),
                bundle.novel_split.len(),
            ],
        },
    );
    let mut images = Vec::new();
    put_images(&mut images, &bundle.base_split);
    put_images(&mut images, &bundle.val_split);
    put_images(&mut images, &bundle.novel_split);
    archive.put_bytes("images", images);
    archive.to_bytes()
}

pub fn bundle_from_bytes(bytes: &[u8]) -> Result<DatasetBundle> {
    let archive = Archive::from_bytes(bytes)?;
    let meta: BundleMeta = archive.get_json("bundle.meta")?;
    if meta.format != "conceptshot-bundle" {
        return Err(Error::Container(format!(
            "container holds '{}', not a bundle",
            meta.format
        )));
    }
    if meta.version != BUNDLE_FORMAT_VERSION {
        return Err(Error::Container(format!(
            "bundle format version {} unsupported (supported: {BUNDLE_FORMAT_VERSION})",
            meta.version
        )));
    }
    let images = archive.get_bytes("images")?;
    let mut r = Reader {
        buf: images,
        pos: 0,
    };
    let base_split = get_images(&mut r, meta.split_sizes[0])?;
    let val_split = get_images(&mut r, meta.split_sizes[1])?;
    let novel_split = get_images(&mut r, meta.split_sizes[2])?;
    if r.pos != images.len() {
        return Err(Error::Container("trailing bytes after images".into()));
    }
    Ok(DatasetBundle {
        concept_specs: meta.concept_specs,
        base_split,
        val_split,
        novel_split,
        class_names: meta.class_names,
        normalization: meta.normalization,
        concept_id_map: meta.concept_id_map,
        input_size: meta.input_size,
    })
}

pub fn save_bundle(path: &Path, bundle: &DatasetBundle) -> Result<()> {
    std::fs::write(path, bundle_to_bytes(bundle))?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<DatasetBundle> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Container(format!("cannot read {}: {e}", path.display())))?;
    bundle_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SyntheticConfig};
    use crate::detector::train_detectors;

    fn sample_model() -> ModelContainer {
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
            17,
        )
        .unwrap();
        let cfg = SyntheticConfig {
            image_size: 16,
            grid_size: 2,
            n_concepts: 2,
            n_base_classes: 2,
            n_val_classes: 1,
            n_novel_classes: 1,
            images_per_class: 3,
            ..Default::default()
        };
        let bundle = generate_synthetic_dataset(&cfg, 23).unwrap();
        let (detectors, _) = train_detectors(
            &bundle,
            &backbone,
            &crate::detector::DetectorTrainConfig {
                epochs: 1,
                ..Default::default()
            },
        )
        .unwrap();
        ModelContainer {
            backbone,
            detectors: Some(detectors),
        }
    }

    #[test]
    fn model_roundtrips_bit_exactly() {
        let model = sample_model();
        let bytes = model_to_bytes(&model);
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(back, model);
        // serialization itself is deterministic
        assert_eq!(model_to_bytes(&back), bytes);
    }

    #[test]
    fn truncated_model_is_a_container_error() {
        let bytes = model_to_bytes(&sample_model());
        for cut in [bytes.len() - 1, bytes.len() / 2, 10] {
            let err = model_from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Container(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn flipped_byte_is_detected() {
        let mut bytes = model_to_bytes(&sample_model());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        assert!(model_from_bytes(&bytes).is_err());
    }

    #[test]
    fn missing_detector_section_loads_backbone_only() {
        let mut model = sample_model();
        model.detectors = None;
        let bytes = model_to_bytes(&model);
        let back = model_from_bytes(&bytes).unwrap();
        assert!(back.detectors.is_none());
        assert_eq!(back.backbone, model.backbone);
    }

    #[test]
    fn wrong_magic_and_version_are_rejected() {
        let bytes = model_to_bytes(&sample_model());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        // checksum still matches? no: checksum covers magic, so recompute
        let body = bad_magic.len() - 8;
        let sum = fnv1a64(&bad_magic[..body]);
        bad_magic[body..].copy_from_slice(&sum.to_le_bytes());
        let err = model_from_bytes(&bad_magic).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn bundle_roundtrips_bit_exactly() {
        let cfg = SyntheticConfig {
            image_size: 12,
            grid_size: 3,
            n_concepts: 2,
            n_base_classes: 2,
            n_val_classes: 1,
            n_novel_classes: 2,
            images_per_class: 2,
            drop_fraction: 0.4,
            ..Default::default()
        };
        let bundle = generate_synthetic_dataset(&cfg, 31).unwrap();
        let bytes = bundle_to_bytes(&bundle);
        let back = bundle_from_bytes(&bytes).unwrap();
        assert_eq!(back, bundle);
        assert_eq!(bundle_to_bytes(&back), bytes);
    }
}
