//! CUB-200-2011 ingestion: images, class labels, and part-location
//! annotations, resized to the configured input size.

use ndarray::Array3;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{
    compute_normalization, AnnotatedImage, ConceptAnnotation, ConceptSpec, DatasetBundle,
};
use crate::error::{Error, Result};

/// Class names assigned to each split. Class names are the image directory
/// names (e.g. `001.Black_footed_Albatross`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitConfig {
    pub base: Vec<String>,
    pub val: Vec<String>,
    pub novel: Vec<String>,
}

impl SplitConfig {
    /// Parse a split file: one class name per line under `[base]`, `[val]`,
    /// `[novel]` headers.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = SplitConfig {
            base: Vec::new(),
            val: Vec::new(),
            novel: Vec::new(),
        };
        let mut current: Option<&mut Vec<String>> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[base]" => current = Some(&mut cfg.base),
                "[val]" => current = Some(&mut cfg.val),
                "[novel]" => current = Some(&mut cfg.novel),
                name => match current {
                    Some(ref mut section) => section.push(name.to_string()),
                    None => {
                        return Err(Error::Config(format!(
                            "split file line {}: class name before any [base]/[val]/[novel] header",
                            lineno + 1
                        )))
                    }
                },
            }
        }
        Ok(cfg)
    }

    /// The 100/50/50 default: class names sorted, first 100 base, next 50
    /// val, remainder novel. CUB directory names sort by their class number.
    pub fn default_split(mut class_names: Vec<String>) -> Self {
        class_names.sort();
        let n = class_names.len();
        let base_end = (n / 2).min(n);
        let val_end = (base_end + n / 4).min(n);
        SplitConfig {
            base: class_names[..base_end].to_vec(),
            val: class_names[base_end..val_end].to_vec(),
            novel: class_names[val_end..].to_vec(),
        }
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Ingest(format!("missing or unreadable file {}: {e}", path.display())))
}

fn malformed(file: &Path, lineno: usize, what: &str) -> Error {
    Error::Ingest(format!(
        "{} line {}: {what}",
        file.display(),
        lineno + 1
    ))
}

struct PartRecord {
    part_id: u32,
    x: f64,
    y: f64,
    visible: bool,
}

/// Rescale a source coordinate to the target grid: proportional float
/// scaling, round to nearest, clamp into frame.
fn rescale_coord(v: f64, from: u32, to: usize) -> u32 {
    if from == 0 {
        return 0;
    }
    let scaled = (v * to as f64 / from as f64).round();
    scaled.clamp(0.0, to as f64 - 1.0) as u32
}

/// Load a CUB-200-2011 tree. `input_size` is the square edge images are
/// resized to (bilinear); annotation coordinates are rescaled proportionally.
pub fn load_cub_dataset(
    root: &Path,
    split: &SplitConfig,
    input_size: usize,
) -> Result<DatasetBundle> {
    let images_txt = root.join("images.txt");
    let labels_txt = root.join("image_class_labels.txt");
    let parts_txt = root.join("parts/parts.txt");
    let part_locs_txt = root.join("parts/part_locs.txt");

    // images.txt: <image_id> <relative_path>
    let mut image_paths: BTreeMap<u64, PathBuf> = BTreeMap::new();
    let mut class_dirs: BTreeMap<u64, String> = BTreeMap::new();
    for (lineno, line) in read_to_string(&images_txt)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let id: u64 = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| malformed(&images_txt, lineno, "expected <image_id> <path>"))?;
        let rel = it
            .next()
            .ok_or_else(|| malformed(&images_txt, lineno, "missing image path"))?;
        let dir = rel
            .split('/')
            .next()
            .filter(|d| !d.is_empty())
            .ok_or_else(|| malformed(&images_txt, lineno, "image path has no class directory"))?;
        class_dirs.insert(id, dir.to_string());
        image_paths.insert(id, root.join("images").join(rel));
    }

    // image_class_labels.txt: <image_id> <class_id>
    let mut class_ids: BTreeMap<u64, u32> = BTreeMap::new();
    for (lineno, line) in read_to_string(&labels_txt)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |t: Option<&str>| t.and_then(|t| t.parse::<u64>().ok());
        match (parse(it.next()), parse(it.next())) {
            (Some(id), Some(cls)) => {
                class_ids.insert(id, cls as u32);
            }
            _ => return Err(malformed(&labels_txt, lineno, "expected <image_id> <class_id>")),
        }
    }

    // parts/parts.txt: <part_id> <part name...>  (1-based part ids)
    let mut concept_specs = Vec::new();
    let mut concept_id_map: BTreeMap<u32, usize> = BTreeMap::new();
    for (lineno, line) in read_to_string(&parts_txt)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id_tok, name) = line
            .trim()
            .split_once(' ')
            .ok_or_else(|| malformed(&parts_txt, lineno, "expected <part_id> <name>"))?;
        let part_id: u32 = id_tok
            .parse()
            .map_err(|_| malformed(&parts_txt, lineno, "bad part id"))?;
        let concept_id = concept_specs.len();
        concept_id_map.insert(part_id, concept_id);
        concept_specs.push(ConceptSpec {
            concept_id,
            name: name.trim().to_string(),
        });
    }
    if concept_specs.is_empty() {
        return Err(Error::Ingest(format!(
            "{}: no parts defined",
            parts_txt.display()
        )));
    }

    // parts/part_locs.txt: <image_id> <part_id> <x> <y> <visible>
    let mut part_locs: BTreeMap<u64, Vec<PartRecord>> = BTreeMap::new();
    for (lineno, line) in read_to_string(&part_locs_txt)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 5 {
            return Err(malformed(
                &part_locs_txt,
                lineno,
                "expected <image_id> <part_id> <x> <y> <visible>",
            ));
        }
        let image_id: u64 = toks[0]
            .parse()
            .map_err(|_| malformed(&part_locs_txt, lineno, "bad image id"))?;
        let part_id: u32 = toks[1]
            .parse()
            .map_err(|_| malformed(&part_locs_txt, lineno, "bad part id"))?;
        let x: f64 = toks[2]
            .parse()
            .map_err(|_| malformed(&part_locs_txt, lineno, "bad x coordinate"))?;
        let y: f64 = toks[3]
            .parse()
            .map_err(|_| malformed(&part_locs_txt, lineno, "bad y coordinate"))?;
        let visible = match toks[4] {
            "0" => false,
            "1" => true,
            _ => return Err(malformed(&part_locs_txt, lineno, "visibility flag must be 0 or 1")),
        };
        if !concept_id_map.contains_key(&part_id) {
            return Err(malformed(&part_locs_txt, lineno, "part id not in parts.txt"));
        }
        part_locs
            .entry(image_id)
            .or_default()
            .push(PartRecord { part_id, x, y, visible });
    }

    // resolve split membership by class directory name
    let mut split_of: BTreeMap<&str, u8> = BTreeMap::new();
    for name in &split.base {
        split_of.insert(name.as_str(), 0);
    }
    for name in &split.val {
        split_of.insert(name.as_str(), 1);
    }
    for name in &split.novel {
        split_of.insert(name.as_str(), 2);
    }
    let known_dirs: std::collections::BTreeSet<&str> =
        class_dirs.values().map(|s| s.as_str()).collect();
    for name in split_of.keys() {
        if !known_dirs.contains(name) {
            return Err(Error::Ingest(format!(
                "split references unknown class '{name}'"
            )));
        }
    }

    let mut splits: [Vec<AnnotatedImage>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut class_names: BTreeMap<u32, String> = BTreeMap::new();
    for (&image_id, path) in &image_paths {
        let dir = &class_dirs[&image_id];
        let Some(&split_idx) = split_of.get(dir.as_str()) else {
            continue; // class not assigned to any split
        };
        let label = *class_ids.get(&image_id).ok_or_else(|| {
            Error::Ingest(format!("image {image_id} has no class label"))
        })?;
        class_names.insert(label, dir.clone());

        let img = image::open(path)
            .map_err(|e| Error::Ingest(format!("cannot decode {}: {e}", path.display())))?
            .to_rgb8();
        let (orig_w, orig_h) = img.dimensions();
        let resized = image::imageops::resize(
            &img,
            input_size as u32,
            input_size as u32,
            image::imageops::FilterType::Triangle,
        );
        let mut pixels = Array3::<f64>::zeros((3, input_size, input_size));
        for y in 0..input_size {
            for x in 0..input_size {
                let p = resized.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    pixels[[c, y, x]] = p.0[c] as f64 / 255.0;
                }
            }
        }

        let mut annotations: Vec<ConceptAnnotation> = part_locs
            .get(&image_id)
            .map(|records| {
                records
                    .iter()
                    .map(|r| ConceptAnnotation {
                        concept_id: concept_id_map[&r.part_id],
                        x: if r.visible {
                            rescale_coord(r.x, orig_w, input_size)
                        } else {
                            0
                        },
                        y: if r.visible {
                            rescale_coord(r.y, orig_h, input_size)
                        } else {
                            0
                        },
                        visible: r.visible,
                    })
                    .collect()
            })
            .unwrap_or_default();
        annotations.sort_by_key(|a| a.concept_id);

        splits[split_idx as usize].push(AnnotatedImage {
            id: image_id,
            pixels,
            class_label: label,
            annotations,
        });
    }

    let [base_split, val_split, novel_split] = splits;
    if base_split.is_empty() && val_split.is_empty() && novel_split.is_empty() {
        return Err(Error::Ingest("no images matched the split definition".into()));
    }
    let normalization = compute_normalization(&base_split);
    Ok(DatasetBundle {
        concept_specs,
        base_split,
        val_split,
        novel_split,
        class_names,
        normalization,
        concept_id_map,
        input_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    /// Build a miniature CUB-layout tree: 3 classes, 2 images each, 15 parts.
    fn write_fixture(root: &Path) {
        let classes = [
            "001.Test_Bird_A",
            "002.Test_Bird_B",
            "003.Test_Bird_C",
        ];
        fs::create_dir_all(root.join("parts")).unwrap();
        let mut images_txt = String::new();
        let mut labels_txt = String::new();
        let mut part_locs = String::new();
        let mut image_id = 1u64;
        for (ci, class) in classes.iter().enumerate() {
            let dir = root.join("images").join(class);
            fs::create_dir_all(&dir).unwrap();
            for k in 0..2 {
                let name = format!("img_{image_id}.png");
                // 40x20 so x and y rescale differently
                let img = image::RgbImage::from_fn(40, 20, |x, y| {
                    image::Rgb([
                        (x * 6) as u8,
                        (y * 12) as u8,
                        (ci * 80 + k * 10) as u8,
                    ])
                });
                img.save(dir.join(&name)).unwrap();
                images_txt.push_str(&format!("{image_id} {class}/{name}\n"));
                labels_txt.push_str(&format!("{image_id} {}\n", ci + 1));
                for part in 1..=15u32 {
                    // part 3 invisible everywhere; others at a spread of spots
                    if part == 3 {
                        part_locs.push_str(&format!("{image_id} {part} 0.0 0.0 0\n"));
                    } else {
                        let x = (part as f64 * 2.5) % 40.0;
                        let y = (part as f64 * 1.3) % 20.0;
                        part_locs.push_str(&format!("{image_id} {part} {x:.1} {y:.1} 1\n"));
                    }
                }
                image_id += 1;
            }
        }
        fs::write(root.join("images.txt"), images_txt).unwrap();
        fs::write(root.join("image_class_labels.txt"), labels_txt).unwrap();
        let parts: String = (1..=15)
            .map(|i| format!("{i} part_{i}\n"))
            .collect();
        fs::write(root.join("parts/parts.txt"), parts).unwrap();
        fs::write(root.join("parts/part_locs.txt"), part_locs).unwrap();
    }

    fn fixture_split() -> SplitConfig {
        SplitConfig {
            base: vec!["001.Test_Bird_A".into()],
            val: vec!["002.Test_Bird_B".into()],
            novel: vec!["003.Test_Bird_C".into()],
        }
    }

    #[test]
    fn loads_fixture_with_15_concepts() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path());
        let bundle = load_cub_dataset(tmp.path(), &fixture_split(), 84).unwrap();
        assert_eq!(bundle.n_concepts(), 15);
        assert_eq!(bundle.base_split.len(), 2);
        assert_eq!(bundle.val_split.len(), 2);
        assert_eq!(bundle.novel_split.len(), 2);
        assert_eq!(bundle.input_size, 84);
        // 1-based part ids map to 0-based concept ids
        assert_eq!(bundle.concept_id_map[&1], 0);
        assert_eq!(bundle.concept_id_map[&15], 14);
        let im = &bundle.base_split[0];
        assert_eq!(im.pixels.dim(), (3, 84, 84));
        // visibility flag 0 forces visible = false
        assert!(!im.annotation_for(2).unwrap().visible);
        assert!(im.annotation_for(0).unwrap().visible);
    }

    #[test]
    fn rescales_coordinates_proportionally() {
        // 420x280 image with part at (210, 140) -> (42, 42) at 84x84
        assert_eq!(rescale_coord(210.0, 420, 84), 42);
        assert_eq!(rescale_coord(140.0, 280, 84), 42);
        // idempotent at the target size
        assert_eq!(rescale_coord(37.0, 84, 84), 37);
        // clamped into frame
        assert_eq!(rescale_coord(419.9, 420, 84), 83);
    }

    #[test]
    fn missing_file_names_the_file() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path());
        fs::remove_file(tmp.path().join("parts/part_locs.txt")).unwrap();
        let err = load_cub_dataset(tmp.path(), &fixture_split(), 84).unwrap_err();
        assert!(err.to_string().contains("part_locs.txt"), "{err}");
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path());
        let path = tmp.path().join("parts/part_locs.txt");
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("1 2 oops 4\n");
        let lineno = text.lines().count();
        fs::write(&path, text).unwrap();
        let err = load_cub_dataset(tmp.path(), &fixture_split(), 84).unwrap_err();
        assert!(err.to_string().contains(&format!("line {lineno}")), "{err}");
    }

    #[test]
    fn unknown_split_class_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        write_fixture(tmp.path());
        let mut split = fixture_split();
        split.novel.push("999.Missing_Bird".into());
        let err = load_cub_dataset(tmp.path(), &split, 84).unwrap_err();
        assert!(err.to_string().contains("999.Missing_Bird"), "{err}");
    }

    #[test]
    fn split_file_parses_sections() {
        let cfg = SplitConfig::from_text("[base]\na\nb\n[val]\nc\n[novel]\nd\n").unwrap();
        assert_eq!(cfg.base, vec!["a", "b"]);
        assert_eq!(cfg.val, vec!["c"]);
        assert_eq!(cfg.novel, vec!["d"]);
        assert!(SplitConfig::from_text("classless\n[base]\n").is_err());
    }

    #[test]
    fn default_split_is_2_1_1() {
        let names: Vec<String> = (1..=200).map(|i| format!("{i:03}.Bird")).collect();
        let cfg = SplitConfig::default_split(names);
        assert_eq!(cfg.base.len(), 100);
        assert_eq!(cfg.val.len(), 50);
        assert_eq!(cfg.novel.len(), 50);
    }
}
