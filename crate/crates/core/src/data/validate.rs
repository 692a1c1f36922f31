//! Dataset invariant checks: split disjointness, per-class counts,
//! per-concept visibility rates.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::{AnnotatedImage, DatasetBundle};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub failures: Vec<String>,
    pub warnings: Vec<String>,
    /// split -> class label -> image count
    pub class_counts: BTreeMap<String, BTreeMap<u32, usize>>,
    /// concept_id -> fraction of images where the concept is visible
    pub visibility_rates: BTreeMap<usize, f64>,
}

fn count_classes(images: &[AnnotatedImage]) -> BTreeMap<u32, usize> {
    let mut counts = BTreeMap::new();
    for im in images {
        *counts.entry(im.class_label).or_insert(0) += 1;
    }
    counts
}

pub fn validate_dataset(bundle: &DatasetBundle) -> ValidationReport {
    let mut failures = Vec::new();
    let mut warnings = Vec::new();

    let base = DatasetBundle::split_labels(&bundle.base_split);
    let val = DatasetBundle::split_labels(&bundle.val_split);
    let novel = DatasetBundle::split_labels(&bundle.novel_split);
    for (a, b, names) in [
        (&base, &val, "base/val"),
        (&base, &novel, "base/novel"),
        (&val, &novel, "val/novel"),
    ] {
        let overlap: Vec<u32> = a.iter().copied().filter(|l| b.contains(l)).collect();
        if !overlap.is_empty() {
            failures.push(format!("splits {names} share classes {overlap:?}"));
        }
    }

    let mut class_counts = BTreeMap::new();
    for (name, images) in [
        ("base", &bundle.base_split),
        ("val", &bundle.val_split),
        ("novel", &bundle.novel_split),
    ] {
        let counts = count_classes(images);
        for (label, n) in &counts {
            if *n == 0 {
                failures.push(format!("split {name}: class {label} has no images"));
            }
        }
        class_counts.insert(name.to_string(), counts);
    }

    // concept ids referenced by annotations must exist
    let n_concepts = bundle.n_concepts();
    let all_images = bundle
        .base_split
        .iter()
        .chain(&bundle.val_split)
        .chain(&bundle.novel_split);
    let mut visible = vec![0usize; n_concepts];
    let mut total = 0usize;
    for im in all_images {
        total += 1;
        let mut seen = vec![false; n_concepts];
        for ann in &im.annotations {
            if ann.concept_id >= n_concepts {
                failures.push(format!(
                    "image {}: annotation references unknown concept {}",
                    im.id, ann.concept_id
                ));
                continue;
            }
            if seen[ann.concept_id] {
                failures.push(format!(
                    "image {}: duplicate annotation for concept {}",
                    im.id, ann.concept_id
                ));
            }
            seen[ann.concept_id] = true;
            if ann.visible {
                if (ann.x as usize) >= im.width() || (ann.y as usize) >= im.height() {
                    failures.push(format!(
                        "image {}: concept {} annotated out of frame at ({}, {})",
                        im.id, ann.concept_id, ann.x, ann.y
                    ));
                }
                visible[ann.concept_id] += 1;
            }
        }
    }

    let mut visibility_rates = BTreeMap::new();
    for (j, &v) in visible.iter().enumerate() {
        let rate = if total == 0 { 0.0 } else { v as f64 / total as f64 };
        visibility_rates.insert(j, rate);
        if rate == 0.0 {
            warnings.push(format!("concept {j} is never visible (rate 0.0)"));
        }
    }

    ValidationReport {
        passed: failures.is_empty(),
        failures,
        warnings,
        class_counts,
        visibility_rates,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SyntheticConfig};

    fn small_bundle() -> DatasetBundle {
        let cfg = SyntheticConfig {
            images_per_class: 2,
            n_base_classes: 2,
            n_val_classes: 2,
            n_novel_classes: 2,
            ..Default::default()
        };
        generate_synthetic_dataset(&cfg, 3).unwrap()
    }

    #[test]
    fn valid_bundle_passes() {
        let report = validate_dataset(&small_bundle());
        assert!(report.passed, "{:?}", report.failures);
        assert!(report.warnings.is_empty());
    }

    #[test]
    fn shared_class_fails_disjointness() {
        let mut bundle = small_bundle();
        let stolen = bundle.base_split[0].clone();
        bundle.novel_split.push(stolen);
        let report = validate_dataset(&bundle);
        assert!(!report.passed);
        assert!(report.failures.iter().any(|f| f.contains("base/novel")));
    }

    #[test]
    fn never_visible_concept_warns_with_rate_zero() {
        let mut bundle = small_bundle();
        for im in bundle
            .base_split
            .iter_mut()
            .chain(&mut bundle.val_split)
            .chain(&mut bundle.novel_split)
        {
            for ann in &mut im.annotations {
                if ann.concept_id == 1 {
                    ann.visible = false;
                }
            }
        }
        let report = validate_dataset(&bundle);
        assert!(report.passed);
        assert_eq!(report.visibility_rates[&1], 0.0);
        assert!(report.warnings.iter().any(|w| w.contains("concept 1")));
    }
}
