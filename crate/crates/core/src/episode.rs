//! C-way K-shot episode construction with disjoint support/query sets.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::data::AnnotatedImage;
use crate::error::{Error, Result};
use crate::util::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
}

impl EpisodeSpec {
    pub fn new(n_way: usize, k_shot: usize, n_query: usize) -> Result<Self> {
        if n_way < 2 {
            return Err(Error::Config("n_way must be >= 2".into()));
        }
        if k_shot < 1 || n_query < 1 {
            return Err(Error::Config("k_shot and n_query must be >= 1".into()));
        }
        Ok(EpisodeSpec {
            n_way,
            k_shot,
            n_query,
        })
    }
}

/// One sampled few-shot task. Support images are grouped by episode-local
/// class index; queries carry their local index alongside.
#[derive(Debug, Clone)]
pub struct Episode {
    /// `support[local_class][shot]`
    pub support: Vec<Vec<AnnotatedImage>>,
    /// `(local_class, image)`
    pub query: Vec<(usize, AnnotatedImage)>,
    /// episode-local index -> global class label, in draw order
    pub class_map: Vec<u32>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.class_map.len()
    }

    /// FNV digest over the support/query image ids, for pairing checks.
    pub fn image_id_digest(&self) -> u64 {
        let mut bytes = Vec::new();
        for class in &self.support {
            for im in class {
                bytes.extend_from_slice(&im.id.to_le_bytes());
            }
        }
        for (_, im) in &self.query {
            bytes.extend_from_slice(&im.id.to_le_bytes());
        }
        crate::util::fnv1a64(&bytes)
    }
}

/// Uniformly sample `spec.n_way` classes without replacement, then disjoint
/// support/query images without replacement within each class.
pub fn sample_episode(
    split: &[AnnotatedImage],
    spec: &EpisodeSpec,
    rng: &mut impl Rng,
) -> Result<Episode> {
    let mut by_class: BTreeMap<u32, Vec<&AnnotatedImage>> = BTreeMap::new();
    for im in split {
        by_class.entry(im.class_label).or_default().push(im);
    }
    if by_class.len() < spec.n_way {
        return Err(Error::Sampling(format!(
            "split has {} classes, episode needs {}",
            by_class.len(),
            spec.n_way
        )));
    }
    let needed = spec.k_shot + spec.n_query;
    let labels: Vec<u32> = by_class.keys().copied().collect();
    let mut chosen = labels.clone();
    chosen.shuffle(rng);
    chosen.truncate(spec.n_way);

    let mut support = Vec::with_capacity(spec.n_way);
    let mut query = Vec::new();
    for (local, &label) in chosen.iter().enumerate() {
        let pool = &by_class[&label];
        if pool.len() < needed {
            return Err(Error::Sampling(format!(
                "class {label} has {} images, episode needs {needed}",
                pool.len()
            )));
        }
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.shuffle(rng);
        let support_imgs: Vec<AnnotatedImage> = idx[..spec.k_shot]
            .iter()
            .map(|&i| pool[i].clone())
            .collect();
        for &i in &idx[spec.k_shot..needed] {
            query.push((local, pool[i].clone()));
        }
        support.push(support_imgs);
    }

    Ok(Episode {
        support,
        query,
        class_map: chosen,
    })
}

/// A reproducible stream of episodes. Each episode draws from its own
/// counter-derived subseed, so consumers can evaluate them independently.
pub struct EpisodeStream<'a> {
    split: &'a [AnnotatedImage],
    spec: EpisodeSpec,
    seed: u64,
    next: u64,
    count: u64,
}

pub fn episode_stream<'a>(
    split: &'a [AnnotatedImage],
    spec: &EpisodeSpec,
    seed: u64,
    count: u64,
) -> EpisodeStream<'a> {
    EpisodeStream {
        split,
        spec: *spec,
        seed,
        next: 0,
        count,
    }
}

impl Iterator for EpisodeStream<'_> {
    type Item = Result<Episode>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.count {
            return None;
        }
        let mut rng = rng_for(self.seed, "episode", self.next);
        self.next += 1;
        Some(sample_episode(self.split, &self.spec, &mut rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SyntheticConfig};
    use crate::util::rng_for;

    fn split() -> Vec<AnnotatedImage> {
        let cfg = SyntheticConfig {
            images_per_class: 25,
            n_base_classes: 8,
            n_val_classes: 1,
            n_novel_classes: 1,
            image_size: 12,
            grid_size: 3,
            ..Default::default()
        };
        generate_synthetic_dataset(&cfg, 11).unwrap().base_split
    }

    #[test]
    fn five_way_five_shot_counts() {
        let split = split();
        let spec = EpisodeSpec::new(5, 5, 16).unwrap();
        let ep = sample_episode(&split, &spec, &mut rng_for(0, "t", 0)).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert!(ep.support.iter().all(|s| s.len() == 5));
        assert_eq!(ep.query.len(), 80);
        assert_eq!(ep.class_map.len(), 5);
    }

    #[test]
    fn support_and_query_are_disjoint() {
        let split = split();
        let spec = EpisodeSpec::new(5, 3, 10).unwrap();
        for k in 0..20 {
            let ep = sample_episode(&split, &spec, &mut rng_for(1, "t", k)).unwrap();
            let support_ids: std::collections::BTreeSet<u64> = ep
                .support
                .iter()
                .flatten()
                .map(|im| im.id)
                .collect();
            assert_eq!(support_ids.len(), 15);
            for (_, im) in &ep.query {
                assert!(!support_ids.contains(&im.id));
            }
        }
    }

    #[test]
    fn tight_split_uses_every_image_once() {
        // classes {A: 2 imgs, B: 2 imgs}, 2-way 1-shot 1-query
        let full = split();
        let labels = crate::data::DatasetBundle::split_labels(&full);
        let mut tight: Vec<AnnotatedImage> = Vec::new();
        for &label in &labels[..2] {
            tight.extend(
                full.iter()
                    .filter(|im| im.class_label == label)
                    .take(2)
                    .cloned(),
            );
        }
        let spec = EpisodeSpec::new(2, 1, 1).unwrap();
        let ep = sample_episode(&tight, &spec, &mut rng_for(2, "t", 0)).unwrap();
        let mut used: Vec<u64> = ep.support.iter().flatten().map(|im| im.id).collect();
        used.extend(ep.query.iter().map(|(_, im)| im.id));
        used.sort_unstable();
        let mut expected: Vec<u64> = tight.iter().map(|im| im.id).collect();
        expected.sort_unstable();
        assert_eq!(used, expected);
    }

    #[test]
    fn deficient_class_is_a_sampling_error() {
        let full = split();
        let labels = crate::data::DatasetBundle::split_labels(&full);
        let mut images: Vec<AnnotatedImage> = Vec::new();
        // first class gets k_shot + n_query - 1 images, others plenty
        for (i, &label) in labels.iter().enumerate() {
            let take = if i == 0 { 3 } else { 10 };
            images.extend(
                full.iter()
                    .filter(|im| im.class_label == label)
                    .take(take)
                    .cloned(),
            );
        }
        let spec = EpisodeSpec::new(labels.len(), 2, 2).unwrap();
        // the deficient class is not always drawn; force inclusion by n_way = all
        let err = sample_episode(&images, &spec, &mut rng_for(3, "t", 0)).unwrap_err();
        assert!(matches!(err, Error::Sampling(_)));
        assert!(err.to_string().contains(&labels[0].to_string()), "{err}");
    }

    #[test]
    fn stream_is_reproducible_and_sized() {
        let split = split();
        let spec = EpisodeSpec::new(5, 2, 3).unwrap();
        let a: Vec<Vec<u32>> = episode_stream(&split, &spec, 9, 40)
            .map(|e| e.unwrap().class_map)
            .collect();
        let b: Vec<Vec<u32>> = episode_stream(&split, &spec, 9, 40)
            .map(|e| e.unwrap().class_map)
            .collect();
        assert_eq!(a, b);
        assert_eq!(a.len(), 40);
        let digests_a: Vec<u64> = episode_stream(&split, &spec, 9, 5)
            .map(|e| e.unwrap().image_id_digest())
            .collect();
        let digests_b: Vec<u64> = episode_stream(&split, &spec, 9, 5)
            .map(|e| e.unwrap().image_id_digest())
            .collect();
        assert_eq!(digests_a, digests_b);
        assert_eq!(episode_stream(&split, &spec, 9, 0).count(), 0);
    }

    #[test]
    fn class_selection_is_near_uniform() {
        let split = split();
        let spec = EpisodeSpec::new(5, 2, 2).unwrap();
        let labels = crate::data::DatasetBundle::split_labels(&split);
        let mut counts: BTreeMap<u32, u64> = labels.iter().map(|&l| (l, 0)).collect();
        let n_episodes = 600u64;
        for ep in episode_stream(&split, &spec, 6, n_episodes) {
            for label in ep.unwrap().class_map {
                *counts.get_mut(&label).unwrap() += 1;
            }
        }
        // each draw selects 5 of 8 classes: p = 5/8 per episode
        let p = 5.0 / 8.0;
        let mean = n_episodes as f64 * p;
        let sigma = (n_episodes as f64 * p * (1.0 - p)).sqrt();
        for (&label, &count) in &counts {
            assert!(
                (count as f64 - mean).abs() < 3.0 * sigma,
                "class {label}: {count} vs mean {mean:.1} (sigma {sigma:.1})"
            );
        }
    }
}
