//! Dataset division and episodic construction.
//!
//! Base episodes draw their query set from every training image that holds a
//! base-class label (novel labels stripped) with one support exemplar per base
//! class. Fine-tuning episodes select images until every class holds exactly
//! `K` labels, then draw the support exemplars from inside that query set.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Manifest};
use crate::error::{Error, Result};
use crate::synth::{image_file_name, render_mask, AnnotatedInstance, MaskImage, PixelBox};

/// Node budget for the exact-fit search before giving up.
const SEARCH_BUDGET: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub base: Vec<u32>,
    pub novel: Vec<u32>,
}

impl ClassSplit {
    /// Base and novel ids together, ascending.
    pub fn all(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.base.iter().chain(&self.novel).copied().collect();
        set.into_iter().collect()
    }

    pub fn is_novel(&self, class: u32) -> bool {
        self.novel.contains(&class)
    }
}

pub fn make_split(class_ids: &[u32], novel_ids: &[u32]) -> Result<ClassSplit> {
    let all: BTreeSet<u32> = class_ids.iter().copied().collect();
    let novel: BTreeSet<u32> = novel_ids.iter().copied().collect();
    if novel.is_empty() {
        return Err(Error::InvalidArgument("novel class set is empty".into()));
    }
    if let Some(bad) = novel.iter().find(|c| !all.contains(c)) {
        return Err(Error::InvalidArgument(format!("novel class {bad} is not a dataset class")));
    }
    if novel.len() == all.len() {
        return Err(Error::InvalidArgument("novel classes must leave at least one base class".into()));
    }
    Ok(ClassSplit {
        base: all.difference(&novel).copied().collect(),
        novel: novel.into_iter().collect(),
    })
}

/// Image-level train/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_dataset(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<DataSplit> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = dataset.scenes.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (train_fraction * n as f64).round() as usize;
    let mut train = order[..cut].to_vec();
    let mut test = order[cut..].to_vec();
    train.sort_unstable();
    test.sort_unstable();

    for class in dataset.manifest.class_ids() {
        for (subset, images) in [("train", &train), ("test", &test)] {
            let present = images
                .iter()
                .any(|&i| dataset.scenes[i].instances.iter().any(|x| x.class_id == class));
            if !present {
                return Err(Error::ClassAbsent { class, subset });
            }
        }
    }
    Ok(DataSplit { train, test })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Base,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportItem {
    pub class_id: u32,
    pub image: usize,
    pub instance: AnnotatedInstance,
}

impl SupportItem {
    pub fn mask(&self, image_size: usize) -> Result<MaskImage> {
        render_mask(image_size, &self.instance)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryItem {
    pub image: usize,
    pub instances: Vec<AnnotatedInstance>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub phase: Phase,
    pub split: ClassSplit,
    /// Class universe of the phase, in group order.
    pub classes: Vec<u32>,
    /// One entry per class, aligned with `classes`.
    pub support: Vec<SupportItem>,
    pub query: Vec<QueryItem>,
    pub k: Option<usize>,
}

impl Episode {
    /// Labels per class over the query set.
    pub fn label_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts: BTreeMap<u32, usize> = self.classes.iter().map(|&c| (c, 0)).collect();
        for q in &self.query {
            for inst in &q.instances {
                *counts.entry(inst.class_id).or_default() += 1;
            }
        }
        counts
    }

    /// Every labeled query instance as a support shot, in query order.
    pub fn shots(&self) -> Vec<SupportItem> {
        self.query
            .iter()
            .flat_map(|q| {
                q.instances.iter().map(|inst| SupportItem {
                    class_id: inst.class_id,
                    image: q.image,
                    instance: *inst,
                })
            })
            .collect()
    }

    /// True when every support image is also a query image.
    pub fn support_within_query(&self) -> bool {
        let query: BTreeSet<usize> = self.query.iter().map(|q| q.image).collect();
        self.support.iter().all(|s| query.contains(&s.image))
    }

    pub fn to_manifest(&self) -> EpisodeManifest {
        EpisodeManifest {
            phase: self.phase,
            k: self.k,
            split: self.split.clone(),
            classes: self.classes.clone(),
            support: self
                .support
                .iter()
                .map(|s| SupportRef {
                    class: s.class_id,
                    image: image_file_name(s.image),
                    bbox: [s.instance.bbox.x0, s.instance.bbox.y0, s.instance.bbox.x1, s.instance.bbox.y1],
                })
                .collect(),
            query: self.query.iter().map(|q| image_file_name(q.image)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportRef {
    pub class: u32,
    pub image: String,
    pub bbox: [u32; 4],
}

/// Audit form of an episode (`episode.json`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub phase: Phase,
    pub k: Option<usize>,
    pub split: ClassSplit,
    pub classes: Vec<u32>,
    pub support: Vec<SupportRef>,
    pub query: Vec<String>,
}

fn parse_image_ref(manifest: &Manifest, name: &str) -> Result<usize> {
    name.strip_suffix(".ppm")
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&i| i < manifest.image_count)
        .ok_or_else(|| Error::Format(format!("episode references unknown image {name}")))
}

impl EpisodeManifest {
    /// Rebuilds the episode against the dataset it was drawn from.
    pub fn resolve(&self, dataset: &Dataset) -> Result<Episode> {
        let keep: BTreeSet<u32> = match self.phase {
            Phase::Base => self.split.base.iter().copied().collect(),
            Phase::Finetune => self.split.all().into_iter().collect(),
        };
        let query = self
            .query
            .iter()
            .map(|name| {
                let image = parse_image_ref(&dataset.manifest, name)?;
                let instances = dataset.scenes[image]
                    .instances
                    .iter()
                    .filter(|x| keep.contains(&x.class_id))
                    .copied()
                    .collect();
                Ok(QueryItem { image, instances })
            })
            .collect::<Result<Vec<_>>>()?;
        let support = self
            .support
            .iter()
            .map(|s| {
                let image = parse_image_ref(&dataset.manifest, &s.image)?;
                let [x0, y0, x1, y1] = s.bbox;
                Ok(SupportItem {
                    class_id: s.class,
                    image,
                    instance: AnnotatedInstance {
                        class_id: s.class,
                        bbox: PixelBox { x0, y0, x1, y1 },
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Episode {
            phase: self.phase,
            split: self.split.clone(),
            classes: self.classes.clone(),
            support,
            query,
            k: self.k,
        })
    }
}

fn pick_support(
    classes: &[u32],
    query: &[QueryItem],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SupportItem>> {
    classes
        .iter()
        .map(|&class| {
            let candidates: Vec<SupportItem> = query
                .iter()
                .flat_map(|q| {
                    q.instances.iter().filter(|x| x.class_id == class).map(|x| SupportItem {
                        class_id: class,
                        image: q.image,
                        instance: *x,
                    })
                })
                .collect();
            candidates
                .choose(rng)
                .cloned()
                .ok_or(Error::InsufficientLabels {
                    class,
                    available: 0,
                    needed: 1,
                })
        })
        .collect()
}

pub fn build_base_episode(dataset: &Dataset, train: &[usize], split: &ClassSplit, seed: u64) -> Result<Episode> {
    let base: BTreeSet<u32> = split.base.iter().copied().collect();
    let query: Vec<QueryItem> = train
        .iter()
        .filter_map(|&image| {
            let instances: Vec<AnnotatedInstance> = dataset.scenes[image]
                .instances
                .iter()
                .filter(|x| base.contains(&x.class_id))
                .copied()
                .collect();
            (!instances.is_empty()).then_some(QueryItem { image, instances })
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let support = pick_support(&split.base, &query, &mut rng)?;
    Ok(Episode {
        phase: Phase::Base,
        split: split.clone(),
        classes: split.base.clone(),
        support,
        query,
        k: None,
    })
}

struct FitSearch<'a> {
    images: &'a [(usize, BTreeMap<u32, usize>)],
    classes: &'a [u32],
    k: usize,
    counts: BTreeMap<u32, usize>,
    used: Vec<bool>,
    chosen: Vec<usize>,
    steps: usize,
}

impl FitSearch<'_> {
    fn fits(&self, labels: &BTreeMap<u32, usize>) -> bool {
        labels.iter().all(|(c, n)| self.counts.get(c).is_some_and(|have| have + n <= self.k))
    }

    /// Depth-first: fill the first deficient class with any image that fits.
    fn run(&mut self) -> bool {
        let Some(&need) = self.classes.iter().find(|c| self.counts[c] < self.k) else {
            return true;
        };
        for i in 0..self.images.len() {
            if self.steps >= SEARCH_BUDGET {
                return false;
            }
            let (_, labels) = &self.images[i];
            if self.used[i] || !labels.contains_key(&need) || !self.fits(labels) {
                continue;
            }
            self.steps += 1;
            self.used[i] = true;
            self.chosen.push(i);
            for (c, n) in labels {
                *self.counts.get_mut(c).expect("known class") += n;
            }
            if self.run() {
                return true;
            }
            for (c, n) in labels {
                *self.counts.get_mut(c).expect("known class") -= n;
            }
            self.chosen.pop();
            self.used[i] = false;
        }
        false
    }
}

pub fn build_finetune_episode(
    dataset: &Dataset,
    train: &[usize],
    split: &ClassSplit,
    k: usize,
    seed: u64,
) -> Result<Episode> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be positive".into()));
    }
    let classes = split.all();
    let mut available: BTreeMap<u32, usize> = classes.iter().map(|&c| (c, 0)).collect();
    for &i in train {
        for inst in &dataset.scenes[i].instances {
            if let Some(n) = available.get_mut(&inst.class_id) {
                *n += 1;
            }
        }
    }
    for (&class, &n) in &available {
        if n < k {
            return Err(Error::InsufficientLabels {
                class,
                available: n,
                needed: k,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = train.to_vec();
    order.shuffle(&mut rng);
    let images: Vec<(usize, BTreeMap<u32, usize>)> = order
        .iter()
        .map(|&i| {
            let mut labels = BTreeMap::new();
            for inst in &dataset.scenes[i].instances {
                *labels.entry(inst.class_id).or_insert(0) += 1;
            }
            (i, labels)
        })
        .filter(|(_, l)| !l.is_empty())
        .collect();

    let mut search = FitSearch {
        images: &images,
        classes: &classes,
        k,
        counts: classes.iter().map(|&c| (c, 0)).collect(),
        used: vec![false; images.len()],
        chosen: Vec::new(),
        steps: 0,
    };
    if !search.run() {
        let class = *classes
            .iter()
            .find(|c| search.counts[c] < k)
            .unwrap_or(&classes[0]);
        return Err(Error::NoExactFit { class, k });
    }
    let mut picked: Vec<usize> = search.chosen.iter().map(|&i| images[i].0).collect();
    picked.sort_unstable();
    let query: Vec<QueryItem> = picked
        .into_iter()
        .map(|image| QueryItem {
            image,
            instances: dataset.scenes[image].instances.clone(),
        })
        .collect();
    let support = pick_support(&classes, &query, &mut rng)?;
    Ok(Episode {
        phase: Phase::Finetune,
        split: split.clone(),
        classes,
        support,
        query,
        k: Some(k),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SceneConfig;

    fn toy(images: usize, seed: u64) -> Dataset {
        Dataset::generate(&SceneConfig::with_classes(5, seed), images).unwrap()
    }

    #[test]
    fn make_split_complements() {
        let s = make_split(&[1, 2, 3, 4, 5], &[4, 5]).unwrap();
        assert_eq!(s.base, vec![1, 2, 3]);
        let s = make_split(&(1..=10).collect::<Vec<_>>(), &[1]).unwrap();
        assert_eq!(s.base, (2..=10).collect::<Vec<_>>());
        let s = make_split(&(1..=10).collect::<Vec<_>>(), &[1, 2, 3]).unwrap();
        assert_eq!((s.base.len(), s.novel.len()), (7, 3));
        assert!(make_split(&[1, 2], &[]).is_err());
        assert!(make_split(&[1, 2], &[3]).is_err());
        assert!(make_split(&[1, 2], &[1, 2]).is_err());
    }

    #[test]
    fn split_dataset_partitions() {
        let d = toy(100, 1);
        let s = split_dataset(&d, 0.5, 3).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (50, 50));
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(s, split_dataset(&d, 0.5, 3).unwrap());
        assert!(split_dataset(&d, 1.0, 3).is_err());
    }

    #[test]
    fn split_reports_absent_class() {
        let cfg = SceneConfig {
            objects_per_image: (1, 1),
            ..SceneConfig::with_classes(5, 2)
        };
        let d = Dataset::generate(&cfg, 6).unwrap();
        let err = split_dataset(&d, 0.5, 0).unwrap_err();
        assert!(matches!(err, Error::ClassAbsent { .. }), "{err}");
    }

    #[test]
    fn base_episode_contract() {
        let d = toy(60, 4);
        let split = make_split(&[0, 1, 2, 3, 4], &[3, 4]).unwrap();
        let train: Vec<usize> = (0..60).collect();
        let ep = build_base_episode(&d, &train, &split, 9).unwrap();
        assert_eq!(ep.support.len(), 3);
        assert!(ep.query.iter().all(|q| q.instances.iter().all(|x| x.class_id < 3)));
        for (s, &c) in ep.support.iter().zip(&ep.classes) {
            assert_eq!(s.class_id, c);
            assert!(d.scenes[s.image].instances.contains(&s.instance));
        }
    }

    #[test]
    fn finetune_k1_and_forced_counts() {
        let d = toy(80, 5);
        let split = make_split(&[0, 1, 2, 3, 4], &[3, 4]).unwrap();
        let train: Vec<usize> = (0..80).collect();
        let ep = build_finetune_episode(&d, &train, &split, 1, 0).unwrap();
        assert!(ep.label_counts().values().all(|&n| n == 1));
        assert!(ep.support_within_query());

        let cfg = SceneConfig {
            objects_per_image: (1, 1),
            ..SceneConfig::with_classes(5, 8)
        };
        let single = Dataset::generate(&cfg, 80).unwrap();
        let ep = build_finetune_episode(&single, &train, &split, 3, 1).unwrap();
        assert_eq!(ep.query.len(), 15);
        assert!(ep.label_counts().values().all(|&n| n == 3));
    }

    #[test]
    fn insufficient_labels_names_class() {
        let d = toy(10, 6);
        let split = make_split(&[0, 1, 2, 3, 4], &[4]).unwrap();
        let train: Vec<usize> = (0..10).collect();
        match build_finetune_episode(&d, &train, &split, 50, 0) {
            Err(Error::InsufficientLabels { needed: 50, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manifest_resolves_to_same_episode() {
        let d = toy(60, 7);
        let split = make_split(&[0, 1, 2, 3, 4], &[0]).unwrap();
        let train: Vec<usize> = (0..60).collect();
        let ep = build_finetune_episode(&d, &train, &split, 5, 2).unwrap();
        let json = serde_json::to_string(&ep.to_manifest()).unwrap();
        let back: EpisodeManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back.resolve(&d).unwrap(), ep);
    }
}
