//! The reference toy experiment end to end.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::episodes::{make_split, split_dataset, ClassSplit, DataSplit};
use crate::error::Result;
use crate::infer::{cache_reweight_vectors, predict, DetectionRecord, DEFAULT_CONF_THR, DEFAULT_IOU_THR};
use crate::metrics::{evaluate, EvalReport, GtBox, ScoredBox};
use crate::model::{Detector, ModelConfig};
use crate::synth::SceneConfig;
use crate::train::{finetune, prepare_finetune, train_base, LogRow, TrainConfig, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub images: usize,
    pub train_fraction: f64,
    pub novel: Vec<u32>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            images: 300,
            train_fraction: 2.0 / 3.0,
            novel: vec![3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecipeConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RecipeConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self
    }
}

/// `split.json`: the image partition and the class partition of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub train_fraction: f64,
    pub seed: u64,
    pub data: DataSplit,
    pub classes: ClassSplit,
}

impl SplitManifest {
    pub fn build(dataset: &Dataset, train_fraction: f64, novel: &[u32], seed: u64) -> Result<Self> {
        Ok(Self {
            train_fraction,
            seed,
            data: split_dataset(dataset, train_fraction, seed)?,
            classes: make_split(&dataset.manifest.class_ids(), novel)?,
        })
    }

    /// Checks that every index and class refers into `dataset`.
    pub fn check(&self, dataset: &Dataset) -> Result<()> {
        let n = dataset.scenes.len();
        if let Some(&bad) = self.data.train.iter().chain(&self.data.test).find(|&&i| i >= n) {
            return Err(crate::error::Error::InvalidArgument(format!(
                "split refers to image {bad}, dataset has {n}"
            )));
        }
        let known = dataset.manifest.class_ids();
        if let Some(bad) = self.classes.all().into_iter().find(|c| !known.contains(c)) {
            return Err(crate::error::Error::MissingClass(bad));
        }
        Ok(())
    }
}

pub struct Prepared {
    pub dataset: Dataset,
    pub data: DataSplit,
    pub split: ClassSplit,
}

/// Generates the dataset and both splits from the recipe's seed.
pub fn prepare(config: &RecipeConfig) -> Result<Prepared> {
    let scene = SceneConfig {
        image_size: config.model.image_size,
        ..SceneConfig::with_classes(config.data.classes, config.train.seed)
    };
    let dataset = Dataset::generate(&scene, config.data.images)?;
    let data = split_dataset(&dataset, config.data.train_fraction, config.train.seed)?;
    let split = make_split(&dataset.manifest.class_ids(), &config.data.novel)?;
    Ok(Prepared { dataset, data, split })
}

/// Predicts on `images` with vectors cached from `support`, then scores.
pub fn predict_and_evaluate(
    model: &Detector,
    prepared: &Prepared,
    support: &[crate::episodes::SupportItem],
    images: &[usize],
) -> Result<(Vec<DetectionRecord>, EvalReport)> {
    let cache = cache_reweight_vectors(model, &prepared.dataset, support)?;
    let mut records = Vec::new();
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for &i in images {
        let scene = &prepared.dataset.scenes[i];
        for d in predict(model, &cache, &scene.image.to_tensor(), DEFAULT_CONF_THR, DEFAULT_IOU_THR)? {
            records.push(DetectionRecord::new(scene.file_name(), &d));
            dets.push((d.class_id, ScoredBox { image: i, bbox: d.bbox, confidence: d.confidence }));
        }
        for inst in &scene.instances {
            gts.push((inst.class_id, GtBox { image: i, bbox: inst.bbox.to_bbox() }));
        }
    }
    let report = evaluate(&dets, &gts, &prepared.split, 0.5)?;
    Ok((records, report))
}

pub struct RecipeOutcome {
    pub base_model: Detector,
    pub final_model: Detector,
    pub base_log: Vec<LogRow>,
    pub finetune_log: Vec<LogRow>,
    /// Base model with the widened but untrained head.
    pub untuned_report: EvalReport,
    pub report: EvalReport,
    pub detections: Vec<DetectionRecord>,
}

pub fn run_recipe(config: &RecipeConfig) -> Result<RecipeOutcome, TrainError> {
    let prepared = prepare(config)?;
    let base = train_base(&prepared.dataset, &prepared.data, &prepared.split, &config.model, &config.train)?;
    let (untuned, ft_episode) = prepare_finetune(&base.model, &prepared.dataset, &prepared.data, &prepared.split, &config.train)?;
    let (_, untuned_report) = predict_and_evaluate(&untuned, &prepared, &ft_episode.support, &prepared.data.test)?;
    let ft = finetune(&base.model, &prepared.dataset, &prepared.data, &prepared.split, &config.train)?;
    let (detections, report) = predict_and_evaluate(&ft.model, &prepared, &ft.episode.support, &prepared.data.test)?;
    Ok(RecipeOutcome {
        base_model: base.model,
        final_model: ft.model,
        base_log: base.log,
        finetune_log: ft.log,
        untuned_report,
        report,
        detections,
    })
}
