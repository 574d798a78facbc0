//! Two-phase episodic training: base classes from scratch, then K-shot
//! fine-tuning over all classes with the early backbone frozen.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dataset::Dataset;
use crate::episodes::{build_base_episode, build_finetune_episode, ClassSplit, DataSplit, Episode};
use crate::error::{Error, Result};
use crate::loss::{image_loss, targets_for, BoxLoss, ClassTargets, LossBreakdown, LossConfig, LOG_HEADER};
use crate::model::{Detector, ModelConfig};
use crate::optim::{sgd_step, SgdConfig, SgdState};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs_base: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub seed: u64,
    pub k: usize,
    pub class_targets: ClassTargets,
    pub box_loss: BoxLoss,
    pub positive_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            momentum: 0.937,
            weight_decay: 0.0005,
            epochs_base: 100,
            epochs_finetune: 100,
            batch_size: 6,
            lambda: 0.1,
            seed: 7,
            k: 10,
            class_targets: ClassTargets::default(),
            box_loss: BoxLoss::default(),
            positive_weight: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            class_targets: self.class_targets,
            box_loss: self.box_loss,
            positive_weight: self.positive_weight,
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Independent sub-seeds for the different random streams of one run.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_BASE_EPISODE: u64 = 2;
const STREAM_BASE_ORDER: u64 = 3;
const STREAM_FT_EPISODE: u64 = 4;
const STREAM_FT_GROW: u64 = 5;
const STREAM_FT_ORDER: u64 = 6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamPartition {
    pub frozen: BTreeSet<String>,
    pub unfrozen: BTreeSet<String>,
}

/// Layers held fixed while fine-tuning.
pub const FROZEN_PREFIXES: [&str; 3] = ["stem.", "stage1.", "stage2."];

impl ParamPartition {
    pub fn all_trainable(detector: &Detector) -> Self {
        Self {
            frozen: BTreeSet::new(),
            unfrozen: detector.params.names().into_iter().collect(),
        }
    }

    pub fn finetune(detector: &Detector) -> Self {
        let (frozen, unfrozen) = detector
            .params
            .names()
            .into_iter()
            .partition(|n| FROZEN_PREFIXES.iter().any(|p| n.starts_with(p)));
        Self { frozen, unfrozen }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.loss.csv_row(r.epoch, r.step));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Detector,
    pub episode: Episode,
    pub log: Vec<LogRow>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Setup(#[from] Error),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
        last_good: Box<Detector>,
        log: Vec<LogRow>,
    },
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    let avg = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        l_box: avg(|b| b.l_box),
        l_obj: avg(|b| b.l_obj),
        l_cls: avg(|b| b.l_cls),
        l_meta: avg(|b| b.l_meta),
        total: avg(|b| b.total),
    }
}

/// Runs `epochs` passes of SGD over the episode's query images.
pub fn train_episode(
    mut model: Detector,
    dataset: &Dataset,
    episode: &Episode,
    config: &TrainConfig,
    epochs: usize,
    partition: &ParamPartition,
    order_seed: u64,
) -> Result<(Detector, Vec<LogRow>), TrainError> {
    config.validate()?;
    if model.classes != episode.classes {
        return Err(Error::InvalidArgument(format!(
            "model classes {:?} differ from episode classes {:?}",
            model.classes, episode.classes
        ))
        .into());
    }
    let size = model.config.image_size;
    if dataset.image_size() != size {
        return Err(Error::InvalidArgument(format!(
            "dataset images are {}px, model expects {size}px",
            dataset.image_size()
        ))
        .into());
    }
    let supports: Vec<(Tensor, crate::synth::MaskImage)> = episode
        .support
        .iter()
        .map(|s| Ok((dataset.scenes[s.image].image.to_tensor(), s.mask(size)?)))
        .collect::<Result<_>>()?;
    let queries: Vec<(Tensor, Vec<crate::loss::Target>)> = episode
        .query
        .iter()
        .map(|q| Ok((dataset.scenes[q.image].image.to_tensor(), targets_for(&q.instances, &model.classes)?)))
        .collect::<Result<_>>()?;

    let sgd = config.sgd();
    let loss_config = config.loss();
    let mut state = SgdState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(order_seed);
    let mut order: Vec<usize> = (0..queries.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, |n| !partition.is_frozen(n));
            let mut vectors = Vec::with_capacity(supports.len());
            for (img, mask) in &supports {
                let x = g.constant(img.clone());
                vectors.push(bound.support_vectors(&mut g, x, mask)?);
            }
            let mut parts = Vec::with_capacity(batch.len());
            let mut total = None;
            for &qi in batch {
                let (img, targets) = &queries[qi];
                let x = g.constant(img.clone());
                let feats = bound.features(&mut g, x)?;
                let groups = bound.reweight(&mut g, &feats, &vectors)?;
                let head = bound.head(&mut g, &groups)?;
                let l = image_loss(&mut g, &head, targets, &loss_config)?;
                parts.push(l.values(&g));
                total = Some(match total {
                    None => l.total,
                    Some(acc) => g.add(acc, l.total)?,
                });
            }
            let total = g.scale(total.expect("nonempty batch"), 1.0 / batch.len() as f64);
            let loss = mean_breakdown(&parts);
            let diverged = |detail: String, log: Vec<LogRow>, model: Detector| TrainError::Diverged {
                epoch,
                step,
                detail,
                last_good: Box::new(model),
                log,
            };
            if !g.value(total).is_finite() {
                return Err(diverged(format!("{loss:?}"), log, model));
            }
            let grads = match g.backward(total) {
                Ok(gr) => gr,
                Err(Error::NonFinite(d)) => return Err(diverged(d, log, model)),
                Err(e) => return Err(e.into()),
            };
            let mut by_name = BTreeMap::new();
            for (name, id) in bound.nodes() {
                if let Some(v) = grads.get(*id) {
                    by_name.insert(name.clone(), v.to_vec());
                }
            }
            let before = model.params.clone();
            sgd_step(&mut model.params, &by_name, &mut state, &sgd, |n| partition.is_frozen(n))?;
            if model.params.iter().any(|(_, t)| !t.is_finite()) {
                model.params = before;
                return Err(diverged("parameters became non-finite".into(), log, model));
            }
            log.push(LogRow { epoch, step, loss });
            step += 1;
        }
    }
    Ok((model, log))
}

pub fn train_base(
    dataset: &Dataset,
    data: &DataSplit,
    split: &ClassSplit,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let episode = build_base_episode(dataset, &data.train, split, sub_seed(config.seed, STREAM_BASE_EPISODE))?;
    let model = Detector::init(model_config.clone(), episode.classes.clone(), sub_seed(config.seed, STREAM_INIT))?;
    let partition = ParamPartition::all_trainable(&model);
    let (model, log) = train_episode(
        model,
        dataset,
        &episode,
        config,
        config.epochs_base,
        &partition,
        sub_seed(config.seed, STREAM_BASE_ORDER),
    )?;
    Ok(TrainOutcome { model, episode, log })
}

/// Builds the K-shot episode and widens the head to every class.
pub fn prepare_finetune(
    base: &Detector,
    dataset: &Dataset,
    data: &DataSplit,
    split: &ClassSplit,
    config: &TrainConfig,
) -> Result<(Detector, Episode)> {
    config.validate()?;
    let episode = build_finetune_episode(dataset, &data.train, split, config.k, sub_seed(config.seed, STREAM_FT_EPISODE))?;
    let model = base.grow_classes(&episode.classes, sub_seed(config.seed, STREAM_FT_GROW))?;
    Ok((model, episode))
}

pub fn finetune(
    base: &Detector,
    dataset: &Dataset,
    data: &DataSplit,
    split: &ClassSplit,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let (model, episode) = prepare_finetune(base, dataset, data, split, config)?;
    let partition = ParamPartition::finetune(&model);
    let (model, log) = train_episode(
        model,
        dataset,
        &episode,
        config,
        config.epochs_finetune,
        &partition,
        sub_seed(config.seed, STREAM_FT_ORDER),
    )?;
    Ok(TrainOutcome { model, episode, log })
}
