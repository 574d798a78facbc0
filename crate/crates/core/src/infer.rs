//! Prediction with cached reweighting vectors and Double-Maximum class selection.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::dataset::Dataset;
use crate::episodes::SupportItem;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::{Detector, HeadOutput, ReweightVector, NUM_SCALES};
use crate::tensor::Tensor;

pub const DEFAULT_CONF_THR: f64 = 0.05;
pub const DEFAULT_IOU_THR: f64 = 0.5;

/// Per-class vectors computed once from a support set.
#[derive(Debug, Clone, PartialEq)]
pub struct ReweightCache {
    pub vectors: Vec<ReweightVector>,
}

impl ReweightCache {
    pub fn classes(&self) -> Vec<u32> {
        self.vectors.iter().map(|v| v.class_id).collect()
    }
}

/// Averages the support vectors of every shot per class, in model class order.
pub fn cache_reweight_vectors(model: &Detector, dataset: &Dataset, support: &[SupportItem]) -> Result<ReweightCache> {
    let size = model.config.image_size;
    let mut vectors = Vec::with_capacity(model.classes.len());
    for &class in &model.classes {
        let shots: Vec<&SupportItem> = support.iter().filter(|s| s.class_id == class).collect();
        if shots.is_empty() {
            return Err(Error::MissingClass(class));
        }
        let mut acc: Option<[Tensor; NUM_SCALES]> = None;
        for s in &shots {
            let scene = dataset
                .scene(s.image)
                .ok_or_else(|| Error::InvalidArgument(format!("support image {} not in dataset", s.image)))?;
            let v = model.extract_support(class, &scene.image.to_tensor(), &s.mask(size)?)?;
            acc = Some(match acc {
                None => v.scales,
                Some(mut a) => {
                    for j in 0..NUM_SCALES {
                        for (x, y) in a[j].data_mut().iter_mut().zip(v.scales[j].data()) {
                            *x += y;
                        }
                    }
                    a
                }
            });
        }
        let inv = 1.0 / shots.len() as f64;
        let scales = acc.expect("at least one shot").map(|t| t.map(|x| x * inv));
        vectors.push(ReweightVector { class_id: class, scales });
    }
    Ok(ReweightCache { vectors })
}

/// Scores of every group at one cell: `c[i][j]` is the probability of class
/// `j` under group `i`; `objectness[i]` and `boxes[i]` are group `i`'s
/// objectness probability and decoded box.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid {
    pub c: Vec<Vec<f64>>,
    pub objectness: Vec<f64>,
    pub boxes: Vec<BBox>,
}

impl ScoreGrid {
    pub fn from_head(head: &HeadOutput, scale: usize, cell: usize) -> Self {
        let n = head.num_groups();
        let mut c = Vec::with_capacity(n);
        let mut objectness = Vec::with_capacity(n);
        let mut boxes = Vec::with_capacity(n);
        for i in 0..n {
            let p = head.cell(i, scale, cell);
            c.push(p.class_logits.iter().map(|&s| sigmoid(s)).collect());
            objectness.push(sigmoid(p.objectness));
            boxes.push(p.bbox);
        }
        Self { c, objectness, boxes }
    }
}

/// Lowest index whose diagonal entry is a maximum of both its row and its column.
pub fn dmp_select(c: &[Vec<f64>]) -> Result<Option<usize>> {
    let n = c.len();
    if n == 0 || c.iter().any(|row| row.len() != n) {
        return Err(Error::shape("dmp_select", format!("grid of {n} rows is not square")));
    }
    Ok((0..n).find(|&t| {
        let d = c[t][t];
        (0..n).all(|k| c[t][k] <= d && c[k][t] <= d)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: u32,
    pub confidence: f64,
    /// Position over all scales, finest first; orders confidence ties.
    pub cell_index: usize,
}

/// Detections above `conf_thr` after per-class NMS.
pub fn predict(model: &Detector, cache: &ReweightCache, image: &Tensor, conf_thr: f64, iou_thr: f64) -> Result<Vec<Detection>> {
    if cache.classes() != model.classes {
        return Err(Error::InvalidArgument(format!(
            "cache holds classes {:?}, model expects {:?}",
            cache.classes(),
            model.classes
        )));
    }
    let head = model.forward(image, &cache.vectors)?;
    let size = model.config.image_size as f64;
    let mut out = Vec::new();
    let mut offset = 0;
    for scale in 0..NUM_SCALES {
        let cells = head.layout.cells(scale);
        for cell in 0..cells {
            let grid = ScoreGrid::from_head(&head, scale, cell);
            let Some(t) = dmp_select(&grid.c)? else { continue };
            let confidence = grid.objectness[t] * grid.c[t][t];
            if confidence > conf_thr {
                out.push(Detection {
                    bbox: grid.boxes[t].clip(size),
                    class_id: model.classes[t],
                    confidence,
                    cell_index: offset + cell,
                });
            }
        }
        offset += cells;
    }
    Ok(nms(out, iou_thr))
}

fn by_confidence(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.cell_index.cmp(&b.cell_index))
        .then(a.class_id.cmp(&b.class_id))
}

/// Greedy per-class suppression of boxes overlapping a kept box by more than `iou_thr`.
pub fn nms(mut detections: Vec<Detection>, iou_thr: f64) -> Vec<Detection> {
    detections.sort_by(by_confidence);
    let mut kept: Vec<Detection> = Vec::with_capacity(detections.len());
    for d in detections {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && k.bbox.iou(&d.bbox) > iou_thr);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// One line of `detections.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image: String,
    pub class: u32,
    pub bbox: [f64; 4],
    pub conf: f64,
}

impl DetectionRecord {
    pub fn new(image: String, d: &Detection) -> Self {
        Self {
            image,
            class: d.class_id,
            bbox: d.bbox.to_array(),
            conf: d.confidence,
        }
    }
}

pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}
