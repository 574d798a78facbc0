//! Meta-sampling and the detection loss.
//!
//! Every ground-truth instance is assigned to one cell at one scale. All N
//! class groups are read at that cell: the group of the instance's own class
//! is the positive sample, the other N - 1 groups are informative negatives.
//! Base losses act on the positive group (box, objectness) and on the true
//! class column across groups (classification); the meta-cross loss pushes the
//! true group to dominate the softmax over groups.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::{HeadLayout, HeadNodes, HeadOutput, BOX_CHANNELS, EXP_CLAMP, NUM_SCALES, OBJ_CHANNEL};
use crate::synth::AnnotatedInstance;

/// Floor applied to softmax outputs before taking logs.
pub const SOFTMAX_FLOOR: f64 = 1e-12;

pub const LOG_HEADER: &str = "epoch,step,l_box,l_obj,l_cls,l_meta,total";

/// Ground truth in group coordinates: `group` is the class's position in the
/// detector's class list.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub group: usize,
    pub bbox: BBox,
}

pub fn targets_for(instances: &[AnnotatedInstance], classes: &[u32]) -> Result<Vec<Target>> {
    instances
        .iter()
        .map(|inst| {
            let group = classes
                .iter()
                .position(|&c| c == inst.class_id)
                .ok_or(Error::MissingClass(inst.class_id))?;
            Ok(Target {
                group,
                bbox: inst.bbox.to_bbox(),
            })
        })
        .collect()
}

/// Cell and scale responsible for one target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub instance: usize,
    pub group: usize,
    pub scale: usize,
    pub cell_x: usize,
    pub cell_y: usize,
    pub gt: BBox,
}

impl Assignment {
    pub fn cell(&self, layout: &HeadLayout) -> usize {
        self.cell_y * layout.scales[self.scale].grid + self.cell_x
    }
}

/// Scale whose anchor is nearest the box size in log space, then the cell
/// holding the box center. Ties go to the finer scale.
pub fn assign(layout: &HeadLayout, instance: usize, target: &Target) -> Result<Assignment> {
    if target.group >= layout.num_classes {
        return Err(Error::InvalidArgument(format!(
            "target group {} outside {} classes",
            target.group, layout.num_classes
        )));
    }
    let b = target.bbox;
    let (cx, cy) = b.center();
    let size = layout.image_size as f64;
    if !(cx >= 0.0 && cx < size && cy >= 0.0 && cy < size) {
        return Err(Error::InvalidArgument(format!(
            "target center ({cx}, {cy}) lies outside the {size}x{size} image"
        )));
    }
    let side = (b.width().max(0.0) * b.height().max(0.0)).sqrt().max(f64::MIN_POSITIVE);
    let mut scale = 0;
    let mut best = f64::INFINITY;
    for (j, spec) in layout.scales.iter().enumerate() {
        let d = (side / spec.anchor).ln().abs();
        if d < best {
            best = d;
            scale = j;
        }
    }
    let spec = layout.scales[scale];
    Ok(Assignment {
        instance,
        group: target.group,
        scale,
        cell_x: ((cx / spec.stride) as usize).min(spec.grid - 1),
        cell_y: ((cy / spec.stride) as usize).min(spec.grid - 1),
        gt: b,
    })
}

pub fn assign_all(layout: &HeadLayout, targets: &[Target]) -> Result<Vec<Assignment>> {
    targets.iter().enumerate().map(|(n, t)| assign(layout, n, t)).collect()
}

/// One group's prediction at an assigned cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRecord {
    pub group: usize,
    pub bbox: BBox,
    pub objectness: f64,
    pub class_logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaSample {
    pub assignment: Assignment,
    /// All N groups in class order.
    pub groups: Vec<GroupRecord>,
}

impl MetaSample {
    pub fn positive(&self) -> &GroupRecord {
        &self.groups[self.assignment.group]
    }

    pub fn negatives(&self) -> impl Iterator<Item = &GroupRecord> {
        let t = self.assignment.group;
        self.groups.iter().filter(move |r| r.group != t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaSampleSet {
    pub num_groups: usize,
    pub samples: Vec<MetaSample>,
}

impl MetaSampleSet {
    pub fn positive_count(&self) -> usize {
        self.samples.len()
    }

    pub fn negative_count(&self) -> usize {
        self.samples.iter().map(|s| s.negatives().count()).sum()
    }
}

pub fn meta_sample(head: &HeadOutput, targets: &[Target]) -> Result<MetaSampleSet> {
    let layout = head.layout;
    let samples = assign_all(&layout, targets)?
        .into_iter()
        .map(|a| {
            let cell = a.cell(&layout);
            let groups = (0..head.num_groups())
                .map(|i| {
                    let p = head.cell(i, a.scale, cell);
                    GroupRecord {
                        group: i,
                        bbox: p.bbox,
                        objectness: p.objectness,
                        class_logits: p.class_logits,
                    }
                })
                .collect();
            MetaSample { assignment: a, groups }
        })
        .collect();
    Ok(MetaSampleSet {
        num_groups: head.num_groups(),
        samples,
    })
}

/// Per-instance inputs of the meta-cross loss: box quality `l[i]`, objectness
/// `o[i]` and the class-logit matrix `s[i][j]` (row = group, column = class).
#[derive(Debug, Clone, PartialEq)]
pub struct ZOutputs {
    pub group: usize,
    pub l: Vec<f64>,
    pub o: Vec<f64>,
    pub s: Vec<Vec<f64>>,
}

fn check_gt(gt: &BBox) -> Result<()> {
    if !(gt.width() > 0.0 && gt.height() > 0.0) {
        return Err(Error::InvalidArgument(format!("degenerate ground-truth box {gt:?}")));
    }
    Ok(())
}

pub fn z_transform(samples: &MetaSampleSet) -> Result<Vec<ZOutputs>> {
    if samples.samples.is_empty() {
        return Err(Error::InvalidArgument("z_transform needs at least one sample".into()));
    }
    samples
        .samples
        .iter()
        .map(|s| {
            check_gt(&s.assignment.gt)?;
            Ok(ZOutputs {
                group: s.assignment.group,
                l: s.groups.iter().map(|r| r.bbox.iou(&s.assignment.gt)).collect(),
                o: s.groups.iter().map(|r| r.objectness).collect(),
                s: s.groups.iter().map(|r| r.class_logits.clone()).collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_box: f64,
    pub l_obj: f64,
    pub l_cls: f64,
    pub l_meta: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn csv_row(&self, epoch: usize, step: usize) -> String {
        let mut s = String::new();
        write!(
            s,
            "{epoch},{step},{},{},{},{},{}",
            self.l_box, self.l_obj, self.l_cls, self.l_meta, self.total
        )
        .expect("string write");
        s
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be a finite value >= 0, got {lambda}")));
    }
    Ok(())
}

/// `l_box + l_obj + l_cls + lambda * l_meta`, summed left to right.
pub fn total_loss(l_box: f64, l_obj: f64, l_cls: f64, l_meta: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(l_box + l_obj + l_cls + lambda * l_meta)
}

/// Scalar loss nodes for one query image.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub l_box: NodeId,
    pub l_obj: NodeId,
    pub l_cls: NodeId,
    pub l_meta: NodeId,
    pub total: NodeId,
}

impl LossNodes {
    pub fn values(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            l_box: g.value(self.l_box).item(),
            l_obj: g.value(self.l_obj).item(),
            l_cls: g.value(self.l_cls).item(),
            l_meta: g.value(self.l_meta).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// Indicator vector of length `n` with a 1 at `index`.
pub fn onehot(index: usize, n: usize) -> Vec<f64> {
    (0..n).map(|i| if i == index { 1.0 } else { 0.0 }).collect()
}

/// Cross-entropy against `onehot_index` with the `1/N` factor kept.
fn scaled_ce(g: &mut Graph, logits: NodeId, onehot_index: usize) -> Result<NodeId> {
    let n = g.value(logits).len();
    let p = g.softmax(logits)?;
    let pt = g.gather(p, &[onehot_index])?;
    let lp = g.ln_floor(pt, SOFTMAX_FLOOR);
    Ok(g.scale(lp, -1.0 / n as f64))
}

/// Meta-cross loss for one instance from its Z vectors on the graph.
pub fn meta_cross_nodes(g: &mut Graph, l: NodeId, o: NodeId, s_row: NodeId, t: usize, c: usize) -> Result<NodeId> {
    let a = scaled_ce(g, l, t)?;
    let b = scaled_ce(g, o, t)?;
    let d = scaled_ce(g, s_row, c)?;
    let ab = g.add(a, b)?;
    g.add(ab, d)
}

pub fn meta_cross_loss(z: &ZOutputs, t: usize, c: usize) -> Result<f64> {
    let n = z.l.len();
    if z.o.len() != n || z.s.len() != n || z.s.iter().any(|r| r.len() != n) {
        return Err(Error::shape("meta_cross_loss", format!("Z outputs are not {n}-square")));
    }
    if t >= n || c >= n {
        return Err(Error::InvalidArgument(format!("indices ({t}, {c}) out of range for N = {n}")));
    }
    let mut g = Graph::new();
    let l = g.constant(crate::Tensor::from_vec(z.l.clone()));
    let o = g.constant(crate::Tensor::from_vec(z.o.clone()));
    let s = g.constant(crate::Tensor::from_vec(z.s[t].clone()));
    let m = meta_cross_nodes(&mut g, l, o, s, t, c)?;
    Ok(g.value(m).item())
}

/// Which class scores at a matched cell receive classification targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassTargets {
    /// Every entry of the N x N group/class grid; only (t, t) is positive.
    #[default]
    Grid,
    /// Only the true-class column across groups.
    Column,
    /// The true-class column plus every group's own-class score.
    Cross,
}

/// Box regression objective on the true group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxLoss {
    /// `1 - IoU`.
    Iou,
    /// `1 - IoU` plus the normalized squared center distance.
    #[default]
    Diou,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub class_targets: ClassTargets,
    pub box_loss: BoxLoss,
    /// Weight of positive targets in the objectness and class cross-entropies,
    /// which stay weighted means. 1 gives the plain mean.
    pub positive_weight: f64,
}

impl LossConfig {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            class_targets: ClassTargets::default(),
            box_loss: BoxLoss::default(),
            positive_weight: 1.0,
        }
    }
}

fn weighted_bce(g: &mut Graph, logits: NodeId, targets: &[f64], positive_weight: f64) -> Result<NodeId> {
    let w: Vec<f64> = targets.iter().map(|&t| if t > 0.5 { positive_weight } else { 1.0 }).collect();
    g.bce_weighted(logits, targets, &w)
}

fn class_term(
    g: &mut Graph,
    layout: &HeadLayout,
    head: &HeadNodes,
    a: &Assignment,
    true_col: &[NodeId],
    config: &LossConfig,
) -> Result<NodeId> {
    let n = layout.num_classes;
    let pw = config.positive_weight;
    match config.class_targets {
        ClassTargets::Column => {
            let col = g.concat(true_col)?;
            weighted_bce(g, col, &onehot(a.group, n), pw)
        }
        ClassTargets::Cross => {
            let cell = a.cell(layout);
            let mut parts = true_col.to_vec();
            let mut targets = onehot(a.group, n);
            for (i, maps) in head.maps.iter().enumerate() {
                if i != a.group {
                    parts.push(g.gather(maps[a.scale], &[layout.index(a.scale, BOX_CHANNELS + i, cell)])?);
                    targets.push(0.0);
                }
            }
            let v = g.concat(&parts)?;
            weighted_bce(g, v, &targets, pw)
        }
        ClassTargets::Grid => {
            let cell = a.cell(layout);
            let idx: Vec<usize> = (0..n).map(|j| layout.index(a.scale, BOX_CHANNELS + j, cell)).collect();
            let mut rows = Vec::with_capacity(n);
            let mut targets = vec![0.0; n * n];
            for maps in &head.maps {
                rows.push(g.gather(maps[a.scale], &idx)?);
            }
            targets[a.group * n + a.group] = 1.0;
            let grid = g.concat(&rows)?;
            weighted_bce(g, grid, &targets, pw)
        }
    }
}

fn decode_nodes(g: &mut Graph, layout: &HeadLayout, a: &Assignment, raw: NodeId) -> Result<NodeId> {
    let spec = layout.scales[a.scale];
    let txy = g.gather(raw, &[0, 1])?;
    let sxy = g.sigmoid(txy);
    let sxy = g.scale(sxy, spec.stride);
    let origin = g.constant(crate::Tensor::from_vec(vec![
        a.cell_x as f64 * spec.stride,
        a.cell_y as f64 * spec.stride,
    ]));
    let center = g.add(sxy, origin)?;
    let twh = g.gather(raw, &[2, 3])?;
    let twh = g.clamp(twh, -EXP_CLAMP, EXP_CLAMP);
    let wh = g.exp(twh);
    let half = g.scale(wh, spec.anchor / 2.0);
    let lo = g.sub(center, half)?;
    let hi = g.add(center, half)?;
    g.concat(&[lo, hi])
}

fn zero(g: &mut Graph) -> NodeId {
    g.constant(crate::Tensor::scalar(0.0))
}

/// Builds the per-image loss on top of the head maps in `head`.
///
/// An image without targets contributes constant zeros.
pub fn image_loss(g: &mut Graph, head: &HeadNodes, targets: &[Target], config: &LossConfig) -> Result<LossNodes> {
    check_lambda(config.lambda)?;
    if !(config.positive_weight > 0.0 && config.positive_weight.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "positive_weight must be > 0, got {}",
            config.positive_weight
        )));
    }
    let lambda = config.lambda;
    let layout = head.layout;
    let n = layout.num_classes;
    if head.maps.len() != n {
        return Err(Error::shape("image_loss", format!("{} groups for {n} classes", head.maps.len())));
    }
    let assignments = assign_all(&layout, targets)?;
    if assignments.is_empty() {
        let z = zero(g);
        return Ok(LossNodes {
            l_box: z,
            l_obj: z,
            l_cls: z,
            l_meta: z,
            total: z,
        });
    }
    for a in &assignments {
        check_gt(&a.gt)?;
    }
    let inv = 1.0 / assignments.len() as f64;

    let mut box_terms = Vec::new();
    let mut cls_terms = Vec::new();
    let mut meta_terms = Vec::new();
    for a in &assignments {
        let cell = a.cell(&layout);
        let mut ious = Vec::with_capacity(n);
        let mut boxes = Vec::with_capacity(n);
        let mut objs = Vec::with_capacity(n);
        let mut true_col = Vec::with_capacity(n);
        let mut true_row = None;
        for (i, maps) in head.maps.iter().enumerate() {
            let idx: Vec<usize> = (0..layout.channels()).map(|ch| layout.index(a.scale, ch, cell)).collect();
            let raw = g.gather(maps[a.scale], &idx)?;
            let bbox = decode_nodes(g, &layout, a, raw)?;
            ious.push(g.iou(bbox, a.gt.to_array())?);
            boxes.push(bbox);
            objs.push(g.gather(raw, &[OBJ_CHANNEL])?);
            true_col.push(g.gather(raw, &[BOX_CHANNELS + a.group])?);
            if i == a.group {
                let cls: Vec<usize> = (BOX_CHANNELS..BOX_CHANNELS + n).collect();
                true_row = Some(g.gather(raw, &cls)?);
            }
        }
        let one_minus = g.scale(ious[a.group], -1.0);
        let mut term = g.offset(one_minus, 1.0);
        if config.box_loss == BoxLoss::Diou {
            let penalty = g.center_penalty(boxes[a.group], a.gt.to_array())?;
            term = g.add(term, penalty)?;
        }
        box_terms.push(term);

        cls_terms.push(class_term(g, &layout, head, a, &true_col, config)?);

        let l = g.concat(&ious)?;
        let o = g.concat(&objs)?;
        let row = true_row.expect("true group present");
        meta_terms.push(meta_cross_nodes(g, l, o, row, a.group, a.group)?);
    }

    // Objectness over every cell of each group that is positive for some instance.
    let mut positive_groups: Vec<usize> = assignments.iter().map(|a| a.group).collect();
    positive_groups.sort_unstable();
    positive_groups.dedup();
    let mut obj_parts = Vec::new();
    let mut obj_targets = Vec::new();
    for &grp in &positive_groups {
        for j in 0..NUM_SCALES {
            let cells = layout.cells(j);
            let idx: Vec<usize> = (0..cells).map(|c| layout.index(j, OBJ_CHANNEL, c)).collect();
            obj_parts.push(g.gather(head.maps[grp][j], &idx)?);
            let mut t = vec![0.0; cells];
            for a in assignments.iter().filter(|a| a.group == grp && a.scale == j) {
                t[a.cell(&layout)] = 1.0;
            }
            obj_targets.extend(t);
        }
    }
    let obj_logits = g.concat(&obj_parts)?;
    let l_obj = weighted_bce(g, obj_logits, &obj_targets, config.positive_weight)?;

    let mean_of = |g: &mut Graph, terms: &[NodeId]| -> Result<NodeId> {
        let v = g.concat(terms)?;
        let s = g.sum(v);
        Ok(g.scale(s, inv))
    };
    let l_box = mean_of(g, &box_terms)?;
    let l_cls = mean_of(g, &cls_terms)?;
    let l_meta = mean_of(g, &meta_terms)?;
    let total = total_nodes(g, l_box, l_obj, l_cls, l_meta, lambda)?;
    Ok(LossNodes {
        l_box,
        l_obj,
        l_cls,
        l_meta,
        total,
    })
}

pub fn total_nodes(g: &mut Graph, l_box: NodeId, l_obj: NodeId, l_cls: NodeId, l_meta: NodeId, lambda: f64) -> Result<NodeId> {
    let bo = g.add(l_box, l_obj)?;
    let base = g.add(bo, l_cls)?;
    let weighted = g.scale(l_meta, lambda);
    g.add(base, weighted)
}

/// Loss components for fixed head values.
pub fn loss_breakdown(head: &HeadOutput, targets: &[Target], config: &LossConfig) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let nodes = HeadNodes {
        layout: head.layout,
        maps: head.maps.iter().map(|m| m.clone().map(|t| g.constant(t))).collect(),
    };
    Ok(image_loss(&mut g, &nodes, targets, config)?.values(&g))
}

/// `(l_box, l_obj, l_cls)` for fixed head values.
pub fn base_losses(head: &HeadOutput, targets: &[Target], class_targets: ClassTargets) -> Result<(f64, f64, f64)> {
    let b = loss_breakdown(
        head,
        targets,
        &LossConfig {
            class_targets,
            ..LossConfig::new(0.0)
        },
    )?;
    Ok((b.l_box, b.l_obj, b.l_cls))
}
