//! 11-point interpolated AP, base/novel/all means and the ECES weighted score.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::episodes::ClassSplit;
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub image: usize,
    pub bbox: BBox,
}

/// Precision/recall after each detection, highest confidence first.
///
/// Each detection takes the unmatched ground truth of its image with the
/// highest IoU at or above `iou_thr`; equal IoUs go to the earlier ground truth.
pub fn pr_curve(detections: &[ScoredBox], ground_truths: &[GtBox], iou_thr: f64) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].confidence.total_cmp(&detections[a].confidence));
    let mut matched = vec![false; ground_truths.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    let total = ground_truths.len() as f64;
    let mut curve = Vec::with_capacity(detections.len());
    for i in order {
        let d = &detections[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in ground_truths.iter().enumerate() {
            if matched[g] || gt.image != d.image {
                continue;
            }
            let iou = d.bbox.iou(&gt.bbox);
            if iou >= iou_thr && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, _)) => {
                matched[g] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        curve.push((tp as f64 / (tp + fp) as f64, tp as f64 / total));
    }
    curve
}

/// Mean over recall levels 0, 0.1, ..., 1 of the best precision reached at
/// that recall or above; `None` for a class without ground truth.
pub fn ap_11point(detections: &[ScoredBox], ground_truths: &[GtBox], iou_thr: f64) -> Result<Option<f64>> {
    if !(iou_thr > 0.0 && iou_thr < 1.0) {
        return Err(Error::InvalidArgument(format!("iou threshold must lie in (0, 1), got {iou_thr}")));
    }
    if ground_truths.is_empty() {
        return Ok(None);
    }
    let curve = pr_curve(detections, ground_truths, iou_thr);
    let mut sum = 0.0;
    for r in 0..=10 {
        let level = r as f64 / 10.0;
        // small slack so 0.3 recall counts as reaching the 0.3 level
        let p = curve
            .iter()
            .filter(|(_, rec)| *rec >= level - 1e-12)
            .map(|(p, _)| *p)
            .fold(0.0, f64::max);
        sum += p;
    }
    Ok(Some(sum / 11.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMeans {
    pub base: f64,
    pub novel: f64,
    pub all: f64,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn group_values(ap: &BTreeMap<u32, Option<f64>>, ids: &[u32]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        match ap.get(id) {
            None => return Err(Error::MissingClass(*id)),
            Some(Some(v)) => out.push(*v),
            Some(None) => {}
        }
    }
    Ok(out)
}

/// Unweighted means; classes reported as absent (`None`) are left out.
pub fn map_groups(ap: &BTreeMap<u32, Option<f64>>, split: &ClassSplit) -> Result<GroupMeans> {
    let base = group_values(ap, &split.base)?;
    let novel = group_values(ap, &split.novel)?;
    let all: Vec<f64> = base.iter().chain(&novel).copied().collect();
    Ok(GroupMeans {
        base: mean(&base),
        novel: mean(&novel),
        all: mean(&all),
    })
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Smallest positive integers with `base * w_base == novel * w_novel`.
pub fn eces_weights(base: usize, novel: usize) -> Result<(usize, usize)> {
    if base == 0 || novel == 0 {
        return Err(Error::InvalidArgument(format!("class counts must be positive, got ({base}, {novel})")));
    }
    let g = gcd(base, novel);
    Ok((novel / g, base / g))
}

pub fn eces(ap: &BTreeMap<u32, Option<f64>>, split: &ClassSplit) -> Result<f64> {
    Ok(eces_parts(ap, split)?.score)
}

struct EcesParts {
    b: usize,
    n: usize,
    w_b: usize,
    w_n: usize,
    score: f64,
}

fn eces_parts(ap: &BTreeMap<u32, Option<f64>>, split: &ClassSplit) -> Result<EcesParts> {
    let base = group_values(ap, &split.base)?;
    let novel = group_values(ap, &split.novel)?;
    let (b, n) = (base.len(), novel.len());
    if b == 0 || n == 0 {
        // one group has no evaluable class; fall back to the other group's mean
        let score = mean(&base.iter().chain(&novel).copied().collect::<Vec<_>>());
        return Ok(EcesParts { b, n, w_b: 1, w_n: 1, score });
    }
    let (w_b, w_n) = eces_weights(b, n)?;
    let num = base.iter().sum::<f64>() * w_b as f64 + novel.iter().sum::<f64>() * w_n as f64;
    let score = num / (b * w_b + n * w_n) as f64;
    Ok(EcesParts { b, n, w_b, w_n, score })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: u32,
    pub novel: bool,
    pub ap: Option<f64>,
    pub ground_truths: usize,
    pub detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub per_class: Vec<ClassAp>,
    pub map_base: f64,
    pub map_novel: f64,
    pub map_all: f64,
    pub b: usize,
    pub n: usize,
    pub w_b: usize,
    pub w_n: usize,
    pub em_ap: f64,
}

impl EvalReport {
    /// Classes without ground truth, which are left out of every mean.
    pub fn absent_classes(&self) -> Vec<u32> {
        self.per_class.iter().filter(|c| c.ap.is_none()).map(|c| c.class).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,group,ap,ground_truths,detections\n");
        for c in &self.per_class {
            let ap = c.ap.map_or_else(|| "absent".to_string(), |v| v.to_string());
            let group = if c.novel { "novel" } else { "base" };
            out.push_str(&format!("{},{group},{ap},{},{}\n", c.class, c.ground_truths, c.detections));
        }
        out.push_str(&format!(
            "summary,map_base={},map_novel={},map_all={},em_ap={}\n",
            self.map_base, self.map_novel, self.map_all, self.em_ap
        ));
        out
    }
}

/// Per-class AP for `(class, image, box, confidence)` detections against
/// `(class, image, box)` ground truths, then grouped by `split`.
pub fn evaluate(
    detections: &[(u32, ScoredBox)],
    ground_truths: &[(u32, GtBox)],
    split: &ClassSplit,
    iou_thr: f64,
) -> Result<EvalReport> {
    let mut per_class = Vec::new();
    let mut ap = BTreeMap::new();
    for class in split.all() {
        let dets: Vec<ScoredBox> = detections.iter().filter(|(c, _)| *c == class).map(|(_, d)| *d).collect();
        let gts: Vec<GtBox> = ground_truths.iter().filter(|(c, _)| *c == class).map(|(_, g)| *g).collect();
        let value = ap_11point(&dets, &gts, iou_thr)?;
        ap.insert(class, value);
        per_class.push(ClassAp {
            class,
            novel: split.is_novel(class),
            ap: value,
            ground_truths: gts.len(),
            detections: dets.len(),
        });
    }
    let means = map_groups(&ap, split)?;
    let parts = eces_parts(&ap, split)?;
    Ok(EvalReport {
        iou_threshold: iou_thr,
        per_class,
        map_base: means.base,
        map_novel: means.novel,
        map_all: means.all,
        b: parts.b,
        n: parts.n,
        w_b: parts.w_b,
        w_n: parts.w_n,
        em_ap: parts.score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split(base: &[u32], novel: &[u32]) -> ClassSplit {
        ClassSplit {
            base: base.to_vec(),
            novel: novel.to_vec(),
        }
    }

    #[test]
    fn weights_examples() {
        assert_eq!(eces_weights(7, 3).unwrap(), (3, 7));
        assert_eq!(eces_weights(15, 5).unwrap(), (1, 3));
        assert_eq!(eces_weights(4, 4).unwrap(), (1, 1));
        assert!(eces_weights(0, 3).is_err());
    }

    #[test]
    fn group_means_examples() {
        let s = split(&[0, 1], &[2]);
        let ap = BTreeMap::from([(0, Some(1.0)), (1, Some(0.0)), (2, Some(1.0))]);
        let m = map_groups(&ap, &s).unwrap();
        assert_eq!((m.base, m.novel), (0.5, 1.0));
        assert!((m.all - 2.0 / 3.0).abs() < 1e-15);
        let missing = BTreeMap::from([(0, Some(1.0))]);
        assert!(map_groups(&missing, &s).is_err());
    }

    #[test]
    fn eces_worked_example() {
        let base: Vec<u32> = (0..7).collect();
        let s = split(&base, &[7, 8, 9]);
        let ap: BTreeMap<u32, Option<f64>> = (0..10).map(|c| (c, Some(if c < 7 { 0.8 } else { 0.4 }))).collect();
        assert!((eces(&ap, &s).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty_detectors() {
        let gts: Vec<GtBox> = (0..4)
            .map(|i| GtBox {
                image: i,
                bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
            })
            .collect();
        let dets: Vec<ScoredBox> = gts
            .iter()
            .map(|g| ScoredBox {
                image: g.image,
                bbox: g.bbox,
                confidence: 0.9,
            })
            .collect();
        assert_eq!(ap_11point(&dets, &gts, 0.5).unwrap(), Some(1.0));
        assert_eq!(ap_11point(&[], &gts, 0.5).unwrap(), Some(0.0));
        assert_eq!(ap_11point(&dets, &[], 0.5).unwrap(), None);
        assert!(ap_11point(&dets, &gts, 1.0).is_err());
    }

    #[test]
    fn hand_computed_pr_case() {
        // 4 gts in 4 images; detections by confidence: TP, FP, TP, FP, FP, TP
        let g = |i| GtBox {
            image: i,
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
        };
        let gts = vec![g(0), g(1), g(2), g(3)];
        let hit = BBox::new(0.0, 0.0, 10.0, 9.0);
        let miss = BBox::new(30.0, 30.0, 40.0, 40.0);
        let d = |image, bbox, confidence| ScoredBox { image, bbox, confidence };
        let dets = vec![
            d(0, hit, 0.95),
            d(1, miss, 0.9),
            d(1, hit, 0.8),
            d(2, miss, 0.7),
            d(3, miss, 0.6),
            d(2, hit, 0.5),
        ];
        // precision/recall: (1, .25) (.5, .25) (.667, .5) (.5, .5) (.4, .5) (.5, .75)
        // levels 0..0.2 -> 1, 0.3..0.5 -> 2/3, 0.6..0.7 -> 0.5, 0.8..1.0 -> 0
        let expect = (3.0 * 1.0 + 3.0 * (2.0 / 3.0) + 2.0 * 0.5) / 11.0;
        let ap = ap_11point(&dets, &gts, 0.5).unwrap().unwrap();
        assert!((ap - expect).abs() < 1e-12, "{ap} vs {expect}");
    }

    #[test]
    fn absent_class_is_excluded() {
        let s = split(&[0, 1], &[2]);
        let gts = vec![(0, GtBox { image: 0, bbox: BBox::new(0.0, 0.0, 8.0, 8.0) }), (2, GtBox { image: 0, bbox: BBox::new(20.0, 20.0, 30.0, 30.0) })];
        let dets = vec![(0, ScoredBox { image: 0, bbox: BBox::new(0.0, 0.0, 8.0, 8.0), confidence: 0.7 })];
        let r = evaluate(&dets, &gts, &s, 0.5).unwrap();
        assert_eq!(r.absent_classes(), vec![1]);
        assert_eq!((r.map_base, r.map_novel, r.map_all), (1.0, 0.0, 0.5));
        assert_eq!((r.b, r.n, r.em_ap), (1, 1, 0.5));
        assert!(r.to_csv().contains("1,base,absent,0,0"));
    }
}
