//! Orientation and detection metrics over per-image prediction/ground-truth
//! matchings.
//!
//! Matching is score-greedy: predictions in descending score order each claim
//! the unclaimed ground truth with the highest IoU at or above the threshold.
//! Orientation error is measured on matched pairs only; misses show up in
//! recall. AP uses 101-point interpolation of the precision envelope.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::dataset::AnnotatedInstance;
use crate::error::Result;
use crate::kinds::{iou, wrapped_deg_error};
use crate::postprocess::Detection;

pub const ACC_THRESHOLDS: [f64; 5] = [5.0, 15.0, 22.5, 30.0, 45.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedPair {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageMatch {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// Prediction indices by descending score, ties in input order.
fn score_order(preds: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    order
}

/// One image's greedy matching. Pairs are listed in the order they were made.
pub fn match_image(preds: &[Detection], gts: &[AnnotatedInstance], iou_thresh: f64) -> ImageMatch {
    let mut claimed = vec![false; gts.len()];
    let mut out = ImageMatch::default();
    for p in score_order(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if claimed[g] {
                continue;
            }
            let v = iou(&preds[p].bbox, &gt.bbox);
            if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, v)) => {
                claimed[g] = true;
                out.pairs.push(MatchedPair {
                    pred: p,
                    gt: g,
                    iou: v,
                });
            }
            None => out.unmatched_preds.push(p),
        }
    }
    out.unmatched_preds.sort_unstable();
    out.unmatched_gts = (0..gts.len()).filter(|&g| !claimed[g]).collect();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OrientationMetrics {
    pub pairs: usize,
    /// Absent when there are no pairs.
    pub mae: Option<f64>,
    /// Fraction with error `<= X` for each of [`ACC_THRESHOLDS`].
    pub acc: Option<[f64; 5]>,
}

/// Pairs are `(predicted, ground truth)` degrees.
pub fn orientation_metrics(pairs: &[(f64, f64)]) -> Result<OrientationMetrics> {
    if pairs.is_empty() {
        return Ok(OrientationMetrics {
            pairs: 0,
            mae: None,
            acc: None,
        });
    }
    let errors = pairs
        .iter()
        .map(|&(p, g)| wrapped_deg_error(p, g))
        .collect::<Result<Vec<_>>>()?;
    let n = errors.len() as f64;
    let mae = errors.iter().sum::<f64>() / n;
    let acc = ACC_THRESHOLDS.map(|x| errors.iter().filter(|&&e| e <= x).count() as f64 / n);
    Ok(OrientationMetrics {
        pairs: pairs.len(),
        mae: Some(mae),
        acc: Some(acc),
    })
}

// ---------------------------------------------------------------------------
// dataset-level evaluation

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalParams {
    pub iou_thresh: f64,
    /// Predictions at or below this score are ignored for recall and
    /// orientation metrics. AP always uses every prediction.
    pub conf_thresh: f64,
    pub exclude_weak: bool,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            conf_thresh: 0.25,
            exclude_weak: false,
        }
    }
}

struct ImageSet<'a> {
    preds: Vec<Detection>,
    gts: Vec<&'a AnnotatedInstance>,
}

fn group<'a>(preds: &[Detection], gts: &'a [AnnotatedInstance]) -> BTreeMap<u64, ImageSet<'a>> {
    let mut map: BTreeMap<u64, ImageSet<'a>> = BTreeMap::new();
    for g in gts {
        map.entry(g.image_id)
            .or_insert_with(|| ImageSet { preds: vec![], gts: vec![] })
            .gts
            .push(g);
    }
    for p in preds {
        map.entry(p.image_id)
            .or_insert_with(|| ImageSet { preds: vec![], gts: vec![] })
            .preds
            .push(*p);
    }
    map
}

/// A prediction's fate in the ranked list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Tp,
    Fp,
    /// Matched a ground truth excluded from scoring.
    Ignored,
}

fn image_gts(set: &ImageSet<'_>) -> Vec<AnnotatedInstance> {
    set.gts.iter().map(|g| **g).collect()
}

/// Ranked outcomes over all images, sorted by descending score with ties
/// broken by image id and then input position, so image order is irrelevant.
fn ranked_outcomes(
    images: &BTreeMap<u64, ImageSet<'_>>,
    iou_thresh: f64,
    exclude_weak: bool,
) -> (Vec<(f64, u64, usize, Outcome)>, usize) {
    let mut ranked = Vec::new();
    let mut n_gt = 0;
    for (&id, set) in images {
        let gts = image_gts(set);
        n_gt += gts.iter().filter(|g| !(exclude_weak && g.weak)).count();
        let m = match_image(&set.preds, &gts, iou_thresh);
        for pair in &m.pairs {
            let out = if exclude_weak && gts[pair.gt].weak {
                Outcome::Ignored
            } else {
                Outcome::Tp
            };
            ranked.push((set.preds[pair.pred].score, id, pair.pred, out));
        }
        for &p in &m.unmatched_preds {
            ranked.push((set.preds[p].score, id, p, Outcome::Fp));
        }
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    (ranked, n_gt)
}

/// 101-point interpolated AP from a ranked TP/FP list.
pub fn interpolated_ap(tp_flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &t in tp_flags {
        if t {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    Some(sum / 101.0)
}

fn ap_grouped(images: &BTreeMap<u64, ImageSet<'_>>, iou_thresh: f64, exclude_weak: bool) -> Option<f64> {
    let (ranked, n_gt) = ranked_outcomes(images, iou_thresh, exclude_weak);
    let flags: Vec<bool> = ranked
        .iter()
        .filter(|r| r.3 != Outcome::Ignored)
        .map(|r| r.3 == Outcome::Tp)
        .collect();
    interpolated_ap(&flags, n_gt)
}

pub fn average_precision(preds: &[Detection], gts: &[AnnotatedInstance], iou_thresh: f64) -> Option<f64> {
    ap_grouped(&group(preds, gts), iou_thresh, false)
}

pub const COCO_IOU_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

fn ap_coco_grouped(images: &BTreeMap<u64, ImageSet<'_>>, exclude_weak: bool) -> Option<f64> {
    let aps = COCO_IOU_THRESHOLDS
        .iter()
        .map(|&t| ap_grouped(images, t, exclude_weak))
        .collect::<Option<Vec<_>>>()?;
    Some(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Mean AP over IoU thresholds 0.50:0.05:0.95.
pub fn ap_coco(preds: &[Detection], gts: &[AnnotatedInstance]) -> Option<f64> {
    ap_coco_grouped(&group(preds, gts), false)
}

/// Fraction of ground truths matched by predictions scoring above
/// `conf_thresh`. Absent without ground truths.
pub fn recall(
    preds: &[Detection],
    gts: &[AnnotatedInstance],
    iou_thresh: f64,
    conf_thresh: f64,
) -> Option<f64> {
    let kept: Vec<Detection> = preds.iter().filter(|p| p.score > conf_thresh).copied().collect();
    let images = group(&kept, gts);
    let mut matched = 0;
    for set in images.values() {
        matched += match_image(&set.preds, &image_gts(set), iou_thresh).pairs.len();
    }
    (!gts.is_empty()).then(|| matched as f64 / gts.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalCounts {
    pub images: usize,
    pub gt: usize,
    pub predictions: usize,
    pub matched: usize,
    pub excluded_weak_gt: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalReport {
    pub mae_degrees: Option<f64>,
    pub acc: Option<[f64; 5]>,
    pub ap50: Option<f64>,
    pub ap50_95: Option<f64>,
    pub recall: Option<f64>,
    pub counts: EvalCounts,
}

pub fn evaluate(preds: &[Detection], gts: &[AnnotatedInstance], params: &EvalParams) -> Result<EvalReport> {
    let images = group(preds, gts);
    let mut pairs = Vec::new();
    let mut matched = 0;
    let mut n_gt = 0;
    let mut excluded = 0;
    for set in images.values() {
        let gts = image_gts(set);
        let kept: Vec<Detection> = set
            .preds
            .iter()
            .filter(|p| p.score > params.conf_thresh)
            .copied()
            .collect();
        let m = match_image(&kept, &gts, params.iou_thresh);
        for g in &gts {
            if params.exclude_weak && g.weak {
                excluded += 1;
            } else {
                n_gt += 1;
            }
        }
        for pair in &m.pairs {
            let gt = &gts[pair.gt];
            if params.exclude_weak && gt.weak {
                continue;
            }
            matched += 1;
            if let Some(o) = gt.orientation {
                pairs.push((kept[pair.pred].orientation, o.degrees()));
            }
        }
    }
    let ori = orientation_metrics(&pairs)?;
    Ok(EvalReport {
        mae_degrees: ori.mae,
        acc: ori.acc,
        ap50: ap_grouped(&images, params.iou_thresh, params.exclude_weak),
        ap50_95: ap_coco_grouped(&images, params.exclude_weak),
        recall: (n_gt > 0).then(|| matched as f64 / n_gt as f64),
        counts: EvalCounts {
            images: images.len(),
            gt: n_gt,
            predictions: preds.len(),
            matched,
            excluded_weak_gt: excluded,
        },
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn cell(v: Option<f64>, scale: f64, decimals: usize) -> String {
    match v {
        Some(v) => format!("{:.decimals$}", v * scale),
        None => "n/a".into(),
    }
}

/// Aligned table: MAE, Acc at each threshold, AP50, AP50:95, Recall.
impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut head = vec!["MAE".to_string()];
        head.extend(ACC_THRESHOLDS.iter().map(|t| format!("Acc-{t}")));
        head.extend(["AP50", "AP50:95", "Recall"].map(String::from));
        let mut row = vec![cell(self.mae_degrees, 1.0, 3)];
        for k in 0..ACC_THRESHOLDS.len() {
            row.push(cell(self.acc.map(|a| a[k]), 1.0, 3));
        }
        row.push(cell(self.ap50, 1.0, 3));
        row.push(cell(self.ap50_95, 1.0, 3));
        row.push(cell(self.recall, 1.0, 3));
        let widths: Vec<usize> = head.iter().zip(&row).map(|(h, r)| h.len().max(r.len())).collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join(" | ")
        };
        writeln!(f, "{}", line(&head))?;
        writeln!(
            f,
            "{}",
            widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-")
        )?;
        writeln!(f, "{}", line(&row))?;
        write!(
            f,
            "images={} gt={} predictions={} matched={} excluded_weak_gt={}",
            self.counts.images,
            self.counts.gt,
            self.counts.predictions,
            self.counts.matched,
            self.counts.excluded_weak_gt
        )
    }
}
