//! Axis-aligned detection evaluation: IoU, greedy matching, AP and mAP.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    BoxCxCyWh, CategoryId, DatasetIndex, Detection, DetectionMap, GroundTruthObject,
};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no category has ground truth; mAP is undefined")]
    NoDefinedCategories,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMode {
    /// Area under the monotone precision envelope (VOC 2010+).
    #[default]
    AllPoints,
    /// Mean envelope precision at recall 0, 0.1, ..., 1 (VOC 2007).
    ElevenPoint,
}

pub fn iou(a: &BoxCxCyWh, b: &BoxCxCyWh) -> f64 {
    let Some(inter) = a.intersection(b) else {
        return 0.0;
    };
    let i = inter.area();
    let union = a.area() + b.area() - i;
    if union > 0.0 {
        (i / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Result of matching one image's detections against its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchOutcome {
    /// TP flag per detection, in input order.
    pub true_positive: Vec<bool>,
    /// Ground-truth index claimed by each TP.
    pub assignment: Vec<Option<usize>>,
    pub n_gt: BTreeMap<CategoryId, usize>,
}

/// Greedy matching. `detections` must already be in descending-score
/// order; each takes the highest-IoU still-unmatched ground truth of its
/// category with IoU at least `iou_threshold`.
pub fn match_detections(
    detections: &[Detection],
    ground_truth: &[GroundTruthObject],
    iou_threshold: f64,
) -> MatchOutcome {
    let mut taken = vec![false; ground_truth.len()];
    let mut true_positive = Vec::with_capacity(detections.len());
    let mut assignment = Vec::with_capacity(detections.len());
    for det in detections {
        let db = det.bbox();
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in ground_truth.iter().enumerate() {
            if taken[g] || gt.category != det.category {
                continue;
            }
            let overlap = iou(&db, &gt.bbox());
            if overlap >= iou_threshold && best.is_none_or(|(_, b)| overlap > b) {
                best = Some((g, overlap));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
        }
        true_positive.push(best.is_some());
        assignment.push(best.map(|(g, _)| g));
    }
    let mut n_gt = BTreeMap::new();
    for gt in ground_truth {
        *n_gt.entry(gt.category).or_insert(0) += 1;
    }
    MatchOutcome {
        true_positive,
        assignment,
        n_gt,
    }
}

/// AP from TP/FP flags in descending-score order. `None` when `n_gt == 0`.
pub fn average_precision(flags: &[bool], n_gt: usize, mode: ApMode) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let points: Vec<(f64, f64)> = flags
        .iter()
        .enumerate()
        .map(|(i, &is_tp)| {
            tp += usize::from(is_tp);
            (tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64)
        })
        .collect();
    // envelope[i] = max precision at rank >= i
    let mut envelope = vec![0.0; points.len()];
    let mut running: f64 = 0.0;
    for i in (0..points.len()).rev() {
        running = running.max(points[i].1);
        envelope[i] = running;
    }
    let ap = match mode {
        ApMode::AllPoints => {
            let step = 1.0 / n_gt as f64;
            flags
                .iter()
                .zip(&envelope)
                .filter(|(is_tp, _)| **is_tp)
                .map(|(_, p)| step * p)
                .sum()
        }
        ApMode::ElevenPoint => {
            let total: f64 = (0..=10)
                .map(|t| {
                    let threshold = t as f64 / 10.0;
                    points
                        .iter()
                        .position(|(r, _)| *r >= threshold - 1e-12)
                        .map_or(0.0, |i| envelope[i])
                })
                .sum();
            total / 11.0
        }
    };
    Some(ap.clamp(0.0, 1.0))
}

/// Mean over defined (`Some`) category APs.
pub fn mean_ap(aps: &[Option<f64>]) -> Result<f64, EvalError> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(EvalError::NoDefinedCategories);
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub category: String,
    pub ap: Option<f64>,
    pub n_gt: usize,
    pub n_det: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_category: Vec<CategoryAp>,
    pub map: Option<f64>,
    pub iou_threshold: f64,
    pub mode: ApMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub iou_threshold: f64,
    pub mode: ApMode,
    /// Detections below this confidence are discarded before matching.
    pub min_score: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            mode: ApMode::AllPoints,
            min_score: 0.0,
        }
    }
}

/// Evaluates detections against every image of `index`.
pub fn evaluate(
    index: &DatasetIndex,
    detections: &DetectionMap,
    options: &EvalOptions,
) -> EvalReport {
    let c = index.category_count();
    // (score, tp) per category, concatenated in image order
    let mut per_cat: Vec<Vec<(f64, bool)>> = vec![Vec::new(); c];
    let mut n_gt = vec![0usize; c];
    let empty = Vec::new();
    for record in index.images() {
        for obj in &record.objects {
            n_gt[obj.category.0] += 1;
        }
        let dets: Vec<Detection> = detections
            .get(&record.image_id)
            .unwrap_or(&empty)
            .iter()
            .filter(|d| d.score >= options.min_score)
            .cloned()
            .collect();
        let outcome = match_detections(&dets, &record.objects, options.iou_threshold);
        for (d, tp) in dets.iter().zip(outcome.true_positive) {
            per_cat[d.category.0].push((d.score, tp));
        }
    }
    let per_category: Vec<CategoryAp> = per_cat
        .into_iter()
        .enumerate()
        .map(|(i, mut list)| {
            list.sort_by(|a, b| b.0.total_cmp(&a.0));
            let flags: Vec<bool> = list.iter().map(|(_, tp)| *tp).collect();
            CategoryAp {
                category: index.category_name(CategoryId(i)).to_string(),
                ap: average_precision(&flags, n_gt[i], options.mode),
                n_gt: n_gt[i],
                n_det: flags.len(),
            }
        })
        .collect();
    let aps: Vec<Option<f64>> = per_category.iter().map(|c| c.ap).collect();
    EvalReport {
        map: mean_ap(&aps).ok(),
        per_category,
        iou_threshold: options.iou_threshold,
        mode: options.mode,
    }
}

impl EvalReport {
    pub fn aps(&self) -> Vec<Option<f64>> {
        self.per_category.iter().map(|c| c.ap).collect()
    }

    /// CSV `category,ap,n_gt` plus a `mAP,<value>,<total gt>` summary row.
    /// Undefined APs are written as empty fields.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "category,ap,n_gt")?;
        for c in &self.per_category {
            let ap = c.ap.map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{}", c.category, ap, c.n_gt)?;
        }
        let total: usize = self.per_category.iter().map(|c| c.n_gt).sum();
        let map = self.map.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "mAP,{map},{total}")
    }
}
