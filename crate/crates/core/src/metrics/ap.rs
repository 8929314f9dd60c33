use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{GroundTruth, Prediction};
use crate::extractor::boxes::iou;
use crate::tokenizer::normalize;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Detections kept per image and class for AP.
pub const MAX_DETS: usize = 100;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar1: f64,
    pub ar10: f64,
    /// Classes that had ground truth and entered the means.
    pub classes_evaluated: usize,
}

/// 101-point interpolated AP from TP flags in descending score order.
pub fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    let mut idx = 0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        while idx < recall.len() && recall[idx] < r {
            idx += 1;
        }
        if idx < recall.len() {
            total += precision[idx];
        }
    }
    total / 101.0
}

/// Sorts indices by descending score, keeping input order on ties.
pub(crate) fn order_by_score(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Greedy matching of `preds` (already in rank order) to `gts` of one image:
/// each prediction takes the unmatched ground truth of maximum IoU `>= thresh`
/// (lowest index on ties).
pub(crate) fn greedy_match(preds: &[&Prediction], gts: &[&GroundTruth], thresh: f64) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    preds
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if taken[j] {
                    continue;
                }
                let o = iou(&p.bbox, &g.bbox);
                if o >= thresh && best.map_or(true, |(_, bo)| o > bo) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((j, _)) => {
                    taken[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Class-aware COCO-style box AP/AR. Predictions whose normalised text is not
/// a listed class are dropped; classes without ground truth are excluded from
/// every mean.
pub fn detection_ap(preds: &[Prediction], gts: &[GroundTruth], classes: &[String]) -> DetectionMetrics {
    let class_names: Vec<String> = classes.iter().map(|c| normalize(c)).collect();
    let class_of = |t: &str| {
        let n = normalize(t);
        class_names.iter().position(|c| *c == n)
    };
    let thresholds = coco_iou_thresholds();

    // class -> image -> (preds, gts)
    type PerImage<'a> = BTreeMap<u64, (Vec<&'a Prediction>, Vec<&'a GroundTruth>)>;
    let mut grouped: HashMap<usize, PerImage<'_>> = HashMap::new();
    for g in gts {
        if let Some(c) = class_of(&g.text) {
            grouped.entry(c).or_default().entry(g.image_id).or_default().1.push(g);
        }
    }
    for p in preds {
        if let Some(c) = class_of(&p.text) {
            grouped.entry(c).or_default().entry(p.image_id).or_default().0.push(p);
        }
    }

    let mut sums = [0.0f64; 5];
    let mut sum_ap_all = 0.0;
    let mut evaluated = 0usize;
    for c in 0..class_names.len() {
        let Some(per_image) = grouped.get(&c) else { continue };
        let num_gt: usize = per_image.values().map(|(_, g)| g.len()).sum();
        if num_gt == 0 {
            continue;
        }
        evaluated += 1;
        let mut ap_per_t = Vec::with_capacity(thresholds.len());
        let mut ar1 = 0.0;
        let mut ar10 = 0.0;
        for &t in &thresholds {
            let mut scored: Vec<(f64, bool)> = Vec::new();
            let mut hits1 = 0usize;
            let mut hits10 = 0usize;
            for (ps, gs) in per_image.values() {
                let scores: Vec<f64> = ps.iter().map(|p| p.score).collect();
                let ranked: Vec<&Prediction> = order_by_score(&scores)
                    .into_iter()
                    .take(MAX_DETS)
                    .map(|i| ps[i])
                    .collect();
                let tp = greedy_match(&ranked, gs, t);
                hits1 += tp.iter().take(1).filter(|&&x| x).count();
                hits10 += tp.iter().take(10).filter(|&&x| x).count();
                scored.extend(ranked.iter().map(|p| p.score).zip(tp));
            }
            let scores: Vec<f64> = scored.iter().map(|s| s.0).collect();
            let flags: Vec<bool> = order_by_score(&scores).into_iter().map(|i| scored[i].1).collect();
            ap_per_t.push(interpolated_ap(&flags, num_gt));
            ar1 += hits1 as f64 / num_gt as f64;
            ar10 += hits10 as f64 / num_gt as f64;
        }
        let nt = thresholds.len() as f64;
        sum_ap_all += ap_per_t.iter().sum::<f64>() / nt;
        sums[0] += ap_per_t[0];
        sums[1] += ap_per_t[5];
        sums[2] += ar1 / nt;
        sums[3] += ar10 / nt;
    }
    if evaluated == 0 {
        return DetectionMetrics::default();
    }
    let n = evaluated as f64;
    DetectionMetrics {
        ap: sum_ap_all / n,
        ap50: sums[0] / n,
        ap75: sums[1] / n,
        ar1: sums[2] / n,
        ar10: sums[3] / n,
        classes_evaluated: evaluated,
    }
}
