use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ap::{interpolated_ap, order_by_score};
use super::meteor::meteor;
use super::{GroundTruth, Prediction};
use crate::extractor::boxes::iou;

/// IoU x METEOR threshold grid for dense-caption mAP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    pub iou_thresholds: Vec<f64>,
    pub meteor_thresholds: Vec<f64>,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        Self {
            iou_thresholds: vec![0.3, 0.4, 0.5, 0.6, 0.7],
            meteor_thresholds: vec![0.0, 0.05, 0.1, 0.15, 0.2, 0.25],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseCapMetrics {
    pub map: f64,
    /// `cells[i][j]` is the AP at `iou_thresholds[i]`, `meteor_thresholds[j]`.
    pub cells: Vec<Vec<f64>>,
}

/// One prediction's fixed match target: the ground truth of maximum IoU in
/// its image (lowest index on ties), with the pair's IoU and METEOR.
#[derive(Clone, Copy, Debug)]
struct Target {
    gt: usize,
    iou: f64,
    meteor: f64,
}

struct Prepared {
    /// Predictions in global rank order: (image key, target).
    ranked: Vec<(u64, Option<Target>)>,
    num_gt: usize,
}

fn prepare(preds: &[Prediction], gts: &[GroundTruth]) -> Prepared {
    let mut by_image: BTreeMap<u64, Vec<&GroundTruth>> = BTreeMap::new();
    for g in gts {
        by_image.entry(g.image_id).or_default().push(g);
    }
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let ranked = order_by_score(&scores)
        .into_iter()
        .map(|i| {
            let p = &preds[i];
            let target = by_image.get(&p.image_id).and_then(|gs| {
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in gs.iter().enumerate() {
                    let o = iou(&p.bbox, &g.bbox);
                    if best.map_or(true, |(_, bo)| o > bo) {
                        best = Some((j, o));
                    }
                }
                best.filter(|(_, o)| *o > 0.0).map(|(j, o)| Target {
                    gt: j,
                    iou: o,
                    meteor: meteor(&p.text, &gs[j].text),
                })
            });
            (p.image_id, target)
        })
        .collect();
    Prepared {
        ranked,
        num_gt: gts.len(),
    }
}

fn cell_ap(prep: &Prepared, iou_t: f64, met_t: f64) -> f64 {
    let mut used: BTreeSet<(u64, usize)> = BTreeSet::new();
    let flags: Vec<bool> = prep
        .ranked
        .iter()
        .map(|(img, t)| match t {
            Some(t) if t.iou >= iou_t && t.meteor >= met_t && used.insert((*img, t.gt)) => true,
            _ => false,
        })
        .collect();
    interpolated_ap(&flags, prep.num_gt)
}

/// Class-agnostic dense-captioning mAP over `grid`.
///
/// Each prediction (in descending score order) is compared against the
/// max-IoU ground-truth region of its image; it is a true positive when that
/// region is still unmatched and both the IoU and METEOR thresholds of the
/// cell are met.
pub fn densecap_map(preds: &[Prediction], gts: &[GroundTruth], grid: &ThresholdGrid) -> DenseCapMetrics {
    let prep = prepare(preds, gts);
    let cells: Vec<Vec<f64>> = grid
        .iou_thresholds
        .iter()
        .map(|&it| grid.meteor_thresholds.iter().map(|&mt| cell_ap(&prep, it, mt)).collect())
        .collect();
    let n = (grid.iou_thresholds.len() * grid.meteor_thresholds.len()).max(1) as f64;
    let map = cells.iter().flatten().sum::<f64>() / n;
    DenseCapMetrics { map, cells }
}

/// Text-blind AP at one IoU threshold under the same matching rule.
pub fn localization_ap(preds: &[Prediction], gts: &[GroundTruth], iou_t: f64) -> f64 {
    cell_ap(&prepare(preds, gts), iou_t, f64::NEG_INFINITY)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::boxes::BBox;

    fn bx(x: f64) -> BBox {
        BBox::new(x, 0.0, x + 10.0, 10.0).unwrap()
    }

    #[test]
    fn perfect_predictions() {
        let gts = vec![
            GroundTruth { image_id: 1, bbox: bx(0.0), text: "a small red circle".into() },
            GroundTruth { image_id: 1, bbox: bx(20.0), text: "a large blue square".into() },
        ];
        let preds: Vec<Prediction> = gts
            .iter()
            .map(|g| Prediction { image_id: g.image_id, bbox: g.bbox, text: g.text.clone(), score: 0.5 })
            .collect();
        let m = densecap_map(&preds, &gts, &ThresholdGrid::default());
        assert_eq!(m.map, 1.0);
        assert_eq!(m.cells.len() * m.cells[0].len(), 30);
    }

    #[test]
    fn zero_meteor_column_is_localization() {
        let gts = vec![GroundTruth { image_id: 1, bbox: bx(0.0), text: "red circle".into() }];
        let preds = vec![
            Prediction { image_id: 1, bbox: bx(2.0), text: "blue".into(), score: 0.9 },
            Prediction { image_id: 1, bbox: bx(0.0), text: "red circle".into(), score: 0.5 },
        ];
        let grid = ThresholdGrid::default();
        let m = densecap_map(&preds, &gts, &grid);
        for (i, &t) in grid.iou_thresholds.iter().enumerate() {
            assert_eq!(m.cells[i][0], localization_ap(&preds, &gts, t));
        }
    }
}
