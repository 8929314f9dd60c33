//! Dataset-level inference and evaluation.

use std::collections::BTreeSet;

use crate::data::{classify_style, Dataset, PredictionRecord, Style, CAPTION_TASK, DET_TASK};
use crate::error::Result;
use crate::metrics::{densecap_map, detection_ap, DenseCapMetrics, DetectionMetrics, ThresholdGrid};
use crate::model::Model;

/// Runs the model over every image of `data`.
pub fn infer_dataset(model: &Model, data: &Dataset, task: usize, beam: usize) -> Result<Vec<PredictionRecord>> {
    model.decoder.begin_token(&model.vocab, task)?;
    let mut out = Vec::new();
    for s in data.samples()? {
        out.extend(model.predict(s.id, &s.image, task, beam)?);
    }
    Ok(out)
}

/// Detection metrics of `task` records against the class-name annotations;
/// the class list is every distinct ground-truth name.
pub fn eval_detection(preds: &[PredictionRecord], gts: &Dataset) -> DetectionMetrics {
    let gt = gts.ground_truth(DET_TASK);
    let classes: Vec<String> = gt.iter().map(|g| g.text.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let p: Vec<_> = preds.iter().filter(|r| r.task == DET_TASK).map(PredictionRecord::to_prediction).collect();
    detection_ap(&p, &gt, &classes)
}

/// Dense-captioning mAP of caption-task records over the default grid.
pub fn eval_densecap(preds: &[PredictionRecord], gts: &Dataset) -> DenseCapMetrics {
    let gt = gts.ground_truth(CAPTION_TASK);
    let p: Vec<_> = preds.iter().filter(|r| r.task == CAPTION_TASK).map(PredictionRecord::to_prediction).collect();
    densecap_map(&p, &gt, &ThresholdGrid::default())
}

/// Style expected from each task's begin token.
pub fn expected_style(task: usize) -> Style {
    if task == DET_TASK {
        Style::ClassName
    } else {
        Style::Sentence
    }
}

/// Fraction of records scoring at least `min_score` whose text has the
/// style of their task. `None` when no record qualifies.
pub fn style_consistency(preds: &[PredictionRecord], min_score: f64) -> Option<f64> {
    let kept: Vec<_> = preds.iter().filter(|r| r.score >= min_score).collect();
    if kept.is_empty() {
        return None;
    }
    let ok = kept.iter().filter(|r| classify_style(&r.text) == expected_style(r.task)).count();
    Some(ok as f64 / kept.len() as f64)
}
