use super::boxes::{iou, BBox};

/// Foreground IoU threshold of each cascade stage.
pub const STAGE_IOU: [f64; 3] = [0.5, 0.6, 0.7];

/// Training label for one box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Assignment {
    Background { max_iou: f64 },
    Foreground { gt: usize, iou: f64 },
}

impl Assignment {
    pub fn is_foreground(&self) -> bool {
        matches!(self, Assignment::Foreground { .. })
    }

    pub fn gt(&self) -> Option<usize> {
        match self {
            Assignment::Foreground { gt, .. } => Some(*gt),
            Assignment::Background { .. } => None,
        }
    }
}

/// Labels `boxes` against `gts` at an explicit IoU threshold. The matched
/// ground truth is the argmax-IoU one, lowest index on ties.
pub fn assign_with_threshold(boxes: &[BBox], gts: &[BBox], thresh: f64) -> Vec<Assignment> {
    boxes
        .iter()
        .map(|b| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                let o = iou(b, g);
                if best.map_or(true, |(_, bo)| o > bo) {
                    best = Some((j, o));
                }
            }
            match best {
                Some((gt, o)) if o >= thresh => Assignment::Foreground { gt, iou: o },
                Some((_, o)) => Assignment::Background { max_iou: o },
                None => Assignment::Background { max_iou: 0.0 },
            }
        })
        .collect()
}

/// [`assign_with_threshold`] at the threshold of cascade `stage` (0-based).
pub fn assign_targets(boxes: &[BBox], gts: &[BBox], stage: usize) -> Vec<Assignment> {
    let t = STAGE_IOU[stage.min(STAGE_IOU.len() - 1)];
    assign_with_threshold(boxes, gts, t)
}
