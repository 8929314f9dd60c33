use super::boxes::{iou, BBox};

/// Default Gaussian soft-NMS width.
pub const SOFT_NMS_SIGMA: f64 = 0.5;
/// Scores below this are dropped after soft-NMS rescoring.
pub const SOFT_NMS_FLOOR: f64 = 0.001;

/// Anything with a box and a ranking score.
pub trait Scored {
    fn bbox(&self) -> &BBox;
    fn score(&self) -> f64;
    fn set_score(&mut self, s: f64);
}

fn by_score_desc<T: Scored>(items: &mut [T]) {
    items.sort_by(|a, b| b.score().total_cmp(&a.score()));
}

/// Greedy hard NMS: keep the best box, drop others with IoU above `iou_thresh`.
pub fn nms<T: Scored>(mut items: Vec<T>, iou_thresh: f64) -> Vec<T> {
    by_score_desc(&mut items);
    let mut keep: Vec<T> = Vec::with_capacity(items.len());
    for it in items {
        if keep.iter().all(|k| iou(k.bbox(), it.bbox()) <= iou_thresh) {
            keep.push(it);
        }
    }
    keep
}

/// Gaussian soft-NMS: each competitor of the current best is rescored by
/// `exp(-iou^2 / sigma)`; results below `floor` are dropped.
pub fn soft_nms<T: Scored>(mut items: Vec<T>, sigma: f64, floor: f64) -> Vec<T> {
    let mut out = Vec::with_capacity(items.len());
    while !items.is_empty() {
        let best = items
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.score().total_cmp(&b.1.score()).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let top = items.swap_remove(best);
        for it in items.iter_mut() {
            let o = iou(top.bbox(), it.bbox());
            if o > 0.0 {
                let s = it.score() * (-o * o / sigma).exp();
                it.set_score(s);
            }
        }
        items.retain(|it| it.score() >= floor);
        out.push(top);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug, PartialEq)]
    struct Item(BBox, f64);

    impl Scored for Item {
        fn bbox(&self) -> &BBox {
            &self.0
        }
        fn score(&self) -> f64 {
            self.1
        }
        fn set_score(&mut self, s: f64) {
            self.1 = s;
        }
    }

    fn item(x: f64, s: f64) -> Item {
        Item(BBox::new(x, 0.0, x + 10.0, 10.0).unwrap(), s)
    }

    #[test]
    fn hard_nms_keeps_best_of_duplicates() {
        let out = nms(vec![item(0.0, 0.8), item(0.0, 0.9)], 0.5);
        assert_eq!(out, vec![item(0.0, 0.9)]);
    }

    #[test]
    fn soft_nms_rescoring() {
        let out = soft_nms(vec![item(0.0, 0.9), item(0.0, 0.8)], SOFT_NMS_SIGMA, SOFT_NMS_FLOOR);
        assert_eq!(out.len(), 2);
        assert!((out[1].1 - 0.8 * (-2.0f64).exp()).abs() < 1e-15);
        assert!((out[1].1 - 0.1083).abs() < 1e-4);
    }

    #[test]
    fn disjoint_boxes_unchanged() {
        let input = vec![item(0.0, 0.9), item(20.0, 0.7)];
        assert_eq!(nms(input.clone(), 0.5), input);
        assert_eq!(soft_nms(input.clone(), SOFT_NMS_SIGMA, SOFT_NMS_FLOOR), input);
    }
}
