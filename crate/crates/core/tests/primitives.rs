use std::sync::Arc;

use proptest::prelude::*;
use regtext_core::extractor::{decode_deltas, encode_deltas, iou, nms, soft_nms, ForegroundObject};
use regtext_core::tensor::{grad_check, DEFAULT_STEP};
use regtext_core::tokenizer::normalize;
use regtext_core::{BBox, Tape, Tensor, Vocabulary};

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..50.0f64, 0.0..50.0f64, 1.0..30.0f64, 1.0..30.0f64).prop_map(|(x, y, w, h)| BBox {
        x1: x,
        y1: y,
        x2: x + w,
        y2: y + h,
    })
}

fn tensor(shape: &'static [usize]) -> impl Strategy<Value = Tensor> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(-2.0..2.0f64, n).prop_map(move |v| Tensor::new(shape, v).unwrap())
}

fn objects(boxes: &[BBox], scores: &[f64]) -> Vec<ForegroundObject> {
    boxes
        .iter()
        .zip(scores)
        .map(|(b, &s)| ForegroundObject::new(*b, vec![s]).unwrap())
        .collect()
}

fn distinct_scores(n: usize) -> impl Strategy<Value = Vec<f64>> {
    Just((0..n).map(|i| 0.05 + 0.9 * i as f64 / n.max(1) as f64).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let x = iou(&a, &b);
        prop_assert_eq!(x, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deltas_round_trip(a in bbox(), t in bbox()) {
        let stds = [0.1, 0.1, 0.2, 0.2];
        let d = encode_deltas(&t, &a, &stds);
        let back = decode_deltas(&a, &d, &stds, 1e6, 1e6);
        for (p, q) in back.to_array().iter().zip(t.to_array()) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn nms_ignores_input_order(
        boxes in prop::collection::vec(bbox(), 1..10),
        perm_seed in any::<u64>(),
    ) {
        let n = boxes.len();
        let scores: Vec<f64> = (0..n).map(|i| 0.1 + 0.8 * i as f64 / n as f64).collect();
        let items = objects(&boxes, &scores);
        let mut shuffled = items.clone();
        let k = (perm_seed as usize) % n;
        shuffled.rotate_left(k);
        shuffled.reverse();
        prop_assert_eq!(nms(items.clone(), 0.5), nms(shuffled.clone(), 0.5));
        prop_assert_eq!(soft_nms(items, 0.5, 1e-3), soft_nms(shuffled, 0.5, 1e-3));
    }

    #[test]
    fn soft_nms_tends_to_hard_nms_at_zero_overlap(
        boxes in prop::collection::vec(bbox(), 1..10),
    ) {
        let n = boxes.len();
        let scores: Vec<f64> = (0..n).map(|i| 0.1 + 0.8 * i as f64 / n as f64).collect();
        let items = objects(&boxes, &scores);
        let min_overlap = boxes
            .iter()
            .flat_map(|a| boxes.iter().map(move |b| iou(a, b)))
            .filter(|&o| o > 0.0)
            .fold(1.0f64, f64::min);
        // every overlapping competitor is scaled by at most e^-50
        let sigma = min_overlap * min_overlap / 50.0;
        let hard: Vec<BBox> = nms(items.clone(), 0.0).iter().map(|o| o.bbox).collect();
        let soft: Vec<BBox> = soft_nms(items, sigma, 1e-3).iter().map(|o| o.bbox).collect();
        prop_assert_eq!(hard, soft);
    }

    #[test]
    fn soft_nms_never_raises_scores(
        boxes in prop::collection::vec(bbox(), 1..10),
        scores in distinct_scores(9),
    ) {
        let items = objects(&boxes, &scores[..boxes.len()]);
        let before: Vec<f64> = items.iter().map(|o| o.objectness).collect();
        for o in soft_nms(items.clone(), 0.5, 0.0) {
            let orig = items.iter().position(|i| i.bbox == o.bbox && i.stage_scores == o.stage_scores).unwrap();
            prop_assert!(o.objectness <= before[orig]);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(x in tensor(&[3, 5])) {
        let mut t = Tape::new();
        let v = t.constant(x).unwrap();
        let p = t.softmax(v).unwrap();
        for row in t.data(p).chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&q| q > 0.0));
        }
    }

    #[test]
    fn transpose_twice_is_identity(x in tensor(&[4, 3])) {
        let mut t = Tape::new();
        let v = t.constant(x.clone()).unwrap();
        let a = t.transpose(v).unwrap();
        let b = t.transpose(a).unwrap();
        prop_assert_eq!(t.data(b), x.data());
    }

    #[test]
    fn matmul_gradient_matches_finite_differences(x in tensor(&[3, 4]), w in tensor(&[4, 2])) {
        let err = grad_check(
            |t, v| {
                let wv = t.constant(w.clone())?;
                let y = t.matmul(v, wv)?;
                let y = t.gelu(y)?;
                t.sum(y)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        prop_assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences(x in tensor(&[2, 6])) {
        let gain = Tensor::from_fn(&[6], |i| 0.5 + 0.1 * i as f64);
        let bias = Tensor::from_fn(&[6], |i| 0.05 * i as f64);
        let err = grad_check(
            |t, v| {
                let g = t.constant(gain.clone())?;
                let b = t.constant(bias.clone())?;
                let y = t.layer_norm(v, g, b)?;
                let y = t.mul(y, y)?;
                t.sum(y)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        prop_assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn gather_scatters_gradient_back(x in tensor(&[6])) {
        let err = grad_check(
            |t, v| {
                let y = t.gather(v, Arc::new(vec![0, 0, 3, 5, 5, 5]), &[2, 3])?;
                let y = t.mul(y, y)?;
                t.sum(y)
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        prop_assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn normalize_is_idempotent(s in "[A-Za-z0-9 ,.!-]{0,30}") {
        let once = normalize(&s);
        prop_assert_eq!(normalize(&once), once);
    }

    #[test]
    fn in_alphabet_words_round_trip(words in prop::collection::vec("[a-e]{1,6}", 1..5)) {
        let corpus = ["abcde", "bcdea", "cdeab", "deabc", "eabcd"];
        let vocab = Vocabulary::build(&corpus, 64, &["[ObjectDet]", "[DenseCap]"]).unwrap();
        let text = words.join(" ");
        let ids = vocab.encode(&text);
        prop_assert!(!ids.contains(&vocab.unk_id()));
        prop_assert_eq!(vocab.decode(&ids).unwrap(), text);
    }
}
