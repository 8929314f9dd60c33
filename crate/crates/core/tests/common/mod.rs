//! Brute-force reference implementations and random instance generators
//! shared by the integration tests.
#![allow(dead_code)]

pub mod checks;

use rand::Rng;
use regtext_core::metrics::{GroundTruth, Prediction, ThresholdGrid};
use regtext_core::BBox;

pub const WORDS: [&str; 6] = ["a", "red", "ring", "left", "of", "blue"];
pub const CLASSES: [&str; 3] = ["circle", "square", "ring"];

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// 101-point AP as the mean over recall levels of the best precision at any
/// rank reaching that recall.
pub fn ap_from_flags(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut points = Vec::new();
    let mut hits = 0;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            hits += 1;
        }
        points.push((hits as f64 / num_gt as f64, hits as f64 / (i + 1) as f64));
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let best = points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(None, |m: Option<f64>, p| {
            Some(m.map_or(p, |m| m.max(p)))
        });
        total += best.unwrap_or(0.0);
    }
    total / 101.0
}

/// Stable descending order by score.
pub fn ranked<T>(items: &[T], score: impl Fn(&T) -> f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    // insertion sort keeps equal scores in input order
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && score(&items[idx[j - 1]]) < score(&items[idx[j]]) {
            idx.swap(j - 1, j);
            j -= 1;
        }
    }
    idx
}

#[derive(Debug, PartialEq)]
pub struct OracleDet {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar1: f64,
    pub ar10: f64,
}

pub fn detection_oracle(preds: &[Prediction], gts: &[GroundTruth], classes: &[&str]) -> OracleDet {
    let ts: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mut sums = [0.0; 5];
    let mut n = 0;
    for class in classes {
        let cg: Vec<&GroundTruth> = gts.iter().filter(|g| g.text == *class).collect();
        if cg.is_empty() {
            continue;
        }
        n += 1;
        let cp: Vec<&Prediction> = preds.iter().filter(|p| p.text == *class).collect();
        let mut images: Vec<u64> = cg.iter().map(|g| g.image_id).chain(cp.iter().map(|p| p.image_id)).collect();
        images.sort();
        images.dedup();
        let mut aps = Vec::new();
        let (mut r1, mut r10) = (0.0, 0.0);
        for &t in &ts {
            let mut all: Vec<(f64, bool)> = Vec::new();
            let (mut h1, mut h10) = (0, 0);
            for &img in &images {
                let ip: Vec<&Prediction> = cp.iter().copied().filter(|p| p.image_id == img).collect();
                let ig: Vec<&GroundTruth> = cg.iter().copied().filter(|g| g.image_id == img).collect();
                let order = ranked(&ip, |p| p.score);
                let mut used = vec![false; ig.len()];
                for (rank, &i) in order.iter().take(100).enumerate() {
                    let mut best = None;
                    let mut best_iou = -1.0;
                    for (j, g) in ig.iter().enumerate() {
                        let o = iou(&ip[i].bbox, &g.bbox);
                        if !used[j] && o >= t && o > best_iou {
                            best = Some(j);
                            best_iou = o;
                        }
                    }
                    if let Some(j) = best {
                        used[j] = true;
                        h1 += usize::from(rank < 1);
                        h10 += usize::from(rank < 10);
                    }
                    all.push((ip[i].score, best.is_some()));
                }
            }
            let order = ranked(&all, |a| a.0);
            let flags: Vec<bool> = order.iter().map(|&i| all[i].1).collect();
            aps.push(ap_from_flags(&flags, cg.len()));
            r1 += h1 as f64 / cg.len() as f64;
            r10 += h10 as f64 / cg.len() as f64;
        }
        sums[0] += aps.iter().sum::<f64>() / 10.0;
        sums[1] += aps[0];
        sums[2] += aps[5];
        sums[3] += r1 / 10.0;
        sums[4] += r10 / 10.0;
    }
    if n == 0 {
        return OracleDet { ap: 0.0, ap50: 0.0, ap75: 0.0, ar1: 0.0, ar10: 0.0 };
    }
    let n = n as f64;
    OracleDet { ap: sums[0] / n, ap50: sums[1] / n, ap75: sums[2] / n, ar1: sums[3] / n, ar10: sums[4] / n }
}

/// METEOR by enumerating every one-to-one exact-word alignment.
pub fn meteor_oracle(cand: &str, reference: &str) -> f64 {
    let c: Vec<&str> = cand.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    let mut best: Option<(usize, usize)> = None;
    let mut current = Vec::new();
    let mut used = vec![false; r.len()];
    enumerate(&c, &r, 0, &mut used, &mut current, &mut best);
    let (m, chunks) = best.unwrap_or((0, 0));
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / c.len() as f64;
    let rc = m as f64 / r.len() as f64;
    let f = p * rc / (0.9 * p + 0.1 * rc);
    f * (1.0 - 0.5 * (chunks as f64 / m as f64).powf(3.0))
}

fn enumerate(
    c: &[&str],
    r: &[&str],
    i: usize,
    used: &mut Vec<bool>,
    cur: &mut Vec<(usize, usize)>,
    best: &mut Option<(usize, usize)>,
) {
    if i == c.len() {
        let m = cur.len();
        let chunks = (0..m).filter(|&k| k == 0 || !(cur[k].0 == cur[k - 1].0 + 1 && cur[k].1 == cur[k - 1].1 + 1)).count();
        let better = match *best {
            None => true,
            Some((bm, bc)) => m > bm || (m == bm && chunks < bc),
        };
        if better {
            *best = Some((m, chunks));
        }
        return;
    }
    enumerate(c, r, i + 1, used, cur, best);
    for j in 0..r.len() {
        if !used[j] && r[j] == c[i] {
            used[j] = true;
            cur.push((i, j));
            enumerate(c, r, i + 1, used, cur, best);
            cur.pop();
            used[j] = false;
        }
    }
}

/// Dense-caption mAP with the max-IoU targeting rule, recomputed per cell.
pub fn densecap_oracle(preds: &[Prediction], gts: &[GroundTruth], grid: &ThresholdGrid) -> (f64, Vec<Vec<f64>>) {
    let order = ranked(preds, |p| p.score);
    let mut cells = Vec::new();
    for &it in &grid.iou_thresholds {
        let mut row = Vec::new();
        for &mt in &grid.meteor_thresholds {
            row.push(densecap_cell(preds, gts, &order, it, mt));
        }
        cells.push(row);
    }
    let n = (grid.iou_thresholds.len() * grid.meteor_thresholds.len()) as f64;
    (cells.iter().flatten().sum::<f64>() / n, cells)
}

fn densecap_cell(preds: &[Prediction], gts: &[GroundTruth], order: &[usize], it: f64, mt: f64) -> f64 {
    let mut matched = vec![false; gts.len()];
    let mut flags = Vec::new();
    for &i in order {
        let p = &preds[i];
        let mut target: Option<usize> = None;
        let mut best = 0.0;
        for (j, g) in gts.iter().enumerate() {
            if g.image_id != p.image_id {
                continue;
            }
            let o = iou(&p.bbox, &g.bbox);
            if o > best {
                best = o;
                target = Some(j);
            }
        }
        let tp = match target {
            Some(j) => !matched[j] && best >= it && meteor_oracle(&p.text, &gts[j].text) >= mt,
            None => false,
        };
        if tp {
            matched[target.unwrap()] = true;
        }
        flags.push(tp);
    }
    ap_from_flags(&flags, gts.len())
}

pub fn random_box(rng: &mut impl Rng) -> BBox {
    let x1 = rng.gen_range(0..8) as f64 * 2.0;
    let y1 = rng.gen_range(0..8) as f64 * 2.0;
    let w = rng.gen_range(1..8) as f64 * 2.0;
    let h = rng.gen_range(1..8) as f64 * 2.0;
    BBox { x1, y1, x2: x1 + w, y2: y1 + h }
}

pub fn random_sentence(rng: &mut impl Rng, max_len: usize) -> String {
    let n = rng.gen_range(1..=max_len);
    (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

/// Up to six ground truths and six predictions over two images; scores come
/// from a coarse set so ties occur.
pub fn random_instance(rng: &mut impl Rng, text: impl Fn(&mut dyn rand::RngCore) -> String) -> (Vec<Prediction>, Vec<GroundTruth>) {
    let ng = rng.gen_range(0..=6);
    let np = rng.gen_range(0..=6);
    let gts = (0..ng)
        .map(|_| GroundTruth { image_id: rng.gen_range(0..2), bbox: random_box(rng), text: text(rng) })
        .collect();
    let preds = (0..np)
        .map(|_| Prediction {
            image_id: rng.gen_range(0..2),
            bbox: random_box(rng),
            text: text(rng),
            score: rng.gen_range(1..6) as f64 / 5.0,
        })
        .collect();
    (preds, gts)
}
