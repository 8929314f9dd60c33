//! Model-level property checks shared by the integration and acceptance
//! tests. Each returns a description of the first violation.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regtext_core::data::RgbImage;
use regtext_core::decoder::{build_seq2seq_mask, score_object, DescriptionCandidate};
use regtext_core::gradsuite::{toy_config, toy_vocab};
use regtext_core::model::Model;
use regtext_core::nn::{AttnMask, Block};
use regtext_core::tensor::{Graph, ParamStore, Tensor};

pub type Check = Result<(), String>;

/// Mask structure plus perturbation isolation through two stacked blocks for
/// every `(m, n)` with `m, n <= max`.
pub fn mask_suite(max: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let blocks: Vec<Block> = (0..2)
        .map(|i| Block::new(&mut store, &format!("b{i}"), 8, 2, 2, &mut rng).unwrap())
        .collect();
    for m in 0..=max {
        for n in 0..=max {
            let t = m + n;
            if t == 0 {
                continue;
            }
            let mask = build_seq2seq_mask(m, n);
            for i in 0..t {
                for k in 0..t {
                    let want = if i < m { k < m } else { k <= i };
                    if mask[i * t + k] != want {
                        return Err(format!("mask({m},{n})[{i},{k}] = {}", mask[i * t + k]));
                    }
                }
            }
            let x = Tensor::from_fn(&[t, 8], |_| rng.gen_range(-1.0..1.0));
            let run = |x: &Tensor| {
                let mut g = Graph::inference(&store);
                let mut v = g.constant(x.clone()).unwrap();
                let am = AttnMask::Allowed(Arc::new(mask.clone()));
                for b in &blocks {
                    v = b.forward(&mut g, v, 1, t, &am, None).unwrap();
                }
                g.data(v).to_vec()
            };
            let base = run(&x);
            for k in 0..t {
                let mut xp = x.clone();
                for c in 0..8 {
                    xp.data_mut()[k * 8 + c] += 0.5 + c as f64;
                }
                let out = run(&xp);
                for i in 0..t {
                    let same = base[i * 8..(i + 1) * 8] == out[i * 8..(i + 1) * 8];
                    if !mask[i * t + k] && !same {
                        return Err(format!("(m={m}, n={n}) row {i} changed when hidden row {k} was perturbed"));
                    }
                    if i == k && same {
                        return Err(format!("(m={m}, n={n}) row {i} ignored its own perturbation"));
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn random_image(rng: &mut impl Rng, side: usize) -> RgbImage {
    RgbImage {
        width: side,
        height: side,
        pixels: (0..side * side * 3).map(|_| rng.gen()).collect(),
    }
}

/// Independent greedy decode of one region through `decode_step`.
fn stepwise_greedy(model: &Model, image: &RgbImage, bbox: regtext_core::BBox, task: usize) -> DescriptionCandidate {
    let mut g = Graph::inference(&model.store);
    let pyr = model.encode(&mut g, &image.to_tensor()).unwrap();
    let (w, h) = (image.width as f64, image.height as f64);
    let obj = model
        .decoder
        .object_tokens(&mut g, &pyr, &[bbox], model.cfg.extractor.level_base, w, h)
        .unwrap();
    let mut prefix = vec![model.vocab.task_id(task).unwrap()];
    let mut scores = Vec::new();
    let eos = model.vocab.eos_id();
    loop {
        if prefix.len() == model.cfg.decoder.max_tokens {
            return DescriptionCandidate::from_scores(prefix[1..].to_vec(), scores, true);
        }
        let p = model.decoder.decode_step(&mut g, obj, &prefix).unwrap();
        let mut best = 0;
        for (i, &q) in p.iter().enumerate() {
            if q > p[best] {
                best = i;
            }
        }
        scores.push(p[best]);
        if best == eos {
            return DescriptionCandidate::from_scores(prefix[1..].to_vec(), scores, false);
        }
        prefix.push(best);
    }
}

/// Scoring algebra and beam equivalences on `inits` random toy models.
/// Returns the number of regions examined.
pub fn scoring_suite(inits: u64) -> Result<usize, String> {
    let cfg = toy_config();
    let mut regions = 0;
    for seed in 0..inits {
        let model = Model::new(&cfg, toy_vocab(), seed).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let image = random_image(&mut rng, 16);
        let task = 1 + (seed as usize % model.vocab.num_tasks());
        let b1 = model.detect_and_describe(&image, task, 1).map_err(|e| e.to_string())?;
        let b3 = model.detect_and_describe(&image, task, 3).map_err(|e| e.to_string())?;
        if b1.len() != b3.len() {
            return Err(format!("seed {seed}: beam 1 kept {} regions, beam 3 kept {}", b1.len(), b3.len()));
        }
        for (d1, d3) in b1.iter().zip(&b3) {
            regions += 1;
            for (c, &f) in d1.candidates.iter().chain(&d3.candidates).zip(d1.final_scores.iter().chain(&d3.final_scores)) {
                let mean = c.token_scores.iter().sum::<f64>() / c.token_scores.len() as f64;
                if c.desc_score != mean {
                    return Err(format!("seed {seed}: desc_score {} != mean {mean}", c.desc_score));
                }
                let prod = d1.objectness * c.desc_score;
                if (f * f - prod).abs() > 4.0 * f64::EPSILON * prod {
                    return Err(format!("seed {seed}: final^2 {} != {prod}", f * f));
                }
                if f != score_object(d1.objectness, c.desc_score) {
                    return Err(format!("seed {seed}: final score is not the composite"));
                }
            }
            if d1.candidates.len() != 1 || d3.candidates.len() != 3.min(model.vocab.len()) {
                return Err(format!("seed {seed}: candidate counts {} / {}", d1.candidates.len(), d3.candidates.len()));
            }
            if d1.candidates[0] != d3.candidates[0] {
                return Err(format!("seed {seed}: beam-1 output is not beam-3's first candidate"));
            }
            let greedy = stepwise_greedy(&model, &image, d1.bbox, task);
            let c = &d1.candidates[0];
            let close = greedy.token_scores.len() == c.token_scores.len()
                && greedy.token_scores.iter().zip(&c.token_scores).all(|(a, b)| (a - b).abs() <= 1e-12);
            if greedy.token_ids != c.token_ids || greedy.truncated != c.truncated || !close {
                return Err(format!("seed {seed}: beam 1 {:?} differs from greedy {:?}", c.token_ids, greedy.token_ids));
            }
        }
    }
    Ok(regions)
}
