//! Finite-difference gradient suite over every differentiable primitive and
//! the composed encoder, extractor and decoder losses.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decoder::{DecoderConfig, TextTarget};
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::extractor::{BBox, ExtractorConfig};
use crate::model::{LossWeights, Model, ModelConfig, TargetObject};
use crate::tensor::{grad_check, GradBuffer, Graph, ParamId, ParamStore, Tape, Tensor, Var, DEFAULT_STEP};
use crate::tokenizer::{Vocabulary, DEFAULT_TASKS};

/// Worst relative error of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradResult {
    pub name: &'static str,
    pub max_rel_err: f64,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, uniform(rng, n, lo, hi)).expect("shape matches data")
}

/// Contracts `out` with fixed random weights into a scalar.
fn project(t: &mut Tape, out: Var, w: &[f64]) -> Result<Var> {
    let shape = t.shape(out).to_vec();
    let wv = t.constant(Tensor::new(&shape, w[..shape.iter().product()].to_vec())?)?;
    let p = t.mul(out, wv)?;
    t.sum(p)
}

fn part(t: &mut Tape, x: Var, start: usize, shape: &[usize]) -> Result<Var> {
    let n: usize = shape.iter().product();
    t.gather(x, Arc::new((start..start + n).collect()), shape)
}

type Prim = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// Every tape primitive, each checked with respect to all of its
/// differentiable inputs.
pub fn primitive_suite(seed: u64) -> Result<Vec<GradResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Arc::new(uniform(&mut rng, 256, -1.0, 1.0));
    let mut out = Vec::new();
    let mut run = |name: &'static str, x: Tensor, f: Prim| -> Result<()> {
        let err = grad_check(|t, v| f(t, v), &x, DEFAULT_STEP)?;
        out.push(GradResult { name, max_rel_err: err });
        Ok(())
    };
    macro_rules! prim {
        ($name:expr, $x:expr, |$t:ident, $v:ident| $body:expr) => {{
            let w = Arc::clone(&w);
            run(
                $name,
                $x,
                Box::new(move |$t: &mut Tape, $v: Var| -> Result<Var> {
                    let o = $body?;
                    project($t, o, &w)
                }),
            )?;
        }};
    }

    prim!("matmul", tensor(&mut rng, &[20], -1.0, 1.0), |t, x| {
        let a = part(t, x, 0, &[3, 4])?;
        let b = part(t, x, 12, &[4, 2])?;
        t.matmul(a, b)
    });
    prim!("matmul_nt", tensor(&mut rng, &[20], -1.0, 1.0), |t, x| {
        let a = part(t, x, 0, &[3, 4])?;
        let b = part(t, x, 12, &[2, 4])?;
        t.matmul_nt(a, b)
    });
    prim!("bmm", tensor(&mut rng, &[40], -1.0, 1.0), |t, x| {
        let a = part(t, x, 0, &[2, 3, 4])?;
        let b = part(t, x, 24, &[2, 4, 2])?;
        t.bmm(a, b)
    });
    prim!("bmm_nt", tensor(&mut rng, &[40], -1.0, 1.0), |t, x| {
        let a = part(t, x, 0, &[2, 3, 4])?;
        let b = part(t, x, 24, &[2, 2, 4])?;
        t.bmm_nt(a, b)
    });
    prim!("add", tensor(&mut rng, &[24], -1.0, 1.0), |t, x| {
        let a = part(t, x, 0, &[3, 4])?;
        let b = part(t, x, 12, &[3, 4])?;
        t.add(a, b)
    });
    prim!("sub", tensor(&mut rng, &[24], -1.0, 1.0), |t, x| {
        let a = part(t, x, 0, &[3, 4])?;
        let b = part(t, x, 12, &[3, 4])?;
        t.sub(a, b)
    });
    prim!("mul", tensor(&mut rng, &[24], -1.0, 1.0), |t, x| {
        let a = part(t, x, 0, &[3, 4])?;
        let b = part(t, x, 12, &[3, 4])?;
        t.mul(a, b)
    });
    prim!("add_row", tensor(&mut rng, &[16], -1.0, 1.0), |t, x| {
        let a = part(t, x, 0, &[3, 4])?;
        let b = part(t, x, 12, &[4])?;
        t.add_row(a, b)
    });
    prim!("scale", tensor(&mut rng, &[3, 4], -1.0, 1.0), |t, x| t.scale(x, -1.7));
    prim!("gelu", tensor(&mut rng, &[3, 4], -3.0, 3.0), |t, x| t.gelu(x));
    prim!("sigmoid", tensor(&mut rng, &[3, 4], -3.0, 3.0), |t, x| t.sigmoid(x));
    prim!("exp", tensor(&mut rng, &[3, 4], -2.0, 2.0), |t, x| t.exp(x));
    prim!("log", tensor(&mut rng, &[3, 4], 0.5, 2.0), |t, x| t.log(x));
    prim!("map", tensor(&mut rng, &[3, 4], -2.0, 2.0), |t, x| t.map(x, f64::sin, f64::cos));
    prim!("softmax", tensor(&mut rng, &[3, 5], -2.0, 2.0), |t, x| t.softmax(x));
    let mask = Arc::new(crate::decoder::build_seq2seq_mask(2, 3));
    prim!("softmax_masked", tensor(&mut rng, &[2, 5, 5], -2.0, 2.0), |t, x| t.softmax_masked(x, &mask));
    prim!("layer_norm", tensor(&mut rng, &[30], -2.0, 2.0), |t, x| {
        let a = part(t, x, 0, &[3, 6])?;
        let g = part(t, x, 18, &[6])?;
        let b = part(t, x, 24, &[6])?;
        t.layer_norm(a, g, b)
    });
    prim!("embedding", tensor(&mut rng, &[5, 3], -1.0, 1.0), |t, x| t.embedding(x, &[0, 3, 3, 1]));
    prim!("concat", tensor(&mut rng, &[18], -1.0, 1.0), |t, x| {
        let a = part(t, x, 0, &[2, 4])?;
        let b = part(t, x, 8, &[1, 4])?;
        let c = part(t, x, 12, &[3, 2])?;
        let ab = t.concat(&[a, b], 0)?;
        t.concat(&[ab, c], 1)
    });
    prim!("gather", tensor(&mut rng, &[6], -1.0, 1.0), |t, x| {
        t.gather(x, Arc::new(vec![5, 0, 0, crate::tensor::ZERO_INDEX, 2]), &[5])
    });
    prim!("select_rows", tensor(&mut rng, &[4, 3], -1.0, 1.0), |t, x| t.select_rows(x, &[3, 1, 1]));
    prim!("transpose", tensor(&mut rng, &[3, 4], -1.0, 1.0), |t, x| t.transpose(x));
    let pts: Vec<(f64, f64)> = (0..5).map(|_| (rng.gen_range(-0.4..3.4), rng.gen_range(-0.4..3.4))).collect();
    prim!("bilinear_sample", tensor(&mut rng, &[4, 4, 2], -1.0, 1.0), |t, x| t.bilinear_sample(x, &pts));
    prim!("resize_bilinear", tensor(&mut rng, &[4, 4, 2], -1.0, 1.0), |t, x| t.resize_bilinear(x, 6, 3));
    prim!("avg_pool2", tensor(&mut rng, &[4, 4, 2], -1.0, 1.0), |t, x| t.avg_pool2(x));
    prim!("upsample2", tensor(&mut rng, &[2, 2, 3], -1.0, 1.0), |t, x| t.upsample2(x));
    prim!("mean", tensor(&mut rng, &[3, 4], -1.0, 1.0), |t, x| t.mean(x));
    let target = uniform(&mut rng, 12, -1.0, 1.0);
    prim!("smooth_l1", tensor(&mut rng, &[3, 4], -2.0, 2.0), |t, x| t.smooth_l1(x, &target, 0.5));
    prim!("cross_entropy_smoothed", tensor(&mut rng, &[3, 5], -2.0, 2.0), |t, x| t
        .cross_entropy_smoothed(x, &[4, 0, 2], 0.1));
    let y = uniform(&mut rng, 6, 0.0, 1.0);
    let bw = uniform(&mut rng, 6, 0.5, 2.0);
    prim!("bce_with_logits", tensor(&mut rng, &[6], -3.0, 3.0), |t, x| t.bce_with_logits(x, &y, Some(&bw)));
    let mut heat = uniform(&mut rng, 8, 0.0, 0.9);
    heat[3] = 1.0;
    prim!("focal_loss", tensor(&mut rng, &[8], -3.0, 3.0), |t, x| t.focal_loss(x, &heat, 2.0, 4.0));
    Ok(out)
}

/// Taped gradient of `f` with respect to the chosen parameter coordinates
/// against central differences on the store. Returns the worst
/// `|g - fd| / max(1, |g|)`.
pub fn param_grad_check<F>(store: &mut ParamStore, coords: &[(ParamId, usize)], h: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Graph<'_>) -> Result<Var>,
{
    let analytic: Vec<f64> = {
        let mut g = Graph::training(store);
        let loss = f(&mut g)?;
        g.backward(loss)?;
        let mut buf = GradBuffer::new(store);
        buf.accumulate(&mut g, 1.0);
        coords
            .iter()
            .map(|&(id, i)| buf.get(id).map_or(0.0, |d| d[i]))
            .collect()
    };
    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference(store);
        let loss = f(&mut g)?;
        Ok(g.data(loss)[0])
    };
    let mut worst = 0.0f64;
    for (&(id, i), &a) in coords.iter().zip(&analytic) {
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + h;
        let up = eval(store)?;
        store.get_mut(id).data_mut()[i] = orig - h;
        let down = eval(store)?;
        store.get_mut(id).data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((a - fd).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

/// Tiny model used by the composed checks: depth-2 encoder of width 8 on a
/// 16x16 image, two-layer decoder.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            patch_size: 2,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            window: 4,
            global_blocks: vec![1],
            mlp_ratio: 2,
        },
        extractor: ExtractorConfig {
            head_hidden: 8,
            proposals_train: 16,
            proposals_test: 8,
            roi_side: 2,
            stage_hidden: 8,
            rois_per_image: 8,
            level_base: 2.0,
            max_detections: 4,
            ..ExtractorConfig::default()
        },
        decoder: DecoderConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            max_tokens: 8,
            crop_side: 2,
            mlp_ratio: 2,
            ..DecoderConfig::default()
        },
    }
}

pub fn toy_vocab() -> Vocabulary {
    let corpus = ["a small red circle", "a large blue square left of a green ring", "cross"];
    Vocabulary::build(&corpus, 64, &DEFAULT_TASKS).expect("toy corpus is valid")
}

/// Random toy image and two to three non-degenerate objects with texts.
pub fn toy_scene(rng: &mut ChaCha8Rng, vocab: &Vocabulary) -> (Tensor, Vec<TargetObject>) {
    let image = tensor(rng, &[3, 16, 16], -1.0, 1.0);
    let n = rng.gen_range(2..=3);
    let objects = (0..n)
        .map(|_| {
            let (w, h) = (rng.gen_range(3.0..8.0), rng.gen_range(3.0..8.0));
            let (x, y) = (rng.gen_range(0.0..16.0 - w), rng.gen_range(0.0..16.0 - h));
            let len = rng.gen_range(1..=4);
            let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(vocab.num_tasks() + 3..vocab.len())).collect();
            TargetObject {
                bbox: BBox { x1: x, y1: y, x2: x + w, y2: y + h },
                texts: vec![(1, ids[..1].to_vec()), (2, ids)],
            }
        })
        .collect();
    (image, objects)
}

fn sample_coords(store: &ParamStore, prefix: &str, per_tensor: usize, rng: &mut ChaCha8Rng) -> Vec<(ParamId, usize)> {
    let mut out = Vec::new();
    for (id, name, t) in store.iter() {
        if !name.starts_with(prefix) {
            continue;
        }
        for _ in 0..per_tensor.min(t.numel()) {
            out.push((id, rng.gen_range(0..t.numel())));
        }
    }
    out
}

/// Composed losses of a random toy model, checked with respect to sampled
/// parameter coordinates of the parts they exercise.
pub fn composed_suite(seed: u64) -> Result<Vec<GradResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let vocab = toy_vocab();
    let model = Model::new(&toy_config(), vocab, seed)?;
    let (image, objects) = toy_scene(&mut rng, &model.vocab);
    let mut store = model.store.clone();
    let weights = LossWeights { object: 1.0, text: 1.0 };
    let mixture = [0.5, 0.5];
    let plan = {
        let mut g = Graph::inference(&store);
        model.image_loss(&mut g, &image, &objects, weights, &mixture, 2, None, &mut rng)?.1
    };
    let mut out = Vec::new();
    let h = DEFAULT_STEP;

    let wts = uniform(&mut rng, 16 * 16 * 8, -1.0, 1.0);
    let coords = sample_coords(&store, "encoder", 2, &mut rng);
    let err = param_grad_check(&mut store, &coords, h, |g| {
        let pyr = model.encode(g, &image)?;
        let mut total = None;
        for lv in pyr.levels {
            let n = g.value(lv).numel();
            let flat = g.reshape(lv, &[n])?;
            let wv = g.constant(Tensor::new(&[n], wts[..n].to_vec())?)?;
            let p = g.mul(flat, wv)?;
            let s = g.sum(p)?;
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
        }
        Ok(total.expect("five levels"))
    })?;
    out.push(GradResult { name: "encoder pyramid", max_rel_err: err });

    let gts: Vec<BBox> = objects.iter().map(|o| o.bbox).collect();
    let coords = sample_coords(&store, "", 1, &mut rng);
    let err = param_grad_check(&mut store, &coords, h, |g| {
        let pyr = model.encode(g, &image)?;
        let (loss, _) = model
            .extractor
            .training_loss(g, &pyr, &gts, 16.0, 16.0, Some(&plan.extractor), &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(loss.total)
    })?;
    out.push(GradResult { name: "extractor L_o", max_rel_err: err });

    let targets: Vec<TextTarget> = plan.targets.clone();
    let coords = sample_coords(&store, "", 1, &mut rng);
    let err = param_grad_check(&mut store, &coords, h, |g| {
        let pyr = model.encode(g, &image)?;
        let obj = model.decoder.object_tokens(g, &pyr, &plan.regions, 2.0, 16.0, 16.0)?;
        model.decoder.lm_loss(g, obj, &targets, &model.vocab)
    })?;
    out.push(GradResult { name: "crop-decoder L_t", max_rel_err: err });

    let coords = sample_coords(&store, "", 2, &mut rng);
    let err = param_grad_check(&mut store, &coords, h, |g| {
        let (terms, _) = model.image_loss(
            g,
            &image,
            &objects,
            weights,
            &mixture,
            2,
            Some(&plan),
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        Ok(terms.total)
    })?;
    out.push(GradResult { name: "model L_o + L_t", max_rel_err: err });
    Ok(out)
}
