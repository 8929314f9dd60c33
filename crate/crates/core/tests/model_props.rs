mod common;

use common::checks::{mask_suite, random_image, scoring_suite};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regtext_core::data::{gen_dataset, Split};
use regtext_core::decoder::{DecoderConfig, TextTarget};
use regtext_core::encoder::{Encoder, EncoderConfig};
use regtext_core::gradsuite::{toy_config, toy_vocab};
use regtext_core::model::{LossWeights, Model, ModelConfig};
use regtext_core::tensor::{AdamW, AdamWConfig, GradBuffer, Graph, ParamStore, Tensor};
use regtext_core::train::{train, TrainConfig, Unlock};
use regtext_core::{checkpoint, BBox, Error, Vocabulary};

#[test]
fn seq2seq_mask_isolates_objects_and_keeps_text_causal() {
    mask_suite(5, 1).unwrap();
}

#[test]
fn scoring_algebra_and_beam_one_is_greedy() {
    let regions = scoring_suite(8).unwrap();
    assert!(regions > 0);
}

fn encoder_outputs(cfg: &EncoderConfig, image: &Tensor) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, cfg, &mut rng).unwrap();
    // give the relative-position tables non-zero values
    let ids: Vec<_> = store.iter().filter(|(_, n, _)| n.ends_with("rel_bias")).map(|(id, _, _)| id).collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let mut g = Graph::inference(&store);
    let x = g.constant(image.clone()).unwrap();
    let base = enc.base_map(&mut g, x).unwrap();
    g.data(base).to_vec()
}

/// Channels of the base map cells inside and outside the first window after
/// perturbing a pixel of the first patch.
fn window_effect(global_blocks: Vec<usize>) -> (bool, bool) {
    let cfg = EncoderConfig {
        patch_size: 2,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        window: 4,
        global_blocks,
        mlp_ratio: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let image = Tensor::from_fn(&[3, 16, 16], |_| rng.gen_range(-1.0..1.0));
    let mut perturbed = image.clone();
    perturbed.data_mut()[0] += 1.0;
    let a = encoder_outputs(&cfg, &image);
    let b = encoder_outputs(&cfg, &perturbed);
    let c = 8;
    let (mut inside, mut outside) = (false, false);
    for i in 0..8 {
        for j in 0..8 {
            let cell = (i * 8 + j) * c;
            let changed = a[cell..cell + c] != b[cell..cell + c];
            if i < 4 && j < 4 {
                inside |= changed;
            } else {
                outside |= changed;
            }
        }
    }
    (inside, outside)
}

#[test]
fn windowed_blocks_keep_information_inside_the_window() {
    assert_eq!(window_effect(vec![]), (true, false));
}

#[test]
fn a_global_block_mixes_across_windows() {
    assert_eq!(window_effect(vec![1]), (true, true));
}

#[test]
fn constant_image_gives_spatially_constant_levels() {
    let model = Model::new(&toy_config(), toy_vocab(), 2).unwrap();
    let mut g = Graph::inference(&model.store);
    let pyr = model.encode(&mut g, &Tensor::full(&[3, 16, 16], 0.3)).unwrap();
    for (l, &v) in pyr.levels.iter().enumerate() {
        let c = pyr.channels;
        let d = g.data(v);
        for cell in d.chunks(c) {
            for (x, y) in cell.iter().zip(&d[..c]) {
                assert!((x - y).abs() < 1e-12, "level {l}");
            }
        }
    }
}

fn small_model_config() -> ModelConfig {
    let mut cfg = toy_config();
    cfg.decoder.max_tokens = 12;
    cfg.decoder.dim = 32;
    cfg.decoder.heads = 4;
    cfg
}

fn caption_vocab() -> (Vocabulary, &'static str) {
    let text = "a large red circle left of a blue square";
    (Vocabulary::build(&[text, "square"], 64, &["[ObjectDet]", "[DenseCap]"]).unwrap(), text)
}

/// Single-region teacher-forced loss after `steps` AdamW steps.
fn overfit_one_region(label_smoothing: f64, steps: usize) -> (f64, f64) {
    let mut cfg = small_model_config();
    cfg.decoder.label_smoothing = label_smoothing;
    let (vocab, text) = caption_vocab();
    let ids = vocab.encode(text);
    let mut model = Model::new(&cfg, vocab.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let image = random_image(&mut rng, 16).to_tensor();
    let bbox = BBox { x1: 2.0, y1: 3.0, x2: 12.0, y2: 14.0 };
    let target = TextTarget { ids, task: 2 };
    let mut adam = AdamW::new(&model.store, AdamWConfig::default());
    let mut last = f64::NAN;
    for _ in 0..steps {
        let mut grads = GradBuffer::new(&model.store);
        {
            let mut g = Graph::training(&model.store);
            let pyr = model.encode(&mut g, &image).unwrap();
            let obj = model.decoder.object_tokens(&mut g, &pyr, &[bbox], cfg.extractor.level_base, 16.0, 16.0).unwrap();
            let loss = model.decoder.lm_loss(&mut g, obj, std::slice::from_ref(&target), &vocab).unwrap();
            last = g.data(loss)[0];
            g.backward(loss).unwrap();
            grads.accumulate(&mut g, 1.0);
        }
        adam.step(&mut model.store, &grads, 3e-3).unwrap();
    }
    // entropy of the smoothed target, the lowest reachable loss
    let v = vocab.len() as f64;
    let on = 1.0 - label_smoothing + label_smoothing / v;
    let off = label_smoothing / v;
    let floor = -on * on.ln() - if off > 0.0 { (v - 1.0) * off * off.ln() } else { 0.0 };
    (last, floor)
}

#[test]
fn decoder_overfits_a_single_region() {
    let (loss, floor) = overfit_one_region(0.0, 300);
    assert_eq!(floor, 0.0);
    assert!(loss < 0.35, "unsmoothed loss {loss}");
    let (loss, floor) = overfit_one_region(0.1, 300);
    assert!(loss < floor + 0.1, "smoothed loss {loss}, floor {floor}");
}

fn tiny_train_config(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        warmup: 2,
        log_every: 1,
        vocab_size: 96,
        scale_jitter: None,
        model: ModelConfig {
            encoder: EncoderConfig {
                patch_size: 8,
                embed_dim: 16,
                depth: 2,
                heads: 2,
                window: 4,
                global_blocks: vec![1],
                mlp_ratio: 2,
            },
            decoder: DecoderConfig {
                dim: 16,
                heads: 2,
                layers: 1,
                ..DecoderConfig::default()
            },
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn zero_text_weight_trains_a_pure_detector() {
    let data = gen_dataset(3, 4, Split::Train).unwrap();
    let mut a = tiny_train_config(3);
    a.loss_weights = LossWeights { object: 1.0, text: 0.0 };
    let mut b = a.clone();
    b.model.decoder.layers = 2;
    let ra = train(&a, &data, None).unwrap();
    let rb = train(&b, &data, None).unwrap();
    assert!(ra.log.iter().all(|r| r.text == 0.0 && r.total == r.object));
    for (id, name, t) in ra.model.store.iter() {
        if !name.starts_with("decoder.") {
            assert_eq!(Some(t), rb.model.store.find(name).map(|j| rb.model.store.get(j)), "{name} ({id:?})");
        }
    }
}

#[test]
fn hidden_classes_follow_the_unlock_schedule() {
    let mut cfg = tiny_train_config(9);
    cfg.incremental = vec![Unlock { iteration: 6, classes: vec!["ring".into(), "cross".into()] }];
    cfg.validate().unwrap();
    assert_eq!(cfg.hidden_classes(0).into_iter().collect::<Vec<_>>(), ["cross", "ring"]);
    assert_eq!(cfg.hidden_classes(5).len(), 2);
    assert!(cfg.hidden_classes(6).is_empty());
}

#[test]
fn hiding_every_class_leaves_only_background() {
    let data = gen_dataset(3, 3, Split::Train).unwrap();
    let mut cfg = tiny_train_config(2);
    let classes = ["circle", "square", "triangle", "diamond", "cross", "ring"];
    cfg.incremental = vec![Unlock { iteration: 100, classes: classes.iter().map(|c| c.to_string()).collect() }];
    let out = train(&cfg, &data, None).unwrap();
    // no visible objects: no text regions, so no text loss
    assert!(out.log.iter().all(|r| r.text == 0.0));
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let model = Model::new(&toy_config(), toy_vocab(), 6).unwrap();
    let bytes = checkpoint::to_bytes(&model).unwrap();
    let back = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(checkpoint::to_bytes(&back).unwrap(), bytes);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let image = random_image(&mut rng, 16);
    assert_eq!(model.predict(1, &image, 2, 2).unwrap(), back.predict(1, &image, 2, 2).unwrap());
}

#[test]
fn tampered_checkpoints_are_rejected() {
    let model = Model::new(&toy_config(), toy_vocab(), 6).unwrap();
    let bytes = checkpoint::to_bytes(&model).unwrap();
    for pos in [0, 20, bytes.len() / 2, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x40;
        assert!(matches!(checkpoint::from_bytes(&bad), Err(Error::Integrity(_))), "byte {pos}");
    }
    assert!(matches!(checkpoint::from_bytes(&bytes[..bytes.len() - 5]), Err(Error::Integrity(_))));
}

#[test]
fn mismatched_config_or_vocabulary_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::new(&toy_config(), toy_vocab(), 6).unwrap();
    checkpoint::save(&model, &path).unwrap();

    let mut other = toy_config();
    other.decoder.max_tokens = 9;
    match checkpoint::load_expecting(&path, Some(&other), None) {
        Err(Error::Config(msg)) => assert!(msg.contains("decoder.max_tokens"), "{msg}"),
        r => panic!("expected a config error, got {r:?}"),
    }

    let (vocab, _) = caption_vocab();
    match checkpoint::load_expecting(&path, None, Some(&vocab)) {
        Err(Error::Integrity(msg)) => {
            assert!(msg.contains(&vocab.hash()) && msg.contains(&model.vocab.hash()), "{msg}")
        }
        r => panic!("expected an integrity error, got {r:?}"),
    }
    checkpoint::load_expecting(&path, Some(&toy_config()), Some(&toy_vocab())).unwrap();
}

#[test]
fn blank_image_predictions_stay_inside_the_frame() {
    let model = Model::new(&toy_config(), toy_vocab(), 7).unwrap();
    let image = regtext_core::data::RgbImage { width: 16, height: 16, pixels: vec![128; 16 * 16 * 3] };
    let recs = model.predict(0, &image, 1, 3).unwrap();
    assert!(recs.len() <= model.cfg.extractor.max_detections * 3);
    for r in recs {
        assert!(r.x1 >= 0.0 && r.y1 >= 0.0 && r.x2 <= 16.0 && r.y2 <= 16.0);
        assert!((0.0..=1.0).contains(&r.score));
    }
}
