use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use regtext_core::data::{gen_dataset, Split};
use regtext_core::metrics::{densecap_map, meteor, GroundTruth, Prediction, ThresholdGrid};
use regtext_core::model::{LossWeights, Model, ModelConfig};
use regtext_core::tensor::{Graph, Tape, Tensor};
use regtext_core::train::{build_vocab, TrainConfig};
use regtext_core::BBox;

fn tensor_ops(c: &mut Criterion) {
    let a = Tensor::from_fn(&[64, 64], |i| (i as f64 * 0.37).sin());
    let b = Tensor::from_fn(&[64, 256], |i| (i as f64 * 0.11).cos());
    c.bench_function("matmul 64x64x256 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let x = t.leaf(a.clone().with_requires_grad(true)).unwrap();
            let y = t.leaf(b.clone().with_requires_grad(true)).unwrap();
            let z = t.matmul(x, y).unwrap();
            let s = t.sum(z).unwrap();
            t.backward(s).unwrap();
            black_box(t.grad(x).map(|g| g[0]))
        })
    });
}

fn model_steps(c: &mut Criterion) {
    let cfg = TrainConfig::default();
    let data = gen_dataset(0, 4, Split::Train).unwrap();
    let vocab = build_vocab(&cfg, &data).unwrap();
    let model = Model::new(&ModelConfig::default(), vocab, 0).unwrap();
    let samples = data.samples().unwrap();
    let image = samples[0].image.to_tensor();
    let targets = model.targets(&samples[0].objects);

    c.bench_function("encode 64x64", |bench| {
        bench.iter(|| {
            let mut g = Graph::inference(&model.store);
            black_box(model.encode(&mut g, &image).unwrap().channels)
        })
    });
    c.bench_function("image loss fwd+bwd", |bench| {
        bench.iter_batched(
            || ChaCha8Rng::seed_from_u64(1),
            |mut rng| {
                let mut g = Graph::training(&model.store);
                let (terms, _) = model
                    .image_loss(&mut g, &image, &targets, LossWeights::default(), &[0.5, 0.5], 3, None, &mut rng)
                    .unwrap();
                g.backward(terms.total).unwrap();
            },
            BatchSize::SmallInput,
        )
    });
    c.bench_function("detect and describe (beam 3)", |bench| {
        bench.iter(|| black_box(model.detect_and_describe(&samples[0].image, 2, 3).unwrap().len()))
    });
}

fn metrics(c: &mut Criterion) {
    c.bench_function("meteor 9-word pair", |bench| {
        bench.iter(|| {
            meteor(
                black_box("a large blue cross left of a red ring"),
                black_box("a small red ring right of a large blue cross"),
            )
        })
    });
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for img in 0..50u64 {
        for k in 0..4 {
            let x = k as f64 * 15.0;
            gts.push(GroundTruth {
                image_id: img,
                bbox: BBox { x1: x, y1: x, x2: x + 12.0, y2: x + 12.0 },
                text: "a small red ring above a blue cross".into(),
            });
            preds.push(Prediction {
                image_id: img,
                bbox: BBox { x1: x + 1.0, y1: x, x2: x + 13.0, y2: x + 11.0 },
                text: "a small red ring left of a blue cross".into(),
                score: 0.9 - 0.01 * k as f64,
            });
        }
    }
    let grid = ThresholdGrid::default();
    c.bench_function("densecap_map 200 boxes", |bench| bench.iter(|| densecap_map(&preds, &gts, &grid).map));
}

criterion_group!(benches, tensor_ops, model_steps, metrics);
criterion_main!(benches);
