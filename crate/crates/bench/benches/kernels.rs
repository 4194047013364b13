use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use specdet_core::config::Config;
use specdet_core::data::{GtBox, Sample};
use specdet_core::metrics::{evaluate, DetBox, EvalItem, TruthBox};
use specdet_core::model::{Ablation, Model};
use specdet_core::params::ParamStore;
use specdet_core::tensor::{PoolMode, Tape, Tensor};

fn rvec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("conv2d");

    let x = rvec(&mut rng, 16 * 32 * 32);
    let w = rvec(&mut rng, 16 * 16 * 9);
    let b = rvec(&mut rng, 16);
    group.bench_function("3x3_s1_16ch_32px", |bch| {
        bch.iter(|| {
            let mut tape = Tape::new();
            let xn = tape.constant(&[16, 32, 32], &x);
            let wn = tape.constant(&[16, 16, 3, 3], &w);
            let bn = tape.constant(&[16], &b);
            black_box(tape.conv2d(xn, wn, Some(bn), 1, 1).unwrap())
        })
    });

    let w1 = rvec(&mut rng, 8 * 16);
    group.bench_function("1x1_16to8_32px", |bch| {
        bch.iter(|| {
            let mut tape = Tape::new();
            let xn = tape.constant(&[16, 32, 32], &x);
            let wn = tape.constant(&[8, 16, 1, 1], &w1);
            black_box(tape.conv2d(xn, wn, None, 1, 0).unwrap())
        })
    });
    group.finish();
}

fn bench_pool_and_norm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rvec(&mut rng, 16 * 32 * 32);
    let mut group = c.benchmark_group("pointwise");
    group.bench_function("maxpool_3x3_s1", |bch| {
        bch.iter(|| {
            let mut tape = Tape::new();
            let xn = tape.constant(&[16, 32, 32], &x);
            black_box(tape.pool2d(xn, PoolMode::Max, 3, 1, 1).unwrap())
        })
    });
    group.bench_function("silu_16k", |bch| {
        bch.iter(|| {
            let mut tape = Tape::new();
            let xn = tape.constant(&[16, 32, 32], &x);
            black_box(tape.silu(xn))
        })
    });
    group.finish();
}

fn sample_from(rng: &mut ChaCha8Rng) -> Sample {
    let s = 64;
    Sample {
        id: "bench".into(),
        visible: Tensor::new(vec![3, s, s], rvec(rng, 3 * s * s)).unwrap(),
        infrared: Tensor::new(vec![1, s, s], rvec(rng, s * s)).unwrap(),
        boxes: vec![GtBox { class: 0, cx: 0.5, cy: 0.5, w: 0.2, h: 0.4 }],
        illumination: 0.4,
    }
}

fn bench_model(c: &mut Criterion) {
    let cfg = Config::default();
    let mut store = ParamStore::new(5);
    let model = Model::new(&mut store, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sample = sample_from(&mut rng);

    let mut group = c.benchmark_group("model");
    group.sample_size(20);
    group.bench_function("forward_64px", |bch| {
        bch.iter(|| {
            let mut tape = Tape::new();
            black_box(
                model
                    .forward_sample(&mut tape, &store, &sample, Ablation::default())
                    .unwrap(),
            )
        })
    });
    group.bench_function("loss_and_backward_64px", |bch| {
        bch.iter(|| {
            let mut tape = Tape::new();
            let out = model
                .batch_loss(&mut tape, &store, std::slice::from_ref(&sample), Ablation::default())
                .unwrap();
            tape.backward(out.joint).unwrap();
            black_box(out.values.joint)
        })
    });
    group.finish();
}

fn bench_metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let items: Vec<EvalItem> = (0..50)
        .map(|i| EvalItem {
            id: format!("img{i}"),
            dets: (0..20)
                .map(|_| DetBox {
                    class: 0,
                    cx: rng.gen_range(0.2..0.8),
                    cy: rng.gen_range(0.2..0.8),
                    w: rng.gen_range(0.05..0.3),
                    h: rng.gen_range(0.05..0.3),
                    score: rng.gen_range(0.0..1.0),
                })
                .collect(),
            gts: (0..3)
                .map(|_| TruthBox {
                    class: 0,
                    cx: rng.gen_range(0.2..0.8),
                    cy: rng.gen_range(0.2..0.8),
                    w: rng.gen_range(0.05..0.3),
                    h: rng.gen_range(0.05..0.3),
                })
                .collect(),
        })
        .collect();
    c.bench_function("evaluate_50img_coco", |bch| {
        bch.iter(|| black_box(evaluate(&items)))
    });
}

criterion_group!(benches, bench_conv, bench_pool_and_norm, bench_model, bench_metrics);
criterion_main!(benches);
