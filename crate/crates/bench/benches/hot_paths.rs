use std::hint::black_box;

use convfit::inference::{build_pool, classify_rows};
use convfit::losses::{mneg_loss, ocl_loss};
use convfit::pipeline::{pool_data, ExperimentData, NShot};
use convfit::trainer::{train_stage2, Stage2Options};
use convfit::{
    silhouette, Checkpoint, Distance, Encoder, EncoderParams, ExperimentConfig, LossConfig,
    OptimConfig, Tape, Tensor,
};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

fn setup() -> (ExperimentConfig, ExperimentData, Encoder) {
    let cfg = ExperimentConfig::desk();
    let data = ExperimentData::load(&cfg).unwrap();
    let enc = Encoder::new(
        cfg.encoder.clone(),
        EncoderParams::init(&cfg.encoder, 1).unwrap(),
    )
    .unwrap();
    (cfg, data, enc)
}

fn encoding(c: &mut Criterion) {
    let (_, data, enc) = setup();
    let texts: Vec<&str> = data.test.iter().map(|u| u.text.as_str()).collect();
    c.bench_function("encode 160 utterances", |b| {
        b.iter(|| enc.encode_texts(black_box(&texts)).unwrap())
    });
}

fn losses(c: &mut Criterion) {
    let rows = |seed: f64| {
        let data = (0..32 * 32)
            .map(|i| ((i as f64 + seed) * 0.37).sin())
            .collect();
        Tensor::matrix(32, 32, data).unwrap()
    };
    let (x, y) = (rows(0.0), rows(1.5));
    let kinds: Vec<bool> = (0..32).map(|i| i % 7 == 0).collect();
    let cfg = LossConfig::default();
    c.bench_function("mneg forward+backward B=32", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let (vx, vy) = (tape.param(&x), tape.param(&y));
            let l = mneg_loss(&mut tape, vx, vy, &cfg).unwrap();
            tape.backward(l).unwrap();
        })
    });
    c.bench_function("online ocl forward+backward P=32", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let (vx, vy) = (tape.param(&x), tape.param(&y));
            let l = ocl_loss(&mut tape, vx, vy, &kinds, &cfg, true).unwrap();
            tape.backward(l).unwrap();
        })
    });
}

fn inference(c: &mut Criterion) {
    let (_, data, enc) = setup();
    let pool = build_pool(&data.train, &enc, None).unwrap();
    let queries = enc.encode_utterances(&data.test, None).unwrap();
    let labels: Vec<&str> = data.test.iter().map(|u| u.label.as_str()).collect();
    c.bench_function("kNN 160 queries x 320 pool", |b| {
        b.iter(|| classify_rows(black_box(&queries), &pool, 1))
    });
    c.bench_function("silhouette 160 points", |b| {
        b.iter(|| silhouette(black_box(&queries), &labels, Distance::Cosine).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let (cfg, data, _) = setup();
    let pool = pool_data(&data.train, NShot::Shots(10), 1).unwrap();
    let params = EncoderParams::init(&cfg.encoder, 1).unwrap();
    let init = Checkpoint::from_encoder_params(&cfg.encoder, &params, Default::default());
    let opt = OptimConfig {
        epochs: 1,
        ..cfg.s2_optim.clone()
    };
    let opts = Stage2Options::default();
    let mut group = c.benchmark_group("stage 2");
    group.sample_size(10);
    group.bench_function("one 10-shot ocl epoch", |b| {
        b.iter_batched(
            || init.clone(),
            |ck| {
                train_stage2(&pool, &opts, &cfg.encoder, Some(&ck), &opt, &cfg.loss, None).unwrap()
            },
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, encoding, losses, inference, training);
criterion_main!(benches);
