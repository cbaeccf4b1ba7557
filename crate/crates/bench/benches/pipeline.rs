use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use latent_bridge::disentangle::{ms_ssim_with_grad, Model};
use latent_bridge::evaluation::compute_fid;
use latent_bridge::generator::{Generator, OracleGenerator};
use latent_bridge::perception::{FrozenNet, IdentityEmbedder, KeypointRegressor, PerceptionKind, TrainingNets};
use latent_bridge::training::{Trainer, TrainState, TrainingConfig};

fn nets() -> TrainingNets {
    TrainingNets {
        identity: IdentityEmbedder::new(FrozenNet::untrained(PerceptionKind::Identity, 1).unwrap()),
        keypoints: KeypointRegressor::new(FrozenNet::untrained(PerceptionKind::Keypoints, 2).unwrap()),
    }
}

fn rendering(c: &mut Criterion) {
    let g = OracleGenerator::new(7);
    let w = g.sample_w(1, 1).unwrap()[0];
    c.bench_function("generate", |b| b.iter(|| g.generate(black_box(&w)).unwrap()));
    c.bench_function("generate_differentiable", |b| b.iter(|| g.generate_differentiable(black_box(&w)).unwrap()));
}

fn losses(c: &mut Criterion) {
    let g = OracleGenerator::new(7);
    let ws = g.sample_w(2, 2).unwrap();
    let (a, b) = (g.generate(&ws[0]).unwrap(), g.generate(&ws[1]).unwrap());
    c.bench_function("ms_ssim_with_grad", |bench| bench.iter(|| ms_ssim_with_grad(black_box(&a), black_box(&b)).unwrap()));
}

fn inference(c: &mut Criterion) {
    let g = OracleGenerator::new(7);
    let nets = nets();
    let model = Model::new(3).unwrap();
    let ws = g.sample_w(3, 2).unwrap();
    let (i_id, i_attr) = (g.generate(&ws[0]).unwrap(), g.generate(&ws[1]).unwrap());
    c.bench_function("infer_w", |b| b.iter(|| model.infer_w(&nets.identity, black_box(&i_id), black_box(&i_attr)).unwrap()));
}

fn training(c: &mut Criterion) {
    let g = OracleGenerator::new(7);
    let nets = nets();
    let config = TrainingConfig { n_dataset: 200, ..Default::default() };
    let mut trainer = Trainer::new(config.clone(), &g, &nets).unwrap();
    let mut state = TrainState::new(&config).unwrap();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    group.bench_function("batch_6", |b| {
        b.iter(|| {
            let (batch, mode) = trainer.batch_for(state.iteration);
            trainer.train_step(&mut state, &batch, mode).unwrap()
        })
    });
    group.finish();
}

fn fid(c: &mut Criterion) {
    let features: Vec<Vec<f64>> = (0..1000).map(|i| (0..32).map(|j| ((i * 31 + j * 7) % 97) as f64 / 97.0).collect()).collect();
    let shifted: Vec<Vec<f64>> = features.iter().map(|r| r.iter().map(|v| v + 0.1).collect()).collect();
    c.bench_function("compute_fid_1000x32", |b| b.iter(|| compute_fid(black_box(&features), black_box(&shifted)).unwrap()));
}

criterion_group!(benches, rendering, losses, inference, training, fid);
criterion_main!(benches);
