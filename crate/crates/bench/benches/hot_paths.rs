use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use ropetp_core::body::BodyTemplate;
use ropetp_core::diffusion::{DenoiserConfig, FootTarget, TrajDataset, TrajTrainConfig, TrajTrainer, DEFAULT_V_THRESH};
use ropetp_core::hierarchy::default_partition;
use ropetp_core::metrics::{pa_mpjpe, wa_mpjpe};
use ropetp_core::rope::{RopeConfig, RopeTrainConfig, RopeTrainer};
use ropetp_core::synth::{gen_locomotion, GaitSpec, SceneRecord, SceneSpec};
use ropetp_core::{Tape, Tensor};

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (a, b) = (randn(&mut rng, &[8, 60, 128]), randn(&mut rng, &[128, 128]));
    c.bench_function("matmul 8x60x128 by 128x128", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap().value()
        })
    });
}

fn denoiser_step(c: &mut Criterion) {
    let body = BodyTemplate::procedural(192).unwrap();
    let seqs: Vec<_> = (0..32).map(|s| gen_locomotion(&GaitSpec::random(s, 60, 30.0), &body).unwrap()).collect();
    let data = TrajDataset::new(&seqs, FootTarget::Feet, DEFAULT_V_THRESH).unwrap();
    let config =
        TrajTrainConfig { denoiser: DenoiserConfig { layers: 4, ..DenoiserConfig::default() }, batch: 32, ..TrajTrainConfig::default() };
    let mut trainer = TrajTrainer::new(config).unwrap();
    let mut group = c.benchmark_group("trajectory");
    group.sample_size(10);
    group.bench_function("train step, 4 layers, batch 32", |bench| bench.iter(|| trainer.train_step(&data).unwrap()));
    group.finish();
}

fn rope_forward(c: &mut Criterion) {
    let body = BodyTemplate::procedural(768).unwrap();
    let table = default_partition();
    let scenes: Vec<_> =
        (0..16).map(|i| SceneRecord::sample(&SceneSpec::default(), 1, i, &table).materialize(&body, &table).unwrap().0).collect();
    let refs: Vec<_> = scenes.iter().collect();
    let config = RopeTrainConfig { model: RopeConfig { width: 64, icl_dim: 64, ..RopeConfig::default() }, ..RopeTrainConfig::default() };
    let trainer = RopeTrainer::new(config, table, body).unwrap();
    let mut group = c.benchmark_group("regression");
    group.sample_size(10);
    group.bench_function("predict 16 scenes", |bench| bench.iter(|| trainer.predict(&refs).unwrap()));
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (p, g) = (randn(&mut rng, &[64, 24, 3]), randn(&mut rng, &[64, 24, 3]));
    c.bench_function("pa_mpjpe 64 poses", |bench| bench.iter(|| pa_mpjpe(&p, &g).unwrap()));
    c.bench_function("wa_mpjpe 64 frames", |bench| bench.iter(|| wa_mpjpe(&p, &g).unwrap()));
}

fn setup(c: &mut Criterion) {
    ropetp_cli::tune_allocator();
    matmul(c);
    metrics(c);
    denoiser_step(c);
    rope_forward(c);
}

criterion_group!(benches, setup);
criterion_main!(benches);
