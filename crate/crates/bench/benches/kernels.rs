use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use rand::Rng;

use sifed_bench::{Fixture, SEED};
use sifed_core::activations::DEFAULT_EPS;
use sifed_core::autodiff::Tensor;
use sifed_core::dp::{tree_init, DpConfig};
use sifed_core::federated::{clip_update, client_update, quantize_update, ClientConfig, QuantConfig};
use sifed_core::models::{attention, batch_loss_and_grad, cifg_step, AttnParams, CifgParams, ModelVariant};
use sifed_core::rng::{stream, Purpose};

fn random_vec(n: usize, salt: u64) -> Vec<f64> {
    let mut rng = stream(SEED, Purpose::ClientTraining, salt, 0);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn activations(c: &mut Criterion) {
    let mut group = c.benchmark_group("cifg_step");
    let p = CifgParams::random(32, 64, 0.3, &mut stream(SEED, Purpose::ModelInit, 1, 0));
    let (x, h, cell) = (random_vec(32, 1), random_vec(64, 2), random_vec(64, 3));
    for variant in [ModelVariant::CifgStandard, ModelVariant::CifgScaleInvariant] {
        group.bench_function(BenchmarkId::from_parameter(variant), |b| {
            b.iter(|| cifg_step(&p, &x, &h, &cell, variant, DEFAULT_EPS).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("attention");
    let p = AttnParams::random(32, 64, &mut stream(SEED, Purpose::ModelInit, 2, 0));
    let xs = Tensor::matrix(32, 20, random_vec(32 * 20, 4)).unwrap();
    for variant in [ModelVariant::TransformerStandard, ModelVariant::TransformerScaleInvariant] {
        group.bench_function(BenchmarkId::from_parameter(variant), |b| {
            b.iter(|| attention(&xs, &p, 2, variant, DEFAULT_EPS, true).unwrap())
        });
    }
    group.finish();
}

fn training(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_loss_and_grad");
    group.sample_size(20);
    for variant in ModelVariant::ALL {
        let f = Fixture::new(variant);
        let batch = f.batch(10);
        group.bench_function(BenchmarkId::from_parameter(variant), |b| {
            b.iter(|| batch_loss_and_grad(&f.model, &f.params, &batch).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("client_update");
    group.sample_size(10);
    let cfg = ClientConfig { max_batches: 5, ..ClientConfig::default() };
    for variant in [ModelVariant::CifgScaleInvariant, ModelVariant::TransformerScaleInvariant] {
        let f = Fixture::new(variant);
        let data = f.batch(50);
        group.bench_function(BenchmarkId::from_parameter(variant), |b| {
            b.iter(|| {
                let mut rng = stream(SEED, Purpose::ClientTraining, 1, 0);
                client_update(&f.params, &data, &cfg, &f.model, &mut rng).unwrap()
            })
        });
    }
    group.finish();
}

fn compression(c: &mut Criterion) {
    let n = 200_000;
    let delta = random_vec(n, 5);
    let layout = [n / 2, n / 2];
    c.bench_function("quantize_update/8bit", |b| {
        let q = QuantConfig { enabled: true, bits: 8 };
        let mut rng = stream(SEED, Purpose::Quantization, 1, 0);
        b.iter(|| quantize_update(&delta, &layout, &q, &mut rng))
    });
    c.bench_function("clip_update", |b| b.iter(|| clip_update(&delta, 5.0)));

    let cfg = DpConfig { clip_norm: 1.0, noise_multiplier: 1.0, clients_per_round: 10, reported_zcdp: None };
    c.bench_function("tree_step", |b| {
        b.iter_batched(
            || tree_init(n, &cfg, SEED),
            |mut tree| {
                for _ in 0..8 {
                    tree.step(&delta).unwrap();
                }
                tree
            },
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, activations, training, compression);
criterion_main!(benches);
