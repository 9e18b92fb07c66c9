//! Hot kernels on the global rayon pool versus a single-thread pool. Build
//! with `--no-default-features` to time the plain sequential loops instead.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use eps_core::data::{gen_multimodal, MultimodalConfig};
use eps_core::encoder::{backward, forward, init_params, EncoderVariant, Inputs};
use eps_core::geometry::{pairwise_sq_dist, EmbeddingSet};
use eps_core::losses::{batch_loss, BetaStore, LossConfig, LossVariant};
use eps_core::metrics::{kmeans, recall_at_k};
use eps_core::mining::{expand_tuples, MinerConfig, PositiveStrategy};
use eps_core::noisy::{expected_objective, expected_objective_grad, ExpectedObjectiveSpec, NoisyLabelModel, Objective};
use eps_core::trainer::random_inits;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    vec![
        ("global", rayon::ThreadPoolBuilder::new().build().unwrap()),
        ("one_thread", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
    ]
}

fn points(n: usize, m: usize, seed: u64) -> EmbeddingSet {
    random_inits(n, m, 1, seed).unwrap().remove(0)
}

fn bench_geometry(c: &mut Criterion) {
    let emb = points(1024, 64, 1);
    let mut g = c.benchmark_group("pairwise_sq_dist_1024x64");
    for (name, pool) in pools() {
        g.bench_function(name, |b| pool.install(|| b.iter(|| pairwise_sq_dist(black_box(&emb)).unwrap())));
    }
    g.finish();
}

fn bench_expected(c: &mut Criterion) {
    let mut g = c.benchmark_group("expected_objective");
    for (obj, n) in [(Objective::Trip, 12), (Objective::EpsMargin, 24)] {
        let model = NoisyLabelModel::contiguous(n, 2, 0.9).unwrap();
        let spec = ExpectedObjectiveSpec::new(obj, 0.2, 0.2, n);
        let emb = points(n, 2, 2);
        for (name, pool) in pools() {
            g.bench_with_input(BenchmarkId::new(format!("{obj:?}/value"), name), &emb, |b, e| {
                pool.install(|| b.iter(|| expected_objective(e, &model, &spec).unwrap()))
            });
            g.bench_with_input(BenchmarkId::new(format!("{obj:?}/grad"), name), &emb, |b, e| {
                pool.install(|| b.iter(|| expected_objective_grad(e, &model, &spec).unwrap()))
            });
        }
    }
    g.finish();
}

fn bench_batch_loss(c: &mut Criterion) {
    let emb = points(64, 16, 3);
    let labels: Vec<usize> = (0..64).map(|i| i / 32).collect();
    let members: Vec<usize> = (0..64).collect();
    let config = LossConfig::default();
    let beta = BetaStore::new(64, config.beta_init);
    let mut g = c.benchmark_group("triplet_batch_64");
    for strategy in [PositiveStrategy::AllPairs, PositiveStrategy::EasyPositive] {
        let miner = MinerConfig { positive_strategy: strategy, ..MinerConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch =
            expand_tuples(&emb, &members, &labels, &miner, LossVariant::Triplet, config.alpha, &mut rng).unwrap();
        for (name, pool) in pools() {
            g.bench_function(BenchmarkId::new(format!("{strategy:?}"), name), |b| {
                pool.install(|| b.iter(|| batch_loss(&emb, black_box(&batch), &config, &beta).unwrap()))
            });
        }
    }
    g.finish();
}

fn bench_encoder(c: &mut Criterion) {
    let params = init_params(EncoderVariant::Mlp, &[784, 128, 2], 5).unwrap();
    let x = points(64, 784, 6).into_coords();
    let mut g = c.benchmark_group("mlp_784_128_2_batch_64");
    for (name, pool) in pools() {
        g.bench_function(name, |b| {
            pool.install(|| {
                b.iter(|| {
                    let (emb, cache) = forward(&params, Inputs::Features(x.view())).unwrap();
                    backward(&params, &cache, &emb.into_coords()).unwrap()
                })
            })
        });
    }
    g.finish();
}

fn bench_metrics(c: &mut Criterion) {
    let ds =
        gen_multimodal(&MultimodalConfig { samples_per_mode: 250, feature_dim: 16, ..Default::default() }).unwrap();
    let emb = EmbeddingSet::new(ds.features.clone()).unwrap();
    let mut g = c.benchmark_group("metrics_1500x16");
    g.sample_size(20);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::new("recall_at_k", name), |b| {
            pool.install(|| b.iter(|| recall_at_k(&emb, &ds.class_labels, &[1, 2, 4, 8]).unwrap()))
        });
        g.bench_function(BenchmarkId::new("kmeans_k20", name), |b| {
            pool.install(|| b.iter(|| kmeans(&emb, 20, 7).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_geometry, bench_expected, bench_batch_loss, bench_encoder, bench_metrics);
criterion_main!(benches);
