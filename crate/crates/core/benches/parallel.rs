//! Sequential path (one worker) against the rayon pool for the data-parallel
//! operations. Build with `--no-default-features` to drop rayon entirely.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use prefkit_core::embed::{synth_store, FeatureIndex};
use prefkit_core::metrics::{eval_prompts, evaluate, HeadScorer};
use prefkit_core::par;
use prefkit_core::reward::init_head;
use prefkit_core::select::build_knn_graph;
use prefkit_core::train::{grid_search, PairFeatures, TrainConfig};

fn modes() -> [(&'static str, Option<usize>); 2] {
    [("sequential", Some(1)), ("parallel", None)]
}

fn knn(c: &mut Criterion) {
    let corpus = synth_store(1, 1500, 0, 64);
    let mut group = c.benchmark_group("knn_graph_1500");
    group.sample_size(10);
    for (name, workers) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_workers(workers, || build_knn_graph(&corpus.store, 150).unwrap()))
        });
    }
    group.finish();
}

fn eval(c: &mut Criterion) {
    let corpus = synth_store(2, 400, 8, 64);
    let dataset = corpus.dataset();
    let prompts = eval_prompts(&dataset);
    let head = init_head(&[128, 512, 1], 3).unwrap();
    let mut group = c.benchmark_group("evaluate_400_prompts");
    group.sample_size(10);
    for (name, workers) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                par::with_workers(workers, || {
                    let scorer = HeadScorer::new("head", &head, FeatureIndex::new(&corpus.store));
                    evaluate(&scorer, &prompts).unwrap()
                })
            })
        });
    }
    group.finish();
}

fn grid(c: &mut Criterion) {
    let corpus = synth_store(4, 120, 8, 32);
    let index = FeatureIndex::new(&corpus.store);
    let pairs = corpus.oracle_pairs(0.0, 0);
    let (train, val) = pairs.split_at(100 * 28);
    let train = PairFeatures::resolve(train, &index).unwrap();
    let val = PairFeatures::resolve(val, &index).unwrap();
    let configs: Vec<TrainConfig> = [0.5, 0.1, 0.05, 0.01]
        .into_iter()
        .map(|lr| TrainConfig {
            base_learning_rate: lr,
            hidden_dims: vec![256],
            epochs: 3,
            ..TrainConfig::default()
        })
        .collect();
    let mut group = c.benchmark_group("grid_search_4");
    group.sample_size(10);
    for (name, workers) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_workers(workers, || grid_search(&configs, &train, &val).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, knn, eval, grid);
criterion_main!(benches);
