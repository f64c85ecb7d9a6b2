//! Diverse selection against brute-force and random baselines.

use prefkit_core::embed::{EmbeddingKind, EmbeddingStore};
use prefkit_core::par;
use prefkit_core::select::{
    build_knn_graph, build_knn_graph_from, chunked_select, select_chunk, select_diverse, DEFAULT_DECAY,
};
use proptest::prelude::*;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// `n` points around a few centers of uneven popularity.
fn clustered_store(seed: u64, n: usize, dim: usize) -> EmbeddingStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clusters = rng.random_range(4..=10);
    let centers: Vec<Vec<f64>> = (0..clusters).map(|_| gaussian(&mut rng, dim)).collect();
    let weights: Vec<f64> = (0..clusters).map(|c| 1.0 / (c as f64 + 1.0)).collect();
    let total: f64 = weights.iter().sum();
    let mut store = EmbeddingStore::new(dim);
    for i in 0..n {
        let mut u = rng.random::<f64>() * total;
        let mut c = 0;
        while u > weights[c] && c + 1 < clusters {
            u -= weights[c];
            c += 1;
        }
        let noise = gaussian(&mut rng, dim);
        let v: Vec<f64> = centers[c].iter().zip(noise).map(|(m, e)| m + 0.25 * e).collect();
        store.insert(format!("q{i:04}"), EmbeddingKind::Text, v).unwrap();
    }
    store
}

fn mean_pairwise_cosine(store: &EmbeddingStore, ids: &[String]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (i, a) in ids.iter().enumerate() {
        for b in &ids[i + 1..] {
            total += cosine(store.vector(a).unwrap(), store.vector(b).unwrap());
            count += 1;
        }
    }
    total / count as f64
}

/// Mean pairwise cosine of uniform random `m`-subsets, averaged over draws.
fn random_baseline(store: &EmbeddingStore, m: usize, seed: u64) -> f64 {
    let all: Vec<String> = store.iter().map(|(id, _)| id.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = 200;
    (0..draws)
        .map(|_| {
            let sample: Vec<String> = all.choose_multiple(&mut rng, m).cloned().collect();
            mean_pairwise_cosine(store, &sample)
        })
        .sum::<f64>()
        / draws as f64
}

#[test]
fn greedy_selection_is_more_diverse_than_random() {
    let trials = 20;
    let mut wins = 0;
    for t in 0..trials {
        let store = clustered_store(1000 + t, 200, 16);
        let graph = build_knn_graph(&store, 10).unwrap();
        let chosen = select_diverse(&graph, 20, DEFAULT_DECAY).unwrap();
        if mean_pairwise_cosine(&store, &chosen) < random_baseline(&store, 20, t) {
            wins += 1;
        }
    }
    assert!(wins * 10 >= trials * 9, "{wins}/{trials}");
}

#[test]
fn knn_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let items: Vec<(String, Vec<f64>)> = (0..40).map(|i| (format!("v{i}"), gaussian(&mut rng, 5))).collect();
    for k in [1, 3, 39, 60] {
        let g = build_knn_graph_from(&items, k).unwrap();
        for v in 0..items.len() {
            let mut all: Vec<(usize, f64)> = (0..items.len())
                .filter(|&u| u != v)
                .map(|u| (u, cosine(&items[v].1, &items[u].1)))
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let expected: Vec<usize> = all.iter().take(k.min(39)).map(|x| x.0).collect();
            let got: Vec<usize> = g.neighbors(v).iter().map(|x| x.0).collect();
            assert_eq!(got, expected, "v={v} k={k}");
        }
    }
}

#[test]
fn nearest_neighbor_on_a_line_of_directions() {
    // Directions at angles 0, 1 and 10 degrees.
    let items: Vec<(String, Vec<f64>)> = [0.0f64, 1.0, 10.0]
        .iter()
        .enumerate()
        .map(|(i, d)| (format!("v{i}"), vec![d.to_radians().cos(), d.to_radians().sin()]))
        .collect();
    let g = build_knn_graph_from(&items, 1).unwrap();
    let nn: Vec<usize> = (0..3).map(|v| g.neighbors(v)[0].0).collect();
    assert_eq!(nn, vec![1, 0, 1]);
}

#[test]
fn two_clusters_split_like_max_min_oracle() {
    let pts = [("a", [1.0, 0.02]), ("b", [1.0, -0.02]), ("c", [0.02, 1.0]), ("d", [-0.02, 1.0])];
    let items: Vec<(String, Vec<f64>)> = pts.iter().map(|(id, v)| (id.to_string(), v.to_vec())).collect();
    // Brute-force oracle: the 2-subset with the largest spread.
    let dist = |i: usize, j: usize| 1.0 - cosine(&items[i].1, &items[j].1);
    let mut best = (0, 1);
    for i in 0..4 {
        for j in i + 1..4 {
            if dist(i, j) > dist(best.0, best.1) {
                best = (i, j);
            }
        }
    }
    // Clusters induced by the oracle pair: each point joins the closer end.
    let side = |v: usize| dist(v, best.0) > dist(v, best.1);
    let g = build_knn_graph_from(&items, 1).unwrap();
    let chosen = select_diverse(&g, 2, DEFAULT_DECAY).unwrap();
    let idx: Vec<usize> = chosen.iter().map(|id| g.index_of(id).unwrap()).collect();
    assert_ne!(side(idx[0]), side(idx[1]), "{chosen:?}");
}

#[test]
fn chunk_order_does_not_matter() {
    let store = clustered_store(8, 230, 8);
    let expected = chunked_select(&store, 100, 10, 10, DEFAULT_DECAY).unwrap();
    assert_eq!(expected.len(), 10 + 10 + 10);
    let items: Vec<(String, Vec<f64>)> =
        store.iter().map(|(id, e)| (id.to_string(), e.vector.clone())).collect();
    let chunks: Vec<&[(String, Vec<f64>)]> = items.chunks(100).collect();
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    order.reverse();
    let mut results = vec![Vec::new(); chunks.len()];
    for c in order {
        results[c] = select_chunk(chunks[c], 10, 10, DEFAULT_DECAY).unwrap();
    }
    assert_eq!(results.concat(), expected);
    let sequential = par::with_workers(Some(1), || chunked_select(&store, 100, 10, 10, DEFAULT_DECAY)).unwrap();
    assert_eq!(sequential, expected);
}

#[test]
fn two_hundred_items_in_two_sets() {
    let store = clustered_store(9, 200, 8);
    assert_eq!(chunked_select(&store, 100, 10, 10, DEFAULT_DECAY).unwrap().len(), 20);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn greedy_is_prefix_consistent(seed in 0u64..10_000, m in 1usize..30, extra in 1usize..20) {
        let store = clustered_store(seed, 60, 6);
        let g = build_knn_graph(&store, 5).unwrap();
        let short = select_diverse(&g, m, DEFAULT_DECAY).unwrap();
        let long = select_diverse(&g, m + extra, DEFAULT_DECAY).unwrap();
        prop_assert_eq!(&long[..m], &short[..]);
        prop_assert_eq!(select_diverse(&g, m, DEFAULT_DECAY).unwrap(), short);
    }

    #[test]
    fn graph_shape(seed in 0u64..10_000, n in 2usize..30, k in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items: Vec<(String, Vec<f64>)> = (0..n).map(|i| (format!("v{i:02}"), gaussian(&mut rng, 3))).collect();
        let g = build_knn_graph_from(&items, k).unwrap();
        for v in 0..n {
            prop_assert_eq!(g.neighbors(v).len(), k.min(n - 1));
            prop_assert!(g.neighbors(v).iter().all(|(u, _)| *u != v));
        }
    }
}
