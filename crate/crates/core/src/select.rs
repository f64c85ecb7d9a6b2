//! Diversity-aware subset selection over an exact cosine kNN graph.
//!
//! Each round scores every unselected vertex by the summed dynamic weight of
//! its unselected out-neighbors, takes the best (ties by id), then multiplies
//! the weight of each of its neighbors by a decay factor.

use thiserror::Error;

use crate::embed::EmbeddingStore;
use crate::par;

/// Default multiplicative down-weighting applied to a selected vertex's
/// neighbors.
pub const DEFAULT_DECAY: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum SelectError {
    #[error("need at least two vertices, got {0}")]
    TooFewVertices(usize),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("vector `{0}` has zero norm")]
    ZeroVector(String),
    #[error("cannot select {m} of {n} vertices")]
    TooMany { m: usize, n: usize },
    #[error("decay {0} outside (0, 1]")]
    InvalidDecay(f64),
    #[error("set size must be at least 2, got {0}")]
    InvalidSetSize(usize),
}

pub type Result<T, E = SelectError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityGraph {
    ids: Vec<String>,
    /// Out-neighbors per vertex as `(vertex, cosine similarity)`, most
    /// similar first.
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl SimilarityGraph {
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn neighbors(&self, v: usize) -> &[(usize, f64)] {
        &self.neighbors[v]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }
}

fn normalized(id: &str, v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(SelectError::ZeroVector(id.to_string()));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Exact kNN graph over `(id, vector)` items. Vertices are kept in the given
/// order; neighbor ties break by lower vertex index.
pub fn build_knn_graph_from(items: &[(String, Vec<f64>)], k: usize) -> Result<SimilarityGraph> {
    let n = items.len();
    if n < 2 {
        return Err(SelectError::TooFewVertices(n));
    }
    if k == 0 {
        return Err(SelectError::ZeroK);
    }
    let unit = items
        .iter()
        .map(|(id, v)| normalized(id, v))
        .collect::<Result<Vec<_>>>()?;
    let k = k.min(n - 1);
    let neighbors = par::map_range(n, |v| {
        let mut sims: Vec<(usize, f64)> = (0..n)
            .filter(|&u| u != v)
            .map(|u| (u, unit[v].iter().zip(&unit[u]).map(|(a, b)| a * b).sum()))
            .collect();
        sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        sims.truncate(k);
        sims
    });
    Ok(SimilarityGraph {
        ids: items.iter().map(|(id, _)| id.clone()).collect(),
        neighbors,
    })
}

/// kNN graph over every entry of the store, in id order.
pub fn build_knn_graph(store: &EmbeddingStore, k: usize) -> Result<SimilarityGraph> {
    let items: Vec<(String, Vec<f64>)> = store
        .iter()
        .map(|(id, e)| (id.to_string(), e.vector.clone()))
        .collect();
    build_knn_graph_from(&items, k)
}

/// Greedy selection of `m` vertex ids. Deterministic, and incremental: the
/// first `m` picks do not depend on how many more are requested.
pub fn select_diverse(graph: &SimilarityGraph, m: usize, decay: f64) -> Result<Vec<String>> {
    let n = graph.len();
    if m > n {
        return Err(SelectError::TooMany { m, n });
    }
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(SelectError::InvalidDecay(decay));
    }
    let mut weight = vec![1.0f64; n];
    let mut selected = vec![false; n];
    let mut order = Vec::with_capacity(m);
    for _ in 0..m {
        let mut best: Option<(usize, f64)> = None;
        for v in 0..n {
            if selected[v] {
                continue;
            }
            let score: f64 = graph.neighbors[v]
                .iter()
                .filter(|(u, _)| !selected[*u])
                .map(|(u, _)| weight[*u])
                .sum();
            let better = match best {
                None => true,
                Some((b, s)) => score > s || (score == s && graph.ids[v] < graph.ids[b]),
            };
            if better {
                best = Some((v, score));
            }
        }
        let (v, _) = best.expect("m <= n leaves an unselected vertex");
        selected[v] = true;
        for &(u, _) in &graph.neighbors[v] {
            weight[u] *= decay;
        }
        order.push(graph.ids[v].clone());
    }
    Ok(order)
}

/// Splits the store (id order) into consecutive chunks of `set_size`,
/// selects up to `per_set` from each, and concatenates in chunk order.
pub fn chunked_select(
    store: &EmbeddingStore,
    set_size: usize,
    per_set: usize,
    k: usize,
    decay: f64,
) -> Result<Vec<String>> {
    if set_size < 2 {
        return Err(SelectError::InvalidSetSize(set_size));
    }
    let items: Vec<(String, Vec<f64>)> = store
        .iter()
        .map(|(id, e)| (id.to_string(), e.vector.clone()))
        .collect();
    let chunks: Vec<&[(String, Vec<f64>)]> = items.chunks(set_size).collect();
    let picked = par::map(&chunks, |chunk| select_chunk(chunk, per_set, k, decay));
    let mut out = Vec::new();
    for ids in picked {
        out.extend(ids?);
    }
    Ok(out)
}

/// Selection within one chunk; a lone trailing item is taken as is.
pub fn select_chunk(chunk: &[(String, Vec<f64>)], per_set: usize, k: usize, decay: f64) -> Result<Vec<String>> {
    let m = per_set.min(chunk.len());
    if chunk.len() < 2 {
        return Ok(chunk.iter().take(m).map(|(id, _)| id.clone()).collect());
    }
    let graph = build_knn_graph_from(chunk, k)?;
    select_diverse(&graph, m, decay)
}
