//! Embedding storage, feature fusion and the planted-utility synthetic corpus.
//!
//! Text embeddings are keyed by prompt id; image embeddings by the
//! `embedding_id` of a generation (which defaults to the image id).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    Category, ComparisonPair, Dataset, GenerationRecord, PromptRecord, RankingRecord,
    RatingRecord, MAX_SLOTS,
};

pub const BINARY_MAGIC: &[u8; 4] = b"EMB1";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding `{id}` has dimension {found}, expected {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("embedding `{id}` has a non-finite component at index {index}")]
    NonFinite { id: String, index: usize },
    #[error("cannot fuse vectors of dimension {text} and {image}")]
    FuseMismatch { text: usize, image: usize },
    #[error("duplicate embedding id `{0}`")]
    Duplicate(String),
    #[error("no embedding for `{0}`")]
    Missing(String),
    #[error("embedding `{0}` has zero dimension")]
    Empty(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = EmbedError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub kind: EmbeddingKind,
    pub vector: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingLine {
    id: String,
    kind: EmbeddingKind,
    vec: Vec<f64>,
}

/// Vectors of one shared dimension, keyed by id. Read-only once built.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    entries: BTreeMap<String, Embedding>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: BTreeMap::new(),
        }
    }

    /// Dimension of every vector; 0 for a store that has never held one.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, kind: EmbeddingKind, vector: Vec<f64>) -> Result<()> {
        let id = id.into();
        if vector.is_empty() {
            return Err(EmbedError::Empty(id));
        }
        if self.entries.is_empty() && self.dim == 0 {
            self.dim = vector.len();
        }
        if vector.len() != self.dim {
            return Err(EmbedError::DimensionMismatch {
                id,
                expected: self.dim,
                found: vector.len(),
            });
        }
        if let Some(index) = vector.iter().position(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite { id, index });
        }
        if self.entries.contains_key(&id) {
            return Err(EmbedError::Duplicate(id));
        }
        self.entries.insert(id, Embedding { kind, vector });
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Embedding> {
        self.entries.get(id)
    }

    pub fn vector(&self, id: &str) -> Result<&[f64]> {
        self.entries
            .get(id)
            .map(|e| e.vector.as_slice())
            .ok_or_else(|| EmbedError::Missing(id.to_string()))
    }

    /// Entries in id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Embedding)> {
        self.entries.iter().map(|(id, e)| (id.as_str(), e))
    }

    /// A store holding only the entries of one kind.
    pub fn of_kind(&self, kind: EmbeddingKind) -> EmbeddingStore {
        EmbeddingStore {
            dim: self.dim,
            entries: self
                .entries
                .iter()
                .filter(|(_, e)| e.kind == kind)
                .map(|(id, e)| (id.clone(), e.clone()))
                .collect(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (id, e) in &self.entries {
            let line = EmbeddingLine {
                id: id.clone(),
                kind: e.kind,
                vec: e.vector.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("embedding serializes"));
            out.push('\n');
        }
        out
    }

    /// Binary encoding. Components are narrowed to 32-bit floats.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (id, e) in &self.entries {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.push(match e.kind {
                EmbeddingKind::Text => 0,
                EmbeddingKind::Image => 1,
            });
            for v in &e.vector {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_binary(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |message: &str| EmbedError::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: message.to_string(),
        };
        let mut cur = ByteCursor { bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| fail("truncated header"))? != BINARY_MAGIC {
            return Err(fail("bad magic"));
        }
        let dim = cur.u32().ok_or_else(|| fail("truncated header"))? as usize;
        let count = cur.u64().ok_or_else(|| fail("truncated header"))?;
        let mut store = EmbeddingStore::new(dim);
        for _ in 0..count {
            let len = cur.u16().ok_or_else(|| fail("truncated entry"))? as usize;
            let id = std::str::from_utf8(cur.take(len).ok_or_else(|| fail("truncated entry"))?)
                .map_err(|_| fail("id is not UTF-8"))?
                .to_string();
            let kind = match cur.take(1).ok_or_else(|| fail("truncated entry"))?[0] {
                0 => EmbeddingKind::Text,
                1 => EmbeddingKind::Image,
                _ => return Err(fail("unknown kind byte")),
            };
            let raw = cur.take(4 * dim).ok_or_else(|| fail("truncated vector"))?;
            let vector = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            store.insert(id, kind, vector)?;
        }
        if cur.pos != bytes.len() {
            return Err(fail("trailing bytes"));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = if path.extension().is_some_and(|e| e == "bin") {
            self.to_binary()
        } else {
            self.to_jsonl().into_bytes()
        };
        let io_err = |source| EmbedError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut file = fs::File::create(path).map_err(io_err)?;
        file.write_all(&bytes).map_err(io_err)
    }
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let slice = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(slice)
    }
    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Loads either format: binary when the file starts with `EMB1`, otherwise
/// line-delimited JSON.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingStore> {
    let io_err = |source| EmbedError::Io {
        path: path.to_path_buf(),
        source,
    };
    let bytes = fs::read(path).map_err(io_err)?;
    if bytes.starts_with(BINARY_MAGIC) {
        return EmbeddingStore::from_binary(&bytes, path);
    }
    let mut store = EmbeddingStore::default();
    for (i, line) in BufReader::new(bytes.as_slice()).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: EmbeddingLine = serde_json::from_str(&line).map_err(|e| EmbedError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        store.insert(parsed.id, parsed.kind, parsed.vec)?;
    }
    Ok(store)
}

/// Concatenated `[text ∥ image]` feature fed to the reward head.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeature(pub Vec<f64>);

impl FusedFeature {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Splits back into the text and image halves.
    pub fn split(&self) -> (&[f64], &[f64]) {
        self.0.split_at(self.0.len() / 2)
    }
}

pub fn fuse(text: &[f64], image: &[f64]) -> Result<FusedFeature> {
    if text.len() != image.len() {
        return Err(EmbedError::FuseMismatch {
            text: text.len(),
            image: image.len(),
        });
    }
    let mut v = Vec::with_capacity(text.len() * 2);
    v.extend_from_slice(text);
    v.extend_from_slice(image);
    Ok(FusedFeature(v))
}

/// Resolves `(prompt_id, image_id)` to a fused feature through a store.
#[derive(Debug, Clone)]
pub struct FeatureIndex<'a> {
    store: &'a EmbeddingStore,
    image_embedding: HashMap<String, String>,
}

impl<'a> FeatureIndex<'a> {
    /// Image ids are used directly as embedding ids.
    pub fn new(store: &'a EmbeddingStore) -> Self {
        Self {
            store,
            image_embedding: HashMap::new(),
        }
    }

    /// Image ids are mapped through the generations' `embedding_id`.
    pub fn with_generations<'g>(
        store: &'a EmbeddingStore,
        generations: impl IntoIterator<Item = &'g GenerationRecord>,
    ) -> Self {
        Self {
            store,
            image_embedding: generations
                .into_iter()
                .map(|g| (g.id.clone(), g.embedding_id.clone()))
                .collect(),
        }
    }

    pub fn store(&self) -> &EmbeddingStore {
        self.store
    }

    pub fn feature(&self, prompt_id: &str, image_id: &str) -> Result<FusedFeature> {
        let embedding_id = self
            .image_embedding
            .get(image_id)
            .map(String::as_str)
            .unwrap_or(image_id);
        fuse(self.store.vector(prompt_id)?, self.store.vector(embedding_id)?)
    }
}

/// One prompt of the synthetic corpus with its image ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPrompt {
    pub prompt_id: String,
    pub image_ids: Vec<String>,
}

/// Random unit vectors plus a hidden linear utility over fused features.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub store: EmbeddingStore,
    /// Planted weights `w*`, length `2 * dim`.
    pub planted: Vec<f64>,
    pub prompts: Vec<SyntheticPrompt>,
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Builds a reproducible synthetic corpus. Prompt ids are `p00000`, image
/// ids `p00000_i00`.
pub fn synth_store(seed: u64, n_prompts: usize, images_per_prompt: usize, dim: usize) -> SyntheticCorpus {
    assert!(dim >= 2, "synthetic dimension must be at least 2");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planted = unit_vector(&mut rng, 2 * dim);
    let mut store = EmbeddingStore::new(dim);
    let mut prompts = Vec::with_capacity(n_prompts);
    for p in 0..n_prompts {
        let prompt_id = format!("p{p:05}");
        store
            .insert(prompt_id.clone(), EmbeddingKind::Text, unit_vector(&mut rng, dim))
            .expect("fresh synthetic id");
        let image_ids: Vec<String> = (0..images_per_prompt)
            .map(|i| format!("{prompt_id}_i{i:02}"))
            .collect();
        for id in &image_ids {
            store
                .insert(id.clone(), EmbeddingKind::Image, unit_vector(&mut rng, dim))
                .expect("fresh synthetic id");
        }
        prompts.push(SyntheticPrompt { prompt_id, image_ids });
    }
    SyntheticCorpus {
        store,
        planted,
        prompts,
    }
}

impl SyntheticCorpus {
    /// True utility `w* · [text ∥ image]`.
    pub fn utility(&self, prompt_id: &str, image_id: &str) -> Result<f64> {
        let f = FeatureIndex::new(&self.store).feature(prompt_id, image_id)?;
        Ok(dot(&self.planted, f.as_slice()))
    }

    /// Image ids of one prompt sorted by true utility, best first.
    pub fn true_order(&self, prompt: &SyntheticPrompt) -> Vec<String> {
        let mut scored: Vec<(f64, &String)> = prompt
            .image_ids
            .iter()
            .map(|id| (self.utility(&prompt.prompt_id, id).expect("synthetic ids resolve"), id))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        scored.into_iter().map(|(_, id)| id.clone()).collect()
    }

    /// All `C(n,2)` pairs per prompt from the true order. Each pair is
    /// flipped independently with probability `noise_rate`.
    pub fn oracle_pairs(&self, noise_rate: f64, seed: u64) -> Vec<ComparisonPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::new();
        for prompt in &self.prompts {
            let order = self.true_order(prompt);
            for (i, better) in order.iter().enumerate() {
                for worse in &order[i + 1..] {
                    let flip = noise_rate > 0.0 && rng.random::<f64>() < noise_rate;
                    let (b, w) = if flip { (worse, better) } else { (better, worse) };
                    pairs.push(ComparisonPair {
                        prompt_id: prompt.prompt_id.clone(),
                        better_id: b.clone(),
                        worse_id: w.clone(),
                        source_annotator: None,
                    });
                }
            }
        }
        pairs
    }

    /// A corpus dataset whose rankings pack the true order into slots (ties
    /// where more images than slots) and whose ratings agree with the order.
    pub fn dataset(&self) -> Dataset {
        let mut prompts = Vec::new();
        let mut generations = Vec::new();
        let mut ratings = Vec::new();
        let mut rankings = Vec::new();
        for (n, prompt) in self.prompts.iter().enumerate() {
            prompts.push(PromptRecord {
                id: prompt.prompt_id.clone(),
                text: format!("synthetic prompt {n}"),
                category: Category::ALL[n % Category::ALL.len()],
                unclear_intent: false,
                issue_flags: Default::default(),
                function_phrase_proportion: Some((n % 11) as f64 / 10.0),
            });
            for id in &prompt.image_ids {
                generations.push(GenerationRecord {
                    id: id.clone(),
                    prompt_id: prompt.prompt_id.clone(),
                    embedding_id: id.clone(),
                });
            }
            let order = self.true_order(prompt);
            let slots = pack_slots(&order);
            for (s, slot) in slots.iter().enumerate() {
                let score = (7 - s.min(6)) as u8;
                for id in slot {
                    ratings.push(RatingRecord {
                        image_id: id.clone(),
                        annotator_id: "oracle".into(),
                        overall: score,
                        alignment: score,
                        fidelity: score,
                        problem_flags: Default::default(),
                    });
                }
            }
            if !order.is_empty() {
                rankings.push(RankingRecord {
                    prompt_id: prompt.prompt_id.clone(),
                    annotator_id: "oracle".into(),
                    slots,
                });
            }
        }
        Dataset::new(prompts, generations, ratings, rankings).expect("synthetic dataset is consistent")
    }
}

/// Spreads an ordered list over at most five slots, doubling up from the
/// top when there are more images than slots.
fn pack_slots(order: &[String]) -> Vec<Vec<String>> {
    let n = order.len();
    let slots = n.min(MAX_SLOTS);
    let doubled = n.saturating_sub(slots);
    let mut out = Vec::with_capacity(slots);
    let mut it = order.iter().cloned();
    for s in 0..slots {
        let size = if s < doubled { 2 } else { 1 };
        out.push(it.by_ref().take(size).collect());
    }
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
