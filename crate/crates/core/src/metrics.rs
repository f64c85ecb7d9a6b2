//! Scorer evaluation: preference accuracy, per-prompt ranking with
//! recall@k / filter@k, rater agreement and ensembles, win rates, Spearman
//! correlation, score normalization and scorer interpolation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, ComparisonPair, Dataset, RankingRecord};
use crate::embed::FeatureIndex;
use crate::par;
use crate::reward::RewardHead;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("scorer `{scorer}` has no score for image `{image}` of prompt `{prompt}`")]
    MissingScore {
        scorer: String,
        prompt: String,
        image: String,
    },
    #[error("{0} must not be empty")]
    EmptyInput(&'static str),
    #[error("unknown id `{0}`")]
    UnknownId(String),
    #[error("k = {k} outside 1..={n}")]
    InvalidK { k: usize, n: usize },
    #[error("label sets share no pair")]
    NoOverlap,
    #[error("no voter remains for the pair")]
    EmptyElectorate,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least two values")]
    TooFewValues,
    #[error("all scores are equal; min-max range is degenerate")]
    DegenerateRange,
    #[error("scorer `{0}` has zero variance over the evaluation set")]
    ZeroVariance(String),
    #[error("interpolation weight {0} outside [0, 1]")]
    InvalidWeight(f64),
    #[error("top_n = {top_n} exceeds {count} candidates")]
    TopNTooLarge { top_n: usize, count: usize },
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

/// Deterministic mapping from `(prompt, image)` to a real score.
pub trait Scorer: Sync {
    fn name(&self) -> &str;
    fn score(&self, prompt_id: &str, image_id: &str) -> Result<f64>;
}

/// Scores read from a score file or computed ahead of time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    name: String,
    scores: HashMap<(String, String), f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreLine {
    pub prompt_id: String,
    pub image_id: String,
    pub scorer: String,
    pub score: f64,
}

impl ScoreTable {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            scores: HashMap::new(),
        }
    }

    pub fn insert(&mut self, prompt_id: impl Into<String>, image_id: impl Into<String>, score: f64) {
        self.scores.insert((prompt_id.into(), image_id.into()), score);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Evaluates any scorer over `keys` and freezes the result.
    pub fn capture(scorer: &dyn Scorer, keys: &[(String, String)]) -> Result<Self> {
        let values = par::map(keys, |(p, i)| scorer.score(p, i));
        let mut table = ScoreTable::new(scorer.name());
        for ((p, i), v) in keys.iter().zip(values) {
            table.insert(p.clone(), i.clone(), v?);
        }
        Ok(table)
    }

    /// Score lines sorted by prompt then image.
    pub fn lines(&self) -> Vec<ScoreLine> {
        let mut lines: Vec<ScoreLine> = self
            .scores
            .iter()
            .map(|((p, i), s)| ScoreLine {
                prompt_id: p.clone(),
                image_id: i.clone(),
                scorer: self.name.clone(),
                score: *s,
            })
            .collect();
        lines.sort_by(|a, b| (&a.prompt_id, &a.image_id).cmp(&(&b.prompt_id, &b.image_id)));
        lines
    }
}

impl Scorer for ScoreTable {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, prompt_id: &str, image_id: &str) -> Result<f64> {
        self.scores
            .get(&(prompt_id.to_string(), image_id.to_string()))
            .copied()
            .ok_or_else(|| MetricsError::MissingScore {
                scorer: self.name.clone(),
                prompt: prompt_id.to_string(),
                image: image_id.to_string(),
            })
    }
}

/// Reads a score file, grouping lines by scorer name.
pub fn load_scores(path: &Path) -> Result<BTreeMap<String, ScoreTable>> {
    let lines: Vec<ScoreLine> = corpus::read_jsonl(path)?;
    let mut tables: BTreeMap<String, ScoreTable> = BTreeMap::new();
    for line in lines {
        tables
            .entry(line.scorer.clone())
            .or_insert_with(|| ScoreTable::new(line.scorer.clone()))
            .insert(line.prompt_id, line.image_id, line.score);
    }
    Ok(tables)
}

/// The trained reward head as a scorer.
pub struct HeadScorer<'a> {
    name: String,
    head: &'a RewardHead,
    features: FeatureIndex<'a>,
}

impl<'a> HeadScorer<'a> {
    pub fn new(name: impl Into<String>, head: &'a RewardHead, features: FeatureIndex<'a>) -> Self {
        Self {
            name: name.into(),
            head,
            features,
        }
    }
}

impl Scorer for HeadScorer<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, prompt_id: &str, image_id: &str) -> Result<f64> {
        let missing = || MetricsError::MissingScore {
            scorer: self.name.clone(),
            prompt: prompt_id.to_string(),
            image: image_id.to_string(),
        };
        let feature = self.features.feature(prompt_id, image_id).map_err(|_| missing())?;
        self.head.forward(feature.as_slice()).map_err(|_| missing())
    }
}

/// Closure-backed scorer.
pub struct FnScorer<F> {
    name: String,
    f: F,
}

impl<F> FnScorer<F>
where
    F: Fn(&str, &str) -> Option<f64> + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self { name: name.into(), f }
    }
}

impl<F> Scorer for FnScorer<F>
where
    F: Fn(&str, &str) -> Option<f64> + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, prompt_id: &str, image_id: &str) -> Result<f64> {
        (self.f)(prompt_id, image_id).ok_or_else(|| MetricsError::MissingScore {
            scorer: self.name.clone(),
            prompt: prompt_id.to_string(),
            image: image_id.to_string(),
        })
    }
}

/// `-s` for any scorer `s`.
pub struct Negated<S>(pub S);

impl<S: Scorer> Scorer for Negated<S> {
    fn name(&self) -> &str {
        self.0.name()
    }

    fn score(&self, prompt_id: &str, image_id: &str) -> Result<f64> {
        self.0.score(prompt_id, image_id).map(|s| -s)
    }
}

/// Credit for one pair: 1 if the better image scores higher, ½ on an exact
/// tie, 0 otherwise.
pub fn pair_outcome(better: f64, worse: f64) -> f64 {
    if better > worse {
        1.0
    } else if better == worse {
        0.5
    } else {
        0.0
    }
}

/// Fraction of pairs the scorer orders like the label, ties counting ½.
pub fn preference_accuracy(scorer: &dyn Scorer, pairs: &[ComparisonPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyInput("pairs"));
    }
    let outcomes = par::map(pairs, |p| {
        Ok::<_, MetricsError>(pair_outcome(
            scorer.score(&p.prompt_id, &p.better_id)?,
            scorer.score(&p.prompt_id, &p.worse_id)?,
        ))
    });
    let mut total = 0.0;
    for o in outcomes {
        total += o?;
    }
    Ok(total / pairs.len() as f64)
}

/// Orders images by descending score; equal scores fall back to id order.
pub fn rank_images<S: AsRef<str>>(scorer: &dyn Scorer, prompt_id: &str, images: &[S]) -> Result<Vec<String>> {
    if images.is_empty() {
        return Err(MetricsError::EmptyInput("images"));
    }
    let mut scored = images
        .iter()
        .map(|id| Ok((scorer.score(prompt_id, id.as_ref())?, id.as_ref())))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(scored.into_iter().map(|(_, id)| id.to_string()).collect())
}

fn position(ranking: &[String], id: &str) -> Result<usize> {
    ranking
        .iter()
        .position(|x| x == id)
        .ok_or_else(|| MetricsError::UnknownId(id.to_string()))
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(MetricsError::InvalidK { k, n });
    }
    Ok(())
}

/// Whether the human-best image is among the model's top `k`.
pub fn recall_at_k(model_ranking: &[String], human_best: &str, k: usize) -> Result<bool> {
    check_k(k, model_ranking.len())?;
    Ok(position(model_ranking, human_best)? < k)
}

/// Whether the human-worst image is among the model's bottom `k`.
pub fn filter_at_k(model_ranking: &[String], human_worst: &str, k: usize) -> Result<bool> {
    check_k(k, model_ranking.len())?;
    Ok(position(model_ranking, human_worst)? >= model_ranking.len() - k)
}

/// One prompt of an evaluation set, built from a human ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPrompt {
    pub prompt_id: String,
    pub images: Vec<String>,
    /// Images in the first non-empty slot.
    pub best: Vec<String>,
    /// Images in the last non-empty slot.
    pub worst: Vec<String>,
    pub pairs: Vec<ComparisonPair>,
}

impl EvalPrompt {
    pub fn from_ranking(ranking: &RankingRecord) -> Self {
        let filled: Vec<&Vec<String>> = ranking.slots.iter().filter(|s| !s.is_empty()).collect();
        let mut images: Vec<String> = ranking.images().map(str::to_string).collect();
        images.sort();
        Self {
            prompt_id: ranking.prompt_id.clone(),
            images,
            best: filled.first().map(|s| s.to_vec()).unwrap_or_default(),
            worst: filled.last().map(|s| s.to_vec()).unwrap_or_default(),
            pairs: corpus::extract_pairs(ranking),
        }
    }
}

pub fn eval_prompts(dataset: &Dataset) -> Vec<EvalPrompt> {
    dataset.rankings.iter().map(EvalPrompt::from_ranking).collect()
}

/// Cutoffs reported for recall and filter.
pub const REPORT_KS: [usize; 3] = [1, 2, 4];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    #[serde(rename = "@1")]
    pub at1: f64,
    #[serde(rename = "@2")]
    pub at2: f64,
    #[serde(rename = "@4")]
    pub at4: f64,
}

impl AtK {
    fn from_array(v: [f64; 3]) -> Self {
        Self {
            at1: v[0],
            at2: v[1],
            at4: v[2],
        }
    }

    pub fn values(&self) -> [f64; 3] {
        [self.at1, self.at2, self.at4]
    }
}

/// Table-2-shaped report. Every rate is a mean of per-prompt values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scorer: String,
    pub prompts: usize,
    pub pairs: usize,
    pub preference_accuracy: f64,
    pub recall: AtK,
    pub filter: AtK,
}

struct PromptOutcome {
    accuracy: Option<f64>,
    pairs: usize,
    recall: [f64; 3],
    filter: [f64; 3],
}

fn evaluate_prompt(scorer: &dyn Scorer, prompt: &EvalPrompt) -> Result<PromptOutcome> {
    let ranking = rank_images(scorer, &prompt.prompt_id, &prompt.images)?;
    let n = ranking.len();
    let mut recall = [0.0; 3];
    let mut filter = [0.0; 3];
    for (slot, &k) in REPORT_KS.iter().enumerate() {
        let k = k.min(n);
        // A tied best (or worst) slot counts as hit if any member is.
        let mut hit = false;
        for id in &prompt.best {
            hit |= recall_at_k(&ranking, id, k)?;
        }
        recall[slot] = f64::from(u8::from(hit));
        let mut hit = false;
        for id in &prompt.worst {
            hit |= filter_at_k(&ranking, id, k)?;
        }
        filter[slot] = f64::from(u8::from(hit));
    }
    let accuracy = if prompt.pairs.is_empty() {
        None
    } else {
        let mut total = 0.0;
        for p in &prompt.pairs {
            total += pair_outcome(
                scorer.score(&p.prompt_id, &p.better_id)?,
                scorer.score(&p.prompt_id, &p.worse_id)?,
            );
        }
        Some(total / prompt.pairs.len() as f64)
    };
    Ok(PromptOutcome {
        accuracy,
        pairs: prompt.pairs.len(),
        recall,
        filter,
    })
}

/// Evaluates a scorer over prompts. Work is spread over prompts; the
/// reduction runs in input order so results do not depend on worker count.
pub fn evaluate(scorer: &dyn Scorer, prompts: &[EvalPrompt]) -> Result<MetricReport> {
    if prompts.is_empty() {
        return Err(MetricsError::EmptyInput("evaluation prompts"));
    }
    let outcomes = par::map(prompts, |p| evaluate_prompt(scorer, p))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let n = outcomes.len() as f64;
    let mut recall = [0.0; 3];
    let mut filter = [0.0; 3];
    let (mut acc_sum, mut acc_count, mut pairs) = (0.0, 0usize, 0usize);
    for o in &outcomes {
        for i in 0..3 {
            recall[i] += o.recall[i] / n;
            filter[i] += o.filter[i] / n;
        }
        if let Some(a) = o.accuracy {
            acc_sum += a;
            acc_count += 1;
        }
        pairs += o.pairs;
    }
    Ok(MetricReport {
        scorer: scorer.name().to_string(),
        prompts: outcomes.len(),
        pairs,
        preference_accuracy: if acc_count == 0 {
            0.5
        } else {
            acc_sum / acc_count as f64
        },
        recall: AtK::from_array(recall),
        filter: AtK::from_array(filter),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    FirstBetter,
    SecondBetter,
    Tie,
}

impl Verdict {
    pub fn flipped(self) -> Self {
        match self {
            Verdict::FirstBetter => Verdict::SecondBetter,
            Verdict::SecondBetter => Verdict::FirstBetter,
            Verdict::Tie => Verdict::Tie,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceLabel {
    pub prompt_id: String,
    pub first_id: String,
    pub second_id: String,
    pub verdict: Verdict,
}

/// Order-independent identity of an image pair: ids sorted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PairKey {
    pub prompt_id: String,
    pub low_id: String,
    pub high_id: String,
}

impl PreferenceLabel {
    /// The pair key plus the verdict expressed for `(low_id, high_id)`.
    pub fn canonical(&self) -> (PairKey, Verdict) {
        if self.first_id <= self.second_id {
            (
                PairKey {
                    prompt_id: self.prompt_id.clone(),
                    low_id: self.first_id.clone(),
                    high_id: self.second_id.clone(),
                },
                self.verdict,
            )
        } else {
            (
                PairKey {
                    prompt_id: self.prompt_id.clone(),
                    low_id: self.second_id.clone(),
                    high_id: self.first_id.clone(),
                },
                self.verdict.flipped(),
            )
        }
    }

    pub fn from_pair(pair: &ComparisonPair) -> Self {
        Self {
            prompt_id: pair.prompt_id.clone(),
            first_id: pair.better_id.clone(),
            second_id: pair.worse_id.clone(),
            verdict: Verdict::FirstBetter,
        }
    }
}

/// One labeler's verdicts keyed by canonical pair. A repeated pair keeps
/// the last verdict.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelSet {
    verdicts: BTreeMap<PairKey, Verdict>,
}

impl LabelSet {
    pub fn len(&self) -> usize {
        self.verdicts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.verdicts.is_empty()
    }

    pub fn insert(&mut self, label: &PreferenceLabel) {
        let (key, verdict) = label.canonical();
        self.verdicts.insert(key, verdict);
    }

    pub fn get(&self, key: &PairKey) -> Option<Verdict> {
        self.verdicts.get(key).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&PairKey, Verdict)> {
        self.verdicts.iter().map(|(k, v)| (k, *v))
    }
}

impl<'a> FromIterator<&'a PreferenceLabel> for LabelSet {
    fn from_iter<I: IntoIterator<Item = &'a PreferenceLabel>>(iter: I) -> Self {
        let mut set = LabelSet::default();
        for label in iter {
            set.insert(label);
        }
        set
    }
}

/// A label tagged with who produced it; the line format of label files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorLabel {
    pub annotator: String,
    #[serde(flatten)]
    pub label: PreferenceLabel,
}

/// Groups labels by annotator.
pub fn labels_by_annotator(labels: &[AnnotatorLabel]) -> BTreeMap<String, LabelSet> {
    let mut out: BTreeMap<String, LabelSet> = BTreeMap::new();
    for l in labels {
        out.entry(l.annotator.clone()).or_default().insert(&l.label);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub rate: f64,
    pub shared_pairs: usize,
}

/// Fraction of shared pairs with identical verdicts (ties must match ties).
pub fn agreement(a: &LabelSet, b: &LabelSet) -> Result<Agreement> {
    let mut shared = 0usize;
    let mut same = 0usize;
    for (key, va) in a.iter() {
        if let Some(vb) = b.get(key) {
            shared += 1;
            same += usize::from(va == vb);
        }
    }
    if shared == 0 {
        return Err(MetricsError::NoOverlap);
    }
    Ok(Agreement {
        rate: same as f64 / shared as f64,
        shared_pairs: shared,
    })
}

/// Majority verdict among labelers that labeled `key`, optionally leaving
/// one out. Tie votes abstain; an equal split between the two preferences
/// is a tie.
pub fn ensemble_vote(
    labelers: &BTreeMap<String, LabelSet>,
    key: &PairKey,
    exclude: Option<&str>,
) -> Result<Verdict> {
    let mut first = 0usize;
    let mut second = 0usize;
    let mut voters = 0usize;
    for (name, set) in labelers {
        if Some(name.as_str()) == exclude {
            continue;
        }
        match set.get(key) {
            Some(Verdict::FirstBetter) => first += 1,
            Some(Verdict::SecondBetter) => second += 1,
            Some(Verdict::Tie) => {}
            None => continue,
        }
        voters += 1;
    }
    if voters == 0 {
        return Err(MetricsError::EmptyElectorate);
    }
    Ok(match first.cmp(&second) {
        std::cmp::Ordering::Greater => Verdict::FirstBetter,
        std::cmp::Ordering::Less => Verdict::SecondBetter,
        std::cmp::Ordering::Equal => Verdict::Tie,
    })
}

/// Agreement of `target` with the ensemble of everyone else, over pairs at
/// least one other labeler saw.
pub fn ensemble_agreement(labelers: &BTreeMap<String, LabelSet>, target: &str) -> Result<Agreement> {
    let own = labelers
        .get(target)
        .ok_or_else(|| MetricsError::UnknownId(target.to_string()))?;
    let mut ensemble = LabelSet::default();
    for (key, _) in own.iter() {
        if let Ok(v) = ensemble_vote(labelers, key, Some(target)) {
            ensemble.verdicts.insert(key.clone(), v);
        }
    }
    agreement(own, &ensemble)
}

/// Reference ranks from a human ranking: 1-based positions in slot order,
/// tied images sharing the average of their positions.
pub fn reference_ranks(ranking: &RankingRecord) -> HashMap<String, f64> {
    let mut ranks = HashMap::new();
    let mut next = 1usize;
    for slot in &ranking.slots {
        if slot.is_empty() {
            continue;
        }
        let avg = next as f64 + (slot.len() as f64 - 1.0) / 2.0;
        for id in slot {
            ranks.insert(id.clone(), avg);
        }
        next += slot.len();
    }
    ranks
}

/// Candidates of one prompt and their reference ranks (lower is better).
#[derive(Debug, Clone, PartialEq)]
pub struct WinRatePrompt {
    pub prompt_id: String,
    pub candidates: Vec<String>,
    pub reference: HashMap<String, f64>,
}

impl WinRatePrompt {
    pub fn from_ranking(ranking: &RankingRecord) -> Self {
        let mut candidates: Vec<String> = ranking.images().map(str::to_string).collect();
        candidates.sort();
        Self {
            prompt_id: ranking.prompt_id.clone(),
            candidates,
            reference: reference_ranks(ranking),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinRate {
    pub rate: f64,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
}

/// Per prompt, compares the mean reference rank of each scorer's top-n
/// selection (lower wins, equal counts ½) and averages over prompts.
pub fn win_rate(
    scorer_a: &dyn Scorer,
    scorer_b: &dyn Scorer,
    prompts: &[WinRatePrompt],
    top_n: usize,
) -> Result<WinRate> {
    if prompts.is_empty() {
        return Err(MetricsError::EmptyInput("win-rate prompts"));
    }
    let mean_rank = |scorer: &dyn Scorer, p: &WinRatePrompt| -> Result<f64> {
        if top_n == 0 || top_n > p.candidates.len() {
            return Err(MetricsError::TopNTooLarge {
                top_n,
                count: p.candidates.len(),
            });
        }
        let ranking = rank_images(scorer, &p.prompt_id, &p.candidates)?;
        let mut total = 0.0;
        for id in &ranking[..top_n] {
            total += p
                .reference
                .get(id)
                .ok_or_else(|| MetricsError::UnknownId(id.clone()))?;
        }
        Ok(total / top_n as f64)
    };
    let outcomes = par::map(prompts, |p| {
        let a = mean_rank(scorer_a, p)?;
        let b = mean_rank(scorer_b, p)?;
        Ok::<_, MetricsError>(a.partial_cmp(&b).expect("finite ranks"))
    });
    let (mut wins, mut losses, mut ties) = (0, 0, 0);
    for o in outcomes {
        match o? {
            std::cmp::Ordering::Less => wins += 1,
            std::cmp::Ordering::Greater => losses += 1,
            std::cmp::Ordering::Equal => ties += 1,
        }
    }
    Ok(WinRate {
        rate: (wins as f64 + 0.5 * ties as f64) / prompts.len() as f64,
        wins,
        losses,
        ties,
    })
}

/// Average (fractional) ranks, 1-based. `descending` ranks the largest
/// value first.
pub fn average_ranks(values: &[f64], descending: bool) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        let o = values[a].total_cmp(&values[b]);
        if descending {
            o.reverse()
        } else {
            o
        }
    });
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation between two rank vectors aligned by item. Distinct
/// ranks use `1 − 6Σd²/(n(n²−1))`; tied ranks fall back to Pearson
/// correlation of average ranks.
pub fn spearman(rank_a: &[f64], rank_b: &[f64]) -> Result<f64> {
    if rank_a.len() != rank_b.len() {
        return Err(MetricsError::LengthMismatch(rank_a.len(), rank_b.len()));
    }
    let n = rank_a.len();
    if n < 2 {
        return Err(MetricsError::TooFewValues);
    }
    let ra = average_ranks(rank_a, false);
    let rb = average_ranks(rank_b, false);
    let distinct = |r: &[f64]| r.iter().all(|x| x.fract() == 0.0);
    if distinct(&ra) && distinct(&rb) {
        let d2: f64 = ra.iter().zip(&rb).map(|(a, b)| (a - b).powi(2)).sum();
        let n = n as f64;
        return Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)));
    }
    let mean = (n as f64 + 1.0) / 2.0;
    let cov: f64 = ra.iter().zip(&rb).map(|(a, b)| (a - mean) * (b - mean)).sum();
    let va: f64 = ra.iter().map(|a| (a - mean).powi(2)).sum();
    let vb: f64 = rb.iter().map(|b| (b - mean).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(MetricsError::DegenerateRange);
    }
    Ok(cov / (va * vb).sqrt())
}

/// Min-max normalization onto `[0, 1]`.
pub fn normalize_scores(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.len() < 2 {
        return Err(MetricsError::TooFewValues);
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        return Err(MetricsError::DegenerateRange);
    }
    Ok(scores.iter().map(|s| (s - min) / (max - min)).collect())
}

/// Box-plot statistics: linear-interpolation quartiles and whiskers at the
/// most extreme points within 1.5 IQR of the box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub count: usize,
    pub lower_whisker: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub upper_whisker: f64,
    pub outliers: usize,
}

/// Quantile `q` of sorted data by linear interpolation between order
/// statistics at position `q·(n−1)`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn distribution_summary(scores: &[f64]) -> Result<DistributionSummary> {
    if scores.is_empty() {
        return Err(MetricsError::EmptyInput("scores"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile(&sorted, 0.25);
    let median = quantile(&sorted, 0.5);
    let q3 = quantile(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let inside: Vec<f64> = sorted
        .iter()
        .copied()
        .filter(|v| *v >= lo_fence && *v <= hi_fence)
        .collect();
    Ok(DistributionSummary {
        count: sorted.len(),
        lower_whisker: inside.first().copied().unwrap_or(q1),
        q1,
        median,
        q3,
        upper_whisker: inside.last().copied().unwrap_or(q3),
        outliers: sorted.len() - inside.len(),
    })
}

fn standardized(scorer: &dyn Scorer, keys: &[(String, String)]) -> Result<Vec<f64>> {
    let values = keys
        .iter()
        .map(|(p, i)| scorer.score(p, i))
        .collect::<Result<Vec<f64>>>()?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 || !var.is_finite() {
        return Err(MetricsError::ZeroVariance(scorer.name().to_string()));
    }
    let sd = var.sqrt();
    Ok(values.into_iter().map(|v| (v - mean) / sd).collect())
}

/// `λ·z(a) + (1−λ)·z(b)`, each scorer standardized to zero mean and unit
/// variance over `keys`.
pub fn interpolate(
    scorer_a: &dyn Scorer,
    scorer_b: &dyn Scorer,
    lambda: f64,
    keys: &[(String, String)],
) -> Result<ScoreTable> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(MetricsError::InvalidWeight(lambda));
    }
    if keys.is_empty() {
        return Err(MetricsError::EmptyInput("evaluation keys"));
    }
    let za = standardized(scorer_a, keys)?;
    let zb = standardized(scorer_b, keys)?;
    let mut table = ScoreTable::new(format!(
        "{}*{lambda}+{}*{}",
        scorer_a.name(),
        scorer_b.name(),
        1.0 - lambda
    ));
    for (((p, i), a), b) in keys.iter().zip(za).zip(zb) {
        table.insert(p.clone(), i.clone(), lambda * a + (1.0 - lambda) * b);
    }
    Ok(table)
}

/// Every `(prompt, image)` key of an evaluation set, deduplicated.
pub fn evaluation_keys(prompts: &[EvalPrompt]) -> Vec<(String, String)> {
    let set: BTreeSet<(String, String)> = prompts
        .iter()
        .flat_map(|p| p.images.iter().map(|i| (p.prompt_id.clone(), i.clone())))
        .collect();
    set.into_iter().collect()
}
