//! Annotation corpus: prompts, generations, ratings, slot rankings and the
//! comparison pairs derived from them.
//!
//! On disk a dataset is a directory of line-delimited JSON files
//! (`prompts.jsonl`, `generations.jsonl`, `ratings.jsonl`, `rankings.jsonl`).
//! A missing file is read as an empty collection.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PROMPTS_FILE: &str = "prompts.jsonl";
pub const GENERATIONS_FILE: &str = "generations.jsonl";
pub const RATINGS_FILE: &str = "ratings.jsonl";
pub const RANKINGS_FILE: &str = "rankings.jsonl";
pub const PAIRS_FILE: &str = "pairs.jsonl";

/// Maximum number of ordered slots in a ranking.
pub const MAX_SLOTS: usize = 5;
/// Maximum number of tied images sharing one slot.
pub const MAX_SLOT_SIZE: usize = 2;
/// Likert bounds for every rating aspect.
pub const LIKERT_MIN: u8 = 1;
pub const LIKERT_MAX: u8 = 7;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{file}:{line}: {message}")]
    Parse {
        file: PathBuf,
        line: usize,
        message: String,
    },
    #[error("dangling reference: {kind} `{id}` does not exist")]
    DanglingReference { kind: &'static str, id: String },
    #[error("duplicate {kind} id `{id}`")]
    DuplicateId { kind: &'static str, id: String },
    #[error("invalid ranking for prompt `{prompt_id}`: {reason}")]
    InvalidRanking {
        prompt_id: String,
        reason: RankingFault,
    },
    #[error("invalid rating for image `{image_id}`: {reason}")]
    InvalidRating { image_id: String, reason: String },
    #[error("invalid prompt `{id}`: {reason}")]
    InvalidPrompt { id: String, reason: String },
    #[error("unknown test prompt id `{0}`")]
    UnknownTestId(String),
    #[error("no rating for ranked image `{0}`")]
    MissingRating(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Abstract,
    Animals,
    Artifacts,
    Arts,
    Food,
    Illustrations,
    #[serde(rename = "Indoor Scenes")]
    IndoorScenes,
    #[serde(rename = "Outdoor Scenes")]
    OutdoorScenes,
    People,
    Plants,
    Vehicles,
    #[serde(rename = "World Knowledge")]
    WorldKnowledge,
}

impl Category {
    pub const ALL: [Category; 12] = [
        Category::Abstract,
        Category::Animals,
        Category::Artifacts,
        Category::Arts,
        Category::Food,
        Category::Illustrations,
        Category::IndoorScenes,
        Category::OutdoorScenes,
        Category::People,
        Category::Plants,
        Category::Vehicles,
        Category::WorldKnowledge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Abstract => "Abstract",
            Category::Animals => "Animals",
            Category::Artifacts => "Artifacts",
            Category::Arts => "Arts",
            Category::Food => "Food",
            Category::Illustrations => "Illustrations",
            Category::IndoorScenes => "Indoor Scenes",
            Category::OutdoorScenes => "Outdoor Scenes",
            Category::People => "People",
            Category::Plants => "Plants",
            Category::Vehicles => "Vehicles",
            Category::WorldKnowledge => "World Knowledge",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Harm flags attached to a prompt during prompt annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueFlag {
    Sexual,
    Violent,
    Defaming,
    Pii,
}

/// Problems an annotator can report for a single image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemFlag {
    RepeatedGeneration,
    BodyProblem,
    Fuzzy,
    Discomfort,
    Sexual,
    Violent,
    Defaming,
    None,
}

impl ProblemFlag {
    /// The seven reportable problems (everything except `None`).
    pub const PROBLEMS: [ProblemFlag; 7] = [
        ProblemFlag::RepeatedGeneration,
        ProblemFlag::BodyProblem,
        ProblemFlag::Fuzzy,
        ProblemFlag::Discomfort,
        ProblemFlag::Sexual,
        ProblemFlag::Violent,
        ProblemFlag::Defaming,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProblemFlag::RepeatedGeneration => "repeated_generation",
            ProblemFlag::BodyProblem => "body_problem",
            ProblemFlag::Fuzzy => "fuzzy",
            ProblemFlag::Discomfort => "discomfort",
            ProblemFlag::Sexual => "sexual",
            ProblemFlag::Violent => "violent",
            ProblemFlag::Defaming => "defaming",
            ProblemFlag::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub text: String,
    pub category: Category,
    #[serde(default)]
    pub unclear_intent: bool,
    #[serde(default)]
    pub issue_flags: BTreeSet<IssueFlag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub function_phrase_proportion: Option<f64>,
}

impl PromptRecord {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(CorpusError::InvalidPrompt {
                id: self.id.clone(),
                reason: "empty id".into(),
            });
        }
        if let Some(p) = self.function_phrase_proportion {
            if !(0.0..=1.0).contains(&p) {
                return Err(CorpusError::InvalidPrompt {
                    id: self.id.clone(),
                    reason: format!("function phrase proportion {p} outside [0, 1]"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub prompt_id: String,
    pub embedding_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub image_id: String,
    pub annotator_id: String,
    pub overall: u8,
    pub alignment: u8,
    pub fidelity: u8,
    #[serde(default)]
    pub problem_flags: BTreeSet<ProblemFlag>,
}

/// Why a rating payload is malformed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RatingFault {
    OutOfRange { aspect: &'static str, value: u8 },
    NoneWithOthers,
}

impl fmt::Display for RatingFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RatingFault::OutOfRange { aspect, value } => {
                write!(f, "{aspect} score {value} outside {LIKERT_MIN}..={LIKERT_MAX}")
            }
            RatingFault::NoneWithOthers => f.write_str("`none` flag combined with other problems"),
        }
    }
}

impl RatingRecord {
    pub fn faults(&self) -> Vec<RatingFault> {
        let mut faults = Vec::new();
        for (aspect, value) in [
            ("overall", self.overall),
            ("alignment", self.alignment),
            ("fidelity", self.fidelity),
        ] {
            if !(LIKERT_MIN..=LIKERT_MAX).contains(&value) {
                faults.push(RatingFault::OutOfRange { aspect, value });
            }
        }
        if self.problem_flags.contains(&ProblemFlag::None) && self.problem_flags.len() > 1 {
            faults.push(RatingFault::NoneWithOthers);
        }
        faults
    }

    pub fn validate(&self) -> Result<()> {
        match self.faults().first() {
            None => Ok(()),
            Some(fault) => Err(CorpusError::InvalidRating {
                image_id: self.image_id.clone(),
                reason: fault.to_string(),
            }),
        }
    }
}

/// A per-prompt ranking: ordered slots, best first, each holding up to two
/// tied images. Empty slots are allowed and carry no information.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingRecord {
    pub prompt_id: String,
    pub annotator_id: String,
    pub slots: Vec<Vec<String>>,
}

/// Structural problems with a ranking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RankingFault {
    TooManySlots(usize),
    SlotOverflow { slot: usize, size: usize },
    AllSlotsEmpty,
    DuplicateImage(String),
    UnknownImage(String),
    UnplacedImage(String),
}

impl fmt::Display for RankingFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankingFault::TooManySlots(n) => write!(f, "{n} slots (max {MAX_SLOTS})"),
            RankingFault::SlotOverflow { slot, size } => {
                write!(f, "slot {slot} holds {size} images (max {MAX_SLOT_SIZE})")
            }
            RankingFault::AllSlotsEmpty => f.write_str("every slot is empty"),
            RankingFault::DuplicateImage(id) => write!(f, "image `{id}` placed twice"),
            RankingFault::UnknownImage(id) => write!(f, "image `{id}` does not belong to the prompt"),
            RankingFault::UnplacedImage(id) => write!(f, "image `{id}` is not placed in any slot"),
        }
    }
}

impl RankingRecord {
    /// Images in slot order (ties keep their listed order).
    pub fn images(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().flatten().map(String::as_str)
    }

    /// Slot index of every placed image.
    pub fn slot_of(&self) -> HashMap<&str, usize> {
        self.slots
            .iter()
            .enumerate()
            .flat_map(|(s, ids)| ids.iter().map(move |id| (id.as_str(), s)))
            .collect()
    }

    /// Checks slot-shape rules only (no knowledge of the prompt's images).
    pub fn shape_faults(&self) -> Vec<RankingFault> {
        let mut faults = Vec::new();
        if self.slots.len() > MAX_SLOTS {
            faults.push(RankingFault::TooManySlots(self.slots.len()));
        }
        for (slot, ids) in self.slots.iter().enumerate() {
            if ids.len() > MAX_SLOT_SIZE {
                faults.push(RankingFault::SlotOverflow {
                    slot,
                    size: ids.len(),
                });
            }
        }
        if self.slots.iter().all(Vec::is_empty) {
            faults.push(RankingFault::AllSlotsEmpty);
        }
        let mut seen = BTreeSet::new();
        for id in self.images() {
            if !seen.insert(id) {
                faults.push(RankingFault::DuplicateImage(id.to_string()));
            }
        }
        faults
    }

    /// Full check against the prompt's image set.
    pub fn faults(&self, prompt_images: &BTreeSet<&str>) -> Vec<RankingFault> {
        let mut faults = self.shape_faults();
        let placed: BTreeSet<&str> = self.images().collect();
        for id in &placed {
            if !prompt_images.contains(id) {
                faults.push(RankingFault::UnknownImage(id.to_string()));
            }
        }
        for id in prompt_images {
            if !placed.contains(id) {
                faults.push(RankingFault::UnplacedImage(id.to_string()));
            }
        }
        faults
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ComparisonPair {
    pub prompt_id: String,
    pub better_id: String,
    pub worse_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_annotator: Option<String>,
}

/// Emits one pair for every two images in different slots, the earlier slot
/// being better. Tied images produce no pair. Output is ordered by the
/// better image's slot, then the worse image's slot, then ids.
pub fn extract_pairs(ranking: &RankingRecord) -> Vec<ComparisonPair> {
    let sorted: Vec<Vec<&str>> = ranking
        .slots
        .iter()
        .map(|slot| {
            let mut ids: Vec<&str> = slot.iter().map(String::as_str).collect();
            ids.sort_unstable();
            ids
        })
        .collect();
    let mut pairs = Vec::new();
    for (i, upper) in sorted.iter().enumerate() {
        for better in upper {
            for lower in &sorted[i + 1..] {
                for worse in lower {
                    pairs.push(ComparisonPair {
                        prompt_id: ranking.prompt_id.clone(),
                        better_id: better.to_string(),
                        worse_id: worse.to_string(),
                        source_annotator: Some(ranking.annotator_id.clone()),
                    });
                }
            }
        }
    }
    pairs
}

/// A ranked pair whose order contradicts the annotator's overall scores.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub higher_id: String,
    pub lower_id: String,
    pub higher_overall: u8,
    pub lower_overall: u8,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "`{}` ranked above `{}` but rated {} < {}",
            self.higher_id, self.lower_id, self.higher_overall, self.lower_overall
        )
    }
}

/// Reports every pair ranked strictly higher but rated strictly lower on the
/// overall scale. Tied images and equal ratings are unconstrained.
pub fn validate_annotation(
    ranking: &RankingRecord,
    ratings: &[RatingRecord],
) -> Result<Vec<Violation>> {
    let overall: HashMap<&str, u8> = ratings
        .iter()
        .map(|r| (r.image_id.as_str(), r.overall))
        .collect();
    let lookup = |id: &str| {
        overall
            .get(id)
            .copied()
            .ok_or_else(|| CorpusError::MissingRating(id.to_string()))
    };
    for id in ranking.images() {
        lookup(id)?;
    }
    let mut violations = Vec::new();
    for pair in extract_pairs(ranking) {
        let hi = lookup(&pair.better_id)?;
        let lo = lookup(&pair.worse_id)?;
        if hi < lo {
            violations.push(Violation {
                higher_id: pair.better_id,
                lower_id: pair.worse_id,
                higher_overall: hi,
                lower_overall: lo,
            });
        }
    }
    Ok(violations)
}

/// An in-memory corpus with referential integrity checked at construction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub prompts: Vec<PromptRecord>,
    pub generations: Vec<GenerationRecord>,
    pub ratings: Vec<RatingRecord>,
    pub rankings: Vec<RankingRecord>,
    pairs: Vec<ComparisonPair>,
}

impl Dataset {
    pub fn new(
        prompts: Vec<PromptRecord>,
        generations: Vec<GenerationRecord>,
        ratings: Vec<RatingRecord>,
        rankings: Vec<RankingRecord>,
    ) -> Result<Self> {
        let mut prompt_ids = BTreeSet::new();
        for p in &prompts {
            p.validate()?;
            if !prompt_ids.insert(p.id.as_str()) {
                return Err(CorpusError::DuplicateId {
                    kind: "prompt",
                    id: p.id.clone(),
                });
            }
        }
        let mut images: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        let mut image_ids = BTreeSet::new();
        for g in &generations {
            if !prompt_ids.contains(g.prompt_id.as_str()) {
                return Err(CorpusError::DanglingReference {
                    kind: "prompt",
                    id: g.prompt_id.clone(),
                });
            }
            if !image_ids.insert(g.id.as_str()) {
                return Err(CorpusError::DuplicateId {
                    kind: "generation",
                    id: g.id.clone(),
                });
            }
            images
                .entry(g.prompt_id.as_str())
                .or_default()
                .insert(g.id.as_str());
        }
        for r in &ratings {
            if !image_ids.contains(r.image_id.as_str()) {
                return Err(CorpusError::DanglingReference {
                    kind: "generation",
                    id: r.image_id.clone(),
                });
            }
            r.validate()?;
        }
        let empty = BTreeSet::new();
        for rk in &rankings {
            if !prompt_ids.contains(rk.prompt_id.as_str()) {
                return Err(CorpusError::DanglingReference {
                    kind: "prompt",
                    id: rk.prompt_id.clone(),
                });
            }
            let own = images.get(rk.prompt_id.as_str()).unwrap_or(&empty);
            if let Some(fault) = rk.faults(own).into_iter().next() {
                return Err(match fault {
                    RankingFault::UnknownImage(id) if !image_ids.contains(id.as_str()) => {
                        CorpusError::DanglingReference {
                            kind: "generation",
                            id,
                        }
                    }
                    reason => CorpusError::InvalidRanking {
                        prompt_id: rk.prompt_id.clone(),
                        reason,
                    },
                });
            }
        }
        let pairs = rankings.iter().flat_map(extract_pairs).collect();
        Ok(Self {
            prompts,
            generations,
            ratings,
            rankings,
            pairs,
        })
    }

    /// Comparison pairs derived from all rankings, in ranking order.
    pub fn pairs(&self) -> &[ComparisonPair] {
        &self.pairs
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn prompt(&self, id: &str) -> Option<&PromptRecord> {
        self.prompts.iter().find(|p| p.id == id)
    }

    /// Image ids per prompt, sorted.
    pub fn images_by_prompt(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut map: BTreeMap<&str, Vec<&str>> = self
            .prompts
            .iter()
            .map(|p| (p.id.as_str(), Vec::new()))
            .collect();
        for g in &self.generations {
            map.entry(g.prompt_id.as_str()).or_default().push(g.id.as_str());
        }
        for ids in map.values_mut() {
            ids.sort_unstable();
        }
        map
    }

    /// Map from image id to its prompt id.
    pub fn prompt_of_image(&self) -> HashMap<&str, &str> {
        self.generations
            .iter()
            .map(|g| (g.id.as_str(), g.prompt_id.as_str()))
            .collect()
    }

    /// Ratings attached to a ranking (same annotator, images of the prompt).
    pub fn ratings_for(&self, ranking: &RankingRecord) -> Vec<RatingRecord> {
        let placed: BTreeSet<&str> = ranking.images().collect();
        self.ratings
            .iter()
            .filter(|r| r.annotator_id == ranking.annotator_id && placed.contains(r.image_id.as_str()))
            .cloned()
            .collect()
    }

    /// Keeps only records belonging to prompts selected by `keep`.
    fn filter_prompts(&self, keep: impl Fn(&str) -> bool) -> Dataset {
        let image_prompt = self.prompt_of_image();
        let ratings = self
            .ratings
            .iter()
            .filter(|r| image_prompt.get(r.image_id.as_str()).is_some_and(|p| keep(p)))
            .cloned()
            .collect();
        Dataset {
            prompts: self.prompts.iter().filter(|p| keep(&p.id)).cloned().collect(),
            generations: self
                .generations
                .iter()
                .filter(|g| keep(&g.prompt_id))
                .cloned()
                .collect(),
            ratings,
            rankings: self
                .rankings
                .iter()
                .filter(|r| keep(&r.prompt_id))
                .cloned()
                .collect(),
            pairs: self
                .pairs
                .iter()
                .filter(|p| keep(&p.prompt_id))
                .cloned()
                .collect(),
        }
    }
}

/// Prompt-disjoint split. Every record follows its prompt.
pub fn split_dataset(d: &Dataset, test_prompt_ids: &BTreeSet<String>) -> Result<(Dataset, Dataset)> {
    let known: BTreeSet<&str> = d.prompts.iter().map(|p| p.id.as_str()).collect();
    if let Some(unknown) = test_prompt_ids.iter().find(|id| !known.contains(id.as_str())) {
        return Err(CorpusError::UnknownTestId(unknown.clone()));
    }
    let train = d.filter_prompts(|p| !test_prompt_ids.contains(p));
    let test = d.filter_prompts(|p| test_prompt_ids.contains(p));
    Ok((train, test))
}

/// Reads one JSON object per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            file: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

fn read_optional<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if path.exists() {
        read_jsonl(path)
    } else {
        Ok(Vec::new())
    }
}

pub fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    records: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(fs::File::create(path).map_err(io_err)?);
    for record in records {
        let line = serde_json::to_string(record).expect("corpus records serialize");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Loads a dataset directory and verifies referential integrity. Missing
/// files count as empty; a missing directory is an error.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(CorpusError::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        });
    }
    Dataset::new(
        read_optional(&dir.join(PROMPTS_FILE))?,
        read_optional(&dir.join(GENERATIONS_FILE))?,
        read_optional(&dir.join(RATINGS_FILE))?,
        read_optional(&dir.join(RANKINGS_FILE))?,
    )
}

/// Writes the four corpus files into `dir` (created if needed).
pub fn save_dataset(d: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| CorpusError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_jsonl(&dir.join(PROMPTS_FILE), &d.prompts)?;
    write_jsonl(&dir.join(GENERATIONS_FILE), &d.generations)?;
    write_jsonl(&dir.join(RATINGS_FILE), &d.ratings)?;
    write_jsonl(&dir.join(RANKINGS_FILE), &d.rankings)
}

pub fn read_pairs(path: &Path) -> Result<Vec<ComparisonPair>> {
    read_jsonl(path)
}

pub fn write_pairs(path: &Path, pairs: &[ComparisonPair]) -> Result<()> {
    write_jsonl(path, pairs)
}
