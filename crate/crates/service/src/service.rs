//! Task dispatch, submission validation and the committed annotation state.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use parking_lot::{Mutex, RwLock};
use prefkit_core::corpus::{
    self, Category, Dataset, GenerationRecord, IssueFlag, PromptRecord, RankingFault, RankingRecord,
    RatingFault, RatingRecord,
};
use prefkit_core::metrics::{agreement, LabelSet, PreferenceLabel};
use serde::{Deserialize, Serialize};

use crate::log::EventLog;
use crate::reason::{Reason, Rejection};
use crate::ServiceError;

pub const LOG_FILE: &str = "annotations.log";
pub const ANNOTATORS_FILE: &str = "annotators.jsonl";
pub const GOLD_FILE: &str = "gold.jsonl";

pub const DEFAULT_QUALIFICATION_THRESHOLD: f64 = 0.6;
pub const DEFAULT_SKIP_CAP: usize = 10;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Holds the seed files and the annotation log.
    pub dir: PathBuf,
    /// Minimum gold agreement for admission, inclusive.
    pub qualification_threshold: f64,
    /// Skips allowed per annotator.
    pub skip_cap: usize,
    /// Task payloads carry `prefix + image_id` as the image URL when set.
    pub image_url_prefix: Option<String>,
}

impl ServiceConfig {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            qualification_threshold: DEFAULT_QUALIFICATION_THRESHOLD,
            skip_cap: DEFAULT_SKIP_CAP,
            image_url_prefix: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PromptAnnotation,
    Rating,
    Ranking,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::PromptAnnotation => "prompt_annotation",
            Stage::Rating => "rating",
            Stage::Ranking => "ranking",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Valid,
    Invalid,
}

fn yes() -> bool {
    true
}

/// A line of `annotators.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorSeed {
    pub id: String,
    #[serde(default = "yes")]
    pub active: bool,
    #[serde(default)]
    pub qualification: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorProfile {
    pub id: String,
    pub active: bool,
    pub qualification: Option<f64>,
    pub skips: usize,
    pub submissions: usize,
}

/// What the first stage records about a prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptAnnotation {
    pub category: Category,
    #[serde(default)]
    pub unclear_intent: bool,
    #[serde(default)]
    pub issue_flags: BTreeSet<IssueFlag>,
}

/// One pass of a single annotator over one prompt.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Attempt {
    number: u32,
    assignee: Option<String>,
    annotation: Option<PromptAnnotation>,
    ratings: BTreeMap<String, RatingRecord>,
    ranking: Option<RankingRecord>,
    review: Option<Verdict>,
}

impl Attempt {
    fn fresh(number: u32, assignee: Option<String>) -> Self {
        Self {
            number,
            assignee,
            ..Self::default()
        }
    }

    fn stage(&self, images: &[String]) -> Option<Stage> {
        if self.annotation.is_none() {
            Some(Stage::PromptAnnotation)
        } else if images.is_empty() {
            None
        } else if self.ratings.len() < images.len() {
            Some(Stage::Rating)
        } else if self.ranking.is_none() {
            Some(Stage::Ranking)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct PromptState {
    /// Times the prompt has been handed to an annotator.
    served: u32,
    current: Attempt,
    skipped_by: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct InvalidatedAttempt {
    prompt_id: String,
    attempt: Attempt,
}

/// Everything the log determines.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    prompts: BTreeMap<String, PromptState>,
    annotators: BTreeMap<String, AnnotatorProfile>,
    invalidated: Vec<InvalidatedAttempt>,
}

/// Log records. Each accepted request appends exactly one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Snapshot {
        ledger: Ledger,
    },
    Assign {
        prompt_id: String,
        attempt: u32,
        annotator_id: String,
    },
    PromptAnnotation {
        prompt_id: String,
        attempt: u32,
        annotator_id: String,
        annotation: PromptAnnotation,
    },
    Rating {
        prompt_id: String,
        attempt: u32,
        rating: RatingRecord,
    },
    Ranking {
        prompt_id: String,
        attempt: u32,
        ranking: RankingRecord,
    },
    Skip {
        prompt_id: String,
        annotator_id: String,
    },
    Review {
        prompt_id: String,
        attempt: u32,
        verdict: Verdict,
        reassign_to: Option<String>,
    },
    Qualification {
        annotator_id: String,
        score: f64,
        active: bool,
    },
}

impl Ledger {
    fn seed(&mut self, seeds: &Seeds) {
        for p in &seeds.prompts {
            self.prompts.entry(p.id.clone()).or_insert_with(|| PromptState {
                current: Attempt::fresh(1, None),
                ..PromptState::default()
            });
        }
        for a in &seeds.annotators {
            self.annotators.entry(a.id.clone()).or_insert_with(|| AnnotatorProfile {
                id: a.id.clone(),
                active: a.active,
                qualification: a.qualification,
                skips: 0,
                submissions: 0,
            });
        }
    }

    fn credit(&mut self, annotator: &str) {
        if let Some(p) = self.annotators.get_mut(annotator) {
            p.submissions += 1;
        }
    }

    fn apply(&mut self, event: &Event) {
        match event {
            Event::Snapshot { ledger } => *self = ledger.clone(),
            Event::Assign {
                prompt_id,
                annotator_id,
                ..
            } => {
                if let Some(st) = self.prompts.get_mut(prompt_id) {
                    st.served += 1;
                    st.current.assignee = Some(annotator_id.clone());
                }
            }
            Event::PromptAnnotation {
                prompt_id,
                annotator_id,
                annotation,
                ..
            } => {
                if let Some(st) = self.prompts.get_mut(prompt_id) {
                    st.current.annotation = Some(annotation.clone());
                }
                self.credit(annotator_id);
            }
            Event::Rating { prompt_id, rating, .. } => {
                if let Some(st) = self.prompts.get_mut(prompt_id) {
                    st.current.ratings.insert(rating.image_id.clone(), rating.clone());
                }
                self.credit(&rating.annotator_id);
            }
            Event::Ranking { prompt_id, ranking, .. } => {
                if let Some(st) = self.prompts.get_mut(prompt_id) {
                    st.current.ranking = Some(ranking.clone());
                }
                self.credit(&ranking.annotator_id);
            }
            Event::Skip {
                prompt_id,
                annotator_id,
            } => {
                if let Some(st) = self.prompts.get_mut(prompt_id) {
                    st.skipped_by.insert(annotator_id.clone());
                    st.current.assignee = None;
                }
                if let Some(p) = self.annotators.get_mut(annotator_id) {
                    p.skips += 1;
                }
            }
            Event::Review {
                prompt_id,
                verdict,
                reassign_to,
                ..
            } => {
                let Some(st) = self.prompts.get_mut(prompt_id) else {
                    return;
                };
                match verdict {
                    Verdict::Valid => st.current.review = Some(Verdict::Valid),
                    Verdict::Invalid => {
                        let next = Attempt::fresh(st.current.number + 1, reassign_to.clone());
                        let mut old = std::mem::replace(&mut st.current, next);
                        old.review = Some(Verdict::Invalid);
                        if reassign_to.is_some() {
                            st.served += 1;
                        }
                        self.invalidated.push(InvalidatedAttempt {
                            prompt_id: prompt_id.clone(),
                            attempt: old,
                        });
                    }
                }
            }
            Event::Qualification {
                annotator_id,
                score,
                active,
            } => {
                let p = self
                    .annotators
                    .entry(annotator_id.clone())
                    .or_insert_with(|| AnnotatorProfile {
                        id: annotator_id.clone(),
                        active: false,
                        qualification: None,
                        skips: 0,
                        submissions: 0,
                    });
                p.qualification = Some(*score);
                p.active = *active;
            }
        }
    }
}

/// Read-only inputs loaded from the service directory.
struct Seeds {
    prompts: Vec<PromptRecord>,
    generations: Vec<GenerationRecord>,
    /// Image ids per prompt, sorted.
    images: BTreeMap<String, Vec<String>>,
    annotators: Vec<AnnotatorSeed>,
    gold: LabelSet,
}

fn read_if_present<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, ServiceError> {
    if path.exists() {
        Ok(corpus::read_jsonl(path)?)
    } else {
        Ok(Vec::new())
    }
}

impl Seeds {
    fn load(dir: &Path) -> Result<Self, ServiceError> {
        let base = Dataset::new(
            read_if_present(&dir.join(corpus::PROMPTS_FILE))?,
            read_if_present(&dir.join(corpus::GENERATIONS_FILE))?,
            Vec::new(),
            Vec::new(),
        )?;
        let images = base
            .images_by_prompt()
            .into_iter()
            .map(|(p, ids)| {
                let mut ids: Vec<String> = ids.into_iter().map(str::to_string).collect();
                ids.sort();
                (p.to_string(), ids)
            })
            .collect();
        let gold: Vec<PreferenceLabel> = read_if_present(&dir.join(GOLD_FILE))?;
        Ok(Self {
            images,
            annotators: read_if_present(&dir.join(ANNOTATORS_FILE))?,
            gold: gold.iter().collect(),
            prompts: base.prompts,
            generations: base.generations,
        })
    }

    fn images(&self, prompt_id: &str) -> &[String] {
        self.images.get(prompt_id).map_or(&[], Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskImage {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub prompt_id: String,
    pub prompt_text: String,
    pub attempt: u32,
    pub stage: Stage,
    pub assignee: String,
    /// All images of the prompt, or for the rating stage the ones still
    /// unrated.
    pub images: Vec<TaskImage>,
    /// The assignee's overall scores so far, keyed by image.
    pub ratings: BTreeMap<String, u8>,
}

pub fn task_id(prompt_id: &str, attempt: u32, stage: Stage) -> String {
    format!("{prompt_id}:{attempt}:{}", stage.name())
}

/// Identifier of a submitted ranking, as used by the review endpoint.
pub fn submission_id(prompt_id: &str, attempt: u32) -> String {
    format!("{prompt_id}:{attempt}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub status: String,
    pub submission_id: String,
}

impl Ack {
    fn new(submission_id: String) -> Self {
        Self {
            status: "accepted".into(),
            submission_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSubmission {
    pub task_id: String,
    pub annotator_id: String,
    #[serde(flatten)]
    pub annotation: PromptAnnotation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingSubmission {
    pub task_id: String,
    #[serde(flatten)]
    pub rating: RatingRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingSubmission {
    pub task_id: String,
    #[serde(flatten)]
    pub ranking: RankingRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRequest {
    pub task_id: String,
    pub annotator_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewRequest {
    pub verdict: Verdict,
    #[serde(default)]
    pub reassign_to: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualificationRequest {
    pub annotator_id: String,
    pub labels: Vec<PreferenceLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualificationResult {
    pub annotator_id: String,
    pub score: f64,
    pub shared_pairs: usize,
    pub admitted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub prompts: usize,
    pub unassigned: usize,
    pub prompt_annotation: usize,
    pub rating: usize,
    pub ranking: usize,
    pub awaiting_review: usize,
    pub accepted: usize,
    pub invalidated_attempts: usize,
    pub annotators: Vec<AnnotatorProfile>,
}

/// Corpus records as exported; the four collections of a dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExportBundle {
    pub prompts: Vec<PromptRecord>,
    pub generations: Vec<GenerationRecord>,
    pub ratings: Vec<RatingRecord>,
    pub rankings: Vec<RankingRecord>,
}

impl ExportBundle {
    pub fn into_dataset(self) -> corpus::Result<Dataset> {
        Dataset::new(self.prompts, self.generations, self.ratings, self.rankings)
    }
}

pub struct Service {
    config: ServiceConfig,
    seeds: Seeds,
    ledger: RwLock<Ledger>,
    log: Mutex<EventLog<Event>>,
}

fn rating_reason(f: RatingFault) -> Reason {
    match f {
        RatingFault::OutOfRange { aspect, value } => Reason::OutOfRange {
            aspect: aspect.to_string(),
            value,
        },
        RatingFault::NoneWithOthers => Reason::InvalidFlags,
    }
}

fn ranking_reason(f: RankingFault) -> Reason {
    match f {
        RankingFault::TooManySlots(slots) => Reason::TooManySlots { slots },
        RankingFault::SlotOverflow { slot, size } => Reason::SlotOverflow { slot, size },
        RankingFault::AllSlotsEmpty => Reason::EmptyRanking,
        RankingFault::DuplicateImage(image_id) => Reason::DuplicateImage { image_id },
        RankingFault::UnknownImage(image_id) => Reason::UnknownImage { image_id },
        RankingFault::UnplacedImage(image_id) => Reason::UnplacedImage { image_id },
    }
}

impl Service {
    /// Loads seeds from `config.dir` and replays the annotation log.
    pub fn open(config: ServiceConfig) -> Result<Self, ServiceError> {
        if !(0.0..=1.0).contains(&config.qualification_threshold) {
            return Err(ServiceError::Config(format!(
                "qualification threshold {} outside [0, 1]",
                config.qualification_threshold
            )));
        }
        let seeds = Seeds::load(&config.dir)?;
        let (log, events) = EventLog::open(&config.dir.join(LOG_FILE))?;
        let mut ledger = Ledger::default();
        ledger.seed(&seeds);
        for e in &events {
            ledger.apply(e);
        }
        // Seeds added after a snapshot still need entries.
        ledger.seed(&seeds);
        Ok(Self {
            config,
            seeds,
            ledger: RwLock::new(ledger),
            log: Mutex::new(log),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    /// Appends `event` durably, then applies it.
    fn commit(&self, ledger: &mut Ledger, event: Event) -> Result<(), Rejection> {
        self.log.lock().append(&event).map_err(|e| Reason::Storage {
            message: e.to_string(),
        })?;
        ledger.apply(&event);
        Ok(())
    }

    fn check_active(ledger: &Ledger, annotator: &str) -> Result<(), Rejection> {
        match ledger.annotators.get(annotator) {
            None => Err(Reason::UnknownAnnotator {
                annotator_id: annotator.to_string(),
            }
            .into()),
            Some(p) if !p.active => Err(Reason::InactiveAnnotator {
                annotator_id: annotator.to_string(),
            }
            .into()),
            Some(_) => Ok(()),
        }
    }

    /// Current stage of every prompt held by `annotator`, in id order.
    fn held<'a>(&'a self, ledger: &'a Ledger, annotator: &'a str) -> impl Iterator<Item = (&'a str, u32, Stage)> + 'a {
        ledger.prompts.iter().filter_map(move |(pid, st)| {
            if st.current.assignee.as_deref() != Some(annotator) {
                return None;
            }
            let stage = st.current.stage(self.seeds.images(pid))?;
            Some((pid.as_str(), st.current.number, stage))
        })
    }

    /// Resolves a task id the annotator currently holds to its prompt.
    fn issued(&self, ledger: &Ledger, annotator: &str, task: &str, stage: Stage) -> Result<String, Rejection> {
        Self::check_active(ledger, annotator)?;
        self.held(ledger, annotator)
            .find(|(pid, attempt, s)| *s == stage && task_id(pid, *attempt, *s) == task)
            .map(|(pid, _, _)| pid.to_string())
            .ok_or_else(|| {
                Reason::TaskNotIssued {
                    task_id: task.to_string(),
                }
                .into()
            })
    }

    fn task_view(&self, ledger: &Ledger, prompt_id: &str, stage: Stage) -> Task {
        let st = &ledger.prompts[prompt_id];
        let all = self.seeds.images(prompt_id);
        let ids: Vec<&String> = match stage {
            Stage::Rating => all.iter().filter(|i| !st.current.ratings.contains_key(*i)).collect(),
            _ => all.iter().collect(),
        };
        let text = self
            .seeds
            .prompts
            .iter()
            .find(|p| p.id == prompt_id)
            .map(|p| p.text.clone())
            .unwrap_or_default();
        Task {
            task_id: task_id(prompt_id, st.current.number, stage),
            prompt_id: prompt_id.to_string(),
            prompt_text: text,
            attempt: st.current.number,
            stage,
            assignee: st.current.assignee.clone().unwrap_or_default(),
            images: ids
                .into_iter()
                .map(|id| TaskImage {
                    id: id.clone(),
                    url: self.config.image_url_prefix.as_ref().map(|p| format!("{p}{id}")),
                })
                .collect(),
            ratings: st
                .current
                .ratings
                .iter()
                .map(|(id, r)| (id.clone(), r.overall))
                .collect(),
        }
    }

    /// The annotator's current task, assigning the least-served open prompt
    /// when they hold none. Repeated calls return the same task until it is
    /// submitted.
    pub fn next_task(&self, annotator: &str) -> Result<Option<Task>, Rejection> {
        {
            let ledger = self.ledger.read();
            Self::check_active(&ledger, annotator)?;
            let held = self.held(&ledger, annotator).next().map(|(p, _, s)| (p.to_string(), s));
            if let Some((pid, stage)) = held {
                return Ok(Some(self.task_view(&ledger, &pid, stage)));
            }
        }
        let mut ledger = self.ledger.write();
        // Re-check under the write lock; another request may have raced.
        Self::check_active(&ledger, annotator)?;
        let held = self.held(&ledger, annotator).next().map(|(p, _, s)| (p.to_string(), s));
        if let Some((pid, stage)) = held {
            return Ok(Some(self.task_view(&ledger, &pid, stage)));
        }
        let pick = ledger
            .prompts
            .iter()
            .filter(|(pid, st)| {
                st.current.assignee.is_none()
                    && !st.skipped_by.contains(annotator)
                    && st.current.stage(self.seeds.images(pid)).is_some()
            })
            .min_by(|a, b| a.1.served.cmp(&b.1.served).then(a.0.cmp(b.0)))
            .map(|(pid, st)| (pid.clone(), st.current.number));
        let Some((prompt_id, attempt)) = pick else {
            return Ok(None);
        };
        self.commit(
            &mut ledger,
            Event::Assign {
                prompt_id: prompt_id.clone(),
                attempt,
                annotator_id: annotator.to_string(),
            },
        )?;
        let stage = ledger.prompts[&prompt_id]
            .current
            .stage(self.seeds.images(&prompt_id))
            .expect("picked prompts are open");
        Ok(Some(self.task_view(&ledger, &prompt_id, stage)))
    }

    pub fn submit_prompt(&self, req: PromptSubmission) -> Result<Ack, Rejection> {
        let mut ledger = self.ledger.write();
        let pid = self.issued(&ledger, &req.annotator_id, &req.task_id, Stage::PromptAnnotation)?;
        let attempt = ledger.prompts[&pid].current.number;
        self.commit(
            &mut ledger,
            Event::PromptAnnotation {
                prompt_id: pid.clone(),
                attempt,
                annotator_id: req.annotator_id,
                annotation: req.annotation,
            },
        )?;
        Ok(Ack::new(submission_id(&pid, attempt)))
    }

    pub fn submit_rating(&self, req: RatingSubmission) -> Result<Ack, Rejection> {
        let mut ledger = self.ledger.write();
        let rating = req.rating;
        let pid = self.issued(&ledger, &rating.annotator_id, &req.task_id, Stage::Rating)?;
        let current = &ledger.prompts[&pid].current;
        let mut reasons = Vec::new();
        if !self.seeds.images(&pid).contains(&rating.image_id) {
            reasons.push(Reason::UnknownImage {
                image_id: rating.image_id.clone(),
            });
        } else if current.ratings.contains_key(&rating.image_id) {
            reasons.push(Reason::AlreadyRated {
                image_id: rating.image_id.clone(),
            });
        }
        reasons.extend(rating.faults().into_iter().map(rating_reason));
        if !reasons.is_empty() {
            return Err(reasons.into());
        }
        let attempt = current.number;
        let id = format!("{}:{}", submission_id(&pid, attempt), rating.image_id);
        self.commit(
            &mut ledger,
            Event::Rating {
                prompt_id: pid,
                attempt,
                rating,
            },
        )?;
        Ok(Ack::new(id))
    }

    pub fn submit_ranking(&self, req: RankingSubmission) -> Result<Ack, Rejection> {
        let mut ledger = self.ledger.write();
        let ranking = req.ranking;
        let pid = self.issued(&ledger, &ranking.annotator_id, &req.task_id, Stage::Ranking)?;
        if ranking.prompt_id != pid {
            return Err(Reason::TaskNotIssued { task_id: req.task_id }.into());
        }
        let current = &ledger.prompts[&pid].current;
        let images: BTreeSet<&str> = self.seeds.images(&pid).iter().map(String::as_str).collect();
        let faults = ranking.faults(&images);
        if !faults.is_empty() {
            return Err(Rejection::from(
                faults.into_iter().map(ranking_reason).collect::<Vec<_>>(),
            ));
        }
        let ratings: Vec<RatingRecord> = current.ratings.values().cloned().collect();
        let violations = corpus::validate_annotation(&ranking, &ratings).map_err(|e| Reason::MalformedRequest {
            message: e.to_string(),
        })?;
        if !violations.is_empty() {
            return Err(Rejection::from(
                violations
                    .into_iter()
                    .map(|v| Reason::ConsistencyViolation {
                        higher_id: v.higher_id,
                        lower_id: v.lower_id,
                        higher_overall: v.higher_overall,
                        lower_overall: v.lower_overall,
                    })
                    .collect::<Vec<_>>(),
            ));
        }
        let attempt = current.number;
        self.commit(
            &mut ledger,
            Event::Ranking {
                prompt_id: pid.clone(),
                attempt,
                ranking,
            },
        )?;
        Ok(Ack::new(submission_id(&pid, attempt)))
    }

    /// Gives a prompt back before any work on it. The annotator is not
    /// offered that prompt again.
    pub fn skip(&self, req: SkipRequest) -> Result<Ack, Rejection> {
        let mut ledger = self.ledger.write();
        Self::check_active(&ledger, &req.annotator_id)?;
        let held = self
            .held(&ledger, &req.annotator_id)
            .find(|(pid, attempt, s)| task_id(pid, *attempt, *s) == req.task_id)
            .map(|(pid, attempt, s)| (pid.to_string(), attempt, s));
        let Some((pid, attempt, stage)) = held else {
            return Err(Reason::TaskNotIssued { task_id: req.task_id }.into());
        };
        if stage != Stage::PromptAnnotation {
            return Err(Reason::TaskInProgress { task_id: req.task_id }.into());
        }
        if ledger.annotators[&req.annotator_id].skips >= self.config.skip_cap {
            return Err(Reason::SkipLimitReached {
                limit: self.config.skip_cap,
            }
            .into());
        }
        self.commit(
            &mut ledger,
            Event::Skip {
                prompt_id: pid.clone(),
                annotator_id: req.annotator_id,
            },
        )?;
        Ok(Ack::new(submission_id(&pid, attempt)))
    }

    /// Records an inspector verdict on a submitted ranking. An invalid
    /// verdict discards the whole attempt and puts the prompt back in the
    /// queue, optionally straight to `reassign_to`.
    pub fn review(&self, id: &str, req: ReviewRequest) -> Result<Ack, Rejection> {
        let mut ledger = self.ledger.write();
        let unknown = || Reason::UnknownSubmission {
            submission_id: id.to_string(),
        };
        let (pid, attempt) = id
            .rsplit_once(':')
            .and_then(|(p, a)| Some((p.to_string(), a.parse::<u32>().ok()?)))
            .ok_or_else(unknown)?;
        let st = ledger.prompts.get(&pid).ok_or_else(unknown)?;
        let superseded = ledger
            .invalidated
            .iter()
            .any(|x| x.prompt_id == pid && x.attempt.number == attempt);
        if superseded || (st.current.number == attempt && st.current.review.is_some()) {
            return Err(Reason::AlreadyReviewed {
                submission_id: id.to_string(),
            }
            .into());
        }
        if st.current.number != attempt || st.current.ranking.is_none() {
            return Err(unknown().into());
        }
        if let Some(target) = &req.reassign_to {
            Self::check_active(&ledger, target)?;
        }
        let reassign_to = match req.verdict {
            Verdict::Valid => None,
            Verdict::Invalid => req.reassign_to,
        };
        self.commit(
            &mut ledger,
            Event::Review {
                prompt_id: pid,
                attempt,
                verdict: req.verdict,
                reassign_to,
            },
        )?;
        Ok(Ack::new(id.to_string()))
    }

    /// Scores an annotator's labels against the gold set and admits them
    /// when agreement reaches the threshold.
    pub fn qualify(&self, req: QualificationRequest) -> Result<QualificationResult, Rejection> {
        if self.seeds.gold.is_empty() {
            return Err(Reason::NoGoldSet.into());
        }
        let labels: LabelSet = req.labels.iter().collect();
        let a = agreement(&labels, &self.seeds.gold).map_err(|_| Reason::NoOverlap)?;
        let admitted = a.rate >= self.config.qualification_threshold;
        let mut ledger = self.ledger.write();
        self.commit(
            &mut ledger,
            Event::Qualification {
                annotator_id: req.annotator_id.clone(),
                score: a.rate,
                active: admitted,
            },
        )?;
        Ok(QualificationResult {
            annotator_id: req.annotator_id,
            score: a.rate,
            shared_pairs: a.shared_pairs,
            admitted,
        })
    }

    pub fn progress(&self) -> Progress {
        let ledger = self.ledger.read();
        let mut p = Progress {
            prompts: ledger.prompts.len(),
            unassigned: 0,
            prompt_annotation: 0,
            rating: 0,
            ranking: 0,
            awaiting_review: 0,
            accepted: 0,
            invalidated_attempts: ledger.invalidated.len(),
            annotators: ledger.annotators.values().cloned().collect(),
        };
        for (pid, st) in &ledger.prompts {
            match st.current.stage(self.seeds.images(pid)) {
                Some(_) if st.current.assignee.is_none() => p.unassigned += 1,
                Some(Stage::PromptAnnotation) => p.prompt_annotation += 1,
                Some(Stage::Rating) => p.rating += 1,
                Some(Stage::Ranking) => p.ranking += 1,
                None if st.current.review == Some(Verdict::Valid) => p.accepted += 1,
                None => p.awaiting_review += 1,
            }
        }
        p
    }

    /// Accepted records of live attempts. Invalidated attempts are left
    /// out; prompts carry their annotated category and flags when present.
    pub fn export(&self) -> ExportBundle {
        let ledger = self.ledger.read();
        let mut out = ExportBundle {
            generations: self.seeds.generations.clone(),
            ..ExportBundle::default()
        };
        for seed in &self.seeds.prompts {
            let mut prompt = seed.clone();
            let Some(st) = ledger.prompts.get(&seed.id) else {
                out.prompts.push(prompt);
                continue;
            };
            if let Some(a) = &st.current.annotation {
                prompt.category = a.category;
                prompt.unclear_intent = a.unclear_intent;
                prompt.issue_flags = a.issue_flags.clone();
            }
            out.prompts.push(prompt);
            out.ratings.extend(st.current.ratings.values().cloned());
            out.rankings.extend(st.current.ranking.clone());
        }
        out
    }

    /// Writes the export as corpus files under `dir`.
    pub fn export_to(&self, dir: &Path) -> corpus::Result<()> {
        let bundle = self.export();
        corpus::save_dataset(&bundle.into_dataset()?, dir)
    }

    /// Replaces the log with a single snapshot of the current state.
    pub fn compact(&self) -> Result<(), ServiceError> {
        let ledger = self.ledger.write();
        let path = self.config.dir.join(LOG_FILE);
        self.log
            .lock()
            .rewrite(&[Event::Snapshot {
                ledger: ledger.clone(),
            }])
            .map_err(|source| ServiceError::Io { path, source })
    }
}
