//! Annotation statistics: per-category score means, problem frequencies and
//! function-phrase proportion buckets. All means are per image; an image
//! rated more than once contributes each rating.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write};

use serde::Serialize;

use crate::corpus::{Category, Dataset, ProblemFlag, RatingRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum ProportionBucket {
    Zero,
    UpTo20,
    UpTo40,
    UpTo60,
    UpTo80,
    UpTo100,
}

impl ProportionBucket {
    pub const ALL: [ProportionBucket; 6] = [
        ProportionBucket::Zero,
        ProportionBucket::UpTo20,
        ProportionBucket::UpTo40,
        ProportionBucket::UpTo60,
        ProportionBucket::UpTo80,
        ProportionBucket::UpTo100,
    ];

    /// Exact zero gets its own bucket; the rest are `(lo, hi]`.
    pub fn of(proportion: f64) -> Option<Self> {
        Some(match proportion {
            0.0 => ProportionBucket::Zero,
            p if p > 0.0 && p <= 0.2 => ProportionBucket::UpTo20,
            p if p > 0.2 && p <= 0.4 => ProportionBucket::UpTo40,
            p if p > 0.4 && p <= 0.6 => ProportionBucket::UpTo60,
            p if p > 0.6 && p <= 0.8 => ProportionBucket::UpTo80,
            p if p > 0.8 && p <= 1.0 => ProportionBucket::UpTo100,
            _ => return None,
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            ProportionBucket::Zero => "0%",
            ProportionBucket::UpTo20 => "(0,20]%",
            ProportionBucket::UpTo40 => "(20,40]%",
            ProportionBucket::UpTo60 => "(40,60]%",
            ProportionBucket::UpTo80 => "(60,80]%",
            ProportionBucket::UpTo100 => "(80,100]%",
        }
    }
}

impl fmt::Display for ProportionBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ScoreMeans {
    pub alignment: f64,
    pub fidelity: f64,
    pub overall: f64,
}

#[derive(Default)]
struct MeanAcc {
    n: usize,
    alignment: f64,
    fidelity: f64,
    overall: f64,
}

impl MeanAcc {
    fn add(&mut self, r: &RatingRecord) {
        self.n += 1;
        self.alignment += f64::from(r.alignment);
        self.fidelity += f64::from(r.fidelity);
        self.overall += f64::from(r.overall);
    }

    fn finish(&self) -> Option<ScoreMeans> {
        (self.n > 0).then(|| {
            let n = self.n as f64;
            ScoreMeans {
                alignment: self.alignment / n,
                fidelity: self.fidelity / n,
                overall: self.overall / n,
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryRow {
    pub category: Category,
    pub prompts: usize,
    pub ratings: usize,
    pub means: Option<ScoreMeans>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategorySummary {
    pub rows: Vec<CategoryRow>,
    pub global: Option<ScoreMeans>,
}

/// Ratings grouped by the prompt that owns each rated image.
fn ratings_by_prompt(d: &Dataset) -> HashMap<&str, Vec<&RatingRecord>> {
    let prompt_of = d.prompt_of_image();
    let mut out: HashMap<&str, Vec<&RatingRecord>> = HashMap::new();
    for r in &d.ratings {
        if let Some(p) = prompt_of.get(r.image_id.as_str()) {
            out.entry(p).or_default().push(r);
        }
    }
    out
}

pub fn category_summary(d: &Dataset) -> CategorySummary {
    let by_prompt = ratings_by_prompt(d);
    let mut acc: BTreeMap<Category, (usize, MeanAcc)> = BTreeMap::new();
    let mut global = MeanAcc::default();
    for p in &d.prompts {
        let entry = acc.entry(p.category).or_default();
        entry.0 += 1;
        for r in by_prompt.get(p.id.as_str()).into_iter().flatten() {
            entry.1.add(r);
            global.add(r);
        }
    }
    let rows = Category::ALL
        .iter()
        .map(|&category| {
            let (prompts, m) = acc.remove(&category).unwrap_or_default();
            CategoryRow {
                category,
                prompts,
                ratings: m.n,
                means: m.finish(),
            }
        })
        .collect();
    CategorySummary {
        rows,
        global: global.finish(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Group {
    Category(Category),
    Bucket(ProportionBucket),
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::Category(c) => c.fmt(f),
            Group::Bucket(b) => b.fmt(f),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupBy {
    Category,
    ProportionBucket,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProblemRow {
    pub group: Group,
    pub images: usize,
    /// Frequencies in `ProblemFlag::PROBLEMS` order.
    pub frequencies: [f64; 7],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProblemFrequencyTable {
    pub rows: Vec<ProblemRow>,
}

impl ProblemFrequencyTable {
    pub fn frequency(&self, group: Group, flag: ProblemFlag) -> Option<f64> {
        let col = ProblemFlag::PROBLEMS.iter().position(|f| *f == flag)?;
        self.rows
            .iter()
            .find(|r| r.group == group)
            .map(|r| r.frequencies[col])
    }
}

/// Share of rated images in each group carrying each problem flag. An image
/// counts as flagged if any of its ratings reports the flag.
pub fn problem_frequency(d: &Dataset, group_by: GroupBy) -> ProblemFrequencyTable {
    let prompts: HashMap<&str, _> = d.prompts.iter().map(|p| (p.id.as_str(), p)).collect();
    let prompt_of = d.prompt_of_image();
    let mut flags: BTreeMap<&str, BTreeSet<ProblemFlag>> = BTreeMap::new();
    for r in &d.ratings {
        flags
            .entry(r.image_id.as_str())
            .or_default()
            .extend(r.problem_flags.iter().copied());
    }
    let mut counts: BTreeMap<Group, (usize, [usize; 7])> = BTreeMap::new();
    for (image, set) in &flags {
        let Some(prompt) = prompt_of.get(image).and_then(|p| prompts.get(p)) else {
            continue;
        };
        let group = match group_by {
            GroupBy::Category => Group::Category(prompt.category),
            GroupBy::ProportionBucket => {
                match prompt.function_phrase_proportion.and_then(ProportionBucket::of) {
                    Some(b) => Group::Bucket(b),
                    None => continue,
                }
            }
        };
        let entry = counts.entry(group).or_default();
        entry.0 += 1;
        for (i, flag) in ProblemFlag::PROBLEMS.iter().enumerate() {
            if set.contains(flag) {
                entry.1[i] += 1;
            }
        }
    }
    let groups: Vec<Group> = match group_by {
        GroupBy::Category => Category::ALL.iter().map(|c| Group::Category(*c)).collect(),
        GroupBy::ProportionBucket => ProportionBucket::ALL.iter().map(|b| Group::Bucket(*b)).collect(),
    };
    let rows = groups
        .into_iter()
        .map(|group| {
            let (images, c) = counts.get(&group).copied().unwrap_or_default();
            let mut frequencies = [0.0; 7];
            if images > 0 {
                for i in 0..7 {
                    frequencies[i] = c[i] as f64 / images as f64;
                }
            }
            ProblemRow {
                group,
                images,
                frequencies,
            }
        })
        .collect();
    ProblemFrequencyTable { rows }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketRow {
    pub bucket: ProportionBucket,
    pub prompts: usize,
    pub means: Option<ScoreMeans>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketSummary {
    pub rows: Vec<BucketRow>,
    /// Prompts without a proportion.
    pub unbucketed: usize,
}

pub fn bucket_summary(d: &Dataset) -> BucketSummary {
    let by_prompt = ratings_by_prompt(d);
    let mut acc: BTreeMap<ProportionBucket, (usize, MeanAcc)> = BTreeMap::new();
    let mut unbucketed = 0;
    for p in &d.prompts {
        let Some(bucket) = p.function_phrase_proportion.and_then(ProportionBucket::of) else {
            unbucketed += 1;
            continue;
        };
        let entry = acc.entry(bucket).or_default();
        entry.0 += 1;
        for r in by_prompt.get(p.id.as_str()).into_iter().flatten() {
            entry.1.add(r);
        }
    }
    BucketSummary {
        rows: ProportionBucket::ALL
            .iter()
            .map(|&bucket| {
                let (prompts, m) = acc.remove(&bucket).unwrap_or_default();
                BucketRow {
                    bucket,
                    prompts,
                    means: m.finish(),
                }
            })
            .collect(),
        unbucketed,
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

pub fn category_tsv(s: &CategorySummary) -> String {
    let mut out = String::from("category\tprompts\tratings\talignment\tfidelity\toverall\n");
    for r in &s.rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.category,
            r.prompts,
            r.ratings,
            cell(r.means.map(|m| m.alignment)),
            cell(r.means.map(|m| m.fidelity)),
            cell(r.means.map(|m| m.overall)),
        );
    }
    out
}

pub fn problem_tsv(t: &ProblemFrequencyTable) -> String {
    let mut out = String::from("group\timages");
    for f in ProblemFlag::PROBLEMS {
        out.push('\t');
        out.push_str(f.name());
    }
    out.push('\n');
    for r in &t.rows {
        let _ = write!(out, "{}\t{}", r.group, r.images);
        for f in r.frequencies {
            let _ = write!(out, "\t{f:.4}");
        }
        out.push('\n');
    }
    out
}

pub fn bucket_tsv(s: &BucketSummary) -> String {
    let mut out = String::from("bucket\tprompts\talignment\tfidelity\toverall\n");
    for r in &s.rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            r.bucket,
            r.prompts,
            cell(r.means.map(|m| m.alignment)),
            cell(r.means.map(|m| m.fidelity)),
            cell(r.means.map(|m| m.overall)),
        );
    }
    let _ = writeln!(out, "unbucketed\t{}\t\t\t", s.unbucketed);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{GenerationRecord, PromptRecord};

    fn prompt(id: &str, category: Category, proportion: Option<f64>) -> PromptRecord {
        PromptRecord {
            id: id.into(),
            text: id.into(),
            category,
            unclear_intent: false,
            issue_flags: Default::default(),
            function_phrase_proportion: proportion,
        }
    }

    fn gen(id: &str, prompt: &str) -> GenerationRecord {
        GenerationRecord {
            id: id.into(),
            prompt_id: prompt.into(),
            embedding_id: id.into(),
        }
    }

    fn rating(image: &str, overall: u8, flags: &[ProblemFlag]) -> RatingRecord {
        RatingRecord {
            image_id: image.into(),
            annotator_id: "a".into(),
            overall,
            alignment: overall,
            fidelity: overall,
            problem_flags: flags.iter().copied().collect(),
        }
    }

    #[test]
    fn bucket_edges() {
        assert_eq!(ProportionBucket::of(0.0), Some(ProportionBucket::Zero));
        assert_eq!(ProportionBucket::of(0.2), Some(ProportionBucket::UpTo20));
        assert_eq!(ProportionBucket::of(0.2000001), Some(ProportionBucket::UpTo40));
        assert_eq!(ProportionBucket::of(1.0), Some(ProportionBucket::UpTo100));
        assert_eq!(ProportionBucket::of(1.5), None);
    }

    #[test]
    fn single_category_mean() {
        let d = Dataset::new(
            vec![prompt("p", Category::Food, None)],
            vec![gen("a", "p"), gen("b", "p")],
            vec![rating("a", 4, &[]), rating("b", 6, &[])],
            vec![],
        )
        .unwrap();
        let s = category_summary(&d);
        let food = s.rows.iter().find(|r| r.category == Category::Food).unwrap();
        assert_eq!(food.means.unwrap().overall, 5.0);
        assert!(s.rows.iter().filter(|r| r.category != Category::Food).all(|r| r.means.is_none()));
    }

    #[test]
    fn empty_dataset_is_all_null() {
        let s = category_summary(&Dataset::default());
        assert!(s.global.is_none());
        assert!(s.rows.iter().all(|r| r.means.is_none() && r.prompts == 0));
        let b = bucket_summary(&Dataset::default());
        assert_eq!(b.unbucketed, 0);
    }

    #[test]
    fn problem_frequencies() {
        let d = Dataset::new(
            vec![prompt("p", Category::People, Some(0.0))],
            vec![gen("a", "p"), gen("b", "p"), gen("c", "p"), gen("e", "p")],
            vec![
                rating("a", 4, &[ProblemFlag::BodyProblem]),
                rating("b", 4, &[ProblemFlag::None]),
                rating("c", 4, &[]),
                rating("e", 4, &[]),
            ],
            vec![],
        )
        .unwrap();
        let t = problem_frequency(&d, GroupBy::Category);
        assert_eq!(
            t.frequency(Group::Category(Category::People), ProblemFlag::BodyProblem),
            Some(0.25)
        );
        assert_eq!(t.frequency(Group::Category(Category::People), ProblemFlag::Fuzzy), Some(0.0));
        let t = problem_frequency(&d, GroupBy::ProportionBucket);
        assert_eq!(
            t.frequency(Group::Bucket(ProportionBucket::Zero), ProblemFlag::BodyProblem),
            Some(0.25)
        );
    }

    #[test]
    fn no_flags_all_zero() {
        let d = Dataset::new(
            vec![prompt("p", Category::Arts, None)],
            vec![gen("a", "p")],
            vec![rating("a", 4, &[])],
            vec![],
        )
        .unwrap();
        let t = problem_frequency(&d, GroupBy::Category);
        assert!(t.rows.iter().all(|r| r.frequencies.iter().all(|f| *f == 0.0)));
    }

    #[test]
    fn tsv_shapes() {
        let s = category_summary(&Dataset::default());
        assert_eq!(category_tsv(&s).lines().count(), 13);
        let b = bucket_summary(&Dataset::default());
        assert_eq!(bucket_tsv(&b).lines().count(), 8);
        let t = problem_frequency(&Dataset::default(), GroupBy::ProportionBucket);
        assert_eq!(problem_tsv(&t).lines().next().unwrap().split('\t').count(), 9);
    }
}
