//! Pair extraction and dataset handling against brute-force enumeration.

use std::collections::BTreeSet;

use prefkit_core::corpus::{
    extract_pairs, load_dataset, save_dataset, split_dataset, validate_annotation, Category,
    CorpusError, Dataset, GenerationRecord, PromptRecord, RankingRecord, RatingRecord,
};
use proptest::prelude::*;

fn binom2(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Every slot-size vector of length five with entries in 0..=2 summing to
/// at least one and at most `max_k`.
fn slot_shapes(max_k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for code in 0..3usize.pow(5) {
        let sizes: Vec<usize> = (0..5).map(|i| code / 3usize.pow(i) % 3).collect();
        let k: usize = sizes.iter().sum();
        if (1..=max_k).contains(&k) {
            out.push(sizes);
        }
    }
    out
}

fn ranking_from_sizes(sizes: &[usize]) -> RankingRecord {
    let mut next = 0;
    let slots = sizes
        .iter()
        .map(|&s| {
            (0..s)
                .map(|_| {
                    next += 1;
                    format!("i{next}")
                })
                .collect()
        })
        .collect();
    RankingRecord {
        prompt_id: "p".into(),
        annotator_id: "a".into(),
        slots,
    }
}

/// Independent count: ordered pairs of images whose slot indices differ.
fn brute_force_pairs(rk: &RankingRecord) -> BTreeSet<(String, String)> {
    let placed: Vec<(usize, &String)> = rk
        .slots
        .iter()
        .enumerate()
        .flat_map(|(s, ids)| ids.iter().map(move |id| (s, id)))
        .collect();
    let mut out = BTreeSet::new();
    for (si, a) in &placed {
        for (sj, b) in &placed {
            if si < sj {
                out.insert((a.to_string(), b.to_string()));
            }
        }
    }
    out
}

#[test]
fn exhaustive_pair_counts_up_to_six_images() {
    let shapes = slot_shapes(6);
    assert!(shapes.len() > 100);
    for sizes in shapes {
        let rk = ranking_from_sizes(&sizes);
        let pairs = extract_pairs(&rk);
        let k: usize = sizes.iter().sum();
        let expected = binom2(k) - sizes.iter().map(|&s| binom2(s)).sum::<usize>();
        assert_eq!(pairs.len(), expected, "{sizes:?}");
        let got: BTreeSet<(String, String)> = pairs
            .iter()
            .map(|p| (p.better_id.clone(), p.worse_id.clone()))
            .collect();
        assert_eq!(got, brute_force_pairs(&rk), "{sizes:?}");
    }
}

proptest! {
    #[test]
    fn pairs_are_antisymmetric(sizes in prop::collection::vec(0usize..=2, 1..=5)) {
        prop_assume!(sizes.iter().sum::<usize>() > 0);
        let pairs = extract_pairs(&ranking_from_sizes(&sizes));
        let set: BTreeSet<(&str, &str)> =
            pairs.iter().map(|p| (p.better_id.as_str(), p.worse_id.as_str())).collect();
        for (a, b) in &set {
            prop_assert!(!set.contains(&(*b, *a)));
            prop_assert_ne!(a, b);
        }
    }

    #[test]
    fn validation_empty_iff_weakly_decreasing(
        sizes in prop::collection::vec(1usize..=2, 1..=5),
        scores in prop::collection::vec(1u8..=7, 10),
    ) {
        let rk = ranking_from_sizes(&sizes);
        let ratings: Vec<RatingRecord> = rk
            .images()
            .zip(&scores)
            .map(|(id, &s)| rating(id, s))
            .collect();
        let violations = validate_annotation(&rk, &ratings).unwrap();
        // Weakly decreasing along slots: every image in an earlier slot is
        // rated at least as high as every image in a later slot.
        let by_slot: Vec<Vec<u8>> = {
            let mut it = scores.iter();
            sizes.iter().map(|&s| it.by_ref().take(s).copied().collect()).collect()
        };
        let monotone = by_slot.iter().enumerate().all(|(i, hi)| {
            by_slot[i + 1..].iter().flatten().all(|lo| hi.iter().all(|h| h >= lo))
        });
        prop_assert_eq!(violations.is_empty(), monotone);
    }
}

fn rating(id: &str, overall: u8) -> RatingRecord {
    RatingRecord {
        image_id: id.into(),
        annotator_id: "a".into(),
        overall,
        alignment: 4,
        fidelity: 4,
        problem_flags: Default::default(),
    }
}

fn prompt(id: &str) -> PromptRecord {
    PromptRecord {
        id: id.into(),
        text: format!("text of {id}"),
        category: Category::Animals,
        unclear_intent: false,
        issue_flags: Default::default(),
        function_phrase_proportion: None,
    }
}

/// `n` prompts with four images each, ranked into four distinct slots.
fn fixture(n: usize) -> Dataset {
    let mut prompts = Vec::new();
    let mut gens = Vec::new();
    let mut rankings = Vec::new();
    for p in 0..n {
        let pid = format!("p{p}");
        prompts.push(prompt(&pid));
        let ids: Vec<String> = (0..4).map(|i| format!("{pid}_{i}")).collect();
        for id in &ids {
            gens.push(GenerationRecord {
                id: id.clone(),
                prompt_id: pid.clone(),
                embedding_id: id.clone(),
            });
        }
        rankings.push(RankingRecord {
            prompt_id: pid,
            annotator_id: "a".into(),
            slots: ids.iter().map(|id| vec![id.clone()]).collect(),
        });
    }
    Dataset::new(prompts, gens, vec![], rankings).unwrap()
}

#[test]
fn empty_directory_loads_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let d = load_dataset(dir.path()).unwrap();
    assert!(d.is_empty() && d.pairs().is_empty());
    for f in ["prompts.jsonl", "generations.jsonl", "ratings.jsonl", "rankings.jsonl"] {
        std::fs::write(dir.path().join(f), "").unwrap();
    }
    assert_eq!(load_dataset(dir.path()).unwrap(), Dataset::default());
}

#[test]
fn one_prompt_fixture_pair_cache() {
    let dir = tempfile::tempdir().unwrap();
    let d = fixture(1);
    save_dataset(&d, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    // Four images in four slots: 3 + 2 + 1 pairs.
    assert_eq!(back.pairs().len(), 6);
    assert_eq!(back, d);
}

#[test]
fn dangling_generation_names_missing_prompt() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("prompts.jsonl"),
        "{\"id\":\"p1\",\"text\":\"a cat\",\"category\":\"Animals\",\"unclear_intent\":false,\"issue_flags\":[]}\n",
    )
    .unwrap();
    std::fs::write(
        dir.path().join("generations.jsonl"),
        "{\"id\":\"g1\",\"prompt_id\":\"p9\",\"embedding_id\":\"g1\"}\n",
    )
    .unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(&err, CorpusError::DanglingReference { id, .. } if id == "p9"));
    assert!(err.to_string().contains("p9"));
}

#[test]
fn parse_error_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("prompts.jsonl"),
        "{\"id\":\"p1\",\"text\":\"a\",\"category\":\"Food\"}\n{not json}\n",
    )
    .unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, CorpusError::Parse { line: 2, .. }), "{err}");
}

#[test]
fn ranking_must_cover_prompt_images() {
    let mut d = fixture(1);
    d.rankings[0].slots.pop();
    let err = Dataset::new(d.prompts, d.generations, d.ratings, d.rankings).unwrap_err();
    assert!(matches!(err, CorpusError::InvalidRanking { .. }), "{err}");
}

#[test]
fn split_edge_cases() {
    let d = fixture(10);
    let (train, test) = split_dataset(&d, &BTreeSet::new()).unwrap();
    assert_eq!(train, d);
    assert!(test.is_empty() && test.pairs().is_empty());
    let all: BTreeSet<String> = d.prompts.iter().map(|p| p.id.clone()).collect();
    let (train, test) = split_dataset(&d, &all).unwrap();
    assert!(train.is_empty() && train.pairs().is_empty());
    assert_eq!(test.pairs().len(), d.pairs().len());
    let unknown: BTreeSet<String> = ["nope".to_string()].into();
    assert!(matches!(split_dataset(&d, &unknown), Err(CorpusError::UnknownTestId(id)) if id == "nope"));
}

#[test]
fn split_is_prompt_disjoint_and_exact() {
    let d = fixture(10);
    let test_ids: BTreeSet<String> = ["p1", "p4", "p7"].iter().map(|s| s.to_string()).collect();
    let (train, test) = split_dataset(&d, &test_ids).unwrap();
    for p in train.pairs() {
        assert!(!test_ids.contains(&p.prompt_id));
    }
    for p in test.pairs() {
        assert!(test_ids.contains(&p.prompt_id));
    }
    let mut joined: Vec<_> = train.pairs().iter().chain(test.pairs()).cloned().collect();
    let mut original = d.pairs().to_vec();
    joined.sort();
    original.sort();
    assert_eq!(joined, original);
    assert_eq!(train.prompts.len() + test.prompts.len(), 10);
    assert_eq!(train.generations.len() + test.generations.len(), 40);
}
