//! The `prefkit` command surface. Each subcommand loads its inputs, calls
//! the matching library operation and writes a report.

use std::collections::BTreeMap;

use prefkit_core::corpus::RankingRecord;
use prefkit_core::metrics::{rank_images, AnnotatorLabel, MetricsError, PreferenceLabel, Scorer, Verdict};
use serde::{Deserialize, Serialize};

pub mod args;
mod commands;

pub use commands::run;

/// The `top_n` best candidates under `scorer`, best first.
pub fn rerank(
    scorer: &dyn Scorer,
    prompt_id: &str,
    candidates: &[String],
    top_n: usize,
) -> Result<Vec<String>, MetricsError> {
    if top_n == 0 || top_n > candidates.len() {
        return Err(MetricsError::TopNTooLarge {
            top_n,
            count: candidates.len(),
        });
    }
    let mut ranked = rank_images(scorer, prompt_id, candidates)?;
    ranked.truncate(top_n);
    Ok(ranked)
}

/// One label per image pair of every ranking: the earlier slot wins, a
/// shared slot is a tie. Pairs are emitted in id order.
pub fn labels_from_rankings(rankings: &[RankingRecord]) -> Vec<AnnotatorLabel> {
    let mut out = Vec::new();
    for r in rankings {
        let slot = r.slot_of();
        let mut ids: Vec<&str> = r.images().collect();
        ids.sort_unstable();
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                let verdict = match slot[a].cmp(&slot[b]) {
                    std::cmp::Ordering::Less => Verdict::FirstBetter,
                    std::cmp::Ordering::Greater => Verdict::SecondBetter,
                    std::cmp::Ordering::Equal => Verdict::Tie,
                };
                out.push(AnnotatorLabel {
                    annotator: r.annotator_id.clone(),
                    label: PreferenceLabel {
                        prompt_id: r.prompt_id.clone(),
                        first_id: a.to_string(),
                        second_id: b.to_string(),
                        verdict,
                    },
                });
            }
        }
    }
    out
}

/// Input of `rank-models`: ranks of each generative model under human
/// evaluation and under each metric, plus optional raw score samples per
/// metric and model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelRanking {
    pub human: BTreeMap<String, f64>,
    #[serde(default)]
    pub metrics: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    pub scores: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
}
