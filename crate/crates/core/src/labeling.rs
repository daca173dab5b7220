//! Pseudo-label assignment by majority vote over policy rollouts.
//!
//! The offline path votes once with the frozen base policy and writes an
//! immutable labeled dataset; the online path votes inside each training step
//! and exists only so the reward-hacking ablation can reproduce the failure
//! mode it causes.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{AnswerSymbol, Dataset, DatasetKind, Question};
use crate::error::{Error, Result};
use crate::policy::{sample_group, PolicyParams, RolloutGroup};

/// Outcome of one majority vote over G extracted answers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteTally {
    /// Votes per option symbol (options with zero votes included).
    pub counts: BTreeMap<AnswerSymbol, usize>,
    /// Unparseable responses; counted, never winning.
    pub none_count: usize,
    pub winner: AnswerSymbol,
    /// Winner count minus runner-up count (winner count itself when no other
    /// symbol received votes).
    pub margin: usize,
}

/// Majority vote over extracted answers.
///
/// The winner is the option symbol with the most votes; `None` entries are
/// tallied but can never win; ties break by ascending option symbol. The
/// tally is invariant under permutation of the input list.
pub fn majority_vote(
    extracted: &[Option<AnswerSymbol>],
    options: &[AnswerSymbol],
) -> Result<VoteTally> {
    if extracted.len() < 2 {
        return Err(Error::InvalidConfig(
            "majority vote needs a group of at least 2".into(),
        ));
    }
    let mut counts: BTreeMap<AnswerSymbol, usize> = options.iter().map(|s| (*s, 0)).collect();
    let mut none_count = 0usize;
    for e in extracted {
        match e {
            Some(sym) => {
                // Symbols outside the option set count as unparseable.
                match counts.get_mut(sym) {
                    Some(c) => *c += 1,
                    None => none_count += 1,
                }
            }
            None => none_count += 1,
        }
    }
    if counts.values().all(|c| *c == 0) {
        return Err(Error::AllVotesNone {
            group_size: extracted.len(),
        });
    }
    // BTreeMap iterates in ascending symbol order, so the first maximal count
    // wins ties.
    let (winner, winner_count) = counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(s, c)| (*s, *c))
        .expect("non-empty counts");
    let runner_up = counts
        .iter()
        .filter(|(s, _)| **s != winner)
        .map(|(_, c)| *c)
        .max()
        .unwrap_or(0);
    Ok(VoteTally {
        counts,
        none_count,
        winner,
        margin: winner_count - runner_up,
    })
}

/// Online pseudo-label: majority over the current training-step rollouts.
pub fn label_online(group: &RolloutGroup, options: &[AnswerSymbol]) -> Result<AnswerSymbol> {
    majority_vote(&group.extracted, options).map(|t| t.winner)
}

/// Summary emitted alongside an offline-labeled dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LabelReport {
    pub total: usize,
    pub labeled: usize,
    pub dropped: usize,
    /// Mean winner margin (in vote counts) over labeled questions.
    pub mean_margin: f64,
    /// Histogram over winner vote counts 0..=G.
    pub agreement_histogram: Vec<usize>,
}

impl LabelReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = serde_json::to_vec(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

/// Offline pseudo-labeling: vote once per question with the frozen base
/// policy and return a new labeled dataset plus a report.
///
/// Questions whose G answers are all unparseable are dropped and counted.
/// Each question votes on its own ChaCha stream derived from (`rng_seed`,
/// question index), so the output digest is stable across re-runs.
pub fn label_offline(
    dataset: &Dataset,
    params: &PolicyParams,
    group_size: usize,
    rng_seed: u64,
) -> Result<(Dataset, LabelReport)> {
    if dataset.entries.iter().any(|q| q.label.is_some()) {
        return Err(Error::InvalidConfig(
            "offline labeling expects an unlabeled dataset".into(),
        ));
    }
    let mut labeled: Vec<Question> = Vec::with_capacity(dataset.len());
    let mut dropped = 0usize;
    let mut margin_sum = 0usize;
    let mut histogram = vec![0usize; group_size + 1];
    for (idx, q) in dataset.entries.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        rng.set_stream(idx as u64);
        let group = sample_group(params, q, group_size, &mut rng)?;
        match majority_vote(&group.extracted, &q.symbols()) {
            Ok(tally) => {
                let winner_count = tally.counts[&tally.winner];
                histogram[winner_count.min(group_size)] += 1;
                margin_sum += tally.margin;
                let mut labeled_q = q.clone();
                labeled_q.label = Some(tally.winner);
                labeled.push(labeled_q);
            }
            Err(Error::AllVotesNone { .. }) => {
                dropped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    let total = dataset.len();
    let n_labeled = labeled.len();
    let mean_margin = if n_labeled == 0 {
        0.0
    } else {
        margin_sum as f64 / n_labeled as f64
    };
    let out = Dataset::new(labeled, DatasetKind::Synthetic)?;
    let report = LabelReport {
        total,
        labeled: n_labeled,
        dropped,
        mean_margin,
        agreement_histogram: histogram,
    };
    Ok((out, report))
}
