use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Instance;
use crate::error::Result;

/// Anything that scores every item for a batch of prefixes.
pub trait ItemScorer: Sync {
    fn num_items(&self) -> usize;

    /// One score row of length `num_items` per instance; only `user` and
    /// `prefix` are read.
    fn scores(&self, batch: &[Instance]) -> Result<Vec<Vec<f64>>>;
}

/// Zero-based rank of `target` when items are ordered by descending score
/// with ascending index breaking ties.
pub fn target_rank(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > t || (s == t && i < target))
        .count()
}

/// Top-`n` item indices, best first.
pub fn top_n(scores: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

const EVAL_CHUNK: usize = 256;

/// Ranks of every instance's target, computed in parallel chunks.
pub fn target_ranks(scorer: &dyn ItemScorer, instances: &[Instance]) -> Result<Vec<usize>> {
    let chunks: Vec<Vec<usize>> = instances
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let scores = scorer.scores(chunk)?;
            Ok(chunk
                .iter()
                .zip(&scores)
                .map(|(inst, s)| target_rank(s, inst.target))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Fraction of instances whose target is among the top `n`, for each `n`.
/// Values of `n` above the catalogue size are clamped to it.
pub fn recall_at_n(scorer: &dyn ItemScorer, instances: &[Instance], ns: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let ranks = target_ranks(scorer, instances)?;
    Ok(recall_from_ranks(&ranks, ns, scorer.num_items()))
}

pub fn recall_from_ranks(ranks: &[usize], ns: &[usize], num_items: usize) -> BTreeMap<usize, f64> {
    ns.iter()
        .map(|&n| {
            let eff = if n > num_items {
                log::warn!("Recall@{n} exceeds the {num_items} items; clamping");
                num_items
            } else {
                n
            };
            let hits = ranks.iter().filter(|&&r| r < eff).count();
            let recall = if ranks.is_empty() { 0.0 } else { hits as f64 / ranks.len() as f64 };
            (n, recall)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub recall_at: BTreeMap<usize, f64>,
    /// Mean training loss per epoch; empty for untrained scorers.
    pub loss_curve: Vec<f64>,
    /// Wall-clock seconds per epoch; left empty in deterministic runs.
    pub epoch_seconds: Vec<f64>,
}

impl EvalReport {
    pub fn is_monotone(&self) -> bool {
        let v: Vec<f64> = self.recall_at.values().copied().collect();
        v.windows(2).all(|w| w[0] <= w[1])
    }
}
