use std::collections::HashMap;

use crate::dataio::{Dataset, Instance};
use crate::error::Result;
use crate::trainer::eval::ItemScorer;

/// Ranks items by how often they occur in training sessions.
#[derive(Clone, Debug)]
pub struct Popularity {
    counts: Vec<f64>,
}

impl Popularity {
    pub fn fit(ds: &Dataset) -> Self {
        let mut counts = vec![0.0; ds.num_items()];
        for s in &ds.train {
            for &i in &s.items {
                counts[i] += 1.0;
            }
        }
        Popularity { counts }
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }
}

impl ItemScorer for Popularity {
    fn num_items(&self) -> usize {
        self.counts.len()
    }

    fn scores(&self, batch: &[Instance]) -> Result<Vec<Vec<f64>>> {
        Ok(vec![self.counts.clone(); batch.len()])
    }
}

/// First-order transitions from the last prefix item, with popularity
/// ordering the candidates that share a transition count (including the
/// all-zero case of an unseen last item).
#[derive(Clone, Debug)]
pub struct Markov {
    transitions: HashMap<usize, Vec<(usize, f64)>>,
    popularity: Popularity,
}

impl Markov {
    pub fn fit(ds: &Dataset) -> Self {
        let mut counts: HashMap<(usize, usize), f64> = HashMap::new();
        for s in &ds.train {
            for w in s.items.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += 1.0;
            }
        }
        let mut transitions: HashMap<usize, Vec<(usize, f64)>> = HashMap::new();
        for ((a, b), c) in counts {
            transitions.entry(a).or_default().push((b, c));
        }
        for v in transitions.values_mut() {
            v.sort_by_key(|x| x.0);
        }
        Markov {
            transitions,
            popularity: Popularity::fit(ds),
        }
    }
}

impl ItemScorer for Markov {
    fn num_items(&self) -> usize {
        self.popularity.num_items()
    }

    fn scores(&self, batch: &[Instance]) -> Result<Vec<Vec<f64>>> {
        let pop = &self.popularity.counts;
        let max = pop.iter().copied().fold(0.0, f64::max);
        // popularity contributes strictly less than one transition
        let base: Vec<f64> = pop.iter().map(|c| c / (max + 1.0)).collect();
        Ok(batch
            .iter()
            .map(|inst| {
                let mut s = base.clone();
                if let Some(outs) = inst.prefix.last().and_then(|l| self.transitions.get(l)) {
                    for &(b, c) in outs {
                        s[b] += c;
                    }
                }
                s
            })
            .collect())
    }
}
