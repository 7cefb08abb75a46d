//! Planted-preference session generator. Users belong to latent clusters;
//! each cluster prefers a block of the catalogue and follows its own
//! successor rule, so the next item depends on who is browsing.

use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::Interaction;
use crate::error::{Error, Result};

const FROZEN: &str = include_str!("../../data/synthetic_planted.cfg");
pub const SUPPORTED_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub version: u32,
    pub users: usize,
    pub clusters: usize,
    pub items: usize,
    pub sessions: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a session opens inside the cluster's block.
    pub first_in_preferred: f64,
    /// Probability of following the cluster's successor rule.
    pub successor_prob: f64,
    /// Probability of a uniform jump inside the cluster's block; the rest
    /// is a uniform jump over the whole catalogue.
    pub preferred_prob: f64,
    pub days: u64,
    pub seed: u64,
}

impl SyntheticConfig {
    /// The versioned configuration bundled with the crate.
    pub fn frozen() -> Self {
        Self::parse(FROZEN).expect("bundled generator configuration is valid")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = SyntheticConfig {
            version: 0,
            users: 0,
            clusters: 0,
            items: 0,
            sessions: 0,
            min_len: 0,
            max_len: 0,
            first_in_preferred: 0.0,
            successor_prob: 0.0,
            preferred_prob: 0.0,
            days: 0,
            seed: 0,
        };
        fn p<T: FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("generator: bad value {v:?} for {k}")))
        }
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("generator: expected key=value, found {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "version" => cfg.version = p(k, v)?,
                "users" => cfg.users = p(k, v)?,
                "clusters" => cfg.clusters = p(k, v)?,
                "items" => cfg.items = p(k, v)?,
                "sessions" => cfg.sessions = p(k, v)?,
                "min_len" => cfg.min_len = p(k, v)?,
                "max_len" => cfg.max_len = p(k, v)?,
                "first_in_preferred" => cfg.first_in_preferred = p(k, v)?,
                "successor_prob" => cfg.successor_prob = p(k, v)?,
                "preferred_prob" => cfg.preferred_prob = p(k, v)?,
                "days" => cfg.days = p(k, v)?,
                "seed" => cfg.seed = p(k, v)?,
                other => return Err(Error::Config(format!("generator: unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SUPPORTED_VERSION {
            return Err(Error::Config(format!("generator version {} unsupported", self.version)));
        }
        if self.clusters == 0 || self.users < self.clusters || self.items < self.clusters || self.sessions == 0 {
            return Err(Error::Config("generator needs users, items >= clusters >= 1".into()));
        }
        if self.min_len < 2 || self.max_len < self.min_len || self.days == 0 {
            return Err(Error::Config("generator needs 2 <= min_len <= max_len and days >= 1".into()));
        }
        let probs = [self.first_in_preferred, self.successor_prob, self.preferred_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || self.successor_prob + self.preferred_prob > 1.0 {
            return Err(Error::Config("generator probabilities out of range".into()));
        }
        Ok(())
    }

    fn block(&self, cluster: usize) -> std::ops::Range<usize> {
        let size = self.items / self.clusters;
        let start = cluster * size;
        let end = if cluster + 1 == self.clusters { self.items } else { start + size };
        start..end
    }

    pub fn cluster_of(&self, user: usize) -> usize {
        user % self.clusters
    }

    /// Successor of every item under each cluster's rule, always inside the
    /// cluster's block.
    pub fn successor_tables(&self) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.clusters)
            .map(|c| {
                let b = self.block(c);
                (0..self.items).map(|_| rng.gen_range(b.clone())).collect()
            })
            .collect()
    }

    /// Sessions spread evenly over `days`, one interaction per minute.
    pub fn generate(&self) -> Vec<Interaction> {
        let succ = self.successor_tables();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(1));
        let span = self.days * 86_400;
        let mut rows = Vec::new();
        for k in 0..self.sessions {
            let user = rng.gen_range(0..self.users);
            let c = self.cluster_of(user);
            let block = self.block(c);
            let len = rng.gen_range(self.min_len..=self.max_len);
            let mut item = if rng.gen::<f64>() < self.first_in_preferred {
                rng.gen_range(block.clone())
            } else {
                rng.gen_range(0..self.items)
            };
            let start = k as u64 * span / self.sessions as u64;
            for pos in 0..len {
                if pos > 0 {
                    let r = rng.gen::<f64>();
                    item = if r < self.successor_prob {
                        succ[c][item]
                    } else if r < self.successor_prob + self.preferred_prob {
                        rng.gen_range(block.clone())
                    } else {
                        rng.gen_range(0..self.items)
                    };
                }
                rows.push(Interaction::new(
                    &format!("u{user}"),
                    &format!("i{item}"),
                    &format!("s{k}"),
                    start + 60 * pos as u64,
                ));
            }
        }
        rows
    }
}
