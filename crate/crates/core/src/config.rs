//! Flat `key=value` run configuration shared by every pipeline stage.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::dataio::{InstanceMode, PreprocessConfig};
use crate::error::{Error, Result};
use crate::hetgnn::ModelConfig;
use crate::hetgraph::WalkConfig;
use crate::pretrain::SkipGramConfig;

/// Dataset-style preset selecting filter thresholds and neighbor caps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Diginetica,
    Tmall,
    Synthetic,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diginetica" => Ok(Preset::Diginetica),
            "tmall" => Ok(Preset::Tmall),
            "synthetic" => Ok(Preset::Synthetic),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Diginetica => "diginetica",
            Preset::Tmall => "tmall",
            Preset::Synthetic => "synthetic",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub preprocess: PreprocessConfig,
    pub walk: WalkConfig,
    pub session_nodes: bool,
    pub walk_len: usize,
    pub walks_per_node: usize,
    pub skipgram: SkipGramConfig,
    pub model: ModelConfig,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub instances: InstanceMode,
    pub seed: u64,
    pub deterministic: bool,
    pub topn: Vec<usize>,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (preprocess, walk) = match preset {
            Preset::Diginetica => (PreprocessConfig::diginetica(), WalkConfig::diginetica()),
            Preset::Tmall => (PreprocessConfig::tmall(), WalkConfig::tmall()),
            Preset::Synthetic => (
                PreprocessConfig {
                    min_item_freq: 5,
                    min_user_ops: 1,
                    min_session_len: 2,
                    test_window_days: 6,
                },
                WalkConfig::diginetica(),
            ),
        };
        let d = if preset == Preset::Synthetic { 16 } else { 64 };
        RunConfig {
            preset,
            preprocess,
            walk,
            session_nodes: true,
            walk_len: 20,
            walks_per_node: 10,
            skipgram: SkipGramConfig {
                d,
                ..SkipGramConfig::default()
            },
            model: ModelConfig {
                d,
                ..ModelConfig::default()
            },
            lr: 0.0002,
            epochs: 10,
            batch_size: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            instances: InstanceMode::AllPrefixes,
            seed: 0,
            deterministic: false,
            topn: vec![40, 50],
        }
    }

    pub fn set_d(&mut self, d: usize) {
        self.skipgram.d = d;
        self.model.d = d;
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.walk.seed = seed;
        self.skipgram.seed = seed;
    }

    /// Entries in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let caps = &self.walk.caps;
        let topn: Vec<String> = self.topn.iter().map(usize::to_string).collect();
        vec![
            ("preset", self.preset.to_string()),
            ("min_item_freq", self.preprocess.min_item_freq.to_string()),
            ("min_user_ops", self.preprocess.min_user_ops.to_string()),
            ("min_session_len", self.preprocess.min_session_len.to_string()),
            ("test_window_days", self.preprocess.test_window_days.to_string()),
            ("restart_prob", self.walk.restart_prob.to_string()),
            ("rwr_list_len", self.walk.rwr_list_len.to_string()),
            ("k_item", caps[0].to_string()),
            ("k_session", caps[1].to_string()),
            ("k_user", caps[2].to_string()),
            ("session_nodes", self.session_nodes.to_string()),
            ("walk_len", self.walk_len.to_string()),
            ("walks_per_node", self.walks_per_node.to_string()),
            ("sg_window", self.skipgram.window.to_string()),
            ("sg_negatives", self.skipgram.negatives.to_string()),
            ("sg_epochs", self.skipgram.epochs.to_string()),
            ("sg_lr", self.skipgram.lr.to_string()),
            ("d", self.model.d.to_string()),
            ("hetgnn", self.model.hetgnn.to_string()),
            ("normalize_session_attention", self.model.normalize_session_attention.to_string()),
            ("lr", self.lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("instances", self.instances.to_string()),
            ("seed", self.seed.to_string()),
            ("deterministic", self.deterministic.to_string()),
            ("topn", topn.join(",")),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Applies one override. Unknown keys and unparseable values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "preset" => {
                let preset: Preset = p(key, value)?;
                let seed = self.seed;
                *self = RunConfig::preset(preset);
                self.set_seed(seed);
            }
            "min_item_freq" => self.preprocess.min_item_freq = p(key, value)?,
            "min_user_ops" => self.preprocess.min_user_ops = p(key, value)?,
            "min_session_len" => self.preprocess.min_session_len = p(key, value)?,
            "test_window_days" => self.preprocess.test_window_days = p(key, value)?,
            "restart_prob" => self.walk.restart_prob = p(key, value)?,
            "rwr_list_len" => self.walk.rwr_list_len = p(key, value)?,
            "k_item" => self.walk.caps[0] = p(key, value)?,
            "k_session" => self.walk.caps[1] = p(key, value)?,
            "k_user" => self.walk.caps[2] = p(key, value)?,
            "session_nodes" => self.session_nodes = p(key, value)?,
            "walk_len" => self.walk_len = p(key, value)?,
            "walks_per_node" => self.walks_per_node = p(key, value)?,
            "sg_window" => self.skipgram.window = p(key, value)?,
            "sg_negatives" => self.skipgram.negatives = p(key, value)?,
            "sg_epochs" => self.skipgram.epochs = p(key, value)?,
            "sg_lr" => self.skipgram.lr = p(key, value)?,
            "d" => self.set_d(p(key, value)?),
            "hetgnn" => self.model.hetgnn = p(key, value)?,
            "normalize_session_attention" => self.model.normalize_session_attention = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "epochs" => self.epochs = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "beta1" => self.beta1 = p(key, value)?,
            "beta2" => self.beta2 = p(key, value)?,
            "adam_eps" => self.adam_eps = p(key, value)?,
            "instances" => self.instances = value.trim().parse()?,
            "seed" => self.set_seed(p(key, value)?),
            "deterministic" => self.deterministic = p(key, value)?,
            "topn" => {
                self.topn = value
                    .split(',')
                    .map(|x| p(key, x))
                    .collect::<Result<Vec<usize>>>()?
            }
            other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults of the file's `preset`
    /// (diginetica when absent). Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, found {line:?}"),
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = RunConfig::default();
        if let Some((_, v)) = pairs.iter().find(|(k, _)| k == "preset") {
            cfg = RunConfig::preset(v.parse()?);
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.walk.validate()?;
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.model.d == 0 {
            return Err(Error::Config("epochs, batch_size and d must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(Error::Config("adam moments need beta in [0, 1) and eps > 0".into()));
        }
        if self.walk_len < 2 || self.walks_per_node == 0 {
            return Err(Error::Config("walk_len must be >= 2 and walks_per_node >= 1".into()));
        }
        if self.topn.is_empty() || self.topn.contains(&0) {
            return Err(Error::Config("topn needs values >= 1".into()));
        }
        Ok(())
    }

    /// Map form, for report metadata.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Diginetica)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut cfg = RunConfig::preset(Preset::Tmall);
        cfg.set("lr", "0.01").unwrap();
        cfg.set("topn", "5,10").unwrap();
        cfg.set("seed", "9").unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.walk.caps, [1, 15, 1]);
        assert_eq!(back.walk.seed, 9);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::parse("bogus=1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("lr"), Err(Error::Parse { line: 1, .. })));
        assert!(RunConfig::parse("lr=-1").is_err());
        assert!(RunConfig::parse("restart_prob=1.5").is_err());
    }

    #[test]
    fn default_hyperparameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.lr, 0.0002);
        assert_eq!(cfg.epochs, 10);
        assert_eq!((cfg.beta1, cfg.beta2, cfg.adam_eps), (0.9, 0.999, 1e-8));
        assert_eq!(cfg.walk.caps, [10, 1, 15]);
        assert_eq!(cfg.topn, vec![40, 50]);
    }
}
