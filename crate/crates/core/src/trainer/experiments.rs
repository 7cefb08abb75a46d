//! Named experiment presets producing [`ExperimentReport`]s.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataio::{parse_reader, preprocess, Dataset, LogFormat};
use crate::error::{Error, Result};
use crate::trainer::eval::EvalReport;
use crate::trainer::synthetic::SyntheticConfig;
use crate::trainer::{evaluate_baseline, train_and_evaluate, Markov, Popularity};

pub const PRESETS: [&str; 6] = [
    "synthetic-planted",
    "mini-fixture",
    "ablation-suite",
    "neighbor-sweep",
    "lr-sweep",
    "topn-sweep",
];

const FIXTURE: &str = include_str!("../../data/mini_fixture.csv");

pub const NEIGHBOR_SWEEP: [usize; 4] = [1, 5, 10, 15];
pub const LR_SWEEP: [f64; 5] = [0.0001, 0.0002, 0.0005, 0.001, 0.005];
pub const TOPN_SWEEP: [usize; 7] = [1, 5, 10, 20, 30, 40, 50];

/// Published full-scale Recall@n figures (percent), kept as metadata only.
const REFERENCE: [(&str, &str); 4] = [
    ("reference.diginetica.full.recall@40", "60.87"),
    ("reference.diginetica.full.recall@50", "64.24"),
    ("reference.tmall.full.recall@40", "26.82"),
    ("reference.tmall.full.recall@50", "28.45"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub preset: String,
    pub rows: Vec<EvalReport>,
    pub metadata: BTreeMap<String, String>,
}

impl ExperimentReport {
    pub fn row(&self, label: &str) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Long-format table: `label, metric, key, value`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("label\tmetric\tkey\tvalue\n");
        for r in &self.rows {
            for (n, v) in &r.recall_at {
                s.push_str(&format!("{}\trecall\t{n}\t{v}\n", r.label));
            }
            for (e, v) in r.loss_curve.iter().enumerate() {
                s.push_str(&format!("{}\tloss\t{}\t{v}\n", r.label, e + 1));
            }
            for (e, v) in r.epoch_seconds.iter().enumerate() {
                s.push_str(&format!("{}\tseconds\t{}\t{v}\n", r.label, e + 1));
            }
        }
        s
    }

    /// Writes `<stem>.json` and `<stem>.tsv` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (ext, body) in [("json", self.to_json()), ("tsv", self.to_tsv())] {
            let path = dir.join(format!("{stem}.{ext}"));
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// The frozen planted-preference data, preprocessed with `cfg`'s filters.
pub fn synthetic_dataset(cfg: &RunConfig) -> Result<Dataset> {
    preprocess(&SyntheticConfig::frozen().generate(), &cfg.preprocess)
}

/// The bundled 30-interaction fixture, preprocessed with `cfg`'s filters.
pub fn fixture_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let raw = parse_reader(FIXTURE.as_bytes(), LogFormat::default())?;
    preprocess(&raw, &cfg.preprocess)
}

fn metadata(cfg: &RunConfig, ds: &Dataset) -> BTreeMap<String, String> {
    let mut m: BTreeMap<String, String> = REFERENCE.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    m.insert(
        "reference.note".into(),
        "published full-dataset results, recorded for comparison and not reproduced".into(),
    );
    for (k, v) in cfg.entries() {
        m.insert(format!("config.{k}"), v);
    }
    let st = ds.stats();
    m.insert("data.items".into(), st.items.to_string());
    m.insert("data.train_sessions".into(), st.train_sessions.to_string());
    m.insert("data.test_sessions".into(), st.test_sessions.to_string());
    m.insert("data.users".into(), st.users.to_string());
    m.insert("data.vocab_hash".into(), ds.vocab_hash());
    m
}

fn variant(base: &RunConfig, f: impl FnOnce(&mut RunConfig)) -> RunConfig {
    let mut c = base.clone();
    f(&mut c);
    c
}

fn baselines(ds: &Dataset, cfg: &RunConfig, rows: &mut Vec<EvalReport>) -> Result<()> {
    rows.push(evaluate_baseline(&Popularity::fit(ds), ds, cfg, "popularity")?);
    rows.push(evaluate_baseline(&Markov::fit(ds), ds, cfg, "markov")?);
    Ok(())
}

/// Runs one preset on top of `base`. The fixture preset reads the bundled
/// log; every other preset uses the planted-preference data.
pub fn run_experiment(name: &str, base: &RunConfig) -> Result<ExperimentReport> {
    base.validate()?;
    let ds = match name {
        "mini-fixture" => fixture_dataset(base)?,
        n if PRESETS.contains(&n) => synthetic_dataset(base)?,
        other => {
            return Err(Error::Config(format!(
                "unknown experiment {other:?}; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    };
    let mut rows = Vec::new();
    let mut cfg = base.clone();
    match name {
        "synthetic-planted" | "mini-fixture" => {
            rows.push(train_and_evaluate(&ds, &cfg, "full")?);
            baselines(&ds, &cfg, &mut rows)?;
        }
        "ablation-suite" => {
            rows.push(train_and_evaluate(&ds, &cfg, "full")?);
            let no_sessions = variant(&cfg, |c| c.session_nodes = false);
            rows.push(train_and_evaluate(&ds, &no_sessions, "no-session-nodes")?);
            let no_het = variant(&cfg, |c| c.model.hetgnn = false);
            rows.push(train_and_evaluate(&ds, &no_het, "no-hetgnn")?);
        }
        "neighbor-sweep" => {
            for (slot, kind) in [(2, "k_user"), (0, "k_item"), (1, "k_session")] {
                for k in NEIGHBOR_SWEEP {
                    let c = variant(&cfg, |c| c.walk.caps[slot] = k);
                    rows.push(train_and_evaluate(&ds, &c, &format!("{kind}={k}"))?);
                }
            }
        }
        "lr-sweep" => {
            for lr in LR_SWEEP {
                let c = variant(&cfg, |c| c.lr = lr);
                rows.push(train_and_evaluate(&ds, &c, &format!("lr={lr}"))?);
            }
        }
        "topn-sweep" => {
            cfg.topn = TOPN_SWEEP.to_vec();
            rows.push(train_and_evaluate(&ds, &cfg, "full")?);
            let no_het = variant(&cfg, |c| c.model.hetgnn = false);
            rows.push(train_and_evaluate(&ds, &no_het, "no-hetgnn")?);
            baselines(&ds, &cfg, &mut rows)?;
        }
        _ => unreachable!("preset names checked above"),
    }
    let mut meta = metadata(&cfg, &ds);
    if name != "mini-fixture" {
        meta.insert("data.generator_version".into(), SyntheticConfig::frozen().version.to_string());
    }
    Ok(ExperimentReport {
        preset: name.to_string(),
        rows,
        metadata: meta,
    })
}
