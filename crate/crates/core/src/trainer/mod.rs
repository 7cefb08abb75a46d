//! Training loop, evaluation, baselines and experiment presets.

pub mod baselines;
pub mod eval;
pub mod experiments;
mod optim;
pub mod synthetic;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::dataio::{batch_iter, instances, Dataset, Instance};
use crate::diffcore::{checkpoint, Graph, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::hetgnn::{batch_loss, ModelConfig, ModelParams, Scorer};
use crate::hetgraph::{derive_seed, sample_all, HetGraph, NeighborSet, WalkConfig};
use crate::pretrain::{pretrain, EmbeddingTable};

pub use baselines::{Markov, Popularity};
pub use eval::{recall_at_n, target_rank, top_n, EvalReport, ItemScorer};
pub use optim::Adam;

/// Stream ids separating the generators derived from one run seed.
const STREAM_INIT: u64 = 1;
const STREAM_NEIGHBORS: u64 = 1 << 32;
const STREAM_BATCHES: u64 = 2 << 32;

/// Seed of the neighbor sample used in `epoch`.
pub fn neighbor_seed(seed: u64, epoch: usize) -> u64 {
    derive_seed(seed, STREAM_NEIGHBORS + epoch as u64)
}

/// Graph and pre-embeddings for a dataset.
pub fn build_inputs(ds: &Dataset, cfg: &RunConfig) -> Result<(HetGraph, EmbeddingTable)> {
    let graph = HetGraph::build(ds, cfg.session_nodes);
    let (pre, losses) = pretrain(&graph, cfg.walk_len, cfg.walks_per_node, &cfg.skipgram)?;
    log::info!(
        "pretrained {} nodes, skip-gram loss {:?}",
        graph.num_nodes(),
        losses.last()
    );
    Ok((graph, pre))
}

pub struct TrainedModel {
    pub store: ParamStore,
    pub params: ModelParams,
    pub model: ModelConfig,
    pub walk: WalkConfig,
    /// Neighbor sample scoring uses, the one of the final epoch.
    pub neighbor_seed: u64,
    pub loss_curve: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
}

fn fresh_params(d: usize, seed: u64) -> Result<(ParamStore, ModelParams)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_INIT));
    let mut store = ParamStore::new();
    let params = ModelParams::register(&mut store, d, &mut rng)?;
    Ok((store, params))
}

/// Mini-batch training with cross-entropy over all items. Neighbors are
/// resampled at the start of each epoch. A non-finite loss aborts with the
/// epoch and batch index.
pub fn train(ds: &Dataset, graph: &HetGraph, pre: &EmbeddingTable, cfg: &RunConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    if pre.d() != cfg.model.d {
        return Err(Error::Mismatch(format!(
            "pre-embeddings have width {}, configuration asks for {}",
            pre.d(),
            cfg.model.d
        )));
    }
    let (mut store, params) = fresh_params(cfg.model.d, cfg.seed)?;
    let trainable = if cfg.model.hetgnn {
        params.all_ids()
    } else {
        params.session_ids()
    };
    let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut epoch_seconds = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let walk = WalkConfig {
            seed: neighbor_seed(cfg.seed, epoch),
            ..cfg.walk.clone()
        };
        let neighbors = if cfg.model.hetgnn {
            sample_all(graph, &walk)?
        } else {
            vec![NeighborSet::default(); ds.num_items()]
        };
        let batches = batch_iter(ds, cfg.batch_size, derive_seed(cfg.seed, STREAM_BATCHES + epoch as u64), cfg.instances)?;
        let mut total = 0.0;
        let mut count = 0usize;
        for (b, batch) in batches.enumerate() {
            let mut g = Graph::new();
            let prefixes = batch.prefixes();
            let annotate = |e: Error| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} (epoch {}, batch {b})", epoch + 1)),
                other => other,
            };
            let loss = batch_loss(&mut g, &store, &params, &cfg.model, pre, &neighbors, &prefixes, &batch.targets)
                .map_err(annotate)?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("loss (epoch {}, batch {b})", epoch + 1)));
            }
            let grads = g.backward(loss).map_err(annotate)?;
            adam.step(&mut store, &grads, &trainable);
            total += value * batch.len() as f64;
            count += batch.len();
        }
        let mean = total / count as f64;
        let secs = started.elapsed().as_secs_f64();
        log::info!("epoch {}: loss {mean:.6} ({secs:.2}s)", epoch + 1);
        loss_curve.push(mean);
        epoch_seconds.push(secs);
    }
    Ok(TrainedModel {
        store,
        params,
        model: cfg.model.clone(),
        walk: cfg.walk.clone(),
        neighbor_seed: neighbor_seed(cfg.seed, cfg.epochs - 1),
        loss_curve,
        epoch_seconds,
    })
}

impl TrainedModel {
    pub fn neighbors(&self, graph: &HetGraph, n_items: usize) -> Result<Vec<NeighborSet>> {
        if !self.model.hetgnn {
            return Ok(vec![NeighborSet::default(); n_items]);
        }
        let walk = WalkConfig {
            seed: self.neighbor_seed,
            ..self.walk.clone()
        };
        sample_all(graph, &walk)
    }

    pub fn scorer<'a>(&'a self, graph: &HetGraph, pre: &EmbeddingTable) -> Result<ModelScorer<'a>> {
        let neighbors = self.neighbors(graph, pre.rows(crate::hetgraph::NodeKind::Item))?;
        Ok(ModelScorer {
            inner: Scorer::new(&self.store, &self.params, &self.model, pre, &neighbors)?,
        })
    }

    /// Writes `model.ckpt` and the `model.manifest` key=value file.
    pub fn save(&self, dir: &Path, vocab_hash: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(&self.store, &dir.join("model.ckpt"))?;
        let caps = self.walk.caps;
        let curve: Vec<String> = self.loss_curve.iter().map(|x| format!("{x:e}")).collect();
        let manifest = [
            ("vocab_hash", vocab_hash.to_string()),
            ("d", self.model.d.to_string()),
            ("hetgnn", self.model.hetgnn.to_string()),
            ("normalize_session_attention", self.model.normalize_session_attention.to_string()),
            ("restart_prob", self.walk.restart_prob.to_string()),
            ("rwr_list_len", self.walk.rwr_list_len.to_string()),
            ("k_item", caps[0].to_string()),
            ("k_session", caps[1].to_string()),
            ("k_user", caps[2].to_string()),
            ("neighbor_seed", self.neighbor_seed.to_string()),
            ("loss_curve", curve.join(",")),
        ];
        let text: String = manifest.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        let path = dir.join("model.manifest");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Loads a saved model, failing when its vocabulary hash differs from
    /// `vocab_hash`.
    pub fn load(dir: &Path, vocab_hash: &str) -> Result<Self> {
        let path = dir.join("model.manifest");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let kv: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::Corrupt(format!("model manifest lacks {k}")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Corrupt(format!("model manifest: bad {k}")))
        }
        let stored = get("vocab_hash")?;
        if stored != vocab_hash {
            return Err(Error::Mismatch(format!(
                "model was trained on vocabulary {stored}, dataset has {vocab_hash}"
            )));
        }
        let d: usize = num("d", get("d")?)?;
        let model = ModelConfig {
            d,
            hetgnn: num("hetgnn", get("hetgnn")?)?,
            normalize_session_attention: num("normalize_session_attention", get("normalize_session_attention")?)?,
        };
        let walk = WalkConfig {
            restart_prob: num("restart_prob", get("restart_prob")?)?,
            rwr_list_len: num("rwr_list_len", get("rwr_list_len")?)?,
            caps: [
                num("k_item", get("k_item")?)?,
                num("k_session", get("k_session")?)?,
                num("k_user", get("k_user")?)?,
            ],
            seed: 0,
        };
        let loss_curve = match get("loss_curve")? {
            "" => Vec::new(),
            s => s.split(',').map(|x| num("loss_curve", x)).collect::<Result<_>>()?,
        };
        let (mut store, params) = fresh_params(d, 0)?;
        store.load_from(&checkpoint::load(&dir.join("model.ckpt"))?)?;
        Ok(TrainedModel {
            store,
            params,
            model,
            walk,
            neighbor_seed: num("neighbor_seed", get("neighbor_seed")?)?,
            loss_curve,
            epoch_seconds: Vec::new(),
        })
    }
}

/// Trained model with item embeddings computed once.
pub struct ModelScorer<'a> {
    inner: Scorer<'a>,
}

impl ModelScorer<'_> {
    pub fn item_embeddings(&self) -> &Tensor {
        self.inner.item_embeddings()
    }
}

impl ItemScorer for ModelScorer<'_> {
    fn num_items(&self) -> usize {
        self.inner.item_embeddings().rows()
    }

    fn scores(&self, batch: &[Instance]) -> Result<Vec<Vec<f64>>> {
        let prefixes: Vec<&[usize]> = batch.iter().map(|i| i.prefix.as_slice()).collect();
        self.inner.logits(&prefixes)
    }
}

/// Test instances under the configured instance mode.
pub fn test_instances(ds: &Dataset, cfg: &RunConfig) -> Vec<Instance> {
    instances(&ds.test, cfg.instances)
}

/// Full pipeline on a prepared dataset: graph, pre-embeddings, training and
/// evaluation at every `cfg.topn`.
pub fn train_and_evaluate(ds: &Dataset, cfg: &RunConfig, label: &str) -> Result<EvalReport> {
    let (graph, pre) = build_inputs(ds, cfg)?;
    train_and_evaluate_with(ds, &graph, &pre, cfg, label)
}

/// Training and evaluation on an existing graph and pre-embedding table.
pub fn train_and_evaluate_with(
    ds: &Dataset,
    graph: &HetGraph,
    pre: &EmbeddingTable,
    cfg: &RunConfig,
    label: &str,
) -> Result<EvalReport> {
    let model = train(ds, graph, pre, cfg)?;
    let scorer = model.scorer(graph, pre)?;
    let recall_at = recall_at_n(&scorer, &test_instances(ds, cfg), &cfg.topn)?;
    Ok(EvalReport {
        label: label.to_string(),
        recall_at,
        loss_curve: model.loss_curve.clone(),
        epoch_seconds: if cfg.deterministic { Vec::new() } else { model.epoch_seconds.clone() },
    })
}

/// Evaluates an untrained scorer such as a baseline.
pub fn evaluate_baseline(scorer: &dyn ItemScorer, ds: &Dataset, cfg: &RunConfig, label: &str) -> Result<EvalReport> {
    Ok(EvalReport {
        label: label.to_string(),
        recall_at: recall_at_n(scorer, &test_instances(ds, cfg), &cfg.topn)?,
        loss_curve: Vec::new(),
        epoch_seconds: Vec::new(),
    })
}
