//! `sesshet`: staged command-line pipeline for session-based next-item
//! recommendation.
//!
//! Every stage reads its inputs from and writes its outputs to directories
//! under the data root (`--data-dir`, or `SESSHET_DATA_DIR`), and leaves the
//! fully resolved configuration as `config.txt` beside its outputs. A stage's
//! configuration starts from `--config` when given, else from the
//! `config.txt` of its upstream artifact, else from the preset defaults;
//! flags override it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use sesshet::config::{Preset, RunConfig};
use sesshet::dataio::{parse_log, preprocess, Dataset, Instance, LogFormat};
use sesshet::hetgnn::probabilities;
use sesshet::hetgraph::{sample_all, HetGraph, NodeKind, NodeRef};
use sesshet::pretrain::{pretrain, EmbeddingTable};
use sesshet::trainer::experiments::{run_experiment, ExperimentReport, PRESETS};
use sesshet::trainer::{
    evaluate_baseline, recall_at_n, test_instances, top_n, train, EvalReport, ItemScorer, Markov, Popularity,
    TrainedModel,
};
use sesshet::Error;

const CONFIG_FILE: &str = "config.txt";
const EMBEDDINGS_FILE: &str = "embeddings.bin";

#[derive(Parser)]
#[command(name = "sesshet", version, about = "Session-based recommendation with a heterogeneous graph neural network")]
struct Cli {
    /// Root directory for artifacts.
    #[arg(long, env = "SESSHET_DATA_DIR", default_value = "sesshet-data", global = true)]
    data_dir: PathBuf,

    #[command(flatten)]
    run: RunFlags,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct RunFlags {
    /// key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra configuration override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// diginetica, tmall or synthetic.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Embedding dimension (even).
    #[arg(long, global = true)]
    d: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// Restart probability of the neighbor-sampling walk.
    #[arg(long, global = true)]
    restart_prob: Option<f64>,
    #[arg(long, global = true)]
    k_user: Option<usize>,
    #[arg(long, global = true)]
    k_item: Option<usize>,
    #[arg(long, global = true)]
    k_session: Option<usize>,
    /// Leave session nodes out of the graph.
    #[arg(long, global = true)]
    no_session_nodes: bool,
    /// Use the pre-embeddings as item embeddings and train only the session layers.
    #[arg(long, global = true)]
    no_hetgnn: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded numerics and no wall-clock figures in reports.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Comma-separated cutoffs for Recall@n.
    #[arg(long, global = true)]
    topn: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Clean, segment and split an interaction log into a dataset directory.
    Prepare {
        /// Log of `user,item,session,timestamp` rows.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = ',')]
        delimiter: char,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the heterogeneous graph and one neighbor sample as text.
    Graph {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random walks and skip-gram pre-embeddings for every node.
    Pretrain {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the recommender on the dataset's training sessions.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recall@n of a trained model or a baseline on the test sessions.
    Eval {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// popularity or markov instead of the trained model.
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-n next items for a session prefix.
    Recommend {
        /// Comma-separated item ids, oldest first.
        #[arg(long)]
        prefix: String,
        #[arg(short, long, default_value_t = 10)]
        n: usize,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Run a named experiment preset end to end.
    Experiment {
        /// One of synthetic-planted, mini-fixture, ablation-suite,
        /// neighbor-sweep, lr-sweep, topn-sweep.
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the resolved configuration.
    Config,
}

/// Usage errors exit with 1, data errors with 2 and numeric failures with 3.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NonFinite(_)) => 3,
        Some(Error::Config(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if cli.run.deterministic {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(1).build_global() {
            log::warn!("could not pin the thread pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

impl RunFlags {
    /// Base configuration plus every override.
    fn resolve(&self, upstream: Option<&Path>, default_preset: Preset) -> Result<RunConfig> {
        let mut cfg = if let Some(path) = &self.config {
            RunConfig::load(path)?
        } else if let Some(file) = upstream.map(|d| d.join(CONFIG_FILE)).filter(|f| f.exists()) {
            RunConfig::load(&file).with_context(|| format!("reading {}", file.display()))?
        } else {
            RunConfig::preset(default_preset)
        };
        if let Some(p) = &self.preset {
            if *p != cfg.preset.to_string() {
                cfg.set("preset", p)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let numeric: [(&str, Option<String>); 9] = [
            ("d", self.d.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("restart_prob", self.restart_prob.map(|v| v.to_string())),
            ("k_user", self.k_user.map(|v| v.to_string())),
            ("k_item", self.k_item.map(|v| v.to_string())),
            ("k_session", self.k_session.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
        ];
        for (k, v) in numeric {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        if let Some(t) = &self.topn {
            cfg.set("topn", t)?;
        }
        if self.no_session_nodes {
            cfg.session_nodes = false;
        }
        if self.no_hetgnn {
            cfg.model.hetgnn = false;
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    cfg.save(&dir.join(CONFIG_FILE))?;
    Ok(())
}

struct Dirs {
    root: PathBuf,
}

impl Dirs {
    fn or(&self, given: &Option<PathBuf>, name: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.root.join(name))
    }
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

/// Pre-embeddings whose vocabulary and node counts match the dataset graph.
fn load_pretrained(dir: &Path, ds: &Dataset, graph: &HetGraph) -> Result<EmbeddingTable> {
    let path = dir.join(EMBEDDINGS_FILE);
    let (table, hash) = EmbeddingTable::load(&path).with_context(|| format!("loading {}", path.display()))?;
    if hash != ds.vocab_hash() {
        return Err(Error::Mismatch(format!(
            "{} was built for vocabulary {hash}, dataset has {}",
            path.display(),
            ds.vocab_hash()
        ))
        .into());
    }
    for kind in NodeKind::ALL {
        if table.rows(kind) != graph.count(kind) {
            return Err(Error::Mismatch(format!(
                "{} has {} {kind} rows, graph has {}; was it built with other session-node settings?",
                path.display(),
                table.rows(kind),
                graph.count(kind)
            ))
            .into());
        }
    }
    Ok(table)
}

fn baseline(name: &str, ds: &Dataset) -> Result<Box<dyn ItemScorer>> {
    match name {
        "popularity" => Ok(Box::new(Popularity::fit(ds))),
        "markov" => Ok(Box::new(Markov::fit(ds))),
        other => Err(Error::Config(format!("unknown baseline {other:?}; expected popularity or markov")).into()),
    }
}

fn print_recall(report: &EvalReport) {
    for (n, r) in &report.recall_at {
        println!("{}\tRecall@{n}\t{r:.6}", report.label);
    }
}

fn run(cli: Cli) -> Result<()> {
    let dirs = Dirs { root: cli.data_dir };
    let flags = &cli.run;
    match cli.command {
        Command::Config => {
            let cfg = flags.resolve(None, Preset::Diginetica)?;
            print!("{}", cfg.to_text());
        }
        Command::Prepare { input, delimiter, out } => {
            let out = dirs.or(&out, "dataset");
            let cfg = flags.resolve(None, Preset::Diginetica)?;
            let raw = parse_log(&input, LogFormat { delimiter })?;
            let ds = preprocess(&raw, &cfg.preprocess)?;
            ds.save(&out)?;
            write_config(&out, &cfg)?;
            print!("{}", ds.stats());
        }
        Command::Graph { dataset, out } => {
            let data_dir = dirs.or(&dataset, "dataset");
            let out = dirs.or(&out, "graph");
            let cfg = flags.resolve(Some(&data_dir), Preset::Diginetica)?;
            let ds = load_dataset(&data_dir)?;
            let graph = HetGraph::build(&ds, cfg.session_nodes);
            write_config(&out, &cfg)?;
            graph.write_text(&out.join("graph.txt"))?;
            let neighbors = sample_all(&graph, &cfg.walk)?;
            let mut text = String::new();
            for (i, ns) in neighbors.iter().enumerate() {
                for kind in NodeKind::ALL {
                    let refs: Vec<String> = ns.of(kind).iter().map(|&j| NodeRef { kind, index: j }.to_string()).collect();
                    text.push_str(&format!("{}\t{kind}\t{}\n", ds.items.id(i), refs.join(" ")));
                }
            }
            let path = out.join("neighbors.txt");
            fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
            println!(
                "nodes={} items={} sessions={} users={}",
                graph.num_nodes(),
                graph.count(NodeKind::Item),
                graph.count(NodeKind::Session),
                graph.count(NodeKind::User)
            );
        }
        Command::Pretrain { dataset, out } => {
            let data_dir = dirs.or(&dataset, "dataset");
            let out = dirs.or(&out, "pretrain");
            let cfg = flags.resolve(Some(&data_dir), Preset::Diginetica)?;
            let ds = load_dataset(&data_dir)?;
            let graph = HetGraph::build(&ds, cfg.session_nodes);
            let (table, losses) = pretrain(&graph, cfg.walk_len, cfg.walks_per_node, &cfg.skipgram)?;
            write_config(&out, &cfg)?;
            table.save(&out.join(EMBEDDINGS_FILE), &ds.vocab_hash())?;
            for (e, l) in losses.iter().enumerate() {
                println!("skipgram epoch {}\tloss {l:.6}", e + 1);
            }
        }
        Command::Train { dataset, pretrained, out } => {
            let data_dir = dirs.or(&dataset, "dataset");
            let pre_dir = dirs.or(&pretrained, "pretrain");
            let out = dirs.or(&out, "model");
            let cfg = flags.resolve(Some(&pre_dir), Preset::Diginetica)?;
            let ds = load_dataset(&data_dir)?;
            let graph = HetGraph::build(&ds, cfg.session_nodes);
            let pre = load_pretrained(&pre_dir, &ds, &graph)?;
            let model = train(&ds, &graph, &pre, &cfg)?;
            write_config(&out, &cfg)?;
            model.save(&out, &ds.vocab_hash())?;
            for (e, l) in model.loss_curve.iter().enumerate() {
                println!("epoch {}\tloss {l:.6}", e + 1);
            }
        }
        Command::Eval {
            dataset,
            pretrained,
            model,
            baseline: base,
            out,
        } => {
            let data_dir = dirs.or(&dataset, "dataset");
            let model_dir = dirs.or(&model, "model");
            let out = dirs.or(&out, "eval");
            let upstream = if base.is_some() { &data_dir } else { &model_dir };
            let cfg = flags.resolve(Some(upstream), Preset::Diginetica)?;
            let ds = load_dataset(&data_dir)?;
            let report = match &base {
                Some(name) => evaluate_baseline(baseline(name, &ds)?.as_ref(), &ds, &cfg, name)?,
                None => {
                    let graph = HetGraph::build(&ds, cfg.session_nodes);
                    let pre = load_pretrained(&dirs.or(&pretrained, "pretrain"), &ds, &graph)?;
                    let trained = TrainedModel::load(&model_dir, &ds.vocab_hash())?;
                    let scorer = trained.scorer(&graph, &pre)?;
                    EvalReport {
                        label: "model".into(),
                        recall_at: recall_at_n(&scorer, &test_instances(&ds, &cfg), &cfg.topn)?,
                        loss_curve: trained.loss_curve.clone(),
                        epoch_seconds: Vec::new(),
                    }
                }
            };
            let mut metadata: BTreeMap<String, String> =
                cfg.entries().into_iter().map(|(k, v)| (format!("config.{k}"), v)).collect();
            metadata.insert("data.vocab_hash".into(), ds.vocab_hash());
            metadata.insert("data.test_instances".into(), test_instances(&ds, &cfg).len().to_string());
            print_recall(&report);
            let doc = ExperimentReport {
                preset: "eval".into(),
                rows: vec![report],
                metadata,
            };
            write_config(&out, &cfg)?;
            doc.save(&out, "report")?;
        }
        Command::Recommend {
            prefix,
            n,
            dataset,
            pretrained,
            model,
            baseline: base,
        } => {
            let data_dir = dirs.or(&dataset, "dataset");
            let model_dir = dirs.or(&model, "model");
            let upstream = if base.is_some() { &data_dir } else { &model_dir };
            let cfg = flags.resolve(Some(upstream), Preset::Diginetica)?;
            let ds = load_dataset(&data_dir)?;
            let items = prefix
                .split(',')
                .map(|id| {
                    let id = id.trim();
                    ds.items
                        .get(id)
                        .ok_or_else(|| Error::Data(format!("item {id:?} is not in the dataset vocabulary")))
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            if items.is_empty() {
                return Err(Error::Config("--prefix needs at least one item".into()).into());
            }
            let inst = Instance {
                user: 0,
                prefix: items,
                target: 0,
            };
            let scores = match &base {
                Some(name) => baseline(name, &ds)?.scores(std::slice::from_ref(&inst))?.remove(0),
                None => {
                    let graph = HetGraph::build(&ds, cfg.session_nodes);
                    let pre = load_pretrained(&dirs.or(&pretrained, "pretrain"), &ds, &graph)?;
                    let trained = TrainedModel::load(&model_dir, &ds.vocab_hash())?;
                    let logits = trained.scorer(&graph, &pre)?.scores(std::slice::from_ref(&inst))?.remove(0);
                    probabilities(&logits)
                }
            };
            for i in top_n(&scores, n) {
                println!("{}\t{:.6}", ds.items.id(i), scores[i]);
            }
        }
        Command::Experiment { name, out } => {
            if !PRESETS.contains(&name.as_str()) {
                return Err(Error::Config(format!(
                    "unknown experiment {name:?}; expected one of {}",
                    PRESETS.join(", ")
                ))
                .into());
            }
            let default = if name == "mini-fixture" { Preset::Diginetica } else { Preset::Synthetic };
            let cfg = flags.resolve(None, default)?;
            let out = dirs.or(&out, "experiments");
            let report = run_experiment(&name, &cfg)?;
            write_config(&out, &cfg)?;
            report.save(&out, &name)?;
            for row in &report.rows {
                print_recall(row);
            }
        }
    }
    Ok(())
}
