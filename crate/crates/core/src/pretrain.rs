//! DeepWalk pre-embeddings: uniform random walks over the heterogeneous graph
//! and skip-gram training with negative sampling.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::hetgraph::{derive_seed, HetGraph, NodeKind};

const MAGIC: &[u8; 4] = b"SHEM";
const VERSION: u32 = 1;

/// Walks over flat node ids (items, then sessions, then users).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WalkCorpus {
    pub walks: Vec<Vec<usize>>,
    pub num_nodes: usize,
}

impl WalkCorpus {
    pub fn num_tokens(&self) -> usize {
        self.walks.iter().map(Vec::len).sum()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for w in &self.walks {
            let ids: Vec<String> = w.iter().map(usize::to_string).collect();
            s.push_str(&ids.join(" "));
            s.push('\n');
        }
        s
    }
}

/// `walks_per_node` walks of `length` nodes from every node; each walk step
/// moves to a uniform neighbor. Isolated nodes give walks of length 1.
pub fn generate_walks(g: &HetGraph, length: usize, walks_per_node: usize, seed: u64) -> Result<WalkCorpus> {
    if length < 2 {
        return Err(Error::Config("walk length must be >= 2".into()));
    }
    let per_node: Vec<Vec<Vec<usize>>> = (0..g.num_nodes())
        .into_par_iter()
        .map(|start| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, start as u64));
            (0..walks_per_node)
                .map(|_| {
                    let mut walk = vec![start];
                    let mut cur = start;
                    while walk.len() < length {
                        let adj = g.walk_neighbors(cur);
                        if adj.is_empty() {
                            break;
                        }
                        cur = adj[rng.gen_range(0..adj.len())];
                        walk.push(cur);
                    }
                    walk
                })
                .collect()
        })
        .collect();
    Ok(WalkCorpus {
        walks: per_node.into_iter().flatten().collect(),
        num_nodes: g.num_nodes(),
    })
}

/// Ordered `(center, context)` pairs within `window` positions.
pub fn positive_pairs(walk: &[usize], window: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, &c) in walk.iter().enumerate() {
        let lo = i.saturating_sub(window);
        let hi = (i + window).min(walk.len() - 1);
        for (j, &ctx) in walk.iter().enumerate().take(hi + 1).skip(lo) {
            if j != i {
                out.push((c, ctx));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkipGramConfig {
    pub d: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig {
            d: 64,
            window: 5,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            seed: 0,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Negative-sampling loss of one pair,
/// `-log σ(u·v) - Σ_n log σ(-u·v_n)`, with its gradients with respect to
/// `u`, `v` and each `v_n`.
pub fn pair_loss_grad(u: &[f64], v: &[f64], negs: &[&[f64]]) -> (f64, Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
    let s = sigmoid(dot(u, v));
    let mut loss = -s.max(1e-300).ln();
    let mut gu: Vec<f64> = v.iter().map(|x| (s - 1.0) * x).collect();
    let gv: Vec<f64> = u.iter().map(|x| (s - 1.0) * x).collect();
    let mut gn = Vec::with_capacity(negs.len());
    for n in negs {
        let sn = sigmoid(dot(u, n));
        loss -= (1.0 - sn).max(1e-300).ln();
        for (g, x) in gu.iter_mut().zip(n.iter()) {
            *g += sn * x;
        }
        gn.push(u.iter().map(|x| sn * x).collect());
    }
    (loss, gu, gv, gn)
}

/// In-place SGD step on one positive pair and its negatives, the same update
/// [`pair_loss_grad`] describes. `gu` is scratch space of width `d`.
fn sgd_pair(u: &mut [f64], output: &mut [f64], d: usize, ctx: usize, negs: &[usize], lr: f64, gu: &mut [f64]) -> f64 {
    let mut loss = 0.0;
    gu.fill(0.0);
    for (j, &k) in std::iter::once(&ctx).chain(negs).enumerate() {
        let row = &mut output[k * d..(k + 1) * d];
        let s = sigmoid(dot(u, row));
        let coef = if j == 0 {
            loss -= s.max(1e-300).ln();
            s - 1.0
        } else {
            loss -= (1.0 - s).max(1e-300).ln();
            s
        };
        for ((g, x), ui) in gu.iter_mut().zip(row.iter_mut()).zip(u.iter()) {
            *g += coef * *x;
            *x -= lr * coef * ui;
        }
    }
    for (x, g) in u.iter_mut().zip(gu.iter()) {
        *x -= lr * g;
    }
    loss
}

/// Per-kind embedding matrices of a common width.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    d: usize,
    tables: [Tensor; 3],
}

impl EmbeddingTable {
    pub fn new(d: usize, tables: [Tensor; 3]) -> Result<Self> {
        for t in &tables {
            if t.rank() != 2 || t.cols() != d {
                return Err(Error::Shape(format!("embedding table {:?} is not n x {d}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite("embedding table".into()));
            }
        }
        Ok(EmbeddingTable { d, tables })
    }

    /// Splits a flat-id matrix into per-kind tables using the graph's counts.
    pub fn from_flat(g: &HetGraph, d: usize, data: &[f64]) -> Result<Self> {
        if data.len() != g.num_nodes() * d {
            return Err(Error::Shape(format!("{} values for {} nodes of width {d}", data.len(), g.num_nodes())));
        }
        let mut tables = Vec::with_capacity(3);
        let mut start = 0;
        for k in NodeKind::ALL {
            let n = g.count(k);
            tables.push(Tensor::matrix(n, d, data[start * d..(start + n) * d].to_vec())?);
            start += n;
        }
        let tables: [Tensor; 3] = tables.try_into().expect("three kinds");
        Self::new(d, tables)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn rows(&self, kind: NodeKind) -> usize {
        self.tables[kind.ordinal()].rows()
    }

    pub fn row(&self, kind: NodeKind, index: usize) -> &[f64] {
        self.tables[kind.ordinal()].row_slice(index)
    }

    pub fn matrix(&self, kind: NodeKind) -> &Tensor {
        &self.tables[kind.ordinal()]
    }

    pub fn max_row_norm(&self) -> f64 {
        self.tables
            .iter()
            .flat_map(|t| (0..t.rows()).map(move |r| dot(t.row_slice(r), t.row_slice(r)).sqrt()))
            .fold(0.0, f64::max)
    }

    /// Rounds every entry to single precision, the persisted precision.
    pub fn quantize(&mut self) {
        for t in &mut self.tables {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Little-endian binary: magic, version, vocabulary hash, then one
    /// section per kind of `kind: u8, rows: u32, d: u32` and row-major f32s.
    pub fn encode(&self, vocab_hash: &str) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(vocab_hash.len() as u32).to_le_bytes());
        out.extend_from_slice(vocab_hash.as_bytes());
        for kind in NodeKind::ALL {
            let t = &self.tables[kind.ordinal()];
            out.push(kind.ordinal() as u8);
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(self.d as u32).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Returns the table and its vocabulary hash.
    pub fn decode(bytes: &[u8]) -> Result<(Self, String)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Corrupt("not an embedding file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Corrupt(format!("unsupported embedding version {version}")));
        }
        let hlen = r.u32()? as usize;
        let hash = String::from_utf8(r.take(hlen)?.to_vec())
            .map_err(|_| Error::Corrupt("vocabulary hash is not utf-8".into()))?;
        let mut tables: Vec<Tensor> = Vec::new();
        let mut d = 0;
        for kind in NodeKind::ALL {
            let k = r.take(1)?[0] as usize;
            if k != kind.ordinal() {
                return Err(Error::Corrupt(format!("expected section {kind}, found {k}")));
            }
            let rows = r.u32()? as usize;
            d = r.u32()? as usize;
            let data = r.take(rows * d * 4)?;
            let vals = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tables.push(Tensor::matrix(rows, d, vals)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt("trailing bytes after embedding tables".into()));
        }
        let tables: [Tensor; 3] = tables.try_into().expect("three sections");
        Ok((Self::new(d, tables)?, hash))
    }

    pub fn save(&self, path: &Path, vocab_hash: &str) -> Result<()> {
        fs::write(path, self.encode(vocab_hash)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// One `kind:index v1 v2 ...` line per node.
    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for kind in NodeKind::ALL {
            let t = &self.tables[kind.ordinal()];
            for r in 0..t.rows() {
                s.push_str(&format!("{kind}:{r}"));
                for v in t.row_slice(r) {
                    s.push_str(&format!(" {}", *v as f32));
                }
                s.push('\n');
            }
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt("embedding file truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[derive(Clone, Debug)]
pub struct SkipGram {
    /// Input vectors, `num_nodes x d`, flat.
    pub input: Vec<f64>,
    /// Mean pair loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Entries of the noise lookup table.
const NOISE_TABLE_LEN: usize = 1 << 20;

/// Lookup table holding node ids in proportion to `freq^0.75`, so drawing a
/// noise node is one uniform index.
fn noise_table(freq: &[f64]) -> Vec<u32> {
    let weights: Vec<f64> = freq.iter().map(|f| f.powf(0.75)).collect();
    let total: f64 = weights.iter().sum();
    let mut table = Vec::with_capacity(NOISE_TABLE_LEN);
    let mut cum = 0.0;
    for (v, w) in weights.iter().enumerate() {
        cum += w;
        let end = ((cum / total) * NOISE_TABLE_LEN as f64).round() as usize;
        while table.len() < end.min(NOISE_TABLE_LEN) {
            table.push(v as u32);
        }
    }
    table
}

/// Trains input and output vectors by SGD over all window pairs, visiting
/// walks in a fresh random order each epoch. Noise nodes are drawn from the
/// corpus unigram distribution raised to 0.75; the learning rate decays
/// linearly to nearly zero over the run.
pub fn skipgram_train(corpus: &WalkCorpus, cfg: &SkipGramConfig) -> Result<SkipGram> {
    if cfg.d == 0 {
        return Err(Error::Config("embedding dimension must be >= 1".into()));
    }
    if cfg.window == 0 || cfg.epochs == 0 || cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(Error::Config("window, epochs and lr must be positive".into()));
    }
    let num_pairs: usize = corpus.walks.iter().map(|w| positive_pairs(w, cfg.window).len()).sum();
    if num_pairs == 0 {
        return Err(Error::Data("walk corpus yields no training pairs".into()));
    }
    let n = corpus.num_nodes;
    let d = cfg.d;
    let mut freq = vec![0.0f64; n];
    for w in &corpus.walks {
        for &v in w {
            freq[v] += 1.0;
        }
    }
    let can_draw_negatives = freq.iter().filter(|&&f| f > 0.0).count() >= 2;
    let noise = noise_table(&freq);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut input: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-0.5..0.5) / d as f64).collect();
    let mut output = vec![0.0f64; n * d];
    let total = (cfg.epochs * num_pairs) as f64;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..corpus.walks.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut negs = Vec::with_capacity(cfg.negatives);
    let mut gu = vec![0.0; d];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for &w in &order {
            let walk = &corpus.walks[w];
            for (i, &c) in walk.iter().enumerate() {
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window).min(walk.len() - 1);
                for (j, &ctx) in walk.iter().enumerate().take(hi + 1).skip(lo) {
                    if j == i {
                        continue;
                    }
                    let lr = cfg.lr * (1.0 - step as f64 / total).max(1e-4);
                    step += 1;
                    negs.clear();
                    while can_draw_negatives && negs.len() < cfg.negatives {
                        let k = noise[rng.gen_range(0..noise.len())] as usize;
                        if k != ctx {
                            negs.push(k);
                        }
                    }
                    sum += sgd_pair(&mut input[c * d..(c + 1) * d], &mut output, d, ctx, &negs, lr, &mut gu);
                }
            }
        }
        let mean = sum / num_pairs as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite("skip-gram loss".into()));
        }
        epoch_loss.push(mean);
    }
    Ok(SkipGram { input, epoch_loss })
}

/// Walk generation plus skip-gram, returning per-kind tables rounded to the
/// persisted precision.
pub fn pretrain(g: &HetGraph, walk_len: usize, walks_per_node: usize, cfg: &SkipGramConfig) -> Result<(EmbeddingTable, Vec<f64>)> {
    let corpus = generate_walks(g, walk_len, walks_per_node, cfg.seed)?;
    let sg = skipgram_train(&corpus, cfg)?;
    let mut table = EmbeddingTable::from_flat(g, cfg.d, &sg.input)?;
    table.quantize();
    Ok((table, sg.epoch_loss))
}
