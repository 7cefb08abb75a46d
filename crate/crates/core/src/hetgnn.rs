//! Item embeddings from heterogeneous neighbors and attention-based session
//! embeddings.
//!
//! Every node carries two attributes, its pre-embedding and a learned
//! embedding of its kind. Both pass through a shared affine layer and a
//! content BiLSTM with `d / 2` units per direction; the mean of its
//! concatenated outputs is `f1`. For an item, the `f1` vectors of its sampled
//! neighbors of each kind run through a per-kind BiLSTM and are averaged the
//! same way (`f2`). Type attention mixes
//! the available `f2` vectors and the item's own `f1` into its final embedding
//! (`f3`). Sessions are embedded from the final item embeddings of their
//! prefix and scored against every item by inner product.
//!
//! All matrices act on row vectors (`x W`), so every operation handles a
//! whole batch of nodes or sessions at once.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::diffcore::{
    bilstm_mean, Graph, LstmParams, ParamId, ParamStore, Tensor, Var, LEAKY_RELU_SLOPE,
};
use crate::error::{Error, Result};
use crate::hetgraph::{NeighborSet, NodeKind, NodeRef};
use crate::pretrain::EmbeddingTable;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    /// When false, item embeddings are the fixed item pre-embeddings and only
    /// the session layers train.
    pub hetgnn: bool,
    /// Softmax-normalize the session attention weights within each prefix.
    pub normalize_session_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            hetgnn: true,
            normalize_session_attention: false,
        }
    }
}

/// Ids of a bias-carrying `in x out` linear map.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn register(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Linear {
            w: store.add(format!("{name}.w"), Tensor::glorot(input, output, rng))?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[1, output]))?,
        })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w)?;
        let b = g.param(store, self.b)?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub d: usize,
    pub kind_tag: ParamId,
    pub fc: Linear,
    pub content_fwd: LstmParams,
    pub content_bwd: LstmParams,
    pub type_fwd: [LstmParams; 3],
    pub type_bwd: [LstmParams; 3],
    /// Type attention vector, `1 x 2d`.
    pub att_u: ParamId,
    /// Session attention output vector, `d x 1`.
    pub sess_w: ParamId,
    pub sess_w1: ParamId,
    pub sess_w2: ParamId,
    pub sess_c: ParamId,
    /// Fusion of `[s_l | s_g]`, `2d x d`.
    pub w3: ParamId,
}

impl ModelParams {
    pub fn register(store: &mut ParamStore, d: usize, rng: &mut impl Rng) -> Result<Self> {
        if d == 0 || !d.is_multiple_of(2) {
            return Err(Error::Config(format!("model dimension must be even and >= 2, got {d}")));
        }
        let h = d / 2;
        let kind_tag = store.add("kind_tag", Tensor::glorot(3, d, rng))?;
        let fc = Linear::register(store, "fc", d, d, rng)?;
        let content_fwd = LstmParams::register(store, "content.fwd", d, h, rng)?;
        let content_bwd = LstmParams::register(store, "content.bwd", d, h, rng)?;
        let mut fwd = Vec::new();
        let mut bwd = Vec::new();
        for kind in NodeKind::ALL {
            fwd.push(LstmParams::register(store, &format!("type.{kind}.fwd"), d, h, rng)?);
            bwd.push(LstmParams::register(store, &format!("type.{kind}.bwd"), d, h, rng)?);
        }
        let att_u = store.add("att.u", Tensor::glorot(1, 2 * d, rng))?;
        let sess_w = store.add("session.w", Tensor::glorot(d, 1, rng))?;
        let sess_w1 = store.add("session.w1", Tensor::glorot(d, d, rng))?;
        let sess_w2 = store.add("session.w2", Tensor::glorot(d, d, rng))?;
        let sess_c = store.add("session.c", Tensor::zeros(&[1, d]))?;
        let w3 = store.add("session.w3", Tensor::glorot(2 * d, d, rng))?;
        Ok(ModelParams {
            d,
            kind_tag,
            fc,
            content_fwd,
            content_bwd,
            type_fwd: [fwd[0], fwd[1], fwd[2]],
            type_bwd: [bwd[0], bwd[1], bwd[2]],
            att_u,
            sess_w,
            sess_w1,
            sess_w2,
            sess_c,
            w3,
        })
    }

    /// Parameters of the neighbor aggregation stage.
    pub fn aggregation_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.kind_tag, self.fc.w, self.fc.b];
        ids.extend(self.content_fwd.ids());
        ids.extend(self.content_bwd.ids());
        for k in 0..3 {
            ids.extend(self.type_fwd[k].ids());
            ids.extend(self.type_bwd[k].ids());
        }
        ids.push(self.att_u);
        ids
    }

    /// Parameters of the session embedding stage.
    pub fn session_ids(&self) -> Vec<ParamId> {
        vec![self.sess_w, self.sess_w1, self.sess_w2, self.sess_c, self.w3]
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = self.aggregation_ids();
        ids.extend(self.session_ids());
        ids
    }
}

/// `f1` over a list of attribute matrices (each `n x d`, one row per node):
/// affine layer, content BiLSTM, mean over attributes.
pub fn aggregate_content(g: &mut Graph, store: &ParamStore, p: &ModelParams, attrs: &[Var]) -> Result<Var> {
    if attrs.is_empty() {
        return Err(Error::Shape("content aggregation needs at least one attribute".into()));
    }
    let seq = attrs
        .iter()
        .map(|&a| p.fc.apply(g, store, a))
        .collect::<Result<Vec<_>>>()?;
    bilstm_mean(g, store, &seq, &p.content_fwd, &p.content_bwd)
}

/// `f1` of the given nodes, one row each.
pub fn node_content(
    g: &mut Graph,
    store: &ParamStore,
    p: &ModelParams,
    pre: &EmbeddingTable,
    nodes: &[NodeRef],
) -> Result<Var> {
    let d = p.d;
    if pre.d() != d {
        return Err(Error::Shape(format!("pre-embeddings have width {}, model {d}", pre.d())));
    }
    let mut rows = Vec::with_capacity(nodes.len() * d);
    for n in nodes {
        if n.index >= pre.rows(n.kind) {
            return Err(Error::Shape(format!("{n} has no pre-embedding")));
        }
        rows.extend_from_slice(pre.row(n.kind, n.index));
    }
    let pre_attr = g.constant_matrix(nodes.len(), d, rows)?;
    let tags = g.param(store, p.kind_tag)?;
    let kinds: Vec<usize> = nodes.iter().map(|n| n.kind.ordinal()).collect();
    let tag_attr = g.gather_rows(tags, &kinds)?;
    aggregate_content(g, store, p, &[pre_attr, tag_attr])
}

/// `f2` for a batch of equal-length neighbor sequences: `seq[t]` holds the
/// `t`-th neighbor's `f1` row of every member.
pub fn aggregate_type(g: &mut Graph, store: &ParamStore, p: &ModelParams, kind: NodeKind, seq: &[Var]) -> Result<Var> {
    let k = kind.ordinal();
    bilstm_mean(g, store, seq, &p.type_fwd[k], &p.type_bwd[k])
}

/// Type attention. `candidates` are `n x d` matrices and `mask[i * m + j]`
/// tells whether candidate `j` exists for row `i`. Each logit is
/// `LeakyReLU(U [candidate | self])`; returns the `n x m` weights and the
/// weighted sum of candidates.
pub fn type_attention(
    g: &mut Graph,
    store: &ParamStore,
    p: &ModelParams,
    self_emb: Var,
    candidates: &[Var],
    mask: &[bool],
) -> Result<(Var, Var)> {
    let u = g.param(store, p.att_u)?;
    let mut logits = Vec::with_capacity(candidates.len());
    for &c in candidates {
        let pair = g.concat_cols(&[c, self_emb])?;
        let z = g.matmul_bt(pair, u)?;
        logits.push(g.leaky_relu(z, LEAKY_RELU_SLOPE)?);
    }
    let logits = g.concat_cols(&logits)?;
    let weights = g.masked_softmax(logits, mask)?;
    let mut acc: Option<Var> = None;
    for (j, &c) in candidates.iter().enumerate() {
        let a = g.slice_cols(weights, j, 1)?;
        let term = g.mul_col(c, a)?;
        acc = Some(match acc {
            None => term,
            Some(s) => g.add(s, term)?,
        });
    }
    Ok((weights, acc.expect("at least one candidate")))
}

/// Item embeddings and, when aggregation is on, the type attention weights
/// over `[item, session, user, self]` candidates.
pub struct ItemEmbeddings {
    pub v: Var,
    pub attention: Option<Var>,
    pub mask: Vec<bool>,
}

/// Number of attention candidates: one per kind plus the item itself.
pub const NUM_CANDIDATES: usize = 4;

/// Final embeddings of all items.
pub fn embed_items(
    g: &mut Graph,
    store: &ParamStore,
    p: &ModelParams,
    cfg: &ModelConfig,
    pre: &EmbeddingTable,
    neighbors: &[NeighborSet],
) -> Result<ItemEmbeddings> {
    let n_items = pre.rows(NodeKind::Item);
    if neighbors.len() != n_items {
        return Err(Error::Shape(format!(
            "{} neighbor sets for {n_items} items",
            neighbors.len()
        )));
    }
    if !cfg.hetgnn {
        let v = g.constant(pre.matrix(NodeKind::Item))?;
        return Ok(ItemEmbeddings {
            v,
            attention: None,
            mask: Vec::new(),
        });
    }

    // f1 for every item plus every sampled session and user neighbor
    let mut nodes: Vec<NodeRef> = (0..n_items).map(NodeRef::item).collect();
    let mut row_of: HashMap<NodeRef, usize> = nodes.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    for ns in neighbors {
        for kind in [NodeKind::Session, NodeKind::User] {
            for &idx in ns.of(kind) {
                let n = NodeRef { kind, index: idx };
                row_of.entry(n).or_insert_with(|| {
                    nodes.push(n);
                    nodes.len() - 1
                });
            }
        }
    }
    let f1 = node_content(g, store, p, pre, &nodes)?;
    let self_emb = g.gather_rows(f1, &(0..n_items).collect::<Vec<_>>())?;

    let mut candidates = Vec::with_capacity(NUM_CANDIDATES);
    let mut mask = vec![false; n_items * NUM_CANDIDATES];
    for kind in NodeKind::ALL {
        // group items by neighbor count so each group runs as one batch
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, ns) in neighbors.iter().enumerate() {
            let len = ns.of(kind).len();
            if len > 0 {
                groups.entry(len).or_default().push(i);
                mask[i * NUM_CANDIDATES + kind.ordinal()] = true;
            }
        }
        let zero = g.zeros(1, p.d);
        let mut parts = Vec::new();
        let mut slot = vec![usize::MAX; n_items];
        let mut next = 0;
        for (len, items) in &groups {
            let mut seq = Vec::with_capacity(*len);
            for t in 0..*len {
                let rows: Vec<usize> = items
                    .iter()
                    .map(|&i| row_of[&NodeRef { kind, index: neighbors[i].of(kind)[t] }])
                    .collect();
                seq.push(g.gather_rows(f1, &rows)?);
            }
            parts.push(aggregate_type(g, store, p, kind, &seq)?);
            for &i in items {
                slot[i] = next;
                next += 1;
            }
        }
        parts.push(zero);
        let stacked = g.concat_rows(&parts)?;
        let order: Vec<usize> = slot.iter().map(|&s| if s == usize::MAX { next } else { s }).collect();
        candidates.push(g.gather_rows(stacked, &order)?);
    }
    candidates.push(self_emb);
    for i in 0..n_items {
        mask[i * NUM_CANDIDATES + NUM_CANDIDATES - 1] = true;
    }
    let (weights, v) = type_attention(g, store, p, self_emb, &candidates, &mask)?;
    Ok(ItemEmbeddings {
        v,
        attention: Some(weights),
        mask,
    })
}

/// Local, global and hybrid session embeddings (`B x d` each) and the raw
/// per-position attention weights (`T x 1`, positions of all prefixes
/// concatenated).
pub struct SessionEmbedding {
    pub local: Var,
    pub global: Var,
    pub hybrid: Var,
    pub weights: Var,
}

/// Embeds each prefix from the item embedding matrix `v` (`n x d`):
/// `s_l = v[last]`, `a_i = σ(v[last] W1 + v[i] W2 + c) w`,
/// `s_g = Σ a_i v[i]`, `s_h = [s_l | s_g] W3`.
pub fn session_embed(
    g: &mut Graph,
    store: &ParamStore,
    p: &ModelParams,
    cfg: &ModelConfig,
    v: Var,
    prefixes: &[&[usize]],
) -> Result<SessionEmbedding> {
    if prefixes.is_empty() || prefixes.iter().any(|s| s.is_empty()) {
        return Err(Error::Shape("session embedding needs non-empty prefixes".into()));
    }
    let n_items = g.shape(v).0;
    let mut flat = Vec::new();
    let mut owner = Vec::new();
    let mut offsets = vec![0];
    let mut last = Vec::with_capacity(prefixes.len());
    for (b, s) in prefixes.iter().enumerate() {
        if let Some(&bad) = s.iter().find(|&&i| i >= n_items) {
            return Err(Error::Shape(format!("item {bad} outside {n_items} items")));
        }
        flat.extend_from_slice(s);
        owner.extend(std::iter::repeat_n(b, s.len()));
        offsets.push(flat.len());
        last.push(*s.last().unwrap());
    }
    let local = g.gather_rows(v, &last)?;
    let items = g.gather_rows(v, &flat)?;

    let w1 = g.param(store, p.sess_w1)?;
    let w2 = g.param(store, p.sess_w2)?;
    let c = g.param(store, p.sess_c)?;
    let w = g.param(store, p.sess_w)?;
    let q = g.matmul(local, w1)?;
    let q = g.gather_rows(q, &owner)?;
    let k = g.matmul(items, w2)?;
    let h = g.add(q, k)?;
    let h = g.add_row(h, c)?;
    let h = g.sigmoid(h)?;
    let mut weights = g.matmul(h, w)?;
    if cfg.normalize_session_attention {
        weights = g.segment_softmax(weights, &offsets)?;
    }
    let weighted = g.mul_col(items, weights)?;
    let global = g.segment_sum(weighted, &offsets)?;

    let w3 = g.param(store, p.w3)?;
    let both = g.concat_cols(&[local, global])?;
    let hybrid = g.matmul(both, w3)?;
    Ok(SessionEmbedding {
        local,
        global,
        hybrid,
        weights,
    })
}

/// Logits `s_h · v[i]` for every session row and item.
pub fn item_logits(g: &mut Graph, hybrid: Var, v: Var) -> Result<Var> {
    g.matmul_bt(hybrid, v)
}

/// Mean cross-entropy of predicting `targets` after `prefixes`.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    g: &mut Graph,
    store: &ParamStore,
    p: &ModelParams,
    cfg: &ModelConfig,
    pre: &EmbeddingTable,
    neighbors: &[NeighborSet],
    prefixes: &[&[usize]],
    targets: &[usize],
) -> Result<Var> {
    let items = embed_items(g, store, p, cfg, pre, neighbors)?;
    let sess = session_embed(g, store, p, cfg, items.v, prefixes)?;
    let logits = item_logits(g, sess.hybrid, items.v)?;
    g.softmax_cross_entropy(logits, targets)
}

/// Frozen model ready for scoring: item embeddings computed once.
pub struct Scorer<'a> {
    store: &'a ParamStore,
    params: &'a ModelParams,
    cfg: &'a ModelConfig,
    items: Tensor,
}

impl<'a> Scorer<'a> {
    pub fn new(
        store: &'a ParamStore,
        params: &'a ModelParams,
        cfg: &'a ModelConfig,
        pre: &EmbeddingTable,
        neighbors: &[NeighborSet],
    ) -> Result<Self> {
        let mut g = Graph::new();
        let items = embed_items(&mut g, store, params, cfg, pre, neighbors)?;
        let items = g.to_tensor(items.v);
        Ok(Scorer {
            store,
            params,
            cfg,
            items,
        })
    }

    pub fn item_embeddings(&self) -> &Tensor {
        &self.items
    }

    /// Raw logits for each prefix, one row per prefix.
    pub fn logits(&self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let v = g.constant(&self.items)?;
        let sess = session_embed(&mut g, self.store, self.params, self.cfg, v, prefixes)?;
        let z = item_logits(&mut g, sess.hybrid, v)?;
        let n = self.items.rows();
        Ok(g.value(z).chunks(n).map(<[f64]>::to_vec).collect())
    }
}

/// Softmax of one logit row.
pub fn probabilities(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    crate::diffcore::softmax_into(logits, &mut out);
    out
}
