#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sesshet::dataio::{Dataset, Session};
use sesshet::diffcore::{ParamStore, Tensor};
use sesshet::hetgnn::{ModelConfig, ModelParams};
use sesshet::hetgraph::{sample_all, HetGraph, NeighborSet, NodeKind, WalkConfig};
use sesshet::pretrain::EmbeddingTable;

pub struct Toy {
    pub ds: Dataset,
    pub graph: HetGraph,
    pub pre: EmbeddingTable,
    pub neighbors: Vec<NeighborSet>,
    pub store: ParamStore,
    pub params: ModelParams,
    pub cfg: ModelConfig,
}

pub fn sessions(list: &[(usize, &[usize])]) -> Vec<Session> {
    list.iter()
        .map(|(u, items)| Session {
            user: *u,
            items: items.to_vec(),
            time: 0,
        })
        .collect()
}

pub fn random_pre(g: &HetGraph, d: usize, rng: &mut ChaCha8Rng) -> EmbeddingTable {
    let tables = NodeKind::ALL.map(|k| Tensor::uniform(&[g.count(k), d], 1.0, rng));
    EmbeddingTable::new(d, tables).unwrap()
}

/// 5 items, 2 users, 2 sessions with random pre-embeddings and freshly
/// initialized parameters.
pub fn toy(d: usize, seed: u64) -> Toy {
    let train = sessions(&[(0, &[0, 1, 2, 1]), (1, &[2, 3, 4])]);
    let ds = Dataset::from_indexed(train, Vec::new(), 5, 2).unwrap();
    let graph = HetGraph::build(&ds, true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pre = random_pre(&graph, d, &mut rng);
    let walk = WalkConfig {
        caps: [2, 2, 2],
        seed,
        ..WalkConfig::default()
    };
    let neighbors = sample_all(&graph, &walk).unwrap();
    let mut store = ParamStore::new();
    let params = ModelParams::register(&mut store, d, &mut rng).unwrap();
    Toy {
        ds,
        graph,
        pre,
        neighbors,
        store,
        params,
        cfg: ModelConfig {
            d,
            ..ModelConfig::default()
        },
    }
}
