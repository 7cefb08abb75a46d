//! Content, type and session aggregation of the item and session encoder.

mod common;

use common::toy;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sesshet::diffcore::{bilstm_encode, grad_check, Graph, ParamId, Tensor};
use sesshet::hetgnn::{
    aggregate_content, aggregate_type, embed_items, item_logits, node_content, probabilities,
    session_embed, type_attention, Scorer, NUM_CANDIDATES,
};
use sesshet::hetgraph::{NeighborSet, NodeKind, NodeRef};

const EPS: f64 = 3e-5;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn single_attribute_content_is_bilstm_output() {
    let t = toy(6, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::uniform(&[3, 6], 1.0, &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(&x).unwrap();
    let f1 = aggregate_content(&mut g, &t.store, &t.params, &[xv]).unwrap();

    let fc = t.params.fc.apply(&mut g, &t.store, xv).unwrap();
    let out = bilstm_encode(&mut g, &t.store, &[fc], &t.params.content_fwd, &t.params.content_bwd).unwrap();
    assert!(close(g.value(f1), g.value(out[0]), 1e-14));
    assert!(aggregate_content(&mut g, &t.store, &t.params, &[]).is_err());
}

#[test]
fn repeated_attributes_are_deterministic() {
    let t = toy(6, 1);
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::row(vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.4])).unwrap();
        let f1 = aggregate_content(&mut g, &t.store, &t.params, &[x, x]).unwrap();
        g.value(f1).to_vec()
    };
    assert_eq!(run(), run());
}

fn attr_params(t: &mut common::Toy, rows: usize, n: usize, seed: u64) -> Vec<ParamId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| t.store.add(format!("attr{i}"), Tensor::uniform(&[rows, t.params.d], 1.0, &mut rng)).unwrap())
        .collect()
}

#[test]
fn content_aggregation_gradients() {
    let mut t = toy(4, 3);
    let attrs = attr_params(&mut t, 2, 2, 9);
    let mut ids = attrs.clone();
    ids.extend(t.params.aggregation_ids().into_iter().take(3 + 24));
    let p = t.params.clone();
    let report = grad_check(&mut t.store, &ids, EPS, |g, s| {
        let xs = attrs.iter().map(|&a| g.param(s, a)).collect::<sesshet::Result<Vec<_>>>()?;
        let f1 = aggregate_content(g, s, &p, &xs)?;
        let sq = g.mul(f1, f1)?;
        g.sum(sq)
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

#[test]
fn type_aggregation_single_neighbor_and_order() {
    let t = toy(6, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = Tensor::uniform(&[1, 6], 1.0, &mut rng);
    let b = Tensor::uniform(&[1, 6], 1.0, &mut rng);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(&a).unwrap(), g.constant(&b).unwrap());
    let k = NodeKind::User.ordinal();
    let one = aggregate_type(&mut g, &t.store, &t.params, NodeKind::User, &[av]).unwrap();
    let enc = bilstm_encode(&mut g, &t.store, &[av], &t.params.type_fwd[k], &t.params.type_bwd[k]).unwrap();
    assert!(close(g.value(one), g.value(enc[0]), 1e-14));

    // the type encoder is order sensitive; fixed order gives fixed output
    let ab = aggregate_type(&mut g, &t.store, &t.params, NodeKind::User, &[av, bv]).unwrap();
    let ba = aggregate_type(&mut g, &t.store, &t.params, NodeKind::User, &[bv, av]).unwrap();
    let ab2 = aggregate_type(&mut g, &t.store, &t.params, NodeKind::User, &[av, bv]).unwrap();
    assert_eq!(g.value(ab), g.value(ab2));
    assert!(!close(g.value(ab), g.value(ba), 1e-12));
}

#[test]
fn type_aggregation_gradients() {
    let mut t = toy(4, 5);
    let seq = attr_params(&mut t, 2, 3, 10);
    let k = NodeKind::Item.ordinal();
    let mut ids = seq.clone();
    ids.extend(t.params.type_fwd[k].ids());
    ids.extend(t.params.type_bwd[k].ids());
    let p = t.params.clone();
    let report = grad_check(&mut t.store, &ids, EPS, |g, s| {
        let xs = seq.iter().map(|&a| g.param(s, a)).collect::<sesshet::Result<Vec<_>>>()?;
        let f2 = aggregate_type(g, s, &p, NodeKind::Item, &xs)?;
        let sq = g.mul(f2, f2)?;
        g.sum(sq)
    })
    .unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

#[test]
fn attention_over_self_only_is_identity() {
    let t = toy(4, 7);
    let mut g = Graph::new();
    let me = g.constant(&Tensor::row(vec![0.3, -0.1, 0.8, 0.2])).unwrap();
    let (w, f3) = type_attention(&mut g, &t.store, &t.params, me, &[me], &[true]).unwrap();
    assert_eq!(g.value(w), &[1.0]);
    assert!(close(g.value(f3), g.value(me), 1e-15));
}

#[test]
fn attention_with_equal_logits_averages() {
    let mut t = toy(4, 7);
    t.store.get_mut(t.params.att_u).data_mut().fill(0.0);
    let mut g = Graph::new();
    let a = g.constant(&Tensor::row(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
    let b = g.constant(&Tensor::row(vec![0.0, 1.0, 0.0, 0.0])).unwrap();
    let (w, f3) = type_attention(&mut g, &t.store, &t.params, b, &[a, b], &[true, true]).unwrap();
    assert_eq!(g.value(w), &[0.5, 0.5]);
    assert!(close(g.value(f3), &[0.5, 0.5, 0.0, 0.0], 1e-15));
}

#[test]
fn attention_saturates_on_dominant_logit() {
    let mut t = toy(4, 7);
    // U puts a large weight on the first coordinate of the candidate half
    let u = t.store.get_mut(t.params.att_u).data_mut();
    u.fill(0.0);
    u[0] = 200.0;
    let mut g = Graph::new();
    let a = g.constant(&Tensor::row(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
    let b = g.constant(&Tensor::row(vec![0.0, 1.0, 0.0, 0.0])).unwrap();
    let (w, f3) = type_attention(&mut g, &t.store, &t.params, b, &[a, b], &[true, true]).unwrap();
    assert!(g.value(w)[0] > 1.0 - 1e-12);
    assert!(close(g.value(f3), &[1.0, 0.0, 0.0, 0.0], 1e-12));
}

#[test]
fn item_without_neighbors_keeps_its_content_embedding() {
    let t = toy(6, 8);
    let mut neighbors = t.neighbors.clone();
    neighbors[3] = NeighborSet::default();
    let mut g = Graph::new();
    let items = embed_items(&mut g, &t.store, &t.params, &t.cfg, &t.pre, &neighbors).unwrap();
    let f1 = node_content(&mut g, &t.store, &t.params, &t.pre, &[NodeRef::item(3)]).unwrap();
    let v = g.to_tensor(items.v);
    assert!(close(v.row_slice(3), g.value(f1), 1e-14));
    let w = g.value(items.attention.unwrap()).to_vec();
    assert_eq!(w[3 * NUM_CANDIDATES + NUM_CANDIDATES - 1], 1.0);
}

#[test]
fn item_embeddings_match_golden() {
    let t = toy(4, 11);
    let scorer = Scorer::new(&t.store, &t.params, &t.cfg, &t.pre, &t.neighbors).unwrap();
    let text: String = scorer
        .item_embeddings()
        .data()
        .chunks(4)
        .map(|r| r.iter().map(|x| format!("{x:.12e}")).collect::<Vec<_>>().join(" ") + "\n")
        .collect();
    let golden = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/toy_item_embeddings.txt");
    if std::env::var_os("SESSHET_BLESS").is_some() {
        std::fs::write(&golden, &text).unwrap();
    }
    assert_eq!(text, std::fs::read_to_string(golden).unwrap());
}

#[test]
fn non_finite_parameters_are_reported() {
    let mut t = toy(4, 12);
    t.store.get_mut(t.params.fc.w).data_mut()[0] = f64::INFINITY;
    let mut g = Graph::new();
    let err = embed_items(&mut g, &t.store, &t.params, &t.cfg, &t.pre, &t.neighbors)
        .err()
        .expect("infinite weight must fail");
    assert!(err.is_numeric());
}

#[test]
fn single_item_session() {
    let t = toy(4, 13);
    let mut g = Graph::new();
    let v = g.constant(t.pre.matrix(NodeKind::Item)).unwrap();
    let s = session_embed(&mut g, &t.store, &t.params, &t.cfg, v, &[&[2]]).unwrap();
    let row = t.pre.row(NodeKind::Item, 2);
    assert_eq!(g.value(s.local), row);
    let a = g.value(s.weights)[0];
    let scaled: Vec<f64> = row.iter().map(|x| a * x).collect();
    assert!(close(g.value(s.global), &scaled, 1e-15));
    assert!(session_embed(&mut g, &t.store, &t.params, &t.cfg, v, &[&[]]).is_err());
}

#[test]
fn identity_fusion_returns_local_embedding() {
    let mut t = toy(4, 14);
    let w3 = t.store.get_mut(t.params.w3).data_mut();
    w3.fill(0.0);
    for i in 0..4 {
        w3[i * 4 + i] = 1.0;
    }
    let mut g = Graph::new();
    let v = g.constant(t.pre.matrix(NodeKind::Item)).unwrap();
    let s = session_embed(&mut g, &t.store, &t.params, &t.cfg, v, &[&[0, 1, 2], &[4, 3]]).unwrap();
    assert_eq!(g.value(s.hybrid), g.value(s.local));
}

#[test]
fn session_embedding_gradients() {
    for normalize in [false, true] {
        let mut t = toy(4, 15);
        t.cfg.normalize_session_attention = normalize;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = t.store.add("v", Tensor::uniform(&[5, 4], 1.0, &mut rng)).unwrap();
        let c = t.store.get_mut(t.params.sess_c).data_mut();
        for x in c.iter_mut() {
            *x = rng.gen_range(-0.5..0.5);
        }
        let mut ids = t.params.session_ids();
        ids.push(v);
        let (p, cfg) = (t.params.clone(), t.cfg.clone());
        let report = grad_check(&mut t.store, &ids, EPS, |g, s| {
            let vv = g.param(s, v)?;
            let e = session_embed(g, s, &p, &cfg, vv, &[&[0, 3, 1]])?;
            let sq = g.mul(e.hybrid, e.hybrid)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "normalize={normalize} {report:?}");
    }
}

#[test]
fn zero_session_scores_uniformly() {
    let t = toy(4, 16);
    let mut g = Graph::new();
    let v = g.constant(t.pre.matrix(NodeKind::Item)).unwrap();
    let s = g.zeros(1, 4);
    let z = item_logits(&mut g, s, v).unwrap();
    let p = probabilities(g.value(z));
    assert!(p.iter().all(|x| (x - 0.2).abs() < 1e-15));
}

#[test]
fn dominant_direction_wins() {
    let mut g = Graph::new();
    let eye = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let v = g.constant(&eye).unwrap();
    let s = g.constant(&Tensor::row(vec![0.0, 50.0, 0.0])).unwrap();
    let z = item_logits(&mut g, s, v).unwrap();
    let p = probabilities(g.value(z));
    let best = (0..3).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
    assert_eq!(best, 1);
}

#[test]
fn scoring_is_deterministic() {
    let run = || {
        let t = toy(6, 17);
        let scorer = Scorer::new(&t.store, &t.params, &t.cfg, &t.pre, &t.neighbors).unwrap();
        (scorer.item_embeddings().clone(), scorer.logits(&[&[0, 1], &[3]]).unwrap())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn type_attention_weights_form_a_distribution(seed in 0u64..500) {
        let t = toy(4, seed);
        let mut g = Graph::new();
        let items = embed_items(&mut g, &t.store, &t.params, &t.cfg, &t.pre, &t.neighbors).unwrap();
        let w = g.value(items.attention.unwrap()).to_vec();
        for i in 0..5 {
            let row = &w[i * NUM_CANDIDATES..(i + 1) * NUM_CANDIDATES];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            let live = items.mask[i * NUM_CANDIDATES..(i + 1) * NUM_CANDIDATES].iter().filter(|m| **m).count();
            for (j, a) in row.iter().enumerate() {
                if items.mask[i * NUM_CANDIDATES + j] {
                    let ok = if live == 1 { *a == 1.0 } else { *a > 0.0 && *a < 1.0 };
                    prop_assert!(ok, "weight {} with {} live candidates", a, live);
                } else {
                    prop_assert_eq!(*a, 0.0);
                }
            }
        }
    }

    #[test]
    fn final_embedding_in_candidate_hull(seed in 0u64..500, m in 1usize..5) {
        let t = toy(4, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let cands: Vec<_> = (0..m).map(|_| g.constant(&Tensor::uniform(&[3, 4], 2.0, &mut rng)).unwrap()).collect();
        let (_, f3) = type_attention(&mut g, &t.store, &t.params, cands[0], &cands, &vec![true; 3 * m]).unwrap();
        for (k, x) in g.value(f3).iter().enumerate() {
            let vals: Vec<f64> = cands.iter().map(|&c| g.value(c)[k]).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*x >= lo - 1e-12 && *x <= hi + 1e-12);
        }
    }

    #[test]
    fn probabilities_sum_to_one_and_argmax_is_shift_invariant(
        logits in prop::collection::vec(-20.0f64..20.0, 1..30),
        shift in -50.0f64..50.0,
    ) {
        let p = probabilities(&logits);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let shifted: Vec<f64> = logits.iter().map(|x| x + shift).collect();
        let q = probabilities(&shifted);
        let argmax = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b]).then(b.cmp(&a))).unwrap();
        prop_assert_eq!(argmax(&p), argmax(&logits));
        prop_assert_eq!(argmax(&q), argmax(&logits));
    }
}
