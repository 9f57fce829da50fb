//! Independent reference implementations for the brute-force checks.

use std::cmp::Ordering;
use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hgnmn_core::autodiff::Tape;
use hgnmn_core::builder::{score_and_select, EmbeddingTable, KnowledgeTriple, SelectParams};
use hgnmn_core::graph::{HeteroGraph, Modality};
use hgnmn_core::modules::{GraphVars, RelateModule};
use hgnmn_core::nn::{Linear, Mlp};
use hgnmn_core::params::ParamStore;
use hgnmn_core::tensor::Tensor;

pub const EDGE_DIM: usize = 3;
pub const DIM: usize = 4;

fn affine(store: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.get(l.weight).data();
    (0..l.out_dim)
        .map(|o| {
            let b = l.bias.map_or(0.0, |b| store.get(b).data()[o]);
            b + (0..l.in_dim).map(|i| w[o * l.in_dim + i] * x[i]).sum::<f64>()
        })
        .collect()
}

fn mlp(store: &ParamStore, m: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (k, l) in m.layers.iter().enumerate() {
        h = affine(store, l, &h);
        if k + 1 < m.layers.len() {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    h
}

/// Per-edge scores and the unnormalized transfer, one edge at a time.
pub fn relate_oracle(
    store: &ParamStore,
    module: &RelateModule,
    g: &HeteroGraph,
    a: &[f64],
    query: &[f64],
) -> Vec<f64> {
    let q = affine(store, &module.query_proj, query);
    let mut moved = vec![0.0; g.num_nodes()];
    for (e, &(i, j)) in g.edges.iter().enumerate() {
        let row = &g.edge_features.data()[e * EDGE_DIM..(e + 1) * EDGE_DIM];
        let pe = affine(store, &module.edge_proj, row);
        let gated: Vec<f64> = q.iter().zip(&pe).map(|(x, y)| x * y).collect();
        let s = mlp(store, &module.scorer, &gated)[0].max(0.0);
        moved[j] += s * a[i];
    }
    moved
}

pub fn random_layer(rng: &mut ChaCha8Rng, n: usize) -> HeteroGraph {
    let mut edges: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    edges.shuffle(rng);
    edges.truncate(rng.gen_range(0..=edges.len()));
    // a repeated edge contributes twice
    if !edges.is_empty() && rng.gen_bool(0.3) {
        edges.push(edges[0]);
    }
    let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen_range(-1.0..1.0); 2]).collect();
    let erows: Vec<Vec<f64>> = edges
        .iter()
        .map(|_| (0..EDGE_DIM).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    HeteroGraph::new(
        Modality::Commonsense,
        Tensor::from_rows(&rows, 2).unwrap(),
        (0..n).map(|i| format!("n{i}")).collect(),
        edges.clone(),
        vec!["r".into(); edges.len()],
        Tensor::from_rows(&erows, EDGE_DIM).unwrap(),
    )
    .unwrap()
}

pub const HEADS: [&str; 6] = ["cup", "pen", "lamp", "sofa", "drum", "kite"];
pub const RELATIONS: [&str; 3] = ["UsedFor", "AtLocation", "RelatedTo"];
pub const TAILS: [&str; 6] = ["drinking", "writing", "kitchen", "office", "music", "park"];

/// Score by hand, then repeatedly pull out the best remaining triple.
pub fn selection_oracle(
    store: &[KnowledgeTriple],
    object_scores: &HashMap<String, f64>,
    p: SelectParams,
) -> Vec<Ranked> {
    let mut rest: Vec<(String, String, String, f64)> = store
        .iter()
        .map(|t| {
            let s = [&t.head, &t.tail]
                .iter()
                .filter_map(|l| object_scores.get(l.as_str()))
                .fold(None, |m: Option<f64>, &v| Some(m.map_or(v, |m| m.max(v))))
                .unwrap_or(0.0);
            (t.head.clone(), t.relation.clone(), t.tail.clone(), p.a * s + p.b * t.score)
        })
        .collect();
    let before = |x: &(String, String, String, f64), y: &(String, String, String, f64)| {
        match x.3.partial_cmp(&y.3).unwrap() {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => (&x.0, &x.1, &x.2) < (&y.0, &y.1, &y.2),
        }
    };
    let mut out = Vec::new();
    while out.len() < p.k && !rest.is_empty() {
        let mut best = 0;
        for i in 1..rest.len() {
            if before(&rest[i], &rest[best]) {
                best = i;
            }
        }
        out.push(rest.remove(best));
    }
    out
}

pub type Ranked = (String, String, String, f64);

/// The commonsense layer's edges as (head, relation, tail, score), in edge order.
pub fn selected_edges(g: &HeteroGraph) -> Vec<Ranked> {
    let last = g.edge_dim() - 1;
    g.edges
        .iter()
        .enumerate()
        .map(|(e, &(h, t))| {
            (
                g.node_labels[h].clone(),
                g.edge_labels[e].clone(),
                g.node_labels[t].clone(),
                g.edge_features.data()[e * g.edge_dim() + last],
            )
        })
        .collect()
}

/// One random relate instance with `n` nodes; returns the largest gap between
/// the module and the per-edge oracle, before and after normalization.
pub fn relate_case(seed: u64, n: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = random_layer(&mut rng, n);
    let mut store = ParamStore::new();
    let module = RelateModule::new(&mut store, "relate", EDGE_DIM, DIM, &mut rng);
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let a: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let query: Vec<f64> = (0..DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let tape = Tape::new();
    let gv = GraphVars::new(&tape, &g);
    let av = tape.leaf(Tensor::vector(a.clone()));
    let qv = tape.leaf(Tensor::vector(query.clone()));
    let out = module.forward(&tape, &store, &gv, av, qv).unwrap();
    let want = relate_oracle(&store, &module, &g, &a, &query);

    let mut gap: f64 = 0.0;
    if let Some(ef) = gv.edge_features {
        let pe = module.edge_proj.forward(&tape, &store, ef).unwrap();
        let w = module.edge_attention(&tape, &store, &gv, pe, qv).unwrap();
        let moved = tape.tmatvec(w, av).unwrap();
        for (x, y) in tape.value(moved).data().iter().zip(&want) {
            gap = gap.max((x - y).abs());
        }
    }
    let mass: f64 = want.iter().sum();
    let normalized: Vec<f64> = if mass < 1e-12 {
        vec![1.0 / n as f64; n]
    } else {
        want.iter().map(|v| v / mass).collect()
    };
    for (x, y) in tape.value(out).data().iter().zip(&normalized) {
        gap = gap.max((x - y).abs());
    }
    gap
}

/// A random store of 1..=`max` triples over a small vocabulary, coarse
/// scores so that ties are common, plus detection scores and parameters.
pub fn selection_case(seed: u64, size: Option<usize>) -> (Vec<KnowledgeTriple>, HashMap<String, f64>, SelectParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let size = size.unwrap_or_else(|| rng.gen_range(1..=1000));
    let store: Vec<KnowledgeTriple> = (0..size)
        .map(|_| {
            KnowledgeTriple::new(
                HEADS.choose(&mut rng).unwrap(),
                RELATIONS.choose(&mut rng).unwrap(),
                TAILS.choose(&mut rng).unwrap(),
                f64::from(rng.gen_range(0..=4u8)) / 4.0,
            )
        })
        .collect();
    let mut object_scores = HashMap::new();
    for h in HEADS {
        if rng.gen_bool(0.6) {
            object_scores.insert(h.to_string(), f64::from(rng.gen_range(1..=4u8)) / 4.0);
        }
    }
    let params = SelectParams {
        a: 0.7,
        b: 0.3,
        k: rng.gen_range(1..=60),
    };
    (store, object_scores, params)
}

pub fn selection_embeddings() -> EmbeddingTable {
    let mut emb = EmbeddingTable::new(2);
    for w in HEADS.iter().chain(&TAILS) {
        emb.insert(w, vec![0.5, -0.5]).unwrap();
    }
    emb
}

/// Whether `score_and_select` reproduces the oracle order exactly.
pub fn selection_matches(seed: u64, size: Option<usize>) -> (bool, Vec<Ranked>) {
    let (store, scores, params) = selection_case(seed, size);
    let want = selection_oracle(&store, &scores, params);
    let (g, _) = score_and_select(&store, &scores, params, &selection_embeddings()).unwrap();
    (selected_edges(&g) == want, want)
}
