//! Finite-difference checks over every differentiable component, on small
//! random instances.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::builder::EmbeddingTable;
use crate::controller::{Model, ModelConfig, RunOptions};
use crate::error::Result;
use crate::gradcheck::{grad_check, grad_check_params, Coverage, GradCheckReport};
use crate::graph::{HeteroGraph, Modality, MultiLayerGraph};
use crate::modules::{describe, filter, CrossGraphModule, FindModule, GraphVars, RelateModule};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::cross_entropy_loss;

pub const COMPONENTS: [&str; 9] = [
    "find",
    "filter",
    "relate",
    "cross_graph",
    "describe",
    "encoder",
    "controller_step",
    "answer_head",
    "run_reasoning_loss",
];

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub instances: usize,
    pub seed: u64,
    pub max_nodes: usize,
    pub eps: f64,
    pub tol: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            instances: 10,
            seed: 0,
            max_nodes: 6,
            eps: 1e-4,
            tol: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub component: &'static str,
    pub instances: usize,
    pub coordinates: usize,
    pub max_error: f64,
    pub worst: Option<String>,
    pub passed: bool,
}

const NODE_DIM: usize = 3;
const EDGE_DIM: usize = 2;
const DIM: usize = 4;
const WORDS: [&str; 6] = ["what", "color", "is", "the", "cup", "used"];

fn uniform_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_distribution(rng: &mut impl Rng, n: usize) -> Tensor {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let s: f64 = raw.iter().sum();
    Tensor::vector(raw.into_iter().map(|v| v / s).collect())
}

/// Random layer with `1..=max_nodes` nodes and at least one edge when possible.
pub fn random_graph(rng: &mut impl Rng, modality: Modality, max_nodes: usize) -> HeteroGraph {
    let n = rng.gen_range(1..=max_nodes.max(1));
    let rows: Vec<Vec<f64>> = (0..n).map(|_| uniform_vec(rng, NODE_DIM)).collect();
    let mut edges: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j)
        .collect();
    edges.shuffle(rng);
    let keep = if edges.is_empty() { 0 } else { rng.gen_range(1..=edges.len()) };
    edges.truncate(keep);
    let edge_rows: Vec<Vec<f64>> = edges.iter().map(|_| uniform_vec(rng, EDGE_DIM)).collect();
    HeteroGraph::new(
        modality,
        Tensor::from_rows(&rows, NODE_DIM).expect("consistent rows"),
        (0..n).map(|i| format!("{modality}{i}")).collect(),
        edges.clone(),
        vec!["r".to_owned(); edges.len()],
        Tensor::from_rows(&edge_rows, EDGE_DIM).expect("consistent rows"),
    )
    .expect("valid random graph")
}

pub fn random_graphs(rng: &mut impl Rng, max_nodes: usize) -> MultiLayerGraph {
    MultiLayerGraph::new(
        random_graph(rng, Modality::Visual, max_nodes),
        random_graph(rng, Modality::Semantic, max_nodes),
        random_graph(rng, Modality::Commonsense, max_nodes),
    )
    .expect("modalities match")
}

/// A small model with `steps` reasoning steps and a four-way answer space.
pub fn random_model(rng: &mut ChaCha8Rng, steps: usize) -> Model {
    let mut emb = EmbeddingTable::new(3);
    for w in WORDS {
        emb.insert(w, uniform_vec(rng, 3)).expect("dimension 3");
    }
    let config = ModelConfig {
        dim: DIM,
        word_dim: 3,
        node_dims: [NODE_DIM; 3],
        edge_dims: [EDGE_DIM; 3],
        question_len: 6,
        steps,
        and_lag: 2,
        answers: ["a", "b", "c", "d"].map(String::from).to_vec(),
    };
    Model::new(config, emb, rng.gen()).expect("valid config")
}

pub fn random_question(rng: &mut impl Rng) -> Vec<String> {
    let n = rng.gen_range(1..=6);
    (0..n).map(|_| WORDS.choose(rng).unwrap().to_string()).collect()
}

/// `Σ rᵢ xᵢ` with fixed random `r`; a plain sum of a distribution would be constant.
fn project(tape: &Tape, x: Var, r: &[f64]) -> Result<Var> {
    let shape = tape.shape(x);
    let w = tape.leaf(Tensor::new(shape, r.to_vec())?);
    Ok(tape.sum(tape.mul(x, w)?))
}

fn all_ids(store: &ParamStore) -> Vec<crate::params::ParamId> {
    store.ids().collect()
}

struct Checker<'a> {
    cfg: &'a SuiteConfig,
    report: Option<GradCheckReport>,
}

impl Checker<'_> {
    fn add(&mut self, r: GradCheckReport) {
        match &mut self.report {
            Some(acc) => acc.merge(r),
            None => self.report = Some(r),
        }
    }

    fn params<F>(&mut self, store: &ParamStore, f: F) -> Result<()>
    where
        F: Fn(&Tape, &ParamStore) -> Result<Var>,
    {
        let r = grad_check_params(f, store, &all_ids(store), Coverage::All, self.cfg.eps, self.cfg.tol)?;
        self.add(r);
        Ok(())
    }

    fn input<F>(&mut self, x: &Tensor, f: F) -> Result<()>
    where
        F: Fn(&Tape, Var) -> Result<Var>,
    {
        let r = grad_check(f, x, self.cfg.eps, self.cfg.tol)?;
        self.add(r);
        Ok(())
    }
}

fn run_component(name: &'static str, cfg: &SuiteConfig, rng: &mut ChaCha8Rng, ck: &mut Checker) -> Result<()> {
    let graphs = random_graphs(rng, cfg.max_nodes);
    let m = *Modality::ALL.choose(rng).unwrap();
    let g = graphs.layer(m).clone();
    let n = g.num_nodes();
    let r_nodes = uniform_vec(rng, n);
    let query = Tensor::vector(uniform_vec(rng, DIM));
    let a = random_distribution(rng, n);
    let mut store = ParamStore::new();
    match name {
        "find" => {
            let find = FindModule::new(&mut store, "find", NODE_DIM, DIM, rng);
            let f = |t: &Tape, s: &ParamStore, c: Var| {
                let gv = GraphVars::new(t, &g);
                project(t, find.forward(t, s, &gv, c)?, &r_nodes)
            };
            ck.params(&store, |t, s| f(t, s, t.leaf(query.clone())))?;
            ck.input(&query, |t, c| f(t, &store, c))?;
        }
        "filter" => {
            let find = FindModule::new(&mut store, "filter", NODE_DIM, DIM, rng);
            let f = |t: &Tape, s: &ParamStore, a: Var| {
                let gv = GraphVars::new(t, &g);
                let found = find.forward(t, s, &gv, t.leaf(query.clone()))?;
                project(t, filter(t, a, found)?, &r_nodes)
            };
            ck.params(&store, |t, s| f(t, s, t.leaf(a.clone())))?;
            ck.input(&a, |t, x| f(t, &store, x))?;
        }
        "relate" => {
            let relate = RelateModule::new(&mut store, "relate", EDGE_DIM, DIM, rng);
            let f = |t: &Tape, s: &ParamStore, a: Var| {
                let gv = GraphVars::new(t, &g);
                project(t, relate.forward(t, s, &gv, a, t.leaf(query.clone()))?, &r_nodes)
            };
            ck.params(&store, |t, s| f(t, s, t.leaf(a.clone())))?;
            ck.input(&a, |t, x| f(t, &store, x))?;
        }
        "cross_graph" => {
            let others: Vec<Modality> = Modality::ALL.into_iter().filter(|&o| o != m).collect();
            let src_m = *others.choose(rng).unwrap();
            let src = graphs.layer(src_m).clone();
            let a_src = random_distribution(rng, src.num_nodes());
            let cross = CrossGraphModule::new(&mut store, "cross", src_m, m, NODE_DIM, NODE_DIM, DIM, rng);
            let f = |t: &Tape, s: &ParamStore, a_m: Var| {
                let sv = GraphVars::new(t, &src);
                let tv = GraphVars::new(t, &g);
                let out = cross.forward(t, s, &sv, &tv, a_m, t.leaf(a.clone()), None)?;
                project(t, out, &r_nodes)
            };
            ck.params(&store, |t, s| f(t, s, t.leaf(a_src.clone())))?;
            ck.input(&a_src, |t, x| f(t, &store, x))?;
        }
        "describe" => {
            let r = uniform_vec(rng, NODE_DIM);
            ck.input(&a, |t, x| {
                let gv = GraphVars::new(t, &g);
                project(t, describe(t, x, &gv)?, &r)
            })?;
            ck.input(&g.node_features.clone(), |t, x| {
                let gv = GraphVars { nodes: x, ..GraphVars::new(t, &g) };
                project(t, describe(t, t.leaf(a.clone()), &gv)?, &r)
            })?;
        }
        "encoder" => {
            let model = random_model(rng, 1);
            let q = random_question(rng);
            let r_h = uniform_vec(rng, 6 * DIM);
            let r_q = uniform_vec(rng, DIM);
            ck.params(&model.store, |t, s| {
                let enc = model.encode_question(t, s, &q)?;
                let a = project(t, enc.word_states, &r_h)?;
                let b = project(t, enc.question, &r_q)?;
                t.add(a, b)
            })?;
        }
        "controller_step" => {
            let model = random_model(rng, 1);
            let q = random_question(rng);
            let prev = Tensor::vector(uniform_vec(rng, DIM));
            let rs: Vec<Vec<f64>> = [DIM, DIM, 6, model.inventory.len()]
                .iter()
                .map(|&k| uniform_vec(rng, k))
                .collect();
            let enabled = vec![true; model.inventory.len()];
            let f = |t: &Tape, s: &ParamStore, c_prev: Var| {
                let enc = model.encode_question(t, s, &q)?;
                let sv = model.step_controller(t, s, &enc, c_prev, &enabled)?;
                let parts = [
                    project(t, sv.intermediate, &rs[0])?,
                    project(t, sv.query, &rs[1])?,
                    project(t, sv.word_attention, &rs[2])?,
                    project(t, sv.module_weights, &rs[3])?,
                ];
                t.add(t.add(parts[0], parts[1])?, t.add(parts[2], parts[3])?)
            };
            ck.params(&model.store, |t, s| f(t, s, t.leaf(prev.clone())))?;
            ck.input(&prev, |t, x| f(t, &model.store, x))?;
        }
        "answer_head" => {
            let model = random_model(rng, 1);
            let maps: Vec<Tensor> = graphs.layers().map(|l| random_distribution(rng, l.num_nodes())).collect();
            let qv = Tensor::vector(uniform_vec(rng, DIM));
            let label = rng.gen_range(0..model.config.answers.len());
            let f = |t: &Tape, s: &ParamStore, qvar: Var| {
                let gv: Vec<GraphVars> = graphs.layers().map(|l| GraphVars::new(t, l)).collect();
                let mv = [t.leaf(maps[0].clone()), t.leaf(maps[1].clone()), t.leaf(maps[2].clone())];
                let logits = model.predict_answer(t, s, &gv, &mv, qvar)?;
                cross_entropy_loss(t, logits, label)
            };
            ck.params(&model.store, |t, s| f(t, s, t.leaf(qv.clone())))?;
            ck.input(&qv, |t, x| f(t, &model.store, x))?;
        }
        "run_reasoning_loss" => {
            let model = random_model(rng, 3);
            let q = random_question(rng);
            let label = rng.gen_range(0..model.config.answers.len());
            ck.params(&model.store, |t, s| {
                let out = model.run_with_store(t, s, &graphs, &q, &RunOptions::default())?;
                cross_entropy_loss(t, out.logits, label)
            })?;
        }
        other => unreachable!("unknown component {other}"),
    }
    Ok(())
}

/// Runs every component of [`COMPONENTS`] on `cfg.instances` random instances.
pub fn run_gradient_suite(cfg: &SuiteConfig) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::with_capacity(COMPONENTS.len());
    for (k, &name) in COMPONENTS.iter().enumerate() {
        let mut ck = Checker { cfg, report: None };
        for i in 0..cfg.instances {
            let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add((k * 1000 + i) as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            run_component(name, cfg, &mut rng, &mut ck)?;
        }
        let report = ck.report.expect("at least one instance");
        out.push(SuiteEntry {
            component: name,
            instances: cfg.instances,
            coordinates: report.coordinates,
            max_error: report.max_error,
            worst: report
                .worst
                .as_ref()
                .map(|w| format!("{} analytic {:.6e} numeric {:.6e}", w.label, w.analytic, w.numeric)),
            passed: report.passed(),
        });
    }
    Ok(out)
}
