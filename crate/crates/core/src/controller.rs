//! Question encoder, soft module controller and answer head.
//!
//! One shared controller emits a single distribution over every module
//! instance of every graph. Each graph then mixes the outputs of its own
//! partition after renormalizing that slice of the distribution.

use std::borrow::Cow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::builder::{EmbeddingTable, normalize};
use crate::error::{Error, Result};
use crate::graph::{Modality, MultiLayerGraph};
use crate::modules::{
    self, CrossGraphModule, FindModule, GraphVars, ModuleKind, RelateModule,
};
use crate::nn::{Activation, Linear, LstmCell, Mlp};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_QUESTION_LEN: usize = 20;
pub const GATE_BIAS_INIT: f64 = 1.0;
pub const DEFAULT_STEPS: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of the question encoder, controller and module projections.
    pub dim: usize,
    pub word_dim: usize,
    /// Node feature widths, indexed by [`Modality::index`].
    pub node_dims: [usize; 3],
    pub edge_dims: [usize; 3],
    pub question_len: usize,
    pub steps: usize,
    /// `And` combines the maps from `t − 1` and `t − and_lag`.
    pub and_lag: usize,
    pub answers: Vec<String>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.dim == 0 {
            problems.push("dim must be positive".to_owned());
        }
        if self.word_dim == 0 {
            problems.push("word_dim must be positive".to_owned());
        }
        if self.node_dims.contains(&0) {
            problems.push("node dims must be positive".to_owned());
        }
        if self.question_len == 0 {
            problems.push("question_len must be positive".to_owned());
        }
        if self.steps == 0 {
            problems.push("steps must be at least 1".to_owned());
        }
        if self.and_lag < 2 {
            problems.push("and_lag must be at least 2".to_owned());
        }
        if self.answers.is_empty() {
            problems.push("answer vocabulary is empty".to_owned());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// Disabled graph layers and module kinds.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub graphs: Vec<Modality>,
    pub modules: Vec<ModuleKind>,
}

impl Ablation {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty() && self.modules.is_empty()
    }

    /// Parses one of `vg`, `sg`, `kg`, `and`, `filter`, `relate`, `crossgraph`.
    pub fn add_flag(&mut self, flag: &str) -> Result<()> {
        match flag.trim().to_ascii_lowercase().as_str() {
            "vg" => self.graphs.push(Modality::Visual),
            "sg" => self.graphs.push(Modality::Semantic),
            "kg" => self.graphs.push(Modality::Commonsense),
            "and" => self.modules.push(ModuleKind::And),
            "filter" => self.modules.push(ModuleKind::Filter),
            "relate" => self.modules.push(ModuleKind::Relate),
            "crossgraph" => self.modules.push(ModuleKind::CrossGraph),
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown ablation '{other}' (expected vg, sg, kg, and, filter, relate or crossgraph)"
                )))
            }
        }
        self.graphs.sort();
        self.graphs.dedup();
        self.modules.sort();
        self.modules.dedup();
        Ok(())
    }

    pub fn from_flags<S: AsRef<str>>(flags: &[S]) -> Result<Self> {
        let mut out = Self::none();
        for f in flags {
            out.add_flag(f.as_ref())?;
        }
        Ok(out)
    }

    pub fn flags(&self) -> Vec<&'static str> {
        let g = self.graphs.iter().map(|m| match m {
            Modality::Visual => "vg",
            Modality::Semantic => "sg",
            Modality::Commonsense => "kg",
        });
        g.chain(self.modules.iter().map(|k| k.name())).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleSlot {
    pub name: String,
    pub kind: ModuleKind,
    /// The graph this module writes to.
    pub target: Modality,
    /// Source graph of a CrossGraph instance.
    pub source: Option<Modality>,
}

/// Every weighted module instance, grouped in contiguous per-graph partitions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModuleInventory {
    slots: Vec<ModuleSlot>,
    partition_len: usize,
}

const PARTITION: [ModuleKind; 5] = [
    ModuleKind::Find,
    ModuleKind::And,
    ModuleKind::Filter,
    ModuleKind::Relate,
    ModuleKind::NoOp,
];

impl ModuleInventory {
    pub fn new() -> Self {
        let mut slots = Vec::new();
        for target in Modality::ALL {
            for kind in PARTITION {
                slots.push(ModuleSlot {
                    name: format!("{}.{}", target.name(), kind.name()),
                    kind,
                    target,
                    source: None,
                });
            }
            for source in Modality::ALL.into_iter().filter(|&m| m != target) {
                slots.push(ModuleSlot {
                    name: format!("{}.crossgraph_from_{}", target.name(), source.name()),
                    kind: ModuleKind::CrossGraph,
                    target,
                    source: Some(source),
                });
            }
        }
        ModuleInventory {
            slots,
            partition_len: PARTITION.len() + 2,
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[ModuleSlot] {
        &self.slots
    }

    pub fn names(&self) -> Vec<String> {
        self.slots.iter().map(|s| s.name.clone()).collect()
    }

    /// Index range of the modules writing to `m`.
    pub fn partition(&self, m: Modality) -> std::ops::Range<usize> {
        let start = m.index() * self.partition_len;
        start..start + self.partition_len
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.slots.iter().position(|s| s.name == name)
    }

    pub fn enabled_mask(&self, ablation: &Ablation) -> Vec<bool> {
        self.slots
            .iter()
            .map(|s| !ablation.modules.contains(&s.kind))
            .collect()
    }
}

impl Default for ModuleInventory {
    fn default() -> Self {
        Self::new()
    }
}

/// Encoded question on a tape.
#[derive(Clone, Debug)]
pub struct QuestionEncoding {
    /// `L × d`; rows past `valid_len` are zero.
    pub word_states: Var,
    pub question: Var,
    pub tokens: Vec<String>,
    pub valid_len: usize,
    pub mask: Vec<bool>,
}

#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub intermediate: Var,
    pub query: Var,
    pub word_attention: Var,
    pub module_weights: Var,
}

/// Plain values of one reasoning step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub module_weights: Vec<f64>,
    pub word_attention: Vec<f64>,
    /// Node attention per graph, indexed by [`Modality::index`].
    pub node_attention: [Vec<f64>; 3],
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub logits: Var,
    pub encoding: QuestionEncoding,
    pub steps: Vec<StepVars>,
    /// Attention maps after every step; entry 0 is the initial uniform state.
    pub maps: Vec<[Var; 3]>,
    pub records: Vec<StepRecord>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub ablation: Ablation,
    /// Replaces the controller's module weights at each step.
    pub forced_weights: Option<Vec<Vec<f64>>>,
}

impl RunOptions {
    pub fn with_ablation(ablation: Ablation) -> Self {
        RunOptions {
            ablation,
            forced_weights: None,
        }
    }
}

#[derive(Clone, Debug)]
struct GraphModules {
    find: FindModule,
    filter: FindModule,
    relate: RelateModule,
}

/// Per-forward projections shared by every step.
struct Prepared {
    find: Var,
    filter: Var,
    relate: Option<Var>,
    /// Inbound CrossGraph target projections, inventory order.
    cross: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embeddings: EmbeddingTable,
    pub inventory: ModuleInventory,
    encoder: LstmCell,
    control_in: Mlp,
    word_scorer: Mlp,
    weight_head: Mlp,
    graph_modules: Vec<GraphModules>,
    /// Indexed like the CrossGraph slots of the inventory.
    cross: Vec<CrossGraphModule>,
    readout: Vec<Linear>,
    question_readout: Linear,
    answer_mlp: Mlp,
}

impl Model {
    pub fn new(config: ModelConfig, embeddings: EmbeddingTable, seed: u64) -> Result<Self> {
        config.validate()?;
        if embeddings.dim() != config.word_dim {
            return Err(Error::InvalidArgument(format!(
                "embedding dim {} does not match word_dim {}",
                embeddings.dim(),
                config.word_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut store = ParamStore::new();
        let s = &mut store;
        let d = config.dim;
        let inventory = ModuleInventory::new();

        let encoder = LstmCell::new(s, "encoder", config.word_dim, d, rng);
        let control_in = Mlp::new(s, "controller.input", &[2 * d, d, d], Activation::Relu, rng);
        // u gates the word states; near zero it would hide them from the scorer
        if let Some(b) = control_in.layers.last().and_then(|l| l.bias) {
            s.get_mut(b).data_mut().fill(GATE_BIAS_INIT);
        }
        let word_scorer = Mlp::new(s, "controller.word", &[d, d, 1], Activation::Relu, rng);
        let weight_head =
            Mlp::new(s, "controller.weights", &[d, d, inventory.len()], Activation::Relu, rng);

        let graph_modules = Modality::ALL
            .iter()
            .map(|&m| {
                let nd = config.node_dims[m.index()];
                let ed = config.edge_dims[m.index()];
                GraphModules {
                    find: FindModule::new(s, &format!("{m}.find"), nd, d, rng),
                    filter: FindModule::new(s, &format!("{m}.filter"), nd, d, rng),
                    relate: RelateModule::new(s, &format!("{m}.relate"), ed, d, rng),
                }
            })
            .collect();
        let cross = inventory
            .slots()
            .iter()
            .filter_map(|slot| {
                let src = slot.source?;
                Some(CrossGraphModule::new(
                    s,
                    &slot.name,
                    src,
                    slot.target,
                    config.node_dims[src.index()],
                    config.node_dims[slot.target.index()],
                    d,
                    rng,
                ))
            })
            .collect();
        let readout = Modality::ALL
            .iter()
            .map(|&m| Linear::new(s, &format!("answer.{m}"), config.node_dims[m.index()], d, true, rng))
            .collect();
        let question_readout = Linear::new(s, "answer.question", d, d, true, rng);
        let answer_mlp =
            Mlp::new(s, "answer.mlp", &[4 * d, d, config.answers.len()], Activation::Relu, rng);

        Ok(Model {
            config,
            store,
            embeddings,
            inventory,
            encoder,
            control_in,
            word_scorer,
            weight_head,
            graph_modules,
            cross,
            readout,
            question_readout,
            answer_mlp,
        })
    }

    pub fn answer_index(&self, answer: &str) -> Option<usize> {
        self.config.answers.iter().position(|a| a == answer)
    }

    /// LSTM pass over the (truncated) question; padded rows are zero.
    pub fn encode_question(
        &self,
        tape: &Tape,
        store: &ParamStore,
        tokens: &[String],
    ) -> Result<QuestionEncoding> {
        let len = self.config.question_len;
        let tokens: Vec<String> = tokens
            .iter()
            .map(|t| normalize(t))
            .filter(|t| !t.is_empty())
            .take(len)
            .collect();
        if tokens.is_empty() {
            return Err(Error::Empty("question"));
        }
        let d = self.config.dim;
        let zero = tape.leaf(Tensor::zeros(&[d]));
        let (mut h, mut c) = (zero, zero);
        let mut rows = Vec::with_capacity(len);
        for tok in &tokens {
            let x = self.embeddings.embed_phrase(tok).vector;
            (h, c) = self.encoder.step(tape, store, tape.leaf(Tensor::vector(x)), h, c)?;
            rows.push(h);
        }
        let question = h;
        rows.resize(len, zero);
        let valid_len = tokens.len();
        Ok(QuestionEncoding {
            word_states: tape.stack_rows(&rows)?,
            question,
            mask: (0..len).map(|i| i < valid_len).collect(),
            tokens,
            valid_len,
        })
    }

    /// `u = f([q; c_prev])`, `α = softmax(f(u ⊙ h_l))` over valid words,
    /// `c = Σ α_l h_l`, `w = softmax(f(u))` over enabled modules.
    pub fn step_controller(
        &self,
        tape: &Tape,
        store: &ParamStore,
        enc: &QuestionEncoding,
        prev_query: Var,
        enabled: &[bool],
    ) -> Result<StepVars> {
        let u = self
            .control_in
            .forward(tape, store, tape.concat(&[enc.question, prev_query])?)?;
        let gated = tape.mul(tape.broadcast_rows(u, enc.mask.len())?, enc.word_states)?;
        let scores = self.word_scorer.forward(tape, store, gated)?;
        let scores = tape.reshape(scores, vec![enc.mask.len()])?;
        let word_attention = tape.masked_softmax(scores, &enc.mask)?;
        let query = tape.tmatvec(enc.word_states, word_attention)?;
        let logits = self.weight_head.forward(tape, store, u)?;
        let module_weights = tape.masked_softmax(logits, enabled)?;
        Ok(StepVars {
            intermediate: u,
            query,
            word_attention,
            module_weights,
        })
    }

    fn prepare(&self, tape: &Tape, store: &ParamStore, graphs: &[GraphVars]) -> Result<Vec<Prepared>> {
        Modality::ALL
            .iter()
            .map(|&m| {
                let g = &graphs[m.index()];
                let gm = &self.graph_modules[m.index()];
                let cross = self
                    .inventory
                    .partition(m)
                    .filter(|&i| self.inventory.slots()[i].kind == ModuleKind::CrossGraph)
                    .map(|i| self.cross[self.cross_index(i)].project_target(tape, store, g))
                    .collect::<Result<_>>()?;
                Ok(Prepared {
                    find: gm.find.project_nodes(tape, store, g)?,
                    filter: gm.filter.project_nodes(tape, store, g)?,
                    relate: gm.relate.project_edges(tape, store, g)?,
                    cross,
                })
            })
            .collect()
    }

    fn cross_index(&self, slot: usize) -> usize {
        self.inventory.slots()[..slot]
            .iter()
            .filter(|s| s.kind == ModuleKind::CrossGraph)
            .count()
    }

    /// One weighted step: every enabled module runs and each graph takes the
    /// convex combination of its partition's outputs.
    #[allow(clippy::too_many_arguments)]
    fn execute_step(
        &self,
        tape: &Tape,
        store: &ParamStore,
        graphs: &[GraphVars],
        prepared: &[Prepared],
        history: &[[Var; 3]],
        weights: Var,
        query: Var,
    ) -> Result<[Var; 3]> {
        let prev = history[history.len() - 1];
        let lagged = history[history.len().saturating_sub(self.config.and_lag)];
        let wv = tape.value(weights);
        let mut out = prev;
        for m in Modality::ALL {
            let gi = m.index();
            let g = &graphs[gi];
            let gm = &self.graph_modules[gi];
            let prep = &prepared[gi];
            let range = self.inventory.partition(m);
            let mut cross_seen = 0;
            let mut outputs = Vec::with_capacity(range.len());
            for i in range.clone() {
                let slot = &self.inventory.slots()[i];
                if slot.kind == ModuleKind::CrossGraph {
                    cross_seen += 1;
                }
                // a module with exactly zero weight contributes nothing
                if wv.data()[i] == 0.0 {
                    outputs.push(prev[gi]);
                    continue;
                }
                let a = match slot.kind {
                    ModuleKind::Find => gm.find.attend(tape, store, prep.find, query)?,
                    ModuleKind::And => modules::and(tape, prev[gi], lagged[gi])?,
                    ModuleKind::Filter => {
                        let found = gm.filter.attend(tape, store, prep.filter, query)?;
                        modules::filter(tape, prev[gi], found)?
                    }
                    ModuleKind::Relate => {
                        gm.relate.attend(tape, store, g, prep.relate, prev[gi], query)?
                    }
                    ModuleKind::NoOp => modules::noop(prev[gi]),
                    ModuleKind::CrossGraph => {
                        let src = slot.source.expect("crossgraph slot has a source").index();
                        self.cross[self.cross_index(i)].attend(
                            tape,
                            store,
                            &graphs[src],
                            g,
                            prep.cross[cross_seen - 1],
                            prev[src],
                            prev[gi],
                        )?
                    }
                    ModuleKind::Describe => unreachable!("describe is not in the inventory"),
                };
                outputs.push(a);
            }
            let part = tape.slice(weights, range.start, range.len())?;
            let part = tape.normalize_l1(part)?;
            out[gi] = tape.mix(part, &outputs)?;
        }
        Ok(out)
    }

    /// `f([W₈y₁; W₉y₂; W₁₀y₃; W₁₁q])` with `y_g = Describe(a_g, X_g)`.
    pub fn predict_answer(
        &self,
        tape: &Tape,
        store: &ParamStore,
        graphs: &[GraphVars],
        maps: &[Var; 3],
        question: Var,
    ) -> Result<Var> {
        let mut parts = Vec::with_capacity(4);
        for m in Modality::ALL {
            let y = modules::describe(tape, maps[m.index()], &graphs[m.index()])?;
            parts.push(self.readout[m.index()].forward(tape, store, y)?);
        }
        parts.push(self.question_readout.forward(tape, store, question)?);
        self.answer_mlp.forward(tape, store, tape.concat(&parts)?)
    }

    pub fn run(
        &self,
        tape: &Tape,
        graphs: &MultiLayerGraph,
        tokens: &[String],
        options: &RunOptions,
    ) -> Result<RunOutput> {
        self.run_with_store(tape, &self.store, graphs, tokens, options)
    }

    /// Full reasoning loop with an explicit parameter store.
    pub fn run_with_store(
        &self,
        tape: &Tape,
        store: &ParamStore,
        graphs: &MultiLayerGraph,
        tokens: &[String],
        options: &RunOptions,
    ) -> Result<RunOutput> {
        let graphs: Cow<MultiLayerGraph> = if options.ablation.graphs.is_empty() {
            Cow::Borrowed(graphs)
        } else {
            Cow::Owned(graphs.with_placeholders(&options.ablation.graphs))
        };
        for m in Modality::ALL {
            let g = graphs.layer(m);
            if g.node_dim() != self.config.node_dims[m.index()]
                || g.edge_dim() != self.config.edge_dims[m.index()]
            {
                return Err(Error::InvalidArgument(format!(
                    "{m} graph has node/edge dims {}/{}, model expects {}/{}",
                    g.node_dim(),
                    g.edge_dim(),
                    self.config.node_dims[m.index()],
                    self.config.edge_dims[m.index()]
                )));
            }
        }
        let steps = self.config.steps;
        if let Some(forced) = &options.forced_weights {
            if forced.len() != steps || forced.iter().any(|w| w.len() != self.inventory.len()) {
                return Err(Error::InvalidArgument(format!(
                    "forced weights must be {steps} vectors of length {}",
                    self.inventory.len()
                )));
            }
        }

        let enabled = self.inventory.enabled_mask(&options.ablation);
        let enc = self.encode_question(tape, store, tokens)?;
        let gv: Vec<GraphVars> = graphs.layers().map(|g| GraphVars::new(tape, g)).collect();
        let prepared = self.prepare(tape, store, &gv)?;

        let init = [gv[0].uniform(tape), gv[1].uniform(tape), gv[2].uniform(tape)];
        let mut maps = vec![init];
        let mut query = tape.leaf(Tensor::zeros(&[self.config.dim]));
        let mut step_vars = Vec::with_capacity(steps);
        let mut records = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut sv = self.step_controller(tape, store, &enc, query, &enabled)?;
            if let Some(forced) = &options.forced_weights {
                sv.module_weights = tape.leaf(Tensor::vector(forced[t].clone()));
            }
            let next = self.execute_step(tape, store, &gv, &prepared, &maps, sv.module_weights, sv.query)?;
            records.push(StepRecord {
                step: t,
                module_weights: tape.value(sv.module_weights).data().to_vec(),
                word_attention: tape.value(sv.word_attention).data().to_vec(),
                node_attention: next.map(|v| tape.value(v).data().to_vec()),
            });
            maps.push(next);
            step_vars.push(sv);
            query = sv.query;
        }
        let last = *maps.last().expect("at least one step");
        let logits = self.predict_answer(tape, store, &gv, &last, enc.question)?;
        Ok(RunOutput {
            logits,
            encoding: enc,
            steps: step_vars,
            maps,
            records,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::HeteroGraph;

    pub(crate) fn tiny_graphs() -> MultiLayerGraph {
        let mk = |m: Modality, rows: Vec<Vec<f64>>, edges: Vec<(usize, usize)>| {
            let n = rows.len();
            let e = edges.len();
            HeteroGraph::new(
                m,
                Tensor::from_rows(&rows, 2).unwrap(),
                (0..n).map(|i| format!("{m}{i}")).collect(),
                edges,
                vec!["r".into(); e],
                Tensor::from_rows(&vec![vec![0.5, -1.0, 0.25]; e], 3).unwrap(),
            )
            .unwrap()
        };
        MultiLayerGraph::new(
            mk(Modality::Visual, vec![vec![1., 0.], vec![0., 1.], vec![0.5, 0.5]], vec![(0, 1), (1, 2)]),
            mk(Modality::Semantic, vec![vec![0.2, 0.1], vec![-1., 1.]], vec![(1, 0)]),
            mk(Modality::Commonsense, vec![vec![0.3, 0.3], vec![1., -1.], vec![0., 2.]], vec![(0, 2)]),
        )
        .unwrap()
    }

    pub(crate) fn tiny_model(steps: usize) -> Model {
        let mut emb = EmbeddingTable::new(3);
        emb.insert("what", vec![0.1, 0.2, 0.3]).unwrap();
        emb.insert("color", vec![-0.5, 0.0, 0.4]).unwrap();
        let config = ModelConfig {
            dim: 4,
            word_dim: 3,
            node_dims: [2, 2, 2],
            edge_dims: [3, 3, 3],
            question_len: 5,
            steps,
            and_lag: 2,
            answers: vec!["a".into(), "b".into(), "c".into()],
        };
        Model::new(config, emb, 11).unwrap()
    }

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn inventory_layout() {
        let inv = ModuleInventory::new();
        assert_eq!(inv.len(), 21);
        for m in Modality::ALL {
            let kinds: Vec<_> = inv.slots()[inv.partition(m)].iter().map(|s| s.kind).collect();
            assert_eq!(kinds.iter().filter(|&&k| k == ModuleKind::CrossGraph).count(), 2);
            for k in PARTITION {
                assert!(kinds.contains(&k));
            }
            assert!(inv.slots()[inv.partition(m)].iter().all(|s| s.target == m));
        }
        assert_eq!(inv.index_of("commonsense.crossgraph_from_visual"), Some(19));
    }

    #[test]
    fn ablation_flags_parse() {
        let a = Ablation::from_flags(&["kg", "relate", "kg"]).unwrap();
        assert_eq!(a.graphs, vec![Modality::Commonsense]);
        assert_eq!(a.modules, vec![ModuleKind::Relate]);
        assert_eq!(a.flags(), vec!["kg", "relate"]);
        assert!(Ablation::from_flags(&["find"]).is_err());
    }

    #[test]
    fn empty_question_is_rejected() {
        let model = tiny_model(2);
        let tape = Tape::new();
        let err = model
            .run(&tape, &tiny_graphs(), &[], &RunOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::Empty("question")));
    }

    #[test]
    fn long_questions_are_truncated() {
        let model = tiny_model(1);
        let tape = Tape::new();
        let enc = model
            .encode_question(&tape, &model.store, &toks("what color what color what color what"))
            .unwrap();
        assert_eq!(enc.valid_len, 5);
        assert_eq!(tape.shape(enc.word_states), vec![5, 4]);
    }

    #[test]
    fn one_token_question() {
        let model = tiny_model(1);
        let tape = Tape::new();
        let enc = model.encode_question(&tape, &model.store, &toks("what")).unwrap();
        let ws = tape.value(enc.word_states);
        assert_eq!(ws.row(0), tape.value(enc.question).data());
        assert!(ws.data()[4..].iter().all(|&v| v == 0.0));
        let zero = tape.leaf(Tensor::zeros(&[4]));
        let sv = model
            .step_controller(&tape, &model.store, &enc, zero, &[true; 21])
            .unwrap();
        assert_eq!(tape.value(sv.word_attention).data(), &[1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(tape.value(sv.query).data(), ws.row(0));
    }

    #[test]
    fn run_records_every_step() {
        let model = tiny_model(3);
        let tape = Tape::new();
        let out = model
            .run(&tape, &tiny_graphs(), &toks("what color"), &RunOptions::default())
            .unwrap();
        assert_eq!(out.records.len(), 3);
        assert_eq!(tape.shape(out.logits), vec![3]);
        for r in &out.records {
            assert_eq!(r.module_weights.len(), 21);
            assert_eq!(r.word_attention.len(), 5);
            assert_eq!(r.node_attention[0].len(), 3);
            assert_eq!(r.node_attention[1].len(), 2);
        }
    }

    #[test]
    fn module_ablation_zeroes_weights() {
        let model = tiny_model(2);
        let tape = Tape::new();
        let opts = RunOptions::with_ablation(Ablation::from_flags(&["crossgraph"]).unwrap());
        let out = model.run(&tape, &tiny_graphs(), &toks("what color"), &opts).unwrap();
        for r in &out.records {
            for (slot, w) in model.inventory.slots().iter().zip(&r.module_weights) {
                if slot.kind == ModuleKind::CrossGraph {
                    assert_eq!(*w, 0.0);
                }
            }
        }
    }

    #[test]
    fn graph_ablation_uses_placeholder() {
        let model = tiny_model(2);
        let tape = Tape::new();
        let opts = RunOptions::with_ablation(Ablation::from_flags(&["sg"]).unwrap());
        let out = model.run(&tape, &tiny_graphs(), &toks("what color"), &opts).unwrap();
        for r in &out.records {
            assert_eq!(r.node_attention[1].len(), 1);
            assert!((r.node_attention[1][0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn half_half_mix() {
        let model = tiny_model(1);
        let tape = Tape::new();
        let graphs = tiny_graphs();
        // Find and NoOp of the semantic graph at 0.5 each, elsewhere NoOp.
        let inv = &model.inventory;
        let mut w = vec![0.0; 21];
        w[inv.index_of("visual.noop").unwrap()] = 1.0;
        w[inv.index_of("commonsense.noop").unwrap()] = 1.0;
        w[inv.index_of("semantic.noop").unwrap()] = 0.5;
        w[inv.index_of("semantic.find").unwrap()] = 0.5;
        let opts = RunOptions {
            forced_weights: Some(vec![w]),
            ..Default::default()
        };
        let out = model.run(&tape, &graphs, &toks("what color"), &opts).unwrap();
        let gv = GraphVars::new(&tape, graphs.layer(Modality::Semantic));
        let found = model.graph_modules[1]
            .find
            .forward(&tape, &model.store, &gv, out.steps[0].query)
            .unwrap();
        let found = tape.value(found);
        let got = &out.records[0].node_attention[1];
        for (g, f) in got.iter().zip(found.data()) {
            assert!((g - (0.5 * f + 0.25)).abs() < 1e-15);
        }
        assert_eq!(out.records[0].node_attention[0], vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut model = tiny_model(1);
        model.config.node_dims[0] = 7;
        let tape = Tape::new();
        assert!(model
            .run(&tape, &tiny_graphs(), &toks("what"), &RunOptions::default())
            .is_err());
    }
}
