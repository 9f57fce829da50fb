//! Differentiable reasoning modules over attention maps.
//!
//! Every module that emits an attention map returns it L1-normalized, so
//! sums such as `a₁ ⊕ a₂` stay distributions.

use std::fmt;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{HeteroGraph, Modality};
use crate::nn::{fuse, Activation, Linear, Mlp};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModuleKind {
    Find,
    And,
    Filter,
    Relate,
    #[serde(rename = "crossgraph")]
    CrossGraph,
    Describe,
    #[serde(rename = "noop")]
    NoOp,
}

impl ModuleKind {
    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Find => "find",
            ModuleKind::And => "and",
            ModuleKind::Filter => "filter",
            ModuleKind::Relate => "relate",
            ModuleKind::CrossGraph => "crossgraph",
            ModuleKind::Describe => "describe",
            ModuleKind::NoOp => "noop",
        }
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One graph layer placed on a tape.
#[derive(Clone, Debug)]
pub struct GraphVars {
    pub modality: Modality,
    pub num_nodes: usize,
    /// `n × d_node`
    pub nodes: Var,
    pub edges: Rc<[(usize, usize)]>,
    /// `|E| × d_edge`, absent when the graph has no edges.
    pub edge_features: Option<Var>,
}

impl GraphVars {
    pub fn new(tape: &Tape, graph: &HeteroGraph) -> Self {
        let edge_features =
            (graph.num_edges() > 0).then(|| tape.leaf(graph.edge_features.clone()));
        GraphVars {
            modality: graph.modality,
            num_nodes: graph.num_nodes(),
            nodes: tape.leaf(graph.node_features.clone()),
            edges: Rc::from(graph.edges.clone()),
            edge_features,
        }
    }

    pub fn uniform(&self, tape: &Tape) -> Var {
        tape.leaf(Tensor::full(&[self.num_nodes], 1.0 / self.num_nodes as f64))
    }
}

/// `a = softmax(f_mlp(F(W₁X, W₂c)))`
#[derive(Clone, Debug)]
pub struct FindModule {
    pub node_proj: Linear,
    pub query_proj: Linear,
    pub scorer: Mlp,
}

impl FindModule {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        node_dim: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        FindModule {
            node_proj: Linear::new(store, &format!("{name}.node_proj"), node_dim, dim, false, rng),
            query_proj: Linear::new(store, &format!("{name}.query_proj"), dim, dim, false, rng),
            scorer: Mlp::new(store, &format!("{name}.mlp"), &[dim, dim, 1], Activation::Relu, rng),
        }
    }

    /// `W₁X`, reusable across reasoning steps.
    pub fn project_nodes(&self, tape: &Tape, store: &ParamStore, g: &GraphVars) -> Result<Var> {
        self.node_proj.forward(tape, store, g.nodes)
    }

    pub fn attend(
        &self,
        tape: &Tape,
        store: &ParamStore,
        projected_nodes: Var,
        query: Var,
    ) -> Result<Var> {
        let n = tape.shape(projected_nodes)[0];
        let q = self.query_proj.forward(tape, store, query)?;
        let fused = fuse(tape, projected_nodes, tape.broadcast_rows(q, n)?)?;
        let scores = self.scorer.forward(tape, store, fused)?;
        tape.softmax(tape.reshape(scores, vec![n])?, 0)
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, g: &GraphVars, query: Var) -> Result<Var> {
        let projected = self.project_nodes(tape, store, g)?;
        self.attend(tape, store, projected, query)
    }
}

/// `norm(a₁ ⊕ a₂)`
pub fn and(tape: &Tape, a1: Var, a2: Var) -> Result<Var> {
    tape.normalize_l1(tape.add(a1, a2)?)
}

/// `norm(a ⊕ Find(X, c))`, given the Find output.
pub fn filter(tape: &Tape, a: Var, found: Var) -> Result<Var> {
    and(tape, a, found)
}

pub fn noop(a: Var) -> Var {
    a
}

/// `y = Xᵀa`
pub fn describe(tape: &Tape, a: Var, g: &GraphVars) -> Result<Var> {
    tape.tmatvec(g.nodes, a)
}

pub const RELATE_BIAS_INIT: f64 = 1.0;

/// Edge attention `Wᵢⱼ = ReLU(f_mlp(W₃c ⊙ W₄eᵢⱼ))` and transfer `norm(Wᵀa)`.
#[derive(Clone, Debug)]
pub struct RelateModule {
    pub query_proj: Linear,
    pub edge_proj: Linear,
    pub scorer: Mlp,
}

impl RelateModule {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        edge_dim: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let scorer = Mlp::new(store, &format!("{name}.mlp"), &[dim, dim, 1], Activation::Relu, rng);
        // start every edge open; a negative output bias would zero the whole map
        if let Some(b) = scorer.layers.last().and_then(|l| l.bias) {
            store.get_mut(b).data_mut().fill(RELATE_BIAS_INIT);
        }
        RelateModule {
            query_proj: Linear::new(store, &format!("{name}.query_proj"), dim, dim, false, rng),
            edge_proj: Linear::new(store, &format!("{name}.edge_proj"), edge_dim, dim, false, rng),
            scorer,
        }
    }

    /// `W₄E`, or `None` for an edgeless graph.
    pub fn project_edges(
        &self,
        tape: &Tape,
        store: &ParamStore,
        g: &GraphVars,
    ) -> Result<Option<Var>> {
        g.edge_features
            .map(|e| self.edge_proj.forward(tape, store, e))
            .transpose()
    }

    /// Dense `n × n` edge attention; zero off the edge list.
    pub fn edge_attention(
        &self,
        tape: &Tape,
        store: &ParamStore,
        g: &GraphVars,
        projected_edges: Var,
        query: Var,
    ) -> Result<Var> {
        let num_edges = g.edges.len();
        let q = self.query_proj.forward(tape, store, query)?;
        let gated = tape.mul(tape.broadcast_rows(q, num_edges)?, projected_edges)?;
        let scores = tape.relu(self.scorer.forward(tape, store, gated)?);
        let scores = tape.reshape(scores, vec![num_edges])?;
        tape.scatter_edges(scores, Rc::clone(&g.edges), g.num_nodes)
    }

    pub fn attend(
        &self,
        tape: &Tape,
        store: &ParamStore,
        g: &GraphVars,
        projected_edges: Option<Var>,
        a: Var,
        query: Var,
    ) -> Result<Var> {
        let moved = match projected_edges {
            Some(pe) => {
                let w = self.edge_attention(tape, store, g, pe, query)?;
                tape.tmatvec(w, a)?
            }
            None => tape.leaf(Tensor::zeros(&[g.num_nodes])),
        };
        tape.normalize_l1(moved)
    }

    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        g: &GraphVars,
        a: Var,
        query: Var,
    ) -> Result<Var> {
        let pe = self.project_edges(tape, store, g)?;
        self.attend(tape, store, g, pe, a, query)
    }
}

/// Transfers attention from `source` to `target`:
/// `a′ₙ(i) = softmax(W₇ tanh(W₅Xₘᵀaₘ + W₆Xₙ(i)))`, then `norm(a′ₙ + aₙ)`.
#[derive(Clone, Debug)]
pub struct CrossGraphModule {
    pub source: Modality,
    pub target: Modality,
    pub source_proj: Linear,
    pub target_proj: Linear,
    pub scorer: Linear,
}

impl CrossGraphModule {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        source: Modality,
        target: Modality,
        source_dim: usize,
        target_dim: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        CrossGraphModule {
            source,
            target,
            source_proj: Linear::new(store, &format!("{name}.source_proj"), source_dim, dim, false, rng),
            target_proj: Linear::new(store, &format!("{name}.target_proj"), target_dim, dim, true, rng),
            scorer: Linear::new(store, &format!("{name}.scorer"), dim, 1, false, rng),
        }
    }

    fn check(&self, source: &GraphVars, target: &GraphVars) -> Result<()> {
        if source.modality != self.source || target.modality != self.target {
            return Err(Error::InvalidArgument(format!(
                "crossgraph {}->{} applied to {}->{}",
                self.source, self.target, source.modality, target.modality
            )));
        }
        Ok(())
    }

    /// `W₆Xₙ`, reusable across reasoning steps.
    pub fn project_target(
        &self,
        tape: &Tape,
        store: &ParamStore,
        target: &GraphVars,
    ) -> Result<Var> {
        self.target_proj.forward(tape, store, target.nodes)
    }

    /// `a′ₙ` alone, before it is added to the target's current attention.
    pub fn transfer(
        &self,
        tape: &Tape,
        store: &ParamStore,
        source: &GraphVars,
        projected_target: Var,
        source_attention: Var,
    ) -> Result<Var> {
        let summary = tape.tmatvec(source.nodes, source_attention)?;
        let s = self.source_proj.forward(tape, store, summary)?;
        let hidden = tape.tanh(tape.add_row(projected_target, s)?);
        let logits = self.scorer.forward(tape, store, hidden)?;
        let n = tape.shape(logits)[0];
        tape.softmax(tape.reshape(logits, vec![n])?, 0)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn attend(
        &self,
        tape: &Tape,
        store: &ParamStore,
        source: &GraphVars,
        target: &GraphVars,
        projected_target: Var,
        source_attention: Var,
        target_attention: Var,
    ) -> Result<Var> {
        self.check(source, target)?;
        let transferred = self.transfer(tape, store, source, projected_target, source_attention)?;
        tape.normalize_l1(tape.add(transferred, target_attention)?)
    }

    /// The query is accepted for signature parity with the other modules but does
    /// not enter the transfer.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        source: &GraphVars,
        target: &GraphVars,
        source_attention: Var,
        target_attention: Var,
        _query: Option<Var>,
    ) -> Result<Var> {
        self.check(source, target)?;
        let pt = self.project_target(tape, store, target)?;
        self.attend(tape, store, source, target, pt, source_attention, target_attention)
    }
}
