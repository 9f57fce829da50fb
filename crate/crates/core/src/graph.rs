//! Single-modality graphs, the three-layer container and attention maps.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::MIN_MASS;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Semantic,
    Commonsense,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Semantic, Modality::Commonsense];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Semantic => "semantic",
            Modality::Commonsense => "commonsense",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeteroGraph {
    pub modality: Modality,
    /// `n × d_node`
    pub node_features: Tensor,
    pub node_labels: Vec<String>,
    /// Directed `(source, target)` pairs.
    pub edges: Vec<(usize, usize)>,
    pub edge_labels: Vec<String>,
    /// `|E| × d_edge`
    pub edge_features: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    NoNodes,
    FeatureRank { what: &'static str, shape: Vec<usize> },
    NodeLabelCount { labels: usize, nodes: usize },
    EndpointOutOfRange { edge: usize, source: usize, target: usize, nodes: usize },
    EdgeFeatureCount { rows: usize, edges: usize },
    EdgeLabelCount { labels: usize, edges: usize },
    NonFinite { what: &'static str },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoNodes => write!(f, "graph has no nodes"),
            Violation::FeatureRank { what, shape } => {
                write!(f, "{what} must be a matrix, got shape {shape:?}")
            }
            Violation::NodeLabelCount { labels, nodes } => {
                write!(f, "{labels} node labels for {nodes} nodes")
            }
            Violation::EndpointOutOfRange {
                edge,
                source,
                target,
                nodes,
            } => write!(f, "edge {edge} ({source}, {target}) has an endpoint outside 0..{nodes}"),
            Violation::EdgeFeatureCount { rows, edges } => {
                write!(f, "{rows} edge feature rows for {edges} edges")
            }
            Violation::EdgeLabelCount { labels, edges } => {
                write!(f, "{labels} edge labels for {edges} edges")
            }
            Violation::NonFinite { what } => write!(f, "{what} contain non-finite values"),
        }
    }
}

impl HeteroGraph {
    /// Builds a graph and rejects it if any invariant fails.
    pub fn new(
        modality: Modality,
        node_features: Tensor,
        node_labels: Vec<String>,
        edges: Vec<(usize, usize)>,
        edge_labels: Vec<String>,
        edge_features: Tensor,
    ) -> Result<Self> {
        let graph = HeteroGraph {
            modality,
            node_features,
            node_labels,
            edges,
            edge_labels,
            edge_features,
        };
        validate_graph(&graph).map_err(violations_to_error)?;
        Ok(graph)
    }

    /// One zero-feature node and no edges, standing in for an ablated layer.
    pub fn placeholder(modality: Modality, node_dim: usize, edge_dim: usize) -> Self {
        HeteroGraph {
            modality,
            node_features: Tensor::zeros(&[1, node_dim]),
            node_labels: vec!["<none>".to_owned()],
            edges: Vec::new(),
            edge_labels: Vec::new(),
            edge_features: Tensor::zeros(&[0, edge_dim]),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.node_labels.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn node_dim(&self) -> usize {
        self.node_features.cols()
    }

    pub fn edge_dim(&self) -> usize {
        self.edge_features.cols()
    }

    pub fn node_index(&self, label: &str) -> Option<usize> {
        self.node_labels.iter().position(|l| l == label)
    }

    /// Outgoing `(edge index, target)` pairs of `node`.
    pub fn out_edges(&self, node: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges
            .iter()
            .enumerate()
            .filter(move |(_, (s, _))| *s == node)
            .map(|(e, (_, t))| (e, *t))
    }
}

/// Checks every structural invariant and lists all violations found.
pub fn validate_graph(g: &HeteroGraph) -> std::result::Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    let n = g.node_labels.len();
    if n == 0 {
        violations.push(Violation::NoNodes);
    }
    if g.node_features.rank() != 2 {
        violations.push(Violation::FeatureRank {
            what: "node features",
            shape: g.node_features.shape().to_vec(),
        });
    } else if g.node_features.rows() != n {
        violations.push(Violation::NodeLabelCount {
            labels: n,
            nodes: g.node_features.rows(),
        });
    }
    for (e, &(source, target)) in g.edges.iter().enumerate() {
        if source >= n || target >= n {
            violations.push(Violation::EndpointOutOfRange {
                edge: e,
                source,
                target,
                nodes: n,
            });
        }
    }
    if g.edge_features.rank() != 2 {
        violations.push(Violation::FeatureRank {
            what: "edge features",
            shape: g.edge_features.shape().to_vec(),
        });
    } else if g.edge_features.rows() != g.edges.len() {
        violations.push(Violation::EdgeFeatureCount {
            rows: g.edge_features.rows(),
            edges: g.edges.len(),
        });
    }
    if g.edge_labels.len() != g.edges.len() {
        violations.push(Violation::EdgeLabelCount {
            labels: g.edge_labels.len(),
            edges: g.edges.len(),
        });
    }
    if !g.node_features.is_finite() {
        violations.push(Violation::NonFinite {
            what: "node features",
        });
    }
    if !g.edge_features.is_finite() {
        violations.push(Violation::NonFinite {
            what: "edge features",
        });
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

pub(crate) fn violations_to_error(violations: Vec<Violation>) -> Error {
    Error::Validation(violations.iter().map(ToString::to_string).collect())
}

/// The visual, semantic and commonsense layers describing one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiLayerGraph {
    pub visual: HeteroGraph,
    pub semantic: HeteroGraph,
    pub commonsense: HeteroGraph,
}

impl MultiLayerGraph {
    pub fn new(visual: HeteroGraph, semantic: HeteroGraph, commonsense: HeteroGraph) -> Result<Self> {
        let graphs = MultiLayerGraph {
            visual,
            semantic,
            commonsense,
        };
        for m in Modality::ALL {
            if graphs.layer(m).modality != m {
                return Err(Error::InvalidArgument(format!(
                    "{m} slot holds a {} graph",
                    graphs.layer(m).modality
                )));
            }
        }
        Ok(graphs)
    }

    pub fn layer(&self, m: Modality) -> &HeteroGraph {
        match m {
            Modality::Visual => &self.visual,
            Modality::Semantic => &self.semantic,
            Modality::Commonsense => &self.commonsense,
        }
    }

    pub fn layer_mut(&mut self, m: Modality) -> &mut HeteroGraph {
        match m {
            Modality::Visual => &mut self.visual,
            Modality::Semantic => &mut self.semantic,
            Modality::Commonsense => &mut self.commonsense,
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &HeteroGraph> {
        [&self.visual, &self.semantic, &self.commonsense].into_iter()
    }

    /// Copy with the given layers swapped for one-node placeholders of the same dimensions.
    pub fn with_placeholders(&self, ablated: &[Modality]) -> MultiLayerGraph {
        let mut out = self.clone();
        for &m in ablated {
            let g = self.layer(m);
            *out.layer_mut(m) = HeteroGraph::placeholder(m, g.node_dim(), g.edge_dim());
        }
        out
    }
}

/// A distribution over one layer's nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub layer: Modality,
    pub weights: Vec<f64>,
}

impl AttentionMap {
    pub fn uniform(g: &HeteroGraph) -> Result<Self> {
        let n = g.num_nodes();
        if n == 0 {
            return Err(Error::Empty("uniform_attention"));
        }
        Ok(AttentionMap {
            layer: g.modality,
            weights: vec![1.0 / n as f64; n],
        })
    }

    /// Rescales to unit mass; total mass under [`MIN_MASS`] gives the uniform map.
    pub fn l1_normalize(&self) -> Result<Self> {
        if self.weights.is_empty() {
            return Err(Error::Empty("l1_normalize"));
        }
        if let Some((index, &value)) = self.weights.iter().enumerate().find(|(_, w)| **w < 0.0) {
            return Err(Error::NegativeWeight { index, value });
        }
        let total: f64 = self.weights.iter().sum();
        let n = self.weights.len();
        let weights = if total < MIN_MASS {
            vec![1.0 / n as f64; n]
        } else {
            self.weights.iter().map(|w| w / total).collect()
        };
        Ok(AttentionMap {
            layer: self.layer,
            weights,
        })
    }

    pub fn is_distribution(&self, tol: f64) -> bool {
        is_distribution(&self.weights, tol)
    }
}

/// Nonnegative, finite, and summing to one within `tol`.
pub fn is_distribution(weights: &[f64], tol: f64) -> bool {
    !weights.is_empty()
        && weights.iter().all(|w| w.is_finite() && *w >= 0.0)
        && (weights.iter().sum::<f64>() - 1.0).abs() <= tol
}
