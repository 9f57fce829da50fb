//! Builds the three graph layers from detector, caption-parser and
//! knowledge-base outputs.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{HeteroGraph, Modality};
use crate::tensor::Tensor;

pub const DEFAULT_MAX_OBJECTS: usize = 36;
pub const MAX_CAPTIONS: usize = 10;
pub const DEFAULT_TOP_K: usize = 50;
pub const DEFAULT_SCORE_A: f64 = 0.7;
pub const DEFAULT_SCORE_B: f64 = 0.3;
/// Width of the relative spatial edge feature.
pub const SPATIAL_DIM: usize = 5;
/// Relation phrase linking a caption subject to each of its attributes.
pub const ATTRIBUTE_RELATION: &str = "has attribute";
pub const SPATIAL_RELATION: &str = "spatial";

pub const DEFAULT_RELATIONS: [&str; 10] = [
    "AtLocation",
    "CapableOf",
    "Causes",
    "HasA",
    "HasProperty",
    "IsA",
    "MadeOf",
    "PartOf",
    "RelatedTo",
    "UsedFor",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    pub label: String,
    pub score: f64,
    pub feature: Vec<f64>,
}

impl Detection {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let [_, _, w, h] = self.bbox;
        if !(w > 0.0 && h > 0.0) {
            return Err(format!("bbox width and height must be positive, got {w} x {h}"));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(format!("score {} outside [0, 1]", self.score));
        }
        if self.label.trim().is_empty() {
            return Err("empty label".into());
        }
        if self.bbox.iter().chain(&self.feature).any(|v| !v.is_finite()) {
            return Err("non-finite bbox or feature value".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionTuple {
    pub subject: String,
    pub relation: String,
    pub object: String,
    #[serde(default)]
    pub attributes: Vec<String>,
}

impl CaptionTuple {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.subject.trim().is_empty() || self.object.trim().is_empty() {
            return Err("subject and object must be nonempty".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub score: f64,
}

impl KnowledgeTriple {
    pub fn new(head: &str, relation: &str, tail: &str, score: f64) -> Self {
        KnowledgeTriple {
            head: head.to_owned(),
            relation: relation.to_owned(),
            tail: tail.to_owned(),
            score,
        }
    }

    pub fn validate(&self, whitelist: &[String]) -> std::result::Result<(), String> {
        if !whitelist.iter().any(|r| r == &self.relation) {
            return Err(format!("relation `{}` is not in the whitelist", self.relation));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(format!("score {} outside [0, 1]", self.score));
        }
        if self.head.trim().is_empty() || self.tail.trim().is_empty() {
            return Err("head and tail must be nonempty".into());
        }
        Ok(())
    }
}

pub fn default_whitelist() -> Vec<String> {
    DEFAULT_RELATIONS.iter().map(|r| r.to_string()).collect()
}

/// Lowercased, trimmed form used for entity matching.
pub fn normalize(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Splits a phrase or CamelCase relation name into lowercase tokens.
pub fn tokenize(phrase: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(phrase.len() + 4);
    let mut prev_lower = false;
    for ch in phrase.chars() {
        if ch.is_uppercase() && prev_lower {
            spaced.push(' ');
        }
        prev_lower = ch.is_lowercase() || ch.is_ascii_digit();
        spaced.push(if ch == '_' || ch == '-' { ' ' } else { ch });
    }
    spaced.split_whitespace().map(str::to_lowercase).collect()
}

/// Word vectors of a fixed width. Unknown words embed as zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhraseEmbedding {
    pub vector: Vec<f64>,
    pub oov: usize,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, word: &str, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "embedding for `{word}` has dimension {}, table dimension is {}",
                vector.len(),
                self.dim
            )));
        }
        self.vectors.insert(word.to_lowercase(), vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(&word.to_lowercase()).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.vectors.iter().map(|(w, v)| (w.as_str(), v.as_slice()))
    }

    /// Mean of the token vectors; out-of-vocabulary tokens contribute zeros.
    pub fn embed_phrase(&self, phrase: &str) -> PhraseEmbedding {
        let tokens = tokenize(phrase);
        let mut vector = vec![0.0; self.dim];
        let mut oov = 0;
        for t in &tokens {
            match self.vectors.get(t) {
                Some(v) => vector.iter_mut().zip(v).for_each(|(a, b)| *a += b),
                None => oov += 1,
            }
        }
        if !tokens.is_empty() {
            let n = tokens.len() as f64;
            vector.iter_mut().for_each(|a| *a /= n);
        }
        PhraseEmbedding { vector, oov }
    }
}

/// Counters reported while building graphs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BuildLog {
    pub oov_tokens: usize,
}

fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let x1 = a[0].max(b[0]);
    let y1 = a[1].max(b[1]);
    let x2 = (a[0] + a[2]).min(b[0] + b[2]);
    let y2 = (a[1] + a[3]).min(b[1] + b[3]);
    let inter = (x2 - x1).max(0.0) * (y2 - y1).max(0.0);
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// `[(xⱼ−xᵢ)/wᵢ, (yⱼ−yᵢ)/hᵢ, wⱼ/wᵢ, hⱼ/hᵢ, IoU(i,j)]`
pub fn spatial_feature(from: &[f64; 4], to: &[f64; 4]) -> [f64; SPATIAL_DIM] {
    [
        (to[0] - from[0]) / from[2],
        (to[1] - from[1]) / from[3],
        to[2] / from[2],
        to[3] / from[3],
        iou(from, to),
    ]
}

/// Keeps the `max_objects` highest-scoring detections and connects every ordered pair.
pub fn build_visual_graph(dets: &[Detection], max_objects: usize) -> Result<HeteroGraph> {
    if dets.is_empty() {
        return Err(Error::Empty("build_visual_graph"));
    }
    let problems: Vec<String> = dets
        .iter()
        .enumerate()
        .filter_map(|(i, d)| d.validate().err().map(|e| format!("detection {i}: {e}")))
        .collect();
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }
    let dim = dets[0].feature.len();
    if let Some(i) = dets.iter().position(|d| d.feature.len() != dim) {
        return Err(Error::Validation(vec![format!(
            "detection {i}: feature dimension {} differs from {dim}",
            dets[i].feature.len()
        )]));
    }

    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order.truncate(max_objects.max(1));
    let kept: Vec<&Detection> = order.iter().map(|&i| &dets[i]).collect();

    let n = kept.len();
    let node_features = Tensor::from_rows(
        &kept.iter().map(|d| d.feature.clone()).collect::<Vec<_>>(),
        dim,
    )?;
    let mut edges = Vec::with_capacity(n * (n - 1));
    let mut edge_rows = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                edges.push((i, j));
                edge_rows.push(spatial_feature(&kept[i].bbox, &kept[j].bbox).to_vec());
            }
        }
    }
    let labels = vec![SPATIAL_RELATION.to_owned(); edges.len()];
    HeteroGraph::new(
        Modality::Visual,
        node_features,
        kept.iter().map(|d| d.label.clone()).collect(),
        edges,
        labels,
        Tensor::from_rows(&edge_rows, SPATIAL_DIM)?,
    )
}

/// Interns phrases as nodes in order of first appearance.
#[derive(Default)]
struct NodeInterner {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl NodeInterner {
    fn intern(&mut self, phrase: &str) -> usize {
        let key = normalize(phrase);
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        self.labels.push(key.clone());
        self.index.insert(key, self.labels.len() - 1);
        self.labels.len() - 1
    }

    fn features(&self, emb: &EmbeddingTable, log: &mut BuildLog) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = self
            .labels
            .iter()
            .map(|l| {
                let p = emb.embed_phrase(l);
                log.oov_tokens += p.oov;
                p.vector
            })
            .collect();
        Tensor::from_rows(&rows, emb.dim())
    }
}

/// One node per distinct name or attribute; one edge per distinct
/// `(subject, relation, object)` and per subject attribute.
pub fn build_semantic_graph(
    tuples: &[CaptionTuple],
    emb: &EmbeddingTable,
) -> Result<(HeteroGraph, BuildLog)> {
    if tuples.is_empty() {
        return Err(Error::Empty("build_semantic_graph"));
    }
    let problems: Vec<String> = tuples
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.validate().err().map(|e| format!("caption {i}: {e}")))
        .collect();
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }

    let mut nodes = NodeInterner::default();
    let mut seen = HashSet::new();
    let mut edges = Vec::new();
    let mut labels = Vec::new();
    let mut add_edge = |s: usize, t: usize, rel: String| {
        if seen.insert((s, t, rel.clone())) {
            edges.push((s, t));
            labels.push(rel);
        }
    };
    for tuple in tuples.iter().take(MAX_CAPTIONS) {
        let s = nodes.intern(&tuple.subject);
        let o = nodes.intern(&tuple.object);
        add_edge(s, o, normalize(&tuple.relation));
        for attr in &tuple.attributes {
            if attr.trim().is_empty() {
                continue;
            }
            let a = nodes.intern(attr);
            add_edge(s, a, ATTRIBUTE_RELATION.to_owned());
        }
    }

    let mut log = BuildLog::default();
    let node_features = nodes.features(emb, &mut log)?;
    let edge_rows: Vec<Vec<f64>> = labels
        .iter()
        .map(|l| {
            let p = emb.embed_phrase(l);
            log.oov_tokens += p.oov;
            p.vector
        })
        .collect();
    if log.oov_tokens > 0 {
        log::debug!("semantic graph: {} out-of-vocabulary tokens", log.oov_tokens);
    }
    let graph = HeteroGraph::new(
        Modality::Semantic,
        node_features,
        nodes.labels,
        edges,
        labels,
        Tensor::from_rows(&edge_rows, emb.dim())?,
    )?;
    Ok((graph, log))
}

/// Every triple whose head or tail names one of `labels`, in store order, without duplicates.
pub fn retrieve_first_order_subgraph(
    labels: &[String],
    store: &[KnowledgeTriple],
) -> Vec<KnowledgeTriple> {
    let keys: HashSet<String> = labels.iter().map(|l| normalize(l)).collect();
    let mut seen = HashSet::new();
    store
        .iter()
        .filter(|t| keys.contains(&normalize(&t.head)) || keys.contains(&normalize(&t.tail)))
        .filter(|t| seen.insert((normalize(&t.head), t.relation.clone(), normalize(&t.tail))))
        .cloned()
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTriple {
    pub triple: KnowledgeTriple,
    /// Detection score of the matched object label.
    pub object_score: f64,
    pub score: f64,
}

/// Ranking order: score descending, then head, relation, tail ascending.
pub fn ranking_order(a: &ScoredTriple, b: &ScoredTriple) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.triple.head.cmp(&b.triple.head))
        .then_with(|| a.triple.relation.cmp(&b.triple.relation))
        .then_with(|| a.triple.tail.cmp(&b.triple.tail))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectParams {
    pub a: f64,
    pub b: f64,
    pub k: usize,
}

impl Default for SelectParams {
    fn default() -> Self {
        SelectParams {
            a: DEFAULT_SCORE_A,
            b: DEFAULT_SCORE_B,
            k: DEFAULT_TOP_K,
        }
    }
}

/// Scores each triple `a·S_l + b·S_t` and keeps the top `k`.
///
/// `S_l` is the detection score of the object label the triple touches;
/// when both endpoints match detected labels the larger score is used, and
/// when neither does it is zero.
pub fn rank_triples(
    triples: &[KnowledgeTriple],
    object_scores: &HashMap<String, f64>,
    params: SelectParams,
) -> Result<Vec<ScoredTriple>> {
    if params.k == 0 {
        return Err(Error::InvalidArgument("top-K must be positive".into()));
    }
    if !(params.a >= 0.0 && params.b >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "score weights must be nonnegative, got a={} b={}",
            params.a, params.b
        )));
    }
    let normalized: HashMap<String, f64> = object_scores
        .iter()
        .map(|(k, v)| (normalize(k), *v))
        .collect();
    let lookup = |s: &str| normalized.get(&normalize(s)).copied();
    let mut scored: Vec<ScoredTriple> = triples
        .iter()
        .map(|t| {
            let object_score = match (lookup(&t.head), lookup(&t.tail)) {
                (Some(h), Some(tl)) => h.max(tl),
                (Some(s), None) | (None, Some(s)) => s,
                (None, None) => 0.0,
            };
            ScoredTriple {
                triple: t.clone(),
                object_score,
                score: params.a * object_score + params.b * t.score,
            }
        })
        .collect();
    scored.sort_by(ranking_order);
    scored.truncate(params.k);
    Ok(scored)
}

/// Builds the commonsense layer from the ranked top-K triples.
///
/// Edge features are the relation-phrase embedding followed by the edge score.
pub fn score_and_select(
    triples: &[KnowledgeTriple],
    object_scores: &HashMap<String, f64>,
    params: SelectParams,
    emb: &EmbeddingTable,
) -> Result<(HeteroGraph, BuildLog)> {
    let ranked = rank_triples(triples, object_scores, params)?;
    if ranked.is_empty() {
        return Err(Error::Empty("score_and_select"));
    }
    let mut nodes = NodeInterner::default();
    let mut edges = Vec::with_capacity(ranked.len());
    let mut labels = Vec::with_capacity(ranked.len());
    let mut edge_rows = Vec::with_capacity(ranked.len());
    let mut log = BuildLog::default();
    for s in &ranked {
        let h = nodes.intern(&s.triple.head);
        let t = nodes.intern(&s.triple.tail);
        edges.push((h, t));
        labels.push(s.triple.relation.clone());
        let p = emb.embed_phrase(&s.triple.relation);
        log.oov_tokens += p.oov;
        let mut row = p.vector;
        row.push(s.score);
        edge_rows.push(row);
    }
    let node_features = nodes.features(emb, &mut log)?;
    if log.oov_tokens > 0 {
        log::debug!("commonsense graph: {} out-of-vocabulary tokens", log.oov_tokens);
    }
    let graph = HeteroGraph::new(
        Modality::Commonsense,
        node_features,
        nodes.labels,
        edges,
        labels,
        Tensor::from_rows(&edge_rows, emb.dim() + 1)?,
    )?;
    Ok((graph, log))
}
