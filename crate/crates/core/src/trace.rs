//! Per-step reasoning traces.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::controller::{Model, RunOptions};
use crate::error::{Error, Result};
use crate::graph::{is_distribution, Modality, MultiLayerGraph};
use crate::modules::ModuleKind;
use crate::tensor::argmax;

pub const TRACE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeAttention {
    pub layer: Modality,
    pub labels: Vec<String>,
    pub weights: Vec<f64>,
    pub top_node: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    /// Indexed like [`ReasoningTrace::modules`].
    pub module_weights: Vec<f64>,
    pub top_module: String,
    pub top_module_kind: ModuleKind,
    /// Over the question tokens; padding is dropped.
    pub word_attention: Vec<f64>,
    pub top_word: String,
    pub node_attention: Vec<NodeAttention>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub format_version: u32,
    pub question: Vec<String>,
    pub modules: Vec<String>,
    pub steps: Vec<TraceStep>,
    pub answer: String,
    pub answer_logits: Vec<f64>,
}

fn top(weights: &[f64]) -> Result<usize> {
    argmax(weights).ok_or(Error::Empty("trace distribution"))
}

impl ReasoningTrace {
    /// Runs the model once and records every step.
    pub fn record(
        model: &Model,
        graphs: &MultiLayerGraph,
        question: &[String],
        options: &RunOptions,
    ) -> Result<Self> {
        let tape = Tape::new();
        let out = model.run(&tape, graphs, question, options)?;
        // ablated layers are traced as the placeholder the model actually saw
        let seen = graphs.with_placeholders(&options.ablation.graphs);
        let modules = model.inventory.names();
        let tokens = out.encoding.tokens.clone();
        let mut steps = Vec::with_capacity(out.records.len());
        for rec in &out.records {
            let m = top(&rec.module_weights)?;
            let words = rec.word_attention[..tokens.len()].to_vec();
            let w = top(&words)?;
            let node_attention = Modality::ALL
                .iter()
                .map(|&layer| {
                    let g = seen.layer(layer);
                    let weights = rec.node_attention[layer.index()].clone();
                    let t = top(&weights)?;
                    Ok(NodeAttention {
                        layer,
                        labels: g.node_labels.clone(),
                        top_node: g.node_labels[t].clone(),
                        weights,
                    })
                })
                .collect::<Result<_>>()?;
            steps.push(TraceStep {
                step: rec.step,
                module_weights: rec.module_weights.clone(),
                top_module: modules[m].clone(),
                top_module_kind: model.inventory.slots()[m].kind,
                word_attention: words,
                top_word: tokens[w].clone(),
                node_attention,
            });
        }
        let logits = tape.value(out.logits).data().to_vec();
        let answer = model.config.answers[top(&logits)?].clone();
        Ok(ReasoningTrace {
            format_version: TRACE_VERSION,
            question: tokens,
            modules,
            steps,
            answer,
            answer_logits: logits,
        })
    }

    /// Drops trailing steps whose top module is NoOp.
    pub fn omit_trailing_noops(&mut self) {
        while self
            .steps
            .last()
            .is_some_and(|s| s.top_module_kind == ModuleKind::NoOp)
        {
            self.steps.pop();
        }
    }

    /// Distributions sum to one and argmax fields agree with their vectors.
    pub fn check(&self, tol: f64) -> Result<()> {
        let mut problems = Vec::new();
        for s in &self.steps {
            let step = s.step;
            if s.module_weights.len() != self.modules.len() {
                problems.push(format!("step {step}: module weight count"));
            }
            if !is_distribution(&s.module_weights, tol) {
                problems.push(format!("step {step}: module weights are not a distribution"));
            }
            if argmax(&s.module_weights).map(|i| &self.modules[i]) != Some(&s.top_module) {
                problems.push(format!("step {step}: top module disagrees with weights"));
            }
            if s.word_attention.len() != self.question.len() || !is_distribution(&s.word_attention, tol) {
                problems.push(format!("step {step}: word attention is not a distribution over the question"));
            }
            if argmax(&s.word_attention).map(|i| &self.question[i]) != Some(&s.top_word) {
                problems.push(format!("step {step}: top word disagrees with attention"));
            }
            for na in &s.node_attention {
                if na.labels.len() != na.weights.len() || !is_distribution(&na.weights, tol) {
                    problems.push(format!("step {step}: {} attention is not a distribution", na.layer));
                }
                if argmax(&na.weights).map(|i| &na.labels[i]) != Some(&na.top_node) {
                    problems.push(format!("step {step}: {} top node disagrees with attention", na.layer));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}
