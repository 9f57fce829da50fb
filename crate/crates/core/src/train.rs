//! Loss, optimizer, training and evaluation loops.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::builder::{DEFAULT_SCORE_A, DEFAULT_SCORE_B, DEFAULT_TOP_K};
use crate::controller::{
    Ablation, Model, ModelConfig, RunOptions, DEFAULT_QUESTION_LEN, DEFAULT_STEPS,
};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::synthetic::{generate_dataset, GeneratorConfig, SelectParamsConfig, SyntheticTask, TemplateFamily, World};
use crate::tensor::{argmax, Tensor};

/// `−log softmax(logits)[label]`
pub fn cross_entropy_loss(tape: &Tape, logits: Var, label: usize) -> Result<Var> {
    let n = tape.shape(logits).iter().product::<usize>();
    if label >= n {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {n} classes"
        )));
    }
    let lp = tape.log_softmax(logits)?;
    Ok(tape.scale(tape.index(lp, label)?, -1.0))
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update; `grads` is indexed like the store.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for (&id, g) in ids.iter().zip(grads) {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    param: store.name(id).to_owned(),
                });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (&id, g)) in ids.iter().zip(grads).enumerate() {
            let p = store.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub dim: usize,
    pub word_dim: usize,
    pub question_len: usize,
    pub and_lag: usize,
    pub top_k: usize,
    pub score_a: f64,
    pub score_b: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub family: TemplateFamily,
    pub train_size: usize,
    pub test_size: usize,
    /// Ablation flags: vg, sg, kg, and, filter, relate, crossgraph.
    pub ablate: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            steps: DEFAULT_STEPS,
            dim: 16,
            word_dim: 16,
            question_len: DEFAULT_QUESTION_LEN,
            and_lag: 2,
            top_k: DEFAULT_TOP_K,
            score_a: DEFAULT_SCORE_A,
            score_b: DEFAULT_SCORE_B,
            epochs: 50,
            batch_size: 8,
            seed: 0,
            family: TemplateFamily::CrossGraph,
            train_size: 2000,
            test_size: 500,
            ablate: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let positive = [
            ("steps", self.steps),
            ("dim", self.dim),
            ("word_dim", self.word_dim),
            ("question_len", self.question_len),
            ("top_k", self.top_k),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("train_size", self.train_size),
            ("test_size", self.test_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            problems.push(format!("learning_rate must be finite and nonnegative, got {}", self.learning_rate));
        }
        if !(self.score_a >= 0.0 && self.score_b >= 0.0) {
            problems.push("score weights must be nonnegative".to_owned());
        }
        if self.and_lag < 2 {
            problems.push("and_lag must be at least 2".to_owned());
        }
        if let Err(e) = Ablation::from_flags(&self.ablate) {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn ablation(&self) -> Result<Ablation> {
        Ablation::from_flags(&self.ablate)
    }

    pub fn model_config(&self, world: &World) -> ModelConfig {
        let (node_dims, edge_dims) = world.layer_dims();
        ModelConfig {
            dim: self.dim,
            word_dim: world.embeddings.dim(),
            node_dims,
            edge_dims,
            question_len: self.question_len,
            steps: self.steps,
            and_lag: self.and_lag,
            answers: World::answer_vocabulary(&[self.family]),
        }
    }
}

/// A generated world with its train and test splits.
#[derive(Clone, Debug)]
pub struct DataSplit {
    pub world: World,
    pub train: Vec<SyntheticTask>,
    pub test: Vec<SyntheticTask>,
}

impl TrainConfig {
    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            select: SelectParamsConfig {
                a: self.score_a,
                b: self.score_b,
                k: self.top_k,
            },
            ..GeneratorConfig::default()
        }
    }
}

/// Word vectors, then the training split, then the test split, all from `config.seed`.
pub fn generate_data(config: &TrainConfig) -> Result<DataSplit> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let world = World::new(config.word_dim, &mut rng)?;
    let gen = config.generator();
    let train = generate_dataset(&mut rng, &world, &[config.family], config.train_size, &gen)?;
    let test = generate_dataset(&mut rng, &world, &[config.family], config.test_size, &gen)?;
    Ok(DataSplit { world, train, test })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub examples: usize,
    /// Accuracy keyed by hop count.
    pub per_hop: BTreeMap<usize, f64>,
    /// Mean training loss per epoch; empty for pure evaluation.
    pub loss_curve: Vec<f64>,
}

/// Per-example loss and prediction under `options`.
fn example_forward(
    model: &Model,
    store: &ParamStore,
    task: &SyntheticTask,
    options: &RunOptions,
    with_grads: bool,
) -> Result<(f64, usize, Option<Vec<Tensor>>)> {
    let label = model.answer_index(&task.answer).ok_or_else(|| {
        Error::InvalidArgument(format!("answer '{}' is not in the vocabulary", task.answer))
    })?;
    let tape = Tape::new();
    let out = model.run_with_store(&tape, store, &task.graphs, &task.question, options)?;
    let loss = cross_entropy_loss(&tape, out.logits, label)?;
    let loss_value = tape.value(loss).item();
    let predicted = argmax(tape.value(out.logits).data()).ok_or(Error::Empty("logits"))?;
    let grads = if with_grads {
        let g = tape.backward(loss)?;
        let mut acc: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        g.accumulate_into(&mut acc, 1.0);
        Some(acc)
    } else {
        None
    };
    Ok((loss_value, predicted, grads))
}

/// Accuracy of `model` on `tasks`, evaluated in parallel.
pub fn evaluate(model: &Model, tasks: &[SyntheticTask], ablation: &Ablation) -> Result<Metrics> {
    if tasks.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let options = RunOptions::with_ablation(ablation.clone());
    let results: Vec<(usize, bool)> = tasks
        .par_iter()
        .map(|t| {
            let (_, predicted, _) = example_forward(model, &model.store, t, &options, false)?;
            Ok((t.hops, model.config.answers[predicted] == t.answer))
        })
        .collect::<Result<_>>()?;
    let mut hop_counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for &(hops, ok) in &results {
        let e = hop_counts.entry(hops).or_default();
        e.0 += ok as usize;
        e.1 += 1;
    }
    let correct: usize = hop_counts.values().map(|c| c.0).sum();
    Ok(Metrics {
        accuracy: correct as f64 / tasks.len() as f64,
        examples: tasks.len(),
        per_hop: hop_counts
            .into_iter()
            .map(|(h, (c, n))| (h, c as f64 / n as f64))
            .collect(),
        loss_curve: Vec::new(),
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Held-out metrics with the training loss curve attached.
    pub metrics: Metrics,
    /// State of the shuffling generator after the last epoch.
    pub rng: ChaCha8Rng,
}

/// Mini-batch Adam on the mean per-example cross-entropy.
///
/// Per-example gradients are computed in parallel and summed in example
/// order, so results do not depend on the thread count.
pub fn train(
    config: &TrainConfig,
    world: &World,
    train_set: &[SyntheticTask],
    test_set: &[SyntheticTask],
) -> Result<TrainOutcome> {
    train_with_hook(config, world, train_set, test_set, |_, _, _| {})
}

/// [`train`], calling `hook(epoch, mean_loss, model)` after every epoch.
pub fn train_with_hook<F>(
    config: &TrainConfig,
    world: &World,
    train_set: &[SyntheticTask],
    test_set: &[SyntheticTask],
    mut hook: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, f64, &Model),
{
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let ablation = config.ablation()?;
    let options = RunOptions::with_ablation(ablation.clone());
    let mut model = Model::new(config.model_config(world), world.embeddings.clone(), config.seed)?;
    let mut adam = Adam::new(&model.store, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f64, Vec<Tensor>)> = batch
                .par_iter()
                .map(|&i| {
                    let (loss, _, g) = example_forward(&model, &model.store, &train_set[i], &options, true)?;
                    Ok((loss, g.expect("gradients requested")))
                })
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Tensor> =
                model.store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
            for (loss, g) in &results {
                epoch_loss += loss;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += scale * b;
                    }
                }
            }
            adam.step(&mut model.store, &grads)?;
        }
        let mean = epoch_loss / train_set.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { epoch, loss: mean });
        }
        log::debug!("epoch {epoch}: mean loss {mean:.4}");
        loss_curve.push(mean);
        hook(epoch, mean, &model);
    }

    let mut metrics = if test_set.is_empty() {
        evaluate(&model, train_set, &ablation)?
    } else {
        evaluate(&model, test_set, &ablation)?
    };
    metrics.loss_curve = loss_curve;
    Ok(TrainOutcome { model, metrics, rng })
}
