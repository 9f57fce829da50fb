//! Layers built from tape operations: affine maps, MLPs and an LSTM cell.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// Multimodal fusion `ReLU(x + y) − (x − y)²`, elementwise.
pub fn fuse(tape: &Tape, x: Var, y: Var) -> Result<Var> {
    let sum = tape.relu(tape.add(x, y)?);
    let diff = tape.sub(x, y)?;
    tape.sub(sum, tape.mul(diff, diff)?)
}

/// `y = W x + b`, with `W` stored as `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[out_dim, in_dim], in_dim, rng);
        let bias = bias.then(|| store.add_uniform(format!("{name}.bias"), &[out_dim], in_dim, rng));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Accepts a vector `[in]` or a row batch `[rows, in]`.
    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let shape = tape.shape(x);
        match shape.len() {
            1 => {
                let y = tape.matvec(w, x)?;
                match self.bias {
                    Some(b) => tape.add(y, tape.param(store, b)),
                    None => Ok(y),
                }
            }
            2 => {
                let y = tape.matmul_nt(x, w)?;
                match self.bias {
                    Some(b) => tape.add_row(y, tape.param(store, b)),
                    None => Ok(y),
                }
            }
            _ => Err(Error::shape("linear", &[&shape])),
        }
    }
}

/// Fixed-depth perceptron: affine layers with an activation between
/// consecutive layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden_activation: Activation,
}

impl Mlp {
    /// `dims` lists the input width followed by every layer's output width.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        hidden_activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Mlp {
            layers,
            hidden_activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward(&self, tape: &Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i + 1 < self.layers.len() {
                h = self.hidden_activation.apply(tape, h);
            }
        }
        Ok(h)
    }
}

/// Forget-gate bias at construction; the other gate biases start at zero.
pub const FORGET_BIAS_INIT: f64 = 1.0;

/// Single LSTM cell with gate order input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input: Linear,
    pub recurrent: Linear,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let input = Linear::new(store, &format!("{name}.input"), in_dim, 4 * hidden_dim, true, rng);
        if let Some(b) = input.bias {
            let bias = store.get_mut(b).data_mut();
            bias.fill(0.0);
            bias[hidden_dim..2 * hidden_dim].fill(FORGET_BIAS_INIT);
        }
        LstmCell {
            input,
            recurrent: Linear::new(
                store,
                &format!("{name}.recurrent"),
                hidden_dim,
                4 * hidden_dim,
                false,
                rng,
            ),
            hidden_dim,
        }
    }

    /// Returns `(h, c)` after consuming `x`.
    pub fn step(
        &self,
        tape: &Tape,
        store: &ParamStore,
        x: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let d = self.hidden_dim;
        let gates = tape.add(
            self.input.forward(tape, store, x)?,
            self.recurrent.forward(tape, store, h)?,
        )?;
        let i = tape.sigmoid(tape.slice(gates, 0, d)?);
        let f = tape.sigmoid(tape.slice(gates, d, d)?);
        let g = tape.tanh(tape.slice(gates, 2 * d, d)?);
        let o = tape.sigmoid(tape.slice(gates, 3 * d, d)?);
        let c_next = tape.add(tape.mul(f, c)?, tape.mul(i, g)?)?;
        let h_next = tape.mul(o, tape.tanh(c_next))?;
        Ok((h_next, c_next))
    }
}
