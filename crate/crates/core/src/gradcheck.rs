//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Analytic magnitudes below this are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub label: String,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_error: f64,
    pub worst: Option<Mismatch>,
    pub tolerance: f64,
}

impl GradCheckReport {
    fn new(tolerance: f64) -> Self {
        GradCheckReport {
            coordinates: 0,
            max_error: 0.0,
            worst: None,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let error = coordinate_error(analytic, numeric);
        self.coordinates += 1;
        if error > self.max_error || self.worst.is_none() {
            self.max_error = self.max_error.max(error);
            self.worst = Some(Mismatch {
                label: label(),
                analytic,
                numeric,
                error,
            });
        }
    }

    /// Folds another report into this one.
    pub fn merge(&mut self, other: GradCheckReport) {
        self.coordinates += other.coordinates;
        if other.max_error > self.max_error || self.worst.is_none() {
            self.max_error = self.max_error.max(other.max_error);
            self.worst = other.worst;
        }
    }
}

/// Relative error, or absolute error when the analytic value is tiny.
pub fn coordinate_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if analytic.abs() < ABS_FLOOR {
        diff
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

fn scalar_value(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.item())
}

/// Checks `d f(x) / d x` for a scalar-valued `f` built on a fresh tape.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let eval = |point: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let input = tape.leaf(point.clone());
        let out = f(&tape, input)?;
        scalar_value(&tape, out)
    };

    let tape = Tape::new();
    let input = tape.leaf(x.clone());
    let out = f(&tape, input)?;
    let base = scalar_value(&tape, out)?;
    let again = eval(x)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .wrt(input)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut report = GradCheckReport::new(tol);
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        report.record(|| format!("x[{i}]"), analytic.data()[i], numeric);
    }
    Ok(report)
}

/// Which coordinates of each parameter to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many evenly spaced coordinates per parameter tensor.
    PerParam(usize),
}

/// Checks the gradient of `loss(store)` with respect to the parameters in `ids`.
pub fn grad_check_params<F>(
    loss: F,
    store: &ParamStore,
    ids: &[ParamId],
    coverage: Coverage,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let out = loss(&tape, s)?;
        scalar_value(&tape, out)
    };

    let tape = Tape::new();
    let out = loss(&tape, store)?;
    let base = scalar_value(&tape, out)?;
    let again = eval(store)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic {
            first: base,
            second: again,
        });
    }
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport::new(tol);
    let mut probe = store.clone();
    for &id in ids {
        let n = store.get(id).len();
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        let coords: Vec<usize> = match coverage {
            Coverage::All => (0..n).collect(),
            Coverage::PerParam(k) if k >= n => (0..n).collect(),
            Coverage::PerParam(k) => (0..k).map(|j| j * n / k).collect(),
        };
        for i in coords {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            report.record(|| format!("{}[{i}]", store.name(id)), analytic.data()[i], numeric);
        }
    }
    Ok(report)
}
