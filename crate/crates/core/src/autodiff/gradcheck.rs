//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// A scalar function of a parameter set with an analytic gradient.
pub trait Objective {
    fn value(&mut self, params: &[Tensor]) -> Result<f64>;
    fn gradient(&mut self, params: &[Tensor]) -> Result<Vec<Vec<f64>>>;
}

/// Adapts a graph-building closure into an [`Objective`]. The closure gets a
/// fresh tape with every parameter already recorded as a leaf and returns the
/// scalar loss node.
pub struct TapeObjective<F> {
    build: F,
}

impl<F> TapeObjective<F>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    pub fn new(build: F) -> Self {
        TapeObjective { build }
    }

    fn run(&mut self, params: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = (self.build)(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    }
}

impl<F> Objective for TapeObjective<F>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    fn value(&mut self, params: &[Tensor]) -> Result<f64> {
        let (tape, _, loss) = self.run(params)?;
        let v = tape.value(loss);
        if !v.is_scalar() {
            return Err(Error::invalid("objective must be scalar"));
        }
        Ok(v.data()[0])
    }

    fn gradient(&mut self, params: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        let (mut tape, vars, loss) = self.run(params)?;
        tape.backward(loss)?;
        Ok(vars
            .iter()
            .zip(params)
            .map(|(&v, p)| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.numel()])
            })
            .collect())
    }
}

/// Which coordinates of each parameter tensor get perturbed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coordinates {
    All,
    /// At most this many coordinates per tensor, drawn without replacement
    /// from a seeded stream.
    Sample { per_tensor: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (tensor index, coordinate, analytic, numeric) at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the analytic gradient of `objective` against central differences
/// with step `step` and returns the worst relative error.
pub fn grad_check<O: Objective>(
    objective: &mut O,
    params: &[Tensor],
    step: f64,
    coords: Coordinates,
) -> Result<GradCheckReport> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("grad_check step must be positive, got {step}")));
    }
    let analytic = objective.gradient(params)?;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (ti, grad) in analytic.iter().enumerate() {
        let n = params[ti].numel();
        let picks: Vec<usize> = match coords {
            Coordinates::All => (0..n).collect(),
            Coordinates::Sample { per_tensor, seed } if per_tensor < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (ti as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut idx = sample(&mut rng, n, per_tensor).into_vec();
                idx.sort_unstable();
                idx
            }
            Coordinates::Sample { .. } => (0..n).collect(),
        };
        for j in picks {
            let orig = params[ti].data()[j];
            work[ti].data_mut()[j] = orig + step;
            let plus = objective.value(&work)?;
            work[ti].data_mut()[j] = orig - step;
            let minus = objective.value(&work)?;
            work[ti].data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective at perturbed coordinate {j} of tensor {ti}: {plus}, {minus}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(grad[j], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((ti, j, grad[j], numeric));
            }
        }
    }
    Ok(report)
}
