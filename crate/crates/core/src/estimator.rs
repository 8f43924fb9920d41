//! Safeguarded Newton maximization of the (1/n-scaled) log-likelihoods.

use crate::error::{McmlError, Result, TraceEntry};
use crate::importance::ImportanceSample;
use crate::likelihood::{exact_loglik, mc_loglik, ObjectiveEval};
use crate::model::{require_support, Dataset, Model};
use crate::scalar::{norm_inf, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions<T> {
    /// Starting point; `None` means the zero vector.
    pub init: Option<Vec<T>>,
    /// Convergence threshold on the max-norm of the scaled score.
    pub grad_tol: T,
    pub max_iter: usize,
    pub step_halving_max: usize,
    /// A converged point must also have a Newton step no larger than this.
    pub step_tol: T,
    /// `‖θ‖∞` beyond which the maximizer is declared to escape to infinity.
    pub divergence_bound: T,
}

impl<T: Real> Default for FitOptions<T> {
    fn default() -> Self {
        let eps = T::epsilon();
        Self {
            init: None,
            grad_tol: T::lit(1e-8).max(T::lit(100.0) * eps),
            max_iter: 100,
            step_halving_max: 30,
            step_tol: T::lit(1e-10).max(T::lit(1e3) * eps),
            divergence_bound: T::lit(50.0),
        }
    }
}

impl<T: Real> FitOptions<T> {
    fn validate(&self, p: usize) -> Result<Vec<T>> {
        if !(self.grad_tol > T::zero()) {
            return Err(McmlError::Config("grad_tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(McmlError::Config("max_iter must be at least 1".into()));
        }
        match &self.init {
            None => Ok(vec![T::zero(); p]),
            Some(v) if v.len() == p => Ok(v.clone()),
            Some(v) => Err(McmlError::Dimension {
                expected: p,
                got: v.len(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult<T> {
    pub theta_hat: Vec<T>,
    pub converged: bool,
    pub iterations: usize,
    pub final_grad_norm: T,
    pub trace: Vec<TraceEntry>,
    /// Diagnostics attached after the fit, e.g. a Hessian estimate that is
    /// not negative definite.
    pub warnings: Vec<String>,
}

fn trace_entry<T: Real>(theta: &[T], value: T, grad_norm: T) -> TraceEntry {
    TraceEntry {
        theta: theta.iter().map(|t| t.as_f64()).collect(),
        value: value.as_f64(),
        grad_norm: grad_norm.as_f64(),
    }
}

/// The objective is numerically flat where the curvature of `−H` falls
/// below `√ε` relative to its scale; a "maximizer" there is an artefact of
/// rounding and the true supremum lies at infinity.
fn check_curvature<T: Real>(neg_h: &crate::linalg::Matrix<T>, iter: usize) -> Result<()> {
    let low = neg_h.sym_eigen().values[0];
    if low <= T::epsilon().sqrt() * neg_h.max_abs().max(T::one()) {
        return Err(McmlError::DegenerateData(format!(
            "objective curvature vanishes at iteration {iter} (smallest eigenvalue {low}); no finite maximizer"
        )));
    }
    Ok(())
}

/// Maximizes a concave-ish objective by Newton steps with step halving,
/// falling back to gradient ascent where `−H` is not positive definite.
pub fn newton_maximize<T: Real>(
    p: usize,
    opts: &FitOptions<T>,
    mut eval: impl FnMut(&[T]) -> Result<ObjectiveEval<T>>,
) -> Result<FitResult<T>> {
    let mut theta = opts.validate(p)?;
    let mut cur = eval(&theta)?;
    let mut trace = Vec::new();

    for iter in 0..=opts.max_iter {
        let gnorm = norm_inf(&cur.score);
        trace.push(trace_entry(&theta, cur.value, gnorm));
        if norm_inf(&theta) > opts.divergence_bound || !cur.value.is_finite() {
            return Err(McmlError::DegenerateData(format!(
                "estimate left the region |theta| <= {} after {iter} iterations; the maximizer does not exist",
                opts.divergence_bound
            )));
        }

        let neg_h = cur.hess.scale(-T::one());
        let direction = match neg_h.cholesky() {
            Some(l) => {
                let d = l.cholesky_solve(&cur.score);
                let dn = norm_inf(&d);
                if gnorm <= opts.grad_tol && dn <= opts.step_tol {
                    check_curvature(&neg_h, iter)?;
                    return Ok(FitResult {
                        theta_hat: theta,
                        converged: true,
                        iterations: iter,
                        final_grad_norm: gnorm,
                        trace,
                        warnings: Vec::new(),
                    });
                }
                d
            }
            None => {
                if gnorm <= opts.grad_tol {
                    return Err(McmlError::DegenerateData(format!(
                        "objective is flat at iteration {iter}; no isolated maximizer"
                    )));
                }
                cur.score.clone()
            }
        };

        if iter == opts.max_iter {
            break;
        }

        // Near the optimum the value no longer resolves the improvement, so a
        // step within rounding of the current value is taken if it shrinks
        // the score.
        let slack = T::lit(8.0) * T::epsilon() * cur.value.abs().max(T::one());
        let mut step = T::one();
        let mut accepted = None;
        for _ in 0..=opts.step_halving_max {
            let cand: Vec<T> = theta
                .iter()
                .zip(&direction)
                .map(|(&t, &d)| t + step * d)
                .collect();
            if let Ok(e) = eval(&cand) {
                if e.value > cur.value
                    || (e.value >= cur.value - slack && norm_inf(&e.score) < gnorm)
                {
                    accepted = Some((cand, e));
                    break;
                }
            }
            step = step * T::lit(0.5);
        }
        match accepted {
            Some((cand, e)) => {
                theta = cand;
                cur = e;
            }
            None if gnorm <= opts.grad_tol => {
                check_curvature(&cur.hess.scale(-T::one()), iter)?;
                return Ok(FitResult {
                    theta_hat: theta,
                    converged: true,
                    iterations: iter,
                    final_grad_norm: gnorm,
                    trace,
                    warnings: Vec::new(),
                });
            }
            None => {
                return Err(McmlError::NonConvergence {
                    iterations: iter,
                    grad_norm: gnorm.as_f64(),
                    trace,
                });
            }
        }
    }
    let grad_norm = trace.last().map_or(f64::NAN, |t| t.grad_norm);
    Err(McmlError::NonConvergence {
        iterations: opts.max_iter,
        grad_norm,
        trace,
    })
}

/// MCML estimate `θ̂ₙᵐ`: maximizer of `ℓₙᵐ / n`.
pub fn fit_mcml<T: Real, M: Model<T> + ?Sized>(
    data: &Dataset<T>,
    sample: &ImportanceSample<T>,
    model: &M,
    opts: &FitOptions<T>,
) -> Result<FitResult<T>> {
    data.validate_for(model)?;
    let n = data.n();
    newton_maximize(model.param_dim(), opts, |theta| {
        Ok(mc_loglik(data, sample, model, theta)?.scaled(n))
    })
}

/// Maximum likelihood estimate `θ̂ₙ` from the exact likelihood.
pub fn fit_exact<T: Real, M: Model<T> + ?Sized>(
    data: &Dataset<T>,
    model: &M,
    opts: &FitOptions<T>,
) -> Result<FitResult<T>> {
    require_support(model)?;
    data.validate_for(model)?;
    let n = data.n();
    newton_maximize(model.param_dim(), opts, |theta| {
        Ok(exact_loglik(data, model, theta)?.scaled(n))
    })
}
