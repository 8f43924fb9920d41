//! Plug-in estimates of the sandwich covariance `D⁻¹(V/n + W/m)D⁻¹`.
//!
//! * `V` is the variance of the per-observation score,
//! * `D` the mean Hessian of the log-density,
//! * `W` the variance under `h` of `φ̄(y) = E_X φ(y|X)`, which carries the
//!   Monte Carlo noise of the shared importance sample.
//!
//! All expectations over `X` use the empirical covariate distribution and all
//! expectations over `Y ~ h` use the importance sample. Covariances are
//! normalized by `1/n` and `1/m`.

use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{McmlError, Result};
use crate::estimator::FitResult;
use crate::importance::ImportanceSample;
use crate::likelihood::NormingSource;
use crate::linalg::Matrix;
use crate::model::{check_theta, Dataset, Model, NormingTriple};
use crate::scalar::{dot, Real};

/// Eigenvalue floor for covariance square roots.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Influence vector `φ(y|x)` of the Monte Carlo norming error.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiValue<T> {
    pub vec: Vec<T>,
}

/// `φ(y|x) = (f(y|x,θ)/h(y)) · [S(y,x) − ∇C/C] / C`, evaluated in log space.
pub fn phi<T: Real, M: Model<T> + ?Sized>(
    model: &M,
    y: &[T],
    x: &[T],
    theta: &[T],
    norming: &NormingTriple<T>,
    log_h: T,
) -> Result<PhiValue<T>> {
    let mut s = vec![T::zero(); model.param_dim()];
    model.suff_stat_into(y, x, &mut s)?;
    Ok(phi_from_stat(&s, theta, norming, log_h))
}

fn phi_from_stat<T: Real>(
    s: &[T],
    theta: &[T],
    norming: &NormingTriple<T>,
    log_h: T,
) -> PhiValue<T> {
    let ratio = (dot(theta, s) - log_h - norming.ln_value()).exp();
    PhiValue {
        vec: s
            .iter()
            .zip(norming.grad_log())
            .map(|(&si, gl)| ratio * (si - gl))
            .collect(),
    }
}

fn covariance<T: Real>(
    p: usize,
    points: impl Iterator<Item = (Vec<T>, usize)> + Clone,
    total: usize,
) -> Matrix<T> {
    let inv = T::one() / T::from_usize(total).expect("total fits");
    let mut mean = vec![T::zero(); p];
    for (v, c) in points.clone() {
        let w = T::from_usize(c).expect("count fits") * inv;
        for (m, &vi) in mean.iter_mut().zip(&v) {
            *m = *m + w * vi;
        }
    }
    let mut cov = Matrix::zeros(p, p);
    for (v, c) in points {
        let d: Vec<T> = v.iter().zip(&mean).map(|(&a, &b)| a - b).collect();
        cov.add_outer(T::from_usize(c).expect("count fits") * inv, &d);
    }
    cov.symmetrize()
}

/// Empirical covariance (1/n) of the scores `S(Yᵢ,Xᵢ) − ∇C(Xᵢ,θ)/C(Xᵢ,θ)`.
pub fn estimate_v<T: Real, M: Model<T> + ?Sized>(
    data: &Dataset<T>,
    model: &M,
    theta: &[T],
    source: NormingSource<'_, T>,
) -> Result<Matrix<T>> {
    if data.n() < 2 {
        return Err(McmlError::InsufficientData(
            "V needs at least two observations".into(),
        ));
    }
    check_theta(model, theta)?;
    let p = model.param_dim();
    let grads: Vec<Vec<T>> = source
        .per_group(data, model, theta)?
        .iter()
        .map(NormingTriple::grad_log)
        .collect();
    let mut scores = Vec::with_capacity(data.n());
    let mut s = vec![T::zero(); p];
    for (i, row) in data.rows().iter().enumerate() {
        model.suff_stat_into(&row.y, &row.x, &mut s)?;
        let g = &grads[data.group_of(i)];
        scores.push(s.iter().zip(g).map(|(&a, &b)| a - b).collect::<Vec<T>>());
    }
    Ok(covariance(p, scores.into_iter().map(|v| (v, 1)), data.n()))
}

/// `(1/n) Σᵢ −∇² log C(Xᵢ,θ)`; depends on the data only through the covariates.
pub fn estimate_d<T: Real, M: Model<T> + ?Sized>(
    data: &Dataset<T>,
    model: &M,
    theta: &[T],
    source: NormingSource<'_, T>,
) -> Result<Matrix<T>> {
    check_theta(model, theta)?;
    let p = model.param_dim();
    let inv_n = T::one() / T::from_usize(data.n()).expect("n fits");
    let mut d = Matrix::zeros(p, p);
    for (g, norming) in data
        .covariate_groups()
        .iter()
        .zip(source.per_group(data, model, theta)?)
    {
        d.axpy(
            -T::from_usize(g.count).expect("count fits") * inv_n,
            &norming.hess_log(),
        );
    }
    Ok(d.symmetrize())
}

/// `φ̄(Yᵏ) = (1/n) Σᵢ φ(Yᵏ|Xᵢ)` for every distinct draw of the sample,
/// paired with its multiplicity.
pub fn phi_bar<T: Real, M: Model<T> + ?Sized>(
    data: &Dataset<T>,
    sample: &ImportanceSample<T>,
    model: &M,
    theta: &[T],
    plug_in: NormingSource<'_, T>,
) -> Result<Vec<(Vec<T>, usize)>> {
    check_theta(model, theta)?;
    let p = model.param_dim();
    let normings = plug_in.per_group(data, model, theta)?;
    let inv_n = T::one() / T::from_usize(data.n()).expect("n fits");
    let mut s = vec![T::zero(); p];
    sample
        .groups()
        .iter()
        .map(|grp| {
            let y = &sample.draws()[grp.first];
            let log_h = sample.log_h()[grp.first];
            let mut acc = vec![T::zero(); p];
            for (g, norming) in data.covariate_groups().iter().zip(&normings) {
                model.suff_stat_into(y, &g.x, &mut s)?;
                let w = T::from_usize(g.count).expect("count fits") * inv_n;
                for (a, v) in acc
                    .iter_mut()
                    .zip(phi_from_stat(&s, theta, norming, log_h).vec)
                {
                    *a = *a + w * v;
                }
            }
            Ok((acc, grp.count))
        })
        .collect()
}

/// `Ŵ` with norming constants taken from `plug_in`.
pub fn estimate_w_with<T: Real, M: Model<T> + ?Sized>(
    data: &Dataset<T>,
    sample: &ImportanceSample<T>,
    model: &M,
    theta: &[T],
    plug_in: NormingSource<'_, T>,
) -> Result<Matrix<T>> {
    if sample.m() < 2 {
        return Err(McmlError::InsufficientData(
            "W needs at least two Monte Carlo draws".into(),
        ));
    }
    let points = phi_bar(data, sample, model, theta, plug_in)?;
    Ok(covariance(
        model.param_dim(),
        points.into_iter(),
        sample.m(),
    ))
}

/// `Ŵ = VAR_{Y~h} φ̄(Y)` with Monte Carlo plug-ins `C_m`, `∇C_m`.
pub fn estimate_w<T: Real, M: Model<T> + ?Sized>(
    data: &Dataset<T>,
    sample: &ImportanceSample<T>,
    model: &M,
    theta: &[T],
) -> Result<Matrix<T>> {
    estimate_w_with(
        data,
        sample,
        model,
        theta,
        NormingSource::MonteCarlo(sample),
    )
}

/// `W = C⁻² VAR_{Y~h}[∇f/h − (∇C/C) f/h]` for a model without covariates,
/// computed directly from that formula.
pub fn estimate_w_no_covariates<T: Real, M: Model<T> + ?Sized>(
    sample: &ImportanceSample<T>,
    model: &M,
    theta: &[T],
    plug_in: NormingSource<'_, T>,
) -> Result<Matrix<T>> {
    if sample.m() < 2 {
        return Err(McmlError::InsufficientData(
            "W needs at least two Monte Carlo draws".into(),
        ));
    }
    let p = model.param_dim();
    let norming = plug_in.norming(model, &[], theta)?;
    let c = norming.value();
    let grad_ratio = norming.grad_log();
    let mut s = vec![T::zero(); p];
    let mut points = Vec::with_capacity(sample.groups().len());
    for grp in sample.groups() {
        model.suff_stat_into(&sample.draws()[grp.first], &[], &mut s)?;
        let f_over_h = (dot(theta, &s) - sample.log_h()[grp.first]).exp();
        let u: Vec<T> = s
            .iter()
            .zip(&grad_ratio)
            .map(|(&si, &g)| f_over_h * si - g * f_over_h)
            .collect();
        points.push((u, grp.count));
    }
    Ok(covariance(p, points.into_iter(), sample.m()).scale(T::one() / (c * c)))
}

/// Empirical `W̃ = E_{Y~h, X~g} |φ(Y|X)|²`; a moment diagnostic only.
pub fn w_tilde_diagnostic<T: Real, M: Model<T> + ?Sized>(
    data: &Dataset<T>,
    sample: &ImportanceSample<T>,
    model: &M,
    theta: &[T],
) -> Result<T> {
    let normings = NormingSource::MonteCarlo(sample).per_group(data, model, theta)?;
    let mut s = vec![T::zero(); model.param_dim()];
    let mut total = T::zero();
    for grp in sample.groups() {
        let y = &sample.draws()[grp.first];
        for (g, norming) in data.covariate_groups().iter().zip(&normings) {
            model.suff_stat_into(y, &g.x, &mut s)?;
            let v = phi_from_stat(&s, theta, norming, sample.log_h()[grp.first]).vec;
            let w = T::from_usize(g.count * grp.count).expect("count fits");
            total = total + w * dot(&v, &v);
        }
    }
    Ok(total / T::from_usize(data.n() * sample.m()).expect("size fits"))
}

/// Plug-in ingredients of the sandwich covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct SandwichParts<T> {
    pub v_hat: Matrix<T>,
    pub d_hat: Matrix<T>,
    pub w_hat: Matrix<T>,
    pub n: usize,
    pub m: usize,
}

impl<T: Real> SandwichParts<T> {
    /// Plug-ins at `theta`: `V̂` and `D̂` from `source`, `Ŵ` from the
    /// importance sample.
    pub fn estimate<M: Model<T> + ?Sized>(
        data: &Dataset<T>,
        sample: &ImportanceSample<T>,
        model: &M,
        theta: &[T],
        source: NormingSource<'_, T>,
    ) -> Result<Self> {
        Ok(Self {
            v_hat: estimate_v(data, model, theta, source)?,
            d_hat: estimate_d(data, model, theta, source)?,
            w_hat: estimate_w(data, sample, model, theta)?,
            n: data.n(),
            m: sample.m(),
        })
    }

    /// `V/n + W/m`
    pub fn inner(&self) -> Matrix<T> {
        let mut inner = self
            .v_hat
            .scale(T::one() / T::from_usize(self.n).expect("n fits"));
        inner.axpy(
            T::one() / T::from_usize(self.m).expect("m fits"),
            &self.w_hat,
        );
        inner
    }

    /// Warnings for finite-sample violations of the asymptotic conditions.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        let top = *self.d_hat.sym_eigen().values.last().expect("p >= 1");
        if top >= T::zero() {
            out.push(format!(
                "D_hat is not negative definite (largest eigenvalue {top})"
            ));
        }
        for (name, m) in [("V_hat", &self.v_hat), ("W_hat", &self.w_hat)] {
            let low = m.sym_eigen().values[0];
            if low < -T::lit(EIGEN_FLOOR) {
                out.push(format!("{name} has a negative eigenvalue {low}"));
            }
        }
        out
    }
}

/// `D̂⁻¹(V̂/n + Ŵ/m)D̂⁻¹`, symmetrized.
pub fn sandwich_cov<T: Real>(parts: &SandwichParts<T>) -> Result<Matrix<T>> {
    let eig = parts.d_hat.sym_eigen();
    let scale = eig.values.iter().fold(T::zero(), |a, v| a.max(v.abs()));
    if !(scale > T::zero())
        || eig
            .values
            .iter()
            .any(|v| !(v.abs() > T::lit(EIGEN_FLOOR) * scale))
    {
        return Err(McmlError::SingularHessian);
    }
    let d_inv = eig.map(|l| T::one() / l);
    Ok((&(&d_inv * &parts.inner()) * &d_inv).symmetrize())
}

/// `(V/n + W/m)^{-1/2} D (θ̂ − θ_ref)`
pub fn standardize<T: Real>(
    theta_hat: &[T],
    theta_ref: &[T],
    parts: &SandwichParts<T>,
) -> Result<Vec<T>> {
    let eig = parts.inner().sym_eigen();
    if eig.values.iter().any(|&l| !(l > T::lit(EIGEN_FLOOR))) {
        return Err(McmlError::SingularCovariance);
    }
    let inv_sqrt = eig.map(|l| T::one() / l.sqrt());
    let diff: Vec<T> = theta_hat
        .iter()
        .zip(theta_ref)
        .map(|(&a, &b)| a - b)
        .collect();
    Ok(inv_sqrt.matvec(&parts.d_hat.matvec(&diff)))
}

/// Wald confidence region.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceRegion<T> {
    pub center: Vec<T>,
    pub level: f64,
    /// Per-coordinate `(lower, upper)`.
    pub intervals: Vec<(T, T)>,
    /// Square root of the chi-square quantile with `p` degrees of freedom;
    /// the ellipsoid is `{θ : (θ − θ̂)ᵀ Σ⁻¹ (θ − θ̂) ≤ radius²}`.
    pub radius: T,
    cov: Matrix<T>,
}

impl<T: Real> ConfidenceRegion<T> {
    pub fn covers(&self, j: usize, value: T) -> bool {
        let (lo, hi) = self.intervals[j];
        lo <= value && value <= hi
    }

    pub fn ellipsoid_contains(&self, theta: &[T]) -> bool {
        let eig = self.cov.sym_eigen();
        let scale = eig.values.iter().fold(T::zero(), |a, v| a.max(v.abs()));
        let floor = T::lit(EIGEN_FLOOR) * scale.max(T::min_positive_value());
        let diff: Vec<T> = theta
            .iter()
            .zip(&self.center)
            .map(|(&a, &b)| a - b)
            .collect();
        let mut q = T::zero();
        for (k, &l) in eig.values.iter().enumerate() {
            let proj: T = (0..diff.len()).map(|i| eig.vectors[(i, k)] * diff[i]).sum();
            if l > floor {
                q = q + proj * proj / l;
            } else if proj.abs() > T::zero() {
                return false;
            }
        }
        q <= self.radius * self.radius
    }
}

pub fn confidence_region<T: Real>(
    theta_hat: &[T],
    cov: &Matrix<T>,
    level: f64,
) -> Result<ConfidenceRegion<T>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(McmlError::Config(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    if cov.nrows() != theta_hat.len() || !cov.is_square() {
        return Err(McmlError::Dimension {
            expected: theta_hat.len(),
            got: cov.nrows(),
        });
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let z = T::lit(normal.inverse_cdf(0.5 * (1.0 + level)));
    let chi = ChiSquared::new(theta_hat.len() as f64).expect("positive dof");
    let radius = T::lit(chi.inverse_cdf(level).sqrt());
    let intervals = theta_hat
        .iter()
        .zip(cov.diagonal())
        .map(|(&t, v)| {
            let half = z * v.max(T::zero()).sqrt();
            (t - half, t + half)
        })
        .collect();
    Ok(ConfidenceRegion {
        center: theta_hat.to_vec(),
        level,
        intervals,
        radius,
        cov: cov.clone(),
    })
}

/// A fit together with its plug-in sandwich covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference<T> {
    pub fit: FitResult<T>,
    pub parts: SandwichParts<T>,
    pub cov: Matrix<T>,
    pub std_errors: Vec<T>,
}

/// Plug-in sandwich at `θ̂ₙᵐ` using Monte Carlo norming throughout.
/// Diagnostics from [`SandwichParts::diagnostics`] are appended to the
/// fit's warnings.
pub fn infer<T: Real, M: Model<T> + ?Sized>(
    mut fit: FitResult<T>,
    data: &Dataset<T>,
    sample: &ImportanceSample<T>,
    model: &M,
) -> Result<Inference<T>> {
    let parts = SandwichParts::estimate(
        data,
        sample,
        model,
        &fit.theta_hat,
        NormingSource::MonteCarlo(sample),
    )?;
    fit.warnings.extend(parts.diagnostics());
    let cov = sandwich_cov(&parts)?;
    let std_errors = cov
        .diagonal()
        .into_iter()
        .map(|v| v.max(T::zero()).sqrt())
        .collect();
    Ok(Inference {
        fit,
        parts,
        cov,
        std_errors,
    })
}
