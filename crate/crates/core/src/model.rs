//! Exponential-family models `f(y|x,θ) = exp(θᵀ S(y,x))` and exact oracles.
//!
//! `S(y,x)` is the sufficient statistic. It is the only place covariates
//! enter a model. Models with a finite, enumerable response space expose it
//! through [`Model::support_len`], which unlocks exact norming constants,
//! exact likelihoods and exact (inverse-CDF) sampling.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{McmlError, Result};
use crate::linalg::Matrix;
use crate::scalar::{bits_key, dot, Real};

/// Largest support the exact oracles will enumerate.
pub const MAX_SUPPORT: usize = 1 << 20;

/// An exponential-family model.
pub trait Model<T: Real>: Send + Sync {
    fn label(&self) -> &str;

    /// Parameter dimension `p`.
    fn param_dim(&self) -> usize;

    /// Length of a response vector.
    fn response_dim(&self) -> usize;

    /// Validates a covariate vector.
    fn check_covariate(&self, x: &[T]) -> Result<()>;

    /// Writes `S(y, x)` into `out` (length `param_dim`).
    fn suff_stat_into(&self, y: &[T], x: &[T], out: &mut [T]) -> Result<()>;

    /// Number of points in the response space, if it is finite and enumerable.
    fn support_len(&self) -> Option<usize> {
        None
    }

    /// Writes support point `idx` into `out`.
    fn support_state(&self, _idx: usize, _out: &mut Vec<T>) {
        unreachable!("model has no support")
    }

    /// `S(y_idx, x)` for support point `idx`. Models override this when the
    /// statistic can be read off the index directly.
    fn support_suff_stat(&self, idx: usize, x: &[T], out: &mut [T]) -> Result<()> {
        let mut y = Vec::with_capacity(self.response_dim());
        self.support_state(idx, &mut y);
        self.suff_stat_into(&y, x, out)
    }
}

/// Sufficient statistic `S(y, x)`.
pub fn suff_stat<T: Real, M: Model<T> + ?Sized>(model: &M, y: &[T], x: &[T]) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); model.param_dim()];
    model.suff_stat_into(y, x, &mut out)?;
    Ok(out)
}

/// `log f(y|x,θ) = θᵀ S(y,x)`.
pub fn log_unnorm_density<T: Real, M: Model<T> + ?Sized>(
    model: &M,
    y: &[T],
    x: &[T],
    theta: &[T],
) -> Result<T> {
    check_theta(model, theta)?;
    Ok(dot(theta, &suff_stat(model, y, x)?))
}

pub(crate) fn check_theta<T: Real, M: Model<T> + ?Sized>(model: &M, theta: &[T]) -> Result<()> {
    if theta.len() != model.param_dim() {
        return Err(McmlError::Dimension {
            expected: model.param_dim(),
            got: theta.len(),
        });
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(McmlError::Domain("non-finite parameter".into()));
    }
    Ok(())
}

pub(crate) fn require_support<T: Real, M: Model<T> + ?Sized>(model: &M) -> Result<usize> {
    model
        .support_len()
        .ok_or_else(|| McmlError::NoOracle(model.label().to_string()))
}

// ---------------------------------------------------------------------------
// Norming constants
// ---------------------------------------------------------------------------

/// A norming constant with its first two derivatives in `θ`.
///
/// Stored as `exp(log_scale) · (value, grad, hess)` so that constants far
/// outside the floating-point range stay representable; the accessors
/// return either the plain quantities or the log-derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct NormingTriple<T> {
    log_scale: T,
    value: T,
    grad: Vec<T>,
    hess: Matrix<T>,
}

impl<T: Real> NormingTriple<T> {
    /// Accumulates `Σ c_j exp(lw_j) (1, S_j, S_j S_jᵀ)` with the max log-weight
    /// factored out, then divides by `total` (the sample size for Monte Carlo
    /// estimates, 1 for exact sums).
    pub(crate) fn accumulate(
        p: usize,
        log_weights: &[T],
        counts: &[usize],
        total: usize,
        mut stat: impl FnMut(usize, &mut [T]) -> Result<()>,
    ) -> Result<Self> {
        debug_assert_eq!(log_weights.len(), counts.len());
        let shift = log_weights.iter().copied().fold(T::neg_infinity(), T::max);
        if !shift.is_finite() {
            return Err(McmlError::NumericalUnderflow);
        }
        let mut value = T::zero();
        let mut grad = vec![T::zero(); p];
        let mut hess = Matrix::zeros(p, p);
        let mut s = vec![T::zero(); p];
        for (j, (&lw, &c)) in log_weights.iter().zip(counts).enumerate() {
            let w = (lw - shift).exp() * T::from_usize(c).expect("count fits");
            if w == T::zero() {
                continue;
            }
            stat(j, &mut s)?;
            value = value + w;
            for (g, &si) in grad.iter_mut().zip(&s) {
                *g = *g + w * si;
            }
            hess.add_outer(w, &s);
        }
        if !(value > T::zero()) || !value.is_finite() {
            return Err(McmlError::NumericalUnderflow);
        }
        let inv_total = T::one() / T::from_usize(total).expect("total fits");
        Ok(Self {
            log_scale: shift,
            value: value * inv_total,
            grad: grad.into_iter().map(|g| g * inv_total).collect(),
            hess: hess.scale(inv_total),
        })
    }

    /// `C`
    pub fn value(&self) -> T {
        self.log_scale.exp() * self.value
    }

    /// `∇C`
    pub fn grad(&self) -> Vec<T> {
        let s = self.log_scale.exp();
        self.grad.iter().map(|&g| g * s).collect()
    }

    /// `∇²C`
    pub fn hess(&self) -> Matrix<T> {
        self.hess.scale(self.log_scale.exp())
    }

    /// `log C`
    pub fn ln_value(&self) -> T {
        self.log_scale + self.value.ln()
    }

    /// `∇C / C = ∇ log C`
    pub fn grad_log(&self) -> Vec<T> {
        self.grad.iter().map(|&g| g / self.value).collect()
    }

    /// `∇²C / C`
    pub fn hess_ratio(&self) -> Matrix<T> {
        self.hess.scale(T::one() / self.value)
    }

    /// `∇² log C = ∇²C/C − (∇C)(∇C)ᵀ/C²`
    pub fn hess_log(&self) -> Matrix<T> {
        let g = self.grad_log();
        let mut h = self.hess_ratio();
        h.add_outer(-T::one(), &g);
        h.symmetrize()
    }
}

/// Exact `C(x,θ)`, `∇C`, `∇²C` by summation over the enumerated support.
pub fn exact_norming<T: Real, M: Model<T> + ?Sized>(
    model: &M,
    x: &[T],
    theta: &[T],
) -> Result<NormingTriple<T>> {
    let len = require_support(model)?;
    check_theta(model, theta)?;
    model.check_covariate(x)?;
    let p = model.param_dim();
    let mut s = vec![T::zero(); p];
    let mut log_w = Vec::with_capacity(len);
    for idx in 0..len {
        model.support_suff_stat(idx, x, &mut s)?;
        log_w.push(dot(theta, &s));
    }
    let counts = vec![1usize; len];
    NormingTriple::accumulate(p, &log_w, &counts, 1, |idx, out| {
        model.support_suff_stat(idx, x, out)
    })
}

// ---------------------------------------------------------------------------
// Exact sampling
// ---------------------------------------------------------------------------

/// Inverse-CDF sampler over an enumerated support with weights
/// proportional to `exp(log_w)`.
#[derive(Debug, Clone)]
pub struct SupportSampler<T> {
    cdf: Vec<T>,
    log_probs: Vec<T>,
}

impl<T: Real> SupportSampler<T> {
    pub fn from_log_weights(log_w: Vec<T>) -> Result<Self> {
        if log_w.is_empty() {
            return Err(McmlError::Domain("empty support".into()));
        }
        let shift = log_w.iter().copied().fold(T::neg_infinity(), T::max);
        if !shift.is_finite() {
            return Err(McmlError::NumericalUnderflow);
        }
        let mut acc = T::zero();
        let cdf: Vec<T> = log_w
            .iter()
            .map(|&lw| {
                acc = acc + (lw - shift).exp();
                acc
            })
            .collect();
        let log_total = shift + acc.ln();
        let log_probs = log_w.iter().map(|&lw| lw - log_total).collect();
        Ok(Self { cdf, log_probs })
    }

    /// Sampler for `p(·|x,θ)`.
    pub fn for_model<M: Model<T> + ?Sized>(model: &M, x: &[T], theta: &[T]) -> Result<Self> {
        let len = require_support(model)?;
        check_theta(model, theta)?;
        model.check_covariate(x)?;
        let mut s = vec![T::zero(); model.param_dim()];
        let mut log_w = Vec::with_capacity(len);
        for idx in 0..len {
            model.support_suff_stat(idx, x, &mut s)?;
            log_w.push(dot(theta, &s));
        }
        Self::from_log_weights(log_w)
    }

    /// Uniform distribution over `len` points.
    pub fn uniform(len: usize) -> Result<Self> {
        Self::from_log_weights(vec![T::zero(); len])
    }

    pub fn len(&self) -> usize {
        self.cdf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cdf.is_empty()
    }

    /// Log-probability of support point `idx`.
    pub fn log_prob(&self, idx: usize) -> T {
        self.log_probs[idx]
    }

    pub fn log_probs(&self) -> &[T] {
        &self.log_probs
    }

    /// Draws one support index using a single uniform variate.
    pub fn draw_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cdf.last().expect("non-empty");
        let u: f64 = rng.random();
        let target = T::lit(u) * total;
        self.cdf
            .partition_point(|&c| c <= target)
            .min(self.cdf.len() - 1)
    }
}

/// Draws `y ~ p(·|x,θ)` by inverse CDF over the enumerated support.
pub fn sample_response<T: Real, M: Model<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    x: &[T],
    theta: &[T],
    rng: &mut R,
) -> Result<Vec<T>> {
    let sampler = SupportSampler::for_model(model, x, theta)?;
    let mut y = Vec::with_capacity(model.response_dim());
    model.support_state(sampler.draw_index(rng), &mut y);
    Ok(y)
}

/// MCML estimate of the toy model in closed form:
/// `logit(ȳₙ) + ψ − logit(ȳᵐ)`.
pub fn toy_closed_form<T: Real>(ybar_n: T, ybar_m: T, psi: T) -> Result<T> {
    let logit = |p: T, what: &str| {
        if p > T::zero() && p < T::one() {
            Ok((p / (T::one() - p)).ln())
        } else {
            Err(McmlError::DegenerateData(format!(
                "{what} mean {p} is not strictly inside (0, 1)"
            )))
        }
    };
    Ok(logit(ybar_n, "data")? + psi - logit(ybar_m, "Monte Carlo")?)
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Observation<T> {
    pub y: Vec<T>,
    pub x: Vec<T>,
}

/// A distinct covariate vector and how many observations carry it.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateGroup<T> {
    pub x: Vec<T>,
    pub count: usize,
}

/// `n` observations `(Yᵢ, Xᵢ)`.
///
/// Observations sharing a covariate vector share their norming constant, so
/// the dataset keeps the distinct covariates alongside the rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    rows: Vec<Observation<T>>,
    groups: Vec<CovariateGroup<T>>,
    group_of: Vec<usize>,
}

impl<T: Real> Dataset<T> {
    pub fn new(rows: Vec<Observation<T>>) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| McmlError::InsufficientData("dataset has no rows".into()))?;
        let (ylen, xlen) = (first.y.len(), first.x.len());
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut groups: Vec<CovariateGroup<T>> = Vec::new();
        let mut group_of = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if row.x.len() != xlen {
                return Err(McmlError::Domain(format!(
                    "row {i}: covariate length {} differs from {xlen}",
                    row.x.len()
                )));
            }
            if row.y.len() != ylen {
                return Err(McmlError::Domain(format!(
                    "row {i}: response length {} differs from {ylen}",
                    row.y.len()
                )));
            }
            let g = *index.entry(bits_key(&row.x)).or_insert_with(|| {
                groups.push(CovariateGroup {
                    x: row.x.clone(),
                    count: 0,
                });
                groups.len() - 1
            });
            groups[g].count += 1;
            group_of.push(g);
        }
        Ok(Self {
            rows,
            groups,
            group_of,
        })
    }

    /// Dataset with no covariates.
    pub fn from_responses(ys: Vec<Vec<T>>) -> Result<Self> {
        Self::new(
            ys.into_iter()
                .map(|y| Observation { y, x: Vec::new() })
                .collect(),
        )
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Observation<T>] {
        &self.rows
    }

    pub fn covariate_groups(&self) -> &[CovariateGroup<T>] {
        &self.groups
    }

    /// Index into [`Dataset::covariate_groups`] for row `i`.
    pub fn group_of(&self, i: usize) -> usize {
        self.group_of[i]
    }

    /// Checks every row against the model domain.
    pub fn validate_for<M: Model<T> + ?Sized>(&self, model: &M) -> Result<()> {
        let mut s = vec![T::zero(); model.param_dim()];
        for (i, row) in self.rows.iter().enumerate() {
            model
                .check_covariate(&row.x)
                .and_then(|_| model.suff_stat_into(&row.y, &row.x, &mut s))
                .map_err(|e| McmlError::Domain(format!("row {i}: {e}")))?;
        }
        Ok(())
    }

    /// `Σᵢ S(Yᵢ, Xᵢ)`
    pub fn total_suff_stat<M: Model<T> + ?Sized>(&self, model: &M) -> Result<Vec<T>> {
        let p = model.param_dim();
        let mut total = vec![T::zero(); p];
        let mut s = vec![T::zero(); p];
        for row in &self.rows {
            model.suff_stat_into(&row.y, &row.x, &mut s)?;
            for (t, &si) in total.iter_mut().zip(&s) {
                *t = *t + si;
            }
        }
        Ok(total)
    }

    /// Mean of the first response coordinate.
    pub fn mean_response(&self) -> T {
        let s: T = self.rows.iter().map(|r| r.y[0]).sum();
        s / T::from_usize(self.n()).expect("n fits")
    }
}

// ---------------------------------------------------------------------------
// Builtin models
// ---------------------------------------------------------------------------

fn binary<T: Real>(v: T) -> Option<bool> {
    if v == T::zero() {
        Some(false)
    } else if v == T::one() {
        Some(true)
    } else {
        None
    }
}

/// `f(y|θ) = exp(θ y)` on `{0, 1}`; covariates are ignored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ToyBernoulli;

impl<T: Real> Model<T> for ToyBernoulli {
    fn label(&self) -> &str {
        "toy"
    }

    fn param_dim(&self) -> usize {
        1
    }

    fn response_dim(&self) -> usize {
        1
    }

    fn check_covariate(&self, _x: &[T]) -> Result<()> {
        Ok(())
    }

    fn suff_stat_into(&self, y: &[T], _x: &[T], out: &mut [T]) -> Result<()> {
        match y {
            [v] if binary(*v).is_some() => {
                out[0] = *v;
                Ok(())
            }
            _ => Err(McmlError::Domain(format!(
                "toy response must be 0 or 1, got {y:?}"
            ))),
        }
    }

    fn support_len(&self) -> Option<usize> {
        Some(2)
    }

    fn support_state(&self, idx: usize, out: &mut Vec<T>) {
        out.clear();
        out.push(T::from_usize(idx).expect("0 or 1"));
    }

    fn support_suff_stat(&self, idx: usize, _x: &[T], out: &mut [T]) -> Result<()> {
        out[0] = T::from_usize(idx).expect("0 or 1");
        Ok(())
    }
}

/// Autologistic model on an `rows × cols` lattice with 4-neighbourhood and
/// free boundary.
///
/// `S(y,x) = (Σᵢ xᵢ yᵢ, Σ_{i~j} yᵢ yⱼ)` where the site weights `xᵢ` come
/// from the covariate vector: empty means all ones, a single value is
/// broadcast to every site, otherwise one weight per site (row-major).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Autologistic {
    rows: usize,
    cols: usize,
    edges: Vec<(usize, usize)>,
    label: String,
}

impl Autologistic {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        let sites = rows * cols;
        if sites == 0 {
            return Err(McmlError::Config(
                "lattice must have at least one site".into(),
            ));
        }
        if sites > 20 {
            return Err(McmlError::Config(format!(
                "lattice with {sites} sites exceeds the 2^20 enumeration limit"
            )));
        }
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if c + 1 < cols {
                    edges.push((i, i + 1));
                }
                if r + 1 < rows {
                    edges.push((i, i + cols));
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            edges,
            label: format!("autologistic-{rows}x{cols}"),
        })
    }

    pub fn sites(&self) -> usize {
        self.rows * self.cols
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    fn site_weight<T: Real>(&self, x: &[T], i: usize) -> T {
        match x.len() {
            0 => T::one(),
            1 => x[0],
            _ => x[i],
        }
    }
}

impl<T: Real> Model<T> for Autologistic {
    fn label(&self) -> &str {
        &self.label
    }

    fn param_dim(&self) -> usize {
        2
    }

    fn response_dim(&self) -> usize {
        self.sites()
    }

    fn check_covariate(&self, x: &[T]) -> Result<()> {
        match x.len() {
            0 | 1 => Ok(()),
            l if l == self.sites() => Ok(()),
            l => Err(McmlError::Domain(format!(
                "autologistic covariate must have 0, 1 or {} entries, got {l}",
                self.sites()
            ))),
        }
    }

    fn suff_stat_into(&self, y: &[T], x: &[T], out: &mut [T]) -> Result<()> {
        if y.len() != self.sites() {
            return Err(McmlError::Domain(format!(
                "expected {} lattice sites, got {}",
                self.sites(),
                y.len()
            )));
        }
        self.check_covariate(x)?;
        let mut main = T::zero();
        let mut on = vec![false; y.len()];
        for (i, &v) in y.iter().enumerate() {
            on[i] = binary(v)
                .ok_or_else(|| McmlError::Domain(format!("site {i} value {v} is not binary")))?;
            if on[i] {
                main = main + self.site_weight(x, i);
            }
        }
        let pairs = self.edges.iter().filter(|&&(a, b)| on[a] && on[b]).count();
        out[0] = main;
        out[1] = T::from_usize(pairs).expect("edge count fits");
        Ok(())
    }

    fn support_len(&self) -> Option<usize> {
        Some(1 << self.sites())
    }

    fn support_state(&self, idx: usize, out: &mut Vec<T>) {
        out.clear();
        out.extend((0..self.sites()).map(|i| {
            if idx >> i & 1 == 1 {
                T::one()
            } else {
                T::zero()
            }
        }));
    }

    fn support_suff_stat(&self, idx: usize, x: &[T], out: &mut [T]) -> Result<()> {
        let mut main = T::zero();
        for i in 0..self.sites() {
            if idx >> i & 1 == 1 {
                main = main + self.site_weight(x, i);
            }
        }
        let pairs = self
            .edges
            .iter()
            .filter(|&&(a, b)| idx >> a & 1 == 1 && idx >> b & 1 == 1)
            .count();
        out[0] = main;
        out[1] = T::from_usize(pairs).expect("edge count fits");
        Ok(())
    }
}

/// User-supplied family on an explicit finite state list with one
/// sufficient-statistic vector per state. Covariates are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteFamily<T> {
    label: String,
    param_dim: usize,
    states: Vec<Vec<T>>,
    stats: Vec<Vec<T>>,
    index: HashMap<Vec<u64>, usize>,
}

impl<T: Real> FiniteFamily<T> {
    pub fn new(
        label: impl Into<String>,
        param_dim: usize,
        states: Vec<Vec<T>>,
        stats: Vec<Vec<T>>,
    ) -> Result<Self> {
        if param_dim == 0 {
            return Err(McmlError::Config("param_dim must be positive".into()));
        }
        if states.is_empty() {
            return Err(McmlError::Config("state list is empty".into()));
        }
        if states.len() > MAX_SUPPORT {
            return Err(McmlError::Config("state list exceeds 2^20 entries".into()));
        }
        if states.len() != stats.len() {
            return Err(McmlError::Config(format!(
                "{} states but {} statistic rows",
                states.len(),
                stats.len()
            )));
        }
        let dim = states[0].len();
        let mut index = HashMap::with_capacity(states.len());
        for (i, (state, stat)) in states.iter().zip(&stats).enumerate() {
            if state.len() != dim {
                return Err(McmlError::Config(format!(
                    "state {i} has length {}, expected {dim}",
                    state.len()
                )));
            }
            if stat.len() != param_dim {
                return Err(McmlError::Config(format!(
                    "statistic {i} has length {}, expected {param_dim}",
                    stat.len()
                )));
            }
            if state.iter().chain(stat).any(|v| !v.is_finite()) {
                return Err(McmlError::Config(format!(
                    "state {i} has non-finite entries"
                )));
            }
            if index.insert(bits_key(state), i).is_some() {
                return Err(McmlError::Config(format!("duplicate state {i}")));
            }
        }
        Ok(Self {
            label: label.into(),
            param_dim,
            states,
            stats,
            index,
        })
    }
}

impl<T: Real> Model<T> for FiniteFamily<T> {
    fn label(&self) -> &str {
        &self.label
    }

    fn param_dim(&self) -> usize {
        self.param_dim
    }

    fn response_dim(&self) -> usize {
        self.states[0].len()
    }

    fn check_covariate(&self, _x: &[T]) -> Result<()> {
        Ok(())
    }

    fn suff_stat_into(&self, y: &[T], _x: &[T], out: &mut [T]) -> Result<()> {
        let idx = self
            .index
            .get(&bits_key(y))
            .ok_or_else(|| McmlError::Domain(format!("{y:?} is not a listed state")))?;
        out.copy_from_slice(&self.stats[*idx]);
        Ok(())
    }

    fn support_len(&self) -> Option<usize> {
        Some(self.states.len())
    }

    fn support_state(&self, idx: usize, out: &mut Vec<T>) {
        out.clear();
        out.extend_from_slice(&self.states[idx]);
    }

    fn support_suff_stat(&self, idx: usize, _x: &[T], out: &mut [T]) -> Result<()> {
        out.copy_from_slice(&self.stats[idx]);
        Ok(())
    }
}
