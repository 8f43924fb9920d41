//! Instrumental samples and the importance-sampling norming estimator
//! `C_m(x,θ) = (1/m) Σₖ f(Yᵏ|x,θ) / h(Yᵏ)` with its derivatives.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{McmlError, Result};
use crate::model::{check_theta, require_support, Model, NormingTriple, SupportSampler};
use crate::scalar::{bits_key, dot, Real};

/// Instrumental distribution `h`.
#[derive(Debug, Clone, PartialEq)]
pub enum Instrumental<T> {
    /// `h(y) = p(y|x₀,ψ)`. `x` is the covariate the model is instantiated
    /// at; leave it empty for models without covariates.
    ModelAt { psi: Vec<T>, x: Vec<T> },
    /// Uniform over the enumerated support.
    UniformOnSupport,
}

impl<T: Real> Instrumental<T> {
    pub fn model_at(psi: Vec<T>) -> Self {
        Instrumental::ModelAt { psi, x: Vec::new() }
    }

    /// Exact sampler for `h` over the model support. Fails with a domination
    /// error if `h` assigns zero mass to any support point.
    pub fn sampler<M: Model<T> + ?Sized>(&self, model: &M) -> Result<SupportSampler<T>> {
        let len = require_support(model)?;
        let sampler = match self {
            Instrumental::ModelAt { psi, x } => SupportSampler::for_model(model, x, psi)?,
            Instrumental::UniformOnSupport => SupportSampler::uniform(len)?,
        };
        if let Some(idx) = sampler.log_probs().iter().position(|lp| !lp.is_finite()) {
            return Err(McmlError::Domination(format!(
                "h has zero mass at support point {idx}"
            )));
        }
        Ok(sampler)
    }

    /// `log h(y)`
    pub fn log_density<M: Model<T> + ?Sized>(&self, model: &M, y: &[T]) -> Result<T> {
        let len = require_support(model)?;
        match self {
            Instrumental::ModelAt { psi, x } => {
                let c = crate::model::exact_norming(model, x, psi)?;
                Ok(crate::model::log_unnorm_density(model, y, x, psi)? - c.ln_value())
            }
            Instrumental::UniformOnSupport => {
                model.suff_stat_into(y, &[], &mut vec![T::zero(); model.param_dim()])?;
                Ok(-T::from_usize(len).expect("support fits").ln())
            }
        }
    }
}

/// A run of identical draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DrawGroup {
    /// Index of the first draw in the group.
    pub first: usize,
    pub count: usize,
}

/// Draws `Y¹..Yᵐ ~ h` with their log-densities.
///
/// Repeated draws are grouped (in order of first appearance) so that
/// sums over `k` cost one term per distinct point. Groups are a pure
/// regrouping of the same sum.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceSample<T> {
    draws: Vec<Vec<T>>,
    log_h: Vec<T>,
    groups: Vec<DrawGroup>,
    seed_tag: String,
}

impl<T: Real> ImportanceSample<T> {
    pub fn from_draws(
        draws: Vec<Vec<T>>,
        log_h: Vec<T>,
        seed_tag: impl Into<String>,
    ) -> Result<Self> {
        if draws.is_empty() {
            return Err(McmlError::InsufficientData(
                "importance sample is empty".into(),
            ));
        }
        if draws.len() != log_h.len() {
            return Err(McmlError::Dimension {
                expected: draws.len(),
                got: log_h.len(),
            });
        }
        if let Some(k) = log_h.iter().position(|l| !l.is_finite()) {
            return Err(McmlError::Domination(format!("log h(Y^{k}) is not finite")));
        }
        let mut groups: Vec<DrawGroup> = Vec::new();
        let mut seen: HashMap<(Vec<u64>, u64), usize> = HashMap::new();
        for (k, (y, lh)) in draws.iter().zip(&log_h).enumerate() {
            let key = (bits_key(y), lh.as_f64().to_bits());
            let g = *seen.entry(key).or_insert_with(|| {
                groups.push(DrawGroup { first: k, count: 0 });
                groups.len() - 1
            });
            groups[g].count += 1;
        }
        Ok(Self {
            draws,
            log_h,
            groups,
            seed_tag: seed_tag.into(),
        })
    }

    pub fn m(&self) -> usize {
        self.draws.len()
    }

    pub fn draws(&self) -> &[Vec<T>] {
        &self.draws
    }

    pub fn log_h(&self) -> &[T] {
        &self.log_h
    }

    pub fn groups(&self) -> &[DrawGroup] {
        &self.groups
    }

    pub fn seed_tag(&self) -> &str {
        &self.seed_tag
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.seed_tag = tag.into();
        self
    }

    /// Sample mean of the first response coordinate, `Ȳᵐ` for the toy model.
    pub fn mean_response(&self) -> T {
        let s: T = self
            .groups
            .iter()
            .map(|g| self.draws[g.first][0] * T::from_usize(g.count).expect("count fits"))
            .sum();
        s / T::from_usize(self.m()).expect("m fits")
    }
}

/// Draws an i.i.d. sample of size `m` from `h`.
pub fn draw_instrumental<T: Real, M: Model<T> + ?Sized, R: Rng + ?Sized>(
    instr: &Instrumental<T>,
    model: &M,
    m: usize,
    rng: &mut R,
) -> Result<ImportanceSample<T>> {
    if m == 0 {
        return Err(McmlError::Config(
            "Monte Carlo sample size must be positive".into(),
        ));
    }
    let sampler = instr.sampler(model)?;
    let mut draws = Vec::with_capacity(m);
    let mut log_h = Vec::with_capacity(m);
    let mut groups: Vec<DrawGroup> = Vec::new();
    let mut seen: HashMap<usize, usize> = HashMap::new();
    let mut state = Vec::with_capacity(model.response_dim());
    for k in 0..m {
        let idx = sampler.draw_index(rng);
        model.support_state(idx, &mut state);
        draws.push(state.clone());
        log_h.push(sampler.log_prob(idx));
        let g = *seen.entry(idx).or_insert_with(|| {
            groups.push(DrawGroup { first: k, count: 0 });
            groups.len() - 1
        });
        groups[g].count += 1;
    }
    Ok(ImportanceSample {
        draws,
        log_h,
        groups,
        seed_tag: String::new(),
    })
}

/// Per-group log-weights `θᵀS(Yᵏ,x) − log h(Yᵏ)`.
pub(crate) fn group_log_weights<T: Real, M: Model<T> + ?Sized>(
    sample: &ImportanceSample<T>,
    model: &M,
    x: &[T],
    theta: &[T],
) -> Result<Vec<T>> {
    let mut s = vec![T::zero(); model.param_dim()];
    sample
        .groups
        .iter()
        .map(|g| {
            model.suff_stat_into(&sample.draws[g.first], x, &mut s)?;
            Ok(dot(theta, &s) - sample.log_h[g.first])
        })
        .collect()
}

/// Per-draw log-weights `log f(Yᵏ|x,θ) − log h(Yᵏ)`.
pub fn log_weights<T: Real, M: Model<T> + ?Sized>(
    sample: &ImportanceSample<T>,
    model: &M,
    x: &[T],
    theta: &[T],
) -> Result<Vec<T>> {
    check_theta(model, theta)?;
    let mut s = vec![T::zero(); model.param_dim()];
    sample
        .draws
        .iter()
        .zip(&sample.log_h)
        .map(|(y, &lh)| {
            model.suff_stat_into(y, x, &mut s)?;
            Ok(dot(theta, &s) - lh)
        })
        .collect()
}

/// Importance-sampling estimate of `C(x,θ)`, `∇C`, `∇²C`.
pub fn mc_norming<T: Real, M: Model<T> + ?Sized>(
    sample: &ImportanceSample<T>,
    model: &M,
    x: &[T],
    theta: &[T],
) -> Result<NormingTriple<T>> {
    check_theta(model, theta)?;
    model.check_covariate(x)?;
    let lw = group_log_weights(sample, model, x, theta)?;
    let counts: Vec<usize> = sample.groups.iter().map(|g| g.count).collect();
    NormingTriple::accumulate(model.param_dim(), &lw, &counts, sample.m(), |j, out| {
        model.suff_stat_into(&sample.draws[sample.groups[j].first], x, out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{exact_norming, Autologistic, ToyBernoulli};
    use crate::rng::root_stream;

    #[test]
    fn uniform_log_densities() {
        let mut rng = root_stream(3);
        let s = draw_instrumental(&Instrumental::UniformOnSupport, &ToyBernoulli, 20, &mut rng)
            .unwrap();
        assert!(s
            .log_h()
            .iter()
            .all(|&l: &f64| (l - 0.5f64.ln()).abs() < 1e-15));
    }

    #[test]
    fn model_at_zero_matches_uniform_for_toy() {
        let a = draw_instrumental(
            &Instrumental::<f64>::UniformOnSupport,
            &ToyBernoulli,
            200,
            &mut root_stream(9),
        )
        .unwrap();
        let b = draw_instrumental(
            &Instrumental::model_at(vec![0.0]),
            &ToyBernoulli,
            200,
            &mut root_stream(9),
        )
        .unwrap();
        assert_eq!(a.draws(), b.draws());
        for (x, y) in a.log_h().iter().zip(b.log_h()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn autologistic_self_instrument_log_density() {
        let m = Autologistic::new(2, 2).unwrap();
        let s = draw_instrumental(
            &Instrumental::model_at(vec![0.0, 0.0]),
            &m,
            100,
            &mut root_stream(1),
        )
        .unwrap();
        let want = -(16.0_f64).ln();
        assert!(s.log_h().iter().all(|&l| (l - want).abs() < 1e-14));
    }

    #[test]
    fn hand_computed_norming() {
        let s =
            ImportanceSample::from_draws(vec![vec![1.0], vec![0.0]], vec![0.5_f64.ln(); 2], "hand")
                .unwrap();
        let c = mc_norming(&s, &ToyBernoulli, &[], &[2.0_f64.ln()]).unwrap();
        assert!((c.value() - 3.0).abs() < 1e-14);
        // ∇C_m = (1/2)·(2·2·1) = 2, ∇²C_m the same for a 0/1 statistic
        assert!((c.grad()[0] - 2.0).abs() < 1e-14);
        assert!((c.hess()[(0, 0)] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn self_instrument_is_exact() {
        let m = Autologistic::new(2, 2).unwrap();
        let psi = vec![0.4_f64, -0.3];
        let s = draw_instrumental(
            &Instrumental::model_at(psi.clone()),
            &m,
            37,
            &mut root_stream(2),
        )
        .unwrap();
        let mc = mc_norming(&s, &m, &[], &psi).unwrap();
        let ex = exact_norming(&m, &[], &psi).unwrap();
        assert!(((mc.value() - ex.value()) / ex.value()).abs() < 1e-12);
    }

    #[test]
    fn grouping_matches_ungrouped_sum() {
        let m = Autologistic::new(2, 2).unwrap();
        let s = draw_instrumental(
            &Instrumental::UniformOnSupport,
            &m,
            500,
            &mut root_stream(4),
        )
        .unwrap();
        let theta = [0.7_f64, -0.2];
        let x = [1.5];
        let c = mc_norming(&s, &m, &x, &theta).unwrap();
        let lw = log_weights(&s, &m, &x, &theta).unwrap();
        let direct: f64 = lw.iter().map(|l| l.exp()).sum::<f64>() / 500.0;
        assert!((c.value() - direct).abs() < 1e-12 * direct);
        assert!(s.groups().len() <= 16);
        assert_eq!(s.groups().iter().map(|g| g.count).sum::<usize>(), 500);
    }

    #[test]
    fn rejects_bad_samples() {
        assert!(ImportanceSample::<f64>::from_draws(vec![], vec![], "").is_err());
        assert!(matches!(
            ImportanceSample::from_draws(vec![vec![1.0]], vec![f64::NEG_INFINITY], ""),
            Err(McmlError::Domination(_))
        ));
        assert!(draw_instrumental(
            &Instrumental::<f64>::UniformOnSupport,
            &ToyBernoulli,
            0,
            &mut root_stream(1)
        )
        .is_err());
    }

    #[test]
    fn extreme_parameters_do_not_overflow() {
        let s = ImportanceSample::from_draws(vec![vec![1.0], vec![0.0]], vec![0.5_f64.ln(); 2], "")
            .unwrap();
        let c = mc_norming(&s, &ToyBernoulli, &[], &[900.0]).unwrap();
        assert!(c.ln_value().is_finite());
        assert!((c.grad_log()[0] - 1.0).abs() < 1e-12);
    }
}
