//! Exact and Monte Carlo log-likelihoods with score and Hessian, plus the
//! product-weight scheme kept for comparison experiments.

use rand::Rng;

use crate::error::{McmlError, Result};
use crate::importance::{draw_instrumental, mc_norming, ImportanceSample, Instrumental};
use crate::linalg::Matrix;
use crate::model::{check_theta, exact_norming, Dataset, Model, NormingTriple};
use crate::scalar::{dot, log_sum_exp, Real};

/// Where norming constants come from.
#[derive(Debug, Clone, Copy)]
pub enum NormingSource<'a, T> {
    /// Enumeration of the support.
    Exact,
    /// Importance sampling from a shared instrumental sample.
    MonteCarlo(&'a ImportanceSample<T>),
}

impl<T: Real> NormingSource<'_, T> {
    pub fn norming<M: Model<T> + ?Sized>(
        &self,
        model: &M,
        x: &[T],
        theta: &[T],
    ) -> Result<NormingTriple<T>> {
        match self {
            NormingSource::Exact => exact_norming(model, x, theta),
            NormingSource::MonteCarlo(sample) => mc_norming(sample, model, x, theta),
        }
    }

    /// One norming triple per distinct covariate of `data`.
    pub fn per_group<M: Model<T> + ?Sized>(
        &self,
        data: &Dataset<T>,
        model: &M,
        theta: &[T],
    ) -> Result<Vec<NormingTriple<T>>> {
        data.covariate_groups()
            .iter()
            .map(|g| self.norming(model, &g.x, theta))
            .collect()
    }
}

/// Objective value with its gradient and Hessian.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEval<T> {
    pub value: T,
    pub score: Vec<T>,
    pub hess: Matrix<T>,
}

impl<T: Real> ObjectiveEval<T> {
    /// Divides value, score and Hessian by `n`.
    pub fn scaled(&self, n: usize) -> Self {
        let inv = T::one() / T::from_usize(n).expect("n fits");
        Self {
            value: self.value * inv,
            score: self.score.iter().map(|&s| s * inv).collect(),
            hess: self.hess.scale(inv),
        }
    }
}

/// `Σᵢ θᵀS(Yᵢ,Xᵢ) − Σᵢ log C(Xᵢ,θ)` with `C` from `source`.
pub fn loglik<T: Real, M: Model<T> + ?Sized>(
    data: &Dataset<T>,
    model: &M,
    theta: &[T],
    source: NormingSource<'_, T>,
) -> Result<ObjectiveEval<T>> {
    check_theta(model, theta)?;
    let p = model.param_dim();
    let total = data.total_suff_stat(model)?;
    let mut value = dot(theta, &total);
    let mut score = total;
    let mut hess = Matrix::zeros(p, p);
    for (g, norming) in data
        .covariate_groups()
        .iter()
        .zip(source.per_group(data, model, theta)?)
    {
        let c = T::from_usize(g.count).expect("count fits");
        value = value - c * norming.ln_value();
        for (s, gl) in score.iter_mut().zip(norming.grad_log()) {
            *s = *s - c * gl;
        }
        hess.axpy(-c, &norming.hess_log());
    }
    Ok(ObjectiveEval {
        value,
        score,
        hess: hess.symmetrize(),
    })
}

/// Monte Carlo log-likelihood `ℓₙᵐ(θ)` (unscaled).
pub fn mc_loglik<T: Real, M: Model<T> + ?Sized>(
    data: &Dataset<T>,
    sample: &ImportanceSample<T>,
    model: &M,
    theta: &[T],
) -> Result<ObjectiveEval<T>> {
    loglik(data, model, theta, NormingSource::MonteCarlo(sample))
}

/// Exact log-likelihood `ℓₙ(θ)` (unscaled).
pub fn exact_loglik<T: Real, M: Model<T> + ?Sized>(
    data: &Dataset<T>,
    model: &M,
    theta: &[T],
) -> Result<ObjectiveEval<T>> {
    loglik(data, model, theta, NormingSource::Exact)
}

/// Per-observation instrumental samples `Yᵢ¹..Yᵢᵐ ~ hᵢ`, all of size `m`.
#[derive(Debug, Clone)]
pub struct JointSample<T> {
    per_obs: Vec<ImportanceSample<T>>,
}

impl<T: Real> JointSample<T> {
    pub fn new(per_obs: Vec<ImportanceSample<T>>) -> Result<Self> {
        let m = per_obs
            .first()
            .ok_or_else(|| McmlError::InsufficientData("no per-observation samples".into()))?
            .m();
        if let Some(bad) = per_obs.iter().find(|s| s.m() != m) {
            return Err(McmlError::Dimension {
                expected: m,
                got: bad.m(),
            });
        }
        Ok(Self { per_obs })
    }

    /// `n` independent samples of size `m` from a shared `h`.
    pub fn draw<M: Model<T> + ?Sized, R: Rng + ?Sized>(
        instr: &Instrumental<T>,
        model: &M,
        n: usize,
        m: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let per_obs = (0..n)
            .map(|_| draw_instrumental(instr, model, m, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(per_obs)
    }

    pub fn n(&self) -> usize {
        self.per_obs.len()
    }

    pub fn m(&self) -> usize {
        self.per_obs[0].m()
    }

    pub fn observation(&self, i: usize) -> &ImportanceSample<T> {
        &self.per_obs[i]
    }
}

/// Product log-weights `Σᵢ [θᵀS(Yᵢᵏ,Xᵢ) − log hᵢ(Yᵢᵏ)]`, one per `k`.
pub fn cappe_log_weights<T: Real, M: Model<T> + ?Sized>(
    data: &Dataset<T>,
    joint: &JointSample<T>,
    model: &M,
    theta: &[T],
) -> Result<Vec<T>> {
    check_theta(model, theta)?;
    if joint.n() != data.n() {
        return Err(McmlError::Dimension {
            expected: data.n(),
            got: joint.n(),
        });
    }
    let mut lw = vec![T::zero(); joint.m()];
    let mut s = vec![T::zero(); model.param_dim()];
    for (row, sample) in data.rows().iter().zip(&joint.per_obs) {
        for (k, (y, &lh)) in sample.draws().iter().zip(sample.log_h()).enumerate() {
            model.suff_stat_into(y, &row.x, &mut s)?;
            lw[k] = lw[k] + dot(theta, &s) - lh;
        }
    }
    Ok(lw)
}

/// `Σᵢ log f(Yᵢ|Xᵢ,θ) − log[(1/m) Σₖ Πᵢ f(Yᵢᵏ|Xᵢ,θ)/hᵢ(Yᵢᵏ)]`.
pub fn cappe_loglik<T: Real, M: Model<T> + ?Sized>(
    data: &Dataset<T>,
    joint: &JointSample<T>,
    model: &M,
    theta: &[T],
) -> Result<T> {
    let lw = cappe_log_weights(data, joint, model, theta)?;
    let log_mean = log_sum_exp(&lw) - T::from_usize(lw.len()).expect("m fits").ln();
    if !log_mean.is_finite() {
        return Err(McmlError::NumericalUnderflow);
    }
    Ok(dot(theta, &data.total_suff_stat(model)?) - log_mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Autologistic, Observation, ToyBernoulli};
    use crate::rng::root_stream;

    fn toy_data(ys: &[f64]) -> Dataset<f64> {
        Dataset::from_responses(ys.iter().map(|&y| vec![y]).collect()).unwrap()
    }

    #[test]
    fn hand_computed_mc_loglik() {
        let data = toy_data(&[1.0]);
        let s = ImportanceSample::from_draws(vec![vec![1.0], vec![0.0]], vec![0.5_f64.ln(); 2], "")
            .unwrap();
        let v = mc_loglik(&data, &s, &ToyBernoulli, &[2.0_f64.ln()]).unwrap();
        assert!((v.value - (2.0_f64.ln() - 3.0_f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn self_instrument_reproduces_exact_loglik() {
        let m = Autologistic::new(2, 2).unwrap();
        let psi = vec![0.3_f64, 0.2];
        let mut rng = root_stream(8);
        let data = Dataset::from_responses(
            (0..30)
                .map(|_| crate::model::sample_response(&m, &[], &psi, &mut rng).unwrap())
                .collect(),
        )
        .unwrap();
        let s = draw_instrumental(&Instrumental::model_at(psi.clone()), &m, 25, &mut rng).unwrap();
        let a = mc_loglik(&data, &s, &m, &psi).unwrap();
        let b = exact_loglik(&data, &m, &psi).unwrap();
        assert!((a.value - b.value).abs() < 1e-10 * b.value.abs());
    }

    #[test]
    fn toy_score_matches_closed_form_equation() {
        let data = toy_data(&[1.0, 1.0, 0.0, 1.0, 0.0]);
        let psi = 0.4;
        let s = draw_instrumental(
            &Instrumental::model_at(vec![psi]),
            &ToyBernoulli,
            300,
            &mut root_stream(2),
        )
        .unwrap();
        let ybar_m = s.mean_response();
        let ybar_n = data.mean_response();
        for theta in [-1.0, 0.0, 0.7, 2.0] {
            let e = mc_loglik(&data, &s, &ToyBernoulli, &[theta])
                .unwrap()
                .scaled(data.n());
            let q = ybar_m * (theta - psi).exp();
            let want = ybar_n - q / (q + 1.0 - ybar_m);
            assert!(
                (e.score[0] - want).abs() < 1e-13,
                "{} vs {want}",
                e.score[0]
            );
        }
    }

    #[test]
    fn exact_loglik_examples() {
        let data = toy_data(&[1.0, 0.0, 1.0]);
        let v = exact_loglik(&data, &ToyBernoulli, &[0.0]).unwrap();
        assert!((v.value + 3.0 * 2.0_f64.ln()).abs() < 1e-14);

        let data = toy_data(&[1.0, 1.0, 1.0, 0.0]);
        let v = exact_loglik(&data, &ToyBernoulli, &[3.0_f64.ln()]).unwrap();
        assert!(v.score[0].abs() < 1e-14);

        let m = Autologistic::new(2, 2).unwrap();
        let data = Dataset::from_responses(vec![vec![1.0, 0.0, 1.0, 1.0]; 5]).unwrap();
        let v = exact_loglik(&data, &m, &[0.0, 0.0]).unwrap();
        assert!((v.value + 5.0 * 16.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cappe_matches_mc_at_single_observation() {
        let m = Autologistic::new(2, 2).unwrap();
        let data = Dataset::new(vec![Observation {
            y: vec![1.0_f64, 0.0, 0.0, 1.0],
            x: vec![0.8],
        }])
        .unwrap();
        let joint = JointSample::draw(
            &Instrumental::UniformOnSupport,
            &m,
            1,
            400,
            &mut root_stream(6),
        )
        .unwrap();
        let theta = [0.5, -0.25];
        let a = cappe_loglik(&data, &joint, &m, &theta).unwrap();
        let b = mc_loglik(&data, joint.observation(0), &m, &theta)
            .unwrap()
            .value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn cappe_constant_weights_at_zero() {
        let data = toy_data(&[1.0, 0.0, 0.0]);
        let joint = JointSample::draw(
            &Instrumental::UniformOnSupport,
            &ToyBernoulli,
            3,
            50,
            &mut root_stream(1),
        )
        .unwrap();
        let lw = cappe_log_weights(&data, &joint, &ToyBernoulli, &[0.0]).unwrap();
        assert!(lw.iter().all(|&l| (l - 3.0 * 2.0_f64.ln()).abs() < 1e-14));
        let v = cappe_loglik(&data, &joint, &ToyBernoulli, &[0.0]).unwrap();
        let exact = exact_loglik(&data, &ToyBernoulli, &[0.0]).unwrap().value;
        assert!((v - exact).abs() < 1e-13);
    }

    #[test]
    fn joint_sample_rejects_mismatched_sizes() {
        let a = draw_instrumental(
            &Instrumental::UniformOnSupport,
            &ToyBernoulli,
            3,
            &mut root_stream(1),
        )
        .unwrap();
        let b = draw_instrumental(
            &Instrumental::UniformOnSupport,
            &ToyBernoulli,
            4,
            &mut root_stream(1),
        )
        .unwrap();
        assert!(JointSample::<f64>::new(vec![a, b]).is_err());
        assert!(JointSample::<f64>::new(vec![]).is_err());
    }
}
