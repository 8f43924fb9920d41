//! Seeded replication experiments.
//!
//! Replication `r` owns the streams `(seed, r, role, sub)`. Replications run
//! on a rayon pool and are collected in index order, so reports do not depend
//! on the number of worker threads.

use rand::Rng;
use rayon::prelude::*;

use super::config::{ExperimentConfig, FitSettings, InstrumentalSpec, ModelSpec};
use super::report::{
    sample_var, ComparePoint, CompareRecord, CompareReport, CoverageAggregates, CoverageRecord,
    CoverageReport, FitReport, SweepPoint, SweepRecord, SweepReport, MAX_EXCLUDED_FRACTION,
};
use crate::asymptotics::{
    confidence_region, estimate_d, estimate_w, infer, sandwich_cov, standardize, SandwichParts,
};
use crate::error::{McmlError, Result};
use crate::estimator::{fit_exact, fit_mcml};
use crate::importance::{draw_instrumental, Instrumental};
use crate::likelihood::{
    cappe_log_weights, cappe_loglik, exact_loglik, mc_loglik, JointSample, NormingSource,
};
use crate::linalg::Matrix;
use crate::model::{Dataset, Model, Observation, SupportSampler};
use crate::rng::{derive_stream, stream_tag, Role};
use crate::scalar::dot;

fn with_pool<R: Send>(threads: Option<usize>, job: impl FnOnce() -> R + Send) -> Result<R> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| McmlError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(job))
}

/// Simulates datasets from `p(·|x,θ⋆)` with covariates uniform over the
/// configured list.
struct Simulator {
    support: Vec<Vec<f64>>,
    samplers: Vec<SupportSampler<f64>>,
}

impl Simulator {
    fn new(model: &dyn Model<f64>, cfg: &ExperimentConfig) -> Result<Self> {
        let support = cfg.covariate_support();
        let samplers = support
            .iter()
            .map(|x| SupportSampler::for_model(model, x, &cfg.theta_star))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { support, samplers })
    }

    fn dataset(
        &self,
        model: &dyn Model<f64>,
        seed: u64,
        rep: u64,
        n: usize,
        sub: u16,
    ) -> Result<Dataset<f64>> {
        let mut cov_rng = derive_stream(seed, rep, Role::Covariates, sub);
        let mut data_rng = derive_stream(seed, rep, Role::Data, sub);
        let rows = (0..n)
            .map(|_| {
                let j = if self.support.len() == 1 {
                    0
                } else {
                    cov_rng.random_range(0..self.support.len())
                };
                let mut y = Vec::with_capacity(model.response_dim());
                model.support_state(self.samplers[j].draw_index(&mut data_rng), &mut y);
                Observation {
                    y,
                    x: self.support[j].clone(),
                }
            })
            .collect();
        Dataset::new(rows)
    }
}

/// Splits per-replication outcomes into fatal input errors, which abort the
/// experiment, and estimation failures, which are recorded.
fn triage<T>(outcome: Result<T>) -> Result<std::result::Result<T, String>> {
    match outcome {
        Ok(v) => Ok(Ok(v)),
        Err(e) if e.is_input_error() => Err(e),
        Err(e) => Ok(Err(e.to_string())),
    }
}

fn replication_index(r: usize) -> u64 {
    r as u64
}

// ---------------------------------------------------------------------------
// Coverage and normality
// ---------------------------------------------------------------------------

fn coverage_replication(
    cfg: &ExperimentConfig,
    model: &dyn Model<f64>,
    sim: &Simulator,
    instr: &Instrumental<f64>,
    rep: u64,
) -> Result<CoverageRecord> {
    let data = sim.dataset(model, cfg.seed, rep, cfg.n, 0)?;
    let mut mc_rng = derive_stream(cfg.seed, rep, Role::MonteCarlo, 0);
    let sample = draw_instrumental(instr, model, cfg.m, &mut mc_rng)?.with_tag(stream_tag(
        cfg.seed,
        rep,
        Role::MonteCarlo,
        0,
    ));
    let outcome = (|| {
        let fit = fit_mcml(&data, &sample, model, &cfg.fit.options())?;
        let inf = infer(fit, &data, &sample, model)?;
        let region = confidence_region(&inf.fit.theta_hat, &inf.cov, cfg.level)?;
        let z = standardize(&inf.fit.theta_hat, &cfg.theta_star, &inf.parts)?;
        Ok(CoverageRecord {
            replication: rep,
            ci_hit: (0..cfg.theta_star.len())
                .map(|j| region.covers(j, cfg.theta_star[j]))
                .collect(),
            ellipsoid_hit: region.ellipsoid_contains(&cfg.theta_star),
            theta_hat: inf.fit.theta_hat,
            std_errors: inf.std_errors,
            z,
            error: None,
        })
    })();
    Ok(triage(outcome)?.unwrap_or_else(|msg| CoverageRecord::failed(rep, msg)))
}

/// Coverage and normality of the standardized MCML estimator.
pub fn run_coverage(cfg: &ExperimentConfig) -> Result<CoverageReport> {
    cfg.validate()?;
    let model = cfg.model.build()?;
    let sim = Simulator::new(model.as_ref(), cfg)?;
    let instr = cfg.instrumental.build();
    instr.sampler(model.as_ref())?;
    let records = with_pool(cfg.threads, || {
        (0..cfg.replications)
            .into_par_iter()
            .map(|r| coverage_replication(cfg, model.as_ref(), &sim, &instr, replication_index(r)))
            .collect::<Result<Vec<_>>>()
    })??;
    let aggregates = CoverageAggregates::from_records(&records, cfg.theta_star.len());
    Ok(CoverageReport {
        config: cfg.clone(),
        records,
        aggregates,
    })
}

// ---------------------------------------------------------------------------
// Instrumental-parameter sweep
// ---------------------------------------------------------------------------

fn sweep_instrumental(cfg: &ExperimentConfig, psi: Vec<f64>) -> Instrumental<f64> {
    let x = match &cfg.instrumental {
        InstrumentalSpec::ModelAt { x, .. } => x.clone(),
        InstrumentalSpec::Uniform => Vec::new(),
    };
    Instrumental::ModelAt { psi, x }
}

/// Diagonal of `D̂⁻¹ Ŵ D̂⁻¹` at `theta`.
fn predicted_mc_variance(
    data: &Dataset<f64>,
    sample: &crate::importance::ImportanceSample<f64>,
    model: &dyn Model<f64>,
    theta: &[f64],
) -> Result<Vec<f64>> {
    let p = model.param_dim();
    let parts = SandwichParts {
        v_hat: Matrix::zeros(p, p),
        d_hat: estimate_d(data, model, theta, NormingSource::MonteCarlo(sample))?,
        w_hat: estimate_w(data, sample, model, theta)?,
        n: 1,
        m: 1,
    };
    Ok(sandwich_cov(&parts)?.diagonal())
}

fn sweep_replication(
    cfg: &ExperimentConfig,
    model: &dyn Model<f64>,
    sim: &Simulator,
    instruments: &[Instrumental<f64>],
    rep: u64,
) -> Result<Vec<SweepRecord>> {
    // The data and its exact MLE are shared by every grid point.
    let data = sim.dataset(model, cfg.seed, rep, cfg.n, 0)?;
    let opts = cfg.fit.options();
    let exact = triage(fit_exact(&data, model, &opts))?;
    instruments
        .iter()
        .enumerate()
        .map(|(k, instr)| {
            let failed = |msg: String| SweepRecord {
                psi_index: k,
                replication: rep,
                mc_error: Vec::new(),
                predicted_scaled_var: Vec::new(),
                error: Some(msg),
            };
            let exact = match &exact {
                Ok(f) => f,
                Err(msg) => return Ok(failed(msg.clone())),
            };
            let sub =
                u16::try_from(k).map_err(|_| McmlError::Config("psi_grid is too long".into()))?;
            let mut mc_rng = derive_stream(cfg.seed, rep, Role::MonteCarlo, sub);
            let sample = draw_instrumental(instr, model, cfg.m, &mut mc_rng)?;
            let outcome = (|| {
                let fit = fit_mcml(&data, &sample, model, &opts)?;
                let predicted = predicted_mc_variance(&data, &sample, model, &fit.theta_hat)?;
                Ok(SweepRecord {
                    psi_index: k,
                    replication: rep,
                    mc_error: fit
                        .theta_hat
                        .iter()
                        .zip(&exact.theta_hat)
                        .map(|(a, b)| a - b)
                        .collect(),
                    predicted_scaled_var: predicted,
                    error: None,
                })
            })();
            Ok(triage(outcome)?.unwrap_or_else(failed))
        })
        .collect()
}

/// Monte Carlo error variance of `θ̂ₙᵐ − θ̂ₙ` across instrumental parameters.
pub fn run_psi_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    if cfg.psi_grid.is_empty() {
        return Err(McmlError::Config(
            "psi-sweep needs a non-empty psi_grid".into(),
        ));
    }
    if cfg.m < 2 {
        return Err(McmlError::Config("psi-sweep needs m >= 2".into()));
    }
    let model = cfg.model.build()?;
    let sim = Simulator::new(model.as_ref(), cfg)?;
    let instruments: Vec<Instrumental<f64>> = cfg
        .psi_grid
        .iter()
        .map(|q| sweep_instrumental(cfg, q.to_vec()))
        .collect();
    for instr in &instruments {
        instr.sampler(model.as_ref())?;
    }
    let per_rep = with_pool(cfg.threads, || {
        (0..cfg.replications)
            .into_par_iter()
            .map(|r| {
                sweep_replication(
                    cfg,
                    model.as_ref(),
                    &sim,
                    &instruments,
                    replication_index(r),
                )
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let records: Vec<SweepRecord> = per_rep.into_iter().flatten().collect();

    let toy = cfg.model == ModelSpec::Toy;
    let points: Vec<SweepPoint> = cfg
        .psi_grid
        .iter()
        .enumerate()
        .map(|(k, q)| {
            let at: Vec<&SweepRecord> = records.iter().filter(|r| r.psi_index == k).collect();
            SweepPoint::from_records(q.to_vec(), cfg.m, &at, toy)
        })
        .collect();
    let total = |p: &SweepPoint| p.scaled_var.iter().sum::<f64>();
    let argmin = (0..points.len())
        .min_by(|&a, &b| total(&points[a]).total_cmp(&total(&points[b])))
        .expect("non-empty grid");
    let invalid = points
        .iter()
        .any(|p| p.excluded as f64 > MAX_EXCLUDED_FRACTION * (p.valid + p.excluded) as f64);
    Ok(SweepReport {
        config: cfg.clone(),
        points,
        argmin,
        invalid,
        records,
    })
}

// ---------------------------------------------------------------------------
// Shared-sample versus product-weight schemes
// ---------------------------------------------------------------------------

/// Exact `VAR_{Y~h}[θᵀS(Y,x) − log h(Y)]` by enumeration.
pub fn log_weight_variance(
    model: &dyn Model<f64>,
    h: &SupportSampler<f64>,
    x: &[f64],
    theta: &[f64],
) -> Result<f64> {
    let mut s = vec![0.0; model.param_dim()];
    let (mut m1, mut m2) = (0.0, 0.0);
    for idx in 0..h.len() {
        model.support_suff_stat(idx, x, &mut s)?;
        let lw = dot(theta, &s) - h.log_prob(idx);
        let w = h.log_prob(idx).exp();
        m1 += w * lw;
        m2 += w * lw * lw;
    }
    Ok((m2 - m1 * m1).max(0.0))
}

struct CompareSetup<'a> {
    cfg: &'a ExperimentConfig,
    model: &'a dyn Model<f64>,
    sim: &'a Simulator,
    instr: &'a Instrumental<f64>,
    h: &'a SupportSampler<f64>,
}

fn compare_replication(
    setup: &CompareSetup<'_>,
    n: usize,
    sub: u16,
    rep: u64,
) -> Result<CompareRecord> {
    let CompareSetup {
        cfg,
        model,
        sim,
        instr,
        h,
    } = *setup;
    let theta = &cfg.theta_star;
    let data = sim.dataset(model, cfg.seed, rep, n, sub)?;
    let mut joint_rng = derive_stream(cfg.seed, rep, Role::Joint, sub);
    let joint = JointSample::draw(instr, model, n, cfg.m, &mut joint_rng)?;
    let mut mc_rng = derive_stream(cfg.seed, rep, Role::MonteCarlo, sub);
    let shared = draw_instrumental(instr, model, cfg.m, &mut mc_rng)?;

    let lw = cappe_log_weights(&data, &joint, model, theta)?;
    let mut predicted = 0.0;
    for row in data.rows() {
        predicted += log_weight_variance(model, h, &row.x, theta)?;
    }
    let outcome = (|| {
        let exact = exact_loglik(&data, model, theta)?.value;
        let nf = n as f64;
        Ok(CompareRecord {
            n,
            replication: rep,
            log_weight_var: sample_var(&lw),
            predicted_log_weight_var: predicted,
            shared_error: (mc_loglik(&data, &shared, model, theta)?.value - exact) / nf,
            product_error: (cappe_loglik(&data, &joint, model, theta)? - exact) / nf,
            error: None,
        })
    })();
    Ok(triage(outcome)?.unwrap_or_else(|msg| CompareRecord {
        n,
        replication: rep,
        log_weight_var: sample_var(&lw),
        predicted_log_weight_var: predicted,
        shared_error: f64::NAN,
        product_error: f64::NAN,
        error: Some(msg),
    }))
}

/// Log-weight variance and objective error of the two approximation schemes
/// at `θ⋆` over a grid of sample sizes, with `m` held fixed.
pub fn run_compare_schemes(cfg: &ExperimentConfig) -> Result<CompareReport> {
    cfg.validate()?;
    if cfg.n_grid.is_empty() {
        return Err(McmlError::Config(
            "compare-schemes needs a non-empty n_grid".into(),
        ));
    }
    if cfg.n_grid.len() > usize::from(u16::MAX) {
        return Err(McmlError::Config("n_grid is too long".into()));
    }
    let model = cfg.model.build()?;
    let sim = Simulator::new(model.as_ref(), cfg)?;
    let instr = cfg.instrumental.build();
    let h = instr.sampler(model.as_ref())?;

    let setup = CompareSetup {
        cfg,
        model: model.as_ref(),
        sim: &sim,
        instr: &instr,
        h: &h,
    };
    let per_rep = with_pool(cfg.threads, || {
        (0..cfg.replications)
            .into_par_iter()
            .map(|r| {
                cfg.n_grid
                    .iter()
                    .enumerate()
                    .map(|(k, &n)| compare_replication(&setup, n, k as u16, replication_index(r)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let records: Vec<CompareRecord> = per_rep.into_iter().flatten().collect();

    let points: Vec<ComparePoint> = cfg
        .n_grid
        .iter()
        .map(|&n| {
            let at: Vec<&CompareRecord> = records.iter().filter(|r| r.n == n).collect();
            let valid: Vec<&&CompareRecord> = at.iter().filter(|r| r.error.is_none()).collect();
            let mean = |f: &dyn Fn(&CompareRecord) -> f64| {
                at.iter().map(|r| f(r)).sum::<f64>() / at.len() as f64
            };
            ComparePoint {
                n,
                valid: valid.len(),
                excluded: at.len() - valid.len(),
                mean_log_weight_var: mean(&|r| r.log_weight_var),
                predicted_log_weight_var: mean(&|r| r.predicted_log_weight_var),
                shared_error_var: sample_var(
                    &valid.iter().map(|r| r.shared_error).collect::<Vec<_>>(),
                ),
                product_error_var: sample_var(
                    &valid.iter().map(|r| r.product_error).collect::<Vec<_>>(),
                ),
            }
        })
        .collect();

    let support = cfg.covariate_support();
    let mut single = 0.0;
    for x in &support {
        single += log_weight_variance(model.as_ref(), &h, x, &cfg.theta_star)?;
    }
    let single_observation_var = single / support.len() as f64;
    let (sxy, sxx) = points.iter().fold((0.0, 0.0), |(sxy, sxx), p| {
        let n = p.n as f64;
        (sxy + n * p.mean_log_weight_var, sxx + n * n)
    });
    let invalid = points
        .iter()
        .any(|p| p.excluded as f64 > MAX_EXCLUDED_FRACTION * (p.valid + p.excluded) as f64);
    Ok(CompareReport {
        config: cfg.clone(),
        points,
        single_observation_var,
        slope: sxy / sxx,
        invalid,
        records,
    })
}

// ---------------------------------------------------------------------------
// Single fit
// ---------------------------------------------------------------------------

/// What `fit` needs besides the dataset.
#[derive(Debug, Clone)]
pub struct FitRequest {
    pub model: ModelSpec,
    pub instrumental: InstrumentalSpec,
    pub m: usize,
    pub seed: u64,
    pub level: f64,
    pub fit: FitSettings,
}

/// MCML fit of a dataset with plug-in sandwich standard errors. The
/// importance sample is drawn from stream `(seed, 0, MonteCarlo, 0)`.
pub fn run_fit(data: &Dataset<f64>, req: &FitRequest) -> Result<FitReport> {
    let model = req.model.build()?;
    data.validate_for(model.as_ref())?;
    let instr = req.instrumental.build();
    if let Instrumental::ModelAt { psi, x } = &instr {
        if psi.len() != model.param_dim() {
            return Err(McmlError::Dimension {
                expected: model.param_dim(),
                got: psi.len(),
            });
        }
        model.check_covariate(x)?;
    }
    let mut rng = derive_stream(req.seed, 0, Role::MonteCarlo, 0);
    let sample = draw_instrumental(&instr, model.as_ref(), req.m, &mut rng)?.with_tag(stream_tag(
        req.seed,
        0,
        Role::MonteCarlo,
        0,
    ));
    let fit = fit_mcml(data, &sample, model.as_ref(), &req.fit.options())?;
    let inf = infer(fit, data, &sample, model.as_ref())?;
    let region = confidence_region(&inf.fit.theta_hat, &inf.cov, req.level)?;
    Ok(FitReport {
        model: req.model.clone(),
        instrumental: req.instrumental.clone(),
        n: data.n(),
        m: req.m,
        seed: req.seed,
        theta_hat: inf.fit.theta_hat.clone(),
        std_errors: inf.std_errors.clone(),
        level: req.level,
        intervals: region.intervals,
        converged: inf.fit.converged,
        iterations: inf.fit.iterations,
        final_grad_norm: inf.fit.final_grad_norm,
        covariance: inf.cov.to_rows(),
        v_hat: inf.parts.v_hat.to_rows(),
        d_hat: inf.parts.d_hat.to_rows(),
        w_hat: inf.parts.w_hat.to_rows(),
        warnings: inf.fit.warnings,
    })
}
