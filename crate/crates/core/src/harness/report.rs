//! Machine-readable experiment reports.
//!
//! Every report is written as pretty JSON at the requested path plus a CSV
//! dump of its per-replication records next to it (same stem, `.csv`).
//! Reports contain nothing that depends on wall-clock time or thread count,
//! so identical configurations produce identical files.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, InstrumentalSpec, ModelSpec};
use crate::error::{McmlError, Result};

/// Share of excluded replications above which a report is flagged invalid.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.01;

pub trait Report: Serialize + DeserializeOwned {
    /// Header and rows for the CSV record dump.
    fn csv_records(&self) -> (Vec<String>, Vec<Vec<String>>);
}

fn fmt(v: f64) -> String {
    // Shortest representation that round-trips.
    format!("{v:?}")
}

fn numbered(prefix: &str, p: usize) -> impl Iterator<Item = String> + '_ {
    (1..=p).map(move |j| format!("{prefix}_{j}"))
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with `k − 1` normalization; zero for fewer than two values.
pub fn sample_var(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mu = mean(xs);
    xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn csv_path(json_path: &Path) -> PathBuf {
    json_path.with_extension("csv")
}

pub fn persist<R: Report>(report: &R, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report).map_err(|e| McmlError::Io(e.into()))?;
    std::fs::write(path, json + "\n")?;
    let (header, rows) = report.csv_records();
    let mut w = csv::Writer::from_path(csv_path(path)).map_err(|e| McmlError::Io(e.into()))?;
    w.write_record(&header)
        .map_err(|e| McmlError::Io(e.into()))?;
    for row in rows {
        w.write_record(&row).map_err(|e| McmlError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load<R: Report>(path: &Path) -> Result<R> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| McmlError::Parse {
        line: e.line(),
        message: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Coverage
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageRecord {
    pub replication: u64,
    pub theta_hat: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub z: Vec<f64>,
    pub ci_hit: Vec<bool>,
    pub ellipsoid_hit: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CoverageRecord {
    pub fn failed(replication: u64, error: String) -> Self {
        Self {
            replication,
            theta_hat: Vec::new(),
            std_errors: Vec::new(),
            z: Vec::new(),
            ci_hit: Vec::new(),
            ellipsoid_hit: false,
            error: Some(error),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageAggregates {
    pub replications: usize,
    pub valid: usize,
    pub excluded: usize,
    pub invalid: bool,
    /// Per-coordinate share of Wald intervals covering `θ⋆`.
    pub coverage: Vec<f64>,
    pub ellipsoid_coverage: f64,
    pub z_mean: Vec<f64>,
    pub z_var: Vec<f64>,
    pub theta_hat_mean: Vec<f64>,
}

impl CoverageAggregates {
    pub fn from_records(records: &[CoverageRecord], p: usize) -> Self {
        let valid: Vec<&CoverageRecord> = records.iter().filter(|r| r.is_valid()).collect();
        let excluded = records.len() - valid.len();
        let column =
            |f: &dyn Fn(&CoverageRecord) -> f64| valid.iter().map(|r| f(r)).collect::<Vec<f64>>();
        let hit = |b: bool| if b { 1.0 } else { 0.0 };
        Self {
            replications: records.len(),
            valid: valid.len(),
            excluded,
            invalid: excluded as f64 > MAX_EXCLUDED_FRACTION * records.len() as f64,
            coverage: (0..p)
                .map(|j| mean(&column(&|r| hit(r.ci_hit[j]))))
                .collect(),
            ellipsoid_coverage: mean(&column(&|r| hit(r.ellipsoid_hit))),
            z_mean: (0..p).map(|j| mean(&column(&|r| r.z[j]))).collect(),
            z_var: (0..p).map(|j| sample_var(&column(&|r| r.z[j]))).collect(),
            theta_hat_mean: (0..p).map(|j| mean(&column(&|r| r.theta_hat[j]))).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub config: ExperimentConfig,
    pub records: Vec<CoverageRecord>,
    pub aggregates: CoverageAggregates,
}

impl Report for CoverageReport {
    fn csv_records(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let p = self.config.theta_star.len();
        let header = std::iter::once("replication".to_string())
            .chain(numbered("theta_hat", p))
            .chain(numbered("std_error", p))
            .chain(numbered("z", p))
            .chain(numbered("ci_hit", p))
            .chain(["ellipsoid_hit".to_string(), "error".to_string()])
            .collect();
        let pad = |v: &[f64]| -> Vec<String> {
            (0..p)
                .map(|j| v.get(j).map_or(String::new(), |x| fmt(*x)))
                .collect()
        };
        let rows = self
            .records
            .iter()
            .map(|r| {
                let mut row = vec![r.replication.to_string()];
                row.extend(pad(&r.theta_hat));
                row.extend(pad(&r.std_errors));
                row.extend(pad(&r.z));
                row.extend(
                    (0..p).map(|j| r.ci_hit.get(j).map_or(String::new(), |b| b.to_string())),
                );
                row.push(r.ellipsoid_hit.to_string());
                row.push(r.error.clone().unwrap_or_default());
                row
            })
            .collect();
        (header, rows)
    }
}

// ---------------------------------------------------------------------------
// Instrumental-parameter sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub psi_index: usize,
    pub replication: u64,
    /// `θ̂ₙᵐ − θ̂ₙ`
    pub mc_error: Vec<f64>,
    /// Diagonal of the plug-in `D⁻¹ W D⁻¹`.
    pub predicted_scaled_var: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub psi: Vec<f64>,
    pub valid: usize,
    pub excluded: usize,
    pub mc_error_mean: Vec<f64>,
    pub mc_error_var: Vec<f64>,
    /// `m · mc_error_var`
    pub scaled_var: Vec<f64>,
    pub predicted_scaled_var: Vec<f64>,
    /// `e^{−ψ}(1 + e^{ψ})²` for the toy model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy_theory: Option<f64>,
}

impl SweepPoint {
    pub fn from_records(psi: Vec<f64>, m: usize, records: &[&SweepRecord], toy: bool) -> Self {
        let p = psi.len();
        let valid: Vec<&&SweepRecord> = records.iter().filter(|r| r.error.is_none()).collect();
        let errors = |j: usize| valid.iter().map(|r| r.mc_error[j]).collect::<Vec<f64>>();
        let predicted = |j: usize| {
            valid
                .iter()
                .map(|r| r.predicted_scaled_var[j])
                .collect::<Vec<f64>>()
        };
        let mc_error_var: Vec<f64> = (0..p).map(|j| sample_var(&errors(j))).collect();
        Self {
            toy_theory: toy.then(|| (-psi[0]).exp() * (1.0 + psi[0].exp()).powi(2)),
            valid: valid.len(),
            excluded: records.len() - valid.len(),
            mc_error_mean: (0..p).map(|j| mean(&errors(j))).collect(),
            scaled_var: mc_error_var.iter().map(|v| v * m as f64).collect(),
            mc_error_var,
            predicted_scaled_var: (0..p).map(|j| mean(&predicted(j))).collect(),
            psi,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: ExperimentConfig,
    pub points: Vec<SweepPoint>,
    /// Index of the grid point with the smallest total scaled variance.
    pub argmin: usize,
    pub invalid: bool,
    pub records: Vec<SweepRecord>,
}

impl Report for SweepReport {
    fn csv_records(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let p = self.config.theta_star.len();
        let header = ["psi_index".to_string(), "replication".to_string()]
            .into_iter()
            .chain(numbered("mc_error", p))
            .chain(numbered("predicted_scaled_var", p))
            .chain(["error".to_string()])
            .collect();
        let rows = self
            .records
            .iter()
            .map(|r| {
                let mut row = vec![r.psi_index.to_string(), r.replication.to_string()];
                row.extend((0..p).map(|j| r.mc_error.get(j).map_or(String::new(), |x| fmt(*x))));
                row.extend((0..p).map(|j| {
                    r.predicted_scaled_var
                        .get(j)
                        .map_or(String::new(), |x| fmt(*x))
                }));
                row.push(r.error.clone().unwrap_or_default());
                row
            })
            .collect();
        (header, rows)
    }
}

// ---------------------------------------------------------------------------
// Scheme comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRecord {
    pub n: usize,
    pub replication: u64,
    /// Variance over `k` of the product log-weights.
    pub log_weight_var: f64,
    /// Exact variance of the product log-weights under `h`.
    pub predicted_log_weight_var: f64,
    /// `(ℓₙᵐ − ℓₙ)/n` for the shared-sample objective.
    pub shared_error: f64,
    /// The same error for the product-weight objective.
    pub product_error: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparePoint {
    pub n: usize,
    pub valid: usize,
    pub excluded: usize,
    pub mean_log_weight_var: f64,
    pub predicted_log_weight_var: f64,
    pub shared_error_var: f64,
    pub product_error_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub config: ExperimentConfig,
    pub points: Vec<ComparePoint>,
    /// Exact log-weight variance of a single observation, averaged over covariates.
    pub single_observation_var: f64,
    /// Least-squares slope through the origin of `mean_log_weight_var` on `n`.
    pub slope: f64,
    pub invalid: bool,
    pub records: Vec<CompareRecord>,
}

impl Report for CompareReport {
    fn csv_records(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let header = [
            "n",
            "replication",
            "log_weight_var",
            "predicted_log_weight_var",
            "shared_error",
            "product_error",
            "error",
        ]
        .map(String::from)
        .to_vec();
        let rows = self
            .records
            .iter()
            .map(|r| {
                vec![
                    r.n.to_string(),
                    r.replication.to_string(),
                    fmt(r.log_weight_var),
                    fmt(r.predicted_log_weight_var),
                    fmt(r.shared_error),
                    fmt(r.product_error),
                    r.error.clone().unwrap_or_default(),
                ]
            })
            .collect();
        (header, rows)
    }
}

// ---------------------------------------------------------------------------
// Single fit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model: ModelSpec,
    pub instrumental: InstrumentalSpec,
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    pub theta_hat: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub level: f64,
    pub intervals: Vec<(f64, f64)>,
    pub converged: bool,
    pub iterations: usize,
    pub final_grad_norm: f64,
    pub covariance: Vec<Vec<f64>>,
    pub v_hat: Vec<Vec<f64>>,
    pub d_hat: Vec<Vec<f64>>,
    pub w_hat: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl Report for FitReport {
    fn csv_records(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let header = ["parameter", "theta_hat", "std_error", "lower", "upper"]
            .map(String::from)
            .to_vec();
        let rows = (0..self.theta_hat.len())
            .map(|j| {
                vec![
                    (j + 1).to_string(),
                    fmt(self.theta_hat[j]),
                    fmt(self.std_errors[j]),
                    fmt(self.intervals[j].0),
                    fmt(self.intervals[j].1),
                ]
            })
            .collect();
        (header, rows)
    }
}
