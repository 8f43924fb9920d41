//! TOML experiment configuration.
//!
//! ```toml
//! seed = 20240611
//! replications = 1000
//! n = 10000
//! m = 10000
//! theta_star = [0.0]
//! level = 0.95                      # optional, default 0.95
//! covariates = [[0.5], [1.0]]       # optional; uniform over the list, default no covariates
//! psi_grid = [-1.0, 0.0, 1.0]       # psi-sweep only; scalars or vectors
//! n_grid = [1, 2, 4, 8]             # compare-schemes only
//! threads = 4                       # optional worker count
//! output = "report.json"            # optional report path
//!
//! [model]
//! kind = "toy"                      # or "autologistic" with rows/cols,
//!                                   # or "finite" with param_dim/states/stats
//!
//! [instrumental]
//! kind = "model_at"                 # or "uniform"
//! psi = [0.0]
//!
//! [fit]                             # optional Newton settings
//! grad_tol = 1e-8
//! max_iter = 100
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{McmlError, Result};
use crate::estimator::FitOptions;
use crate::importance::Instrumental;
use crate::model::{Autologistic, FiniteFamily, Model, ToyBernoulli};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Toy,
    Autologistic {
        rows: usize,
        cols: usize,
    },
    Finite {
        param_dim: usize,
        states: Vec<Vec<f64>>,
        stats: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        label: Option<String>,
    },
}

impl ModelSpec {
    pub fn build(&self) -> Result<Box<dyn Model<f64>>> {
        Ok(match self {
            ModelSpec::Toy => Box::new(ToyBernoulli),
            ModelSpec::Autologistic { rows, cols } => Box::new(Autologistic::new(*rows, *cols)?),
            ModelSpec::Finite {
                param_dim,
                states,
                stats,
                label,
            } => Box::new(FiniteFamily::new(
                label.clone().unwrap_or_else(|| "finite".into()),
                *param_dim,
                states.clone(),
                stats.clone(),
            )?),
        })
    }

    /// Parses the short command-line form: `toy` or `autologistic:RxC`.
    pub fn parse_short(s: &str) -> Result<Self> {
        let bad = || {
            McmlError::Config(format!(
                "unknown model `{s}`; expected `toy` or `autologistic:RxC`"
            ))
        };
        match s.split_once(':') {
            None if s == "toy" => Ok(ModelSpec::Toy),
            Some(("autologistic", dims)) => {
                let (r, c) = dims.split_once('x').ok_or_else(bad)?;
                Ok(ModelSpec::Autologistic {
                    rows: r.parse().map_err(|_| bad())?,
                    cols: c.parse().map_err(|_| bad())?,
                })
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InstrumentalSpec {
    Uniform,
    ModelAt {
        psi: Vec<f64>,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        x: Vec<f64>,
    },
}

impl InstrumentalSpec {
    pub fn build(&self) -> Instrumental<f64> {
        match self {
            InstrumentalSpec::Uniform => Instrumental::UniformOnSupport,
            InstrumentalSpec::ModelAt { psi, x } => Instrumental::ModelAt {
                psi: psi.clone(),
                x: x.clone(),
            },
        }
    }
}

/// A swept instrumental parameter: a scalar for one-parameter models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PsiPoint {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl PsiPoint {
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            PsiPoint::Scalar(v) => vec![*v],
            PsiPoint::Vector(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSettings {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_halving_max: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub divergence_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<Vec<f64>>,
}

impl FitSettings {
    pub fn options(&self) -> FitOptions<f64> {
        let d = FitOptions::default();
        FitOptions {
            init: self.init.clone(),
            grad_tol: self.grad_tol.unwrap_or(d.grad_tol),
            max_iter: self.max_iter.unwrap_or(d.max_iter),
            step_halving_max: self.step_halving_max.unwrap_or(d.step_halving_max),
            step_tol: d.step_tol,
            divergence_bound: self.divergence_bound.unwrap_or(d.divergence_bound),
        }
    }
}

fn default_level() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub theta_star: Vec<f64>,
    pub n: usize,
    pub m: usize,
    pub instrumental: InstrumentalSpec,
    pub replications: usize,
    pub seed: u64,
    /// Support of the uniform covariate distribution; empty means no covariates.
    #[serde(default)]
    pub covariates: Vec<Vec<f64>>,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub fit: FitSettings,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub psi_grid: Vec<PsiPoint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub n_grid: Vec<usize>,
    /// Worker threads; not echoed into reports since results do not depend on it.
    #[serde(default, skip_serializing)]
    pub threads: Option<usize>,
    /// Default report path; the `--out` flag takes precedence.
    #[serde(default, skip_serializing)]
    pub output: Option<std::path::PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| McmlError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| McmlError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(McmlError::Config("replications must be at least 1".into()));
        }
        if self.n == 0 || self.m == 0 {
            return Err(McmlError::Config("n and m must be at least 1".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(McmlError::Config(format!(
                "level {} outside (0, 1)",
                self.level
            )));
        }
        if self.threads == Some(0) {
            return Err(McmlError::Config("threads must be positive".into()));
        }
        let model = self.model.build()?;
        let p = model.param_dim();
        if self.theta_star.len() != p {
            return Err(McmlError::Config(format!(
                "theta_star has {} entries but the model has {p} parameters",
                self.theta_star.len()
            )));
        }
        if let InstrumentalSpec::ModelAt { psi, x } = &self.instrumental {
            if psi.len() != p {
                return Err(McmlError::Config(format!(
                    "psi has {} entries, expected {p}",
                    psi.len()
                )));
            }
            model.check_covariate(x)?;
        }
        if let Some(bad) = self.psi_grid.iter().find(|q| q.to_vec().len() != p) {
            return Err(McmlError::Config(format!(
                "psi_grid point {bad:?} has the wrong dimension"
            )));
        }
        if self.n_grid.contains(&0) {
            return Err(McmlError::Config("n_grid entries must be positive".into()));
        }
        if let Some(len) = self.covariates.first().map(Vec::len) {
            if self.covariates.iter().any(|x| x.len() != len) {
                return Err(McmlError::Config(
                    "covariate vectors must share one length".into(),
                ));
            }
        }
        for x in &self.covariates {
            model.check_covariate(x)?;
        }
        Ok(())
    }

    /// Covariate support, with the empty vector standing in for "none".
    pub fn covariate_support(&self) -> Vec<Vec<f64>> {
        if self.covariates.is_empty() {
            vec![Vec::new()]
        } else {
            self.covariates.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"
seed = 7
replications = 3
n = 100
m = 200
theta_star = [0.0]
psi_grid = [-1.0, 0.0, 1.0]

[model]
kind = "toy"

[instrumental]
kind = "model_at"
psi = [0.0]
"#;

    #[test]
    fn parses_toy_config() {
        let cfg = ExperimentConfig::from_toml_str(TOY).unwrap();
        assert_eq!(cfg.model, ModelSpec::Toy);
        assert_eq!(cfg.level, 0.95);
        assert_eq!(cfg.psi_grid.len(), 3);
        assert_eq!(cfg.covariate_support(), vec![Vec::<f64>::new()]);
    }

    #[test]
    fn parses_autologistic_and_finite() {
        let text = r#"
seed = 1
replications = 1
n = 10
m = 10
theta_star = [0.3, 0.2]
covariates = [[0.5], [1.0]]
[model]
kind = "autologistic"
rows = 2
cols = 2
[instrumental]
kind = "uniform"
"#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.model.build().unwrap().param_dim(), 2);

        let text = r#"
seed = 1
replications = 1
n = 10
m = 10
theta_star = [0.1]
[model]
kind = "finite"
param_dim = 1
states = [[0.0], [1.0], [2.0]]
stats = [[0.0], [1.0], [4.0]]
[instrumental]
kind = "uniform"
"#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.model.build().unwrap().support_len(), Some(3));
    }

    #[test]
    fn rejects_invalid_configs() {
        let zero_r = TOY.replace("replications = 3", "replications = 0");
        assert!(ExperimentConfig::from_toml_str(&zero_r).is_err());
        let wrong_dim = TOY.replace("theta_star = [0.0]", "theta_star = [0.0, 1.0]");
        assert!(ExperimentConfig::from_toml_str(&wrong_dim).is_err());
        let unknown = format!("bogus = 1\n{TOY}");
        assert!(ExperimentConfig::from_toml_str(&unknown).is_err());
    }

    #[test]
    fn short_model_names() {
        assert_eq!(ModelSpec::parse_short("toy").unwrap(), ModelSpec::Toy);
        assert_eq!(
            ModelSpec::parse_short("autologistic:3x2").unwrap(),
            ModelSpec::Autologistic { rows: 3, cols: 2 }
        );
        assert!(ModelSpec::parse_short("ising").is_err());
    }
}
