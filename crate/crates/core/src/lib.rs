//! Monte Carlo maximum likelihood for exponential families
//! `p(y|x,θ) = exp(θᵀS(y,x)) / C(x,θ)` whose norming constant `C` is
//! replaced by an importance-sampling estimate from one shared sample.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases below fix the scalar to `f64`, which is what the experiment
//! harness and the command-line tool use.
//!
//! ```
//! use mcml::{draw_instrumental, fit_mcml, infer, Dataset64, FitOptions, Instrumental, ToyBernoulli};
//! use mcml::rng::root_stream;
//!
//! let data = Dataset64::from_responses(vec![vec![1.0], vec![1.0], vec![0.0], vec![1.0]]).unwrap();
//! let sample = draw_instrumental(&Instrumental::model_at(vec![0.0]), &ToyBernoulli, 10_000, &mut root_stream(1)).unwrap();
//! let fit = fit_mcml(&data, &sample, &ToyBernoulli, &FitOptions::default()).unwrap();
//! let inference = infer(fit, &data, &sample, &ToyBernoulli).unwrap();
//! assert!((inference.fit.theta_hat[0] - 3f64.ln()).abs() < 0.1);
//! ```

// `!(x > 0)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asymptotics;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod importance;
pub mod likelihood;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod scalar;

pub use asymptotics::{
    confidence_region, estimate_d, estimate_v, estimate_w, infer, phi, sandwich_cov, standardize,
    ConfidenceRegion, Inference, PhiValue, SandwichParts,
};
pub use error::{McmlError, Result, TraceEntry};
pub use estimator::{fit_exact, fit_mcml, FitOptions, FitResult};
pub use importance::{draw_instrumental, mc_norming, ImportanceSample, Instrumental};
pub use likelihood::{
    cappe_log_weights, cappe_loglik, exact_loglik, mc_loglik, JointSample, NormingSource,
    ObjectiveEval,
};
pub use linalg::Matrix;
pub use model::{
    exact_norming, log_unnorm_density, sample_response, suff_stat, toy_closed_form, Autologistic,
    Dataset, FiniteFamily, Model, NormingTriple, Observation, SupportSampler, ToyBernoulli,
};
pub use scalar::Real;

pub type Dataset64 = Dataset<f64>;
pub type ImportanceSample64 = ImportanceSample<f64>;
pub type Instrumental64 = Instrumental<f64>;
pub type FitOptions64 = FitOptions<f64>;
pub type FitResult64 = FitResult<f64>;
pub type Matrix64 = Matrix<f64>;
pub type NormingTriple64 = NormingTriple<f64>;
pub type SandwichParts64 = SandwichParts<f64>;
pub type Inference64 = Inference<f64>;
pub type FiniteFamily64 = FiniteFamily<f64>;
pub type DynModel64 = dyn Model<f64>;
