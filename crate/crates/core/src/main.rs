use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use mcml::harness::config::{ExperimentConfig, FitSettings, InstrumentalSpec, ModelSpec};
use mcml::harness::dataset::load_dataset;
use mcml::harness::experiments::{
    run_compare_schemes, run_coverage, run_fit, run_psi_sweep, FitRequest,
};
use mcml::harness::report::{persist, Report};
use mcml::McmlError;

#[derive(Parser)]
#[command(
    name = "mcml",
    version,
    about = "Monte Carlo maximum likelihood with a shared importance sample"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Report path; a CSV record dump is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a CSV dataset and print estimates, standard errors and intervals.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// `toy` or `autologistic:RxC`, unless given by --config.
        #[arg(long)]
        model: Option<String>,
        /// Instrumental parameter ψ, comma separated (default zeros).
        #[arg(
            long,
            value_delimiter = ',',
            allow_hyphen_values = true,
            conflicts_with = "uniform"
        )]
        psi: Option<Vec<f64>>,
        /// Use the uniform distribution on the support as instrumental.
        #[arg(long)]
        uniform: bool,
        /// Monte Carlo sample size.
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        level: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Coverage and normality of the standardized estimator over replications.
    Coverage(Common),
    /// Monte Carlo error variance across the configured psi_grid.
    PsiSweep(Common),
    /// Log-weight variance of the product-weight scheme across n_grid.
    CompareSchemes(Common),
}

fn load_config(common: &Common) -> Result<ExperimentConfig, McmlError> {
    let path = common
        .config
        .as_deref()
        .ok_or_else(|| McmlError::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.threads.is_some() {
        cfg.threads = common.threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit<R: Report>(report: &R, out: Option<&Path>) -> Result<(), McmlError> {
    match out {
        Some(path) => persist(report, path),
        None => {
            let json = serde_json::to_string_pretty(report).map_err(|e| McmlError::Io(e.into()))?;
            println!("{json}");
            Ok(())
        }
    }
}

fn experiment<R: Report>(
    common: &Common,
    run: fn(&ExperimentConfig) -> Result<R, McmlError>,
) -> Result<(), McmlError> {
    let cfg = load_config(common)?;
    let start = Instant::now();
    let report = run(&cfg)?;
    eprintln!(
        "finished {} replications in {:.2?}",
        cfg.replications,
        start.elapsed()
    );
    let out = common.out.clone().or(cfg.output.clone());
    emit(&report, out.as_deref())
}

fn fit(
    data: &Path,
    model: Option<String>,
    psi: Option<Vec<f64>>,
    uniform: bool,
    m: Option<usize>,
    level: Option<f64>,
    common: &Common,
) -> Result<(), McmlError> {
    let dataset = load_dataset(data)?;
    let cfg = common
        .config
        .as_deref()
        .map(ExperimentConfig::load)
        .transpose()?;
    let model = match (model, &cfg) {
        (Some(s), _) => ModelSpec::parse_short(&s)?,
        (None, Some(c)) => c.model.clone(),
        (None, None) => return Err(McmlError::Config("--model or --config is required".into())),
    };
    let p = model.build()?.param_dim();
    let instrumental = match (uniform, psi, &cfg) {
        (true, _, _) => InstrumentalSpec::Uniform,
        (false, Some(psi), _) => InstrumentalSpec::ModelAt { psi, x: Vec::new() },
        (false, None, Some(c)) => c.instrumental.clone(),
        (false, None, None) => InstrumentalSpec::ModelAt {
            psi: vec![0.0; p],
            x: Vec::new(),
        },
    };
    let req = FitRequest {
        model,
        instrumental,
        m: m.or(cfg.as_ref().map(|c| c.m)).unwrap_or(10_000),
        seed: common.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0),
        level: level.or(cfg.as_ref().map(|c| c.level)).unwrap_or(0.95),
        fit: cfg
            .as_ref()
            .map_or_else(FitSettings::default, |c| c.fit.clone()),
    };
    if req.m == 0 {
        return Err(McmlError::Config("m must be at least 1".into()));
    }
    let report = run_fit(&dataset, &req)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| McmlError::Io(e.into()))?;
    println!("{json}");
    if let Some(out) = &common.out {
        persist(&report, out)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Fit {
            data,
            model,
            psi,
            uniform,
            m,
            level,
            common,
        } => fit(&data, model, psi, uniform, m, level, &common),
        Command::Coverage(common) => experiment(&common, run_coverage),
        Command::PsiSweep(common) => experiment(&common, run_psi_sweep),
        Command::CompareSchemes(common) => experiment(&common, run_compare_schemes),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 3 })
        }
    }
}
