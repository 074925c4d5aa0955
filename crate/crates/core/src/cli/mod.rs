//! Command-line front end: `gsens <command> --config <path> [overrides]`.
//!
//! Exit status is 0 on success, 2 when the configuration or arguments are
//! invalid and 3 when the data cannot be read or fitted. A sweep in which
//! some α values have no solution still exits 0; those rows carry a
//! `no_solution` status.

pub mod config;
pub mod io;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{
    ColumnMap, CommandKind, GridConfig, OutputFormat, Overrides, RawConfig, RunConfig, Task,
};
pub use io::{load_csv, load_csv_with_summary, write_dataset_csv, LoadSummary};
pub use report::{emit_report, render_csv, render_json, Report, ReportBody, SweepRow, SweepTable};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::sensitivity::{fit_g_estimator, relevance_check, sweep_alpha};
use crate::simulation::{
    calibrate_linear, calibrate_logistic, run_monte_carlo_with, DgpConfig, FixedCoefficients,
    MonteCarloOptions,
};
use crate::smm::{Link, SmmSpec, Term};
use config::{DataSource, DgpKind, Targets};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_DATA: i32 = 3;

/// Environment variable capping the number of simulation threads.
pub const THREADS_ENV: &str = "GSENS_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "gsens",
    version,
    about = "G-estimation with sensitivity analysis for invalid instruments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate ψ at a single α.
    Fit(CommandArgs),
    /// Estimate ψ over a grid of α values.
    Sweep(CommandArgs),
    /// Monte Carlo coverage study on a calibrated data-generating process.
    Simulate(CommandArgs),
    /// Solve data-generating coefficients for target (ψ, α*, marginals).
    Calibrate(CommandArgs),
    /// First-stage F-test of the instrument.
    Relevance(CommandArgs),
}

#[derive(Debug, Args)]
struct CommandArgs {
    /// TOML run configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Outcome column.
    #[arg(long)]
    y: Option<String>,
    /// Exposure column.
    #[arg(long)]
    x: Option<String>,
    /// Instrument column.
    #[arg(long)]
    z: Option<String>,
    /// Covariate columns, comma separated.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// Divide the exposure by its sample standard deviation.
    #[arg(long)]
    standardize_exposure: bool,
    /// identity, log or logit.
    #[arg(long)]
    link: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    /// Explicit α values, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    grid: Option<Vec<f64>>,
    #[arg(long, allow_hyphen_values = true)]
    grid_center: Option<f64>,
    #[arg(long)]
    grid_half_width: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    grid_start: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    grid_stop: Option<f64>,
    #[arg(long)]
    grid_step: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    psi: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    alpha_star: Option<f64>,
    #[arg(long)]
    p_z: Option<f64>,
    #[arg(long)]
    p_x: Option<f64>,
    #[arg(long)]
    p_y: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; standard output when omitted.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// csv or json; inferred from the output extension when omitted.
    #[arg(long)]
    format: Option<String>,
}

impl CommandArgs {
    fn into_overrides(self) -> (Option<PathBuf>, Overrides) {
        (
            self.config,
            Overrides {
                data_path: self.data,
                y: self.y,
                x: self.x,
                z: self.z,
                covariates: self.covariates,
                standardize_exposure: self.standardize_exposure,
                link: self.link,
                alpha: self.alpha,
                grid_values: self.grid,
                grid_center: self.grid_center,
                grid_half_width: self.grid_half_width,
                grid_start: self.grid_start,
                grid_stop: self.grid_stop,
                grid_step: self.grid_step,
                psi: self.psi,
                alpha_star: self.alpha_star,
                p_z: self.p_z,
                p_x: self.p_x,
                p_y: self.p_y,
                sigma: self.sigma,
                n: self.n,
                m: self.m,
                master_seed: self.seed,
                output_path: self.output,
                output_format: self.format,
            },
        )
    }
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. }
        | Error::InvalidArgument(_)
        | Error::UnsupportedCombination(_)
        | Error::Unreachable(_)
        | Error::NoConvergence(_) => EXIT_VALIDATION,
        _ => EXIT_DATA,
    }
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&t| t >= 1)
            .map(Some)
            .ok_or_else(|| {
                Error::config(
                    THREADS_ENV,
                    format!("expected a positive integer, got `{v}`"),
                )
            }),
        Err(_) => Ok(None),
    }
}

/// Parses arguments, runs the command and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let (kind, args) = match cli.command {
        Command::Fit(a) => (CommandKind::Fit, a),
        Command::Sweep(a) => (CommandKind::Sweep, a),
        Command::Simulate(a) => (CommandKind::Simulate, a),
        Command::Calibrate(a) => (CommandKind::Calibrate, a),
        Command::Relevance(a) => (CommandKind::Relevance, a),
    };
    let result = prepare(kind, args).and_then(|config| {
        let threads = threads_from_env()?;
        run_with_threads(&config, threads)
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("gsens: {e}");
            exit_code(&e)
        }
    }
}

fn prepare(kind: CommandKind, args: CommandArgs) -> Result<RunConfig> {
    let (path, overrides) = args.into_overrides();
    let mut raw = match path {
        Some(p) => RawConfig::from_path(&p)?,
        None => RawConfig::default(),
    };
    match raw.command {
        Some(c) if c != kind => {
            return Err(Error::config(
                "command",
                format!("config file is for `{c}` but `{kind}` was requested"),
            ))
        }
        _ => raw.command = Some(kind),
    }
    raw.apply(overrides)?;
    raw.validate()
}

/// Runs a validated configuration and writes its report.
pub fn run(config: &RunConfig) -> Result<()> {
    run_with_threads(config, None)
}

pub fn run_with_threads(config: &RunConfig, threads: Option<usize>) -> Result<()> {
    let report = execute(config, threads)?;
    emit_report(&report, config.output_format, config.output_path.as_deref())
}

fn load(source: &DataSource) -> Result<Dataset> {
    let mut data = load_csv(&source.path, &source.columns)?;
    if source.standardize_exposure {
        data.standardize_exposure()?;
    }
    Ok(data)
}

/// Model spec for `link` with every covariate in both nuisance formulas.
pub fn spec_for(link: Link, data: &Dataset) -> SmmSpec {
    let mut spec = SmmSpec::new(link);
    for j in 0..data.n_covariates() {
        spec.outcome_formula.push(Term::Covariate(j));
        spec.instrument_formula.push(Term::Covariate(j));
    }
    spec
}

fn calibrate(targets: &Targets) -> Result<DgpConfig> {
    let fixed = FixedCoefficients::default();
    Ok(match targets.dgp {
        DgpKind::Linear { sigma } => DgpConfig::Linear(calibrate_linear(
            targets.psi,
            targets.alpha_star,
            targets.p_z,
            targets.p_x,
            &fixed,
            sigma,
        )?),
        DgpKind::Logistic { p_y } => DgpConfig::Logistic(calibrate_logistic(
            targets.psi,
            targets.alpha_star,
            targets.p_z,
            targets.p_x,
            p_y,
            &fixed,
        )?),
    })
}

/// Computes the report without writing it.
pub fn execute(config: &RunConfig, threads: Option<usize>) -> Result<Report> {
    let (body, seed) = match &config.task {
        Task::Fit { data, link, alpha } => {
            let d = load(data)?;
            let g = fit_g_estimator(&d, &spec_for(*link, &d), *alpha)?;
            (
                ReportBody::Sweep(SweepTable::from_estimate(&g, *link, d.n())),
                None,
            )
        }
        Task::Sweep { data, link, grid } => {
            let d = load(data)?;
            let result = sweep_alpha(&d, &spec_for(*link, &d), grid)?;
            (
                ReportBody::Sweep(SweepTable::from_sweep(&result, *link, d.n())),
                None,
            )
        }
        Task::Simulate {
            targets,
            n,
            m,
            master_seed,
            grid,
        } => {
            let dgp = calibrate(targets)?;
            let options = MonteCarloOptions {
                threads,
                ..Default::default()
            };
            let mc = run_monte_carlo_with(
                &dgp,
                &SmmSpec::new(dgp.link()),
                *n,
                *m,
                grid,
                *master_seed,
                &options,
            )?;
            (ReportBody::Simulation(mc), Some(*master_seed))
        }
        Task::Calibrate { targets } => (ReportBody::Calibration(calibrate(targets)?), None),
        Task::Relevance { data } => (ReportBody::Relevance(relevance_check(&load(data)?)?), None),
    };
    Ok(Report {
        command: config.command,
        body,
        seed,
        config: config.echo.clone(),
    })
}
