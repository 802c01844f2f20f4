//! `hbb`: fit, correct, decompose, simulate and diagnose survey-weighted
//! hurdle beta-binomial models.

mod commands;
mod data;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Error with an explicit exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Failure {
    /// Process exit code.
    pub code: u8,
    /// Message.
    pub msg: String,
}

impl Failure {
    /// Input layout problem (exit 2).
    pub fn schema(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }

    /// Numerical failure (exit 3).
    pub fn numeric(msg: impl Into<String>) -> Self {
        Self { code: 3, msg: msg.into() }
    }

    /// Survey design violation (exit 4).
    pub fn design(msg: impl Into<String>) -> Self {
        Self { code: 4, msg: msg.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Failure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(f) = err.downcast_ref::<Failure>() {
        return f.code;
    }
    match err.downcast_ref::<hbb::Error>() {
        Some(hbb::Error::Numeric(_) | hbb::Error::NotConverged { .. } | hbb::Error::Sampling(_)) => 3,
        Some(hbb::Error::Design(_)) => 4,
        _ => 2,
    }
}

#[derive(Debug, Parser)]
#[command(name = "hbb", version, about = "Survey-weighted hurdle beta-binomial models")]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Accept inputs whose hashes differ from upstream manifests.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

/// Estimation engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EngineArg {
    /// Posterior mode with Laplace draws.
    Map,
    /// Hamiltonian Monte Carlo.
    Mcmc,
}

/// Model variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    /// Fixed effects.
    M0,
    /// Random intercepts.
    M1,
    /// Correlated random intercepts.
    M2,
    /// State-varying poverty slopes.
    M3a,
    /// State-varying slopes with policy moderators.
    M3b,
}

impl From<VariantArg> for hbb::model::Variant {
    fn from(v: VariantArg) -> Self {
        use hbb::model::Variant::*;
        match v {
            VariantArg::M0 => M0,
            VariantArg::M1 => M1,
            VariantArg::M2 => M2,
            VariantArg::M3a => M3a,
            VariantArg::M3b => M3b,
        }
    }
}

impl From<EngineArg> for hbb::infer::Engine {
    fn from(e: EngineArg) -> Self {
        match e {
            EngineArg::Map => hbb::infer::Engine::Map,
            EngineArg::Mcmc => hbb::infer::Engine::Mcmc,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model to a provider table.
    Fit(FitArgs),
    /// Sandwich variance, DER table and calibrated draws for a fit.
    Sandwich(SandwichArgs),
    /// Average marginal effects and reversal probabilities.
    Decompose(DecomposeArgs),
    /// Run a Monte Carlo coverage campaign.
    Simulate(SimulateArgs),
    /// Weight and informativeness diagnostics.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Input CSV.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Model variant.
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Estimation engine.
    #[arg(long, value_enum)]
    engine: Option<EngineArg>,
    /// Ignore design columns and weights.
    #[arg(long)]
    no_design: bool,
}

#[derive(Debug, Args)]
struct SandwichArgs {
    /// Directory written by `fit`.
    #[arg(long)]
    fit: PathBuf,
    /// Input CSV used for the fit.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DecomposeArgs {
    /// Directory written by `fit`.
    #[arg(long)]
    fit: PathBuf,
    /// Directory written by `sandwich`; its calibrated draws are used when given.
    #[arg(long)]
    calibrated: Option<PathBuf>,
    /// Input CSV used for the fit.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Scenario preset (S0, S3, S4, B5); ignored when the config holds a scenario.
    #[arg(long, default_value = "S0")]
    scenario: String,
    /// Desk-scale sizes (default).
    #[arg(long, conflicts_with = "full")]
    desk: bool,
    /// Full-scale sizes.
    #[arg(long)]
    full: bool,
    /// Override the replication count.
    #[arg(long)]
    replications: Option<usize>,
    /// Estimation engine.
    #[arg(long, value_enum)]
    engine: Option<EngineArg>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    /// Input CSV.
    #[arg(long)]
    data: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = commands::Global { config: cli.config, seed: cli.seed, force: cli.force };
    match cli.command {
        Command::Fit(a) => commands::fit(&g, &a.data, &a.out, a.variant.map(Into::into), a.engine.map(Into::into), a.no_design),
        Command::Sandwich(a) => commands::sandwich(&g, &a.fit, &a.data, &a.out),
        Command::Decompose(a) => commands::decompose(&g, &a.fit, a.calibrated.as_deref(), &a.data, &a.out),
        Command::Simulate(a) => {
            let scale = if a.full { hbb::simlab::Scale::Full } else { hbb::simlab::Scale::Desk };
            commands::simulate(&g, &a.scenario, scale, a.replications, a.engine.map(Into::into), &a.out)
        }
        Command::Diagnose(a) => commands::diagnose(&g, &a.data, &a.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
