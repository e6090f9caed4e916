use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use monoflow_cli::commands::{self, EXIT_CONFIG};
use monoflow_cli::config::{flows_flag, list_flag, vector_flag};
use monoflow_cli::{CliError, RunConfig};

/// Anytime-feasible flows for monotone variational inequalities.
///
/// Exit codes: 0 converged or passed, 1 configuration error, 2 not
/// converged, 3 domain error, 4 certificate failure.
#[derive(Parser)]
#[command(name = "monoflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one flow from one start; writes a trajectory CSV and a
    /// certificate JSON.
    Solve(Shared),
    /// Run several flows and starts on a shared grid and compare them.
    Compare(Shared),
    /// Receding-horizon dynamic game for a grid of termination times.
    Lqdg(Shared),
    /// Lyapunov, Dini and contraction certificates for a problem.
    Certify(Shared),
}

#[derive(Args)]
struct Shared {
    /// JSON run configuration; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in problem name or path to a problem file.
    #[arg(long)]
    problem: Option<String>,
    /// pmf, smf or rsmf; repeat or comma-separate for `compare`.
    #[arg(long)]
    flow: Vec<String>,
    #[arg(long, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    beta: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    /// Step size.
    #[arg(long, allow_negative_numbers = true)]
    h: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    tfinal: Option<f64>,
    #[arg(long)]
    tol_converge: Option<f64>,
    /// Initial condition such as `1,-0.5`; repeat for several starts.
    #[arg(long, allow_hyphen_values = true)]
    x0: Vec<String>,
    /// Initial inequality multipliers of the recursive flow.
    #[arg(long, allow_hyphen_values = true)]
    u0: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Termination times of `lqdg`, e.g. `0.1,0.5,2,inf`.
    #[arg(long)]
    tf: Vec<String>,
    /// Prediction horizon of `lqdg`.
    #[arg(long)]
    horizon: Option<usize>,
    /// Outer steps of `lqdg`.
    #[arg(long)]
    steps: Option<usize>,
    /// Skip trajectory CSV output.
    #[arg(long)]
    no_trajectory: bool,
    /// Skip certificate JSON output.
    #[arg(long)]
    no_certificate: bool,
}

impl Shared {
    fn resolve(self) -> Result<RunConfig, CliError> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let bad = |field: &'static str, message: String| {
            CliError::Config(monoflow_cli::ConfigError::Field { field, message })
        };
        let x0 = self
            .x0
            .iter()
            .map(|s| vector_flag(s).map_err(|e| bad("x0", e)))
            .collect::<Result<Vec<_>, _>>()?;
        let u0 = self.u0.as_deref().map(vector_flag).transpose().map_err(|e| bad("u0", e))?;
        let flags = RunConfig {
            problem: self.problem,
            flow: flows_flag(&self.flow)?,
            alpha: self.alpha,
            beta: self.beta,
            tau: self.tau,
            h: self.h,
            t_final: self.tfinal,
            tol_converge: self.tol_converge,
            x0,
            u0,
            seed: self.seed,
            out: self.out,
            tf: list_flag(&self.tf),
            horizon: self.horizon,
            steps: self.steps,
            write_trajectory: self.no_trajectory.then_some(false),
            write_certificate: self.no_certificate.then_some(false),
        };
        Ok(base.merged(flags))
    }
}

fn run(cli: Cli) -> Result<commands::Report, CliError> {
    match cli.command {
        Command::Solve(s) => commands::solve(&s.resolve()?),
        Command::Compare(s) => commands::compare(&s.resolve()?),
        Command::Lqdg(s) => commands::lqdg(&s.resolve()?),
        Command::Certify(s) => commands::certify(&s.resolve()?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_CONFIG),
            };
        }
    };
    match run(cli) {
        Ok(report) => {
            print!("{}", report.summary);
            for f in &report.files {
                println!("wrote {}", f.display());
            }
            ExitCode::from(report.code)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
