use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use probcert::dual::Certificate;
use probcert::model::load_model_file;
use probcert::oracle::{grid_max_violation, GridMaximum, OracleMethod, DEFAULT_TOLERANCE};
use probcert::spec::load_spec_file;
use probcert::sweep::{certify, run_sweep, to_csv, write_atomic, Property, SweepConfig};
use probcert::{build, Error, OptimizerConfig, Result};

/// Tolerance used when comparing a certificate with the quadrature oracle.
const DOMINANCE_SLACK: f64 = 1e-6;

#[derive(Parser)]
#[command(name = "probcert", version, about = "Probabilistic certificates for decoder networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize a certificate for one specification.
    Verify(VerifyArgs),
    /// Certified output thresholds over sliding input windows, as CSV.
    Sweep(SweepArgs),
    /// Compare a certificate against sampling and quadrature oracles.
    Check(CheckArgs),
}

#[derive(Args)]
struct OptimizerArgs {
    /// JSON file with optimizer settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl OptimizerArgs {
    fn resolve(&self) -> Result<OptimizerConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Parse {
                    what: "optimizer config",
                    message: e.to_string(),
                })?
            }
            None => OptimizerConfig::default(),
        };
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(lr) = self.lr {
            cfg.step_size = lr;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    spec: PathBuf,
    #[command(flatten)]
    optimizer: OptimizerArgs,
    /// Certificate JSON destination (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PropertyArg {
    Upper,
    Lower,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    property: PropertyArg,
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    delta_start: f64,
    #[arg(long, default_value_t = 0.98, allow_hyphen_values = true)]
    delta_end: f64,
    #[arg(long, default_value_t = 0.02)]
    delta_step: f64,
    #[arg(long, default_value_t = 0.02)]
    width: f64,
    /// Threshold search interval `LO,HI`; defaults to the propagated output range.
    #[arg(long, value_delimiter = ',', num_args = 2, allow_hyphen_values = true)]
    bracket: Option<Vec<f64>>,
    #[arg(long, default_value_t = 30)]
    search_iters: usize,
    /// Solve windows independently (and in parallel).
    #[arg(long)]
    no_warm_start: bool,
    #[command(flatten)]
    optimizer: OptimizerArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    spec: PathBuf,
    /// Monte-Carlo samples per grid point.
    #[arg(long, default_value_t = 100_000)]
    samples: u64,
    /// Grid points per input dimension.
    #[arg(long, default_value_t = 20)]
    grid: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Check this certificate file instead of optimizing a new one.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Optimizer settings file, as for `verify`.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

impl CheckArgs {
    fn optimizer(&self) -> OptimizerArgs {
        OptimizerArgs {
            config: self.config.clone(),
            steps: self.steps,
            lr: self.lr,
            seed: None,
        }
    }
}

#[derive(Serialize)]
struct CheckReport {
    verdict: &'static str,
    certificate: Certificate,
    replayed: bool,
    monte_carlo: GridMaximum,
    quadrature: Option<GridMaximum>,
    samples: u64,
    grid: usize,
    seed: u64,
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes()),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_verify(args: &VerifyArgs) -> Result<ExitCode> {
    let model = load_model_file(&args.model)?;
    let spec = load_spec_file(&args.spec)?;
    let cfg = args.optimizer.resolve()?;
    let problem = build(&model, &spec)?;
    let (cert, _) = certify(&problem, &cfg, None)?;
    emit(args.out.as_deref(), &cert.to_json())?;
    if cert.verifies(problem.epsilon) {
        eprintln!("verified: bound {} <= epsilon {}", cert.bound, problem.epsilon);
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "not certified: bound {} > epsilon {} (this does not show the property fails)",
            cert.bound, problem.epsilon
        );
        Ok(ExitCode::from(2))
    }
}

fn cmd_sweep(args: &SweepArgs) -> Result<ExitCode> {
    let model = load_model_file(&args.model)?;
    let bracket = args.bracket.as_ref().map(|b| [b[0], b[1]]);
    let config = SweepConfig {
        delta_start: args.delta_start,
        delta_end: args.delta_end,
        delta_step: args.delta_step,
        width: args.width,
        epsilon: args.epsilon,
        bracket,
        search_iters: args.search_iters,
        warm_start: !args.no_warm_start,
        optimizer: args.optimizer.resolve()?,
    };
    let property = match args.property {
        PropertyArg::Upper => Property::Upper,
        PropertyArg::Lower => Property::Lower,
    };
    let rows = run_sweep(&model, property, &config)?;
    write_atomic(&args.out, to_csv(&rows).as_bytes())?;
    let flagged = rows.iter().filter(|r| r.flag != probcert::sweep::RowFlag::Ok).count();
    eprintln!("{} rows written to {} ({flagged} flagged)", rows.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_check(args: &CheckArgs) -> Result<ExitCode> {
    let model = load_model_file(&args.model)?;
    let spec = load_spec_file(&args.spec)?;
    let problem = build(&model, &spec)?;
    let (certificate, replayed) = match &args.replay {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let cert: Certificate = serde_json::from_str(&text).map_err(|e| Error::Parse {
                what: "certificate",
                message: e.to_string(),
            })?;
            if cert.model_digest != problem.model_digest || cert.spec_digest != problem.spec_digest {
                return Err(Error::InvalidSpec(
                    "certificate digests do not match the given model and spec".into(),
                ));
            }
            (cert, true)
        }
        None => (certify(&problem, &args.optimizer().resolve()?, None)?.0, false),
    };
    let monte_carlo = grid_max_violation(
        &problem,
        args.grid,
        OracleMethod::Mc {
            samples: args.samples,
            seed: args.seed,
        },
    )?;
    let quadrature = if problem.z_dim() == 1 {
        Some(grid_max_violation(
            &problem,
            args.grid,
            OracleMethod::Quadrature {
                tolerance: DEFAULT_TOLERANCE,
            },
        )?)
    } else {
        None
    };
    let dominates = certificate.bound >= monte_carlo.max_lower95
        && quadrature
            .as_ref()
            .is_none_or(|q| certificate.bound >= q.max_value - DOMINANCE_SLACK);
    let report = CheckReport {
        verdict: if dominates { "PASS" } else { "FAIL" },
        certificate,
        replayed,
        monte_carlo,
        quadrature,
        samples: args.samples,
        grid: args.grid,
        seed: args.seed,
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    write_atomic(&args.out, text.as_bytes())?;
    eprintln!("{}", report.verdict);
    Ok(if dominates { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Verify(a) => cmd_verify(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Check(a) => cmd_check(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
