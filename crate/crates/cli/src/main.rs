use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vpinn::harness::{self, ExperimentConfig};
use vpinn::testspace::ChMode;
use vpinn::Error;

/// VPINN training and a posteriori error estimation experiments.
#[derive(Parser)]
#[command(name = "vpinn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed, overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// How C_h is obtained: measured or asymptotic.
    #[arg(long = "ch-mode")]
    ch_mode: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on every mesh of the family and fit convergence slopes.
    Convergence(Common),
    /// Train once and log estimator terms at every checkpoint.
    Trace(Common),
    /// Recompute the estimator breakdown from a saved checkpoint.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Mesh subdivisions per side.
        #[arg(long)]
        mesh: usize,
        /// Checkpoint written by `convergence` or `trace`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the built-in property checks.
    Selftest,
}

enum Failure {
    Config(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse(_) => Failure::Config(e.to_string()),
            _ => Failure::Numeric(e.to_string()),
        }
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = &common.ch_mode {
        cfg.ch_mode = mode.parse::<ChMode>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Convergence(common) => {
            let cfg = load(&common)?;
            println!("{}", harness::CONVERGENCE_HEADER);
            let mut print = |r: &harness::ConvergenceRow| {
                let eff = r.efficiency.map(|e| format!("{e:.4}")).unwrap_or_default();
                println!(
                    "{},{:.4e},{},{:.4e},{:.4e},{:.4e},{:.4e},{:.4e},{:.4e},{:.4e},{:.4e},{eff}",
                    r.n, r.h, r.dofs, r.r_h, r.eta, r.eta_res, r.eta_loss, r.eta_coef, r.eta_rhs, r.eta_elementwise, r.h1_error
                )
            };
            let report = harness::run_convergence_with(&cfg, &harness::FieldSource::Trained, &mut print)?;
            match report.slopes {
                Ok(s) => println!(
                    "slopes (tail): error {:.3}, eta {:.3}, elementwise eta {:.3}",
                    s.error, s.eta, s.eta_elementwise
                ),
                Err(e) => println!("slope fit rejected: {e}"),
            }
            for f in report.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Trace(common) => {
            let cfg = load(&common)?;
            let trace = harness::run_trace(&cfg)?;
            print!("{}", trace.to_csv_string());
            println!("wrote {}", cfg.out_dir.join("trace.csv").display());
        }
        Command::Estimate { common, mesh, checkpoint } => {
            let cfg = load(&common)?;
            let (b, error) = harness::run_estimate(&cfg, mesh, &checkpoint)?;
            println!(
                "eta {:.6e} (res {:.6e}, loss {:.6e}, coef {:.6e}, rhs {:.6e}); elementwise {:.6e}",
                b.eta(),
                b.eta_res,
                b.eta_loss,
                b.eta_coef,
                b.eta_rhs,
                b.eta_elementwise()
            );
            if let Some(e) = error {
                println!("|u - u_NN|_1 {e:.6e}, efficiency {:.4}", b.eta() / e);
            }
        }
        Command::Selftest => {
            let report = harness::selftest();
            for (name, result) in &report.checks {
                match result {
                    Ok(()) => println!("ok    {name}"),
                    Err(msg) => println!("FAIL  {name}: {msg}"),
                }
            }
            if !report.passed() {
                return Err(Failure::Numeric("self-test failed".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(2)
        }
    }
}
