use std::path::PathBuf;
use std::process::ExitCode;

use chstep_core::experiments::{
    run_accuracy, run_adaptive, run_certify, run_coarsen, run_compare, ExperimentConfig, ExperimentKind,
};
use clap::{Args, Parser, Subcommand};

/// Variable-step BDF2 simulations of the periodic Cahn–Hilliard equation.
#[derive(Parser, Debug)]
#[command(name = "chstep", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convergence table for the manufactured solution.
    Accuracy(Common),
    /// BDF2 / CN / CNCS comparison from random initial data.
    Compare(Common),
    /// Adaptive step-size study over several β.
    Adaptive(Common),
    /// Long coarsening run with snapshots and the energy scaling fit.
    Coarsen(Common),
    /// Kernel certification on random step-ratio meshes.
    Certify(Common),
    /// Print the default configuration of an experiment as TOML.
    Defaults {
        #[arg(value_parser = parse_kind)]
        experiment: ExperimentKind,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration; omitted keys take the experiment defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Grid points per direction.
    #[arg(long)]
    grid: Option<usize>,
    /// Cap BDF2 steps by the energy-stability bound.
    #[arg(long)]
    energy_safe: bool,
}

fn parse_kind(s: &str) -> Result<ExperimentKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        format!("unknown experiment '{s}' (expected accuracy, compare, adaptive, coarsen or certify)")
    })
}

fn load(kind: ExperimentKind, args: &Common) -> chstep_core::Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path, Some(kind))?,
        None => ExperimentConfig::defaults(kind),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(m) = args.grid {
        cfg.model.grid_size = m;
    }
    cfg.energy_safe |= args.energy_safe;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> chstep_core::Result<bool> {
    let (kind, args) = match &cli.command {
        Command::Accuracy(a) => (ExperimentKind::Accuracy, a),
        Command::Compare(a) => (ExperimentKind::Compare, a),
        Command::Adaptive(a) => (ExperimentKind::Adaptive, a),
        Command::Coarsen(a) => (ExperimentKind::Coarsen, a),
        Command::Certify(a) => (ExperimentKind::Certify, a),
        Command::Defaults { experiment } => {
            print!("{}", ExperimentConfig::defaults(*experiment).to_toml()?);
            return Ok(true);
        }
    };
    let cfg = load(kind, args)?;
    let (summary, ok) = match kind {
        ExperimentKind::Accuracy => (serde_json::to_value(run_accuracy(&cfg)?)?, true),
        ExperimentKind::Compare => (serde_json::to_value(run_compare(&cfg)?)?, true),
        ExperimentKind::Adaptive => (serde_json::to_value(run_adaptive(&cfg)?)?, true),
        ExperimentKind::Coarsen => (serde_json::to_value(run_coarsen(&cfg)?)?, true),
        ExperimentKind::Certify => {
            let report = run_certify(&cfg)?;
            let ok = report.all_pass;
            (serde_json::to_value(report)?, ok)
        }
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    eprintln!("results written to {}", cfg.output_dir.display());
    Ok(ok)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("certification failed for at least one mesh");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
