use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use heron_sfl_cli::{arm_dir, run_experiment, spectrum_experiment, CliError, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "heron-sfl", version, about = "Split federated learning experiments")]
struct Cli {
    /// Overrides the master seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every arm and write metrics, ledgers and spectra.
    Run { config: PathBuf },
    /// List configuration problems without running.
    Validate { config: PathBuf },
    /// Spectrum of the local-loss Hessian at the initial model.
    Spectrum { config: PathBuf },
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config } => load(config, cli.seed).and_then(|cfg| {
            for out in run_experiment(&cfg)? {
                let acc = out.final_accuracy().map_or("-".to_string(), |a| format!("{a:.4}"));
                println!(
                    "{:<10} final_acc={acc} reconciled={} -> {}",
                    out.algorithm.tag(),
                    out.ledger.reconciled,
                    arm_dir(&cfg, out.algorithm).display()
                );
            }
            Ok(ExitCode::SUCCESS)
        }),
        Command::Validate { config } => load(config, cli.seed).map(|cfg| {
            let v = cfg.violations();
            if v.is_empty() {
                println!("ok");
                ExitCode::SUCCESS
            } else {
                for line in &v {
                    println!("{line}");
                }
                ExitCode::from(1)
            }
        }),
        Command::Spectrum { config } => load(config, cli.seed).and_then(|cfg| {
            let r = spectrum_experiment(&cfg)?;
            println!("trace={:.6e} top={:.6e} kappa={:.4}", r.trace, r.top, r.kappa);
            println!("{}", cfg.output_dir.join("spectrum.txt").display());
            Ok(ExitCode::SUCCESS)
        }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
