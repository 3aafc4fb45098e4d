use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use otafl::power_control::design_jammer;
use otafl::runner::{parse_ledger_csv, replay_ledger, run_experiment, ExperimentConfig};
use otafl::{Error, Result};

#[derive(Parser)]
#[command(name = "otafl", version, about = "Private over-the-air federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// `section.key=value`, may be repeated.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Minimal cooperative-jammer factor for an (ε, δ) target.
    #[command(allow_negative_numbers = true)]
    DesignJammer {
        #[arg(long)]
        eps: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long)]
        rounds: usize,
        #[arg(long)]
        data_size: usize,
        #[arg(long)]
        alpha_u: f64,
        #[arg(long)]
        h_cj: f64,
        #[arg(long)]
        sigma_c: f64,
    },
    /// Recompute ε from a `ledger_<seed>.csv` written by `run`.
    Accountant {
        #[arg(long)]
        replay: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, overrides } => {
            let cfg = ExperimentConfig::load(&config, &overrides)?;
            let summary = run_experiment(&cfg)?;
            for s in &summary.seeds {
                println!(
                    "seed {}: test_acc {:.4}  train_loss {:.4}  eps_bound {}",
                    s.seed,
                    s.final_test_acc,
                    s.final_train_loss,
                    s.eps_bound.map_or("inf".to_string(), |e| format!("{e:.6}"))
                );
                for w in &s.warnings {
                    eprintln!("warning (seed {}): {w}", s.seed);
                }
            }
            match summary.test_acc_std {
                Some(sd) => println!("test_acc mean {:.4} (sd {sd:.4})", summary.test_acc_mean),
                None => println!("test_acc {:.4}", summary.test_acc_mean),
            }
            println!("wrote {}", summary.output_dir.display());
        }
        Command::DesignJammer { eps, delta, rounds, data_size, alpha_u, h_cj, sigma_c } => {
            let a = design_jammer(eps, delta, rounds, data_size, alpha_u, h_cj, sigma_c)
                .map_err(|e| match e {
                    Error::InvalidInput(m) => Error::InvalidConfig(m),
                    other => other,
                })?;
            println!("{a:.12e}");
        }
        Command::Accountant { replay } => {
            let text = std::fs::read_to_string(&replay)
                .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", replay.display())))?;
            let trace = parse_ledger_csv(&text)?;
            println!("iter,eps_bound,eps_max_client");
            for p in replay_ledger(&trace)? {
                println!("{},{:.12e},{:.12e}", p.iteration, p.eps_bound, p.eps_max_client);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
