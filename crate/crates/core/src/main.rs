use std::fs::{self, File};
use std::path::PathBuf;
use std::process::ExitCode;

use adlab::population::{generate_population, write_population_csv, PopulationConfig, DEFAULT_DIM};
use adlab::scenarios::{load_config, run_scenario, FilterReason, RunOptions, PRESETS};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "adlab",
    version,
    about = "Ad delivery experiment simulator and balance diagnostics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a built-in preset or a JSON scenario config.
    Run {
        /// Preset name or path to a config file.
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-test exposure logs.
        #[arg(long)]
        logs: bool,
    },
    /// Describe the test filters and their reason codes.
    Filters {
        #[arg(long)]
        explain: bool,
    },
    /// List built-in presets.
    Presets,
    /// Write a synthetic population as CSV.
    Population {
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = DEFAULT_DIM)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> adlab::Result<()> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            out,
            logs,
        } => {
            let mut config = load_config(&scenario, seed)?;
            config.output_dir = Some(out.clone());
            let report = run_scenario(&config, RunOptions { logs })?;
            println!(
                "{}: {} tests simulated, {} kept; outputs in {}",
                report.scenario,
                report.n_tests_simulated,
                report.n_tests_kept,
                out.display()
            );
            for r in &report.rows {
                println!(
                    "  {:<28} {:<11} N={:<4} KS D={:.4} (p={:.3e}) CvM={:.3} (p={:.3e}) p<=.05: {:.1}% |SMD|>.2: {:.2}%",
                    r.subsample, r.goal, r.n_tests, r.ks_d, r.ks_p, r.cvm_omega, r.cvm_p, r.pct_p_below_05, r.pct_smd_all
                );
            }
        }
        Command::Filters { explain } => {
            for r in FilterReason::ALL {
                if explain {
                    println!("{:<30} {}", r.as_str(), r.explain());
                } else {
                    println!("{}", r.as_str());
                }
            }
        }
        Command::Presets => {
            for p in PRESETS {
                println!("{p}");
            }
        }
        Command::Population { n, dim, seed, out } => {
            let users = generate_population(&PopulationConfig::standard(n, dim, seed))?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            write_population_csv(&users, File::create(&out)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
