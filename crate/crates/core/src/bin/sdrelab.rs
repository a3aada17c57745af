use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sdrelab::harness::{preset, run_experiment, verify, PRESETS};

#[derive(Parser)]
#[command(name = "sdrelab", about = "SDRE and SPRT experiments on Gaussian sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a named preset and write CSVs plus summary.json.
    Run {
        #[arg(long)]
        preset: String,
        /// Comma-separated seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dotted config override, e.g. `gaussian.offset=1.0`.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Oracle sanity run plus the invariant suite.
    Verify {
        /// Keep the oracle-sanity artifacts here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match cli.command {
        Command::Run {
            preset: name,
            seeds,
            out,
            overrides,
        } => {
            if !PRESETS.contains(&name.as_str()) {
                return Err(format!("unknown preset {name}; choose one of {}", PRESETS.join(", ")).into());
            }
            let mut config = preset(&name)?.with_overrides(&overrides)?;
            if let Some(seeds) = seeds {
                config.seeds = seeds;
            }
            if let Some(out) = out {
                config.out_dir = out;
            }
            config.validate()?;
            let report = run_experiment(&config)?;
            for w in &report.summary.warnings {
                eprintln!("warning: {w}");
            }
            for e in &report.summary.entries {
                println!(
                    "{:<14} {:<22} final-t MAE {:>10.4} ± {:<8.4} zero-predictor {:>10.4}",
                    e.variant, e.model, e.mae_final_t.mean, e.mae_final_t.sem, e.zero_predictor_mae_final_t.mean
                );
            }
            println!("wrote {}", report.out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { out } => {
            let checks = verify(out.as_deref())?;
            let mut ok = true;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}
