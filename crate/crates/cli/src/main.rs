use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use racksim::config::parse_config_str;
use racksim::experiment::{compare, read_csv, run_experiment};

#[derive(Parser)]
#[command(name = "racksim", version, about = "Rack-scale scheduling simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every sweep point of a configuration.
    Run {
        config: PathBuf,
        /// Output directory; defaults to the config's `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of sweep points run concurrently.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Print p99 ratios between two result files over the same grid.
    Compare { a: PathBuf, b: PathBuf },
    /// Parse and validate a configuration without running it.
    Validate { config: PathBuf },
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load(path: &PathBuf) -> anyhow::Result<(racksim::config::ExperimentConfig, String)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = parse_config_str(&text).with_context(|| format!("in {}", path.display()))?;
    Ok((cfg, text))
}

fn real_main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run { config, out, parallel } => {
            let (cfg, text) = load(&config)?;
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
            let res = run_experiment(&cfg, &text, &out, parallel)?;
            println!("{} rows written to {}", res.rows.len(), res.csv_path.display());
            println!("manifest: {}", res.manifest_path.display());
        }
        Command::Compare { a, b } => {
            let rows = compare(&read_csv(&a)?, &read_csv(&b)?)?;
            println!("{:>8} {:>6} {:>12} {:>12} {:>8}", "load", "class", "p99_a_us", "p99_b_us", "ratio");
            for r in rows {
                println!(
                    "{:>8.3} {:>6} {:>12.2} {:>12.2} {:>8.3}",
                    r.load_fraction, r.class_tag, r.p99_a, r.p99_b, r.ratio
                );
            }
        }
        Command::Validate { config } => {
            let (cfg, _) = load(&config)?;
            println!(
                "ok: {} servers, {} load points x {} seeds",
                cfg.servers.count,
                cfg.sweep.load_fractions.len(),
                cfg.sweep.seeds.len()
            );
        }
    }
    Ok(())
}
