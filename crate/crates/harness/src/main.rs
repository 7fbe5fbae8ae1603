use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use dde_lab::commands::{self, run_dir, write_compare, write_reports, AnyError};
use dde_lab::config::Config;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    GenData,
    Evaluate,
    Train,
    VerifyTheory,
    Compare,
}

/// Distorted distributional evaluation experiments.
#[derive(Debug, Parser)]
#[command(name = "dde-lab", version)]
struct Cli {
    command: Command,
    /// Config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override a config entry, e.g. `--set beta=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for `compare`.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

fn run(cli: &Cli) -> Result<bool, AnyError> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.apply_overrides(&cli.overrides)?;
    let dir = run_dir(&cli.out, &cfg, cli.seed);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let ok = match cli.command {
        Command::GenData => {
            let path = commands::gen_data(&cfg, cli.seed, &dir)?;
            println!("{}", path.display());
            true
        }
        Command::Train => {
            commands::train(&cfg, cli.seed, &dir)?;
            println!("{}", dir.display());
            true
        }
        Command::Evaluate => {
            let reports = commands::evaluate(&cfg, cli.seed, &dir)?;
            print_reports(&reports);
            reports.iter().all(|r| r.passed)
        }
        Command::VerifyTheory => {
            let reports = commands::verify_theory(&cfg, cli.seed)?;
            write_reports(&dir.join("reports.csv"), &reports)?;
            print_reports(&reports);
            reports.iter().all(|r| r.passed)
        }
        Command::Compare => {
            let s = commands::compare(&cfg, cli.seed, cli.jobs)?;
            write_compare(&dir, &s)?;
            println!(
                "seeds={} distorted>=uniform in {} (strict {}), mean {:.4} vs {:.4}, cvar10 {:.4} vs {:.4}, sign test p={:.4}",
                s.per_seed.len(),
                s.wins_or_ties,
                s.strict_wins,
                s.mean_of_means_distorted,
                s.mean_of_means_uniform,
                s.mean_of_cvar_distorted,
                s.mean_of_cvar_uniform,
                s.sign_test_p
            );
            true
        }
    };
    Ok(ok)
}

fn print_reports(reports: &[dde_core::theory::TheoremReport]) {
    println!("{}", dde_core::theory::TheoremReport::CSV_HEADER);
    for r in reports {
        println!("{}", r.csv_row());
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
