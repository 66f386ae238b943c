use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use curvfed::runner::{self, ExperimentConfig};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "curvfed", version, about = "Curvature-aligned federated learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config file and print every problem found.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run all seeds of a config and write metrics, manifest and summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run this single seed instead of the configured list.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Compare finished runs in one table.
    Report {
        /// Run directories, each holding a summary.json.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Run FATE is measured against; defaults to the first run.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the configured dataset in the columnar text format.
    ExportData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig, ExitCode> {
    runner::parse_config(path).map_err(|e| {
        eprintln!("{e}");
        ExitCode::from(EXIT_VALIDATION)
    })
}

fn runtime(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(EXIT_RUNTIME)
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => code,
    }
}

fn execute(cmd: Command) -> Result<(), ExitCode> {
    match cmd {
        Command::Validate { config } => {
            let cfg = load(&config)?;
            println!(
                "ok: method {} with {} seed(s), {} client(s)",
                cfg.method.method.name(),
                cfg.seeds.len(),
                cfg.partition.client_compositions.len()
            );
        }
        Command::Run { config, out, seed_override } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed_override {
                cfg.seeds = vec![s];
            }
            let Some(dir) = out.or_else(|| cfg.output_dir.clone()) else {
                eprintln!("no output directory: pass --out or set output_dir");
                return Err(ExitCode::from(EXIT_VALIDATION));
            };
            let summary = runner::run(&cfg, &dir).map_err(runtime)?;
            for r in &summary.seeds {
                if let Some(e) = &r.error {
                    eprintln!("seed {} failed: {e}", r.seed);
                }
            }
            if summary.failed_seeds().len() == summary.seeds.len() {
                return Err(runtime("every seed failed"));
            }
            print!("{}", std::fs::read_to_string(dir.join(runner::SUMMARY_TABLE_FILE)).map_err(runtime)?);
        }
        Command::Report { runs, baseline, out } => {
            runner::report(&runs, baseline.as_deref(), &out).map_err(runtime)?;
            print!("{}", std::fs::read_to_string(out.join("report.tsv")).map_err(runtime)?);
        }
        Command::ExportData { config, out } => {
            let cfg = load(&config)?;
            let data = runner::load_dataset(&cfg.data).map_err(runtime)?;
            let file = std::fs::File::create(&out).map_err(runtime)?;
            data.write_csv(std::io::BufWriter::new(file)).map_err(runtime)?;
        }
    }
    Ok(())
}
