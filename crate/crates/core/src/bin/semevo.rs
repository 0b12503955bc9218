use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use semevo_core::error::{Error, Result};
use semevo_core::harness::{self, dump, results, RunConfig};

#[derive(Parser)]
#[command(name = "semevo", version, about = "Test-time prototype drift compensation for class-incremental learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario for every configured seed.
    Run {
        config: PathBuf,
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the solver.
        #[arg(long)]
        solver: Option<String>,
    },
    /// Run a grid over one config key.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        key: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the online solver with a projector fitted offline on the whole stream.
    GdOracle {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the scenario of a config as one feature dump per stage.
    Gen {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Validate a feature dump and print a summary.
    IngestCheck { path: PathBuf },
    /// Aggregate results of several runs across seeds.
    Report {
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn output_dir(config: &RunConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| config.output_dir.clone())
}

fn finish(dir: &Path, records: &[harness::MetricsRecord]) -> Result<()> {
    let files = harness::emit_results(dir, records)?;
    for m in records {
        println!(
            "{:<14} seed {:<4} {}{}last accuracy {:.4}",
            m.solver,
            m.seed,
            m.sweep_key,
            if m.sweep_key.is_empty() {
                String::new()
            } else {
                format!("={} ", m.sweep_value)
            },
            m.last_accuracy
        );
    }
    println!("results written to {}", files.results.display());
    Ok(())
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { config, out, solver } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = solver {
                cfg = cfg.with_override("solver", &format!("\"{s}\""))?;
            }
            let records = harness::run_seeds(&cfg)?;
            finish(&output_dir(&cfg, out), &records)
        }
        Command::Sweep { config, key, values, out } => {
            let cfg = RunConfig::load(&config)?;
            if values.is_empty() {
                return Err(Error::Config("sweep needs at least one value".into()));
            }
            let records = harness::run_sweep(&cfg, &key, &values)?;
            finish(&output_dir(&cfg, out), &records)
        }
        Command::GdOracle { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let records = harness::run_oracle_comparison(&cfg)?;
            for pair in records.chunks(2) {
                println!(
                    "seed {}: oracle minus {} = {:+.4}",
                    pair[0].seed,
                    pair[0].solver,
                    pair[1].last_accuracy - pair[0].last_accuracy
                );
            }
            finish(&output_dir(&cfg, out), &records)
        }
        Command::Gen { config, out, seed } => {
            let cfg = RunConfig::load(&config)?;
            let scenario = harness::build_scenario(&cfg, seed)?;
            for path in dump::write_scenario(&out, &scenario)? {
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::IngestCheck { path } => {
            let (_, summary) = dump::read_stage(&path)?;
            println!(
                "{}: version {}, dimension {}, {} records ({} train, {} test)",
                path.display(),
                summary.header.version,
                summary.header.dim,
                summary.header.count,
                summary.train,
                summary.test
            );
            for (task, classes) in &summary.classes_per_task {
                println!("  task {task}: {} classes", classes.len());
            }
            Ok(())
        }
        Command::Report { inputs, out } => {
            let rows = results::report(&inputs, &out)?;
            for r in &rows {
                println!(
                    "{:<14} {}{} runs {:<3} last accuracy {:.4} ± {:.4}",
                    r.solver,
                    r.sweep_key,
                    if r.sweep_key.is_empty() {
                        String::new()
                    } else {
                        format!("={} ", r.sweep_value)
                    },
                    r.runs,
                    r.last_accuracy_mean,
                    r.last_accuracy_std
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = match &e {
                Error::Dump(d) => format!(" [dump error {}]", d.code()),
                _ => String::new(),
            };
            eprintln!("error ({:?}){code}: {e}", e.category());
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}
