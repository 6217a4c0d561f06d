use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use grokking_cli::analyze::{analyze, Analysis};
use grokking_cli::config::{ExperimentConfig, Preset};
use grokking_cli::{report, run};
use grokking_core::models::Task;

/// Grokking vs steady learning experiments.
///
/// Sweep cells run on a worker pool sized by GROKKING_WORKERS (default: one
/// per core).
#[derive(Parser)]
#[command(name = "grokking-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; omitted keys take the task defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Table1)]
    preset: Preset,
    #[arg(long, value_parser = parse_task)]
    task: Option<Task>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Comma-separated weight multipliers.
    #[arg(long, value_delimiter = ',')]
    w0: Vec<f64>,
    /// Any config key, e.g. `train.epochs=200` or `analysis.prune=["parallel","global"]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn parse_task(s: &str) -> Result<Task, String> {
    match s {
        "ising" => Ok(Task::Ising),
        "modadd" => Ok(Task::ModAdd),
        _ => Err(format!("unknown task {s:?}; expected ising or modadd")),
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    format!("[{}]", v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "))
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut overrides = Vec::new();
        if let Some(t) = self.task {
            overrides.push(format!("task=\"{}\"", t.name()));
        }
        if let Some(d) = &self.output_dir {
            overrides.push(format!("output_dir={:?}", d.to_string_lossy()));
        }
        if !self.seeds.is_empty() {
            overrides.push(format!("seeds={}", list(&self.seeds)));
        }
        if !self.w0.is_empty() {
            // TOML floats need a decimal point
            let w: Vec<String> = self.w0.iter().map(|w| format!("{w:?}")).collect();
            overrides.push(format!("w0_grid={}", list(&w)));
        }
        overrides.extend(self.overrides.iter().cloned());
        match &self.config {
            Some(path) => ExperimentConfig::load(path, self.preset, &overrides),
            None => ExperimentConfig::parse("", self.preset, &overrides),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the Ising snapshot dataset.
    GenIsing {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Regenerate even if a matching dataset exists.
        #[arg(long)]
        force: bool,
    },
    /// Train a single (seed, w0) run.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train every (seed, w0) cell, skipping cells already completed.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run analyses on trained run directories.
    Analyze {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Analyses to run; defaults to those enabled in each run's config.
        #[arg(long, value_enum, value_delimiter = ',')]
        only: Vec<Analysis>,
    },
    /// Tabulate all runs under a directory and correlate compressibility.
    Report {
        dir: PathBuf,
        /// Where to write the tables; defaults to `<dir>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenIsing { cfg, force } => {
            let cfg = cfg.load()?;
            let dir = run::gen_ising(&cfg, force)?;
            println!("{}", dir.display());
        }
        Command::Train { cfg } => {
            let (dir, r) = run::train(&cfg.load()?)?;
            println!(
                "{}: {:?}, t_train {} t_test {}, final test acc {:.4} ({:.0}s)",
                dir.display(),
                r.grokking.verdict,
                r.grokking.t_train,
                r.grokking.t_test,
                r.row.final_test_acc,
                r.elapsed_s
            );
        }
        Command::Sweep { cfg } => {
            let cfg = cfg.load()?;
            let (summary, stats) = run::sweep(&cfg)?;
            for a in summary.aggregate() {
                println!(
                    "w0={}: {} runs, {} grokked, {} failed, test acc {:.4} ± {:.4}",
                    a.w0, a.runs, a.grokked, a.failures, a.mean_test_acc, a.std_test_acc
                );
            }
            println!("{} trained, {} resumed, {} failed", stats.trained, stats.resumed, stats.failed);
        }
        Command::Analyze { runs, only } => {
            let only = (!only.is_empty()).then_some(only.as_slice());
            for dir in runs {
                let files = analyze(&dir, only)?;
                println!("{}: {}", dir.display(), files.join(", "));
            }
        }
        Command::Report { dir, out } => {
            let out = out.unwrap_or_else(|| dir.join("report"));
            let (rows, correlates) = report::report(&dir, &out)?;
            println!("{} runs tabulated in {}", rows.len(), out.join(report::RUNS_CSV).display());
            for c in correlates.iter().flatten() {
                println!("r(compressibility, {}) = {:.3}{}", c.property, c.r, if c.flagged { " (flagged)" } else { "" });
            }
        }
        Command::Config { cfg } => print!("{}", cfg.load()?.to_toml()),
    }
    Ok(())
}
