//! Dataset generation, single runs and sweeps.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use grokking_core::checkpoint::write_checkpoint;
use grokking_core::ising::{self, io as isng, Snapshot};
use grokking_core::models::{Architecture, Dataset, Task};
use grokking_core::modadd;
use grokking_core::trainer::{self, grokking_time, GrokkingReport, SweepRow, SweepSummary, Threshold};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{run_dir_name, ExperimentConfig};
use crate::manifest::{digest, unix_now, RunManifest};

pub const WORKERS_ENV: &str = "GROKKING_WORKERS";
pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_AGGREGATE_CSV: &str = "sweep_aggregate.csv";

/// Worker-pool size from the environment, if set.
pub fn workers() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => bail!("{WORKERS_ENV} must be a positive integer, got {v:?}"),
        },
    }
}

pub struct TaskData {
    pub arch: Architecture,
    pub train: Dataset,
    pub test: Dataset,
    /// Ising test snapshots, for the observable correlations.
    pub test_snapshots: Vec<Snapshot>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DatasetInfo {
    sim: ising::SimConfig,
    train_digest: String,
    test_digest: String,
}

/// Generates the Ising dataset described by `cfg` into its dataset
/// directory. An existing dataset with the same settings is kept unless
/// `force` is set.
pub fn gen_ising(cfg: &ExperimentConfig, force: bool) -> Result<PathBuf> {
    let dir = cfg.ising_dataset_dir();
    let sim = cfg.ising.sim();
    sim.validate()?;
    sim.validate_dataset_grid()?;
    if !force {
        if let Some(info) = read_dataset_info(&dir)? {
            if info.sim == sim {
                return Ok(dir);
            }
        }
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let ds = ising::build_dataset(&sim).context("generating Ising snapshots")?;
    let encode = |snaps: &[Snapshot], name: &str| -> Result<String> {
        let mut buf = Vec::new();
        isng::write_snapshots(&mut buf, sim.size, snaps)?;
        fs::write(dir.join(name), &buf)?;
        Ok(digest(&buf))
    };
    let train_digest = encode(&ds.train, "train.isng")?;
    let test_digest = encode(&ds.test, "test.isng")?;
    let info = DatasetInfo { sim, train_digest, test_digest };
    fs::write(dir.join("dataset.json"), serde_json::to_vec_pretty(&info)?)?;
    Ok(dir)
}

fn read_dataset_info(dir: &Path) -> Result<Option<DatasetInfo>> {
    let path = dir.join("dataset.json");
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_slice(&fs::read(&path)?).with_context(|| format!("parsing {}", path.display()))?))
}

fn read_snapshots(path: &Path) -> Result<Vec<Snapshot>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(isng::read_snapshots(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?.1)
}

/// Loads (generating the Ising dataset if absent) the data of `cfg.task`.
pub fn load_data(cfg: &ExperimentConfig) -> Result<TaskData> {
    match cfg.task {
        Task::ModAdd => {
            let m = &cfg.modadd;
            let split = modadd::split(m.modulus, m.train_fraction, m.split_seed)?;
            Ok(TaskData {
                arch: Architecture::modadd(m.modulus),
                train: Dataset::from_modadd(&split.train)?,
                test: Dataset::from_modadd(&split.test)?,
                test_snapshots: Vec::new(),
            })
        }
        Task::Ising => {
            let dir = cfg.ising_dataset_dir();
            match read_dataset_info(&dir)? {
                Some(info) if info.sim == cfg.ising.sim() => {}
                Some(_) => bail!("dataset in {} was generated with other settings; rerun gen-ising with --force", dir.display()),
                None => {
                    gen_ising(cfg, false)?;
                }
            }
            let train = read_snapshots(&dir.join("train.isng"))?;
            let test = read_snapshots(&dir.join("test.isng"))?;
            Ok(TaskData {
                arch: Architecture::ising(cfg.ising.size)?,
                train: Dataset::from_snapshots(&train)?,
                test: Dataset::from_snapshots(&test)?,
                test_snapshots: test,
            })
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub row: SweepRow,
    pub grokking: GrokkingReport,
    pub chance: f64,
    pub elapsed_s: f64,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoints/epoch-{epoch:07}.gkpt")
}

/// Rows of a cell whose manifest is intact and matches `cell`, if any.
pub fn completed_run(dir: &Path, cell: &ExperimentConfig) -> Option<RunReport> {
    let m = RunManifest::read(dir).ok()?;
    if m.config_hash != digest(cell.to_toml().as_bytes()) || m.entry(REPORT_FILE).is_none() || m.verify(dir).is_err() {
        return None;
    }
    serde_json::from_slice(&fs::read(dir.join(REPORT_FILE)).ok()?).ok()
}

/// Trains one `(seed, w0)` cell into `dir`.
pub fn train_cell(cfg: &ExperimentConfig, data: &TaskData, seed: u64, w0: f64, dir: &Path) -> Result<RunReport> {
    let cell = cfg.cell(seed, w0);
    if dir.exists() {
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(dir.join("checkpoints"))?;
    let text = cell.to_toml();
    fs::write(dir.join(CONFIG_FILE), &text)?;
    let mut manifest = RunManifest::new(digest(text.as_bytes()), seed, w0, unix_now());
    manifest.record(dir, CONFIG_FILE)?;

    let tc = cfg.train_config(seed, w0);
    let start = Instant::now();
    let mut written = Vec::new();
    let (trace, params) = trainer::train_with(&data.arch, &data.train, &data.test, &tc, |epoch, p| {
        let rel = checkpoint_name(epoch);
        write_checkpoint(BufWriter::new(File::create(dir.join(&rel))?), epoch, p)?;
        written.push(rel);
        Ok(())
    })?;
    let elapsed_s = start.elapsed().as_secs_f64();
    trace.write_csv(BufWriter::new(File::create(dir.join("trace.csv"))?))?;
    write_checkpoint(BufWriter::new(File::create(dir.join("final.gkpt"))?), tc.epochs, &params)?;

    let chance = trainer::chance_level(&data.test, data.arch.classes);
    let grokking = grokking_time(&trace, Threshold::default(), chance)?;
    let report = RunReport { row: SweepRow::from_run(seed, w0, &trace, &grokking), grokking, chance, elapsed_s };
    fs::write(dir.join(REPORT_FILE), serde_json::to_vec_pretty(&report)?)?;

    for rel in written.iter().map(String::as_str).chain(["trace.csv", "final.gkpt", REPORT_FILE]) {
        manifest.record(dir, rel)?;
    }
    manifest.finished = unix_now();
    manifest.write(dir)?;
    Ok(report)
}

/// Single run; `cfg` must name exactly one seed and one `w0`.
pub fn train(cfg: &ExperimentConfig) -> Result<(PathBuf, RunReport)> {
    let cells = cfg.cells();
    if cells.len() != 1 {
        bail!("train runs one cell but the config has {} (seed, w0) pairs; use sweep", cells.len());
    }
    let (seed, w0) = cells[0];
    let data = load_data(cfg)?;
    let dir = cfg.output_dir.join(run_dir_name(cfg.task, seed, w0));
    let report = train_cell(cfg, &data, seed, w0, &dir)?;
    Ok((dir, report))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SweepStats {
    pub trained: usize,
    pub resumed: usize,
    pub failed: usize,
}

/// Every `(seed, w0)` cell on a worker pool. Cells with an intact manifest
/// for the same configuration are reused; summary rows are appended to
/// `sweep.csv` as cells finish, and the file is rewritten in cell order at
/// the end.
pub fn sweep(cfg: &ExperimentConfig) -> Result<(SweepSummary, SweepStats)> {
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("sweep.toml"), cfg.to_toml())?;
    let data = load_data(cfg)?;
    let cells = cfg.cells();
    let summary_path = cfg.output_dir.join(SWEEP_CSV);
    let sink = Mutex::new((csv::Writer::from_writer(File::create(&summary_path)?), SweepStats::default()));
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers()? {
        pool = pool.num_threads(n);
    }
    let rows: Vec<SweepRow> = pool.build()?.install(|| {
        cells
            .par_iter()
            .map(|&(seed, w0)| {
                let dir = cfg.output_dir.join(run_dir_name(cfg.task, seed, w0));
                let (row, kind) = match completed_run(&dir, &cfg.cell(seed, w0)) {
                    Some(r) => (r.row, 1),
                    None => match train_cell(cfg, &data, seed, w0, &dir) {
                        Ok(r) => (r.row, 0),
                        Err(e) => {
                            eprintln!("cell seed={seed} w0={w0} failed: {e:#}");
                            (failed_row(seed, w0, &e), 2)
                        }
                    },
                };
                let mut guard = sink.lock().expect("summary writer poisoned");
                let (w, stats) = &mut *guard;
                match kind {
                    0 => stats.trained += 1,
                    1 => stats.resumed += 1,
                    _ => stats.failed += 1,
                }
                w.serialize(&row)?;
                w.flush()?;
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let stats = sink.into_inner().expect("summary writer poisoned").1;
    let summary = SweepSummary { rows };
    summary.write_csv(BufWriter::new(File::create(&summary_path)?))?;
    summary.write_aggregate_csv(BufWriter::new(File::create(cfg.output_dir.join(SWEEP_AGGREGATE_CSV))?))?;
    Ok((summary, stats))
}

fn failed_row(seed: u64, w0: f64, err: &anyhow::Error) -> SweepRow {
    let mut row = SweepRow::failed(seed, w0, &grokking_core::Error::State(String::new()));
    row.error = Some(format!("{err:#}"));
    row
}
