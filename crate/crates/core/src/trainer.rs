//! Mini-batch Adam training with per-epoch metrics, periodic parameter
//! snapshots, grokking-time detection, and multi-seed sweeps.

use std::io::{Read, Write};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{self, Architecture, Dataset, Metrics, ParamVector, Task};
use crate::numerics::{AdamConfig, AdamState, DecayMode};
use crate::rng::derive_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(default)]
    pub decay_mode: DecayMode,
    pub w0: f64,
    pub seed: u64,
    /// Snapshot spacing `f` in epochs; 0 disables snapshots.
    pub checkpoint_every: usize,
    /// Last epoch at which snapshots are taken (inclusive).
    pub checkpoint_until: Option<usize>,
}

impl TrainConfig {
    /// Hyperparameters of the reference setup for `task`.
    pub fn reference(task: Task) -> Self {
        match task {
            Task::Ising => TrainConfig {
                epochs: 100_000,
                batch_size: 300,
                lr: 1e-4,
                weight_decay: 0.1,
                decay_mode: DecayMode::Coupled,
                w0: 1.0,
                seed: 0,
                checkpoint_every: 200,
                checkpoint_until: Some(100_000),
            },
            Task::ModAdd => TrainConfig {
                epochs: 1000,
                batch_size: 64,
                lr: 5e-3,
                weight_decay: 3e-5,
                decay_mode: DecayMode::Coupled,
                w0: 1.0,
                seed: 0,
                checkpoint_every: 1,
                checkpoint_until: Some(500),
            },
        }
    }

    /// Ising preset shortened to 20000 epochs, snapshot spacing kept at 200.
    pub fn desk_ising() -> Self {
        TrainConfig { epochs: 20_000, checkpoint_until: Some(20_000), ..TrainConfig::reference(Task::Ising) }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, weight_decay: self.weight_decay, decay_mode: self.decay_mode, ..AdamConfig::default() }
    }

    pub fn validate(&self, train_len: usize) -> Result<()> {
        if self.batch_size == 0 || self.batch_size > train_len {
            return Err(Error::Config(format!("batch size {} with {train_len} training rows", self.batch_size)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("learning rate and weight decay must be finite and non-negative".into()));
        }
        if !(self.w0 > 0.0 && self.w0.is_finite()) {
            return Err(Error::Config(format!("weight multiplier must be positive, got {}", self.w0)));
        }
        Ok(())
    }

    fn snapshot_at(&self, epoch: usize) -> bool {
        self.checkpoint_every > 0
            && epoch % self.checkpoint_every == 0
            && self.checkpoint_until.map_or(true, |u| epoch <= u)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainingTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn train_acc(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_acc).collect()
    }

    pub fn test_acc(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.test_acc).collect()
    }

    /// CSV with columns `epoch,train_loss,test_loss,train_acc,test_acc`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let records = rdr.deserialize().collect::<std::result::Result<Vec<EpochRecord>, _>>()?;
        Ok(TrainingTrace { records })
    }
}

/// Parameter snapshots `θ^e` taken every `every` epochs, starting at epoch 0.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointSeries {
    pub every: usize,
    entries: Vec<(usize, ParamVector)>,
}

impl CheckpointSeries {
    pub fn new(every: usize) -> Self {
        CheckpointSeries { every, entries: Vec::new() }
    }

    pub fn push(&mut self, epoch: usize, params: ParamVector) -> Result<()> {
        if let Some((last, p)) = self.entries.last() {
            if epoch != last + self.every {
                return Err(Error::State(format!("snapshot at epoch {epoch} does not follow {last} by {}", self.every)));
            }
            if p.len() != params.len() {
                return Err(Error::dim("snapshots of different lengths"));
            }
        }
        self.entries.push((epoch, params));
        Ok(())
    }

    pub fn entries(&self) -> &[(usize, ParamVector)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingRun {
    pub trace: TrainingTrace,
    pub checkpoints: CheckpointSeries,
    pub final_params: ParamVector,
}

/// Trains with snapshots kept in memory.
pub fn train(arch: &Architecture, train_set: &Dataset, test_set: &Dataset, cfg: &TrainConfig) -> Result<TrainingRun> {
    let mut checkpoints = CheckpointSeries::new(cfg.checkpoint_every);
    let (trace, final_params) =
        train_with(arch, train_set, test_set, cfg, |epoch, p| checkpoints.push(epoch, p.clone()))?;
    Ok(TrainingRun { trace, checkpoints, final_params })
}

/// Trains and hands every snapshot to `on_checkpoint` instead of keeping it.
/// Snapshot epochs are 0 (the initialization) and every multiple of
/// `checkpoint_every` up to `checkpoint_until`.
pub fn train_with(
    arch: &Architecture,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(usize, &ParamVector) -> Result<()>,
) -> Result<(TrainingTrace, ParamVector)> {
    cfg.validate(train_set.len())?;
    let mut params = models::init(arch, cfg.w0, cfg.seed)?;
    let mut adam = AdamState::new(cfg.adam(), params.len());
    let mut grads = vec![0.0; params.len()];
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let (mut xb, mut tb) = (Vec::new(), Vec::new());
    let mut trace = TrainingTrace::default();
    if cfg.snapshot_at(0) {
        on_checkpoint(0, &params)?;
    }
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut derive_rng(cfg.seed, arch.task.name(), "shuffle", epoch as u64));
        for batch in order.chunks(cfg.batch_size) {
            train_set.gather_into(batch, &mut xb, &mut tb);
            let loss = models::loss_and_grad(arch, params.values(), &xb, &tb, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            adam.step(params.values_mut(), &grads).map_err(|e| match e {
                Error::NonFinite { .. } => Error::Diverged { epoch, loss: f64::NAN },
                other => other,
            })?;
        }
        let tr = models::evaluate(arch, params.values(), train_set)?;
        let te = models::evaluate(arch, params.values(), test_set)?;
        if !tr.loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: tr.loss });
        }
        trace.records.push(EpochRecord {
            epoch,
            train_loss: tr.loss,
            test_loss: te.loss,
            train_acc: tr.accuracy,
            test_acc: te.accuracy,
        });
        if cfg.snapshot_at(epoch) {
            on_checkpoint(epoch, &params)?;
        }
    }
    Ok((trace, params))
}

/// How "within 5% of the maximum accuracy" is read.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum Threshold {
    /// Accuracy ≥ `value · max`.
    Multiplicative(f64),
    /// Accuracy ≥ `max − value`.
    Additive(f64),
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::Multiplicative(0.95)
    }
}

impl Threshold {
    fn level(self, max: f64) -> f64 {
        match self {
            Threshold::Multiplicative(f) => f * max,
            Threshold::Additive(d) => max - d,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Grokked,
    Steady,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrokkingReport {
    pub t_train: usize,
    pub t_test: usize,
    pub t_grok: i64,
    pub verdict: Verdict,
    /// Maximum test accuracy never left chance level.
    pub degenerate: bool,
}

/// First epoch (1-based) at which `acc` reaches the threshold level.
pub fn first_crossing(acc: &[f64], threshold: Threshold) -> Option<usize> {
    let max = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let level = threshold.level(max);
    acc.iter().position(|&a| a >= level).map(|i| i + 1)
}

/// Grokking time from a trace. `chance` is the accuracy of a constant
/// classifier; a run whose best test accuracy stays within 5% of the
/// remaining headroom above chance is marked degenerate and called steady.
pub fn grokking_time(trace: &TrainingTrace, threshold: Threshold, chance: f64) -> Result<GrokkingReport> {
    if trace.is_empty() {
        return Err(Error::State("grokking time of an empty trace".into()));
    }
    let (train, test) = (trace.train_acc(), trace.test_acc());
    let t_train = first_crossing(&train, threshold).unwrap_or(trace.len());
    let t_test = first_crossing(&test, threshold).unwrap_or(trace.len());
    let t_grok = t_test as i64 - t_train as i64;
    let max_test = test.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = max_test <= chance + 0.05 * (1.0 - chance);
    let verdict = if !degenerate && t_grok > t_train as i64 { Verdict::Grokked } else { Verdict::Steady };
    Ok(GrokkingReport { t_train, t_test, t_grok, verdict, degenerate })
}

/// Accuracy of always predicting the most frequent class.
pub fn chance_level(data: &Dataset, classes: usize) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0usize; classes];
    for &t in data.targets() {
        counts[t] += 1;
    }
    *counts.iter().max().unwrap_or(&0) as f64 / data.len() as f64
}

/// One `(seed, w0)` cell of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub w0: f64,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub final_train_acc: f64,
    pub final_test_acc: f64,
    pub t_train: usize,
    pub t_test: usize,
    pub t_grok: i64,
    pub verdict: Option<Verdict>,
    pub degenerate: bool,
    pub error: Option<String>,
}

impl SweepRow {
    pub fn from_run(seed: u64, w0: f64, trace: &TrainingTrace, report: &GrokkingReport) -> Self {
        let last = trace.last().copied().unwrap_or(EpochRecord {
            epoch: 0,
            train_loss: f64::NAN,
            test_loss: f64::NAN,
            train_acc: f64::NAN,
            test_acc: f64::NAN,
        });
        SweepRow {
            seed,
            w0,
            final_train_loss: last.train_loss,
            final_test_loss: last.test_loss,
            final_train_acc: last.train_acc,
            final_test_acc: last.test_acc,
            t_train: report.t_train,
            t_test: report.t_test,
            t_grok: report.t_grok,
            verdict: Some(report.verdict),
            degenerate: report.degenerate,
            error: None,
        }
    }

    pub fn failed(seed: u64, w0: f64, err: &Error) -> Self {
        SweepRow {
            seed,
            w0,
            final_train_loss: f64::NAN,
            final_test_loss: f64::NAN,
            final_train_acc: f64::NAN,
            final_test_acc: f64::NAN,
            t_train: 0,
            t_test: 0,
            t_grok: 0,
            verdict: None,
            degenerate: false,
            error: Some(err.to_string()),
        }
    }
}

/// Per-`w0` aggregate over the seeds that completed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepAggregate {
    pub w0: f64,
    pub runs: usize,
    pub failures: usize,
    pub grokked: usize,
    pub mean_train_loss: f64,
    pub std_train_loss: f64,
    pub mean_test_loss: f64,
    pub std_test_loss: f64,
    pub mean_train_acc: f64,
    pub mean_test_acc: f64,
    pub std_test_acc: f64,
    pub mean_t_grok: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl SweepSummary {
    /// Aggregates in order of first appearance of each `w0`.
    pub fn aggregate(&self) -> Vec<SweepAggregate> {
        let mut grid: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !grid.contains(&r.w0) {
                grid.push(r.w0);
            }
        }
        grid.into_iter()
            .map(|w0| {
                let all: Vec<&SweepRow> = self.rows.iter().filter(|r| r.w0 == w0).collect();
                let ok: Vec<&SweepRow> = all.iter().copied().filter(|r| r.error.is_none()).collect();
                let col = |f: fn(&SweepRow) -> f64| mean_std(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
                let (mean_train_loss, std_train_loss) = col(|r| r.final_train_loss);
                let (mean_test_loss, std_test_loss) = col(|r| r.final_test_loss);
                let (mean_test_acc, std_test_acc) = col(|r| r.final_test_acc);
                SweepAggregate {
                    w0,
                    runs: ok.len(),
                    failures: all.len() - ok.len(),
                    grokked: ok.iter().filter(|r| r.verdict == Some(Verdict::Grokked)).count(),
                    mean_train_loss,
                    std_train_loss,
                    mean_test_loss,
                    std_test_loss,
                    mean_train_acc: col(|r| r.final_train_acc).0,
                    mean_test_acc,
                    std_test_acc,
                    mean_t_grok: col(|r| r.t_grok as f64).0,
                }
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<SweepRow>, _>>()?;
        Ok(SweepSummary { rows })
    }

    pub fn write_aggregate_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for a in self.aggregate() {
            out.serialize(a)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Runs every `(seed, w0)` cell in parallel. `on_done` sees each finished
/// run (rows of failed runs carry the error instead). Rows come back in cell
/// order regardless of completion order.
pub fn sweep_cells(
    arch: &Architecture,
    train_set: &Dataset,
    test_set: &Dataset,
    base: &TrainConfig,
    cells: &[(u64, f64)],
    threshold: Threshold,
    on_done: impl Fn(&SweepRow, Option<&TrainingRun>) + Sync,
) -> SweepSummary {
    let chance = chance_level(test_set, arch.classes);
    let collected = Mutex::new(Vec::with_capacity(cells.len()));
    cells.par_iter().enumerate().for_each(|(i, &(seed, w0))| {
        let cfg = TrainConfig { seed, w0, ..base.clone() };
        let (row, run) = match train(arch, train_set, test_set, &cfg)
            .and_then(|run| grokking_time(&run.trace, threshold, chance).map(|rep| (rep, run)))
        {
            Ok((rep, run)) => (SweepRow::from_run(seed, w0, &run.trace, &rep), Some(run)),
            Err(e) => (SweepRow::failed(seed, w0, &e), None),
        };
        on_done(&row, run.as_ref());
        collected.lock().expect("collector poisoned").push((i, row));
    });
    let mut rows = collected.into_inner().expect("collector poisoned");
    rows.sort_by_key(|(i, _)| *i);
    SweepSummary { rows: rows.into_iter().map(|(_, r)| r).collect() }
}

/// Full grid of `seeds × w0_grid`.
pub fn seed_sweep(
    arch: &Architecture,
    train_set: &Dataset,
    test_set: &Dataset,
    base: &TrainConfig,
    seeds: &[u64],
    w0_grid: &[f64],
) -> SweepSummary {
    let cells: Vec<(u64, f64)> = w0_grid.iter().flat_map(|&w| seeds.iter().map(move |&s| (s, w))).collect();
    sweep_cells(arch, train_set, test_set, base, &cells, Threshold::default(), |_, _| {})
}

/// Final metrics of a finished run on both sets.
pub fn final_metrics(arch: &Architecture, params: &ParamVector, train_set: &Dataset, test_set: &Dataset) -> Result<(Metrics, Metrics)> {
    Ok((models::evaluate(arch, params.values(), train_set)?, models::evaluate(arch, params.values(), test_set)?))
}
