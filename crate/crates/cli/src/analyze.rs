//! Post-hoc analyses of a run directory.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use grokking_core::checkpoint::read_checkpoint;
use grokking_core::compress::{self, RunId};
use grokking_core::infogeo::{self, FimConfig, FimDiagonal, SubspaceSplit, TrajectoryBuilder};
use grokking_core::interp::{self, EmbeddingAxis, Feature};
use grokking_core::models::{ParamVector, Task};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Preset};
use crate::manifest::RunManifest;
use crate::run::{load_data, TaskData, CONFIG_FILE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Analysis {
    Interp,
    Prune,
    Fim,
    Trajectory,
}

impl Analysis {
    pub fn enabled(cfg: &ExperimentConfig) -> Vec<Analysis> {
        let a = &cfg.analysis;
        let mut out = Vec::new();
        if a.interp {
            out.push(Analysis::Interp);
        }
        if !a.prune.is_empty() {
            out.push(Analysis::Prune);
        }
        if a.fim {
            out.push(Analysis::Fim);
        }
        if a.trajectory {
            out.push(Analysis::Trajectory);
        }
        out
    }
}

pub const ANALYSIS_DIR: &str = "analysis";
pub const INTERP_JSON: &str = "analysis/interp.json";
pub const FIM_JSON: &str = "analysis/fim.json";
pub const COMPRESSIBILITY_CSV: &str = "analysis/compressibility.csv";

/// Scalar interpretability summary of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InterpSummary {
    pub weight_gini: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ipr_embedding: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ipr_unembedding: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub localized_embedding: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub localized_unembedding: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_dominant_fraction: Option<f64>,
    /// Prefactor-weighted mean correlation per observable.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub weighted_correlation: Vec<(Feature, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FimSummary {
    pub estimator: infogeo::Estimator,
    pub samples: usize,
    pub trace: f64,
    pub fisher_gini: f64,
}

struct RunContext<'a> {
    cfg: &'a ExperimentConfig,
    data: TaskData,
    params: ParamVector,
    dir: &'a Path,
    fim: Option<FimDiagonal>,
}

impl RunContext<'_> {
    fn fim_config(&self) -> FimConfig {
        FimConfig { estimator: self.cfg.analysis.fim_estimator, samples: self.cfg.analysis.fim_samples, seed: self.cfg.seeds[0] }
    }

    fn final_fim(&mut self) -> Result<&FimDiagonal> {
        if self.fim.is_none() {
            let f = infogeo::fim_diagonal(&self.data.arch, &self.params, &self.data.train, &self.fim_config())?;
            self.fim = Some(f);
        }
        Ok(self.fim.as_ref().expect("just computed"))
    }

    fn create(&self, rel: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.dir.join(rel)).with_context(|| format!("creating {rel}"))?))
    }
}

pub fn load_run_config(dir: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(&dir.join(CONFIG_FILE), Preset::Table1, &[])
}

pub fn read_params(path: &Path) -> Result<ParamVector> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_checkpoint(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?.1)
}

/// Checkpoint files of a run in epoch order.
pub fn checkpoint_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let cdir = dir.join("checkpoints");
    if !cdir.is_dir() {
        return Ok(Vec::new());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&cdir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "gkpt"))
        .collect();
    files.sort();
    Ok(files)
}

/// Runs `analyses` (or the ones enabled in the run's config) on a trained
/// run and records the outputs in its manifest. Returns the written files.
pub fn analyze(dir: &Path, analyses: Option<&[Analysis]>) -> Result<Vec<String>> {
    let cfg = load_run_config(dir)?;
    let mut todo: Vec<Analysis> = analyses.map(<[_]>::to_vec).unwrap_or_else(|| Analysis::enabled(&cfg));
    todo.sort();
    todo.dedup();
    if todo.contains(&Analysis::Trajectory) && checkpoint_files(dir)?.len() < 3 {
        bail!(
            "trajectory analysis needs at least 3 checkpoints in {}; train with checkpoint_every > 0",
            dir.join("checkpoints").display()
        );
    }
    let mut manifest = RunManifest::read(dir)?;
    let params = read_params(&dir.join("final.gkpt"))?;
    let data = load_data(&cfg)?;
    fs::create_dir_all(dir.join(ANALYSIS_DIR))?;
    let mut ctx = RunContext { cfg: &cfg, data, params, dir, fim: None };
    let mut written = Vec::new();
    for a in todo {
        let files = match a {
            Analysis::Interp => run_interp(&mut ctx)?,
            Analysis::Prune => run_prune(&mut ctx)?,
            Analysis::Fim => run_fim(&mut ctx)?,
            Analysis::Trajectory => run_trajectory(&mut ctx)?,
        };
        written.extend(files);
    }
    for rel in &written {
        manifest.record(dir, rel)?;
    }
    manifest.write(dir)?;
    Ok(written)
}

fn run_interp(ctx: &mut RunContext) -> Result<Vec<String>> {
    let mut summary = InterpSummary { weight_gini: interp::weight_gini(&ctx.params)?, ..Default::default() };
    let mut files = Vec::new();
    match ctx.cfg.task {
        Task::ModAdd => {
            let (e, u) = interp::modadd_spectra(&ctx.params, ctx.cfg.modadd.modulus, EmbeddingAxis::Blockwise)?;
            interp::write_ipr_csv(ctx.create("analysis/ipr.csv")?, &[&e, &u])?;
            interp::write_heatmap_csv(ctx.create("analysis/fourier_power.csv")?, &[&e, &u])?;
            files.extend(["analysis/ipr.csv".to_string(), "analysis/fourier_power.csv".to_string()]);
            summary.ipr_embedding = Some(interp::mean_ipr(&e)?);
            summary.ipr_unembedding = Some(interp::mean_ipr(&u)?);
            summary.localized_embedding = Some(interp::localized_fraction(&e, 0.5));
            summary.localized_unembedding = Some(interp::localized_fraction(&u, 0.5));
        }
        Task::Ising => {
            let corr = interp::neuron_correlations(&ctx.data.arch, &ctx.params, &ctx.data.test_snapshots, "fc1")?;
            interp::write_correlations_csv(ctx.create("analysis/correlations.csv")?, std::slice::from_ref(&corr))?;
            files.push("analysis/correlations.csv".to_string());
            summary.energy_dominant_fraction = Some(interp::energy_dominant_fraction(&corr));
            summary.weighted_correlation =
                Feature::ALL.iter().map(|&f| (f, interp::weighted_correlation(&corr, f, true))).collect();
        }
    }
    fs::write(ctx.dir.join(INTERP_JSON), serde_json::to_vec_pretty(&summary)?)?;
    files.push(INTERP_JSON.to_string());
    Ok(files)
}

fn run_prune(ctx: &mut RunContext) -> Result<Vec<String>> {
    let schemes = ctx.cfg.analysis.schemes()?;
    if schemes.iter().any(|s| matches!(s, compress::Scheme::FisherWhole | compress::Scheme::FisherLayer(_))) {
        ctx.final_fim()?;
    }
    let grid = compress::default_grid();
    let (seed, w0) = (ctx.cfg.seeds[0], ctx.cfg.w0_grid[0]);
    let id = RunId { w0, weight_decay: ctx.cfg.train.weight_decay, batch_size: ctx.cfg.train.batch_size, seed };
    let mut curves = Vec::new();
    let mut reports = Vec::new();
    for s in &schemes {
        let curve = compress::pruning_curve(&ctx.data.arch, &ctx.params, &ctx.data.test, s, ctx.fim.as_ref(), &grid)?;
        match compress::compressibility(&curve, id) {
            Ok(r) => reports.push(r),
            Err(e) => eprintln!("{}: no compressibility for {}: {e}", ctx.dir.display(), s.tag()),
        }
        curves.push(curve);
    }
    compress::write_curves_csv(ctx.create("analysis/pruning_curves.csv")?, &curves)?;
    compress::write_compressibility_csv(ctx.create(COMPRESSIBILITY_CSV)?, &reports)?;
    Ok(vec!["analysis/pruning_curves.csv".into(), COMPRESSIBILITY_CSV.into()])
}

fn run_fim(ctx: &mut RunContext) -> Result<Vec<String>> {
    let cfg = ctx.fim_config();
    let f = ctx.final_fim()?.clone();
    infogeo::write_spectrum_csv(ctx.create("analysis/fim_spectrum.csv")?, &f)?;
    let summary = FimSummary {
        estimator: cfg.estimator,
        samples: cfg.samples.min(ctx.data.train.len()),
        trace: f.values.iter().sum(),
        fisher_gini: interp::gini(&f.values)?,
    };
    fs::write(ctx.dir.join(FIM_JSON), serde_json::to_vec_pretty(&summary)?)?;
    Ok(vec!["analysis/fim_spectrum.csv".into(), FIM_JSON.into()])
}

fn run_trajectory(ctx: &mut RunContext) -> Result<Vec<String>> {
    let cfg = ctx.fim_config();
    let threshold = ctx.cfg.analysis.stiff_threshold;
    let split = SubspaceSplit::from_fim(ctx.final_fim()?, threshold);
    let mut builder = TrajectoryBuilder::new(Some(split));
    for path in checkpoint_files(ctx.dir)? {
        let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        let (epoch, p) = read_checkpoint(BufReader::new(file)).with_context(|| format!("reading {}", path.display()))?;
        let g = infogeo::fim_diagonal(&ctx.data.arch, &p, &ctx.data.train, &cfg)?;
        builder.push(epoch, p.values(), &g.values).with_context(|| format!("checkpoint {}", path.display()))?;
    }
    let records = builder.finish();
    infogeo::write_trajectory_csv(ctx.create("analysis/trajectory.csv")?, &records)?;
    let mut files = vec!["analysis/trajectory.csv".to_string()];
    let epochs: Vec<usize> = records.iter().map(|r| r.epoch).collect();
    let magnitude: Vec<f64> = records.iter().map(|r| r.fim_magnitude).collect();
    if epochs.len() >= 3 {
        let period = infogeo::grokking_period_roots(&epochs, &magnitude, ctx.cfg.analysis.root_min_fraction)?;
        infogeo::write_period_csv(ctx.create("analysis/grokking_period.csv")?, &period)?;
        files.push("analysis/grokking_period.csv".into());
    }
    Ok(files)
}
