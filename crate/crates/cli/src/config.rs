//! Experiment configuration: TOML with task-scoped sections.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use grokking_core::compress::Scheme;
use grokking_core::infogeo::{Estimator, SubspaceSplit};
use grokking_core::ising::SimConfig;
use grokking_core::models::Task;
use grokking_core::numerics::DecayMode;
use grokking_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::Value;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Published hyperparameters.
    #[default]
    Table1,
    /// Ising epochs cut to 20000 so a run fits on a desk.
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub decay_mode: DecayMode,
    /// Snapshot spacing in epochs; 0 disables checkpoints.
    pub checkpoint_every: usize,
    /// Last checkpointed epoch; 0 in the file means through the final epoch.
    #[serde(default, with = "zero_is_none")]
    pub checkpoint_until: Option<usize>,
}

impl TrainSection {
    fn from_train(c: &TrainConfig) -> Self {
        TrainSection {
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.lr,
            weight_decay: c.weight_decay,
            decay_mode: c.decay_mode,
            checkpoint_every: c.checkpoint_every,
            checkpoint_until: c.checkpoint_until,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModAddSection {
    pub modulus: usize,
    pub train_fraction: f64,
    pub split_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsingSection {
    pub size: usize,
    pub coupling: f64,
    pub temperatures: Vec<f64>,
    pub snapshots_per_temperature: usize,
    pub mc_steps: u64,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    /// Directory holding `train.isng` and `test.isng`; defaults to
    /// `<output_dir>/ising-data`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_dir: Option<PathBuf>,
}

impl IsingSection {
    fn from_sim(s: SimConfig) -> Self {
        IsingSection {
            size: s.size,
            coupling: s.coupling,
            temperatures: s.temperatures,
            snapshots_per_temperature: s.snapshots_per_temperature,
            mc_steps: s.mc_steps,
            seed: s.seed,
            train_size: s.train_size,
            test_size: s.test_size,
            dataset_dir: None,
        }
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig {
            size: self.size,
            coupling: self.coupling,
            temperatures: self.temperatures.clone(),
            snapshots_per_temperature: self.snapshots_per_temperature,
            mc_steps: self.mc_steps,
            seed: self.seed,
            train_size: self.train_size,
            test_size: self.test_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    pub interp: bool,
    /// Pruning scheme tags: `parallel`, `global`, `global_rescaled`,
    /// `layer:<name>`, `fisher`, `fisher:<name>`.
    pub prune: Vec<String>,
    pub fim: bool,
    pub trajectory: bool,
    pub fim_estimator: Estimator,
    pub fim_samples: usize,
    pub stiff_threshold: f64,
    /// Minimum swing, as a fraction of the magnitude range, for a turning
    /// point of the step-magnitude curve.
    pub root_min_fraction: f64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection {
            interp: true,
            prune: vec!["parallel".into()],
            fim: true,
            trajectory: true,
            fim_estimator: Estimator::default(),
            fim_samples: 512,
            stiff_threshold: SubspaceSplit::DEFAULT_THRESHOLD,
            root_min_fraction: 0.05,
        }
    }
}

impl AnalysisSection {
    pub fn schemes(&self) -> Result<Vec<Scheme>> {
        self.prune.iter().map(|t| Scheme::parse(t).map_err(Into::into)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub w0_grid: Vec<f64>,
    pub train: TrainSection,
    pub modadd: ModAddSection,
    pub ising: IsingSection,
    pub analysis: AnalysisSection,
}

impl ExperimentConfig {
    pub fn defaults(task: Task, preset: Preset) -> Self {
        let train = match (task, preset) {
            (Task::Ising, Preset::Desk) => TrainConfig::desk_ising(),
            _ => TrainConfig::reference(task),
        };
        ExperimentConfig {
            task,
            output_dir: PathBuf::from("runs"),
            seeds: vec![0],
            w0_grid: vec![train.w0],
            train: TrainSection::from_train(&train),
            modadd: ModAddSection { modulus: 113, train_fraction: 0.7, split_seed: 0 },
            ising: IsingSection::from_sim(SimConfig::standard(16, 0)),
            analysis: AnalysisSection::default(),
        }
    }

    /// Parses `text` over the defaults of its task; `overrides` are
    /// `dotted.key=value` pairs applied last.
    pub fn parse(text: &str, preset: Preset, overrides: &[String]) -> Result<Self> {
        let mut user: Value = toml::from_str(text).context("config is not valid TOML")?;
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let task = match user.get("task") {
            None => Task::ModAdd,
            Some(v) => v.clone().try_into().context("unknown task")?,
        };
        let mut merged = Value::try_from(Self::defaults(task, preset))?;
        merge(&mut merged, user);
        let cfg: ExperimentConfig = merged.try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, preset: Preset, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text, preset, overrides).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.w0_grid.is_empty() {
            bail!("seeds and w0_grid must not be empty");
        }
        if let Some(w) = self.w0_grid.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            bail!("w0 must be positive and finite, got {w}");
        }
        self.train_config(self.seeds[0], self.w0_grid[0]).validate(usize::MAX)?;
        if self.train.batch_size == 0 {
            bail!("batch size must be positive");
        }
        match self.task {
            Task::ModAdd => {
                let m = &self.modadd;
                if m.modulus < 2 || !(m.train_fraction > 0.0 && m.train_fraction < 1.0) {
                    bail!("modulus must be at least 2 and train_fraction inside (0, 1)");
                }
            }
            Task::Ising => {
                let sim = self.ising.sim();
                sim.validate()?;
                sim.validate_dataset_grid()?;
            }
        }
        self.analysis.schemes()?;
        if self.analysis.fim_samples == 0 {
            bail!("fim_samples must be positive");
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64, w0: f64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            decay_mode: t.decay_mode,
            w0,
            seed,
            checkpoint_every: t.checkpoint_every,
            checkpoint_until: t.checkpoint_until,
        }
    }

    /// The configuration of a single sweep cell.
    pub fn cell(&self, seed: u64, w0: f64) -> Self {
        ExperimentConfig { seeds: vec![seed], w0_grid: vec![w0], ..self.clone() }
    }

    pub fn cells(&self) -> Vec<(u64, f64)> {
        self.w0_grid.iter().flat_map(|&w| self.seeds.iter().map(move |&s| (s, w))).collect()
    }

    pub fn ising_dataset_dir(&self) -> PathBuf {
        self.ising.dataset_dir.clone().unwrap_or_else(|| self.output_dir.join("ising-data"))
    }
}

mod zero_is_none {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(v.unwrap_or(0) as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<usize>, D::Error> {
        Ok(match usize::deserialize(d)? {
            0 => None,
            v => Some(v),
        })
    }
}

pub fn run_dir_name(task: Task, seed: u64, w0: f64) -> String {
    format!("{}-w{w0}-s{seed}", task.name())
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`; the value is read as a TOML literal, falling back
/// to a bare string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').with_context(|| format!("override {spec:?} is not key=value"))?;
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("empty path segment in {key:?}");
    }
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        let table = node.as_table_mut().with_context(|| format!("{key:?} descends into a non-table"))?;
        node = table.entry(p.to_string()).or_insert_with(|| Value::Table(Default::default()));
    }
    node.as_table_mut()
        .with_context(|| format!("{key:?} descends into a non-table"))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
