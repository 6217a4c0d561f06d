//! Two-dimensional Ising snapshots: observables, Glauber dynamics, and the
//! labeled dataset the CNN is trained on.

pub mod io;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Ordered,
    Disordered,
}

impl Phase {
    /// Class index used by the classifier: ordered = 0, disordered = 1.
    pub fn class(self) -> usize {
        match self {
            Phase::Ordered => 0,
            Phase::Disordered => 1,
        }
    }

    /// Infinite-system phase at `temperature`. At exactly `T_c` the phase is
    /// disordered (the magnetization vanishes there).
    pub fn at(temperature: f64, j: f64) -> Phase {
        if temperature < critical_temperature(j) {
            Phase::Ordered
        } else {
            Phase::Disordered
        }
    }
}

/// One `L×L` spin configuration on a torus.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    size: usize,
    spins: Vec<i8>,
    pub temperature: f64,
    pub label: Phase,
    pub mc_steps: u64,
}

impl Snapshot {
    pub fn new(size: usize, spins: Vec<i8>, temperature: f64, label: Phase) -> Result<Self> {
        if spins.len() != size * size {
            return Err(Error::dim(format!("{} spins for a {size}x{size} lattice", spins.len())));
        }
        if spins.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::Domain("spins must be exactly ±1".into()));
        }
        Ok(Snapshot { size, spins, temperature, label, mc_steps: 0 })
    }

    pub fn filled(size: usize, spin: i8, temperature: f64, j: f64) -> Self {
        Snapshot { size, spins: vec![spin; size * size], temperature, label: Phase::at(temperature, j), mc_steps: 0 }
    }

    pub fn checkerboard(size: usize, temperature: f64, j: f64) -> Self {
        let spins = (0..size * size)
            .map(|i| if (i / size + i % size) % 2 == 0 { 1 } else { -1 })
            .collect();
        Snapshot { size, spins, temperature, label: Phase::at(temperature, j), mc_steps: 0 }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn spins(&self) -> &[i8] {
        &self.spins
    }

    pub fn spin(&self, row: usize, col: usize) -> i8 {
        self.spins[row * self.size + col]
    }

    pub fn flipped(&self) -> Snapshot {
        let mut s = self.clone();
        s.spins.iter_mut().for_each(|v| *v = -*v);
        s
    }

    /// Spins as floats in row-major order, the network input.
    pub fn as_f64(&self) -> Vec<f64> {
        self.spins.iter().map(|&s| s as f64).collect()
    }
}

/// `E = −Σ σᵢσⱼ` over the `2L²` nearest-neighbour edges of the torus, in units
/// of the coupling.
pub fn energy(s: &Snapshot) -> i64 {
    let l = s.size;
    let mut e = 0i64;
    for r in 0..l {
        for c in 0..l {
            let v = s.spins[r * l + c] as i64;
            let right = s.spins[r * l + (c + 1) % l] as i64;
            let down = s.spins[((r + 1) % l) * l + c] as i64;
            e -= v * (right + down);
        }
    }
    e
}

pub fn magnetization(s: &Snapshot) -> i64 {
    s.spins.iter().map(|&v| v as i64).sum()
}

/// Onsager critical temperature `2J / ln(1 + √2)`.
pub fn critical_temperature(j: f64) -> f64 {
    2.0 * j / (1.0 + 2f64.sqrt()).ln()
}

/// Spontaneous magnetization per site of the infinite lattice.
pub fn exact_magnetization(temperature: f64, j: f64) -> f64 {
    if temperature >= critical_temperature(j) {
        return 0.0;
    }
    let s = (2.0 * j / temperature).sinh();
    if !s.is_finite() {
        return 1.0;
    }
    (1.0 - s.powi(-4)).max(0.0).powf(0.125)
}

/// Heat-bath acceptance `1 / (1 + e^{ΔE/T})`.
pub fn glauber_flip_probability(delta_e: f64, temperature: f64) -> f64 {
    let x = delta_e / temperature;
    if x > 0.0 {
        let e = (-x).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + x.exp())
    }
}

/// Half-width of the finite-size critical window around `T_c`: the band in
/// which the correlation length (`ν = 1`) exceeds the lattice size.
pub fn critical_half_width(size: usize, j: f64) -> f64 {
    critical_temperature(j) / size as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub size: usize,
    pub coupling: f64,
    pub temperatures: Vec<f64>,
    pub snapshots_per_temperature: usize,
    pub mc_steps: u64,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
}

impl SimConfig {
    /// 50 temperatures on `[T_c − 1, T_c + 1]`, `N = 200·L²`.
    pub fn standard(size: usize, seed: u64) -> Self {
        SimConfig {
            size,
            coupling: 1.0,
            temperatures: temperature_grid(1.0, 50),
            snapshots_per_temperature: 1000,
            mc_steps: 200 * (size * size) as u64,
            seed,
            train_size: 300,
            test_size: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 2 {
            return Err(Error::Config("lattice size must be at least 2".into()));
        }
        if !(self.coupling > 0.0) {
            return Err(Error::Config("coupling must be positive".into()));
        }
        if self.temperatures.is_empty() || self.temperatures.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
            return Err(Error::Config("temperatures must be positive and finite".into()));
        }
        let min_steps = 10 * (self.size * self.size) as u64;
        if self.mc_steps < min_steps {
            return Err(Error::Config(format!(
                "mc_steps {} must be at least 10·L² = {min_steps}",
                self.mc_steps
            )));
        }
        if self.train_size % 2 != 0 || self.test_size % 2 != 0 {
            return Err(Error::Config("train and test sizes must be even for phase balance".into()));
        }
        Ok(())
    }

    /// Checks that the grid spans `[T_c − 1, T_c + 1]`.
    pub fn validate_dataset_grid(&self) -> Result<()> {
        let tc = critical_temperature(self.coupling);
        let lo = self.temperatures.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.temperatures.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if (lo - (tc - 1.0)).abs() > 1e-9 || (hi - (tc + 1.0)).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "temperature grid [{lo}, {hi}] must span [T_c-1, T_c+1] = [{}, {}]",
                tc - 1.0,
                tc + 1.0
            )));
        }
        Ok(())
    }
}

pub fn temperature_grid(j: f64, count: usize) -> Vec<f64> {
    let tc = critical_temperature(j);
    if count == 1 {
        return vec![tc];
    }
    (0..count).map(|i| tc - 1.0 + 2.0 * i as f64 / (count - 1) as f64).collect()
}

/// Precomputed acceptance probabilities for `ΔE = 2σ·h ∈ {−8, −4, 0, 4, 8}·J`.
struct FlipTable([f64; 5]);

impl FlipTable {
    fn new(temperature: f64, j: f64) -> Self {
        let mut t = [0.0; 5];
        for (i, slot) in t.iter_mut().enumerate() {
            let de = (i as f64 * 4.0 - 8.0) * j;
            *slot = glauber_flip_probability(de, temperature);
        }
        FlipTable(t)
    }

    #[inline]
    fn get(&self, sigma_times_field: i32) -> f64 {
        // ΔE = 2·J·σ·Σneighbours, σ·Σ ∈ {−4, −2, 0, 2, 4}
        self.0[((sigma_times_field + 4) / 2) as usize]
    }
}

/// Glauber chain on an `L×L` torus, exposed for the sampler checks.
pub struct GlauberChain {
    size: usize,
    spins: Vec<i8>,
    table: FlipTable,
}

impl GlauberChain {
    /// Starts from uniformly random spins (infinite temperature).
    pub fn new(size: usize, temperature: f64, j: f64, rng: &mut Rng) -> Self {
        let spins = (0..size * size).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
        GlauberChain { size, spins, table: FlipTable::new(temperature, j) }
    }

    /// One Monte Carlo step: a random site is proposed and flipped with the
    /// heat-bath probability computed from its four neighbours.
    #[inline]
    pub fn step(&mut self, rng: &mut Rng) {
        let l = self.size;
        let site = rng.gen_range(0..l * l);
        let (r, c) = (site / l, site % l);
        let up = ((r + l - 1) % l) * l + c;
        let down = ((r + 1) % l) * l + c;
        let left = r * l + (c + l - 1) % l;
        let right = r * l + (c + 1) % l;
        let field = self.spins[up] as i32 + self.spins[down] as i32 + self.spins[left] as i32 + self.spins[right] as i32;
        let p = self.table.get(self.spins[site] as i32 * field);
        if rng.gen::<f64>() < p {
            self.spins[site] = -self.spins[site];
        }
    }

    pub fn spins(&self) -> &[i8] {
        &self.spins
    }

    /// Packs the configuration into an integer (site `i` → bit `i`, 1 = up).
    pub fn state_index(&self) -> usize {
        self.spins.iter().enumerate().fold(0, |acc, (i, &s)| acc | (usize::from(s > 0) << i))
    }
}

/// Runs one chain for `config.mc_steps` steps at `temperature` and labels the
/// result by the infinite-system phase.
pub fn run_chain(config: &SimConfig, temperature: f64, rng: &mut Rng) -> Snapshot {
    let mut chain = GlauberChain::new(config.size, temperature, config.coupling, rng);
    for _ in 0..config.mc_steps {
        chain.step(rng);
    }
    Snapshot {
        size: config.size,
        spins: chain.spins,
        temperature,
        label: Phase::at(temperature, config.coupling),
        mc_steps: config.mc_steps,
    }
}

#[derive(Clone, Debug)]
pub struct IsingDataset {
    pub train: Vec<Snapshot>,
    pub test: Vec<Snapshot>,
}

/// Generates the full pool (`snapshots_per_temperature` chains at every grid
/// temperature) and draws phase-balanced train and test sets from it without
/// overlap.
pub fn build_dataset(config: &SimConfig) -> Result<IsingDataset> {
    config.validate()?;
    config.validate_dataset_grid()?;
    let per_t = config.snapshots_per_temperature;
    let pool: Vec<Snapshot> = (0..config.temperatures.len() * per_t)
        .into_par_iter()
        .map(|idx| {
            let t = config.temperatures[idx / per_t];
            let mut rng = derive_rng(config.seed, "ising", "chain", idx as u64);
            run_chain(config, t, &mut rng)
        })
        .collect();
    split_pool(pool, config)
}

fn split_pool(pool: Vec<Snapshot>, config: &SimConfig) -> Result<IsingDataset> {
    let (mut ordered, mut disordered): (Vec<_>, Vec<_>) = pool.into_iter().partition(|s| s.label == Phase::Ordered);
    let need = (config.train_size + config.test_size) / 2;
    if ordered.len() < need || disordered.len() < need {
        return Err(Error::Generation(format!(
            "pool has {} ordered and {} disordered snapshots, {need} of each needed",
            ordered.len(),
            disordered.len()
        )));
    }
    let mut rng = derive_rng(config.seed, "ising", "select", 0);
    ordered.shuffle(&mut rng);
    disordered.shuffle(&mut rng);
    let (ht, hs) = (config.train_size / 2, config.test_size / 2);
    let mut train: Vec<Snapshot> = ordered.drain(..ht).chain(disordered.drain(..ht)).collect();
    let mut test: Vec<Snapshot> = ordered.drain(..hs).chain(disordered.drain(..hs)).collect();
    train.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok(IsingDataset { train, test })
}

/// Ordered-labeled snapshots whose `|M|` falls below
/// `fraction · L² · ⟨M⟩(T)`: extended domain walls and other metastable
/// states.
pub fn find_domain_walls(snapshots: &[Snapshot], j: f64, fraction: f64) -> Vec<&Snapshot> {
    snapshots
        .iter()
        .filter(|s| s.label == Phase::Ordered)
        .filter(|s| {
            let l2 = (s.size * s.size) as f64;
            (magnetization(s).abs() as f64) < fraction * l2 * exact_magnetization(s.temperature, j)
        })
        .collect()
}

pub const DEFAULT_DOMAIN_WALL_FRACTION: f64 = 0.5;
