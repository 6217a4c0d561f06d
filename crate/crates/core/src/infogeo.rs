//! Diagonal Fisher information and the trajectory measures built on it:
//! FIM-weighted step magnitudes, cosine similarities between consecutive
//! steps and towards the origin, stiff/sloppy subspace splits, and
//! grokking-period detection from the step-magnitude gradient.

use std::io::Write;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{self, Architecture, Dataset, ParamVector};
use crate::numerics::softmax;
use crate::rng::derive_rng;
use crate::trainer::CheckpointSeries;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// `Σ_y p(y|x) (∂ log p(y|x))²`, one backward pass per class.
    #[default]
    ExactClassExpectation,
    /// Score of the true label only.
    EmpiricalLabel,
    /// Score of one label drawn from `p(y|x)`.
    Sampled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FimDiagonal {
    pub values: Vec<f64>,
    pub epoch: Option<usize>,
    pub estimator: Estimator,
}

impl FimDiagonal {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values sorted in decreasing order, for spectrum plots.
    pub fn spectrum(&self) -> Vec<f64> {
        let mut v = self.values.clone();
        v.sort_by(|a, b| b.total_cmp(a));
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FimConfig {
    pub estimator: Estimator,
    /// Rows drawn (without replacement) from the data; all rows if larger.
    pub samples: usize,
    pub seed: u64,
}

impl Default for FimConfig {
    fn default() -> Self {
        FimConfig { estimator: Estimator::ExactClassExpectation, samples: 512, seed: 0 }
    }
}

const FIM_CHUNK: usize = 128;

/// Row indices used for a FIM estimate.
pub fn fim_rows(n: usize, cfg: &FimConfig) -> Vec<usize> {
    if cfg.samples >= n {
        return (0..n).collect();
    }
    let mut idx = sample(&mut derive_rng(cfg.seed, "fim", "subsample", 0), n, cfg.samples).into_vec();
    idx.sort_unstable();
    idx
}

/// Diagonal of the Fisher metric averaged over the selected rows of `data`.
pub fn fim_diagonal(arch: &Architecture, params: &ParamVector, data: &Dataset, cfg: &FimConfig) -> Result<FimDiagonal> {
    let rows = fim_rows(data.len(), cfg);
    fim_diagonal_rows(arch, params, data, &rows, cfg)
}

pub fn fim_diagonal_rows(arch: &Architecture, params: &ParamVector, data: &Dataset, rows: &[usize], cfg: &FimConfig) -> Result<FimDiagonal> {
    if rows.is_empty() {
        return Err(Error::Domain("Fisher diagonal of an empty sample".into()));
    }
    let c = arch.classes;
    let mut acc = vec![0.0; params.len()];
    let mut rng = derive_rng(cfg.seed, "fim", "labels", 0);
    let (mut x, mut t) = (Vec::new(), Vec::new());
    for chunk in rows.chunks(FIM_CHUNK) {
        data.gather_into(chunk, &mut x, &mut t);
        let z = models::logits(arch, params.values(), &x)?;
        if let Some(bad) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "logits", index: chunk[bad / c] });
        }
        let probs: Vec<Vec<f64>> = z.chunks_exact(c).map(softmax).collect();
        let b = chunk.len();
        let score = |i: usize, y: usize, scale: f64, seed: &mut [f64]| {
            for (k, s) in seed[i * c..(i + 1) * c].iter_mut().enumerate() {
                let e = if k == y { 1.0 } else { 0.0 };
                *s = scale * (e - probs[i][k]);
            }
        };
        let seeds: Vec<Vec<f64>> = match cfg.estimator {
            Estimator::ExactClassExpectation => (0..c)
                .map(|y| {
                    let mut s = vec![0.0; b * c];
                    for i in 0..b {
                        score(i, y, probs[i][y].sqrt(), &mut s);
                    }
                    s
                })
                .collect(),
            Estimator::EmpiricalLabel => {
                let mut s = vec![0.0; b * c];
                for i in 0..b {
                    score(i, t[i], 1.0, &mut s);
                }
                vec![s]
            }
            Estimator::Sampled => {
                let mut s = vec![0.0; b * c];
                for i in 0..b {
                    let y = WeightedIndex::new(&probs[i])
                        .map_err(|_| Error::NonFinite { what: "class probabilities", index: chunk[i] })?
                        .sample(&mut rng);
                    score(i, y, 1.0, &mut s);
                }
                vec![s]
            }
        };
        models::accumulate_squared_grads(arch, params.values(), &x, &seeds, &mut acc)?;
        if let Some(bad) = acc.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "fisher diagonal", index: bad });
        }
    }
    let n = rows.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    Ok(FimDiagonal { values: acc, epoch: None, estimator: cfg.estimator })
}

/// Mean over rows of `KL(p_a(·|x) ‖ p_b(·|x))`.
pub fn kl_divergence(arch: &Architecture, a: &[f64], b: &[f64], input: &[f64]) -> Result<f64> {
    let c = arch.classes;
    let za = models::logits(arch, a, input)?;
    let zb = models::logits(arch, b, input)?;
    let rows = za.len() / c;
    let mut kl = 0.0;
    for (ra, rb) in za.chunks_exact(c).zip(zb.chunks_exact(c)) {
        let (la, lb) = (log_softmax(ra), log_softmax(rb));
        kl += la.iter().zip(&lb).map(|(x, y)| x.exp() * (x - y)).sum::<f64>();
    }
    Ok(kl / rows as f64)
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Optional diagonal metric: `None` is the Euclidean (identity) metric.
pub type Metric<'a> = Option<&'a [f64]>;

fn check_metric(len: usize, g: Metric) -> Result<()> {
    if let Some(g) = g {
        if g.len() != len {
            return Err(Error::dim(format!("metric of length {} for vectors of length {len}", g.len())));
        }
        if let Some(i) = g.iter().position(|v| !(*v >= 0.0)) {
            return Err(Error::Domain(format!("metric entry {i} is negative or NaN")));
        }
    }
    Ok(())
}

/// `Σ gᵢ aᵢ bᵢ` over `idx` (all coordinates when `None`).
fn inner(a: &[f64], b: &[f64], g: Metric, idx: Option<&[usize]>) -> f64 {
    match (g, idx) {
        (None, None) => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        (Some(g), None) => a.iter().zip(b).zip(g).map(|((x, y), w)| w * x * y).sum(),
        (None, Some(ix)) => ix.iter().map(|&i| a[i] * b[i]).sum(),
        (Some(g), Some(ix)) => ix.iter().map(|&i| g[i] * a[i] * b[i]).sum(),
    }
}

/// `|s|_g = √(Σ gᵢ sᵢ²)`.
pub fn step_magnitude(s: &[f64], g: Metric) -> Result<f64> {
    check_metric(s.len(), g)?;
    Ok(inner(s, s, g, None).sqrt())
}

/// `⟨s, s'⟩_g / (|s|_g |s'|_g)`, clamped to `[−1, 1]`.
pub fn cosine_similarity(s: &[f64], t: &[f64], g: Metric) -> Result<f64> {
    if s.len() != t.len() {
        return Err(Error::dim(format!("steps of lengths {} and {}", s.len(), t.len())));
    }
    check_metric(s.len(), g)?;
    cosine_on(s, t, g, None)
}

fn cosine_on(s: &[f64], t: &[f64], g: Metric, idx: Option<&[usize]>) -> Result<f64> {
    let ns = inner(s, s, g, idx);
    let nt = inner(t, t, g, idx);
    if ns == 0.0 || nt == 0.0 {
        return Err(Error::UndefinedSimilarity("zero-magnitude vector".into()));
    }
    Ok((inner(s, t, g, idx) / (ns.sqrt() * nt.sqrt())).clamp(-1.0, 1.0))
}

/// `s^e = θ^{e+f} − θ^e`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStep {
    pub epoch: usize,
    pub every: usize,
    pub step: Vec<f64>,
}

impl TrajectoryStep {
    pub fn between(epoch: usize, every: usize, from: &[f64], to: &[f64]) -> Result<Self> {
        if from.len() != to.len() {
            return Err(Error::dim("checkpoints of different lengths"));
        }
        Ok(TrajectoryStep { epoch, every, step: to.iter().zip(from).map(|(b, a)| b - a).collect() })
    }
}

/// Cosine similarity of every step with `−θ^e` (the direction to the origin),
/// with `metrics[i]` evaluated at the `i`-th checkpoint.
pub fn origin_similarity(series: &CheckpointSeries, metrics: &[Metric]) -> Result<Vec<(usize, f64)>> {
    let e = series.entries();
    if metrics.len() + 1 < e.len() {
        return Err(Error::dim("one metric per step start is needed"));
    }
    let mut out = Vec::with_capacity(e.len().saturating_sub(1));
    for (i, w) in e.windows(2).enumerate() {
        let (epoch, from) = (&w[0].0, w[0].1.values());
        let step = TrajectoryStep::between(*epoch, series.every, from, w[1].1.values())?;
        let to_origin: Vec<f64> = from.iter().map(|v| -v).collect();
        out.push((*epoch, cosine_similarity(&step.step, &to_origin, metrics[i])?));
    }
    Ok(out)
}

/// Stiff (`g ≥ threshold`) and sloppy coordinates of a final-epoch FIM.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceSplit {
    pub threshold: f64,
    pub stiff: Vec<usize>,
    pub sloppy: Vec<usize>,
}

impl SubspaceSplit {
    pub const DEFAULT_THRESHOLD: f64 = 0.1;

    pub fn from_fim(fim: &FimDiagonal, threshold: f64) -> Self {
        let (mut stiff, mut sloppy) = (Vec::new(), Vec::new());
        for (i, &g) in fim.values.iter().enumerate() {
            if g >= threshold {
                stiff.push(i);
            } else {
                sloppy.push(i);
            }
        }
        SubspaceSplit { threshold, stiff, sloppy }
    }
}

/// Measures of one step. `None` marks an undefined value (zero vector or
/// empty subspace).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub epoch: usize,
    pub fim_magnitude: f64,
    pub euclid_magnitude: f64,
    pub fim_consecutive: Option<f64>,
    pub euclid_consecutive: Option<f64>,
    pub fim_origin: Option<f64>,
    pub euclid_origin: Option<f64>,
    pub stiff_magnitude: Option<f64>,
    pub sloppy_magnitude: Option<f64>,
    pub stiff_consecutive: Option<f64>,
    pub sloppy_consecutive: Option<f64>,
    pub stiff_origin: Option<f64>,
    pub sloppy_origin: Option<f64>,
}

/// Consumes checkpoints in order, each with the FIM at that checkpoint.
///
/// Magnitudes and origin similarity of `s^e` use the metric at `θ^e`; the
/// similarity of `s^{e−f}` and `s^e` uses the metric at their shared
/// checkpoint `θ^e`.
#[derive(Debug)]
pub struct TrajectoryBuilder {
    split: Option<SubspaceSplit>,
    prev: Option<(usize, Vec<f64>, Vec<f64>)>,
    prev_step: Option<Vec<f64>>,
    records: Vec<TrajectoryRecord>,
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedSimilarity(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

impl TrajectoryBuilder {
    pub fn new(split: Option<SubspaceSplit>) -> Self {
        TrajectoryBuilder { split, prev: None, prev_step: None, records: Vec::new() }
    }

    pub fn push(&mut self, epoch: usize, params: &[f64], fim: &[f64]) -> Result<()> {
        check_metric(params.len(), Some(fim))?;
        if let Some((e0, theta0, g0)) = self.prev.take() {
            if epoch <= e0 || theta0.len() != params.len() {
                return Err(Error::State(format!("checkpoint {epoch} after {e0} is out of order or misshapen")));
            }
            let s: Vec<f64> = params.iter().zip(&theta0).map(|(b, a)| b - a).collect();
            let origin: Vec<f64> = theta0.iter().map(|v| -v).collect();
            let g = Some(&g0[..]);
            let mut r = TrajectoryRecord {
                epoch: e0,
                fim_magnitude: inner(&s, &s, g, None).sqrt(),
                euclid_magnitude: inner(&s, &s, None, None).sqrt(),
                fim_origin: defined(cosine_on(&s, &origin, g, None))?,
                euclid_origin: defined(cosine_on(&s, &origin, None, None))?,
                ..Default::default()
            };
            if let Some(prev) = &self.prev_step {
                r.fim_consecutive = defined(cosine_on(prev, &s, g, None))?;
                r.euclid_consecutive = defined(cosine_on(prev, &s, None, None))?;
            }
            if let Some(split) = &self.split {
                for (idx, mag, cons, orig) in [
                    (&split.stiff, &mut r.stiff_magnitude, &mut r.stiff_consecutive, &mut r.stiff_origin),
                    (&split.sloppy, &mut r.sloppy_magnitude, &mut r.sloppy_consecutive, &mut r.sloppy_origin),
                ] {
                    if idx.is_empty() {
                        continue;
                    }
                    *mag = Some(inner(&s, &s, g, Some(idx)).sqrt());
                    *orig = defined(cosine_on(&s, &origin, g, Some(idx)))?;
                    if let Some(prev) = &self.prev_step {
                        *cons = defined(cosine_on(prev, &s, g, Some(idx)))?;
                    }
                }
            }
            // the consecutive similarity for the *previous* step pair used g at θ^e0,
            // which is exactly the shared checkpoint of (s^{e0−f}, s^{e0})
            self.records.push(r);
            self.prev_step = Some(s);
        }
        self.prev = Some((epoch, params.to_vec(), fim.to_vec()));
        Ok(())
    }

    pub fn records(&self) -> &[TrajectoryRecord] {
        &self.records
    }

    pub fn finish(self) -> Vec<TrajectoryRecord> {
        self.records
    }
}

/// Trajectory measures over an in-memory series. `fim_at` computes the
/// metric at a checkpoint.
pub fn split_measures(
    series: &CheckpointSeries,
    split: Option<SubspaceSplit>,
    mut fim_at: impl FnMut(&ParamVector) -> Result<FimDiagonal>,
) -> Result<Vec<TrajectoryRecord>> {
    let mut b = TrajectoryBuilder::new(split);
    for (epoch, p) in series.entries() {
        let g = fim_at(p)?;
        b.push(*epoch, p.values(), &g.values)?;
    }
    Ok(b.finish())
}

/// Sign-change bracket `(e_lo, e_hi)` of the forward difference.
pub type Bracket = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrokkingPeriod {
    /// First significant minimum of the magnitude series.
    pub start: Option<Bracket>,
    /// First significant maximum after it.
    pub end: Option<Bracket>,
    /// Fewer than two roots were found.
    pub partial: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pivot {
    Min(usize),
    Max(usize),
}

/// Zig-zag pivots: turning points whose swing on both sides is at least
/// `min_swing`.
fn pivots(v: &[f64], min_swing: f64) -> Vec<Pivot> {
    let mut out = Vec::new();
    let (mut lo, mut hi) = (0usize, 0usize);
    // 1: rising (tracking a max), -1: falling (tracking a min), 0: undecided
    let mut dir = 0i8;
    for i in 1..v.len() {
        match dir {
            0 => {
                if v[i] > v[hi] {
                    hi = i;
                }
                if v[i] < v[lo] {
                    lo = i;
                }
                if v[hi] - v[lo] >= min_swing && min_swing > 0.0 {
                    if hi > lo {
                        out.push(Pivot::Min(lo));
                        dir = 1;
                    } else {
                        out.push(Pivot::Max(hi));
                        dir = -1;
                    }
                }
            }
            1 => {
                if v[i] > v[hi] {
                    hi = i;
                } else if v[hi] - v[i] >= min_swing {
                    out.push(Pivot::Max(hi));
                    dir = -1;
                    lo = i;
                }
            }
            _ => {
                if v[i] < v[lo] {
                    lo = i;
                } else if v[i] - v[lo] >= min_swing {
                    out.push(Pivot::Min(lo));
                    dir = 1;
                    hi = i;
                }
            }
        }
    }
    // a turning point must have neighbours on both sides
    out.retain(|p| matches!(p, Pivot::Min(i) | Pivot::Max(i) if *i > 0 && *i + 1 < v.len()));
    out
}

/// Locates the grokking period in a step-magnitude series sampled at
/// `epochs`: the first significant minimum (start) and the next significant
/// maximum (end). A turning point at sample `j` is a sign change of the
/// forward difference between samples `j−1` and `j`, reported as
/// `(epochs[j−1], epochs[j])`. Swings smaller than `min_fraction` of the
/// series range are ignored.
pub fn grokking_period_roots(epochs: &[usize], magnitude: &[f64], min_fraction: f64) -> Result<GrokkingPeriod> {
    if epochs.len() != magnitude.len() {
        return Err(Error::dim("epochs and magnitudes differ in length"));
    }
    if magnitude.len() < 3 {
        return Err(Error::Domain("root detection needs at least 3 samples".into()));
    }
    let (mn, mx) = magnitude.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let piv = pivots(magnitude, min_fraction * (mx - mn));
    let bracket = |j: usize| (epochs[j - 1], epochs[j]);
    let start_pos = piv.iter().position(|p| matches!(p, Pivot::Min(_)));
    let start = start_pos.map(|k| match piv[k] {
        Pivot::Min(j) | Pivot::Max(j) => bracket(j),
    });
    let end = start_pos.and_then(|k| {
        piv[k + 1..].iter().find_map(|p| match p {
            Pivot::Max(j) => Some(bracket(*j)),
            Pivot::Min(_) => None,
        })
    });
    Ok(GrokkingPeriod { start, end, partial: start.is_none() || end.is_none() })
}

pub fn write_spectrum_csv<W: Write>(w: W, fim: &FimDiagonal) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["rank", "value"])?;
    for (i, v) in fim.spectrum().iter().enumerate() {
        out.write_record([i.to_string(), v.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_trajectory_csv<W: Write>(w: W, records: &[TrajectoryRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_period_csv<W: Write>(w: W, period: &GrokkingPeriod) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["root", "epoch_lo", "epoch_hi"])?;
    for (name, b) in [("start", period.start), ("end", period.end)] {
        match b {
            Some((lo, hi)) => out.write_record([name.to_string(), lo.to_string(), hi.to_string()])?,
            None => out.write_record([name, "", ""])?,
        }
    }
    out.flush()?;
    Ok(())
}
