//! Unstructured pruning, pruning curves, and the compressibility functional
//! `c = 1/(1 − ∫a(p)dp)`.
//!
//! Only weights are ever pruned; biases are left intact. Every scheme is an
//! ordering of weight indices plus a count, so a curve reuses one ordering
//! for all grid points and each point starts from a fresh copy.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infogeo::FimDiagonal;
use crate::interp::pearson;
use crate::models::{self, Architecture, Dataset, ParamVector};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "layer")]
pub enum Scheme {
    /// Smallest `p` fraction of `|w|` within every layer.
    Parallel,
    /// Smallest `p` fraction of `|w|` over all layers jointly.
    Global,
    /// As `Global`, ranking `|w| / ‖W_layer‖`.
    GlobalRescaled,
    /// Only the named layer.
    Layer(String),
    /// Smallest Fisher-diagonal values over all weights.
    FisherWhole,
    /// Smallest Fisher-diagonal values within the named layer.
    FisherLayer(String),
}

impl Scheme {
    pub fn tag(&self) -> String {
        match self {
            Scheme::Parallel => "parallel".into(),
            Scheme::Global => "global".into(),
            Scheme::GlobalRescaled => "global_rescaled".into(),
            Scheme::Layer(l) => format!("layer:{l}"),
            Scheme::FisherWhole => "fisher".into(),
            Scheme::FisherLayer(l) => format!("fisher:{l}"),
        }
    }

    pub fn parse(tag: &str) -> Result<Scheme> {
        Ok(match tag {
            "parallel" => Scheme::Parallel,
            "global" => Scheme::Global,
            "global_rescaled" => Scheme::GlobalRescaled,
            "fisher" => Scheme::FisherWhole,
            t => match t.split_once(':') {
                Some(("layer", l)) => Scheme::Layer(l.to_string()),
                Some(("fisher", l)) => Scheme::FisherLayer(l.to_string()),
                _ => return Err(Error::Config(format!("unknown pruning scheme {tag:?}"))),
            },
        })
    }

    fn needs_fim(&self) -> bool {
        matches!(self, Scheme::FisherWhole | Scheme::FisherLayer(_))
    }
}

/// Weight indices in pruning order, grouped so that a fraction `p` removes
/// `⌊p·len⌋` indices from the front of every group.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneOrder {
    groups: Vec<Vec<usize>>,
}

fn check_fraction(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Domain(format!("pruning fraction {p} outside [0, 1]")))
    }
}

struct Keyed {
    score: f64,
    tie: (usize, usize),
    index: usize,
}

fn sorted(mut v: Vec<Keyed>) -> Vec<usize> {
    v.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.tie.cmp(&b.tie)));
    v.into_iter().map(|k| k.index).collect()
}

fn magnitude_group(params: &ParamVector, layer: usize) -> Vec<usize> {
    let l = &params.layers()[layer];
    sorted(
        l.weight
            .clone()
            .map(|i| Keyed { score: params.values()[i].abs(), tie: (i, 0), index: i })
            .collect(),
    )
}

fn layer_index(params: &ParamVector, name: &str) -> Result<usize> {
    params
        .layers()
        .iter()
        .position(|l| l.name == name)
        .ok_or_else(|| Error::UnknownLayer(name.to_string()))
}

impl PruneOrder {
    pub fn new(params: &ParamVector, scheme: &Scheme, fim: Option<&FimDiagonal>) -> Result<Self> {
        if scheme.needs_fim() {
            match fim {
                Some(f) if f.values.len() == params.len() => {}
                Some(f) => return Err(Error::dim(format!("FIM of length {} for {} parameters", f.values.len(), params.len()))),
                None => return Err(Error::Config(format!("scheme {} needs a Fisher diagonal", scheme.tag()))),
            }
        }
        let groups = match scheme {
            Scheme::Parallel => (0..params.layers().len()).map(|l| magnitude_group(params, l)).collect(),
            Scheme::Layer(name) => vec![magnitude_group(params, layer_index(params, name)?)],
            Scheme::Global | Scheme::GlobalRescaled => {
                let rescaled = *scheme == Scheme::GlobalRescaled;
                let mut keyed = Vec::new();
                for (li, l) in params.layers().iter().enumerate() {
                    let w = params.weights(l);
                    let norm = if rescaled { w.iter().map(|v| v * v).sum::<f64>().sqrt() } else { 1.0 };
                    for (pos, (i, v)) in l.weight.clone().zip(w).enumerate() {
                        let score = if norm > 0.0 { v.abs() / norm } else { 0.0 };
                        // ties: position within the layer first, then layer order
                        keyed.push(Keyed { score, tie: (pos, li), index: i });
                    }
                }
                vec![sorted(keyed)]
            }
            Scheme::FisherWhole | Scheme::FisherLayer(_) => {
                let g = &fim.expect("checked above").values;
                let ranges = match scheme {
                    Scheme::FisherLayer(name) => vec![params.layers()[layer_index(params, name)?].weight.clone()],
                    _ => params.weight_ranges(),
                };
                let keyed = ranges.into_iter().flatten().map(|i| Keyed { score: g[i], tie: (i, 0), index: i }).collect();
                vec![sorted(keyed)]
            }
        };
        Ok(PruneOrder { groups })
    }

    /// Zeroes `⌊p·n⌋` leading indices of every group on a copy of `params`.
    pub fn apply(&self, params: &ParamVector, p: f64) -> Result<ParamVector> {
        check_fraction(p)?;
        let mut out = params.clone();
        let v = out.values_mut();
        for g in &self.groups {
            let k = prune_count(g.len(), p);
            for &i in &g[..k] {
                v[i] = 0.0;
            }
        }
        Ok(out)
    }
}

/// `⌊p·n⌋`, robust to representation error in `p`.
pub fn prune_count(n: usize, p: f64) -> usize {
    ((p * n as f64) * (1.0 + 1e-12)).floor().min(n as f64) as usize
}

pub fn prune_parallel(params: &ParamVector, p: f64) -> Result<ParamVector> {
    PruneOrder::new(params, &Scheme::Parallel, None)?.apply(params, p)
}

pub fn prune_global(params: &ParamVector, p: f64, rescaled: bool) -> Result<ParamVector> {
    let scheme = if rescaled { Scheme::GlobalRescaled } else { Scheme::Global };
    PruneOrder::new(params, &scheme, None)?.apply(params, p)
}

pub fn prune_layer(params: &ParamVector, layer: &str, p: f64) -> Result<ParamVector> {
    PruneOrder::new(params, &Scheme::Layer(layer.to_string()), None)?.apply(params, p)
}

/// Scope of Fisher pruning: all weights, or one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FisherScope {
    Whole,
    Layer(String),
}

pub fn fisher_prune(params: &ParamVector, fim: &FimDiagonal, p: f64, scope: &FisherScope) -> Result<ParamVector> {
    let scheme = match scope {
        FisherScope::Whole => Scheme::FisherWhole,
        FisherScope::Layer(l) => Scheme::FisherLayer(l.clone()),
    };
    PruneOrder::new(params, &scheme, Some(fim))?.apply(params, p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub p: f64,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruningCurve {
    pub scheme: Scheme,
    pub points: Vec<CurvePoint>,
}

/// `{0, 0.02, …, 1}`.
pub fn default_grid() -> Vec<f64> {
    (0..=50).map(|i| i as f64 / 50.0).collect()
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.first() != Some(&0.0) || grid.last() != Some(&1.0) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain("grid must increase strictly from 0 to 1".into()));
    }
    Ok(())
}

/// Test accuracy and loss after pruning each grid fraction, each from the
/// unpruned parameters.
pub fn pruning_curve(
    arch: &Architecture,
    params: &ParamVector,
    test_set: &Dataset,
    scheme: &Scheme,
    fim: Option<&FimDiagonal>,
    grid: &[f64],
) -> Result<PruningCurve> {
    check_grid(grid)?;
    let order = PruneOrder::new(params, scheme, fim)?;
    let points = grid
        .par_iter()
        .map(|&p| {
            let q = order.apply(params, p)?;
            let m = models::evaluate(arch, q.values(), test_set)?;
            Ok(CurvePoint { p, accuracy: m.accuracy, loss: m.loss })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PruningCurve { scheme: scheme.clone(), points })
}

/// Identifies the run a report came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunId {
    pub w0: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressibilityReport {
    pub scheme: Scheme,
    /// `∫a(p)dp` by the trapezoidal rule.
    pub integrated_accuracy: f64,
    pub compressibility: f64,
    pub run: RunId,
}

pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(xs, ys)| (xs[1] - xs[0]) * (ys[0] + ys[1]) / 2.0).sum()
}

pub fn compressibility(curve: &PruningCurve, run: RunId) -> Result<CompressibilityReport> {
    let grid: Vec<f64> = curve.points.iter().map(|c| c.p).collect();
    check_grid(&grid)?;
    let acc: Vec<f64> = curve.points.iter().map(|c| c.accuracy).collect();
    let a = trapezoid(&grid, &acc);
    if !(a < 1.0) {
        return Err(Error::Domain(format!("integrated accuracy {a} leaves no room below 1")));
    }
    Ok(CompressibilityReport { scheme: curve.scheme.clone(), integrated_accuracy: a, compressibility: 1.0 / (1.0 - a), run })
}

/// Per-run properties correlated against compressibility.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunProperties {
    pub compressibility: f64,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub ipr_embedding: f64,
    pub ipr_unembedding: f64,
    pub weight_gini: f64,
    pub fisher_gini: f64,
    pub t_grok: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub property: String,
    pub r: f64,
    pub n: usize,
    /// Column was constant (or had non-finite entries); `r` is recorded as 0.
    pub flagged: bool,
}

pub fn compressibility_correlates(runs: &[RunProperties]) -> Result<Vec<CorrelationRow>> {
    if runs.len() < 3 {
        return Err(Error::Domain(format!("{} runs; at least 3 are needed", runs.len())));
    }
    let c: Vec<f64> = runs.iter().map(|r| r.compressibility).collect();
    let columns: [(&str, fn(&RunProperties) -> f64); 7] = [
        ("final_train_loss", |r| r.final_train_loss),
        ("final_test_loss", |r| r.final_test_loss),
        ("ipr_embedding", |r| r.ipr_embedding),
        ("ipr_unembedding", |r| r.ipr_unembedding),
        ("weight_gini", |r| r.weight_gini),
        ("fisher_gini", |r| r.fisher_gini),
        ("t_grok", |r| r.t_grok),
    ];
    columns
        .iter()
        .map(|(name, f)| {
            let col: Vec<f64> = runs.iter().map(f).collect();
            let (r, flagged) = if col.iter().chain(&c).all(|v| v.is_finite()) {
                match pearson(&col, &c) {
                    Ok(r) => (r, false),
                    Err(Error::UndefinedCorrelation(_)) => (0.0, true),
                    Err(e) => return Err(e),
                }
            } else {
                (0.0, true)
            };
            Ok(CorrelationRow { property: name.to_string(), r, n: runs.len(), flagged })
        })
        .collect()
}

pub fn write_curves_csv<W: Write>(w: W, curves: &[PruningCurve]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["scheme", "p", "acc", "loss"])?;
    for c in curves {
        for pt in &c.points {
            out.write_record([c.scheme.tag(), pt.p.to_string(), pt.accuracy.to_string(), pt.loss.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_compressibility_csv<W: Write>(w: W, reports: &[CompressibilityReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["scheme", "a", "c", "w0", "weight_decay", "batch_size", "seed"])?;
    for r in reports {
        out.write_record([
            r.scheme.tag(),
            r.integrated_accuracy.to_string(),
            r.compressibility.to_string(),
            r.run.w0.to_string(),
            r.run.weight_decay.to_string(),
            r.run.batch_size.to_string(),
            r.run.seed.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_correlations_csv<W: Write>(w: W, rows: &[CorrelationRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
