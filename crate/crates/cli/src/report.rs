//! Cross-run tables over an output directory.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use grokking_core::compress::{self, CorrelationRow, RunProperties};
use serde::{Deserialize, Serialize};

use crate::analyze::{FimSummary, InterpSummary, COMPRESSIBILITY_CSV, FIM_JSON, INTERP_JSON};
use crate::manifest::MANIFEST;
use crate::run::{RunReport, REPORT_FILE};

pub const RUNS_CSV: &str = "runs.csv";
pub const CORRELATES_CSV: &str = "compressibility_correlates.csv";

/// One row of `runs.csv`; analysis columns are NaN when not computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run: String,
    pub seed: u64,
    pub w0: f64,
    pub verdict: String,
    pub final_train_acc: f64,
    pub final_test_acc: f64,
    pub compressibility: f64,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub ipr_embedding: f64,
    pub ipr_unembedding: f64,
    pub weight_gini: f64,
    pub fisher_gini: f64,
    pub t_grok: f64,
}

impl RunRow {
    pub fn props(&self) -> RunProperties {
        RunProperties {
            compressibility: self.compressibility,
            final_train_loss: self.final_train_loss,
            final_test_loss: self.final_test_loss,
            ipr_embedding: self.ipr_embedding,
            ipr_unembedding: self.ipr_unembedding,
            weight_gini: self.weight_gini,
            fisher_gini: self.fisher_gini,
            t_grok: self.t_grok,
        }
    }
}

#[derive(Debug, Deserialize)]
struct CompressibilityLine {
    scheme: String,
    c: f64,
}

/// Run directories under `root`, sorted by name.
pub fn run_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("listing {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).exists() && p.join(REPORT_FILE).exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    let bytes = fs::read(path)?;
    Ok(Some(serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?))
}

fn parallel_compressibility(dir: &Path) -> Result<f64> {
    let path = dir.join(COMPRESSIBILITY_CSV);
    if !path.exists() {
        return Ok(f64::NAN);
    }
    let mut rdr = csv::Reader::from_path(&path)?;
    for line in rdr.deserialize::<CompressibilityLine>() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.scheme == "parallel" {
            return Ok(line.c);
        }
    }
    Ok(f64::NAN)
}

pub fn collect(root: &Path) -> Result<Vec<RunRow>> {
    let mut rows = Vec::new();
    for dir in run_dirs(root)? {
        let report: RunReport = read_json(&dir.join(REPORT_FILE))?.expect("listed runs have a report");
        let interp: Option<InterpSummary> = read_json(&dir.join(INTERP_JSON))?;
        let fim: Option<FimSummary> = read_json(&dir.join(FIM_JSON))?;
        let r = &report.row;
        let interp_value = |f: fn(&InterpSummary) -> Option<f64>| interp.as_ref().and_then(f).unwrap_or(f64::NAN);
        rows.push(RunRow {
            run: dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            seed: r.seed,
            w0: r.w0,
            verdict: format!("{:?}", report.grokking.verdict).to_lowercase(),
            final_train_acc: r.final_train_acc,
            final_test_acc: r.final_test_acc,
            compressibility: parallel_compressibility(&dir)?,
            final_train_loss: r.final_train_loss,
            final_test_loss: r.final_test_loss,
            ipr_embedding: interp_value(|i| i.ipr_embedding),
            ipr_unembedding: interp_value(|i| i.ipr_unembedding),
            weight_gini: interp_value(|i| Some(i.weight_gini)),
            fisher_gini: fim.as_ref().map_or(f64::NAN, |f| f.fisher_gini),
            t_grok: report.grokking.t_grok as f64,
        });
    }
    Ok(rows)
}

/// Writes `runs.csv` and, given at least three runs with a compressibility,
/// `compressibility_correlates.csv` into `out`.
pub fn report(root: &Path, out: &Path) -> Result<(Vec<RunRow>, Option<Vec<CorrelationRow>>)> {
    let rows = collect(root)?;
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(out.join(RUNS_CSV))?));
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let props: Vec<RunProperties> = rows.iter().map(RunRow::props).filter(|p| p.compressibility.is_finite()).collect();
    let correlates = if props.len() >= 3 {
        let c = compress::compressibility_correlates(&props)?;
        compress::write_correlations_csv(BufWriter::new(File::create(out.join(CORRELATES_CSV))?), &c)?;
        Some(c)
    } else {
        None
    };
    Ok((rows, correlates))
}
