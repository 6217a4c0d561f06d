use std::fs;
use std::path::Path;
use std::process::Command;

use grokking_cli::analyze::{analyze, checkpoint_files, Analysis};
use grokking_cli::config::{ExperimentConfig, Preset};
use grokking_cli::manifest::{digest_file, RunManifest};
use grokking_cli::{report, run};
use grokking_core::ising::temperature_grid;
use grokking_core::models::Task;
use grokking_core::trainer::TrainingTrace;

fn modadd(out: &Path, extra: &[&str]) -> ExperimentConfig {
    let mut over = vec![
        format!("output_dir={:?}", out.to_string_lossy()),
        "modadd.modulus=11".into(),
        "train.epochs=30".into(),
        "train.batch_size=16".into(),
        "train.checkpoint_every=3".into(),
        "analysis.fim_samples=32".into(),
    ];
    over.extend(extra.iter().map(|s| s.to_string()));
    ExperimentConfig::parse("", Preset::Table1, &over).unwrap()
}

fn ising(out: &Path) -> ExperimentConfig {
    let temps: Vec<String> = temperature_grid(1.0, 6).iter().map(|t| format!("{t:?}")).collect();
    let over = vec![
        "task=\"ising\"".to_string(),
        format!("output_dir={:?}", out.to_string_lossy()),
        "ising.size=4".into(),
        format!("ising.temperatures=[{}]", temps.join(",")),
        "ising.snapshots_per_temperature=20".into(),
        "ising.mc_steps=400".into(),
        "ising.train_size=20".into(),
        "ising.test_size=20".into(),
        "train.epochs=20".into(),
        "train.batch_size=10".into(),
        "train.checkpoint_every=5".into(),
        "analysis.fim_samples=16".into(),
    ];
    ExperimentConfig::parse("", Preset::Table1, &over).unwrap()
}

#[test]
fn train_writes_a_complete_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = modadd(tmp.path(), &["train.checkpoint_until=12"]);
    let (dir, report) = run::train(&cfg).unwrap();
    assert_eq!(dir, tmp.path().join("modadd-w1-s0"));
    let trace = TrainingTrace::read_csv(fs::File::open(dir.join("trace.csv")).unwrap()).unwrap();
    assert_eq!(trace.len(), 30);
    assert_eq!(report.row.final_test_acc, trace.last().unwrap().test_acc);
    // epochs 0, 3, 6, 9, 12
    assert_eq!(checkpoint_files(&dir).unwrap().len(), 5);
    let m = RunManifest::read(&dir).unwrap();
    m.verify(&dir).unwrap();
    for f in ["config.toml", "trace.csv", "final.gkpt", "report.json", "checkpoints/epoch-0000012.gkpt"] {
        assert!(m.entry(f).is_some(), "{f} missing from manifest");
    }
    let saved = ExperimentConfig::load(&dir.join("config.toml"), Preset::Table1, &[]).unwrap();
    assert_eq!(saved, cfg);
}

#[test]
fn train_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (da, _) = run::train(&modadd(a.path(), &[])).unwrap();
    let (db, _) = run::train(&modadd(b.path(), &[])).unwrap();
    for f in ["trace.csv", "final.gkpt", "checkpoints/epoch-0000015.gkpt"] {
        assert_eq!(digest_file(&da.join(f)).unwrap(), digest_file(&db.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_rejects_multi_cell_configs() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(run::train(&modadd(tmp.path(), &["seeds=[0, 1]"])).is_err());
}

#[test]
fn tampering_is_detected() {
    let tmp = tempfile::tempdir().unwrap();
    let (dir, _) = run::train(&modadd(tmp.path(), &[])).unwrap();
    let m = RunManifest::read(&dir).unwrap();
    fs::write(dir.join("trace.csv"), "epoch\n").unwrap();
    assert!(m.verify(&dir).is_err());
    fs::remove_file(dir.join("trace.csv")).unwrap();
    assert!(m.verify(&dir).is_err());
}

#[test]
fn sweep_resumes_from_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = modadd(tmp.path(), &["seeds=[0, 1]", "w0_grid=[0.5, 4.0]", "train.checkpoint_every=0"]);
    let (summary, stats) = run::sweep(&cfg).unwrap();
    assert_eq!(summary.rows.len(), 4);
    assert_eq!(stats, run::SweepStats { trained: 4, resumed: 0, failed: 0 });
    let first = fs::read_to_string(tmp.path().join(run::SWEEP_CSV)).unwrap();
    assert_eq!(first.lines().count(), 5);

    // one cell damaged, one cell from a different config
    fs::write(tmp.path().join("modadd-w4-s1/final.gkpt"), b"junk").unwrap();
    fs::write(tmp.path().join("modadd-w0.5-s1/config.toml"), b"task = \"modadd\"").unwrap();
    let mut m = RunManifest::read(&tmp.path().join("modadd-w0.5-s1")).unwrap();
    m.record(&tmp.path().join("modadd-w0.5-s1"), "config.toml").unwrap();
    m.config_hash = "0".repeat(64);
    m.write(&tmp.path().join("modadd-w0.5-s1")).unwrap();

    let (again, stats) = run::sweep(&cfg).unwrap();
    assert_eq!(stats, run::SweepStats { trained: 2, resumed: 2, failed: 0 });
    assert_eq!(again, summary);
    assert_eq!(fs::read_to_string(tmp.path().join(run::SWEEP_CSV)).unwrap(), first);
    let agg = fs::read_to_string(tmp.path().join(run::SWEEP_AGGREGATE_CSV)).unwrap();
    assert_eq!(agg.lines().count(), 3);
}

#[test]
fn sweep_records_failed_cells() {
    let tmp = tempfile::tempdir().unwrap();
    // a batch larger than the training set fails validation inside the cell
    let cfg = modadd(tmp.path(), &["seeds=[0, 1]", "train.batch_size=5000", "train.checkpoint_every=0"]);
    let (summary, stats) = run::sweep(&cfg).unwrap();
    assert_eq!(stats.failed, 2);
    assert!(summary.rows.iter().all(|r| r.error.is_some()));
}

#[test]
fn analyses_write_their_exports_and_are_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = modadd(tmp.path(), &["w0_grid=[4.0]", "analysis.prune=[\"parallel\", \"global\", \"fisher:fc1\"]"]);
    let (dir, _) = run::train(&cfg).unwrap();
    let files = analyze(&dir, None).unwrap();
    for f in [
        "analysis/ipr.csv",
        "analysis/fourier_power.csv",
        "analysis/interp.json",
        "analysis/pruning_curves.csv",
        "analysis/compressibility.csv",
        "analysis/fim_spectrum.csv",
        "analysis/trajectory.csv",
        "analysis/grokking_period.csv",
    ] {
        assert!(files.iter().any(|x| x == f), "{f} not written");
    }
    let curves = fs::read_to_string(dir.join("analysis/pruning_curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 3 * 51);
    // 11 checkpoints at epochs 0..=30 give 10 steps
    assert_eq!(fs::read_to_string(dir.join("analysis/trajectory.csv")).unwrap().lines().count(), 11);

    let before = RunManifest::read(&dir).unwrap();
    before.verify(&dir).unwrap();
    analyze(&dir, None).unwrap();
    let after = RunManifest::read(&dir).unwrap();
    assert_eq!(before.files, after.files);
}

#[test]
fn trajectory_without_checkpoints_is_a_dependency_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (dir, _) = run::train(&modadd(tmp.path(), &["train.checkpoint_every=0"])).unwrap();
    let err = analyze(&dir, Some(&[Analysis::Trajectory])).unwrap_err();
    assert!(err.to_string().contains("checkpoints"), "{err}");
    assert!(analyze(&dir, Some(&[Analysis::Prune])).is_ok());
}

#[test]
fn report_correlates_compressibility_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = modadd(tmp.path(), &["seeds=[0, 1]", "w0_grid=[0.5, 4.0]", "train.checkpoint_every=0"]);
    run::sweep(&cfg).unwrap();
    for d in report::run_dirs(tmp.path()).unwrap() {
        analyze(&d, Some(&[Analysis::Prune, Analysis::Interp, Analysis::Fim])).unwrap();
    }
    let out = tmp.path().join("report");
    let (rows, corr) = report::report(tmp.path(), &out).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.compressibility >= 1.0 && r.ipr_embedding.is_finite()));
    let corr = corr.unwrap();
    assert_eq!(corr.len(), 7);
    assert!(corr.iter().all(|c| (-1.0..=1.0).contains(&c.r)));
    assert!(out.join(report::CORRELATES_CSV).exists());
}

#[test]
fn ising_dataset_generation_and_training() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ising(tmp.path());
    let data = run::gen_ising(&cfg, false).unwrap();
    let train = digest_file(&data.join("train.isng")).unwrap();
    run::gen_ising(&cfg, true).unwrap();
    assert_eq!(digest_file(&data.join("train.isng")).unwrap(), train);

    let loaded = run::load_data(&cfg).unwrap();
    assert_eq!((loaded.train.len(), loaded.test.len()), (20, 20));

    let (dir, _) = run::train(&cfg).unwrap();
    let files = analyze(&dir, Some(&[Analysis::Interp, Analysis::Trajectory])).unwrap();
    assert!(files.iter().any(|f| f == "analysis/correlations.csv"));

    let mut other = cfg.clone();
    other.ising.seed = 9;
    assert!(run::load_data(&other).is_err());
}

#[test]
fn bad_temperature_range_fails_before_any_work() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let status = Command::new(env!("CARGO_BIN_EXE_grokking-lab"))
        .args(["gen-ising", "--task", "ising", "--output-dir"])
        .arg(&out)
        .args(["--set", "ising.temperatures=[0.5, 1.0]"])
        .output()
        .unwrap();
    assert!(!status.status.success());
    assert!(String::from_utf8_lossy(&status.stderr).contains("temperature"));
    assert!(!out.exists());
}

#[test]
fn binary_prints_effective_config() {
    let out = Command::new(env!("CARGO_BIN_EXE_grokking-lab"))
        .args(["config", "--task", "ising", "--preset", "desk", "--seeds", "1,2", "--w0", "1,10"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let cfg = ExperimentConfig::parse(&String::from_utf8(out.stdout).unwrap(), Preset::Table1, &[]).unwrap();
    assert_eq!(cfg.task, Task::Ising);
    assert_eq!(cfg.train.epochs, 20_000);
    assert_eq!(cfg.seeds, vec![1, 2]);
    assert_eq!(cfg.w0_grid, vec![1.0, 10.0]);
}

#[test]
fn worker_variable_is_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_grokking-lab"))
        .env(run::WORKERS_ENV, "zero")
        .args(["sweep", "--set", "modadd.modulus=5", "--set", "train.epochs=1", "--set", "train.batch_size=4", "--output-dir"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(run::WORKERS_ENV));
}
