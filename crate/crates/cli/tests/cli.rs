use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sde_core::data::SeriesTable;
use sde_core::diagnostics::{median, ProbeReport};

fn sde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sde")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = r#"
lookback = 24
horizon = 8

[data]
source = "synthetic"
kind = "order"
length = 600
n_vars = 2
noise = 1.0
seed = 3

[model]
kind = "sde"
lookback = 24
horizon = 8
patch_len = 8
stride = 4
d_model = 8
d_state = 4
variant = "full"
backbone = "s_mamba"

[train]
lr = 1e-3
max_epochs = 2
max_batches_per_epoch = 4
"#;

fn manifest_outputs(dir: &Path) -> toml::Value {
    let text = std::fs::read_to_string(dir.join("manifest.toml")).unwrap();
    toml::from_str::<toml::Value>(&text).unwrap()["outputs"].clone()
}

#[test]
fn generate_writes_a_loadable_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = sde(&["generate", "--kind", "cross_variate", "--n", "8", "--length", "20000", "--seed", "7", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let t = SeriesTable::load_csv(out.join("cross_variate.csv")).unwrap();
    assert_eq!((t.rows(), t.n_vars()), (20000, 8));
    assert!(out.join("manifest.toml").exists());
}

#[test]
fn train_twice_gives_identical_checkpoint_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = sde(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seeds", "2", "--jobs", "2"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (ma, mb) = (manifest_outputs(&a), manifest_outputs(&b));
    assert_eq!(ma, mb);
    let paths: Vec<&str> = ma.as_array().unwrap().iter().map(|e| e["path"].as_str().unwrap()).collect();
    assert!(paths.contains(&"seed1/checkpoint.sde"), "{paths:?}");
}

#[test]
fn evaluate_reads_a_trained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run = dir.path().join("run");
    assert!(sde(&["train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]).status.success());
    let ckpt = run.join("seed0/checkpoint.sde");
    let eval_dir = dir.path().join("eval");
    let o = sde(&["evaluate", "--config", cfg.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--out", eval_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let eval: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(eval_dir.join("evaluation.json")).unwrap()).unwrap();
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(eval["test"], metrics[0]["test"]);
}

#[test]
fn shuffle_report_median_matches_per_seed_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("probe");
    let o = sde(&["diagnose", "shuffle", "--config", cfg.to_str().unwrap(), "--seeds", "5", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = ProbeReport::from_json(&std::fs::read_to_string(out.join("shuffle.json")).unwrap()).unwrap();
    assert_eq!(r.seeds.len(), 5);
    let drops: Vec<f64> = r
        .seeds
        .iter()
        .map(|s| (s.arms[1].test.mse - s.arms[0].test.mse) / s.arms[0].test.mse * 100.0)
        .collect();
    for (d, s) in drops.iter().zip(&r.seeds) {
        assert!((d - s.relative_pct[0]).abs() <= 1e-9 * d.abs().max(1.0));
    }
    let m = median(&drops);
    assert!((m - r.medians["shuffled.relative_pct"]).abs() <= 1e-9 * m.abs().max(1.0));
    assert!(out.join("shuffle.csv").exists());

    let agg = dir.path().join("agg");
    let o = sde(&["report", out.join("shuffle.json").to_str().unwrap(), "--out", agg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(agg.join("report.csv")).unwrap();
    assert!(table.contains("shuffled.relative_pct"));
}

#[test]
fn mi_probe_reports_significance() {
    let dir = tempfile::tempdir().unwrap();
    let body = SMALL.replace("kind = \"order\"\nlength = 600", "kind = \"order\"\nlength = 5000");
    let cfg = write_config(dir.path(), &body);
    let out = dir.path().join("mi");
    let o = sde(&["diagnose", "mi", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("mi.json")).unwrap()).unwrap();
    assert_eq!(r["checks"].as_array().unwrap().len(), 2);
    assert_eq!(r["checks"][0]["significant"], true);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = sde(&["train", "--config", "x.toml", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.starts_with("error[usage]:"), "{err}");
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}\nwarp_speed = 9\n"));
    let o = sde(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("warp_speed"));
}

#[test]
fn runtime_failure_exits_one_with_category() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let run = dir.path().join("run");
    assert!(sde(&["train", "--config", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()]).status.success());
    let bogus = run.join("seed0/checkpoint.sde");
    let mut bytes = std::fs::read(&bogus).unwrap();
    *bytes.last_mut().unwrap() ^= 0x01;
    std::fs::write(&bogus, bytes).unwrap();
    let o = sde(&["evaluate", "--config", cfg.to_str().unwrap(), "--checkpoint", bogus.to_str().unwrap(), "--out", dir.path().join("e").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.starts_with("error[integrity]:"), "{err}");
}

#[test]
fn efficiency_one_point_sweep_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}\n[probe.efficiency]\nvalues = [3]\n"));
    let o = sde(&["diagnose", "efficiency", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("e").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[invalid_input]:"), "{}", stderr(&o));
}
