use std::path::{Path, PathBuf};

use sde_core::checkpoint::Checkpoint;
use sde_core::data::{SyntheticKind, SyntheticSpec};
use sde_core::diagnostics::{
    activation_ablation, aggregate, dependency_significance, disentangled_vs_ttv, efficiency_benchmark, map_seeds,
    order_probe, patching_probe, DataSource, EfficiencyConfig, ProbeOptions, ProbeReport,
};
use sde_core::model::{Forecaster, ModelSpec};
use sde_core::train::{evaluate, Metrics, TrainConfig};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;
use crate::{Command, Kind, Probe, RunArgs};

pub fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Generate { kind, n, length, seed, noise, coupling, noise_variates, out } => {
            generate(kind, n, length, seed, noise, coupling, noise_variates, &out)
        }
        Command::Train(args) => train(&args),
        Command::Evaluate { config, checkpoint, out } => evaluate_checkpoint(&config, &checkpoint, out),
        Command::Diagnose { probe, run } => diagnose(probe, &run),
        Command::Report { reports, out } => report(&reports, &out),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

#[allow(clippy::too_many_arguments)]
fn generate(
    kind: Kind,
    n: usize,
    length: usize,
    seed: u64,
    noise: Option<f64>,
    coupling: Option<f64>,
    noise_variates: usize,
    out: &Path,
) -> CliResult<()> {
    let mut spec = match kind {
        Kind::Order => SyntheticSpec::order(length, n, seed),
        Kind::Semantic => SyntheticSpec::semantic(length, n, seed),
        Kind::CrossVariate => SyntheticSpec::cross_variate(length, n, seed),
    };
    if let Some(v) = noise {
        spec.noise = v;
    }
    match &mut spec.kind {
        SyntheticKind::CrossVariate { coupling: c, noise_variates: k, .. } => {
            if let Some(v) = coupling {
                *c = v;
            }
            *k = noise_variates;
        }
        _ if coupling.is_some() || noise_variates > 0 => {
            return Err(CliError::Usage("--coupling and --noise-variates apply to cross_variate only".into()));
        }
        _ => {}
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    create_dir(out)?;
    let name = match kind {
        Kind::Order => "order",
        Kind::Semantic => "semantic",
        Kind::CrossVariate => "cross_variate",
    };
    let csv = out.join(format!("{name}.csv"));
    spec.generate()?.write_csv(&csv)?;
    let spec_value = toml::Value::try_from(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut m = Manifest::new("generate", vec![seed], Some(spec_value));
    m.outputs(out, &[csv.clone()])?;
    m.write(out)?;
    println!("{}", csv.display());
    Ok(())
}

struct Prepared {
    cfg: RunConfig,
    out: PathBuf,
    opts: ProbeOptions,
    manifest: Manifest,
}

fn prepare(command: &str, args: &RunArgs) -> CliResult<Prepared> {
    let cfg = RunConfig::load(&args.config)?;
    let seeds = match (args.seeds, &cfg.seeds) {
        (Some(k), _) => (0..k as u64).collect(),
        (None, Some(s)) => s.clone(),
        (None, None) => vec![cfg.train.seed],
    };
    if seeds.is_empty() || args.jobs == 0 {
        return Err(CliError::Usage("--seeds and --jobs must be at least 1".into()));
    }
    let out = args.out.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("runs").join(command));
    create_dir(&out)?;
    let mut manifest = Manifest::new(command, seeds.clone(), Some(cfg.to_toml()?));
    manifest.input(&args.config)?;
    if let DataSource::Csv { path } = &cfg.data {
        manifest.input(path)?;
    }
    Ok(Prepared { cfg, out, opts: ProbeOptions { seeds, jobs: args.jobs }, manifest })
}

#[derive(Serialize)]
struct SeedMetrics {
    seed: u64,
    epochs: usize,
    best_val_mse: f64,
    val: Metrics,
    test: Metrics,
}

fn train(args: &RunArgs) -> CliResult<()> {
    let Prepared { cfg, out, opts, mut manifest } = prepare("train", args)?;
    let exp = cfg.experiment();
    let splits = exp.splits()?;
    let results = map_seeds(&opts, |seed| {
        let outcome = exp.run(&splits, seed)?;
        let dir = out.join(format!("seed{seed}"));
        std::fs::create_dir_all(&dir).map_err(|e| sde_core::Error::Io { path: dir.clone(), source: e })?;
        let ckpt = dir.join("checkpoint.sde");
        let hist = dir.join("history.csv");
        Checkpoint::new(outcome.model.clone(), Some(TrainConfig { seed, ..exp.train.clone() }), Some(outcome.best_val))
            .save(&ckpt)?;
        outcome.history.write_csv(&hist)?;
        let row = SeedMetrics {
            seed,
            epochs: outcome.history.epochs.len(),
            best_val_mse: outcome.best_val,
            val: evaluate(&outcome.model, &splits.val)?,
            test: evaluate(&outcome.model, &splits.test)?,
        };
        for w in &outcome.warnings {
            eprintln!("warning: {w}");
        }
        Ok((row, vec![ckpt, hist]))
    })?;
    let metrics = out.join("metrics.json");
    let (rows, files): (Vec<SeedMetrics>, Vec<Vec<PathBuf>>) = results.into_iter().unzip();
    write_json(&metrics, &rows)?;
    for r in &rows {
        println!("seed {}: val_mse {:.6} test_mse {:.6} test_mae {:.6}", r.seed, r.val.mse, r.test.mse, r.test.mae);
    }
    let mut all: Vec<PathBuf> = files.into_iter().flatten().collect();
    all.push(metrics);
    manifest.outputs(&out, &all)?;
    manifest.write(&out)?;
    Ok(())
}

#[derive(Serialize)]
struct Evaluation {
    checkpoint: String,
    val: Metrics,
    test: Metrics,
}

fn evaluate_checkpoint(config: &Path, checkpoint: &Path, out: Option<PathBuf>) -> CliResult<()> {
    let cfg = RunConfig::load(config)?;
    let ck = Checkpoint::load(checkpoint)?;
    let spec: ModelSpec = ck.model.spec();
    if spec.horizon() != cfg.horizon || spec.lookback().is_some_and(|t| t != cfg.lookback) {
        return Err(CliError::Usage(format!(
            "checkpoint model (lookback {:?}, horizon {}) does not match config (lookback {}, horizon {})",
            spec.lookback(),
            spec.horizon(),
            cfg.lookback,
            cfg.horizon
        )));
    }
    let splits = cfg.experiment().splits()?;
    let eval = Evaluation {
        checkpoint: checkpoint.display().to_string(),
        val: evaluate(&ck.model, &splits.val)?,
        test: evaluate(&ck.model, &splits.test)?,
    };
    println!("val_mse {:.6} test_mse {:.6} test_mae {:.6} ({} parameters)", eval.val.mse, eval.test.mse, eval.test.mae, ck.model.params().num_scalars());
    let out = out.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("runs/evaluate"));
    create_dir(&out)?;
    let path = out.join("evaluation.json");
    write_json(&path, &eval)?;
    let mut m = Manifest::new("evaluate", vec![], Some(cfg.to_toml()?));
    m.input(config)?;
    m.input(checkpoint)?;
    m.outputs(&out, &[path])?;
    m.write(&out)?;
    Ok(())
}

fn probe_name(p: Probe) -> &'static str {
    match p {
        Probe::Shuffle => "shuffle",
        Probe::Patching => "patching",
        Probe::Activation => "activation",
        Probe::Sharpness => "sharpness",
        Probe::Mi => "mi",
        Probe::Ttv => "ttv",
        Probe::Efficiency => "efficiency",
    }
}

fn diagnose(probe: Probe, args: &RunArgs) -> CliResult<()> {
    let Prepared { cfg, out, opts, mut manifest } = prepare("diagnose", args)?;
    let name = probe_name(probe);
    manifest.command = format!("diagnose {name}");
    let exp = cfg.experiment();
    let settings = &cfg.probe;
    let report: Option<ProbeReport> = match probe {
        Probe::Shuffle => Some(order_probe(&exp, &opts)?),
        Probe::Patching => Some(patching_probe(&exp, settings.patch_small, settings.patch_large, &opts)?),
        Probe::Activation => Some(activation_ablation(&exp, None, &opts)?),
        Probe::Sharpness => {
            let mut r = activation_ablation(&exp, Some(&settings.sharpness), &opts)?;
            r.probe = "sharpness".into();
            Some(r)
        }
        Probe::Ttv => Some(disentangled_vs_ttv(&exp, &opts)?),
        Probe::Mi | Probe::Efficiency => None,
    };
    let mut files = Vec::new();
    if let Some(r) = report {
        r.write(&out, name)?;
        files.push(out.join(format!("{name}.json")));
        files.push(out.join(format!("{name}.csv")));
        for (k, v) in &r.medians {
            println!("{k} = {v:.6}");
        }
    } else if probe == Probe::Mi {
        let DataSource::Synthetic(spec) = &cfg.data else {
            return Err(CliError::Usage("diagnose mi needs a synthetic data source".into()));
        };
        let r = dependency_significance(spec, settings.mi_bins)?;
        for c in &r.checks {
            println!("{}: gain {:.4} nats, significant {} ({})", c.dependency, c.gain, c.significant, c.proxy);
        }
        let path = out.join("mi.json");
        write_json(&path, &r)?;
        files.push(path);
    } else {
        let ModelSpec::Sde(base) = &cfg.model else {
            return Err(CliError::Usage("diagnose efficiency needs an sde model".into()));
        };
        let e = &settings.efficiency;
        let r = efficiency_benchmark(&EfficiencyConfig {
            base: base.clone(),
            n_vars: e.n_vars,
            batch_size: e.batch_size,
            variable: e.variable,
            values: e.values.clone(),
            repeats: e.repeats,
            warmup: e.warmup,
            seed: opts.seeds[0],
        })?;
        println!("{:?} sweep slope {:.3}", r.variable, r.slope);
        let path = out.join("efficiency.json");
        write_json(&path, &r)?;
        let csv_path = out.join("efficiency.csv");
        let mut text = String::from("value,lookback,n_vars,seconds\n");
        for p in &r.points {
            text.push_str(&format!("{},{},{},{:?}\n", p.value, p.lookback, p.n_vars, p.seconds));
        }
        std::fs::write(&csv_path, text).map_err(|e| CliError::io(&csv_path, e))?;
        files.extend([path, csv_path]);
    }
    manifest.outputs(&out, &files)?;
    manifest.write(&out)?;
    Ok(())
}

fn report(inputs: &[PathBuf], out: &Path) -> CliResult<()> {
    let mut reports = Vec::new();
    for p in inputs {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
        reports.push((p.display().to_string(), ProbeReport::from_json(&text)?));
    }
    create_dir(out)?;
    let path = out.join("report.csv");
    let f = std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    aggregate(&reports, f)?;
    let mut m = Manifest::new("report", vec![], None);
    for p in inputs {
        m.input(p)?;
    }
    m.outputs(out, &[path.clone()])?;
    m.write(out)?;
    println!("{}", path.display());
    Ok(())
}
