use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::experiment::Experiment;
use super::sharpness::{model_sharpness, SharpnessConfig, SharpnessEstimate};
use crate::data::{shuffle_time_axis, Splits};
use crate::error::{Error, Result};
use crate::model::{Backbone, ModelSpec, SdeConfig, VariantTag};
use crate::train::{evaluate, Metrics};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMetric {
    TestMse,
    ValMse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub label: String,
    pub val_mse: f64,
    pub test: Metrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sharpness: Option<SharpnessEstimate>,
}

impl ArmResult {
    pub fn metric(&self, m: ProbeMetric) -> f64 {
        match m {
            ProbeMetric::TestMse => self.test.mse,
            ProbeMetric::ValMse => self.val_mse,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub arms: Vec<ArmResult>,
    /// `(arm - baseline) / baseline * 100` for every arm after the first.
    pub relative_pct: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: String,
    pub metric: ProbeMetric,
    pub arms: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: Vec<SeedResult>,
    pub medians: BTreeMap<String, f64>,
    #[serde(default)]
    pub notes: Vec<String>,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn relative_pct(baseline: f64, value: f64) -> f64 {
    if value == baseline {
        0.0
    } else {
        (value - baseline) / baseline * 100.0
    }
}

impl ProbeReport {
    fn new(probe: &str, metric: ProbeMetric, config: serde_json::Value, seeds: Vec<(u64, Vec<ArmResult>)>) -> Self {
        let arms = seeds.first().map(|(_, a)| a.iter().map(|r| r.label.clone()).collect()).unwrap_or_default();
        let seeds = seeds
            .into_iter()
            .map(|(seed, arms)| {
                let base = arms[0].metric(metric);
                let relative_pct = arms[1..].iter().map(|a| relative_pct(base, a.metric(metric))).collect();
                SeedResult { seed, arms, relative_pct }
            })
            .collect();
        let mut r = Self { probe: probe.into(), metric, arms, config, seeds, medians: BTreeMap::new(), notes: Vec::new() };
        r.medians = r.summarize();
        r
    }

    fn column(&self, f: impl Fn(&SeedResult) -> Option<f64>) -> Vec<f64> {
        self.seeds.iter().filter_map(f).collect()
    }

    /// Medians over seeds, derived only from the per-seed records.
    pub fn summarize(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        for (i, label) in self.arms.iter().enumerate() {
            m.insert(format!("{label}.val_mse"), median(&self.column(|s| Some(s.arms[i].val_mse))));
            m.insert(format!("{label}.test_mse"), median(&self.column(|s| Some(s.arms[i].test.mse))));
            m.insert(format!("{label}.test_mae"), median(&self.column(|s| Some(s.arms[i].test.mae))));
            let sharp = self.column(|s| s.arms[i].sharpness.map(|e| e.value));
            if !sharp.is_empty() {
                m.insert(format!("{label}.sharpness"), median(&sharp));
            }
            if i > 0 {
                m.insert(format!("{label}.relative_pct"), median(&self.column(|s| Some(s.relative_pct[i - 1]))));
                let wins = self.column(|s| Some(f64::from(u8::from(s.arms[i].metric(self.metric) <= s.arms[0].metric(self.metric)))));
                m.insert(format!("{label}.wins"), wins.iter().sum());
            }
        }
        m
    }

    /// Checks that every stored derived number matches a recomputation from the raw metrics.
    pub fn verify(&self) -> Result<()> {
        for s in &self.seeds {
            let base = s.arms[0].metric(self.metric);
            for (a, &r) in s.arms[1..].iter().zip(&s.relative_pct) {
                let want = relative_pct(base, a.metric(self.metric));
                if want.to_bits() != r.to_bits() {
                    return Err(Error::Contract(format!("seed {} arm {}: stored {r} vs recomputed {want}", s.seed, a.label)));
                }
            }
        }
        let fresh = self.summarize();
        for (k, v) in &fresh {
            match self.medians.get(k) {
                Some(stored) if stored.to_bits() == v.to_bits() || (stored.is_nan() && v.is_nan()) => {}
                other => return Err(Error::Contract(format!("median {k}: stored {other:?} vs recomputed {v}"))),
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("bad probe report: {e}")))
    }

    pub fn write_csv_to<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let fmt = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["probe", "seed", "arm", "val_mse", "test_mse", "test_mae", "sharpness", "relative_pct"]).map_err(fmt)?;
        for s in &self.seeds {
            for (i, a) in s.arms.iter().enumerate() {
                let rel = if i == 0 { String::new() } else { format!("{:?}", s.relative_pct[i - 1]) };
                let sharp = a.sharpness.map(|e| format!("{:?}", e.value)).unwrap_or_default();
                w.write_record([
                    self.probe.clone(),
                    s.seed.to_string(),
                    a.label.clone(),
                    format!("{:?}", a.val_mse),
                    format!("{:?}", a.test.mse),
                    format!("{:?}", a.test.mae),
                    sharp,
                    rel,
                ])
                .map_err(fmt)?;
            }
        }
        w.flush().map_err(|e| Error::Format(e.to_string()))
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let path = dir.join(format!("{stem}.csv"));
        let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        self.write_csv_to(f)
    }
}

/// Seeds and the number of worker threads used to run them.
#[derive(Clone, Debug)]
pub struct ProbeOptions {
    pub seeds: Vec<u64>,
    pub jobs: usize,
}

impl ProbeOptions {
    pub fn new(n_seeds: usize) -> Self {
        Self { seeds: (0..n_seeds as u64).collect(), jobs: 1 }
    }
}

/// Runs `f` once per seed on a pool of `opts.jobs` threads; results keep seed order.
pub fn map_seeds<T: Send>(opts: &ProbeOptions, f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    if opts.seeds.is_empty() {
        return Err(Error::Config("a probe needs at least one seed".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| opts.seeds.par_iter().map(|&s| f(s)).collect())
}

fn trained_arm(label: &str, exp: &Experiment, splits: &Splits, seed: u64, sharp: Option<&SharpnessConfig>) -> Result<ArmResult> {
    let out = exp.run(splits, seed)?;
    let test = evaluate(&out.model, &splits.test)?;
    let sharpness = match sharp {
        Some(cfg) => Some(model_sharpness(&out.model, &splits.train, &SharpnessConfig { seed, ..*cfg })?),
        None => None,
    };
    Ok(ArmResult { label: label.into(), val_mse: out.best_val, test, sharpness })
}

fn echo<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}

fn sde_config(exp: &Experiment, probe: &str) -> Result<SdeConfig> {
    match &exp.model {
        ModelSpec::Sde(c) => Ok(c.clone()),
        other => Err(Error::Config(format!("{probe} needs an sde model, got {other:?}"))),
    }
}

/// Trains once per seed and compares test error on the original and on a
/// time-shuffled copy of the test set.
pub fn order_probe(exp: &Experiment, opts: &ProbeOptions) -> Result<ProbeReport> {
    let splits = exp.splits()?;
    let runs = map_seeds(opts, |seed| {
        let out = exp.run(&splits, seed)?;
        let original = evaluate(&out.model, &splits.test)?;
        let shuffled = evaluate(&out.model, &shuffle_time_axis(&splits.test, seed)?)?;
        Ok((
            seed,
            vec![
                ArmResult { label: "original".into(), val_mse: out.best_val, test: original, sharpness: None },
                ArmResult { label: "shuffled".into(), val_mse: out.best_val, test: shuffled, sharpness: None },
            ],
        ))
    })?;
    let mut r = ProbeReport::new("shuffle", ProbeMetric::TestMse, echo(exp), runs);
    r.notes.push("shuffled.relative_pct is the test MSE drop caused by shuffling the lookback axis".into());
    Ok(r)
}

/// Same backbone with patch lengths `small` (stride 1) and `large` (the configured stride).
pub fn patching_probe(exp: &Experiment, small: usize, large: usize, opts: &ProbeOptions) -> Result<ProbeReport> {
    let base = sde_config(exp, "patching probe")?;
    let arms = [
        (format!("p{small}"), SdeConfig { patch_len: small, stride: 1, ..base.clone() }),
        (format!("p{large}"), SdeConfig { patch_len: large, ..base }),
    ];
    compare_arms("patching", exp, &arms, ProbeMetric::TestMse, None, opts).map(|mut r| {
        r.notes.push(format!("negative p{large}.relative_pct is an improvement over p{small}"));
        r
    })
}

/// Vanilla block (with the branch activation) against the simplified block.
pub fn activation_ablation(exp: &Experiment, sharp: Option<&SharpnessConfig>, opts: &ProbeOptions) -> Result<ProbeReport> {
    let base = sde_config(exp, "activation ablation")?;
    let arms = [
        ("vanilla".to_string(), SdeConfig { backbone: Backbone::Mamba, ..base.clone() }),
        ("simplified".to_string(), SdeConfig { backbone: Backbone::SMamba, ..base }),
    ];
    let mut r = compare_arms("activation", exp, &arms, ProbeMetric::ValMse, sharp, opts)?;
    if let Some(cfg) = sharp {
        r.notes.push(format!("sharpness on the training split with {:?}, {} samples", cfg.radius, cfg.samples));
    }
    Ok(r)
}

/// Disentangled encoder against sequential time-then-variate and time-only encoders.
pub fn disentangled_vs_ttv(exp: &Experiment, opts: &ProbeOptions) -> Result<ProbeReport> {
    let base = sde_config(exp, "ttv probe")?;
    let arms: Vec<(String, SdeConfig)> = [VariantTag::Full, VariantTag::TimeThenVariate, VariantTag::NoVariateBranch]
        .into_iter()
        .map(|v| (echo(&v).as_str().unwrap_or("variant").to_string(), SdeConfig { variant: v, ..base.clone() }))
        .collect();
    compare_arms("ttv", exp, &arms, ProbeMetric::TestMse, None, opts)
}

/// Trains each configuration under every seed; the first arm is the baseline.
pub fn compare_arms(
    probe: &str,
    exp: &Experiment,
    arms: &[(String, SdeConfig)],
    metric: ProbeMetric,
    sharp: Option<&SharpnessConfig>,
    opts: &ProbeOptions,
) -> Result<ProbeReport> {
    let exps: Vec<(String, Experiment)> =
        arms.iter().map(|(l, c)| (l.clone(), exp.with_model(ModelSpec::Sde(c.clone())))).collect();
    for (_, e) in &exps {
        e.validate()?;
        if let ModelSpec::Sde(c) = &e.model {
            c.validate()?;
        }
    }
    let splits = exp.splits()?;
    let runs = map_seeds(opts, |seed| {
        let arms = exps.iter().map(|(l, e)| trained_arm(l, e, &splits, seed, sharp)).collect::<Result<Vec<_>>>()?;
        Ok((seed, arms))
    })?;
    let config = serde_json::json!({
        "experiment": echo(exp),
        "arms": arms.iter().map(|(l, c)| serde_json::json!({ "label": l, "model": echo(c) })).collect::<Vec<_>>(),
        "sharpness": sharp.map(echo),
    });
    Ok(ProbeReport::new(probe, metric, config, runs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SplitSpec, SyntheticSpec};
    use crate::diagnostics::experiment::DataSource;
    use crate::train::TrainConfig;

    fn quick_train() -> TrainConfig {
        TrainConfig { max_epochs: 2, max_batches_per_epoch: Some(3), ..TrainConfig::default() }
    }

    fn exp(model: ModelSpec) -> Experiment {
        Experiment {
            data: DataSource::Synthetic(SyntheticSpec::order(500, 2, 5)),
            split: SplitSpec::default(),
            lookback: 24,
            horizon: 8,
            model,
            train: quick_train(),
        }
    }

    fn tiny_sde() -> SdeConfig {
        SdeConfig { lookback: 24, horizon: 8, patch_len: 8, stride: 4, d_model: 8, d_state: 4, ..SdeConfig::default() }
    }

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn constant_model_has_zero_drop() {
        let r = order_probe(&exp(ModelSpec::Constant { horizon: 8 }), &ProbeOptions::new(3)).unwrap();
        assert!(r.seeds.iter().all(|s| s.relative_pct == vec![0.0]));
        assert_eq!(r.medians["shuffled.relative_pct"], 0.0);
        r.verify().unwrap();
    }

    #[test]
    fn report_json_round_trip_and_tamper_detection() {
        let r = order_probe(&exp(ModelSpec::LinearProbe { lookback: 24, horizon: 8 }), &ProbeOptions::new(2)).unwrap();
        let back = ProbeReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        back.verify().unwrap();
        let mut bad = back.clone();
        bad.medians.insert("shuffled.relative_pct".into(), 1.0);
        assert!(bad.verify().is_err());
        let mut bad = back;
        bad.seeds[0].arms[1].test.mse *= 2.0;
        assert!(bad.verify().is_err());
    }

    #[test]
    fn identical_arms_give_zero_difference() {
        let e = exp(ModelSpec::Sde(tiny_sde()));
        let arms = [("a".to_string(), tiny_sde()), ("b".to_string(), tiny_sde())];
        let r = compare_arms("ttv", &e, &arms, ProbeMetric::TestMse, None, &ProbeOptions::new(2)).unwrap();
        assert_eq!(r.medians["b.relative_pct"], 0.0);
    }

    #[test]
    fn identity_activation_in_both_arms_gives_zero_improvement() {
        // The vanilla backbone with an identity branch activation is the simplified block.
        let e = exp(ModelSpec::Sde(tiny_sde()));
        let arms = [
            ("vanilla".to_string(), SdeConfig { backbone: Backbone::SMamba, ..tiny_sde() }),
            ("simplified".to_string(), SdeConfig { backbone: Backbone::SMamba, ..tiny_sde() }),
        ];
        let r = compare_arms("activation", &e, &arms, ProbeMetric::ValMse, None, &ProbeOptions::new(1)).unwrap();
        assert_eq!(r.seeds[0].relative_pct, vec![0.0]);
    }

    #[test]
    fn parallel_and_serial_runs_agree() {
        let e = exp(ModelSpec::LinearProbe { lookback: 24, horizon: 8 });
        let serial = order_probe(&e, &ProbeOptions { seeds: vec![0, 1, 2], jobs: 1 }).unwrap();
        let parallel = order_probe(&e, &ProbeOptions { seeds: vec![0, 1, 2], jobs: 3 }).unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn patching_probe_needs_an_sde_model() {
        let e = exp(ModelSpec::LinearProbe { lookback: 24, horizon: 8 });
        assert!(matches!(patching_probe(&e, 1, 16, &ProbeOptions::new(1)), Err(Error::Config(_))));
    }

    #[test]
    fn patching_on_a_constant_series_is_near_zero_error() {
        let mut e = exp(ModelSpec::Sde(SdeConfig { stride: 8, ..tiny_sde() }));
        let table = "date,v0\n".to_string() + &(0..400).map(|i| format!("{i},3.5\n")).collect::<String>();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flat.csv");
        std::fs::write(&path, table).unwrap();
        e.data = DataSource::Csv { path };
        e.train = TrainConfig { lr: 1e-2, max_epochs: 10, max_batches_per_epoch: Some(10), allow_out_of_range: true, ..quick_train() };
        let r = patching_probe(&e, 1, 8, &ProbeOptions::new(1)).unwrap();
        for a in &r.seeds[0].arms {
            assert!(a.test.mse < 1e-3, "{a:?}");
        }
    }
}
