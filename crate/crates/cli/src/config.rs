use std::path::{Path, PathBuf};

use sde_core::data::SplitSpec;
use sde_core::diagnostics::{DataSource, Experiment, SharpnessConfig, SweepVariable, SIGNIFICANCE_BINS};
use sde_core::model::ModelSpec;
use sde_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitSpec,
    pub lookback: usize,
    pub horizon: usize,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: ProbeSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSettings {
    pub patch_small: usize,
    pub patch_large: usize,
    pub sharpness: SharpnessConfig,
    pub mi_bins: usize,
    pub efficiency: EfficiencySettings,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            patch_small: 1,
            patch_large: 16,
            sharpness: SharpnessConfig::default(),
            mi_bins: SIGNIFICANCE_BINS,
            efficiency: EfficiencySettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EfficiencySettings {
    pub variable: SweepVariable,
    pub values: Vec<usize>,
    pub n_vars: usize,
    pub batch_size: usize,
    pub repeats: usize,
    pub warmup: usize,
}

impl Default for EfficiencySettings {
    fn default() -> Self {
        Self { variable: SweepVariable::J, values: vec![11, 22, 44, 88], n_vars: 8, batch_size: 16, repeats: 5, warmup: 1 }
    }
}

/// Dotted keys present in `given` but absent from `canonical`.
fn unknown_keys(given: &toml::Value, canonical: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    if let (toml::Value::Table(g), toml::Value::Table(c)) = (given, canonical) {
        for (k, v) in g {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match c.get(k) {
                Some(cv) => unknown_keys(v, cv, &path, out),
                None => out.push(path),
            }
        }
    }
}

impl RunConfig {
    /// Parses a config, rejecting keys no field consumes. Relative data paths
    /// are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> CliResult<Self> {
        let raw: toml::Value = toml::from_str(text).map_err(|e| CliError::Usage(one_line(&e.to_string())))?;
        let mut cfg: RunConfig = raw.clone().try_into().map_err(|e: toml::de::Error| CliError::Usage(one_line(&e.to_string())))?;
        let canonical = toml::Value::try_from(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
        let mut unknown = Vec::new();
        unknown_keys(&raw, &canonical, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(CliError::Usage(format!("unknown config key(s): {}", unknown.join(", "))));
        }
        if let DataSource::Csv { path } = &mut cfg.data {
            if path.is_relative() {
                *path = base.join(&*path);
            }
            if !path.is_file() {
                return Err(CliError::Usage(format!("data file {} does not exist", path.display())));
            }
        }
        cfg.experiment().validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn experiment(&self) -> Experiment {
        Experiment {
            data: self.data.clone(),
            split: self.split,
            lookback: self.lookback,
            horizon: self.horizon,
            model: self.model.clone(),
            train: self.train.clone(),
        }
    }

    pub fn to_toml(&self) -> CliResult<toml::Value> {
        toml::Value::try_from(self).map_err(|e| CliError::Usage(e.to_string()))
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
