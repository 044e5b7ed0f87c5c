use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{split_normalize_window, SeriesTable, SplitSpec, Splits, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::train::{train, TrainConfig, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Csv { path: PathBuf },
    Synthetic(SyntheticSpec),
}

impl DataSource {
    pub fn load(&self) -> Result<SeriesTable> {
        match self {
            DataSource::Csv { path } => SeriesTable::load_csv(path),
            DataSource::Synthetic(spec) => spec.generate(),
        }
    }
}

/// A dataset, a model and a training recipe; one training run per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitSpec,
    pub lookback: usize,
    pub horizon: usize,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        if self.model.horizon() != self.horizon {
            return Err(Error::Config(format!("model horizon {} != experiment horizon {}", self.model.horizon(), self.horizon)));
        }
        if let Some(t) = self.model.lookback() {
            if t != self.lookback {
                return Err(Error::Config(format!("model lookback {t} != experiment lookback {}", self.lookback)));
            }
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn with_model(&self, model: ModelSpec) -> Self {
        Self { model, ..self.clone() }
    }

    pub fn splits(&self) -> Result<Splits> {
        self.validate()?;
        split_normalize_window(&self.data.load()?, self.split, self.lookback, self.horizon)
    }

    /// Trains a fresh model; `seed` sets both initialization and batch order.
    pub fn run(&self, splits: &Splits, seed: u64) -> Result<TrainOutcome> {
        self.validate()?;
        let model = self.model.build(seed)?;
        let cfg = TrainConfig { seed, ..self.train.clone() };
        train(model, &splits.train, &splits.val, &cfg)
    }
}
