//! Dataset ingestion, chronological splitting, normalization, windowing and
//! synthetic generators.

mod synth;
mod table;
mod window;

pub use synth::{next_template, waveform, SyntheticKind, SyntheticSpec};
pub use table::SeriesTable;
pub use window::{shuffle_time_axis, split_normalize_window, Normalizer, SplitSpec, Splits, WindowedDataset, MIN_STD};
