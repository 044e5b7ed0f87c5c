use std::ops::Range;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SeriesTable;
use crate::error::{Error, Result};
use crate::model::random_perm;
use crate::tensor::Tensor;

/// Chronological train/val/test split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SplitSpec {
    /// Fractions of the table; train and test are floored, validation takes the rest.
    Ratio { train: f64, val: f64, test: f64 },
    /// 12/4/4 months of hourly data.
    EttHour,
    /// 12/4/4 months of 15-minute data.
    EttMinute,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Ratio { train: 0.7, val: 0.1, test: 0.2 }
    }
}

const ETT_HOUR: [usize; 3] = [12 * 30 * 24, 4 * 30 * 24, 4 * 30 * 24];

impl SplitSpec {
    /// Row ranges of the three splits, in time order.
    pub fn boundaries(&self, rows: usize) -> Result<[Range<usize>; 3]> {
        let sizes = match *self {
            SplitSpec::Ratio { train, val, test } => {
                if [train, val, test].iter().any(|f| !(0.0..=1.0).contains(f)) || (train + val + test - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!("split fractions must be in [0, 1] and sum to 1, got {train}/{val}/{test}")));
                }
                let n_train = (rows as f64 * train).floor() as usize;
                let n_test = (rows as f64 * test).floor() as usize;
                [n_train, rows - n_train - n_test, n_test]
            }
            SplitSpec::EttHour => ETT_HOUR,
            SplitSpec::EttMinute => ETT_HOUR.map(|n| 4 * n),
        };
        let total: usize = sizes.iter().sum();
        if total > rows {
            return Err(Error::Sizing { split: "table", rows, required: total });
        }
        Ok([0..sizes[0], sizes[0]..sizes[0] + sizes[1], sizes[0] + sizes[1]..total])
    }
}

/// Per-variate z-score statistics from the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const MIN_STD: f64 = 1e-8;

impl Normalizer {
    /// Fits on row-major `rows x n_vars` values; population std clamped at `MIN_STD`.
    pub fn fit(values: &[f64], n_vars: usize) -> Result<Self> {
        if n_vars == 0 || values.is_empty() || values.len() % n_vars != 0 {
            return Err(Error::EmptyDataset("cannot fit a normalizer on no data".into()));
        }
        let rows = values.len() / n_vars;
        let mut mean = vec![0.0; n_vars];
        for r in values.chunks(n_vars) {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; n_vars];
        for r in values.chunks(n_vars) {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|s| (s / rows as f64).sqrt().max(MIN_STD)).collect();
        Ok(Self { mean, std })
    }

    pub fn transform(&self, values: &[f64]) -> Vec<f64> {
        let n = self.mean.len();
        values.iter().enumerate().map(|(i, v)| (v - self.mean[i % n]) / self.std[i % n]).collect()
    }

    pub fn inverse(&self, values: &[f64]) -> Vec<f64> {
        let n = self.mean.len();
        values.iter().enumerate().map(|(i, v)| v * self.std[i % n] + self.mean[i % n]).collect()
    }
}

/// Sliding windows (stride 1) over one split; samples are materialized on demand.
#[derive(Clone, Debug)]
pub struct WindowedDataset {
    /// Normalized split rows, row-major `rows x n_vars`.
    data: Arc<Vec<f64>>,
    n_vars: usize,
    lookback: usize,
    horizon: usize,
    /// Absolute table row of the split's first row.
    offset: usize,
    /// Applied to the lookback axis of every X window.
    time_perm: Option<Arc<Vec<usize>>>,
}

impl WindowedDataset {
    pub fn new(values: Vec<f64>, n_vars: usize, lookback: usize, horizon: usize, offset: usize) -> Result<Self> {
        if n_vars == 0 || values.len() % n_vars != 0 {
            return Err(Error::dim("windowed_dataset", format!("{} values for {n_vars} variates", values.len())));
        }
        if lookback == 0 || horizon == 0 {
            return Err(Error::Config("lookback and horizon must be positive".into()));
        }
        Ok(Self { data: Arc::new(values), n_vars, lookback, horizon, offset, time_perm: None })
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.n_vars
    }

    /// `rows - T - S + 1`, or zero when the split is shorter than one window.
    pub fn len(&self) -> usize {
        (self.rows() + 1).saturating_sub(self.lookback + self.horizon)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Absolute table rows covered by the input and target of sample `i`.
    pub fn window_rows(&self, i: usize) -> (Range<usize>, Range<usize>) {
        let s = self.offset + i;
        (s..s + self.lookback, s + self.lookback..s + self.lookback + self.horizon)
    }

    fn fill(&self, i: usize, x: &mut [f64], y: &mut [f64]) {
        let (n, t, h) = (self.n_vars, self.lookback, self.horizon);
        for v in 0..n {
            for k in 0..t {
                let src = self.time_perm.as_ref().map_or(k, |p| p[k]);
                x[v * t + k] = self.data[(i + src) * n + v];
            }
            for k in 0..h {
                y[v * h + k] = self.data[(i + t + k) * n + v];
            }
        }
    }

    /// `(X: [N, T], Y: [N, S])` for sample `i`.
    pub fn sample(&self, i: usize) -> (Tensor, Tensor) {
        let (x, y) = self.batch(&[i]);
        let (n, t, h) = (self.n_vars, self.lookback, self.horizon);
        (Tensor::from_parts(vec![n, t], x.into_data()), Tensor::from_parts(vec![n, h], y.into_data()))
    }

    /// `(X: [B, N, T], Y: [B, N, S])` for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let (n, t, h) = (self.n_vars, self.lookback, self.horizon);
        let mut x = vec![0.0; indices.len() * n * t];
        let mut y = vec![0.0; indices.len() * n * h];
        for (b, &i) in indices.iter().enumerate() {
            assert!(i < self.len(), "sample {i} out of range for {} samples", self.len());
            self.fill(i, &mut x[b * n * t..(b + 1) * n * t], &mut y[b * n * h..(b + 1) * n * h]);
        }
        (
            Tensor::from_parts(vec![indices.len(), n, t], x),
            Tensor::from_parts(vec![indices.len(), n, h], y),
        )
    }

    /// Copy whose X windows are reordered by `perm` along the time axis.
    pub fn with_time_permutation(&self, perm: Vec<usize>) -> Result<Self> {
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        if sorted != (0..self.lookback).collect::<Vec<_>>() {
            return Err(Error::InvalidInput { op: "shuffle_time_axis", detail: "not a permutation of the lookback".into() });
        }
        let composed = match &self.time_perm {
            Some(p) => perm.iter().map(|&k| p[k]).collect(),
            None => perm,
        };
        Ok(Self { time_perm: Some(Arc::new(composed)), ..self.clone() })
    }
}

/// One fixed permutation of the lookback axis, applied to every X window; Y is untouched.
pub fn shuffle_time_axis(dataset: &WindowedDataset, seed: u64) -> Result<WindowedDataset> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("cannot shuffle an empty dataset".into()));
    }
    let perm = random_perm(dataset.lookback, &mut ChaCha8Rng::seed_from_u64(seed));
    dataset.with_time_permutation(perm)
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
    pub normalizer: Normalizer,
}

/// Splits chronologically, fits the normalizer on the raw training rows, and
/// windows each split over its own rows only.
pub fn split_normalize_window(table: &SeriesTable, split: SplitSpec, lookback: usize, horizon: usize) -> Result<Splits> {
    let ranges = split.boundaries(table.rows())?;
    let n = table.n_vars();
    let required = lookback + horizon;
    for (name, r) in ["train", "val", "test"].into_iter().zip(&ranges) {
        if r.len() < required {
            return Err(Error::Sizing { split: name, rows: r.len(), required });
        }
    }
    let raw = |r: &Range<usize>| &table.values()[r.start * n..r.end * n];
    let normalizer = Normalizer::fit(raw(&ranges[0]), n)?;
    let make = |r: &Range<usize>| WindowedDataset::new(normalizer.transform(raw(r)), n, lookback, horizon, r.start);
    Ok(Splits { train: make(&ranges[0])?, val: make(&ranges[1])?, test: make(&ranges[2])?, normalizer })
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    fn table(rows: usize, n: usize, f: impl Fn(usize, usize) -> f64) -> SeriesTable {
        let values = (0..rows).flat_map(|r| (0..n).map(move |c| (r, c))).map(|(r, c)| f(r, c)).collect();
        SeriesTable::with_hourly_index((0..n).map(|c| format!("v{c}")).collect(), values).unwrap()
    }

    #[test]
    fn ratio_boundaries_and_window_count() {
        let [tr, va, te] = SplitSpec::default().boundaries(300).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (210, 30, 60));
        let t = table(300, 2, |r, c| (r * 2 + c) as f64);
        let ds = WindowedDataset::new(t.values()[..210 * 2].to_vec(), 2, 96, 96, 0).unwrap();
        assert_eq!(ds.len(), 19);
    }

    #[test]
    fn short_split_is_a_sizing_error() {
        let t = table(300, 1, |r, _| r as f64);
        match split_normalize_window(&t, SplitSpec::default(), 96, 96).unwrap_err() {
            Error::Sizing { split, required, .. } => assert_eq!((split, required), ("val", 192)),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn ett_presets() {
        let [tr, va, te] = SplitSpec::EttHour.boundaries(17420).unwrap();
        assert_eq!((tr.end, va.end, te.end), (8640, 11520, 14400));
        let [tr, _, te] = SplitSpec::EttMinute.boundaries(69680).unwrap();
        assert_eq!((tr.end, te.end), (34560, 57600));
        assert!(SplitSpec::EttHour.boundaries(1000).is_err());
    }

    #[test]
    fn constant_training_column_normalizes_to_zero() {
        let t = table(400, 2, |r, c| if c == 0 { 5.0 } else { r as f64 });
        let s = split_normalize_window(&t, SplitSpec::Ratio { train: 0.5, val: 0.25, test: 0.25 }, 10, 5).unwrap();
        assert_eq!(s.normalizer.std[0], MIN_STD);
        let (x, _) = s.train.sample(3);
        assert!(x.data()[..10].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v: Vec<f64> = (0..300).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let nz = Normalizer::fit(&v, 3).unwrap();
        let back = nz.inverse(&nz.transform(&v));
        assert!(v.iter().zip(&back).all(|(a, b)| (a - b).abs() <= 1e-10));
    }

    #[test]
    fn statistics_come_from_training_rows_only() {
        // Drifting series: later splits have different statistics.
        let t = table(1000, 1, |r, _| r as f64 * 0.01 + (r as f64).sin());
        let s = split_normalize_window(&t, SplitSpec::default(), 24, 12).unwrap();
        let [tr, _, te] = SplitSpec::default().boundaries(1000).unwrap();
        let train_fit = Normalizer::fit(&t.values()[tr], 1).unwrap();
        let test_fit = Normalizer::fit(&t.values()[te.clone()], 1).unwrap();
        assert_eq!(s.normalizer, train_fit);
        assert!((test_fit.mean[0] - train_fit.mean[0]).abs() > 1.0);
        let (_, y) = s.test.sample(0);
        let (_, target) = s.test.window_rows(0);
        let want = (t.value(target.start, 0) - train_fit.mean[0]) / train_fit.std[0];
        assert_eq!(y.data()[0], want);
        assert!(target.start >= te.start);
    }

    #[test]
    fn windows_are_adjacent_and_inside_their_split() {
        let t = table(500, 2, |r, c| (r * 10 + c) as f64);
        let s = split_normalize_window(&t, SplitSpec::default(), 20, 7).unwrap();
        let bounds = SplitSpec::default().boundaries(500).unwrap();
        for (ds, b) in [(&s.train, &bounds[0]), (&s.val, &bounds[1]), (&s.test, &bounds[2])] {
            assert_eq!(ds.len(), b.len() - 20 - 7 + 1);
            for i in 0..ds.len() {
                let (x, y) = ds.window_rows(i);
                assert_eq!(x.end, y.start);
                assert!(x.start >= b.start && y.end <= b.end);
            }
            // Materialized values follow the row ranges.
            let (x, y) = ds.sample(ds.len() - 1);
            let nz = &s.normalizer;
            let (xr, yr) = ds.window_rows(ds.len() - 1);
            assert_eq!(x.get(&[1, 19]), (t.value(xr.end - 1, 1) - nz.mean[1]) / nz.std[1]);
            assert_eq!(y.get(&[0, 0]), (t.value(yr.start, 0) - nz.mean[0]) / nz.std[0]);
        }
    }

    #[test]
    fn shuffling_preserves_each_window_multiset() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = (0..200 * 2).map(|_| rng.gen()).collect();
        let ds = WindowedDataset::new(v, 2, 16, 4, 0).unwrap();
        let sh = shuffle_time_axis(&ds, 9).unwrap();
        let mut changed = false;
        for i in 0..ds.len() {
            let ((x, y), (xs, ys)) = (ds.sample(i), sh.sample(i));
            assert_eq!(y, ys);
            for v in 0..2 {
                let mut a = x.data()[v * 16..(v + 1) * 16].to_vec();
                let mut b = xs.data()[v * 16..(v + 1) * 16].to_vec();
                changed |= a != b;
                a.sort_by(f64::total_cmp);
                b.sort_by(f64::total_cmp);
                assert_eq!(a, b);
            }
        }
        assert!(changed);
        assert_eq!(shuffle_time_axis(&ds, 9).unwrap().sample(5), sh.sample(5));
    }

    #[test]
    fn identity_permutation_leaves_dataset_unchanged() {
        let v: Vec<f64> = (0..100).map(f64::from).collect();
        let ds = WindowedDataset::new(v, 1, 10, 3, 0).unwrap();
        let same = ds.with_time_permutation((0..10).collect()).unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.sample(i), same.sample(i));
        }
        assert!(ds.with_time_permutation(vec![0; 10]).is_err());
    }

    #[test]
    fn empty_dataset_cannot_be_shuffled() {
        let ds = WindowedDataset::new(vec![0.0; 5], 1, 4, 4, 0).unwrap();
        assert!(ds.is_empty());
        assert!(matches!(shuffle_time_axis(&ds, 0), Err(Error::EmptyDataset(_))));
    }
}
