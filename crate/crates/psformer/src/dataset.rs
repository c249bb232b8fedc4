//! CSV ingestion, chronological splits and sliding-window batches.
//!
//! A series is split into train/val/test regions in time order. Channel
//! statistics come from the train region only and standardize the whole
//! series; the val and test regions are prepended with the last `L` points
//! of the preceding region so that their first window is well-defined.
//! Windows slide with stride 1.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

/// The ETT convention: 12 months train, 4 val, 4 test, by point count.
pub const ETT_HOURLY_POINTS: (usize, usize, usize) = (12 * 30 * 24, 4 * 30 * 24, 4 * 30 * 24);
/// Same months at 15-minute sampling.
pub const ETT_MINUTE_POINTS: (usize, usize, usize) =
    (12 * 30 * 24 * 4, 4 * 30 * 24 * 4, 4 * 30 * 24 * 4);

#[derive(Debug)]
pub enum DatasetError {
    Io(std::io::Error),
    Csv(csv::Error),
    /// A cell failed to parse as a number; `row` is the 1-based data row.
    BadCell {
        row: usize,
        column: String,
        value: String,
    },
    TooFewColumns {
        found: usize,
    },
    BadSplit(String),
    /// A region cannot hold a single (input, target) window.
    RegionTooShort {
        split: Split,
        region_len: usize,
        need: usize,
    },
    BadBatchSize,
    SeriesTooShort {
        rows: usize,
        need: usize,
    },
}

impl fmt::Display for DatasetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetError::Io(e) => write!(f, "io error: {e}"),
            DatasetError::Csv(e) => write!(f, "csv error: {e}"),
            DatasetError::BadCell { row, column, value } => {
                write!(f, "row {row}, column '{column}': cannot parse '{value}' as a number")
            }
            DatasetError::TooFewColumns { found } => {
                write!(f, "need a timestamp column plus at least one value column, found {found}")
            }
            DatasetError::BadSplit(msg) => write!(f, "invalid split: {msg}"),
            DatasetError::RegionTooShort { split, region_len, need } => write!(
                f,
                "{split:?} region has {region_len} points but needs at least {need} for one window"
            ),
            DatasetError::BadBatchSize => write!(f, "batch_size must be positive"),
            DatasetError::SeriesTooShort { rows, need } => {
                write!(f, "series has {rows} rows, need more than {need}")
            }
        }
    }
}

impl std::error::Error for DatasetError {}

impl From<std::io::Error> for DatasetError {
    fn from(e: std::io::Error) -> Self {
        DatasetError::Io(e)
    }
}

impl From<csv::Error> for DatasetError {
    fn from(e: csv::Error) -> Self {
        DatasetError::Csv(e)
    }
}

/// A fully ingested multivariate series. `values` is row-major `rows x M`.
#[derive(Debug, Clone)]
pub struct RawSeries {
    pub channel_names: Vec<String>,
    pub timestamps: Vec<String>,
    pub values: Vec<f64>,
    pub rows: usize,
}

impl RawSeries {
    pub fn channels(&self) -> usize {
        self.channel_names.len()
    }

    pub fn from_values(channel_names: Vec<String>, values: Vec<f64>) -> Self {
        let m = channel_names.len();
        let rows = values.len() / m;
        RawSeries {
            channel_names,
            timestamps: (0..rows).map(|i| i.to_string()).collect(),
            values,
            rows,
        }
    }
}

/// Load a CSV whose first column is a timestamp or index and whose remaining
/// columns are numeric channels, in time order.
pub fn load_csv(path: &Path) -> Result<RawSeries, DatasetError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 2 {
        return Err(DatasetError::TooFewColumns { found: headers.len() });
    }
    let channel_names: Vec<String> = headers.iter().skip(1).map(|s| s.to_string()).collect();
    let m = channel_names.len();

    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record?;
        timestamps.push(record.get(0).unwrap_or("").to_string());
        for (c, cell) in record.iter().skip(1).enumerate() {
            match cell.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => values.push(v),
                _ => {
                    return Err(DatasetError::BadCell {
                        row: idx + 1,
                        column: channel_names[c].clone(),
                        value: cell.to_string(),
                    })
                }
            }
        }
    }
    let rows = timestamps.len();
    debug_assert_eq!(values.len(), rows * m);
    Ok(RawSeries {
        channel_names,
        timestamps,
        values,
        rows,
    })
}

/// How to carve the series into train/val/test.
#[derive(Debug, Clone, PartialEq)]
pub enum SplitKind {
    /// Chronological fractions of the total length; train and test are
    /// floored, validation takes the remainder.
    Fractions { train: f64, val: f64, test: f64 },
    /// Explicit point counts per region.
    Points { train: usize, val: usize, test: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSpec {
    pub kind: SplitKind,
    /// Look-back points prepended to the val and test regions.
    pub boundary_overlap: usize,
}

impl SplitSpec {
    pub fn fractions(train: f64, val: f64, test: f64, boundary_overlap: usize) -> Self {
        SplitSpec {
            kind: SplitKind::Fractions { train, val, test },
            boundary_overlap,
        }
    }

    pub fn points(train: usize, val: usize, test: usize, boundary_overlap: usize) -> Self {
        SplitSpec {
            kind: SplitKind::Points { train, val, test },
            boundary_overlap,
        }
    }

    pub fn ett_hourly(boundary_overlap: usize) -> Self {
        let (tr, va, te) = ETT_HOURLY_POINTS;
        Self::points(tr, va, te, boundary_overlap)
    }

    pub fn ett_minute(boundary_overlap: usize) -> Self {
        let (tr, va, te) = ETT_MINUTE_POINTS;
        Self::points(tr, va, te, boundary_overlap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy)]
struct Region {
    start: usize,
    end: usize,
}

impl Region {
    fn len(&self) -> usize {
        self.end - self.start
    }
}

/// Standardized series with materialized region boundaries.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    channels: usize,
    lookback: usize,
    horizon: usize,
    /// standardized values, row-major `rows x channels`
    data: Vec<f64>,
    regions: [Region; 3],
    mean: Vec<f64>,
    std: Vec<f64>,
    floored_channels: Vec<usize>,
}

/// One materialized batch: `inputs` is `[len, M, L]`, `targets` is `[len, M, F]`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub len: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
}

/// Compute regions, fit train-only channel statistics, standardize.
pub fn split_and_standardize(
    raw: &RawSeries,
    spec: &SplitSpec,
    lookback: usize,
    horizon: usize,
) -> Result<WindowedDataset, DatasetError> {
    let rows = raw.rows;
    let m = raw.channels();
    if rows <= lookback + horizon {
        return Err(DatasetError::SeriesTooShort {
            rows,
            need: lookback + horizon,
        });
    }
    let (n_train, n_val, n_test) = match spec.kind {
        SplitKind::Fractions { train, val, test } => {
            if !(train > 0.0 && val >= 0.0 && test > 0.0) {
                return Err(DatasetError::BadSplit("fractions must be positive".into()));
            }
            if ((train + val + test) - 1.0).abs() > 1e-9 {
                return Err(DatasetError::BadSplit(format!(
                    "fractions must sum to 1, got {}",
                    train + val + test
                )));
            }
            let n_train = (rows as f64 * train).floor() as usize;
            let n_test = (rows as f64 * test).floor() as usize;
            let n_val = rows - n_train - n_test;
            (n_train, n_val, n_test)
        }
        SplitKind::Points { train, val, test } => {
            if train + val + test > rows {
                return Err(DatasetError::BadSplit(format!(
                    "point counts {}+{}+{} exceed series length {rows}",
                    train, val, test
                )));
            }
            (train, val, test)
        }
    };
    let ov = spec.boundary_overlap;
    if ov > n_train || ov > n_val + n_train {
        return Err(DatasetError::BadSplit(format!(
            "boundary overlap {ov} exceeds preceding region"
        )));
    }

    let regions = [
        Region { start: 0, end: n_train },
        Region {
            start: n_train - ov,
            end: n_train + n_val,
        },
        Region {
            start: n_train + n_val - ov,
            end: n_train + n_val + n_test,
        },
    ];
    for (region, split) in regions.iter().zip([Split::Train, Split::Val, Split::Test]) {
        if region.len() < lookback + horizon + 1 {
            return Err(DatasetError::RegionTooShort {
                split,
                region_len: region.len(),
                need: lookback + horizon + 1,
            });
        }
    }

    // train-only channel statistics
    let mut mean = vec![0.0; m];
    let mut std = vec![0.0; m];
    let mut floored = Vec::new();
    for c in 0..m {
        let mut sum = 0.0;
        for t in 0..n_train {
            sum += raw.values[t * m + c];
        }
        let mu = sum / n_train as f64;
        let mut var = 0.0;
        for t in 0..n_train {
            let d = raw.values[t * m + c] - mu;
            var += d * d;
        }
        let mut sigma = (var / n_train as f64).sqrt();
        if sigma < 1e-8 {
            sigma = 1.0;
            floored.push(c);
        }
        mean[c] = mu;
        std[c] = sigma;
    }

    let mut data = vec![0.0; rows * m];
    for t in 0..rows {
        for c in 0..m {
            data[t * m + c] = (raw.values[t * m + c] - mean[c]) / std[c];
        }
    }

    Ok(WindowedDataset {
        channels: m,
        lookback,
        horizon,
        data,
        regions,
        mean,
        std,
        floored_channels: floored,
    })
}

impl WindowedDataset {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn channel_mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn channel_std(&self) -> &[f64] {
        &self.std
    }

    /// Channels whose train-region std fell below the floor and were set to 1.
    pub fn floored_channels(&self) -> &[usize] {
        &self.floored_channels
    }

    fn region(&self, split: Split) -> Region {
        match split {
            Split::Train => self.regions[0],
            Split::Val => self.regions[1],
            Split::Test => self.regions[2],
        }
    }

    /// Number of stride-1 windows in a region: `region_len - L - F + 1`.
    pub fn window_count(&self, split: Split) -> usize {
        let r = self.region(split);
        r.len() - self.lookback - self.horizon + 1
    }

    /// Copy window `idx` of `split` into `[M, L]` / `[M, F]` buffers.
    pub fn fill_window(&self, split: Split, idx: usize, input: &mut [f64], target: &mut [f64]) {
        let r = self.region(split);
        let (m, l, h) = (self.channels, self.lookback, self.horizon);
        debug_assert!(idx < self.window_count(split));
        debug_assert_eq!(input.len(), m * l);
        debug_assert_eq!(target.len(), m * h);
        let x0 = r.start + idx;
        for c in 0..m {
            for t in 0..l {
                input[c * l + t] = self.data[(x0 + t) * m + c];
            }
            for t in 0..h {
                target[c * h + t] = self.data[(x0 + l + t) * m + c];
            }
        }
    }

    /// Map a standardized value back to raw units for channel `c`.
    pub fn destandardize(&self, c: usize, v: f64) -> f64 {
        v * self.std[c] + self.mean[c]
    }

    /// Batches over a region. Training passes a seeded RNG to shuffle and
    /// drops the final short batch; evaluation iterates in order and keeps it.
    pub fn batches<R: Rng>(
        &self,
        split: Split,
        batch_size: usize,
        drop_last: bool,
        shuffle: Option<&mut R>,
    ) -> Result<BatchIter<'_>, DatasetError> {
        let mut order: Vec<usize> = (0..self.window_count(split)).collect();
        if let Some(rng) = shuffle {
            order.shuffle(rng);
        }
        self.batches_over(split, order, batch_size, drop_last)
    }

    /// Batches over an explicit window-index order within a region.
    pub fn batches_over(
        &self,
        split: Split,
        order: Vec<usize>,
        batch_size: usize,
        drop_last: bool,
    ) -> Result<BatchIter<'_>, DatasetError> {
        if batch_size == 0 {
            return Err(DatasetError::BadBatchSize);
        }
        debug_assert!(order.iter().all(|&i| i < self.window_count(split)));
        Ok(BatchIter {
            ds: self,
            split,
            order,
            batch_size,
            drop_last,
            pos: 0,
        })
    }
}

pub struct BatchIter<'a> {
    ds: &'a WindowedDataset,
    split: Split,
    order: Vec<usize>,
    batch_size: usize,
    drop_last: bool,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let remaining = self.order.len() - self.pos;
        if remaining == 0 || (self.drop_last && remaining < self.batch_size) {
            return None;
        }
        let len = remaining.min(self.batch_size);
        let (m, l, h) = (self.ds.channels, self.ds.lookback, self.ds.horizon);
        let mut inputs = vec![0.0; len * m * l];
        let mut targets = vec![0.0; len * m * h];
        for b in 0..len {
            let idx = self.order[self.pos + b];
            self.ds.fill_window(
                self.split,
                idx,
                &mut inputs[b * m * l..(b + 1) * m * l],
                &mut targets[b * m * h..(b + 1) * m * h],
            );
        }
        self.pos += len;
        Some(Batch { len, inputs, targets })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_small_csv() {
        let f = write_csv("date,a,b\n2020-01-01,1.0,2.0\n2020-01-02,3.0,4.0\n2020-01-03,5.0,6.0\n");
        let raw = load_csv(f.path()).unwrap();
        assert_eq!(raw.rows, 3);
        assert_eq!(raw.channels(), 2);
        assert_eq!(raw.values, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(raw.channel_names, vec!["a", "b"]);
    }

    #[test]
    fn load_ett_style_file_has_seven_channels() {
        let mut content = String::from("date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n");
        for t in 0..5 {
            content.push_str(&format!("t{t},1,2,3,4,5,6,7\n"));
        }
        let raw = load_csv(write_csv(&content).path()).unwrap();
        assert_eq!(raw.channels(), 7);
    }

    #[test]
    fn blank_cell_names_row_and_column() {
        let f = write_csv("date,a,b\nr1,1.0,2.0\nr2,,4.0\n");
        let err = load_csv(f.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2") && msg.contains("'a'"), "{msg}");
    }

    fn synthetic(rows: usize, m: usize) -> RawSeries {
        let values: Vec<f64> = (0..rows * m).map(|i| (i % 97) as f64 * 0.1).collect();
        RawSeries::from_values((0..m).map(|c| format!("c{c}")).collect(), values)
    }

    #[test]
    fn window_counts_for_fraction_split() {
        let raw = synthetic(100, 2);
        let spec = SplitSpec::fractions(0.6, 0.2, 0.2, 10);
        let ds = split_and_standardize(&raw, &spec, 10, 5).unwrap();
        // train region 60 points: 60 - 10 - 5 + 1
        assert_eq!(ds.window_count(Split::Train), 46);
        // val region 10 + 20 points
        assert_eq!(ds.window_count(Split::Val), 16);
        assert_eq!(ds.window_count(Split::Test), 16);
    }

    #[test]
    fn ett_hourly_window_count_matches_published_table_convention() {
        // 8640 train points, L=96, no horizon: 8640 - 96 + 1 = 8545
        let raw = synthetic(17420, 3);
        let ds = split_and_standardize(&raw, &SplitSpec::ett_hourly(96), 96, 0).unwrap();
        assert_eq!(ds.window_count(Split::Train), 8545);
        assert_eq!(ds.window_count(Split::Val), 2881);
        assert_eq!(ds.window_count(Split::Test), 2881);
    }

    #[test]
    fn ett_minute_window_count_matches_published_table_convention() {
        let raw = synthetic(69680, 1);
        let ds = split_and_standardize(&raw, &SplitSpec::ett_minute(96), 96, 0).unwrap();
        assert_eq!(ds.window_count(Split::Train), 34465);
        assert_eq!(ds.window_count(Split::Val), 11521);
        assert_eq!(ds.window_count(Split::Test), 11521);
    }

    #[test]
    fn constant_channel_standardizes_to_zero_with_floor() {
        let m = 2;
        let mut values = Vec::new();
        for t in 0..50 {
            values.push(4.2); // constant channel
            values.push(t as f64);
        }
        let raw = RawSeries::from_values(vec!["k".into(), "v".into()], values);
        let ds =
            split_and_standardize(&raw, &SplitSpec::fractions(0.6, 0.2, 0.2, 4), 4, 2).unwrap();
        assert_eq!(ds.floored_channels(), &[0]);
        for t in 0..50 {
            assert!(ds.data[t * m].abs() < 1e-12);
        }
    }

    #[test]
    fn standardize_round_trip() {
        let raw = synthetic(80, 3);
        let ds =
            split_and_standardize(&raw, &SplitSpec::fractions(0.7, 0.1, 0.2, 5), 5, 2).unwrap();
        for t in 0..raw.rows {
            for c in 0..3 {
                let back = ds.destandardize(c, ds.data[t * 3 + c]);
                assert!((back - raw.values[t * 3 + c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn batch_counts_respect_drop_last() {
        // 24 points, L=10, F=5 -> 10 train windows
        let raw = synthetic(40, 1);
        let spec = SplitSpec::points(24, 8, 8, 8);
        let ds = split_and_standardize(&raw, &spec, 10, 5).unwrap();
        assert_eq!(ds.window_count(Split::Train), 10);
        let n_dropped = ds
            .batches::<ChaCha8Rng>(Split::Train, 4, true, None)
            .unwrap()
            .count();
        assert_eq!(n_dropped, 2);
        let kept: Vec<Batch> = ds
            .batches::<ChaCha8Rng>(Split::Train, 4, false, None)
            .unwrap()
            .collect();
        assert_eq!(kept.len(), 3);
        assert_eq!(kept[2].len, 2);
    }

    #[test]
    fn same_seed_same_shuffle_order() {
        let raw = synthetic(60, 2);
        let ds =
            split_and_standardize(&raw, &SplitSpec::fractions(0.6, 0.2, 0.2, 6), 6, 2).unwrap();
        let collect = |seed: u64| -> Vec<Vec<f64>> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            ds.batches(Split::Train, 4, true, Some(&mut rng))
                .unwrap()
                .map(|b| b.inputs)
                .collect()
        };
        assert_eq!(collect(7), collect(7));
        assert_ne!(collect(7), collect(8));
    }

    #[test]
    fn train_windows_never_touch_val_or_test_rows() {
        // encode the row index in the data so leakage is detectable
        let rows = 90;
        let values: Vec<f64> = (0..rows).map(|t| t as f64).collect();
        let raw = RawSeries::from_values(vec!["idx".into()], values);
        let spec = SplitSpec::fractions(0.6, 0.2, 0.2, 8);
        let ds = split_and_standardize(&raw, &spec, 8, 3).unwrap();
        let n_train = 54.min((rows as f64 * 0.6) as usize);
        let max_train_row = ds.destandardize(0, {
            let mut max = f64::MIN;
            for b in ds.batches::<ChaCha8Rng>(Split::Train, 4, false, None).unwrap() {
                for &v in b.inputs.iter().chain(b.targets.iter()) {
                    if v > max {
                        max = v;
                    }
                }
            }
            max
        });
        assert!(max_train_row < n_train as f64);
    }

    #[test]
    fn zero_batch_size_rejected() {
        let raw = synthetic(60, 1);
        let ds =
            split_and_standardize(&raw, &SplitSpec::fractions(0.6, 0.2, 0.2, 6), 6, 2).unwrap();
        assert!(matches!(
            ds.batches::<ChaCha8Rng>(Split::Train, 0, true, None),
            Err(DatasetError::BadBatchSize)
        ));
    }

    #[test]
    fn region_too_short_is_rejected() {
        // 24 rows -> train region 14 points, too short for L=10, F=5
        let raw = synthetic(24, 1);
        let err = split_and_standardize(&raw, &SplitSpec::fractions(0.6, 0.2, 0.2, 10), 10, 5)
            .unwrap_err();
        assert!(matches!(err, DatasetError::RegionTooShort { .. }));
    }
}
