//! Multivariate series loading, chronological splits and sliding windows.

use std::io::Read;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::numerics::{SeedRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            train: cfg.train.train_ratio,
            val: cfg.train.val_ratio,
            test: cfg.train.test_ratio,
        }
    }

    /// Chronological boundaries: train and val take `floor(n·ratio)` rows,
    /// test takes what remains of its share (all remaining rows when the
    /// ratios sum to one).
    pub fn boundaries(&self, n: usize) -> [Range<usize>; 3] {
        let n_train = (n as f64 * self.train).floor() as usize;
        let n_val = (n as f64 * self.val).floor() as usize;
        let total = self.train + self.val + self.test;
        let n_test = if (total - 1.0).abs() < 1e-9 {
            n - n_train - n_val
        } else {
            ((n as f64 * self.test).floor() as usize).min(n - n_train - n_val)
        };
        let a = n_train;
        let b = a + n_val;
        [0..a, a..b, b..b + n_test]
    }
}

/// Per-column affine standardization fitted on the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesDataset {
    /// `[total_steps, K]`, row-major.
    pub values: Tensor,
    pub columns: Vec<String>,
    pub splits: [Range<usize>; 3],
    pub standardization: Option<Standardization>,
}

impl TimeSeriesDataset {
    pub fn new(values: Tensor, columns: Vec<String>, ratios: SplitRatios) -> Result<Self> {
        let &[n, k] = values.shape() else {
            return Err(Error::Shape(format!("series must be [steps, K], got {:?}", values.shape())));
        };
        if columns.len() != k {
            return Err(Error::Shape(format!("{} column names for {k} columns", columns.len())));
        }
        values.ensure_finite("series values")?;
        Ok(Self {
            values,
            columns,
            splits: ratios.boundaries(n),
            standardization: None,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_vars(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn split_range(&self, split: Split) -> Range<usize> {
        self.splits[split as usize].clone()
    }

    #[inline]
    pub fn value(&self, t: usize, var: usize) -> f64 {
        self.values.data()[t * self.n_vars() + var]
    }

    /// Standardizes every column with mean and population std of the training
    /// split (std of a constant column is replaced by 1).
    pub fn standardize(&mut self) -> Result<()> {
        if self.standardization.is_some() {
            return Err(Error::State("dataset is already standardized".into()));
        }
        let train = self.split_range(Split::Train);
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let k = self.n_vars();
        let n = train.len() as f64;
        let mut mean = vec![0.0; k];
        let mut std = vec![0.0; k];
        for t in train.clone() {
            for (v, m) in mean.iter_mut().enumerate() {
                *m += self.value(t, v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for t in train {
            for v in 0..k {
                std[v] += (self.value(t, v) - mean[v]).powi(2);
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt();
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        self.apply_standardization(Standardization { mean, std })
    }

    /// Applies previously fitted statistics (e.g. restored from a checkpoint).
    pub fn apply_standardization(&mut self, stats: Standardization) -> Result<()> {
        let k = self.n_vars();
        if stats.mean.len() != k || stats.std.len() != k {
            return Err(Error::Shape(format!(
                "standardization for {} columns applied to {k}",
                stats.mean.len()
            )));
        }
        for row in self.values.data_mut().chunks_exact_mut(k) {
            for (v, x) in row.iter_mut().enumerate() {
                *x = (*x - stats.mean[v]) / stats.std[v];
            }
        }
        self.standardization = Some(stats);
        Ok(())
    }

    /// Writes the series as CSV with an hourly timestamp column starting at
    /// 2016-07-01 00:00.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("date");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for t in 0..self.n_steps() {
            out.push_str(&hourly_stamp(t));
            for v in 0..self.n_vars() {
                out.push(',');
                out.push_str(&format!("{}", self.value(t, v)));
            }
            out.push('\n');
        }
        out
    }
}

fn hourly_stamp(hours: usize) -> String {
    // days since 1970-01-01 for 2016-07-01 is 16983
    let days = 16983 + (hours / 24) as i64;
    let (y, m, d) = civil_from_days(days);
    format!("{y:04}-{m:02}-{d:02} {:02}:00:00", hours % 24)
}

fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    let y = yoe + era * 400 + i64::from(m <= 2);
    (y, m, d)
}

/// Parses a header + rows CSV whose first column is a timestamp and whose
/// remaining columns are numeric. Rows and columns in errors are 1-based
/// positions in the file (the header is row 1, the timestamp column 1).
pub fn parse_csv<R: Read>(reader: R, expected_vars: Option<usize>, ratios: SplitRatios) -> Result<TimeSeriesDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_error(&e, 1))?.clone();
    if header.len() < 2 {
        return Err(Error::Parse {
            row: 1,
            col: header.len().max(1),
            msg: "need a timestamp column and at least one value column".into(),
        });
    }
    let columns: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let k = columns.len();
    if let Some(expected) = expected_vars {
        if expected != k {
            return Err(Error::Config(format!("file has {k} value columns, config expects n_vars={expected}")));
        }
    }
    let mut data = Vec::new();
    let mut record = csv::StringRecord::new();
    let mut row = 1;
    loop {
        let more = rdr.read_record(&mut record).map_err(|e| csv_error(&e, row + 1))?;
        if !more {
            break;
        }
        row = record.position().map_or(row + 1, |p| p.line() as usize);
        if record.len() > k + 1 {
            return Err(Error::Parse {
                row,
                col: k + 2,
                msg: format!("unexpected extra cell {:?}", &record[k + 1]),
            });
        }
        for col in 1..=k {
            let cell = record.get(col).unwrap_or("");
            if cell.is_empty() {
                return Err(Error::Parse {
                    row,
                    col: col + 1,
                    msg: format!("missing value for column {:?}", columns[col - 1]),
                });
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                col: col + 1,
                msg: format!("{cell:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    col: col + 1,
                    msg: format!("{cell:?} is not finite"),
                });
            }
            data.push(v);
        }
    }
    let n = data.len() / k;
    if n == 0 {
        return Err(Error::Parse {
            row: 2,
            col: 1,
            msg: "no data rows".into(),
        });
    }
    TimeSeriesDataset::new(Tensor::new(&[n, k], data)?, columns, ratios)
}

fn csv_error(e: &csv::Error, fallback_row: usize) -> Error {
    let row = e.position().map_or(fallback_row, |p| p.line() as usize);
    Error::Parse {
        row,
        col: 1,
        msg: e.to_string(),
    }
}

/// Reads a CSV file, checks its width against `n_vars` and applies the split
/// ratios (and training-split standardization when enabled) from `cfg`.
pub fn load_csv(path: &Path, cfg: &Config) -> Result<TimeSeriesDataset> {
    let file = std::fs::File::open(path)?;
    let mut ds = parse_csv(std::io::BufReader::new(file), Some(cfg.model.n_vars), SplitRatios::from_config(cfg))?;
    if cfg.train.standardize {
        ds.standardize()?;
    }
    Ok(ds)
}

/// One mini-batch: `x` is `[B, L, K]`, `y` is `[B, T, K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
    pub starts: Vec<usize>,
}

/// Batches of every stride-1 window of one split.
#[derive(Clone, Debug)]
pub struct Windows<'a> {
    ds: &'a TimeSeriesDataset,
    starts: Vec<usize>,
    lookback: usize,
    horizon: usize,
    batch_size: usize,
    cursor: usize,
}

impl Windows<'_> {
    /// Window start offsets (absolute row indices) in iteration order.
    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn n_windows(&self) -> usize {
        self.starts.len()
    }

    /// Keeps every `n`-th window (the first included).
    pub fn every(mut self, n: usize) -> Self {
        let n = n.max(1);
        self.starts = self.starts.into_iter().step_by(n).collect();
        self
    }

    pub fn n_batches(&self) -> usize {
        self.starts.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Windows<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.starts.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.starts.len());
        let starts = self.starts[self.cursor..end].to_vec();
        self.cursor = end;
        let k = self.ds.n_vars();
        let b = starts.len();
        let (l, t) = (self.lookback, self.horizon);
        let src = self.ds.values.data();
        let mut x = Vec::with_capacity(b * l * k);
        let mut y = Vec::with_capacity(b * t * k);
        for &s in &starts {
            x.extend_from_slice(&src[s * k..(s + l) * k]);
            y.extend_from_slice(&src[(s + l) * k..(s + l + t) * k]);
        }
        Some(Batch {
            x: Tensor::new(&[b, l, k], x).expect("window shape"),
            y: Tensor::new(&[b, t, k], y).expect("window shape"),
            starts,
        })
    }
}

/// All maximal stride-1 windows of length `lookback + horizon` inside
/// `split`. Training windows are shuffled with `rng`; validation and test
/// windows stay in time order. The last batch may be smaller.
pub fn make_windows<'a>(
    ds: &'a TimeSeriesDataset,
    split: Split,
    lookback: usize,
    horizon: usize,
    batch_size: usize,
    rng: Option<&mut SeedRng>,
) -> Result<Windows<'a>> {
    if batch_size == 0 || lookback == 0 || horizon == 0 {
        return Err(Error::Config("batch size, lookback and horizon must be positive".into()));
    }
    let range = ds.split_range(split);
    let need = lookback + horizon;
    if range.len() < need {
        return Err(Error::Config(format!(
            "{} split has {} steps, windows need {need} (L={lookback} + T={horizon})",
            split.name(),
            range.len()
        )));
    }
    let mut starts: Vec<usize> = (range.start..=range.end - need).collect();
    if split == Split::Train {
        if let Some(rng) = rng {
            starts.shuffle(rng);
        }
    }
    Ok(Windows {
        ds,
        starts,
        lookback,
        horizon,
        batch_size,
        cursor: 0,
    })
}

/// Noisy sinusoids with per-variable period and phase.
pub fn synthetic_sinusoid(n_steps: usize, n_vars: usize, seed: u64, ratios: SplitRatios) -> Result<TimeSeriesDataset> {
    let mut rng = SeedRng::new(seed).split("sinusoid");
    let params: Vec<(f64, f64)> = (0..n_vars)
        .map(|v| (12.0 + 6.0 * v as f64, rng.uniform_in(0.0, std::f64::consts::TAU)))
        .collect();
    let mut data = Vec::with_capacity(n_steps * n_vars);
    for t in 0..n_steps {
        for &(period, phase) in &params {
            let s = (std::f64::consts::TAU * t as f64 / period + phase).sin();
            data.push(s + 0.05 * rng.normal());
        }
    }
    let columns = (0..n_vars).map(|v| format!("sin{v}")).collect();
    TimeSeriesDataset::new(Tensor::new(&[n_steps, n_vars], data)?, columns, ratios)
}

/// Independent AR(1) processes `x_t = phi·x_{t−1} + sigma·ε_t`.
pub fn synthetic_ar1(
    n_steps: usize,
    n_vars: usize,
    phi: f64,
    sigma: f64,
    seed: u64,
    ratios: SplitRatios,
) -> Result<TimeSeriesDataset> {
    if !(phi.abs() < 1.0) {
        return Err(Error::Param(format!("AR coefficient {phi} is not stationary")));
    }
    let mut rng = SeedRng::new(seed).split("ar1");
    let mut state = vec![0.0; n_vars];
    // burn-in so the series starts near stationarity
    for _ in 0..200 {
        for s in &mut state {
            *s = phi * *s + sigma * rng.normal();
        }
    }
    let mut data = Vec::with_capacity(n_steps * n_vars);
    for _ in 0..n_steps {
        for s in &mut state {
            *s = phi * *s + sigma * rng.normal();
            data.push(*s);
        }
    }
    let columns = (0..n_vars).map(|v| format!("ar{v}")).collect();
    TimeSeriesDataset::new(Tensor::new(&[n_steps, n_vars], data)?, columns, ratios)
}

/// Column names of the ETT transformer-load files.
pub const ETT_COLUMNS: [&str; 7] = ["HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL", "OT"];

/// Row count of the hourly ETT files.
pub const ETT_HOURLY_ROWS: usize = 17420;

/// Deterministic stand-in with the shape of an hourly ETT file: six load
/// columns driven by shared daily and weekly cycles, a slow common regime
/// factor and per-column AR noise, plus an oil-temperature column that
/// lags a smoothed load mix.
pub fn ett_surrogate(seed: u64) -> TimeSeriesDataset {
    use std::f64::consts::TAU;
    let n = ETT_HOURLY_ROWS;
    let mut rng = SeedRng::new(seed).split("ett_surrogate");
    let loads = 6;
    let mut col: Vec<(f64, f64, f64, f64, f64)> = Vec::new();
    for _ in 0..loads {
        col.push((
            rng.uniform_in(2.0, 12.0),
            rng.uniform_in(0.8, 2.5),
            rng.uniform_in(0.0, TAU),
            rng.uniform_in(0.3, 1.2),
            rng.uniform_in(0.4, 1.0),
        ));
    }
    let mut regime = 0.0;
    let mut noise = vec![0.0; loads];
    let mut temp = 30.0;
    let mut data = Vec::with_capacity(n * 7);
    for t in 0..n {
        let h = t as f64;
        let daily = (TAU * h / 24.0).sin();
        let daily2 = (TAU * h / 12.0).cos();
        let weekly = (TAU * h / 168.0).sin();
        let yearly = (TAU * h / 8766.0).sin();
        regime = 0.995 * regime + 0.1 * rng.normal();
        let mut mix = 0.0;
        for (j, &(level, amp, phase, wk, load_w)) in col.iter().enumerate() {
            noise[j] = 0.9 * noise[j] + 0.25 * rng.normal();
            let seasonal = amp * ((TAU * h / 24.0 + phase).sin() + 0.35 * daily2) + wk * weekly;
            let v = level + seasonal + 0.8 * regime + 1.5 * yearly + noise[j];
            mix += load_w * v;
            data.push(v);
        }
        temp += 0.02 * (25.0 + 0.4 * mix + 6.0 * yearly + 2.0 * daily - temp) + 0.15 * rng.normal();
        data.push(temp);
    }
    let columns = ETT_COLUMNS.iter().map(|s| s.to_string()).collect();
    TimeSeriesDataset::new(Tensor::new(&[n, 7], data).expect("surrogate shape"), columns, SplitRatios::default())
        .expect("surrogate is finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_csv(rows: usize) -> String {
        let mut s = String::from("date,a,b\n");
        for i in 0..rows {
            s.push_str(&format!("t{i},{},{}\n", i as f64, 10.0 * i as f64));
        }
        s
    }

    #[test]
    fn ten_rows_split_seven_one_two() {
        let ds = parse_csv(toy_csv(10).as_bytes(), Some(2), SplitRatios::default()).unwrap();
        assert_eq!(ds.splits, [0..7, 7..8, 8..10]);
        assert_eq!(ds.columns, vec!["a", "b"]);
        assert_eq!(ds.value(3, 1), 30.0);
    }

    #[test]
    fn missing_cell_names_row_and_column() {
        let text = "date,a,b\nt0,1,2\nt1,3,\n";
        match parse_csv(text.as_bytes(), None, SplitRatios::default()) {
            Err(Error::Parse { row, col, msg }) => {
                assert_eq!((row, col), (3, 3));
                assert!(msg.contains("\"b\""), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let short = "date,a,b\nt0,1\n";
        assert!(matches!(
            parse_csv(short.as_bytes(), None, SplitRatios::default()),
            Err(Error::Parse { row: 2, col: 3, .. })
        ));
    }

    #[test]
    fn non_numeric_cell() {
        let text = "date,a\nt0,1\nt1,abc\n";
        assert!(matches!(
            parse_csv(text.as_bytes(), None, SplitRatios::default()),
            Err(Error::Parse { row: 3, col: 2, .. })
        ));
    }

    #[test]
    fn width_mismatch_is_config_error() {
        assert!(matches!(
            parse_csv(toy_csv(4).as_bytes(), Some(7), SplitRatios::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ett_shaped_file_has_seven_vars() {
        let ds = ett_surrogate(0);
        let text = ds.to_csv();
        assert!(text.starts_with("date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n2016-07-01 00:00:00,"));
        let back = parse_csv(text.as_bytes(), Some(7), SplitRatios::default()).unwrap();
        assert_eq!(back.n_vars(), 7);
        assert_eq!(back.n_steps(), ETT_HOURLY_ROWS);
        assert_eq!(back.values, ds.values);
    }

    #[test]
    fn stamps() {
        assert_eq!(hourly_stamp(0), "2016-07-01 00:00:00");
        assert_eq!(hourly_stamp(24 * 31 + 5), "2016-08-01 05:00:00");
        assert_eq!(hourly_stamp(24 * 184), "2017-01-01 00:00:00");
    }

    #[test]
    fn window_counts() {
        let ds = parse_csv(toy_csv(20).as_bytes(), None, SplitRatios { train: 1.0, val: 0.0, test: 0.0 }).unwrap();
        let w = make_windows(&ds, Split::Train, 4, 2, 3, None).unwrap();
        assert_eq!(w.n_windows(), 15);
        assert_eq!(w.n_batches(), 5);
        let ds = TimeSeriesDataset::new(Tensor::zeros(&[10, 1]), vec!["a".into()], SplitRatios { train: 1.0, val: 0.0, test: 0.0 })
            .unwrap();
        assert_eq!(make_windows(&ds, Split::Train, 6, 4, 8, None).unwrap().n_windows(), 1);
        assert!(matches!(make_windows(&ds, Split::Train, 7, 4, 8, None), Err(Error::Config(_))));
    }

    #[test]
    fn partial_last_batch_kept() {
        let ds = parse_csv(toy_csv(20).as_bytes(), None, SplitRatios { train: 1.0, val: 0.0, test: 0.0 }).unwrap();
        let sizes: Vec<usize> = make_windows(&ds, Split::Train, 4, 2, 4, None)
            .unwrap()
            .map(|b| b.x.shape()[0])
            .collect();
        assert_eq!(sizes, vec![4, 4, 4, 3]);
    }

    #[test]
    fn shuffle_only_for_train() {
        let ds = parse_csv(toy_csv(40).as_bytes(), None, SplitRatios { train: 0.5, val: 0.5, test: 0.0 }).unwrap();
        let mut rng = SeedRng::new(3);
        let val = make_windows(&ds, Split::Val, 4, 2, 4, Some(&mut rng)).unwrap();
        assert_eq!(val.starts(), (20..=34).collect::<Vec<_>>().as_slice());
        let train = make_windows(&ds, Split::Train, 4, 2, 4, Some(&mut rng)).unwrap();
        let mut sorted = train.starts().to_vec();
        assert_ne!(sorted, (0..=14).collect::<Vec<_>>());
        sorted.sort_unstable();
        assert_eq!(sorted, (0..=14).collect::<Vec<_>>());
    }

    #[test]
    fn standardization_uses_train_split() {
        let mut ds = parse_csv(toy_csv(10).as_bytes(), None, SplitRatios::default()).unwrap();
        ds.standardize().unwrap();
        let st = ds.standardization.clone().unwrap();
        assert!((st.mean[0] - 3.0).abs() < 1e-12);
        assert!((st.std[0] - 2.0).abs() < 1e-12);
        let train: Vec<f64> = (0..7).map(|t| ds.value(t, 1)).collect();
        let m = train.iter().sum::<f64>() / 7.0;
        assert!(m.abs() < 1e-12);
        assert!(matches!(ds.standardize(), Err(Error::State(_))));
    }

    #[test]
    fn generators_are_deterministic() {
        let r = SplitRatios::default();
        assert_eq!(synthetic_ar1(50, 2, 0.8, 1.0, 4, r).unwrap(), synthetic_ar1(50, 2, 0.8, 1.0, 4, r).unwrap());
        assert_ne!(synthetic_ar1(50, 2, 0.8, 1.0, 4, r).unwrap(), synthetic_ar1(50, 2, 0.8, 1.0, 5, r).unwrap());
        assert_eq!(synthetic_sinusoid(30, 2, 1, r).unwrap(), synthetic_sinusoid(30, 2, 1, r).unwrap());
        assert_eq!(ett_surrogate(9).values, ett_surrogate(9).values);
    }
}
