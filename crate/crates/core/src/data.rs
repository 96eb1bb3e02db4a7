//! Labeled series ingestion, train-split normalization and non-overlapping
//! windowing.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CocaError, Result};

/// Channel std below this is treated as a constant channel and replaced by 1.
pub const DEGENERATE_STD: f64 = 1e-8;

/// One labeled (possibly multivariate) time series with a train/test split.
///
/// `values` is row-major `[length × channels]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesObject {
    pub id: String,
    pub values: Vec<f64>,
    pub labels: Vec<u8>,
    pub channels: usize,
    pub train_end: usize,
    /// False when the source had no label column; `labels` is then all zero.
    pub labels_present: bool,
}

impl TimeSeriesObject {
    pub fn new(
        id: impl Into<String>,
        values: Vec<f64>,
        labels: Vec<u8>,
        channels: usize,
        train_end: usize,
    ) -> Result<Self> {
        let ts = TimeSeriesObject {
            id: id.into(),
            values,
            labels,
            channels,
            train_end,
            labels_present: true,
        };
        ts.validate()?;
        Ok(ts)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(CocaError::InvalidSeries(
                "channel count must be >= 1".into(),
            ));
        }
        if self.values.len() % self.channels != 0 {
            return Err(CocaError::InvalidSeries(format!(
                "{} values do not divide into {} channels",
                self.values.len(),
                self.channels
            )));
        }
        let len = self.len();
        if self.labels.len() != len {
            return Err(CocaError::LengthMismatch {
                left: self.labels.len(),
                right: len,
            });
        }
        if self.train_end == 0 || self.train_end >= len {
            return Err(CocaError::InvalidSeries(format!(
                "train_end {} must lie strictly inside (0, {len})",
                self.train_end
            )));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l > 1) {
            return Err(CocaError::InvalidSeries(format!("label {bad} is not 0/1")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn value(&self, t: usize, channel: usize) -> f64 {
        self.values[t * self.channels + channel]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.channels..(t + 1) * self.channels]
    }

    /// Labels restricted to the test split `[train_end, len)`.
    pub fn test_labels(&self) -> &[u8] {
        &self.labels[self.train_end..]
    }
}

/// How the train/test boundary is chosen when loading a file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TrainSplit {
    /// Leading fraction of points used for training.
    Fraction(f64),
    /// Explicit first test index.
    Index(usize),
}

impl TrainSplit {
    fn resolve(self, len: usize) -> Result<usize> {
        let end = match self {
            TrainSplit::Fraction(f) => {
                if !(f > 0.0 && f < 1.0) {
                    return Err(CocaError::Schema(format!(
                        "train fraction {f} must be in (0, 1)"
                    )));
                }
                ((len as f64) * f).round() as usize
            }
            TrainSplit::Index(i) => i,
        };
        Ok(end.clamp(1, len.saturating_sub(1).max(1)))
    }
}

/// Column mapping for [`load_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub value_columns: Vec<String>,
    pub label_column: Option<String>,
    pub train_split: TrainSplit,
}

impl CsvSchema {
    pub fn univariate(value: &str, label: Option<&str>, train_split: TrainSplit) -> Self {
        CsvSchema {
            value_columns: vec![value.to_string()],
            label_column: label.map(str::to_string),
            train_split,
        }
    }
}

/// Read a headed CSV file. A label column that is missing from the header
/// yields all-zero labels with `labels_present == false`.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<TimeSeriesObject> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CocaError::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "series".into());
    read_csv(file, &id, schema)
}

pub fn read_csv<R: std::io::Read>(
    reader: R,
    id: &str,
    schema: &CsvSchema,
) -> Result<TimeSeriesObject> {
    if schema.value_columns.is_empty() {
        return Err(CocaError::Schema("no value columns named".into()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| CocaError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let width = header.len();
    let find = |name: &str| header.iter().position(|h| h == name);
    let value_idx = schema
        .value_columns
        .iter()
        .map(|c| find(c).ok_or_else(|| CocaError::Schema(format!("column `{c}` not in header"))))
        .collect::<Result<Vec<_>>>()?;
    let label_idx = schema.label_column.as_deref().and_then(find);

    let channels = value_idx.len();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| CocaError::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != width {
            return Err(CocaError::Schema(format!(
                "line {line}: expected {width} columns, found {}",
                record.len()
            )));
        }
        for &j in &value_idx {
            let cell = &record[j];
            let v: f64 = cell.parse().map_err(|_| CocaError::Parse {
                line,
                message: format!("non-numeric value `{cell}` in column `{}`", &header[j]),
            })?;
            values.push(v);
        }
        if let Some(j) = label_idx {
            let label = match &record[j] {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(CocaError::Parse {
                        line,
                        message: format!("label `{other}` is not 0 or 1"),
                    })
                }
            };
            labels.push(label);
        }
    }
    let len = values.len() / channels;
    if len < 2 {
        return Err(CocaError::InvalidSeries(format!("{id}: fewer than 2 rows")));
    }
    let labels_present = label_idx.is_some();
    if !labels_present {
        labels = vec![0; len];
    }
    let ts = TimeSeriesObject {
        id: id.to_string(),
        values,
        labels,
        channels,
        train_end: schema.train_split.resolve(len)?,
        labels_present,
    };
    ts.validate()?;
    Ok(ts)
}

/// Column names used by [`write_csv`]: `value` for univariate series,
/// `value_0..value_{d-1}` otherwise, followed by `label`.
pub fn default_value_columns(channels: usize) -> Vec<String> {
    if channels == 1 {
        vec!["value".to_string()]
    } else {
        (0..channels).map(|j| format!("value_{j}")).collect()
    }
}

pub fn write_csv(ts: &TimeSeriesObject, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = File::create(path).map_err(|e| CocaError::io(path, e))?;
    let mut text = default_value_columns(ts.channels).join(",");
    text.push_str(",label\n");
    for t in 0..ts.len() {
        for v in ts.row(t) {
            // `{:?}` keeps full precision so a reload is bit-exact.
            text.push_str(&format!("{v:?},"));
        }
        text.push_str(if ts.labels[t] == 1 { "1\n" } else { "0\n" });
    }
    out.write_all(text.as_bytes())
        .map_err(|e| CocaError::io(path, e))
}

/// Per-channel statistics fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Population mean/std per channel over `[0, train_end)`.
pub fn fit_normalizer(ts: &TimeSeriesObject) -> Result<NormStats> {
    if ts.train_end < 2 {
        return Err(CocaError::InvalidSeries(format!(
            "{}: need at least 2 training points, have {}",
            ts.id, ts.train_end
        )));
    }
    let n = ts.train_end as f64;
    let d = ts.channels;
    let mut mean = vec![0.0; d];
    for t in 0..ts.train_end {
        for (m, v) in mean.iter_mut().zip(ts.row(t)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for t in 0..ts.train_end {
        for j in 0..d {
            let c = ts.value(t, j) - mean[j];
            var[j] += c * c;
        }
    }
    let std = var
        .into_iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s < DEGENERATE_STD {
                1.0
            } else {
                s
            }
        })
        .collect();
    Ok(NormStats { mean, std })
}

pub fn normalize(ts: &TimeSeriesObject, stats: &NormStats) -> Result<TimeSeriesObject> {
    if stats.mean.len() != ts.channels || stats.std.len() != ts.channels {
        return Err(CocaError::DimensionMismatch {
            expected: ts.channels,
            actual: stats.mean.len(),
        });
    }
    let d = ts.channels;
    let values = ts
        .values
        .iter()
        .enumerate()
        .map(|(k, v)| (v - stats.mean[k % d]) / stats.std[k % d])
        .collect();
    Ok(TimeSeriesObject {
        values,
        ..ts.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

/// `N` windows of `window_len × channels` values (time-major within a window).
///
/// Spans are half-open `[start, end)` point ranges in the source series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowBatch {
    pub windows: Vec<f64>,
    pub window_labels: Vec<u8>,
    pub spans: Vec<(usize, usize)>,
    pub window_len: usize,
    pub channels: usize,
    pub object_id: String,
}

impl WindowBatch {
    pub fn empty(window_len: usize, channels: usize, object_id: impl Into<String>) -> Self {
        WindowBatch {
            windows: Vec::new(),
            window_labels: Vec::new(),
            spans: Vec::new(),
            window_len,
            channels,
            object_id: object_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.window_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window_labels.is_empty()
    }

    pub fn window_size(&self) -> usize {
        self.window_len * self.channels
    }

    pub fn window(&self, i: usize) -> &[f64] {
        let w = self.window_size();
        &self.windows[i * w..(i + 1) * w]
    }

    /// Append all windows of `other` (shapes must agree).
    pub fn extend(&mut self, other: &WindowBatch) -> Result<()> {
        if other.window_len != self.window_len || other.channels != self.channels {
            return Err(CocaError::DimensionMismatch {
                expected: self.window_size(),
                actual: other.window_size(),
            });
        }
        self.windows.extend_from_slice(&other.windows);
        self.window_labels.extend_from_slice(&other.window_labels);
        self.spans.extend_from_slice(&other.spans);
        Ok(())
    }

    /// Windows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> WindowBatch {
        let mut out = WindowBatch::empty(self.window_len, self.channels, self.object_id.clone());
        for &i in indices {
            out.windows.extend_from_slice(self.window(i));
            out.window_labels.push(self.window_labels[i]);
            out.spans.push(self.spans[i]);
        }
        out
    }
}

/// Cut the chosen split into non-overlapping windows of `window_len` points;
/// the trailing remainder is dropped.
pub fn make_windows(ts: &TimeSeriesObject, window_len: usize, split: Split) -> Result<WindowBatch> {
    if window_len < 2 {
        return Err(CocaError::Config(format!(
            "window length {window_len} must be >= 2"
        )));
    }
    let (lo, hi) = match split {
        Split::Train => (0, ts.train_end),
        Split::Test => (ts.train_end, ts.len()),
    };
    let count = (hi - lo) / window_len;
    if count == 0 {
        return Err(CocaError::EmptyBatch(format!(
            "{} {:?} split has {} points, fewer than window length {window_len}",
            ts.id,
            split,
            hi - lo
        )));
    }
    let d = ts.channels;
    let mut batch = WindowBatch::empty(window_len, d, ts.id.clone());
    batch.windows.reserve(count * window_len * d);
    for w in 0..count {
        let start = lo + w * window_len;
        let end = start + window_len;
        batch
            .windows
            .extend_from_slice(&ts.values[start * d..end * d]);
        batch
            .window_labels
            .push(ts.labels[start..end].iter().copied().max().unwrap_or(0));
        batch.spans.push((start, end));
    }
    Ok(batch)
}

/// Standardise with train-split statistics, then window the chosen split.
pub fn normalized_windows(
    ts: &TimeSeriesObject,
    window_len: usize,
    split: Split,
) -> Result<WindowBatch> {
    let stats = fit_normalizer(ts)?;
    make_windows(&normalize(ts, &stats)?, window_len, split)
}
