//! Datasets, synthetic series and the rolling-window schedule.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `S` real-valued series of common length `L`, stored row-per-series.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub values: Array2<f64>,
    pub frequency: String,
    pub timestamps: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, values: Array2<f64>) -> Result<Self> {
        if let Some(((s, t), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite value in series {s} at timestep {t}"
            )));
        }
        Ok(Self {
            name: name.into(),
            values,
            frequency: String::new(),
            timestamps: None,
        })
    }

    pub fn num_series(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    pub fn series(&self, s: usize) -> ndarray::ArrayView1<'_, f64> {
        self.values.row(s)
    }

    /// Writes the dataset in the same CSV layout [`load_dataset`] reads.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = csv::Writer::from_path(path)?;
        let mut header = Vec::with_capacity(self.num_series() + 1);
        if self.timestamps.is_some() {
            header.push("timestamp".to_string());
        }
        header.extend((0..self.num_series()).map(|s| format!("series_{s}")));
        out.write_record(&header)?;
        for t in 0..self.len() {
            let mut record = Vec::with_capacity(header.len());
            if let Some(ts) = &self.timestamps {
                record.push(ts[t].clone());
            }
            // `{}` on f64 prints the shortest representation that parses back exactly.
            record.extend(self.values.column(t).iter().map(|v| format!("{v}")));
            out.write_record(&record)?;
        }
        out.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Column layout of a CSV dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvLayout {
    /// Name of the timestamp column, if the file has one.
    #[serde(default)]
    pub timestamp_column: Option<String>,
    /// Value columns to load; every non-timestamp column when absent.
    #[serde(default)]
    pub value_columns: Option<Vec<String>>,
}

pub fn load_dataset(path: &Path, layout: &CsvLayout) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let headers = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Config(format!("{}: no column named {name:?}", path.display()))
        })
    };

    let ts_idx = layout.timestamp_column.as_deref().map(find).transpose()?;
    let value_idx: Vec<usize> = match &layout.value_columns {
        Some(cols) => cols.iter().map(|c| find(c)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&i| Some(i) != ts_idx).collect(),
    };
    if value_idx.is_empty() {
        return Err(Error::Config(format!("{}: no value columns", path.display())));
    }

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); value_idx.len()];
    let mut timestamps = ts_idx.map(|_| Vec::new());
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        // Data rows are 1-based after the header line.
        let line = row + 2;
        if record.len() != headers.len() {
            return Err(Error::Cell {
                path: path.to_path_buf(),
                row: line,
                column: "*".into(),
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        if let (Some(i), Some(ts)) = (ts_idx, timestamps.as_mut()) {
            ts.push(record[i].to_string());
        }
        for (k, &i) in value_idx.iter().enumerate() {
            let cell = record[i].trim();
            let value: f64 = cell.parse().map_err(|_| Error::Cell {
                path: path.to_path_buf(),
                row: line,
                column: headers[i].to_string(),
                message: format!("not a number: {cell:?}"),
            })?;
            if !value.is_finite() {
                return Err(Error::Cell {
                    path: path.to_path_buf(),
                    row: line,
                    column: headers[i].to_string(),
                    message: "non-finite value".into(),
                });
            }
            columns[k].push(value);
        }
    }

    let len = columns[0].len();
    let flat: Vec<f64> = columns.into_iter().flatten().collect();
    let values = Array2::from_shape_vec((value_idx.len(), len), flat)
        .expect("all columns have one entry per row");
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Dataset {
        name,
        values,
        frequency: String::new(),
        timestamps,
    })
}

/// Index ranges of one rolling window: `[train_start, train_end)` for
/// fitting, `[eval_start, eval_end)` for the horizon right after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowEntry {
    pub train_start: usize,
    pub train_end: usize,
    pub eval_start: usize,
    pub eval_end: usize,
}

impl WindowEntry {
    pub fn train_len(&self) -> usize {
        self.train_end - self.train_start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub window_len: usize,
    pub horizon: usize,
    pub count: usize,
    pub stride: usize,
    pub entries: Vec<WindowEntry>,
}

/// Lays out `count` windows so that the last evaluation horizon ends exactly
/// at the end of the data and earlier windows step back by `stride`.
pub fn make_window_plan(
    len: usize,
    window_len: usize,
    horizon: usize,
    count: usize,
    stride: usize,
) -> Result<WindowPlan> {
    if window_len == 0 || horizon == 0 || count == 0 {
        return Err(Error::InvalidArgument(
            "window_len, horizon and count must be positive".into(),
        ));
    }
    if count > 1 && stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let required = window_len + horizon + (count - 1) * stride;
    if required > len {
        return Err(Error::TooShort {
            required,
            available: len,
        });
    }
    let entries = (0..count)
        .map(|w| {
            let train_start = len - (window_len + horizon) - (count - 1 - w) * stride;
            let train_end = train_start + window_len;
            WindowEntry {
                train_start,
                train_end,
                eval_start: train_end,
                eval_end: train_end + horizon,
            }
        })
        .collect();
    Ok(WindowPlan {
        window_len,
        horizon,
        count,
        stride,
        entries,
    })
}

/// A raw training segment. Carries no series id or timestamp into the model;
/// the indices are kept only for bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub series_index: usize,
    pub start: usize,
    pub segment: Vec<f64>,
}

pub fn sample_training_example<R: Rng + ?Sized>(
    dataset: &Dataset,
    window: &WindowEntry,
    len: usize,
    rng: &mut R,
) -> Result<TrainingExample> {
    if window.train_len() < len || len == 0 {
        return Err(Error::InvalidArgument(format!(
            "training window of {} steps cannot hold a segment of {len}",
            window.train_len()
        )));
    }
    let series_index = rng.random_range(0..dataset.num_series());
    let start = rng.random_range(window.train_start..=window.train_end - len);
    let segment = dataset
        .series(series_index)
        .slice(ndarray::s![start..start + len])
        .to_vec();
    Ok(TrainingExample {
        series_index,
        start,
        segment,
    })
}

/// Uniformly random permutation of the raw timesteps.
pub fn shuffle_context<R: Rng + ?Sized>(segment: &[f64], rng: &mut R) -> Vec<f64> {
    let mut out = segment.to_vec();
    out.shuffle(rng);
    out
}

/// Interleaves a `d × T` block timestep-major: output `t·d + j` is `x[j][t]`.
pub fn flatten_multivariate(x: ArrayView2<'_, f64>) -> Vec<f64> {
    x.t().iter().copied().collect()
}

pub fn unflatten_multivariate(flat: &[f64], d: usize) -> Result<Array2<f64>> {
    if d == 0 || !flat.len().is_multiple_of(d) {
        return Err(Error::InvalidArgument(format!(
            "length {} is not a multiple of {d}",
            flat.len()
        )));
    }
    let t = flat.len() / d;
    Ok(Array2::from_shape_fn((d, t), |(j, k)| flat[k * d + j]))
}

/// Synthetic process families used for calibration runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SynthKind {
    /// `offset + amplitude·sin(2π(t + s·phase_step)/period) + noise·N(0,1)`.
    Sine {
        period: f64,
        amplitude: f64,
        offset: f64,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        phase_step: f64,
    },
    IidUniform { low: f64, high: f64 },
    /// `x_t = mean + phi·(x_{t-1} - mean) + sigma·N(0,1)`.
    Ar1 { phi: f64, sigma: f64, mean: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(flatten)]
    pub kind: SynthKind,
    pub length: usize,
    pub series: usize,
    pub seed: u64,
}

impl SynthKind {
    /// Exact `q`-quantile of the stationary marginal, where it has a closed form.
    pub fn marginal_quantile(&self, q: f64) -> Option<f64> {
        match *self {
            SynthKind::IidUniform { low, high } => Some(low + q * (high - low)),
            _ => None,
        }
    }
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    if spec.length == 0 || spec.series == 0 {
        return Err(Error::InvalidArgument("synthetic length and series must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = Array2::zeros((spec.series, spec.length));
    for s in 0..spec.series {
        let mut row = values.row_mut(s);
        match spec.kind {
            SynthKind::Sine {
                period,
                amplitude,
                offset,
                noise,
                phase_step,
            } => {
                for (t, v) in row.iter_mut().enumerate() {
                    let phase = 2.0 * std::f64::consts::PI * (t as f64 + s as f64 * phase_step) / period;
                    let eps: f64 = if noise > 0.0 { StandardNormal.sample(&mut rng) } else { 0.0 };
                    *v = offset + amplitude * phase.sin() + noise * eps;
                }
            }
            SynthKind::IidUniform { low, high } => {
                if high <= low {
                    return Err(Error::InvalidArgument("uniform bounds must satisfy low < high".into()));
                }
                for v in row.iter_mut() {
                    *v = rng.random_range(low..high);
                }
            }
            SynthKind::Ar1 { phi, sigma, mean } => {
                let mut x = mean;
                for v in row.iter_mut() {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    x = mean + phi * (x - mean) + sigma * eps;
                    *v = x;
                }
            }
        }
    }
    let name = match spec.kind {
        SynthKind::Sine { .. } => "synthetic_sine",
        SynthKind::IidUniform { .. } => "synthetic_uniform",
        SynthKind::Ar1 { .. } => "synthetic_ar1",
    };
    Dataset::new(name, values)
}
