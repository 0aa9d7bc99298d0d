//! Monte Carlo simulation of future trajectories, empirical quantiles and
//! ensemble means.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{softmax, Decoder, Parameters, PAD_TOKEN};
use crate::tokenizer::{decode_value, tokenize_segment, Scaler, TokenizerConfig};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// Forecast horizon `H`.
    pub horizon: usize,
    /// Trajectories `I`.
    pub trajectories: usize,
    pub seed: u64,
    /// Trajectories decoded together; bounds memory.
    pub chunk: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { horizon: 24, trajectories: 1024, seed: 0, chunk: 256 }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.trajectories == 0 || self.chunk == 0 {
            return Err(Error::Config("horizon, trajectories and chunk must be positive".into()));
        }
        Ok(())
    }
}

/// `I × H` simulated values for one series in one window.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastEnsemble {
    pub samples: Array2<f64>,
    /// Scaler state right after the context.
    pub scaler: Scaler,
    pub series: usize,
    pub window: usize,
}

impl ForecastEnsemble {
    pub fn trajectories(&self) -> usize {
        self.samples.nrows()
    }

    pub fn horizon(&self) -> usize {
        self.samples.ncols()
    }

    pub fn tagged(mut self, series: usize, window: usize) -> Self {
        self.series = series;
        self.window = window;
        self
    }

    fn column(&self, h: usize) -> Result<ArrayView1<'_, f64>> {
        if self.samples.is_empty() {
            return Err(Error::InvalidArgument("empty ensemble".into()));
        }
        if h == 0 || h > self.horizon() {
            return Err(Error::InvalidArgument(format!("horizon step {h} outside 1..={}", self.horizon())));
        }
        Ok(self.samples.column(h - 1))
    }

    /// Lower empirical `alpha`-quantile at 1-based step `h`.
    pub fn quantile(&self, alpha: f64, h: usize) -> Result<f64> {
        empirical_quantile(&self.column(h)?.to_vec(), alpha)
    }

    /// Mean of the samples at 1-based step `h`.
    pub fn mean(&self, h: usize) -> Result<f64> {
        ensemble_mean(&self.column(h)?.to_vec())
    }

    pub fn means(&self) -> Result<Vec<f64>> {
        (1..=self.horizon()).map(|h| self.mean(h)).collect()
    }

    pub fn quantiles(&self, alpha: f64) -> Result<Vec<f64>> {
        (1..=self.horizon()).map(|h| self.quantile(alpha, h)).collect()
    }
}

/// Order statistic of rank `⌈α·n⌉`.
pub fn empirical_quantile(samples: &[f64], alpha: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty ensemble".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile level {alpha} outside (0, 1)")));
    }
    let n = samples.len();
    // Guard against α·n landing a hair above an integer.
    let rank = ((alpha * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[rank - 1])
}

pub fn ensemble_mean(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty ensemble".into()));
    }
    Ok(samples.iter().sum::<f64>() / samples.len() as f64)
}

/// Multinomial draw at temperature 1 by inverting the CDF.
pub fn sample_digit<R: Rng + ?Sized>(probabilities: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let total: f64 = probabilities.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probabilities.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if target < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Independent stream of trajectory `index` under `seed`.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Samples `horizon` future values `trajectories` times, each continuing
/// `context` digit by digit.
pub fn simulate<T: Scalar>(
    params: &Parameters<T>,
    context: &[f64],
    tokenizer: &TokenizerConfig,
    config: &SimulationConfig,
) -> Result<ForecastEnsemble> {
    config.validate()?;
    if context.is_empty() {
        return Err(Error::InvalidArgument("empty context".into()));
    }
    let p = tokenizer.precision;
    let needed = (context.len() + config.horizon) * p;
    if needed > params.config.max_seq_len {
        return Err(Error::SequenceTooLong { len: needed, max: params.config.max_seq_len });
    }
    let (seq, initial) = tokenize_segment(context, tokenizer)?;
    let mut scaler = initial;
    scaler.observe_all(context);

    let mut prefix = Vec::with_capacity(seq.len() + 1);
    prefix.push(PAD_TOKEN);
    prefix.extend_from_slice(&seq.tokens);

    let decoder = Decoder::new(params);
    let starts: Vec<usize> = (0..config.trajectories).step_by(config.chunk).collect();
    let chunks: Vec<Result<Array2<f64>>> = starts
        .par_iter()
        .map(|&start| {
            let batch = config.chunk.min(config.trajectories - start);
            simulate_chunk(&decoder, &prefix, scaler, tokenizer, config, start, batch)
        })
        .collect();

    let mut samples = Array2::zeros((config.trajectories, config.horizon));
    for (&start, chunk) in starts.iter().zip(chunks) {
        let chunk = chunk?;
        samples.slice_mut(ndarray::s![start..start + chunk.nrows(), ..]).assign(&chunk);
    }
    Ok(ForecastEnsemble { samples, scaler, series: 0, window: 0 })
}

fn simulate_chunk<T: Scalar>(
    decoder: &Decoder<'_, T>,
    prefix: &[usize],
    scaler: Scaler,
    tokenizer: &TokenizerConfig,
    config: &SimulationConfig,
    start: usize,
    batch: usize,
) -> Result<Array2<f64>> {
    let p = tokenizer.precision;
    let steps = config.horizon * p;
    let mut state = decoder.prefill(prefix, batch, steps - 1)?;
    let mut rngs: Vec<ChaCha8Rng> = (0..batch).map(|b| trajectory_rng(config.seed, (start + b) as u64)).collect();
    let mut scalers = vec![scaler; batch];
    let mut groups = vec![Vec::with_capacity(p); batch];
    let mut out = Array2::zeros((batch, config.horizon));

    for k in 0..steps {
        let tokens: Vec<usize> = state
            .logits
            .outer_iter()
            .zip(&mut rngs)
            .map(|(row, rng)| {
                let logits: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                sample_digit(&softmax(&logits), rng)
            })
            .collect();
        for (b, &t) in tokens.iter().enumerate() {
            groups[b].push(t);
            if groups[b].len() == p {
                out[[b, k / p]] = decode_value(&groups[b], &mut scalers[b], tokenizer)?;
                groups[b].clear();
            }
        }
        if k + 1 < steps {
            decoder.step(&mut state, &tokens)?;
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct EnsembleRow {
    series: usize,
    trajectory: usize,
    h: usize,
    value: f64,
}

/// Long-format CSV (`series,trajectory,h,value`, `h` 1-based) of the
/// ensembles of one window.
pub fn write_ensembles_csv<W: Write>(writer: W, ensembles: &[ForecastEnsemble]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    for e in ensembles {
        for ((i, h), &value) in e.samples.indexed_iter() {
            out.serialize(EnsembleRow { series: e.series, trajectory: i, h: h + 1, value })?;
        }
    }
    out.flush().map_err(|e| Error::Checkpoint(format!("writing ensembles: {e}")))?;
    Ok(())
}

/// Reads ensembles written by [`write_ensembles_csv`], skipping `#`
/// comment lines. The scaler field is not stored and comes back as a
/// unit context scaler.
pub fn read_ensembles_csv<R: Read>(reader: R, window: usize) -> Result<Vec<ForecastEnsemble>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    let mut by_series: std::collections::BTreeMap<usize, Vec<EnsembleRow>> = Default::default();
    for row in rdr.deserialize() {
        let row: EnsembleRow = row?;
        by_series.entry(row.series).or_default().push(row);
    }
    by_series
        .into_iter()
        .map(|(series, rows)| {
            let n = rows.iter().map(|r| r.trajectory + 1).max().unwrap_or(0);
            let horizon = rows.iter().map(|r| r.h).max().unwrap_or(0);
            if n * horizon != rows.len() || rows.iter().any(|r| r.h == 0) {
                return Err(Error::InvalidArgument(format!("ensemble for series {series} is not a full grid")));
            }
            let mut samples = Array2::from_elem((n, horizon), f64::NAN);
            for r in rows {
                samples[[r.trajectory, r.h - 1]] = r.value;
            }
            if samples.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("ensemble for series {series} has missing cells")));
            }
            Ok(ForecastEnsemble {
                samples,
                scaler: Scaler::Context(crate::tokenizer::ScalerState { mu: 1.0 }),
                series,
                window,
            })
        })
        .collect()
}
