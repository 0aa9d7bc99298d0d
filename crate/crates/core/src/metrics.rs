//! Point and quantile errors normalized by the training-window scale, the
//! interquartile mean, and percentile-bootstrap intervals.

use std::io::Write;

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::ForecastEnsemble;

/// Levels `m/(M+1)`, `m = 1..=M`, averaged by [`crps`].
pub const CRPS_LEVELS: usize = 20;
pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const CI_LEVEL: f64 = 0.90;

/// Mean absolute value of a training window. `None` when it is zero and
/// the cell cannot be normalized.
pub fn normalizer<F: Float>(window: &[F]) -> Option<F> {
    if window.is_empty() {
        return None;
    }
    let sum = window.iter().fold(F::zero(), |a, &b| a + b.abs());
    let f = sum / F::from(window.len()).expect("length fits the float type");
    (f > F::zero() && f.is_finite()).then_some(f)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::LengthMismatch { expected: a, actual: b });
    }
    Ok(())
}

/// `(1/H)(1/F) Σ_h |mean_h − X_h|`.
pub fn mad<F: Float>(means: &[F], truth: &[F], f: F) -> Result<F> {
    check_lengths(means.len(), truth.len())?;
    let h = F::from(truth.len()).unwrap();
    let sum = means.iter().zip(truth).fold(F::zero(), |a, (&m, &x)| a + (m - x).abs());
    Ok(sum / (h * f))
}

/// `(1/F) √((1/H) Σ_h (mean_h − X_h)²)`.
pub fn rmse<F: Float>(means: &[F], truth: &[F], f: F) -> Result<F> {
    check_lengths(means.len(), truth.len())?;
    let h = F::from(truth.len()).unwrap();
    let sum = means.iter().zip(truth).fold(F::zero(), |a, (&m, &x)| a + (m - x) * (m - x));
    Ok((sum / h).sqrt() / f)
}

/// `(2/H)(1/F) Σ_h (α − 1{Δ ≤ 0})·Δ` with `Δ = X − q̂`.
pub fn quantile_loss<F: Float>(quantiles: &[F], truth: &[F], alpha: F, f: F) -> Result<F> {
    check_lengths(quantiles.len(), truth.len())?;
    if !(alpha > F::zero() && alpha < F::one()) {
        return Err(Error::InvalidArgument("quantile level outside (0, 1)".into()));
    }
    let h = F::from(truth.len()).unwrap();
    let two = F::one() + F::one();
    let sum = quantiles.iter().zip(truth).fold(F::zero(), |a, (&q, &x)| {
        let delta = x - q;
        let ind = if delta <= F::zero() { F::one() } else { F::zero() };
        a + (alpha - ind) * delta
    });
    Ok(two * sum / (h * f))
}

/// Mean quantile loss over `levels` equispaced levels.
pub fn crps_with(ensemble: &ForecastEnsemble, truth: &[f64], f: f64, levels: usize) -> Result<f64> {
    if levels == 0 {
        return Err(Error::InvalidArgument("CRPS needs at least one level".into()));
    }
    let mut total = 0.0;
    for m in 1..=levels {
        let alpha = m as f64 / (levels + 1) as f64;
        total += quantile_loss(&ensemble.quantiles(alpha)?, truth, alpha, f)?;
    }
    Ok(total / levels as f64)
}

pub fn crps(ensemble: &ForecastEnsemble, truth: &[f64], f: f64) -> Result<f64> {
    crps_with(ensemble, truth, f, CRPS_LEVELS)
}

/// Mean after dropping `⌊n/4⌋` values from each end of the sorted sample.
pub fn iqm<F: Float>(values: &[F]) -> Result<F> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("IQM of no values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let cut = sorted.len() / 4;
    let kept = &sorted[cut..sorted.len() - cut];
    let sum = kept.iter().fold(F::zero(), |a, &b| a + b);
    Ok(sum / F::from(kept.len()).unwrap())
}

/// Percentile-bootstrap interval of the IQM at `level` coverage.
pub fn bootstrap_ci<R: Rng + ?Sized>(values: &[f64], level: f64, resamples: usize, rng: &mut R) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument("bootstrap needs at least two values".into()));
    }
    if !(level > 0.0 && level < 1.0) || resamples == 0 {
        return Err(Error::InvalidArgument("bootstrap level must lie in (0, 1) with resamples > 0".into()));
    }
    let n = values.len();
    let mut stats = Vec::with_capacity(resamples);
    let mut draw = vec![0.0; n];
    for _ in 0..resamples {
        for slot in draw.iter_mut() {
            *slot = values[rng.random_range(0..n)];
        }
        stats.push(iqm(&draw)?);
    }
    stats.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let pick = |q: f64| {
        let rank = ((q * resamples as f64 - 1e-9).ceil() as usize).clamp(1, resamples);
        stats[rank - 1]
    };
    Ok((pick(tail), pick(1.0 - tail)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Mad,
    Rmse,
    /// Quantile loss at a level given in percent.
    Ql(u32),
    Crps,
}

impl Metric {
    pub fn name(&self) -> String {
        match self {
            Metric::Mad => "MAD".into(),
            Metric::Rmse => "RMSE".into(),
            Metric::Ql(pct) => format!("QL{pct}"),
            Metric::Crps => "CRPS".into(),
        }
    }

    /// Default table: MAD, RMSE, QL at 50/75/95%, CRPS.
    pub fn standard() -> Vec<Metric> {
        vec![Metric::Mad, Metric::Rmse, Metric::Ql(50), Metric::Ql(75), Metric::Ql(95), Metric::Crps]
    }

    pub fn evaluate(&self, ensemble: &ForecastEnsemble, truth: &[f64], f: f64) -> Result<f64> {
        match *self {
            Metric::Mad => mad(&ensemble.means()?, truth, f),
            Metric::Rmse => rmse(&ensemble.means()?, truth, f),
            Metric::Ql(pct) => {
                let alpha = pct as f64 / 100.0;
                quantile_loss(&ensemble.quantiles(alpha)?, truth, alpha, f)
            }
            Metric::Crps => crps(ensemble, truth, f),
        }
    }
}

/// One metric value for a (window, series) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub window: usize,
    pub series: usize,
    pub metric: String,
    pub value: f64,
}

/// Aggregate of one metric over all cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub dataset: String,
    pub model: String,
    pub iqm: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub rows: Vec<MetricSummary>,
}

impl MetricReport {
    /// Aggregates cells per metric in the order of `metrics`. Cells are
    /// sorted by (window, series) before resampling so the interval does not
    /// depend on the order they were produced in.
    pub fn aggregate<R: Rng + ?Sized>(
        cells: &[MetricCell],
        metrics: &[Metric],
        dataset: &str,
        model: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let mut rows = Vec::with_capacity(metrics.len());
        for metric in metrics {
            let name = metric.name();
            let mut picked: Vec<&MetricCell> = cells.iter().filter(|c| c.metric == name).collect();
            picked.sort_by_key(|c| (c.window, c.series));
            let values: Vec<f64> = picked.iter().map(|c| c.value).collect();
            if values.is_empty() {
                return Err(Error::InvalidArgument(format!("no cells for metric {name}")));
            }
            let point = iqm(&values)?;
            let (low, high) = if values.len() >= 2 {
                bootstrap_ci(&values, CI_LEVEL, BOOTSTRAP_RESAMPLES, rng)?
            } else {
                (point, point)
            };
            rows.push(MetricSummary {
                metric: name,
                dataset: dataset.into(),
                model: model.into(),
                iqm: point,
                ci_low: low.min(point),
                ci_high: high.max(point),
                cells: values.len(),
            });
        }
        Ok(Self { rows })
    }

    /// CSV with columns `metric,dataset,model,iqm,ci_low,ci_high`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["metric", "dataset", "model", "iqm", "ci_low", "ci_high"])?;
        for r in &self.rows {
            out.write_record([
                r.metric.clone(),
                r.dataset.clone(),
                r.model.clone(),
                r.iqm.to_string(),
                r.ci_low.to_string(),
                r.ci_high.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::InvalidArgument(format!("writing report: {e}")))?;
        Ok(())
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<8} {:<16} {:<8} {:>12} {:>12} {:>12}\n", "metric", "dataset", "model", "iqm", "ci_low", "ci_high");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<8} {:<16} {:<8} {:>12.6} {:>12.6} {:>12.6}\n",
                r.metric, r.dataset, r.model, r.iqm, r.ci_low, r.ci_high
            ));
        }
        s
    }
}
