//! Kupiec proportion-of-failures test over rolling windows.

use std::io::Write;

use ndarray::Array3;
use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_LEVELS: [f64; 3] = [0.5, 0.75, 0.95];
pub const DEFAULT_GAMMA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViolationCount {
    pub violations: usize,
    pub windows: usize,
    pub level: f64,
}

/// Number of windows where the truth lies strictly above the predicted
/// quantile.
pub fn count_violations(quantiles: &[f64], truth: &[f64], level: f64) -> Result<ViolationCount> {
    if quantiles.len() != truth.len() {
        return Err(Error::LengthMismatch { expected: quantiles.len(), actual: truth.len() });
    }
    let violations = quantiles.iter().zip(truth).filter(|(q, x)| q < x).count();
    Ok(ViolationCount { violations, windows: truth.len(), level })
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// Likelihood-ratio statistic of `violations` out of `windows` against the
/// nominal violation rate `1 − level`.
pub fn kupiec_statistic(violations: usize, windows: usize, level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile level {level} outside (0, 1)")));
    }
    if windows == 0 || violations > windows {
        return Err(Error::InvalidArgument(format!("{violations} violations out of {windows} windows")));
    }
    let v = violations as f64;
    let w = windows as f64;
    let rate = v / w;
    let t = 2.0 * (xlogy(v, rate / (1.0 - level)) + xlogy(w - v, (1.0 - rate) / level));
    Ok(t.max(0.0))
}

/// `P(χ²₁ > t) = erfc(√(t/2))`.
pub fn chi2_sf_1dof(t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("chi-square statistic {t} is negative")));
    }
    Ok(libm::erfc((t / 2.0).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BacktestCell {
    pub series: usize,
    /// 1-based.
    pub horizon: usize,
    pub level: f64,
    pub v_hat: usize,
    #[serde(rename = "T")]
    pub statistic: f64,
    pub p_value: f64,
    pub pass: bool,
}

/// Kupiec p-values indexed `[series, horizon − 1, level]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BacktestMatrix {
    pub levels: Vec<f64>,
    pub gamma: f64,
    pub windows: usize,
    pub violations: Array3<usize>,
    pub statistics: Array3<f64>,
    pub p_values: Array3<f64>,
}

impl BacktestMatrix {
    /// `quantiles[s][h][l]` and `truth[s][h]` hold one entry per window.
    pub fn from_windows(quantiles: &[Vec<Vec<Vec<f64>>>], truth: &[Vec<Vec<f64>>], levels: &[f64], gamma: f64) -> Result<Self> {
        let series = truth.len();
        let horizon = truth.first().map_or(0, Vec::len);
        let windows = truth.first().and_then(|t| t.first()).map_or(0, Vec::len);
        if series == 0 || horizon == 0 || windows == 0 {
            return Err(Error::InvalidArgument("backtest needs at least one series, step and window".into()));
        }
        if quantiles.len() != series {
            return Err(Error::LengthMismatch { expected: series, actual: quantiles.len() });
        }
        let shape = (series, horizon, levels.len());
        let mut violations = Array3::zeros(shape);
        let mut statistics = Array3::zeros(shape);
        let mut p_values = Array3::zeros(shape);
        for s in 0..series {
            if truth[s].len() != horizon || quantiles[s].len() != horizon {
                return Err(Error::LengthMismatch { expected: horizon, actual: truth[s].len().min(quantiles[s].len()) });
            }
            for h in 0..horizon {
                if quantiles[s][h].len() != levels.len() {
                    return Err(Error::LengthMismatch { expected: levels.len(), actual: quantiles[s][h].len() });
                }
                for (l, &level) in levels.iter().enumerate() {
                    if truth[s][h].len() != windows {
                        return Err(Error::LengthMismatch { expected: windows, actual: truth[s][h].len() });
                    }
                    let count = count_violations(&quantiles[s][h][l], &truth[s][h], level)?;
                    let t = kupiec_statistic(count.violations, windows, level)?;
                    violations[[s, h, l]] = count.violations;
                    statistics[[s, h, l]] = t;
                    p_values[[s, h, l]] = chi2_sf_1dof(t)?;
                }
            }
        }
        Ok(Self { levels: levels.to_vec(), gamma, windows, violations, statistics, p_values })
    }

    pub fn num_series(&self) -> usize {
        self.p_values.dim().0
    }

    pub fn horizon(&self) -> usize {
        self.p_values.dim().1
    }

    fn level_index(&self, level: f64) -> Result<usize> {
        self.levels
            .iter()
            .position(|&l| (l - level).abs() < 1e-12)
            .ok_or_else(|| Error::InvalidArgument(format!("level {level} not in the backtest")))
    }

    /// Share of (series, horizon) cells whose p-value is at least `gamma`.
    pub fn pass_fraction(&self, level: f64, gamma: f64) -> Result<f64> {
        let l = self.level_index(level)?;
        Ok(pvalue_fraction(self.p_values.index_axis(ndarray::Axis(2), l).iter().copied(), gamma))
    }

    pub fn cells(&self) -> Vec<BacktestCell> {
        let mut out = Vec::with_capacity(self.p_values.len());
        for ((s, h, l), &p) in self.p_values.indexed_iter() {
            out.push(BacktestCell {
                series: s,
                horizon: h + 1,
                level: self.levels[l],
                v_hat: self.violations[[s, h, l]],
                statistic: self.statistics[[s, h, l]],
                p_value: p,
                pass: p >= self.gamma,
            });
        }
        out
    }

    /// Long format: `series,horizon,level,v_hat,T,p_value,pass`.
    pub fn write_long_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        for cell in self.cells() {
            out.serialize(cell)?;
        }
        out.flush().map_err(|e| Error::InvalidArgument(format!("writing backtest: {e}")))?;
        Ok(())
    }

    /// p-values of one level as an `H × S` grid (rows are horizons).
    pub fn write_heatmap_csv<W: Write>(&self, writer: W, level: f64) -> Result<()> {
        let l = self.level_index(level)?;
        let mut out = csv::Writer::from_writer(writer);
        let mut header = vec!["horizon".to_string()];
        header.extend((0..self.num_series()).map(|s| format!("series_{s}")));
        out.write_record(&header)?;
        for h in 0..self.horizon() {
            let mut row = vec![(h + 1).to_string()];
            row.extend((0..self.num_series()).map(|s| self.p_values[[s, h, l]].to_string()));
            out.write_record(&row)?;
        }
        out.flush().map_err(|e| Error::InvalidArgument(format!("writing heatmap: {e}")))?;
        Ok(())
    }
}

pub fn pvalue_fraction(p_values: impl IntoIterator<Item = f64>, gamma: f64) -> f64 {
    let (mut pass, mut total) = (0usize, 0usize);
    for p in p_values {
        total += 1;
        if p >= gamma {
            pass += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        pass as f64 / total as f64
    }
}
