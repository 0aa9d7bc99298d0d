//! Real values to digit tokens and back.
//!
//! A value is divided by a scale factor, squashed into `[0, 1]`, and written
//! as `p` base-`B` digits, most significant first. Decoding maps a digit group
//! to the midpoint of its bucket and inverts the squash and the scaling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack added before flooring so that values such as `0.123` which are not
/// exactly representable still land in the bucket their decimal expansion
/// names.
pub const FACTORIZE_EPS: f64 = 1.0 / (1u64 << 40) as f64;

/// Logit saturation used when inverting the sigmoid squash at 0 or 1.
pub const LOGIT_CLAMP: f64 = 36.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SquashMode {
    Clip,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// One factor `r + mean|x|` over the whole context.
    ContextMean,
    /// Each value divided by `r + mean|x|` of the values before it.
    CausalMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub precision: usize,
    pub base: usize,
    pub squash_low: f64,
    pub squash_high: f64,
    pub squash_mode: SquashMode,
    pub scale_mode: ScaleMode,
    pub scale_offset: f64,
    /// `B - 1` ascending breakpoints in `(0, 1)` for the most significant
    /// digit; uniform digits when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msd_bins: Option<Vec<f64>>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            precision: 3,
            base: 10,
            squash_low: 0.0,
            squash_high: 10.0,
            squash_mode: SquashMode::Clip,
            scale_mode: ScaleMode::ContextMean,
            scale_offset: 1.0,
            msd_bins: None,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.precision == 0 {
            return Err(Error::Config("precision must be at least 1".into()));
        }
        if self.base < 2 {
            return Err(Error::Config("base must be at least 2".into()));
        }
        let levels = (self.base as f64).powi(self.precision as i32);
        if levels > (1u64 << 52) as f64 {
            return Err(Error::Config("base^precision exceeds exact f64 integer range".into()));
        }
        if !(self.squash_low < self.squash_high) {
            return Err(Error::Config("squash_low must be below squash_high".into()));
        }
        if !(self.scale_offset > 0.0) {
            return Err(Error::Config("scale_offset must be positive".into()));
        }
        if let Some(bins) = &self.msd_bins {
            if bins.len() != self.base - 1 {
                return Err(Error::Config(format!(
                    "msd_bins needs {} breakpoints, got {}",
                    self.base - 1,
                    bins.len()
                )));
            }
            let inside = bins.iter().all(|&b| b > 0.0 && b < 1.0);
            let ascending = bins.windows(2).all(|w| w[0] < w[1]);
            if !inside || !ascending {
                return Err(Error::Config("msd_bins must be strictly ascending inside (0, 1)".into()));
            }
        }
        Ok(())
    }

    /// Quantization resolution `B^-p` in squashed units.
    pub fn bucket_width(&self) -> f64 {
        (self.base as f64).powi(-(self.precision as i32))
    }
}

/// Context scale factor `mu = r + mean|x|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalerState {
    pub mu: f64,
}

pub fn fit_scaler(context: &[f64], offset: f64) -> ScalerState {
    let mean_abs = if context.is_empty() {
        0.0
    } else {
        context.iter().map(|x| x.abs()).sum::<f64>() / context.len() as f64
    };
    ScalerState { mu: offset + mean_abs }
}

/// Divides each value by `r` plus the mean absolute value of its prefix.
pub fn causal_scale(series: &[f64], offset: f64) -> Vec<f64> {
    let mut scaler = Scaler::causal(offset);
    series
        .iter()
        .map(|&x| {
            let scaled = x / scaler.divisor();
            scaler.observe(x);
            scaled
        })
        .collect()
}

/// Running scale state shared by encoding, decoding and simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Scaler {
    Context(ScalerState),
    Causal { offset: f64, sum_abs: f64, count: usize },
}

impl Scaler {
    pub fn causal(offset: f64) -> Self {
        Scaler::Causal { offset, sum_abs: 0.0, count: 0 }
    }

    pub fn for_context(context: &[f64], config: &TokenizerConfig) -> Self {
        match config.scale_mode {
            ScaleMode::ContextMean => Scaler::Context(fit_scaler(context, config.scale_offset)),
            ScaleMode::CausalMean => Scaler::causal(config.scale_offset),
        }
    }

    /// Factor the next value is divided by.
    pub fn divisor(&self) -> f64 {
        match *self {
            Scaler::Context(s) => s.mu,
            Scaler::Causal { offset, sum_abs, count } => {
                if count == 0 {
                    offset
                } else {
                    offset + sum_abs / count as f64
                }
            }
        }
    }

    /// Records a raw value; only the causal scaler moves.
    pub fn observe(&mut self, raw: f64) {
        if let Scaler::Causal { sum_abs, count, .. } = self {
            *sum_abs += raw.abs();
            *count += 1;
        }
    }

    pub fn observe_all(&mut self, raw: &[f64]) {
        for &x in raw {
            self.observe(x);
        }
    }

    /// Context factor, or the current divisor for the causal scaler.
    pub fn mu(&self) -> f64 {
        self.divisor()
    }
}

pub fn squash(x: f64, config: &TokenizerConfig) -> f64 {
    match config.squash_mode {
        SquashMode::Clip => {
            ((x - config.squash_low) / (config.squash_high - config.squash_low)).clamp(0.0, 1.0)
        }
        SquashMode::Sigmoid => 1.0 / (1.0 + (-x).exp()),
    }
}

pub fn unsquash(u: f64, config: &TokenizerConfig) -> f64 {
    match config.squash_mode {
        SquashMode::Clip => config.squash_low + u * (config.squash_high - config.squash_low),
        SquashMode::Sigmoid => {
            let logit = if u <= 0.0 {
                -LOGIT_CLAMP
            } else if u >= 1.0 {
                LOGIT_CLAMP
            } else {
                (u / (1.0 - u)).ln()
            };
            logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
        }
    }
}

/// Fixed-precision base-`B` digits of `u ∈ [0, 1]`, most significant first.
///
/// Equivalent to peeling digits with `d = min(⌊u / r⌋, B - 1)`: the digits
/// are those of `min(⌊u·B^p + ε⌋, B^p - 1)`, so `u = 1` yields all `B - 1`.
/// Working on the integer keeps the result monotone in `u`.
pub fn digit_factorize(u: f64, precision: usize, base: usize) -> Vec<usize> {
    let levels = (base as f64).powi(precision as i32);
    let u = if u.is_nan() { 0.0 } else { u.clamp(0.0, 1.0) };
    let scaled = (u * levels + FACTORIZE_EPS).floor().min(levels - 1.0);
    let mut k = scaled as u64;
    let mut digits = vec![0usize; precision];
    for slot in digits.iter_mut().rev() {
        *slot = (k % base as u64) as usize;
        k /= base as u64;
    }
    digits
}

/// Bucket midpoint `Σ d_k B^-k + B^-p / 2` of a digit group.
pub fn digits_to_value(digits: &[usize], base: usize) -> Result<f64> {
    let mut value = 0.0;
    let mut weight = 1.0;
    for &d in digits {
        if d >= base {
            return Err(Error::TokenOutOfRange { token: d, base });
        }
        weight /= base as f64;
        value += d as f64 * weight;
    }
    Ok(value + 0.5 * weight)
}

/// Digits of a squashed value under the configured discretization.
pub fn encode_unit(u: f64, config: &TokenizerConfig) -> Vec<usize> {
    let (p, b) = (config.precision, config.base);
    match &config.msd_bins {
        None => digit_factorize(u, p, b),
        Some(bins) => {
            let u = u.clamp(0.0, 1.0);
            let msd = bins.partition_point(|&edge| edge <= u);
            let (lo, hi) = bin_edges(bins, msd);
            let rest = ((u - lo) / (hi - lo)).clamp(0.0, 1.0);
            let mut digits = Vec::with_capacity(p);
            digits.push(msd);
            digits.extend(digit_factorize(rest, p - 1, b));
            digits
        }
    }
}

/// Squashed value represented by a digit group (bucket midpoint).
pub fn decode_unit(digits: &[usize], config: &TokenizerConfig) -> Result<f64> {
    match &config.msd_bins {
        None => digits_to_value(digits, config.base),
        Some(bins) => {
            let (&msd, rest) = digits
                .split_first()
                .ok_or_else(|| Error::InvalidArgument("empty digit group".into()))?;
            if msd >= config.base {
                return Err(Error::TokenOutOfRange { token: msd, base: config.base });
            }
            let (lo, hi) = bin_edges(bins, msd);
            Ok(lo + (hi - lo) * digits_to_value(rest, config.base)?)
        }
    }
}

fn bin_edges(bins: &[f64], msd: usize) -> (f64, f64) {
    let lo = if msd == 0 { 0.0 } else { bins[msd - 1] };
    let hi = if msd == bins.len() { 1.0 } else { bins[msd] };
    (lo, hi)
}

/// Digit tokens grouped `group_size` per timestep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<usize>,
    pub group_size: usize,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Encodes one raw value, advancing the scaler.
pub fn encode_value(x: f64, scaler: &mut Scaler, config: &TokenizerConfig) -> Vec<usize> {
    let scaled = x / scaler.divisor();
    scaler.observe(x);
    encode_unit(squash(scaled, config), config)
}

/// Decodes one digit group to a raw value, advancing the scaler.
pub fn decode_value(digits: &[usize], scaler: &mut Scaler, config: &TokenizerConfig) -> Result<f64> {
    let u = decode_unit(digits, config)?;
    let raw = unsquash(u, config) * scaler.divisor();
    scaler.observe(raw);
    Ok(raw)
}

/// Scales, squashes and factorizes every timestep. Returns the scaler state
/// at the start of the segment, which is what [`detokenize_segment`] needs.
pub fn tokenize_segment(segment: &[f64], config: &TokenizerConfig) -> Result<(TokenSeq, Scaler)> {
    config.validate()?;
    let initial = Scaler::for_context(segment, config);
    let mut scaler = initial;
    let mut tokens = Vec::with_capacity(segment.len() * config.precision);
    for &x in segment {
        if !x.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite input {x}")));
        }
        tokens.extend(encode_value(x, &mut scaler, config));
    }
    Ok((TokenSeq { tokens, group_size: config.precision }, initial))
}

pub fn detokenize_segment(tokens: &[usize], scaler: &Scaler, config: &TokenizerConfig) -> Result<Vec<f64>> {
    let p = config.precision;
    if !tokens.len().is_multiple_of(p) {
        return Err(Error::InvalidArgument(format!(
            "{} tokens do not split into groups of {p}",
            tokens.len()
        )));
    }
    let mut scaler = *scaler;
    tokens
        .chunks(p)
        .map(|group| decode_value(group, &mut scaler, config))
        .collect()
}

/// Empirical `k/B` quantiles of squashed training values, used as the
/// most-significant-digit breakpoints.
pub fn fit_quantile_bins(values: &[f64], base: usize) -> Result<Vec<f64>> {
    if base < 2 {
        return Err(Error::InvalidArgument("base must be at least 2".into()));
    }
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if sorted.len() < base || distinct.len() < base {
        return Err(Error::InvalidArgument(format!(
            "need at least {base} distinct values for quantile bins, found {}; use uniform digits",
            distinct.len()
        )));
    }
    let n = sorted.len();
    let bins: Vec<f64> = (1..base)
        .map(|k| {
            let j = ((k * n) as f64 / base as f64).round() as usize;
            let j = j.clamp(1, n - 1);
            0.5 * (sorted[j - 1] + sorted[j])
        })
        .collect();
    let inside = bins.iter().all(|&b| b > 0.0 && b < 1.0);
    let ascending = bins.windows(2).all(|w| w[0] < w[1]);
    if !inside || !ascending {
        return Err(Error::InvalidArgument(
            "training values are too concentrated for distinct quantile bins; use uniform digits".into(),
        ));
    }
    Ok(bins)
}
