//! Train, forecast, evaluate and backtest stages over the rolling plan.
//!
//! Each stage reads the previous stage's files from the output directory, so
//! stages can be rerun independently. Layout under `out`:
//!
//! ```text
//! checkpoints/window_0000.ckpt   checkpoints/window_0000.log.csv   checkpoints/manifest.json
//! forecasts/window_0000.csv
//! reports/metric_cells.csv       reports/metrics.csv               reports/metrics.txt
//! backtest/kupiec.csv            backtest/heatmap_95.csv           backtest/summary.csv
//! reports/report.txt
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backtest::BacktestMatrix;
use crate::checkpoint::{load_checkpoint, read_header, save_checkpoint, write_atomic};
use crate::config::{Dtype, RunConfig};
use crate::data::{make_window_plan, shuffle_context, Dataset, WindowEntry, WindowPlan};
use crate::error::{Error, Result};
use crate::metrics::{normalizer, Metric, MetricCell, MetricReport};
use crate::sampler::{read_ensembles_csv, simulate, write_ensembles_csv, ForecastEnsemble, SimulationConfig};
use crate::tokenizer::{fit_quantile_bins, fit_scaler, squash, TokenizerConfig};
use crate::training::{train_window, write_log_csv, TrainConfig, TrainStatus};
use crate::Scalar;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Subset of window indices to process.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowSelection(pub BTreeSet<usize>);

impl WindowSelection {
    /// Accepts `N`, `A..B`, `A..=B`, `A-B` (inclusive) and comma-separated
    /// lists of those.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid window range `{text}`"));
        let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
        let mut set = BTreeSet::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if let Some((a, b)) = part.split_once("..=") {
                set.extend(num(a)?..=num(b)?);
            } else if let Some((a, b)) = part.split_once("..") {
                set.extend(num(a)?..num(b)?);
            } else if let Some((a, b)) = part.split_once('-') {
                set.extend(num(a)?..=num(b)?);
            } else {
                set.insert(num(part)?);
            }
        }
        if set.is_empty() {
            return Err(bad());
        }
        Ok(Self(set))
    }
}

/// A validated configuration with its dataset and window plan.
pub struct Run {
    pub config: RunConfig,
    pub dataset: Dataset,
    pub plan: WindowPlan,
    pub windows: Vec<usize>,
    pub jobs: usize,
    hash: String,
}

impl Run {
    pub fn new(config: RunConfig, selection: Option<&WindowSelection>, jobs: usize) -> Result<Self> {
        config.validate()?;
        let dataset = config.load_dataset()?;
        let w = &config.windows;
        let plan = make_window_plan(dataset.len(), w.window_len, w.horizon, w.count, w.stride).map_err(|e| match e {
            Error::TooShort { .. } | Error::InvalidArgument(_) => Error::Config(e.to_string()),
            other => other,
        })?;
        let windows: Vec<usize> = match selection {
            None => (0..plan.count).collect(),
            Some(sel) => {
                if let Some(&bad) = sel.0.iter().find(|&&i| i >= plan.count) {
                    return Err(Error::Config(format!("window {bad} outside the plan of {}", plan.count)));
                }
                sel.0.iter().copied().collect()
            }
        };
        let hash = config.hash();
        Ok(Self { config, dataset, plan, windows, jobs: jobs.max(1), hash })
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn out(&self) -> &Path {
        &self.config.out
    }

    pub fn checkpoint_path(&self, w: usize) -> PathBuf {
        self.out().join("checkpoints").join(format!("window_{w:04}.ckpt"))
    }

    pub fn log_path(&self, w: usize) -> PathBuf {
        self.out().join("checkpoints").join(format!("window_{w:04}.log.csv"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.out().join("checkpoints").join("manifest.json")
    }

    pub fn forecast_path(&self, w: usize) -> PathBuf {
        self.out().join("forecasts").join(format!("window_{w:04}.csv"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out().join("reports")
    }

    pub fn backtest_dir(&self) -> PathBuf {
        self.out().join("backtest")
    }

    /// Comment line opening every text output.
    pub fn header_line(&self) -> String {
        format!("# tsgt {ARTIFACT_VERSION} config_sha256={}\n", self.hash)
    }

    fn with_header(&self, body: Vec<u8>) -> Vec<u8> {
        let mut out = self.header_line().into_bytes();
        out.extend(body);
        out
    }

    /// Hash of the settings a checkpoint depends on.
    fn training_hash(&self) -> String {
        let c = &self.config;
        let key = serde_json::json!([c.seed, c.dtype, c.dataset, c.tokenizer, c.model, c.train, c.windows, c.ablation.quantile_bins]);
        hex(&Sha256::digest(key.to_string().as_bytes()))
    }

    fn seed_for(&self, stage: &str, a: usize, b: usize) -> u64 {
        derive_seed(self.config.seed, stage, a as u64, b as u64)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    }

    fn entry(&self, w: usize) -> &WindowEntry {
        &self.plan.entries[w]
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Seed for one (stage, a, b) task, independent of scheduling.
pub fn derive_seed(seed: u64, stage: &str, a: u64, b: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    h.update(a.to_le_bytes());
    h.update(b.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Tokenizer for one window, with most-significant-digit breakpoints fitted
/// to the window's scaled training values when that ablation is on.
pub fn window_tokenizer(config: &RunConfig, dataset: &Dataset, entry: &WindowEntry) -> Result<TokenizerConfig> {
    let mut tok = config.tokenizer.clone();
    if config.ablation.quantile_bins {
        let mut values = Vec::new();
        for s in 0..dataset.num_series() {
            let train: Vec<f64> = dataset.series(s).slice(ndarray::s![entry.train_start..entry.train_end]).to_vec();
            let mu = fit_scaler(&train, tok.scale_offset).mu;
            values.extend(train.iter().map(|&x| squash(x / mu, &tok)));
        }
        tok.msd_bins = Some(fit_quantile_bins(&values, tok.base)?);
    }
    Ok(tok)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub window: usize,
    pub train_start: usize,
    pub train_end: usize,
    pub eval_start: usize,
    pub eval_end: usize,
    pub file: String,
    pub sha256: String,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifact_version: String,
    pub config_hash: String,
    pub windows: Vec<ManifestEntry>,
}

/// Outcome of a stage over the selected windows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageSummary {
    pub done: Vec<usize>,
    pub skipped: Vec<usize>,
    pub failed: Vec<(usize, String)>,
}

impl StageSummary {
    /// Turns per-window failures into one runtime error.
    pub fn into_result(self, stage: &str) -> Result<Self> {
        if let Some((w, msg)) = self.failed.first() {
            return Err(Error::Checkpoint(format!(
                "{stage}: {} window(s) failed, first was window {w}: {msg}",
                self.failed.len()
            )));
        }
        Ok(self)
    }
}

fn train_one<T: Scalar>(run: &Run, w: usize) -> Result<String> {
    let entry = *run.entry(w);
    let tok = window_tokenizer(&run.config, &run.dataset, &entry)?;
    let train_cfg = TrainConfig { seed: run.seed_for("train", w, 0), ..run.config.train.clone() };
    let outcome = train_window::<T>(&run.dataset, &entry, &run.config.model, &tok, &train_cfg)?;
    let status = match &outcome.status {
        TrainStatus::Completed => "completed".to_string(),
        TrainStatus::Aborted { step, reason } => format!("aborted at step {step}: {reason}"),
    };
    let meta = serde_json::json!({
        "training_hash": run.training_hash(),
        "window": w,
        "steps": run.config.train.train_steps,
        "status": status,
    });
    save_checkpoint(&run.checkpoint_path(w), &outcome.params, &tok, meta)?;
    let mut log = Vec::new();
    write_log_csv(&mut log, &outcome.log)?;
    write_atomic(&run.log_path(w), &run.with_header(log))?;
    Ok(status)
}

/// True when `w` already has a checkpoint produced under the same
/// training settings.
fn checkpoint_is_current(run: &Run, w: usize) -> bool {
    let Ok(bytes) = fs::read(run.checkpoint_path(w)) else { return false };
    match read_header(&bytes) {
        Ok(h) => h.meta.get("training_hash").and_then(|v| v.as_str()) == Some(run.training_hash().as_str()),
        Err(_) => false,
    }
}

/// Trains every selected window that lacks a current checkpoint, then
/// rewrites the manifest over all checkpoints of the plan.
pub fn cmd_train(run: &Run) -> Result<StageSummary> {
    let mut summary = StageSummary::default();
    let todo: Vec<usize> = run
        .windows
        .iter()
        .copied()
        .filter(|&w| {
            let current = checkpoint_is_current(run, w);
            if current {
                summary.skipped.push(w);
            }
            !current
        })
        .collect();
    if !summary.skipped.is_empty() {
        log::info!("resuming: {} window(s) already trained", summary.skipped.len());
    }
    let results: Vec<(usize, Result<String>)> = run.pool()?.install(|| {
        todo.par_iter()
            .map(|&w| {
                log::info!("training window {w}");
                let r = match run.config.dtype {
                    Dtype::F32 => train_one::<f32>(run, w),
                    Dtype::F64 => train_one::<f64>(run, w),
                };
                (w, r)
            })
            .collect()
    });
    for (w, r) in results {
        match r {
            Ok(status) if status == "completed" => summary.done.push(w),
            Ok(status) => summary.failed.push((w, status)),
            Err(e) => {
                log::error!("window {w}: {e}");
                summary.failed.push((w, e.to_string()));
            }
        }
    }
    write_manifest(run)?;
    summary.into_result("train")
}

pub fn write_manifest(run: &Run) -> Result<Manifest> {
    let mut windows = Vec::new();
    for (w, e) in run.plan.entries.iter().enumerate() {
        let path = run.checkpoint_path(w);
        let Ok(bytes) = fs::read(&path) else { continue };
        let header = read_header(&bytes)?;
        windows.push(ManifestEntry {
            window: w,
            train_start: e.train_start,
            train_end: e.train_end,
            eval_start: e.eval_start,
            eval_end: e.eval_end,
            file: path.file_name().unwrap().to_string_lossy().into_owned(),
            sha256: hex(&Sha256::digest(&bytes)),
            status: header.meta.get("status").and_then(|v| v.as_str()).unwrap_or("unknown").to_string(),
        });
    }
    let manifest = Manifest { artifact_version: ARTIFACT_VERSION.into(), config_hash: run.hash.clone(), windows };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(&run.manifest_path(), &json)?;
    Ok(manifest)
}

/// Inference context of series `s` in window `w`: the last `context_len`
/// training values, permuted when the shuffle ablation is on.
pub fn inference_context(run: &Run, w: usize, s: usize) -> Vec<f64> {
    let entry = run.entry(w);
    let ctx = run.config.sampling.context_len;
    let context: Vec<f64> = run.dataset.series(s).slice(ndarray::s![entry.eval_start - ctx..entry.eval_start]).to_vec();
    if run.config.ablation.shuffle_context {
        let mut rng = ChaCha8Rng::seed_from_u64(run.seed_for("shuffle", w, s));
        shuffle_context(&context, &mut rng)
    } else {
        context
    }
}

fn forecast_one<T: Scalar>(run: &Run, w: usize) -> Result<()> {
    let path = run.checkpoint_path(w);
    let (params, header) = load_checkpoint::<T>(&path)?;
    if header.meta.get("training_hash").and_then(|v| v.as_str()) != Some(run.training_hash().as_str()) {
        return Err(Error::InvalidArgument(format!("{} was trained with different settings; rerun train", path.display())));
    }
    let mut ensembles = Vec::with_capacity(run.dataset.num_series());
    for s in 0..run.dataset.num_series() {
        let sim = SimulationConfig {
            horizon: run.config.windows.horizon,
            trajectories: run.config.sampling.trajectories,
            seed: run.seed_for("simulate", w, s),
            chunk: run.config.sampling.chunk,
        };
        let context = inference_context(run, w, s);
        ensembles.push(simulate(&params, &context, &header.tokenizer, &sim)?.tagged(s, w));
    }
    let mut body = Vec::new();
    write_ensembles_csv(&mut body, &ensembles)?;
    write_atomic(&run.forecast_path(w), &run.with_header(body))
}

/// Simulates every series of every selected window from its checkpoint.
pub fn cmd_forecast(run: &Run) -> Result<StageSummary> {
    let results: Vec<(usize, Result<()>)> = run.pool()?.install(|| {
        run.windows
            .par_iter()
            .map(|&w| {
                log::info!("forecasting window {w}");
                let r = match run.config.dtype {
                    Dtype::F32 => forecast_one::<f32>(run, w),
                    Dtype::F64 => forecast_one::<f64>(run, w),
                };
                (w, r)
            })
            .collect()
    });
    let mut summary = StageSummary::default();
    for (w, r) in results {
        match r {
            Ok(()) => summary.done.push(w),
            Err(e) => {
                log::error!("window {w}: {e}");
                summary.failed.push((w, e.to_string()));
            }
        }
    }
    summary.into_result("forecast")
}

/// Ensembles of the selected windows that have forecast files, in window
/// order; missing windows are reported with a coverage warning.
pub fn load_forecasts(run: &Run) -> Result<Vec<(usize, Vec<ForecastEnsemble>)>> {
    let mut out = Vec::new();
    let mut missing = Vec::new();
    for &w in &run.windows {
        let path = run.forecast_path(w);
        match fs::File::open(&path) {
            Ok(f) => {
                let ensembles = read_ensembles_csv(f, w)?;
                if ensembles.len() != run.dataset.num_series()
                    || ensembles.iter().any(|e| e.horizon() != run.config.windows.horizon)
                {
                    return Err(Error::InvalidArgument(format!("{} does not match the plan", path.display())));
                }
                out.push((w, ensembles));
            }
            Err(_) => missing.push(w),
        }
    }
    if !missing.is_empty() {
        log::warn!("coverage: {} of {} windows have no forecasts: {missing:?}", missing.len(), run.windows.len());
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("no forecast files found; run `forecast` first".into()));
    }
    Ok(out)
}

fn truth(run: &Run, w: usize, s: usize) -> Vec<f64> {
    let e = run.entry(w);
    run.dataset.series(s).slice(ndarray::s![e.eval_start..e.eval_end]).to_vec()
}

fn training_window(run: &Run, w: usize, s: usize) -> Vec<f64> {
    let e = run.entry(w);
    run.dataset.series(s).slice(ndarray::s![e.train_start..e.train_end]).to_vec()
}

/// MAD, RMSE, QL at each evaluation level, and CRPS.
pub fn report_metrics(config: &RunConfig) -> Vec<Metric> {
    let mut metrics = vec![Metric::Mad, Metric::Rmse];
    metrics.extend(config.evaluation.levels.iter().map(|&a| Metric::Ql((a * 100.0).round() as u32)));
    metrics.push(Metric::Crps);
    metrics
}

/// Per-cell metrics over all available forecasts.
pub fn metric_cells(run: &Run, forecasts: &[(usize, Vec<ForecastEnsemble>)], metrics: &[Metric]) -> Result<Vec<MetricCell>> {
    let mut cells = Vec::new();
    for (w, ensembles) in forecasts {
        for e in ensembles {
            let Some(f) = normalizer(&training_window(run, *w, e.series)) else {
                log::warn!("window {w} series {}: zero training scale, cell excluded", e.series);
                continue;
            };
            let x = truth(run, *w, e.series);
            for m in metrics {
                cells.push(MetricCell { window: *w, series: e.series, metric: m.name(), value: m.evaluate(e, &x, f)? });
            }
        }
    }
    Ok(cells)
}

/// Computes metric cells and their IQM/bootstrap summary and writes both.
pub fn cmd_evaluate(run: &Run) -> Result<MetricReport> {
    let forecasts = load_forecasts(run)?;
    let metrics = report_metrics(&run.config);
    let cells = metric_cells(run, &forecasts, &metrics)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed_for("bootstrap", 0, 0));
    let report = MetricReport::aggregate(&cells, &metrics, &run.dataset.name, &run.config.evaluation.model_name, &mut rng)?;

    let dir = run.reports_dir();
    let mut body = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut body);
        for c in &cells {
            w.serialize(c)?;
        }
        w.flush().map_err(|e| Error::io(&dir, e))?;
    }
    write_atomic(&dir.join("metric_cells.csv"), &run.with_header(body))?;
    let mut body = Vec::new();
    report.write_csv(&mut body)?;
    write_atomic(&dir.join("metrics.csv"), &run.with_header(body))?;
    write_atomic(&dir.join("metrics.txt"), &run.with_header(report.to_table().into_bytes()))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestSummaryRow {
    pub level: f64,
    pub gamma: f64,
    pub windows: usize,
    pub pass_fraction: f64,
}

/// Kupiec backtest over the available windows at every evaluation level.
pub fn cmd_backtest(run: &Run) -> Result<(BacktestMatrix, Vec<BacktestSummaryRow>)> {
    let forecasts = load_forecasts(run)?;
    let levels = &run.config.evaluation.levels;
    let gamma = run.config.evaluation.gamma;
    let (series, horizon) = (run.dataset.num_series(), run.config.windows.horizon);
    let mut quantiles = vec![vec![vec![Vec::with_capacity(forecasts.len()); levels.len()]; horizon]; series];
    let mut truths = vec![vec![Vec::with_capacity(forecasts.len()); horizon]; series];
    for (w, ensembles) in &forecasts {
        for e in ensembles {
            let x = truth(run, *w, e.series);
            for h in 0..horizon {
                truths[e.series][h].push(x[h]);
                for (l, &a) in levels.iter().enumerate() {
                    quantiles[e.series][h][l].push(e.quantile(a, h + 1)?);
                }
            }
        }
    }
    let matrix = BacktestMatrix::from_windows(&quantiles, &truths, levels, gamma)?;
    let summary: Vec<BacktestSummaryRow> = levels
        .iter()
        .map(|&level| {
            Ok(BacktestSummaryRow { level, gamma, windows: matrix.windows, pass_fraction: matrix.pass_fraction(level, gamma)? })
        })
        .collect::<Result<_>>()?;

    let dir = run.backtest_dir();
    let mut body = Vec::new();
    matrix.write_long_csv(&mut body)?;
    write_atomic(&dir.join("kupiec.csv"), &run.with_header(body))?;
    for &level in levels {
        let mut body = Vec::new();
        matrix.write_heatmap_csv(&mut body, level)?;
        let name = format!("heatmap_{}.csv", (level * 100.0).round() as u32);
        write_atomic(&dir.join(name), &run.with_header(body))?;
    }
    let mut body = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut body);
        for row in &summary {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(&dir, e))?;
    }
    write_atomic(&dir.join("summary.csv"), &run.with_header(body))?;
    Ok((matrix, summary))
}

/// Plain-text report combining the metric table and backtest summary
/// already on disk.
pub fn cmd_report(run: &Run) -> Result<String> {
    let read = |path: PathBuf| -> Result<String> {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(text.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n"))
    };
    let metrics = read(run.reports_dir().join("metrics.txt"))?;
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(run.backtest_dir().join("summary.csv"))?;
    let mut text = format!("dataset: {}\nwindows: {}\n\n{metrics}\n\n", run.dataset.name, run.windows.len());
    text.push_str(&format!("{:<8} {:>8} {:>8} {:>14}\n", "level", "gamma", "windows", "pass_fraction"));
    for row in rdr.deserialize() {
        let row: BacktestSummaryRow = row?;
        text.push_str(&format!("{:<8} {:>8} {:>8} {:>14.4}\n", row.level, row.gamma, row.windows, row.pass_fraction));
    }
    let report = format!("{}{text}", run.header_line());
    write_atomic(&run.reports_dir().join("report.txt"), report.as_bytes())?;
    Ok(text)
}

/// Writes the configured synthetic dataset to `<out>/<name>.csv`.
pub fn cmd_synth(config: &RunConfig) -> Result<PathBuf> {
    if config.dataset.synth.is_none() {
        return Err(Error::Config("`synth` needs a [dataset.synth] section".into()));
    }
    let ds = config.load_dataset()?;
    let path = config.out.join(format!("{}.csv", config.dataset.name));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    ds.write_csv(&path)?;
    Ok(path)
}
