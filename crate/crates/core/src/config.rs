//! Run configuration read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backtest::{DEFAULT_GAMMA, DEFAULT_LEVELS};
use crate::data::{generate_synthetic, load_dataset, CsvLayout, Dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tokenizer::TokenizerConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    /// CSV file, resolved against the config file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_columns: Option<Vec<String>>,
    /// Generated in memory instead of read from `path`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
}

impl DatasetConfig {
    pub fn load(&self, base_dir: &Path) -> Result<Dataset> {
        match (&self.path, &self.synth) {
            (Some(path), None) => {
                let path = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
                let layout = CsvLayout { timestamp_column: self.timestamp_column.clone(), value_columns: self.value_columns.clone() };
                let mut ds = load_dataset(&path, &layout)?;
                ds.name = self.name.clone();
                Ok(ds)
            }
            (None, Some(spec)) => {
                let mut ds = generate_synthetic(spec)?;
                ds.name = self.name.clone();
                Ok(ds)
            }
            _ => Err(Error::Config("dataset needs exactly one of `path` or `synth`".into())),
        }
    }
}

/// Rolling plan: `count` windows of `window_len` training steps, each
/// followed by `horizon` evaluation steps, `stride` apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub window_len: usize,
    pub horizon: usize,
    pub count: usize,
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { window_len: 2000, horizon: 24, count: 100, stride: 24 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub trajectories: usize,
    /// Raw timesteps fed as context before the horizon.
    pub context_len: usize,
    pub chunk: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { trajectories: 1024, context_len: 232, chunk: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub levels: Vec<f64>,
    pub gamma: f64,
    pub model_name: String,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { levels: DEFAULT_LEVELS.to_vec(), gamma: DEFAULT_GAMMA, model_name: "tsgt".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Fit most-significant-digit breakpoints to each training window.
    pub quantile_bins: bool,
    /// Randomly permute every inference context.
    pub shuffle_context: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub dtype: Dtype,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub tokenizer: TokenizerConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub windows: WindowConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    /// Directory relative dataset paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate().map_err(as_config)?;
        self.model.validate()?;
        self.train.validate()?;
        if self.train.seed != 0 {
            return Err(Error::Config("set the top-level `seed`; per-window seeds are derived from it".into()));
        }
        if self.model.vocab_size != self.tokenizer.base {
            return Err(Error::Config(format!(
                "model.vocab_size {} differs from tokenizer.base {}",
                self.model.vocab_size, self.tokenizer.base
            )));
        }
        if self.model.precision != self.tokenizer.precision {
            return Err(Error::Config("model.precision must equal tokenizer.precision".into()));
        }
        let w = &self.windows;
        if w.window_len == 0 || w.horizon == 0 || w.count == 0 || (w.count > 1 && w.stride == 0) {
            return Err(Error::Config("window_len, horizon, count and stride must be positive".into()));
        }
        let s = &self.sampling;
        if s.trajectories == 0 || s.context_len == 0 || s.chunk == 0 {
            return Err(Error::Config("sampling counts must be positive".into()));
        }
        if s.context_len > w.window_len || self.train.segment_len > w.window_len {
            return Err(Error::Config("context_len and train.segment_len must fit in window_len".into()));
        }
        let p = self.tokenizer.precision;
        let needed = ((s.context_len + w.horizon) * p).max(self.train.segment_len * p);
        if needed > self.model.max_seq_len {
            return Err(Error::Config(format!("{needed} tokens needed but model.max_seq_len is {}", self.model.max_seq_len)));
        }
        if self.evaluation.levels.is_empty() || self.evaluation.levels.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::Config("evaluation.levels must be non-empty and inside (0, 1)".into()));
        }
        if !(self.evaluation.gamma > 0.0 && self.evaluation.gamma < 1.0) {
            return Err(Error::Config("evaluation.gamma must lie in (0, 1)".into()));
        }
        if self.dataset.path.is_some() == self.dataset.synth.is_some() {
            return Err(Error::Config("dataset needs exactly one of `path` or `synth`".into()));
        }
        Ok(())
    }

    /// SHA-256 of everything that affects outputs; the output directory is
    /// left out so identical runs in different places hash alike.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.out = PathBuf::new();
        let json = serde_json::to_vec(&canon).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        self.dataset.load(&self.base_dir)
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 4
[dataset]
name = "sine"
[dataset.synth]
kind = "sine"
period = 24.0
amplitude = 5.0
offset = 10.0
length = 600
series = 2
seed = 1
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.tokenizer, TokenizerConfig::default());
        assert_eq!(cfg.evaluation.levels, vec![0.5, 0.75, 0.95]);
        assert_eq!(cfg.seed, 4);
        let ds = cfg.load_dataset().unwrap();
        assert_eq!((ds.num_series(), ds.len()), (2, 600));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{MINIMAL}\n[train]\nbtach_size = 3\n");
        assert!(matches!(RunConfig::from_toml_str(&text), Err(Error::Config(_))));
        let text = MINIMAL.replace("period = 24.0", "perod = 24.0");
        assert!(matches!(RunConfig::from_toml_str(&text), Err(Error::Config(_))));
        let text = format!("colour = 1\n{MINIMAL}");
        assert!(matches!(RunConfig::from_toml_str(&text), Err(Error::Config(_))));
    }

    #[test]
    fn cross_checks() {
        let text = format!("{MINIMAL}\n[model]\nvocab_size = 12\n");
        assert!(RunConfig::from_toml_str(&text).is_err());
        let text = format!("{MINIMAL}\n[sampling]\ncontext_len = 300\n");
        assert!(RunConfig::from_toml_str(&text).is_err());
        let text = format!("{MINIMAL}\n[train]\nseed = 3\n");
        assert!(RunConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn hash_ignores_output_dir_and_roundtrips() {
        let a = RunConfig::from_toml_str(MINIMAL).unwrap();
        let mut b = a.clone();
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
        let again = RunConfig::from_toml_str(&a.to_toml().unwrap()).unwrap();
        assert_eq!(again, a);
    }
}
