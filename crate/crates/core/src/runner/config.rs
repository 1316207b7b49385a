use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cdsprites::{Level, IMAGE_PIXELS, MAX_CAPTION_LEN};
use crate::error::{Error, Result};
use crate::fusion::DmvaeLatentLayout;
use crate::model::{ModalityKind, ModalitySpec, ModelSpec, Strategy};
use crate::objectives::ObjectiveConfig;

/// Environment variable naming the directory runs are written under.
pub const OUTPUT_ROOT_VAR: &str = "MMVB_OUTPUT_ROOT";
const REQUIRED: [&str; 3] = ["model", "dataset_dir", "level"];

/// A value or a list of values; lists become grid axes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Axis {
    One(usize),
    Many(Vec<usize>),
}

impl Axis {
    pub fn values(&self) -> Vec<usize> {
        match self {
            Axis::One(v) => vec![*v],
            Axis::Many(v) => v.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraversalConfig {
    #[serde(default = "default_per_dim")]
    pub per_dim: usize,
    #[serde(default = "default_lo")]
    pub lo: f64,
    #[serde(default = "default_hi")]
    pub hi: f64,
}

impl Default for TraversalConfig {
    fn default() -> Self {
        Self { per_dim: default_per_dim(), lo: default_lo(), hi: default_hi() }
    }
}

fn default_per_dim() -> usize {
    1000
}
fn default_lo() -> f64 {
    -6.0
}
fn default_hi() -> f64 {
    6.0
}
fn default_latent() -> Axis {
    Axis::Many(vec![16, 24, 32])
}
fn default_shared() -> Axis {
    Axis::Many(vec![10, 16, 26])
}
fn default_private() -> usize {
    10
}
fn default_beta() -> f64 {
    1.0
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-4
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}
fn default_weights() -> Vec<f64> {
    vec![1.0, 1.0]
}
fn default_true() -> bool {
    true
}
fn default_hidden() -> Vec<usize> {
    vec![128, 128, 128]
}
fn default_checkpoint_every() -> usize {
    25
}

/// One experiment. Keys and defaults are listed in the README.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: Strategy,
    pub dataset_dir: PathBuf,
    pub level: Level,
    #[serde(default = "default_latent")]
    pub latent_dim: Axis,
    #[serde(default = "default_private")]
    pub dmvae_private_dim: usize,
    #[serde(default = "default_shared")]
    pub dmvae_shared_dim: Axis,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// 150 for levels 1 and 2, 250 above when absent.
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_weights")]
    pub likelihood_weights: Vec<f64>,
    #[serde(default = "default_true")]
    pub subsample_unimodal: bool,
    #[serde(default)]
    pub eval_importance_samples: usize,
    #[serde(default)]
    pub traversal: TraversalConfig,
    /// Hidden widths of every encoder and decoder.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    /// Train on the first N training samples only.
    #[serde(default)]
    pub train_limit: Option<usize>,
    /// Score cross-generation on the first N test samples only.
    #[serde(default)]
    pub eval_test_limit: Option<usize>,
    /// Defaults to `$MMVB_OUTPUT_ROOT`, then `runs`.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub name: Option<String>,
}

/// One grid cell: the swept latent width and a seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    /// Latent width, or the shared width for the disentangled model.
    pub latent: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_toml(raw: &str) -> Result<Self> {
        let table: toml::Table = raw.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let missing: Vec<&str> = REQUIRED.iter().copied().filter(|k| !table.contains_key(*k)).collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!("missing required keys: {}", missing.join(", "))));
        }
        let mut cfg: Self = toml::from_str(raw).map_err(|e| Error::Config(e.to_string()))?;
        cfg.epochs.get_or_insert(if cfg.level.number() <= 2 { 150 } else { 250 });
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a config file; a relative `dataset_dir` is taken relative to
    /// the file.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&raw)?;
        if cfg.dataset_dir.is_relative() {
            if let Some(parent) = path.parent() {
                cfg.dataset_dir = parent.join(&cfg.dataset_dir);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let range = |key: &str, v: f64, lo: f64, hi: f64| {
            if v.is_finite() && v >= lo && v <= hi {
                Ok(())
            } else {
                Err(Error::Config(format!("{key} = {v} is outside [{lo}, {hi}]")))
            }
        };
        for v in self.latent_dim.values().into_iter().chain(self.dmvae_shared_dim.values()) {
            range("latent width", v as f64, 1.0, 4096.0)?;
        }
        if self.latent_dim.values().is_empty() || self.dmvae_shared_dim.values().is_empty() {
            return Err(Error::Config("latent axes need at least one value".into()));
        }
        range("dmvae_private_dim", self.dmvae_private_dim as f64, 1.0, 4096.0)?;
        range("beta", self.beta, 1e-6, 1e6)?;
        range("batch_size", self.batch_size as f64, 1.0, 65536.0)?;
        range("epochs", self.epochs.unwrap_or(1) as f64, 1.0, 1e6)?;
        range("learning_rate", self.learning_rate, 1e-12, 1.0)?;
        range("checkpoint_every", self.checkpoint_every as f64, 1.0, 1e6)?;
        range("traversal.per_dim", self.traversal.per_dim as f64, 1.0, 1e6)?;
        if !(self.traversal.lo <= self.traversal.hi) {
            return Err(Error::Config("traversal.lo must not exceed traversal.hi".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must list at least one seed".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if let Some(0) = self.train_limit {
            return Err(Error::Config("train_limit must be positive".into()));
        }
        if let Some(0) = self.eval_test_limit {
            return Err(Error::Config("eval_test_limit must be positive".into()));
        }
        self.objective_config().validate(2).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(if self.level.number() <= 2 { 150 } else { 250 })
    }

    /// The swept axis: shared width for the disentangled model, latent
    /// width otherwise.
    pub fn latent_axis(&self) -> Vec<usize> {
        match self.model {
            Strategy::Dmvae => self.dmvae_shared_dim.values(),
            _ => self.latent_dim.values(),
        }
    }

    /// Axis values × seeds, axis-major.
    pub fn cells(&self) -> Vec<Cell> {
        self.latent_axis()
            .into_iter()
            .flat_map(|latent| self.seeds.iter().map(move |&seed| Cell { latent, seed }))
            .collect()
    }

    pub fn objective_config(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            beta: self.beta,
            likelihood_weights: self.likelihood_weights.clone(),
            subsample_unimodal: self.subsample_unimodal,
            importance_samples: self.eval_importance_samples.max(1),
            ..ObjectiveConfig::new(2)
        }
    }

    pub fn model_spec(&self, latent: usize) -> Result<ModelSpec> {
        let modality =
            |kind| ModalitySpec { kind, encoder_hidden: self.hidden.clone(), decoder_hidden: self.hidden.clone() };
        let spec = ModelSpec {
            strategy: self.model,
            modalities: vec![
                modality(ModalityKind::Image { pixels: IMAGE_PIXELS }),
                modality(ModalityKind::Text { max_len: MAX_CAPTION_LEN }),
            ],
            latent_dim: latent,
            dmvae_layout: match self.model {
                Strategy::Dmvae => Some(DmvaeLatentLayout::new(latent, vec![self.dmvae_private_dim; 2])?),
                _ => None,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `dataset_dir/level_N`.
    pub fn level_dir(&self) -> PathBuf {
        self.dataset_dir.join(format!("level_{}", self.level))
    }

    pub fn output_root(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn run_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| format!("{}_level{}", self.model, self.level))
    }

    /// Directory of one cell, unique within the run.
    pub fn cell_dir(&self, cell: Cell) -> PathBuf {
        self.output_root().join(self.run_name()).join(format!("latent{}_seed{}", cell.latent, cell.seed))
    }
}
