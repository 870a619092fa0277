//! Training configuration with a flat `key = value` file format.
//!
//! Every knob has a desk-scale default, so an empty config file is a valid
//! one. Lines are `key = value`, `#` starts a comment, and unknown keys are
//! rejected so typos cannot silently fall back to defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quality::LossWeights;
use crate::tone::ModelConfig;

/// Hyperparameters for one training run: optimizer settings, sampling
/// geometry, loss weights, and the architecture knobs forwarded to
/// [`ModelConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Base learning rate.
    pub lr: f64,
    /// First-moment decay of AdamW.
    pub beta1: f64,
    /// Second-moment decay of AdamW.
    pub beta2: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    /// Crops per step.
    pub batch_size: usize,
    /// Square crop side, a multiple of 8 so the pyramid divides evenly.
    pub crop: usize,
    /// Step budget.
    pub max_steps: usize,
    /// Loss term weights.
    pub weights: LossWeights,
    /// Seed for parameter init and batch sampling.
    pub seed: u64,
    /// Channel width of the convolutional blocks.
    pub width: usize,
    /// Basis LUTs in the shared bank.
    pub basis_count: usize,
    /// Lattice points per LUT axis.
    pub lut_size: usize,
    /// Patch grid side over the 1/8-scale image.
    pub grid: usize,
    /// Per-patch descriptor length.
    pub descriptor_dim: usize,
    /// Mirror crops horizontally with probability 1/2.
    pub hflip: bool,
    /// Cosine-decay the learning rate to zero over `max_steps`.
    pub cosine_decay: bool,
    /// Steps between held-out PSNR probes (and overfit early-stop checks).
    pub probe_every: usize,
    /// Directory of paired training data; required by the CLI, optional here
    /// so harnesses can feed tensors directly.
    pub data_dir: Option<String>,
    /// Where checkpoints and logs land.
    pub out_dir: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 1e-4,
            batch_size: 4,
            crop: 64,
            max_steps: 2000,
            weights: LossWeights::default(),
            seed: 7,
            width: 20,
            basis_count: 8,
            lut_size: 9,
            grid: 4,
            descriptor_dim: 6,
            hflip: false,
            cosine_decay: false,
            probe_every: 25,
            data_dir: None,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    /// Parses the flat key=value format, starting from defaults.
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and parses a config file.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_key_values(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "crop" => self.crop = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "alpha" => self.weights.alpha = parse(key, value)?,
            "beta" => self.weights.beta = parse(key, value)?,
            "gamma" => self.weights.gamma = parse(key, value)?,
            "eta" => self.weights.eta = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "basis_count" => self.basis_count = parse(key, value)?,
            "lut_size" => self.lut_size = parse(key, value)?,
            "grid" => self.grid = parse(key, value)?,
            "descriptor_dim" => self.descriptor_dim = parse(key, value)?,
            "hflip" => self.hflip = parse(key, value)?,
            "cosine_decay" => self.cosine_decay = parse(key, value)?,
            "probe_every" => self.probe_every = parse(key, value)?,
            "data_dir" => self.data_dir = Some(value.to_string()),
            "out_dir" => self.out_dir = Some(value.to_string()),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Rejects values that would make a run ill-defined.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive and finite, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be nonnegative, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.crop == 0 || self.crop % 8 != 0 {
            return Err(Error::Config(format!("crop must be a positive multiple of 8, got {}", self.crop)));
        }
        if self.crop < 8 * self.grid {
            return Err(Error::Config(format!(
                "crop {} is too small for a {g}x{g} patch grid (needs at least {})",
                self.crop,
                8 * self.grid,
                g = self.grid
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if self.probe_every == 0 {
            return Err(Error::Config("probe_every must be at least 1".into()));
        }
        self.weights.validate()?;
        if self.width < 2 {
            return Err(Error::Config(format!("width must be at least 2, got {}", self.width)));
        }
        if self.basis_count == 0 || self.grid == 0 || self.descriptor_dim == 0 {
            return Err(Error::Config("basis_count, grid, and descriptor_dim must be at least 1".into()));
        }
        if self.lut_size < 2 {
            return Err(Error::Config(format!("lut_size needs at least 2 lattice points, got {}", self.lut_size)));
        }
        Ok(())
    }

    /// The architecture slice of this config.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            width: self.width,
            basis_count: self.basis_count,
            lut_size: self.lut_size,
            grid: self.grid,
            descriptor_dim: self.descriptor_dim,
            seed: self.seed,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {value:?} as a value for {key}")))
}
