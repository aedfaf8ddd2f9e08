//! Model and training configuration, plus the plain-text `key=value` config
//! file format used by the CLI.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::ParamStore;
use crate::error::{Result, SchError};

/// Rate-distortion trade-off points; one trained model per entry.
pub const LAMBDA_SET: [f64; 6] = [0.0025, 0.0035, 0.0067, 0.013, 0.025, 0.05];

/// Architectural hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Internal channel width of the transform stacks.
    pub n: usize,
    /// Latent channel count.
    pub m: usize,
    /// Hyper-latent channel count.
    pub z_channels: usize,
    /// Hybrid-block count per stack.
    pub sch_stack: Vec<usize>,
    /// Attention window side length.
    pub window_size: usize,
    /// Head count for both attention kinds.
    pub heads: usize,
    /// MLP expansion ratio inside attention modules.
    pub mlp_ratio: usize,
    /// Number of autoregressive latent slices.
    pub slice_count: usize,
    /// Index into [`LAMBDA_SET`].
    pub lambda_index: usize,
    /// Orthonormal (1/2-scaled) wavelet filters when true; raw ±1 otherwise.
    pub ortho_dwt: bool,
    /// Scale channel-attention logits by 1/sqrt(head_dim) instead of the
    /// default 1/sqrt(L).
    pub channel_scale_by_head_dim: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n: 256,
            m: 320,
            z_channels: 192,
            sch_stack: vec![2, 4, 2],
            window_size: 8,
            heads: 8,
            mlp_ratio: 2,
            slice_count: 5,
            lambda_index: 3,
            ortho_dwt: true,
            channel_scale_by_head_dim: false,
        }
    }
}

impl ModelConfig {
    /// Full-scale configuration.
    pub fn full() -> Self {
        Self::default()
    }

    /// Small configuration for tests and desk-scale training; all invariants
    /// are scale-free so the full property suite runs in minutes.
    pub fn toy() -> Self {
        ModelConfig {
            n: 32,
            m: 48,
            z_channels: 24,
            sch_stack: vec![1, 1, 1],
            window_size: 4,
            heads: 4,
            mlp_ratio: 2,
            slice_count: 4,
            lambda_index: 3,
            ortho_dwt: true,
            channel_scale_by_head_dim: false,
        }
    }

    pub fn lambda(&self) -> f64 {
        LAMBDA_SET[self.lambda_index]
    }

    /// Channels per latent slice.
    pub fn slice_width(&self) -> usize {
        self.m / self.slice_count
    }

    /// Inputs are padded to a multiple of this before analysis. The analysis
    /// transform downsamples by 16 and every stage must stay divisible by the
    /// window size, hence `max(64, 16·window_size)`.
    pub fn pad_multiple(&self) -> usize {
        64usize.max(16 * self.window_size)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(SchError::Config(msg));
        if self.n % 2 != 0 {
            return err(format!("n must be even, got {}", self.n));
        }
        if self.window_size < 2 {
            return err(format!("window_size must be >= 2, got {}", self.window_size));
        }
        if self.slice_count == 0 || self.m % self.slice_count != 0 {
            return err(format!(
                "slice_count {} must divide m {}",
                self.slice_count, self.m
            ));
        }
        if self.sch_stack.len() != 3 {
            return err(format!(
                "sch_stack must have 3 stages, got {}",
                self.sch_stack.len()
            ));
        }
        if self.lambda_index >= LAMBDA_SET.len() {
            return err(format!(
                "lambda_index {} out of range ({} entries)",
                self.lambda_index,
                LAMBDA_SET.len()
            ));
        }
        if self.mlp_ratio == 0 {
            return err("mlp_ratio must be >= 1".into());
        }
        let l = self.window_size * self.window_size;
        for width in [self.n, self.m] {
            if width % 2 != 0 {
                return err(format!("stack width {width} must be even"));
            }
            let branch = width / 2;
            if branch % self.heads != 0 {
                return err(format!(
                    "attention branch width {branch} must be divisible by heads {}",
                    self.heads
                ));
            }
        }
        if l % self.heads != 0 {
            return err(format!(
                "window token count {l} must be divisible by heads {}",
                self.heads
            ));
        }
        Ok(())
    }
}

/// Optimization and data-pipeline settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Evaluations without improvement before the rate decays.
    pub plateau_patience: usize,
    /// Multiplicative learning-rate decay on plateau.
    pub lr_decay: f64,
    pub crop_size: usize,
    pub max_steps: usize,
    /// Evaluation period in steps.
    pub eval_period: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables.
    pub clip_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 1e-4,
            plateau_patience: 5,
            lr_decay: 0.3,
            crop_size: 256,
            max_steps: 10_000,
            eval_period: 500,
            seed: 0,
            clip_grad_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch_size == 0 {
            return Err(SchError::Config("batch_size must be >= 1".into()));
        }
        if self.crop_size == 0 || self.crop_size % model.pad_multiple() != 0 {
            return Err(SchError::Config(format!(
                "crop_size {} must be a positive multiple of {}",
                self.crop_size,
                model.pad_multiple()
            )));
        }
        if self.eval_period == 0 {
            return Err(SchError::Config("eval_period must be >= 1".into()));
        }
        if !(0.0 < self.lr_decay && self.lr_decay < 1.0) {
            return Err(SchError::Config(format!(
                "lr_decay must be in (0,1), got {}",
                self.lr_decay
            )));
        }
        Ok(())
    }
}

/// Both configs bundled, as resolved by the CLI.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn toy() -> Self {
        Config { model: ModelConfig::toy(), train: TrainConfig::default() }
    }

    /// Apply one `key=value` override. Unknown keys are rejected.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str, v: &str| {
            SchError::Config(format!("invalid value {v:?} for key {what:?}"))
        };
        macro_rules! parse {
            ($field:expr, $key:expr, $ty:ty) => {{
                $field = value
                    .parse::<$ty>()
                    .map_err(|_| bad($key, value))?;
            }};
        }
        match key {
            "model.n" => parse!(self.model.n, key, usize),
            "model.m" => parse!(self.model.m, key, usize),
            "model.z_channels" => parse!(self.model.z_channels, key, usize),
            "model.window_size" => parse!(self.model.window_size, key, usize),
            "model.heads" => parse!(self.model.heads, key, usize),
            "model.mlp_ratio" => parse!(self.model.mlp_ratio, key, usize),
            "model.slice_count" => parse!(self.model.slice_count, key, usize),
            "model.lambda_index" => parse!(self.model.lambda_index, key, usize),
            "model.ortho_dwt" => parse!(self.model.ortho_dwt, key, bool),
            "model.channel_scale_by_head_dim" => {
                parse!(self.model.channel_scale_by_head_dim, key, bool)
            }
            "model.sch_stack" => {
                let parts: std::result::Result<Vec<usize>, _> =
                    value.split(',').map(|p| p.trim().parse::<usize>()).collect();
                self.model.sch_stack = parts.map_err(|_| bad(key, value))?;
            }
            "train.batch_size" => parse!(self.train.batch_size, key, usize),
            "train.learning_rate" => parse!(self.train.learning_rate, key, f64),
            "train.plateau_patience" => parse!(self.train.plateau_patience, key, usize),
            "train.lr_decay" => parse!(self.train.lr_decay, key, f64),
            "train.crop_size" => parse!(self.train.crop_size, key, usize),
            "train.max_steps" => parse!(self.train.max_steps, key, usize),
            "train.eval_period" => parse!(self.train.eval_period, key, usize),
            "train.seed" => parse!(self.train.seed, key, u64),
            "train.clip_grad_norm" => parse!(self.train.clip_grad_norm, key, f64),
            "preset" => match value {
                "toy" => *self = Config { model: ModelConfig::toy(), train: self.train.clone() },
                "full" => *self = Config { model: ModelConfig::full(), train: self.train.clone() },
                _ => return Err(bad(key, value)),
            },
            _ => {
                return Err(SchError::Config(format!("unknown config key: {key:?}")));
            }
        }
        Ok(())
    }

    /// Parse a plain-text config file: one `key = value` per line, `#`
    /// comments, blank lines ignored.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SchError::Config(format!("line {}: expected key=value, got {raw:?}", lineno + 1))
            })?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// The resolved configuration as ordered `key=value` lines (echoed into
    /// logs so every run records what it actually used).
    pub fn to_kv_lines(&self) -> Vec<String> {
        let stack = self
            .model
            .sch_stack
            .iter()
            .map(|k| k.to_string())
            .collect::<Vec<_>>()
            .join(",");
        vec![
            format!("model.n={}", self.model.n),
            format!("model.m={}", self.model.m),
            format!("model.z_channels={}", self.model.z_channels),
            format!("model.sch_stack={stack}"),
            format!("model.window_size={}", self.model.window_size),
            format!("model.heads={}", self.model.heads),
            format!("model.mlp_ratio={}", self.model.mlp_ratio),
            format!("model.slice_count={}", self.model.slice_count),
            format!("model.lambda_index={}", self.model.lambda_index),
            format!("model.ortho_dwt={}", self.model.ortho_dwt),
            format!(
                "model.channel_scale_by_head_dim={}",
                self.model.channel_scale_by_head_dim
            ),
            format!("train.batch_size={}", self.train.batch_size),
            format!("train.learning_rate={}", self.train.learning_rate),
            format!("train.plateau_patience={}", self.train.plateau_patience),
            format!("train.lr_decay={}", self.train.lr_decay),
            format!("train.crop_size={}", self.train.crop_size),
            format!("train.max_steps={}", self.train.max_steps),
            format!("train.eval_period={}", self.train.eval_period),
            format!("train.seed={}", self.train.seed),
            format!("train.clip_grad_norm={}", self.train.clip_grad_norm),
        ]
    }
}

/// 32-bit digest binding a bitstream to the exact model that produced it:
/// hashes the architecture config and every parameter byte.
pub fn model_digest(config: &ModelConfig, store: &ParamStore) -> u32 {
    let mut hasher = Sha256::new();
    let cfg = serde_json::to_vec(config).expect("config serializes");
    hasher.update(&cfg);
    for (_, name, value) in store.iter() {
        hasher.update(name.as_bytes());
        for v in value.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    u32::from_be_bytes([digest[0], digest[1], digest[2], digest[3]])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::full().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
        TrainConfig::default().validate(&ModelConfig::full()).unwrap();
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = Config::toy();
        assert!(matches!(
            cfg.apply_kv("model.bogus", "1"),
            Err(SchError::Config(_))
        ));
    }

    #[test]
    fn file_roundtrip() {
        let mut cfg = Config::toy();
        cfg.apply_file("# comment\nmodel.n = 64\ntrain.seed=9\n\n").unwrap();
        assert_eq!(cfg.model.n, 64);
        assert_eq!(cfg.train.seed, 9);
        let lines = cfg.to_kv_lines().join("\n");
        let mut cfg2 = Config::toy();
        cfg2.apply_file(&lines).unwrap();
        assert_eq!(cfg, cfg2);
    }

    #[test]
    fn invalid_slice_count_rejected() {
        let mut m = ModelConfig::toy();
        m.slice_count = 5; // 48 % 5 != 0
        assert!(m.validate().is_err());
    }

    #[test]
    fn pad_multiple_tracks_window_size() {
        assert_eq!(ModelConfig::toy().pad_multiple(), 64);
        assert_eq!(ModelConfig::full().pad_multiple(), 128);
    }
}
