use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::diffusion::Mode;
use crate::error::{Error, Result};
use crate::unet::{UNetConfig, WidthScale, DEPTH};

use super::AdamWConfig;

/// Everything that determines a training run.
///
/// Serialises to plain `key=value` lines; see [`TrainConfig::KEYS`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub mode: Mode,
    /// Alternate plain steps with masked-frame steps.
    pub interpolation: bool,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0: only the final one).
    pub checkpoint_every: u64,
    pub optimizer: AdamWConfig,
    pub unet: UNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 4,
            mode: Mode::Both,
            interpolation: true,
            seed: 0,
            checkpoint_every: 250,
            optimizer: AdamWConfig::default(),
            unet: UNetConfig::desk(),
        }
    }
}

impl TrainConfig {
    /// Recognised keys, in the order they are written.
    pub const KEYS: [&'static str; 20] = [
        "steps",
        "batch",
        "mode",
        "interpolation",
        "seed",
        "checkpoint_every",
        "lr",
        "beta1",
        "beta2",
        "eps",
        "weight_decay",
        "base_widths",
        "width_scale",
        "layers_per_block",
        "mid_layers",
        "attention_heads",
        "norm_groups",
        "context_dim",
        "timesteps",
        "aux_channels",
    ];

    pub fn get(&self, key: &str) -> Option<String> {
        let u = &self.unet;
        let o = &self.optimizer;
        Some(match key {
            "steps" => self.steps.to_string(),
            "batch" => self.batch.to_string(),
            "mode" => self.mode.to_string(),
            "interpolation" => self.interpolation.to_string(),
            "seed" => self.seed.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "lr" => o.lr.to_string(),
            "beta1" => o.beta1.to_string(),
            "beta2" => o.beta2.to_string(),
            "eps" => o.eps.to_string(),
            "weight_decay" => o.weight_decay.to_string(),
            "base_widths" => u.base_widths.map(|w| w.to_string()).join(","),
            "width_scale" => u.width_scale.to_string(),
            "layers_per_block" => u.layers_per_block.to_string(),
            "mid_layers" => u.mid_layers.to_string(),
            "attention_heads" => u.attention_heads.to_string(),
            "norm_groups" => u.norm_groups.to_string(),
            "context_dim" => u.context_dim.to_string(),
            "timesteps" => u.timesteps.to_string(),
            "aux_channels" => u.aux_channels.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Config(format!("bad value '{v}' for '{key}'")))
        }
        let u = &mut self.unet;
        let o = &mut self.optimizer;
        match key {
            "steps" => self.steps = p(key, value)?,
            "batch" => self.batch = p(key, value)?,
            "mode" => self.mode = value.trim().parse()?,
            "interpolation" => self.interpolation = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "checkpoint_every" => self.checkpoint_every = p(key, value)?,
            "lr" => o.lr = p(key, value)?,
            "beta1" => o.beta1 = p(key, value)?,
            "beta2" => o.beta2 = p(key, value)?,
            "eps" => o.eps = p(key, value)?,
            "weight_decay" => o.weight_decay = p(key, value)?,
            "base_widths" => {
                let ws: Vec<usize> = value.split(',').map(|w| p(key, w)).collect::<Result<_>>()?;
                u.base_widths = ws
                    .try_into()
                    .map_err(|_| Error::Config(format!("base_widths needs {DEPTH} comma-separated values")))?;
            }
            "width_scale" => u.width_scale = value.trim().parse::<WidthScale>()?,
            "layers_per_block" => u.layers_per_block = p(key, value)?,
            "mid_layers" => u.mid_layers = p(key, value)?,
            "attention_heads" => u.attention_heads = p(key, value)?,
            "norm_groups" => u.norm_groups = p(key, value)?,
            "context_dim" => u.context_dim = p(key, value)?,
            "timesteps" => u.timesteps = p(key, value)?,
            "aux_channels" => u.aux_channels = p(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.unet.aux_channels != 4 {
            return Err(Error::Config("aux_channels must be 4 (masked RGB plus visibility)".into()));
        }
        Ok(())
    }

    /// Apply `key=value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(text)?;
        Ok(c)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            let _ = writeln!(s, "{k}={}", self.get(k).expect("listed key"));
        }
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}
