use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mgq::MaskSchedule;
use crate::model::ModelConfig;
use crate::objectives::LossWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Number of sub-codebooks `G`.
    pub groups: usize,
    /// Rows per sub-codebook `K`.
    pub codebook_size: usize,
    /// Probability of keeping `1..=G` groups in a training step.
    pub mask_probs: Vec<f64>,
    pub loss: LossWeights,
    pub model: ModelConfig,
    /// Side of the square training images.
    pub image_size: usize,
    /// Held-out PSNR is logged every this many steps (0 disables).
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            weight_decay: 5e-2,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            batch_size: 8,
            steps: 1000,
            seed: 0,
            groups: 4,
            codebook_size: 64,
            mask_probs: vec![0.1, 0.1, 0.1, 0.7],
            loss: LossWeights::default(),
            model: ModelConfig::default(),
            image_size: 32,
            eval_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::invalid(format!(
                    "{name} must lie in (0, 1), got {b}"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.groups == 0 || self.codebook_size == 0 {
            return Err(Error::invalid("groups and codebook_size must be positive"));
        }
        if self.codebook_size > u32::MAX as usize {
            return Err(Error::invalid("codebook_size must fit in 32 bits"));
        }
        self.model.validate()?;
        if self.model.latent_dim % self.groups != 0 {
            return Err(Error::invalid(format!(
                "latent_dim {} is not divisible by groups {}",
                self.model.latent_dim, self.groups
            )));
        }
        if self.image_size == 0 || self.image_size % self.model.downsample != 0 {
            return Err(Error::invalid(format!(
                "image_size {} must be a positive multiple of downsample {}",
                self.image_size, self.model.downsample
            )));
        }
        self.loss.validate()?;
        let sched = self.mask_schedule()?;
        if sched.groups() != self.groups {
            return Err(Error::invalid(format!(
                "mask schedule has {} entries for {} groups",
                sched.groups(),
                self.groups
            )));
        }
        Ok(())
    }

    pub fn mask_schedule(&self) -> Result<MaskSchedule> {
        MaskSchedule::new(self.mask_probs.clone())
    }

    pub fn sub_dim(&self) -> usize {
        self.model.latent_dim / self.groups
    }

    /// Sets the group count and the matching default nested schedule.
    pub fn with_groups(mut self, groups: usize, codebook_size: usize) -> Result<Self> {
        self.groups = groups;
        self.codebook_size = codebook_size;
        self.mask_probs = MaskSchedule::nested(groups)?.probs().to_vec();
        Ok(self)
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::invalid(format!("`{key}`: cannot parse `{value}`")))
        }
        match key {
            "learning_rate" | "lr" => self.learning_rate = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "groups" => {
                self.groups = num(key, value)?;
                self.mask_probs = MaskSchedule::nested(self.groups)?.probs().to_vec();
            }
            "codebook_size" => self.codebook_size = num(key, value)?,
            "mask_probs" => {
                self.mask_probs = value
                    .split(',')
                    .map(|v| num(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            "nested_masking" => {
                let on: bool = num(key, value)?;
                let sched = if on {
                    MaskSchedule::nested(self.groups)?
                } else {
                    MaskSchedule::disabled(self.groups)?
                };
                self.mask_probs = sched.probs().to_vec();
            }
            "image_size" => self.image_size = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "downsample" => self.model.downsample = num(key, value)?,
            "latent_dim" => self.model.latent_dim = num(key, value)?,
            "hidden_dim" => self.model.hidden_dim = num(key, value)?,
            "depth" => self.model.depth = num(key, value)?,
            "lambda_l2" => self.loss.l2 = num(key, value)?,
            "lambda_charbonnier" => self.loss.charbonnier = num(key, value)?,
            "lambda_commit" => self.loss.commit = num(key, value)?,
            "lambda_vq" => self.loss.vq = num(key, value)?,
            "lambda_gan" => self.loss.gan = num(key, value)?,
            "lambda_perceptual" => self.loss.perceptual = num(key, value)?,
            "charbonnier_eps" => self.loss.eps = num(key, value)?,
            _ => return Err(Error::invalid(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::invalid(format!(
                    "line {}: expected key=value, got `{line}`",
                    lineno + 1
                ))
            })?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::invalid(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn from_kv_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_kv(&text)?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.learning_rate, 1e-5);
        assert_eq!(cfg.weight_decay, 5e-2);
        assert_eq!((cfg.beta1, cfg.beta2), (0.9, 0.95));
    }

    #[test]
    fn kv_parsing() {
        let mut cfg = TrainConfig::default();
        cfg.apply_kv("# desk run\nsteps = 20\nlr=0.001\ngroups=2\nlatent_dim=16 # trailing\n\nlambda_vq=0.5\n")
            .unwrap();
        assert_eq!(cfg.steps, 20);
        assert_eq!(cfg.learning_rate, 1e-3);
        assert_eq!(cfg.groups, 2);
        assert_eq!(cfg.mask_probs, vec![0.3, 0.7]);
        assert_eq!(cfg.model.latent_dim, 16);
        assert_eq!(cfg.loss.vq, 0.5);
        cfg.validate().unwrap();

        assert!(cfg.apply_kv("nonsense").is_err());
        assert!(cfg.apply_kv("steps=abc").is_err());
        assert!(cfg.apply_kv("unknown=1").is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            TrainConfig {
                beta1: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                groups: 3,
                mask_probs: vec![0.2, 0.2, 0.6],
                ..TrainConfig::default()
            },
            TrainConfig {
                mask_probs: vec![0.5, 0.5],
                ..TrainConfig::default()
            },
            TrainConfig {
                image_size: 20,
                ..TrainConfig::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }
}
