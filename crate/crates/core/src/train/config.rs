use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn positive(path: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(path, format!("must be finite and > 0, got {v}")))
    }
}

fn non_negative(path: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(path, format!("must be finite and >= 0, got {v}")))
    }
}

fn unit_interval(path: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::config(path, format!("must lie in [0, 1], got {v}")))
    }
}

fn at_least_one(path: &str, v: usize) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(Error::config(path, "must be >= 1"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub lr_struct: f64,
    pub lr_prompt: f64,
    pub batch_size: usize,
    pub clip_eps: f64,
    pub gamma: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub epochs_per_batch: usize,
    pub total_episodes: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            lr_struct: 3e-4,
            lr_prompt: 5e-5,
            batch_size: 32,
            clip_eps: 0.2,
            gamma: 0.95,
            entropy_coef: 0.05,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            epochs_per_batch: 4,
            total_episodes: 5000,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        positive("ppo.lr_struct", self.lr_struct)?;
        positive("ppo.lr_prompt", self.lr_prompt)?;
        at_least_one("ppo.batch_size", self.batch_size)?;
        positive("ppo.clip_eps", self.clip_eps)?;
        if self.clip_eps >= 1.0 {
            return Err(Error::config("ppo.clip_eps", "must be < 1"));
        }
        unit_interval("ppo.gamma", self.gamma)?;
        non_negative("ppo.entropy_coef", self.entropy_coef)?;
        non_negative("ppo.value_coef", self.value_coef)?;
        positive("ppo.max_grad_norm", self.max_grad_norm)?;
        at_least_one("ppo.epochs_per_batch", self.epochs_per_batch)?;
        at_least_one("ppo.total_episodes", self.total_episodes)
    }

    pub fn update_params(&self) -> UpdateParams {
        UpdateParams {
            lr_struct: self.lr_struct,
            lr_prompt: self.lr_prompt,
            clip_eps: self.clip_eps,
            entropy_coef: self.entropy_coef,
            value_coef: self.value_coef,
            max_grad_norm: self.max_grad_norm,
            epochs: self.epochs_per_batch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub clip_eps: f64,
    pub gamma: f64,
    pub entropy_coef: f64,
    pub kl_coef: f64,
    pub epochs_per_batch: usize,
    pub max_grad_norm: f64,
    pub total_episodes: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 64,
            clip_eps: 0.2,
            gamma: 0.99,
            entropy_coef: 0.05,
            kl_coef: 0.0,
            epochs_per_batch: 4,
            max_grad_norm: 0.5,
            total_episodes: 5000,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        positive("grpo.lr", self.lr)?;
        at_least_one("grpo.batch_size", self.batch_size)?;
        positive("grpo.clip_eps", self.clip_eps)?;
        if self.clip_eps >= 1.0 {
            return Err(Error::config("grpo.clip_eps", "must be < 1"));
        }
        unit_interval("grpo.gamma", self.gamma)?;
        non_negative("grpo.entropy_coef", self.entropy_coef)?;
        if self.kl_coef != 0.0 {
            return Err(Error::config("grpo.kl_coef", "only 0 is supported"));
        }
        positive("grpo.max_grad_norm", self.max_grad_norm)?;
        at_least_one("grpo.epochs_per_batch", self.epochs_per_batch)?;
        at_least_one("grpo.total_episodes", self.total_episodes)
    }

    pub fn update_params(&self) -> UpdateParams {
        UpdateParams {
            lr_struct: self.lr,
            lr_prompt: self.lr,
            clip_eps: self.clip_eps,
            entropy_coef: self.entropy_coef,
            value_coef: 0.0,
            max_grad_norm: self.max_grad_norm,
            epochs: self.epochs_per_batch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub lr_struct: f64,
    pub lr_prompt: f64,
    pub entropy_reg: f64,
    pub tau: f64,
    pub elite_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            lr_struct: 1e-4,
            lr_prompt: 5e-6,
            entropy_reg: 0.01,
            tau: 4.0,
            elite_fraction: 0.30,
            epochs: 10,
            batch_size: 32,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        positive("sft.lr_struct", self.lr_struct)?;
        positive("sft.lr_prompt", self.lr_prompt)?;
        non_negative("sft.entropy_reg", self.entropy_reg)?;
        if !self.tau.is_finite() {
            return Err(Error::config("sft.tau", "must be finite"));
        }
        if !(self.elite_fraction > 0.0 && self.elite_fraction <= 1.0) {
            return Err(Error::config("sft.elite_fraction", "must lie in (0, 1]"));
        }
        at_least_one("sft.epochs", self.epochs)?;
        at_least_one("sft.batch_size", self.batch_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoConfig {
    pub lr_struct: f64,
    pub lr_prompt: f64,
    pub batch_size: usize,
    pub beta: f64,
    pub entropy_coef: f64,
    pub epochs: usize,
    pub max_grad_norm: f64,
    pub positive_threshold: f64,
    pub negative_threshold: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            lr_struct: 1e-4,
            lr_prompt: 1e-5,
            batch_size: 16,
            beta: 0.05,
            entropy_coef: 0.05,
            epochs: 3,
            max_grad_norm: 0.5,
            positive_threshold: 4.0,
            negative_threshold: 2.0,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        positive("dpo.lr_struct", self.lr_struct)?;
        positive("dpo.lr_prompt", self.lr_prompt)?;
        at_least_one("dpo.batch_size", self.batch_size)?;
        positive("dpo.beta", self.beta)?;
        non_negative("dpo.entropy_coef", self.entropy_coef)?;
        at_least_one("dpo.epochs", self.epochs)?;
        positive("dpo.max_grad_norm", self.max_grad_norm)?;
        if self.positive_threshold <= self.negative_threshold {
            return Err(Error::config(
                "dpo.positive_threshold",
                "must exceed dpo.negative_threshold",
            ));
        }
        Ok(())
    }
}

/// Hyper-parameters of one clipped policy-gradient update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateParams {
    pub lr_struct: f64,
    pub lr_prompt: f64,
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub epochs: usize,
}
