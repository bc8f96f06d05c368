//! Shaped episode reward: task success, minus step and token penalties,
//! plus asymmetric tool shaping.

use serde::{Deserialize, Serialize};

use crate::domain::{ExecutionOutcome, RewardBreakdown};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub alpha: f64,
    pub beta_steps: f64,
    pub beta_tokens: f64,
    pub eta: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub t_max: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            beta_steps: 0.02,
            beta_tokens: 0.03,
            eta: 1.0,
            delta1: 0.1,
            delta2: 0.2,
            delta3: 0.3,
            t_max: 4096.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let coeffs = [
            ("alpha", self.alpha),
            ("beta_steps", self.beta_steps),
            ("beta_tokens", self.beta_tokens),
            ("eta", self.eta),
            ("delta1", self.delta1),
            ("delta2", self.delta2),
            ("delta3", self.delta3),
        ];
        for (name, v) in coeffs {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("reward.{name}"), "must be finite and >= 0"));
            }
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return Err(Error::config("reward.t_max", "must be finite and > 0"));
        }
        Ok(())
    }

    /// Closed interval containing every reachable reward, given the
    /// environment's declared maxima for steps, tokens, tools used and tools
    /// allocated.
    pub fn bounds(&self, max_steps: u32, max_tokens: u64, max_used: u32, max_alloc: u32) -> (f64, f64) {
        let lo = -(self.beta_steps * max_steps as f64
            + self.beta_tokens * (max_tokens as f64 / self.t_max)
            + self.eta * self.delta3 * max_alloc as f64);
        let hi = self.alpha + self.eta * (self.delta1 * max_used as f64 + self.delta2);
        (lo, hi)
    }
}

/// Rewards invoked tools (with a bonus when correct) and penalizes tools
/// that were allocated but never invoked. No allocation and no use is neutral.
pub fn tool_shaping(n_used: u32, n_alloc: u32, correct: bool, cfg: &RewardConfig) -> f64 {
    if n_used > 0 {
        cfg.delta1 * n_used as f64 + if correct { cfg.delta2 } else { 0.0 }
    } else if n_alloc > 0 {
        -cfg.delta3 * n_alloc as f64
    } else {
        0.0
    }
}

pub fn shaped_reward(outcome: &ExecutionOutcome, cfg: &RewardConfig) -> (f64, RewardBreakdown) {
    let breakdown = RewardBreakdown {
        success: if outcome.correct { cfg.alpha } else { 0.0 },
        steps: -cfg.beta_steps * outcome.n_steps as f64,
        tokens: -cfg.beta_tokens * (outcome.n_tokens as f64 / cfg.t_max),
        tools: cfg.eta
            * tool_shaping(
                outcome.n_tools_used,
                outcome.n_tools_allocated,
                outcome.correct,
                cfg,
            ),
    };
    (breakdown.total(), breakdown)
}
