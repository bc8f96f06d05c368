//! Clipped policy-gradient updates shared by PPO and GRPO.

use serde::{Deserialize, Serialize};

use super::config::UpdateParams;
use super::rollout::Rollout;
use crate::error::{Error, Result};
use crate::numeric::{clip_grad_norm_groups, mean_std, normalize, AdamState};
use crate::policy::{value_backprop, value_estimate, HierarchicalPolicy, N_HEADS};

/// Per-decision advantages and value targets for one batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Advantages {
    pub structure: Vec<f64>,
    pub structure_targets: Vec<f64>,
    /// Per rollout, one entry per recorded prompt step.
    pub prompt: Vec<Vec<f64>>,
    pub prompt_targets: Vec<Vec<f64>>,
}

/// Return credited to each prompt step: `gamma^(steps after it) * reward`.
pub fn prompt_returns(reward: f64, n_steps: usize, gamma: f64) -> Vec<f64> {
    (0..n_steps)
        .map(|j| gamma.powi((n_steps - 1 - j) as i32) * reward)
        .collect()
}

fn regroup(flat: Vec<f64>, shape: &[usize]) -> Vec<Vec<f64>> {
    let mut it = flat.into_iter();
    shape.iter().map(|&n| it.by_ref().take(n).collect()).collect()
}

/// Value-baselined advantages, each set normalized within the batch.
pub fn compute_advantages(policy: &HierarchicalPolicy, batch: &[Rollout], gamma: f64) -> Result<Advantages> {
    let mut s_adv = Vec::with_capacity(batch.len());
    let mut s_tgt = Vec::with_capacity(batch.len());
    let mut p_adv = Vec::new();
    let mut p_tgt = Vec::new();
    let shape: Vec<usize> = batch.iter().map(|r| r.prompt_steps.len()).collect();
    for r in batch {
        let ret = r.record.reward;
        s_adv.push(ret - value_estimate(&policy.structure.value, &r.input)?);
        s_tgt.push(ret);
        for (step, g) in r.prompt_steps.iter().zip(prompt_returns(ret, r.prompt_steps.len(), gamma)) {
            p_adv.push(g - value_estimate(&policy.prompt.value, &step.input)?);
            p_tgt.push(g);
        }
    }
    Ok(Advantages {
        structure: normalize(&s_adv),
        structure_targets: s_tgt,
        prompt: regroup(normalize(&p_adv), &shape),
        prompt_targets: regroup(p_tgt, &shape),
    })
}

/// `(R_i - mean) / (population std + 1e-8)`.
pub fn grpo_advantages(rewards: &[f64]) -> Vec<f64> {
    normalize(rewards)
}

/// Group-relative advantages for a batch; no value baseline.
pub fn compute_group_advantages(batch: &[Rollout], gamma: f64) -> Advantages {
    let rewards: Vec<f64> = batch.iter().map(|r| r.record.reward).collect();
    let shape: Vec<usize> = batch.iter().map(|r| r.prompt_steps.len()).collect();
    let flat: Vec<f64> = batch
        .iter()
        .flat_map(|r| prompt_returns(r.record.reward, r.prompt_steps.len(), gamma))
        .collect();
    let p_tgt = regroup(flat.clone(), &shape);
    Advantages {
        structure: grpo_advantages(&rewards),
        structure_targets: rewards,
        prompt: regroup(grpo_advantages(&flat), &shape),
        prompt_targets: p_tgt,
    }
}

/// `min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)`.
pub fn clipped_surrogate(ratio: f64, adv: f64, eps: f64) -> f64 {
    (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// d surrogate / d log pi, and whether the clip was active.
pub(crate) fn surrogate_grad(ratio: f64, adv: f64, eps: f64) -> (f64, bool) {
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        (ratio * adv, false)
    } else {
        (0.0, true)
    }
}

/// Loss terms of one policy group.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub surrogate: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Gradient of one policy group (policy net and its value net).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupGrads {
    pub policy: Vec<f64>,
    pub value: Vec<f64>,
}

/// Structure-group loss `-mean surrogate + c_v * mean (V - R)^2 - c_e * mean H`
/// and its gradient.
pub fn structure_loss(
    policy: &HierarchicalPolicy,
    batch: &[Rollout],
    adv: &Advantages,
    p: &UpdateParams,
) -> Result<(LossParts, GroupGrads)> {
    let sp = &policy.structure;
    let mut g = GroupGrads {
        policy: vec![0.0; sp.net.n_params()],
        value: vec![0.0; sp.value.n_params()],
    };
    let n = batch.len().max(1) as f64;
    let mut parts = LossParts::default();
    let mut clipped = 0usize;
    for (r, &a) in batch.iter().zip(&adv.structure) {
        let eval = sp.evaluate(&policy.table, &r.input, &r.record.structure)?;
        let log_ratio = eval.log_prob - r.structure_log_prob;
        let ratio = log_ratio.exp();
        parts.surrogate += clipped_surrogate(ratio, a, p.clip_eps) / n;
        parts.entropy += eval.entropy / n;
        parts.approx_kl += -log_ratio / n;
        let (ds, was_clipped) = surrogate_grad(ratio, a, p.clip_eps);
        clipped += usize::from(was_clipped);
        sp.backprop(&eval, -ds / n, -p.entropy_coef / n, &mut g.policy)?;
    }
    if p.value_coef > 0.0 {
        for (r, &t) in batch.iter().zip(&adv.structure_targets) {
            parts.value += value_backprop(&sp.value, &r.input, t, p.value_coef / n, &mut g.value)? / n;
        }
    }
    parts.clip_fraction = clipped as f64 / n;
    parts.total = -parts.surrogate + p.value_coef * parts.value - p.entropy_coef * parts.entropy;
    Ok((parts, g))
}

/// Prompt-group loss, averaged over all recorded prompt steps in the batch.
pub fn prompt_loss(
    policy: &HierarchicalPolicy,
    batch: &[Rollout],
    adv: &Advantages,
    p: &UpdateParams,
) -> Result<(LossParts, GroupGrads)> {
    let pp = &policy.prompt;
    let mut g = GroupGrads {
        policy: vec![0.0; pp.net.n_params()],
        value: vec![0.0; pp.value.n_params()],
    };
    let total_steps: usize = batch.iter().map(|r| r.prompt_steps.len()).sum();
    let mut parts = LossParts::default();
    if total_steps == 0 {
        return Ok((parts, g));
    }
    let n = total_steps as f64;
    let mut clipped = 0usize;
    for (i, r) in batch.iter().enumerate() {
        for (j, step) in r.prompt_steps.iter().enumerate() {
            let a = adv.prompt[i][j];
            let cur = pp.evaluate_step(step)?;
            let log_ratio = cur.log_prob - step.log_prob;
            let ratio = log_ratio.exp();
            let (ds, was_clipped) = surrogate_grad(ratio, a, p.clip_eps);
            clipped += usize::from(was_clipped);
            pp.backprop_step(step, -ds / n, -p.entropy_coef / n, &mut g.policy)?;
            parts.surrogate += clipped_surrogate(ratio, a, p.clip_eps) / n;
            parts.entropy += cur.entropy / n;
            parts.approx_kl += -log_ratio / n;
            if p.value_coef > 0.0 {
                let t = adv.prompt_targets[i][j];
                parts.value += value_backprop(&pp.value, &step.input, t, p.value_coef / n, &mut g.value)? / n;
            }
        }
    }
    parts.clip_fraction = clipped as f64 / n;
    parts.total = -parts.surrogate + p.value_coef * parts.value - p.entropy_coef * parts.entropy;
    Ok((parts, g))
}

/// Adam state for the four networks of a hierarchical policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOptimizer {
    pub structure: AdamState,
    pub structure_value: AdamState,
    pub prompt: AdamState,
    pub prompt_value: AdamState,
}

impl PolicyOptimizer {
    pub fn new(policy: &HierarchicalPolicy) -> Self {
        Self {
            structure: AdamState::new(policy.structure.net.n_params()),
            structure_value: AdamState::new(policy.structure.value.n_params()),
            prompt: AdamState::new(policy.prompt.net.n_params()),
            prompt_value: AdamState::new(policy.prompt.value.n_params()),
        }
    }

    /// Clips each group jointly (`max_norm` <= 0 disables clipping), then
    /// takes one Adam step per network.
    pub fn apply(
        &mut self,
        policy: &mut HierarchicalPolicy,
        mut s: GroupGrads,
        mut pr: GroupGrads,
        lr_struct: f64,
        lr_prompt: f64,
        max_norm: f64,
    ) -> Result<(f64, f64)> {
        let (sn, pn) = if max_norm > 0.0 {
            (
                clip_grad_norm_groups(&mut [s.policy.as_mut_slice(), s.value.as_mut_slice()], max_norm),
                clip_grad_norm_groups(&mut [pr.policy.as_mut_slice(), pr.value.as_mut_slice()], max_norm),
            )
        } else {
            (f64::NAN, f64::NAN)
        };
        self.structure.step(policy.structure.net.params_mut(), &s.policy, lr_struct)?;
        self.structure_value.step(policy.structure.value.params_mut(), &s.value, lr_struct)?;
        self.prompt.step(policy.prompt.net.params_mut(), &pr.policy, lr_prompt)?;
        self.prompt_value.step(policy.prompt.value.params_mut(), &pr.value, lr_prompt)?;
        Ok((sn, pn))
    }
}

/// Diagnostics of one batch update, emitted as one JSONL row by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    pub batch: usize,
    pub episodes: usize,
    pub mean_reward: f64,
    pub success_rate: f64,
    pub head_entropy: [f64; N_HEADS],
    pub structure: LossParts,
    pub prompt: LossParts,
}

/// Total probability on masked entries over the batch's states; zero unless
/// masking is broken.
pub fn probe_masked_mass(policy: &HierarchicalPolicy, probes: &[Rollout]) -> Result<f64> {
    let mut mass = 0.0;
    for r in probes {
        let logits = policy.structure.net.forward(&r.input)?;
        let dists = crate::policy::head_dists(&logits, &policy.table, r.record.structure.workflow)?;
        for d in &dists {
            mass += d.probs().iter().zip(d.mask()).filter(|(_, &m)| !m).map(|(p, _)| p).sum::<f64>();
        }
        for step in &r.prompt_steps {
            let d = crate::numeric::MaskedCategorical::new(policy.prompt.net.forward(&step.input)?, step.mask.clone())?;
            mass += d.probs().iter().zip(d.mask()).filter(|(_, &m)| !m).map(|(p, _)| p).sum::<f64>();
        }
    }
    Ok(mass)
}

/// Several epochs of full-batch clipped updates on both policy groups.
pub fn clipped_update(
    policy: &mut HierarchicalPolicy,
    opt: &mut PolicyOptimizer,
    batch: &[Rollout],
    adv: &Advantages,
    p: &UpdateParams,
    batch_index: usize,
) -> Result<UpdateDiagnostics> {
    if batch.is_empty() {
        return Err(Error::Contract("update on an empty batch".into()));
    }
    let mut last = (LossParts::default(), LossParts::default());
    let probes = &batch[..batch.len().min(4)];
    for epoch in 0..p.epochs {
        let (sl, sg) = structure_loss(policy, batch, adv, p)?;
        let (pl, pg) = prompt_loss(policy, batch, adv, p)?;
        if !sl.total.is_finite() || !pl.total.is_finite() {
            return Err(Error::Divergence(format!(
                "batch {batch_index} epoch {epoch}: structure loss {sl:?}, prompt loss {pl:?}"
            )));
        }
        if epoch == 0 {
            last = (sl, pl);
        }
        opt.apply(policy, sg, pg, p.lr_struct, p.lr_prompt, p.max_grad_norm)?;
        let leaked = probe_masked_mass(policy, probes)?;
        if leaked != 0.0 {
            return Err(Error::Divergence(format!(
                "batch {batch_index} epoch {epoch}: {leaked} probability mass on masked actions"
            )));
        }
    }
    let rewards: Vec<f64> = batch.iter().map(|r| r.record.reward).collect();
    let n = batch.len() as f64;
    let mut head_entropy = [0.0; N_HEADS];
    for r in batch {
        for (h, e) in r.structure_entropies.iter().enumerate() {
            head_entropy[h] += e / n;
        }
    }
    Ok(UpdateDiagnostics {
        batch: batch_index,
        episodes: batch.len(),
        mean_reward: mean_std(&rewards).0,
        success_rate: batch.iter().filter(|r| r.record.outcome.correct).count() as f64 / n,
        head_entropy,
        structure: last.0,
        prompt: last.1,
    })
}

/// PPO update: value-baselined advantages then clipped epochs.
pub fn ppo_update(
    policy: &mut HierarchicalPolicy,
    opt: &mut PolicyOptimizer,
    batch: &[Rollout],
    cfg: &super::PpoConfig,
    batch_index: usize,
) -> Result<UpdateDiagnostics> {
    let adv = compute_advantages(policy, batch, cfg.gamma)?;
    clipped_update(policy, opt, batch, &adv, &cfg.update_params(), batch_index)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grpo_worked_examples() {
        let a = grpo_advantages(&[1.0, 2.0, 3.0]);
        let s = (2.0f64 / 3.0).sqrt();
        for (got, want) in a.iter().zip([-1.0 / s, 0.0, 1.0 / s]) {
            assert!((got - want).abs() < 1e-6);
        }
        assert!((a[2] - 1.22474).abs() < 1e-5);
        assert_eq!(grpo_advantages(&[5.0]), vec![0.0]);
        assert!(grpo_advantages(&[2.0; 4]).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn clip_definition() {
        assert!((clipped_surrogate(2.0, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_surrogate(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
        assert_eq!(clipped_surrogate(1.0, 0.7, 0.2), 0.7);
        assert_eq!(surrogate_grad(2.0, 1.0, 0.2), (0.0, true));
        assert_eq!(surrogate_grad(1.1, 1.0, 0.2), (1.1, false));
    }

    #[test]
    fn prompt_returns_discount_towards_start() {
        let g = prompt_returns(2.0, 3, 0.5);
        assert_eq!(g, vec![0.5, 1.0, 2.0]);
        assert!(prompt_returns(1.0, 0, 0.9).is_empty());
    }
}
