//! Policy optimization: PPO or GRPO batches, then optional elite SFT or DPO
//! refinement, plus checks of the refinement guarantees.

mod config;
mod dpo;
mod elite;
mod ppo;
mod rollout;

pub use config::{DpoConfig, GrpoConfig, PpoConfig, SftConfig, UpdateParams};
pub use dpo::{dpo_loss, dpo_update, form_pairs, DpoReport, PreferencePair};
pub use elite::{
    action_key, effective_threshold, filter_elite, kl_to_empirical, quantile, sft_loss,
    sft_update, verify_reward_floor, verify_support_restriction, ActionKey, EliteAction, EliteSet,
    EliteState, RewardFloorReport, SftReport, SupportReport, SupportViolation,
};
pub use ppo::{
    clipped_surrogate, clipped_update, compute_advantages, compute_group_advantages,
    grpo_advantages, ppo_update, probe_masked_mass, prompt_loss, prompt_returns, structure_loss,
    Advantages, GroupGrads, LossParts, PolicyOptimizer, UpdateDiagnostics,
};
pub(crate) use ppo::surrogate_grad;
pub use rollout::{collect_episodes, collect_rollouts, episode_seeds, run_episode, Harness, Rollout};

use serde::{Deserialize, Serialize};

use crate::domain::{Configuration, ExperienceBuffer};
use crate::env::{brute_force_best, EnvContract, SyntheticEnv, SyntheticTask};
use crate::error::{Error, Result};
use crate::policy::{ConfigPolicy, HierarchicalPolicy};
use crate::reward::RewardConfig;
use crate::seeds::{derive_seed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Ppo,
    Grpo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Refinement {
    Sft,
    Dpo,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub objective: Objective,
    pub refinement: Refinement,
    pub ppo: PpoConfig,
    pub grpo: GrpoConfig,
    pub sft: SftConfig,
    pub dpo: DpoConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            objective: Objective::Ppo,
            refinement: Refinement::Sft,
            ppo: PpoConfig::default(),
            grpo: GrpoConfig::default(),
            sft: SftConfig::default(),
            dpo: DpoConfig::default(),
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        self.grpo.validate()?;
        self.sft.validate()?;
        self.dpo.validate()
    }

    fn schedule(&self) -> (usize, usize, f64, UpdateParams) {
        match self.objective {
            Objective::Ppo => (
                self.ppo.total_episodes,
                self.ppo.batch_size,
                self.ppo.gamma,
                self.ppo.update_params(),
            ),
            Objective::Grpo => (
                self.grpo.total_episodes,
                self.grpo.batch_size,
                self.grpo.gamma,
                self.grpo.update_params(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RefinementOutcome {
    Sft { elite: usize, tau_eff: f64, report: SftReport },
    Dpo(DpoReport),
    Skipped(String),
    NotRequested,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub policy: HierarchicalPolicy,
    pub buffer: ExperienceBuffer,
    pub diagnostics: Vec<UpdateDiagnostics>,
    pub refinement: RefinementOutcome,
}

/// Policy-gradient phase only: batches of fresh episodes, one clipped update
/// per batch. `on_batch` sees each batch's diagnostics as they are produced.
pub fn policy_gradient_phase<E: EnvContract>(
    env: &E,
    policy: &mut HierarchicalPolicy,
    settings: &TrainSettings,
    reward: &RewardConfig,
    run_seed: u64,
    on_batch: &mut dyn FnMut(&UpdateDiagnostics),
) -> Result<(ExperienceBuffer, Vec<UpdateDiagnostics>)> {
    let (total, batch_size, gamma, params) = settings.schedule();
    let mut opt = PolicyOptimizer::new(policy);
    let mut buffer = ExperienceBuffer::new();
    let mut diagnostics = Vec::new();
    let mut start = 0u64;
    let mut b = 0;
    while (start as usize) < total {
        let n = batch_size.min(total - start as usize);
        let batch = collect_rollouts(policy, env, reward, run_seed, start, n)?;
        let adv = match settings.objective {
            Objective::Ppo => compute_advantages(policy, &batch, gamma)?,
            Objective::Grpo => compute_group_advantages(&batch, gamma),
        };
        let d = clipped_update(policy, &mut opt, &batch, &adv, &params, b)?;
        on_batch(&d);
        diagnostics.push(d);
        buffer.extend(batch.into_iter().map(|r| r.record));
        start += n as u64;
        b += 1;
    }
    Ok((buffer, diagnostics))
}

/// Runs the refinement stage chosen in `settings` on a collected buffer.
pub fn refine(
    policy: &mut HierarchicalPolicy,
    buffer: &ExperienceBuffer,
    settings: &TrainSettings,
    run_seed: u64,
) -> Result<RefinementOutcome> {
    let seed = derive_seed(run_seed, stream::POLICY, u64::MAX);
    match settings.refinement {
        Refinement::None => Ok(RefinementOutcome::NotRequested),
        Refinement::Sft => match filter_elite(buffer, &settings.sft) {
            Ok(elite) => {
                let report = sft_update(policy, &elite, &settings.sft, seed)?;
                Ok(RefinementOutcome::Sft {
                    elite: elite.len(),
                    tau_eff: elite.tau_eff,
                    report,
                })
            }
            Err(Error::EmptyElite) => Ok(RefinementOutcome::Skipped("elite set is empty".into())),
            Err(e) => Err(e),
        },
        Refinement::Dpo => match dpo_update(policy, buffer, &settings.dpo, seed) {
            Ok(r) => Ok(RefinementOutcome::Dpo(r)),
            Err(Error::NoPairs(m)) => Ok(RefinementOutcome::Skipped(format!("no preference pairs: {m}"))),
            Err(e) => Err(e),
        },
    }
}

/// Full pipeline: policy-gradient phase then refinement.
pub fn train<E: EnvContract>(
    env: &E,
    mut policy: HierarchicalPolicy,
    settings: &TrainSettings,
    reward: &RewardConfig,
    run_seed: u64,
    on_batch: &mut dyn FnMut(&UpdateDiagnostics),
) -> Result<TrainOutput> {
    settings.validate()?;
    reward.validate()?;
    let (buffer, diagnostics) = policy_gradient_phase(env, &mut policy, settings, reward, run_seed, on_batch)?;
    let refinement = refine(&mut policy, &buffer, settings, run_seed)?;
    Ok(TrainOutput {
        policy,
        buffer,
        diagnostics,
        refinement,
    })
}

/// Held-out evaluation tasks drawn from the run's evaluation stream.
pub fn evaluation_tasks(env: &SyntheticEnv, run_seed: u64, n: usize) -> Result<Vec<SyntheticTask>> {
    (0..n as u64)
        .map(|i| env.draw_task(derive_seed(run_seed, stream::EVAL, i)))
        .collect()
}

/// Mean expected reward of the policy's greedy configuration per task.
pub fn evaluate_greedy(
    policy: &dyn ConfigPolicy,
    env: &SyntheticEnv,
    tasks: &[SyntheticTask],
    reward: &RewardConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for t in tasks {
        let c = policy.greedy(&env.embed(t))?;
        total += env.expected_reward(t, &c, reward)?;
    }
    Ok(total / tasks.len().max(1) as f64)
}

/// Mean over tasks of the exact best expected reward within `space`.
pub fn oracle_utility(
    env: &SyntheticEnv,
    tasks: &[SyntheticTask],
    space: &[Configuration],
    reward: &RewardConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for t in tasks {
        total += brute_force_best(t, space, &env.model, &env.atoms, reward)?.1;
    }
    Ok(total / tasks.len().max(1) as f64)
}
