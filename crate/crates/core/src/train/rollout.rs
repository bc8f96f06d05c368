use crate::domain::{Configuration, EpisodeRecord, ExperienceBuffer};
use crate::env::EnvContract;
use crate::features::StateEmbedding;
use crate::error::{Error, Result};
use crate::policy::{value_estimate, HierarchicalPolicy, PromptStep};
use crate::reward::{shaped_reward, RewardConfig};
use crate::seeds::{derive_seed, rng_from_seed, stream, EpisodeRng};

/// An episode plus the behavior-policy quantities cached at sampling time.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub record: EpisodeRecord,
    pub input: Vec<f64>,
    pub structure_log_prob: f64,
    pub structure_entropies: [f64; crate::policy::N_HEADS],
    pub structure_value: f64,
    pub prompt_steps: Vec<PromptStep>,
    pub prompt_values: Vec<f64>,
}

/// Seeds of episode `index` in a run: task draw, policy sampling, execution.
pub fn episode_seeds(run_seed: u64, index: u64) -> (u64, u64, u64) {
    (
        derive_seed(run_seed, stream::QUERIES, index),
        derive_seed(run_seed, stream::POLICY, index),
        derive_seed(run_seed, stream::EXECUTION, index),
    )
}

/// The environment, reward, and seed streams shared by every method, so
/// that episode `i` of a run sees the same task and execution seed whoever
/// picks the configuration.
#[derive(Debug, Clone, Copy)]
pub struct Harness<'a, E: EnvContract> {
    pub env: &'a E,
    pub reward: &'a RewardConfig,
    pub run_seed: u64,
}

impl<'a, E: EnvContract> Harness<'a, E> {
    pub fn new(env: &'a E, reward: &'a RewardConfig, run_seed: u64) -> Self {
        Self { env, reward, run_seed }
    }

    /// Runs episode `index`: draws the task, lets `choose` pick a
    /// configuration with the episode's policy RNG, executes, and scores.
    pub fn episode<T>(
        &self,
        index: u64,
        choose: impl FnOnce(&StateEmbedding, &mut EpisodeRng) -> Result<(Configuration, T)>,
    ) -> Result<(EpisodeRecord, T)> {
        let (task_seed, policy_seed, exec_seed) = episode_seeds(self.run_seed, index);
        let task = self.env.draw_task(task_seed)?;
        let state = self.env.embed(&task);
        let mut rng = rng_from_seed(policy_seed);
        let (config, extra) = choose(&state, &mut rng)?;
        let outcome = self
            .env
            .execute(&task, &config, exec_seed)
            .map_err(|e| Error::Contract(format!("episode {index} (query {}): {e}", self.env.query(&task).id)))?;
        let (r, breakdown) = shaped_reward(&outcome, self.reward);
        let record = EpisodeRecord {
            state,
            structure: config.structure,
            prompts: config.prompts,
            outcome,
            reward: r,
            breakdown,
            seed: exec_seed,
        };
        Ok((record, extra))
    }
}

/// Runs one episode: embed, sample structure and prompts, execute, reward.
pub fn run_episode<E: EnvContract>(
    policy: &HierarchicalPolicy,
    env: &E,
    reward: &RewardConfig,
    run_seed: u64,
    index: u64,
) -> Result<Rollout> {
    let (record, (structure, prompt)) = Harness::new(env, reward, run_seed).episode(index, |state, rng| {
        let d = policy.sample(state, rng)?;
        Ok((d.config, (d.structure, d.prompts)))
    })?;
    let input = record.state.input_vector();
    let structure_value = value_estimate(&policy.structure.value, &input)?;
    let prompt_values = prompt
        .steps
        .iter()
        .map(|s| value_estimate(&policy.prompt.value, &s.input))
        .collect::<Result<Vec<_>>>()?;
    Ok(Rollout {
        record,
        input,
        structure_log_prob: structure.log_prob,
        structure_entropies: structure.entropies,
        structure_value,
        prompt_steps: prompt.steps,
        prompt_values,
    })
}

/// Episodes `start..start + n` of a run, in order.
pub fn collect_rollouts<E: EnvContract>(
    policy: &HierarchicalPolicy,
    env: &E,
    reward: &RewardConfig,
    run_seed: u64,
    start: u64,
    n: usize,
) -> Result<Vec<Rollout>> {
    (0..n as u64)
        .map(|k| run_episode(policy, env, reward, run_seed, start + k))
        .collect()
}

/// As [`collect_rollouts`] but keeps only the stored records.
pub fn collect_episodes<E: EnvContract>(
    policy: &HierarchicalPolicy,
    env: &E,
    reward: &RewardConfig,
    run_seed: u64,
    n: usize,
) -> Result<ExperienceBuffer> {
    Ok(collect_rollouts(policy, env, reward, run_seed, 0, n)?
        .into_iter()
        .map(|r| r.record)
        .collect())
}
