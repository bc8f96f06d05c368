//! Elite filtering, supervised refinement on elite episodes, and executable
//! checks of what that refinement guarantees in the tabular limit.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::config::SftConfig;
use super::ppo::{GroupGrads, PolicyOptimizer};
use crate::domain::{Configuration, EpisodeRecord, ExperienceBuffer};
use crate::error::{Error, Result};
use crate::features::{StateEmbedding, StateKey};
use crate::policy::HierarchicalPolicy;
use crate::seeds::rng_from_seed;

/// Identity of a full configuration: structure index plus prompt ids.
pub type ActionKey = (usize, Vec<Vec<usize>>);

pub fn action_key(c: &Configuration) -> ActionKey {
    (c.structure.index(), c.prompts.iter().map(|p| p.ids().to_vec()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EliteAction {
    pub config: Configuration,
    pub count: usize,
    pub mean_reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EliteState {
    pub key: StateKey,
    pub state: StateEmbedding,
    pub count: usize,
    pub actions: BTreeMap<ActionKey, EliteAction>,
}

impl EliteState {
    pub fn empirical(&self, key: &ActionKey) -> f64 {
        self.actions.get(key).map_or(0.0, |a| a.count as f64 / self.count as f64)
    }
}

/// Elite records and the empirical action distribution per state key.
#[derive(Debug, Clone, PartialEq)]
pub struct EliteSet {
    pub records: Vec<EpisodeRecord>,
    pub tau_eff: f64,
    pub states: BTreeMap<StateKey, EliteState>,
}

impl EliteSet {
    pub fn from_records(records: Vec<EpisodeRecord>, tau_eff: f64) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyElite);
        }
        let mut states: BTreeMap<StateKey, EliteState> = BTreeMap::new();
        for r in &records {
            let key = r.state.key();
            let entry = states.entry(key.clone()).or_insert_with(|| EliteState {
                key,
                state: r.state.clone(),
                count: 0,
                actions: BTreeMap::new(),
            });
            entry.count += 1;
            let c = r.configuration();
            let a = entry.actions.entry(action_key(&c)).or_insert(EliteAction {
                config: c,
                count: 0,
                mean_reward: 0.0,
            });
            a.count += 1;
            a.mean_reward += (r.reward - a.mean_reward) / a.count as f64;
        }
        Ok(Self {
            records,
            tau_eff,
            states,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Linear-interpolation quantile of unsorted data (`q` in [0, 1]).
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// `max(tau, reward quantile at 1 - elite_fraction)`.
pub fn effective_threshold(buffer: &ExperienceBuffer, cfg: &SftConfig) -> Result<f64> {
    if buffer.is_empty() {
        return Err(Error::Contract("elite filtering on an empty buffer".into()));
    }
    let rewards: Vec<f64> = buffer.iter().map(|r| r.reward).collect();
    Ok(cfg.tau.max(quantile(&rewards, 1.0 - cfg.elite_fraction)))
}

/// Keeps records that are correct and reach the effective threshold.
pub fn filter_elite(buffer: &ExperienceBuffer, cfg: &SftConfig) -> Result<EliteSet> {
    let tau_eff = effective_threshold(buffer, cfg)?;
    let kept: Vec<EpisodeRecord> = buffer
        .iter()
        .filter(|r| r.outcome.correct && r.reward >= tau_eff)
        .cloned()
        .collect();
    EliteSet::from_records(kept, tau_eff)
}

/// Mean over `records` of `-log pi(a|s) - entropy_reg * H`, where both terms
/// cover the structure decision and every recorded prompt step, plus the
/// gradient of that mean.
pub fn sft_loss(
    policy: &HierarchicalPolicy,
    records: &[EpisodeRecord],
    entropy_reg: f64,
) -> Result<(f64, GroupGrads, GroupGrads)> {
    let mut sg = GroupGrads {
        policy: vec![0.0; policy.structure.net.n_params()],
        value: vec![0.0; policy.structure.value.n_params()],
    };
    let mut pg = GroupGrads {
        policy: vec![0.0; policy.prompt.net.n_params()],
        value: vec![0.0; policy.prompt.value.n_params()],
    };
    let n = records.len().max(1) as f64;
    let mut loss = 0.0;
    for r in records {
        let x = r.state.input_vector();
        let eval = policy.structure.evaluate(&policy.table, &x, &r.structure)?;
        policy.structure.backprop(&eval, -1.0 / n, -entropy_reg / n, &mut sg.policy)?;
        loss += (-eval.log_prob - entropy_reg * eval.entropy) / n;
        let rollout = policy.prompt.replay(&policy.atoms, &x, &r.structure, &r.prompts)?;
        for step in &rollout.steps {
            let e = policy.prompt.backprop_step(step, -1.0 / n, -entropy_reg / n, &mut pg.policy)?;
            loss += (-e.log_prob - entropy_reg * e.entropy) / n;
        }
    }
    Ok((loss, sg, pg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftReport {
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Maximum-likelihood refinement on elite episodes. Minibatch order is
/// shuffled per epoch from `seed`.
pub fn sft_update(
    policy: &mut HierarchicalPolicy,
    elite: &EliteSet,
    cfg: &SftConfig,
    seed: u64,
) -> Result<SftReport> {
    cfg.validate()?;
    if elite.is_empty() {
        return Err(Error::EmptyElite);
    }
    let mut opt = PolicyOptimizer::new(policy);
    let mut rng = rng_from_seed(seed);
    let mut order: Vec<usize> = (0..elite.len()).collect();
    let mut report = SftReport {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        steps: 0,
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<EpisodeRecord> = chunk.iter().map(|&i| elite.records[i].clone()).collect();
            let (loss, sg, pg) = sft_loss(policy, &batch, cfg.entropy_reg)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("SFT epoch {epoch}: loss {loss}")));
            }
            opt.apply(policy, sg, pg, cfg.lr_struct, cfg.lr_prompt, 0.0)?;
            total += loss;
            batches += 1;
            report.steps += 1;
        }
        report.epoch_losses.push(total / batches as f64);
    }
    Ok(report)
}

/// `sum_s w(s) sum_a p_hat(a|s) ln(p_hat(a|s) / pi(a|s))` with state weights
/// proportional to elite frequency and pi floored at 1e-12.
pub fn kl_to_empirical(policy: &HierarchicalPolicy, elite: &EliteSet) -> Result<f64> {
    if elite.is_empty() {
        return Err(Error::EmptyElite);
    }
    let total = elite.len() as f64;
    let mut kl = 0.0;
    for s in elite.states.values() {
        let w = s.count as f64 / total;
        for (key, a) in &s.actions {
            let p_hat = s.empirical(key);
            let pi = policy.log_prob(&s.state, &a.config)?.exp().max(1e-12);
            kl += w * p_hat * (p_hat / pi).ln();
        }
    }
    Ok(kl)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportViolation {
    pub state: StateKey,
    pub config: Configuration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportReport {
    pub pass: bool,
    pub samples: usize,
    /// Distinct out-of-support configurations, per state.
    pub violations: Vec<SupportViolation>,
}

/// Samples `n_samples` configurations per elite state and checks each lies
/// in that state's elite action set.
pub fn verify_support_restriction(
    policy: &HierarchicalPolicy,
    elite: &EliteSet,
    n_samples: usize,
    seed: u64,
) -> Result<SupportReport> {
    let mut rng = rng_from_seed(seed);
    let mut violations = Vec::new();
    let mut samples = 0;
    for s in elite.states.values() {
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..n_samples {
            let c = policy.sample(&s.state, &mut rng)?.config;
            samples += 1;
            let key = action_key(&c);
            if !s.actions.contains_key(&key) && seen.insert(key) {
                violations.push(SupportViolation {
                    state: s.key.clone(),
                    config: c,
                });
            }
        }
    }
    Ok(SupportReport {
        pass: violations.is_empty(),
        samples,
        violations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardFloorReport {
    pub estimate: f64,
    pub tau_eff: f64,
    pub pass: bool,
    pub violations: usize,
}

/// Replays the recorded elite reward of sampled actions, weighting states by
/// elite frequency. Samples outside the lookup are violations and fail.
pub fn verify_reward_floor(
    policy: &HierarchicalPolicy,
    elite: &EliteSet,
    n_samples: usize,
    seed: u64,
) -> Result<RewardFloorReport> {
    let mut rng = rng_from_seed(seed);
    let total = elite.len() as f64;
    let mut estimate = 0.0;
    let mut violations = 0;
    for s in elite.states.values() {
        let w = s.count as f64 / total;
        let mut sum = 0.0;
        for _ in 0..n_samples {
            let c = policy.sample(&s.state, &mut rng)?.config;
            match s.actions.get(&action_key(&c)) {
                Some(a) => sum += a.mean_reward,
                None => violations += 1,
            }
        }
        estimate += w * sum / n_samples.max(1) as f64;
    }
    Ok(RewardFloorReport {
        estimate,
        tau_eff: elite.tau_eff,
        pass: violations == 0 && estimate >= elite.tau_eff - 1e-9,
        violations,
    })
}
