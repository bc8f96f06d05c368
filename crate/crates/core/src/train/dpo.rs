//! Preference refinement against a frozen reference snapshot.

use rand::seq::SliceRandom;

use super::config::DpoConfig;
use super::ppo::{GroupGrads, PolicyOptimizer};
use crate::domain::{EpisodeRecord, ExperienceBuffer};
use crate::env::sigmoid;
use crate::error::{Error, Result};
use crate::policy::HierarchicalPolicy;
use crate::seeds::rng_from_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub chosen: EpisodeRecord,
    pub rejected: EpisodeRecord,
}

/// Pairs every positive with its nearest negative by state key (first one
/// on ties). Positives are correct with reward at or above the positive
/// threshold; negatives have reward at or below the negative threshold.
pub fn form_pairs(buffer: &ExperienceBuffer, cfg: &DpoConfig) -> Result<Vec<PreferencePair>> {
    let positives: Vec<&EpisodeRecord> = buffer
        .iter()
        .filter(|r| r.outcome.correct && r.reward >= cfg.positive_threshold)
        .collect();
    let negatives: Vec<(&EpisodeRecord, _)> = buffer
        .iter()
        .filter(|r| r.reward <= cfg.negative_threshold)
        .map(|r| (r, r.state.key()))
        .collect();
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::NoPairs(format!(
            "{} positives, {} negatives",
            positives.len(),
            negatives.len()
        )));
    }
    Ok(positives
        .into_iter()
        .map(|p| {
            let key = p.state.key();
            let (neg, _) = negatives
                .iter()
                .min_by(|a, b| key.distance_sq(&a.1).total_cmp(&key.distance_sq(&b.1)))
                .expect("non-empty negatives");
            PreferencePair {
                chosen: p.clone(),
                rejected: (*neg).clone(),
            }
        })
        .collect())
}

/// Joint log-probability of a record's configuration, with gradients
/// (scaled by `coef`) accumulated into the two groups.
fn joint_log_prob_grad(
    policy: &HierarchicalPolicy,
    r: &EpisodeRecord,
    coef: f64,
    entropy_coef: f64,
    sg: &mut GroupGrads,
    pg: &mut GroupGrads,
) -> Result<(f64, f64)> {
    let x = r.state.input_vector();
    let eval = policy.structure.evaluate(&policy.table, &x, &r.structure)?;
    policy.structure.backprop(&eval, coef, entropy_coef, &mut sg.policy)?;
    let mut lp = eval.log_prob;
    let rollout = policy.prompt.replay(&policy.atoms, &x, &r.structure, &r.prompts)?;
    for step in &rollout.steps {
        lp += policy.prompt.backprop_step(step, coef, 0.0, &mut pg.policy)?.log_prob;
    }
    Ok((lp, eval.entropy))
}

/// Mean of `-ln sigmoid(beta * margin)` over pairs, where the margin is the
/// chosen log-ratio shift minus the rejected one.
pub fn dpo_loss(
    policy: &HierarchicalPolicy,
    reference: &HierarchicalPolicy,
    pairs: &[PreferencePair],
    beta: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for pair in pairs {
        let m = (policy.log_prob(&pair.chosen.state, &pair.chosen.configuration())?
            - reference.log_prob(&pair.chosen.state, &pair.chosen.configuration())?)
            - (policy.log_prob(&pair.rejected.state, &pair.rejected.configuration())?
                - reference.log_prob(&pair.rejected.state, &pair.rejected.configuration())?);
        total += -sigmoid(beta * m).ln();
    }
    Ok(total / pairs.len().max(1) as f64)
}

fn dpo_grads(
    policy: &HierarchicalPolicy,
    ref_logps: &[(f64, f64)],
    pairs: &[PreferencePair],
    idx: &[usize],
    cfg: &DpoConfig,
) -> Result<(f64, GroupGrads, GroupGrads)> {
    let zeros = |n: usize| vec![0.0; n];
    let mut sg = GroupGrads {
        policy: zeros(policy.structure.net.n_params()),
        value: zeros(policy.structure.value.n_params()),
    };
    let mut pg = GroupGrads {
        policy: zeros(policy.prompt.net.n_params()),
        value: zeros(policy.prompt.value.n_params()),
    };
    let n = idx.len() as f64;
    let mut loss = 0.0;
    for &i in idx {
        let pair = &pairs[i];
        // Forward once to get the margin, then backprop with the right scale.
        let lp_c = policy.log_prob(&pair.chosen.state, &pair.chosen.configuration())?;
        let lp_r = policy.log_prob(&pair.rejected.state, &pair.rejected.configuration())?;
        let (ref_c, ref_r) = ref_logps[i];
        let z = cfg.beta * ((lp_c - ref_c) - (lp_r - ref_r));
        loss += -sigmoid(z).ln() / n;
        // d(-ln sigmoid(z))/dz = -(1 - sigmoid(z)).
        let g = -(1.0 - sigmoid(z)) * cfg.beta / n;
        joint_log_prob_grad(policy, &pair.chosen, g, -cfg.entropy_coef / n, &mut sg, &mut pg)?;
        joint_log_prob_grad(policy, &pair.rejected, -g, 0.0, &mut sg, &mut pg)?;
    }
    Ok((loss, sg, pg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoReport {
    pub pairs: usize,
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

pub fn dpo_update(
    policy: &mut HierarchicalPolicy,
    buffer: &ExperienceBuffer,
    cfg: &DpoConfig,
    seed: u64,
) -> Result<DpoReport> {
    cfg.validate()?;
    let pairs = form_pairs(buffer, cfg)?;
    let reference = policy.clone();
    let ref_logps = pairs
        .iter()
        .map(|p| {
            Ok((
                reference.log_prob(&p.chosen.state, &p.chosen.configuration())?,
                reference.log_prob(&p.rejected.state, &p.rejected.configuration())?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let initial_loss = dpo_loss(policy, &reference, &pairs, cfg.beta)?;
    let mut opt = PolicyOptimizer::new(policy);
    let mut rng = rng_from_seed(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (loss, sg, pg) = dpo_grads(policy, &ref_logps, &pairs, chunk, cfg)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("DPO epoch {epoch}: loss {loss}")));
            }
            opt.apply(policy, sg, pg, cfg.lr_struct, cfg.lr_prompt, cfg.max_grad_norm)?;
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(DpoReport {
        pairs: pairs.len(),
        initial_loss,
        epoch_losses,
    })
}
