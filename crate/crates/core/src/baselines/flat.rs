//! Unstructured policy baselines: a one-shot bandit over independent heads
//! and a single network that picks every dimension in sequence.
//!
//! Both are lists of decisions. A decision is one forward pass whose output
//! is read by one or more masked heads; its log-probability is the sum over
//! those heads.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::domain::{
    AtomLibrary, BudgetTier, Configuration, PromptSequence, Role, StructureAction, ToolSet,
    Workflow, MAX_PROMPT_LEN, N_AGENTS, N_WORKFLOWS,
};
use crate::env::EnvContract;
use crate::error::{Error, Result};
use crate::features::StateEmbedding;
use crate::numeric::{clip_grad_norm_groups, normalize, AdamState, DenseNet, MaskedCategorical};
use crate::policy::{head_mask, value_backprop, value_estimate, ConfigPolicy, MaskTable, HEAD_SIZES, N_HEADS, STRUCTURE_OUTPUTS};
use crate::reward::RewardConfig;
use crate::seeds::{derive_seed, rng_from_seed, stream};
use crate::train::{clipped_surrogate, prompt_returns, surrogate_grad, Harness, LossParts, PpoConfig};

/// One masked head reading `mask.len()` logits starting at `offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadChoice {
    pub offset: usize,
    pub mask: Vec<bool>,
    pub choice: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatDecision {
    pub input: Vec<f64>,
    pub heads: Vec<HeadChoice>,
    pub log_prob: f64,
}

/// Policy and value networks of a flat baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatNets {
    pub net: DenseNet,
    pub value: DenseNet,
}

impl FlatNets {
    fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], output: usize, rng: &mut R) -> Self {
        let sizes = |out: usize| {
            let mut s = vec![input];
            s.extend_from_slice(hidden);
            s.push(out);
            s
        };
        Self {
            net: DenseNet::new(&sizes(output), 0.01, rng),
            value: DenseNet::new(&sizes(1), 0.01, rng),
        }
    }

    fn dist(out: &[f64], offset: usize, mask: &[bool]) -> Result<MaskedCategorical> {
        MaskedCategorical::new(out[offset..offset + mask.len()].to_vec(), mask.to_vec())
    }

    /// Samples (or, without an RNG, takes the mode of) each head in turn.
    fn decide<R: RngCore + ?Sized>(&self, input: Vec<f64>, heads: &[(usize, Vec<bool>)], mut rng: Option<&mut R>) -> Result<FlatDecision> {
        let out = self.net.forward(&input)?;
        let mut chosen = Vec::with_capacity(heads.len());
        let mut log_prob = 0.0;
        for (offset, mask) in heads {
            let d = Self::dist(&out, *offset, mask)?;
            let (choice, lp) = match rng.as_deref_mut() {
                Some(r) => d.sample(r),
                None => {
                    let c = d.mode();
                    (c, d.log_prob(c)?)
                }
            };
            log_prob += lp;
            chosen.push(HeadChoice {
                offset: *offset,
                mask: mask.clone(),
                choice,
            });
        }
        Ok(FlatDecision {
            input,
            heads: chosen,
            log_prob,
        })
    }

    /// Current log-probability and entropy of a recorded decision; with
    /// `grads`, accumulates `d_logp * dlogp + d_entropy * dH`.
    fn score(&self, d: &FlatDecision, d_logp: f64, d_entropy: f64, grads: Option<&mut [f64]>) -> Result<(f64, f64)> {
        let cache = self.net.forward_cached(&d.input)?;
        let out = cache.output().to_vec();
        let mut upstream = vec![0.0; out.len()];
        let (mut lp, mut ent) = (0.0, 0.0);
        for h in &d.heads {
            let dist = Self::dist(&out, h.offset, &h.mask)?;
            lp += dist.log_prob(h.choice)?;
            ent += dist.entropy();
            if grads.is_some() {
                for (i, (a, b)) in dist.log_prob_grad(h.choice).iter().zip(dist.entropy_grad()).enumerate() {
                    upstream[h.offset + i] += d_logp * a + d_entropy * b;
                }
            }
        }
        if let Some(g) = grads {
            self.net.backward_into(&cache, &upstream, g)?;
        }
        Ok((lp, ent))
    }
}

/// Shared surface of the flat baselines.
pub trait FlatPolicy: ConfigPolicy {
    fn nets(&self) -> &FlatNets;
    fn nets_mut(&mut self) -> &mut FlatNets;
    /// Samples with `rng`, or decodes greedily without one.
    fn rollout(&self, state: &StateEmbedding, rng: Option<&mut dyn RngCore>) -> Result<(Configuration, Vec<FlatDecision>)>;
}

fn head_offsets() -> [usize; N_HEADS] {
    let mut off = [0; N_HEADS];
    for h in 1..N_HEADS {
        off[h] = off[h - 1] + HEAD_SIZES[h - 1];
    }
    off
}

/// Union over enabled workflows of each head's allowed entries: the only
/// validity a flat policy knows without workflow-conditioned masks.
pub fn global_masks(table: &MaskTable) -> [Vec<bool>; N_HEADS] {
    std::array::from_fn(|h| {
        let mut m = vec![false; HEAD_SIZES[h]];
        if h == 0 {
            m.copy_from_slice(&table.workflows);
        } else {
            for w in table.enabled_workflows() {
                for (a, b) in m.iter_mut().zip(head_mask(table, h, w)) {
                    *a |= b;
                }
            }
        }
        m
    })
}

fn structure_from_choices(c: &[usize; N_HEADS]) -> Result<StructureAction> {
    Ok(StructureAction {
        workflow: Workflow::from_id(c[0])?,
        tools: [ToolSet::from_index(c[1])?, ToolSet::from_index(c[2])?],
        budgets: [
            BudgetTier::from_index(c[3])?,
            BudgetTier::from_index(c[4])?,
            BudgetTier::from_index(c[5])?,
        ],
    })
}

fn one_hot(n: usize, i: Option<usize>) -> impl Iterator<Item = f64> {
    (0..n).map(move |k| f64::from(u8::from(Some(k) == i)))
}

/// Independent heads over a single forward pass: six structure heads plus a
/// keep/drop head per atom. Kept atoms go to the agent whose role matches,
/// in id order, up to the length cap; atoms of inactive agents are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditPolicy {
    pub nets: FlatNets,
    pub table: MaskTable,
    pub atoms: AtomLibrary,
    masks: [Vec<bool>; N_HEADS],
}

impl BanditPolicy {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, hidden: &[usize], table: MaskTable, atoms: AtomLibrary, rng: &mut R) -> Result<Self> {
        table.validate()?;
        let nets = FlatNets::new(state_dim, hidden, STRUCTURE_OUTPUTS + 2 * atoms.len(), rng);
        Ok(Self {
            masks: global_masks(&table),
            nets,
            table,
            atoms,
        })
    }

    fn heads(&self) -> Vec<(usize, Vec<bool>)> {
        let off = head_offsets();
        let mut heads: Vec<(usize, Vec<bool>)> = (0..N_HEADS).map(|h| (off[h], self.masks[h].clone())).collect();
        heads.extend((0..self.atoms.len()).map(|j| (STRUCTURE_OUTPUTS + 2 * j, vec![true, true])));
        heads
    }

    /// Probability that a sampled structure is one the hierarchical mask
    /// table forbids (for example tools on an agent the workflow never runs).
    pub fn wasteful_mass(&self, state: &StateEmbedding) -> Result<f64> {
        let out = self.nets.net.forward(&state.input_vector())?;
        let off = head_offsets();
        let dists = (0..N_HEADS)
            .map(|h| FlatNets::dist(&out, off[h], &self.masks[h]))
            .collect::<Result<Vec<_>>>()?;
        let mut allowed = 0.0;
        for w in self.table.enabled_workflows() {
            let mut p = dists[0].probs()[w.id()];
            for (h, d) in dists.iter().enumerate().skip(1) {
                p *= d.probs().iter().zip(head_mask(&self.table, h, w)).filter(|(_, m)| *m).map(|(q, _)| q).sum::<f64>();
            }
            allowed += p;
        }
        Ok((1.0 - allowed).max(0.0))
    }
}

impl FlatPolicy for BanditPolicy {
    fn nets(&self) -> &FlatNets {
        &self.nets
    }

    fn nets_mut(&mut self) -> &mut FlatNets {
        &mut self.nets
    }

    fn rollout(&self, state: &StateEmbedding, rng: Option<&mut dyn RngCore>) -> Result<(Configuration, Vec<FlatDecision>)> {
        let d = self.nets.decide(state.input_vector(), &self.heads(), rng)?;
        let mut c = [0; N_HEADS];
        for (h, slot) in c.iter_mut().enumerate() {
            *slot = d.heads[h].choice;
        }
        let structure = structure_from_choices(&c)?;
        let active = structure.workflow.agents_active();
        let mut prompts = vec![Vec::new(); active];
        for (j, head) in d.heads[N_HEADS..].iter().enumerate() {
            if head.choice == 1 {
                let role = self.atoms.atoms()[j].role;
                if let Some(k) = (0..active).find(|&k| Role::for_agent(k) == role) {
                    if prompts[k].len() < MAX_PROMPT_LEN {
                        prompts[k].push(j);
                    }
                }
            }
        }
        let prompts = prompts.into_iter().map(PromptSequence::new).collect::<Result<Vec<_>>>()?;
        Ok((Configuration::new(structure, prompts), vec![d]))
    }
}

impl ConfigPolicy for BanditPolicy {
    fn act(&self, state: &StateEmbedding, rng: &mut dyn RngCore) -> Result<Configuration> {
        Ok(self.rollout(state, Some(rng))?.0)
    }

    fn greedy(&self, state: &StateEmbedding) -> Result<Configuration> {
        Ok(self.rollout(state, None)?.0)
    }
}

const N_KINDS: usize = N_HEADS + 1;

/// One shared network choosing workflow, tool subsets, tiers, then atoms
/// agent by agent. Its input is the state, a one-hot of the dimension being
/// chosen, the workflow so far, the agent slot, and the atoms chosen for it.
/// Without injected masks the sub-heads see only global validity.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatEpisodePolicy {
    pub nets: FlatNets,
    pub table: MaskTable,
    pub atoms: AtomLibrary,
    pub inject_masks: bool,
    state_dim: usize,
    masks: [Vec<bool>; N_HEADS],
}

impl FlatEpisodePolicy {
    pub fn input_size_for(state_dim: usize, n_atoms: usize) -> usize {
        state_dim + N_KINDS + N_WORKFLOWS + N_AGENTS + n_atoms
    }

    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        hidden: &[usize],
        table: MaskTable,
        atoms: AtomLibrary,
        inject_masks: bool,
        rng: &mut R,
    ) -> Result<Self> {
        table.validate()?;
        let nets = FlatNets::new(
            Self::input_size_for(state_dim, atoms.len()),
            hidden,
            STRUCTURE_OUTPUTS + atoms.len() + 1,
            rng,
        );
        Ok(Self {
            masks: global_masks(&table),
            nets,
            table,
            atoms,
            inject_masks,
            state_dim,
        })
    }

    fn input(&self, state: &[f64], kind: usize, w: Option<Workflow>, agent: Option<usize>, chosen: &[usize]) -> Vec<f64> {
        let mut x = Vec::with_capacity(Self::input_size_for(self.state_dim, self.atoms.len()));
        x.extend_from_slice(state);
        x.extend(one_hot(N_KINDS, Some(kind)));
        x.extend(one_hot(N_WORKFLOWS, w.map(Workflow::id)));
        x.extend(one_hot(N_AGENTS, agent));
        x.extend((0..self.atoms.len()).map(|i| f64::from(u8::from(chosen.contains(&i)))));
        x
    }

    fn structure_mask(&self, h: usize, w: Option<Workflow>) -> Vec<bool> {
        match (self.inject_masks, w) {
            (true, Some(w)) if h > 0 => head_mask(&self.table, h, w),
            _ => self.masks[h].clone(),
        }
    }

    fn atom_mask(&self, agent: usize, chosen: &[usize]) -> Vec<bool> {
        let n = self.atoms.len();
        let mut mask = vec![false; n + 1];
        mask[n] = true;
        if chosen.len() < MAX_PROMPT_LEN {
            for id in self.atoms.ids_for_role(Role::for_agent(agent)) {
                mask[id] = !chosen.contains(&id);
            }
        }
        mask
    }

    /// Appends one single-head decision; `forced` replays a given choice.
    #[allow(clippy::too_many_arguments)]
    fn pick<R: RngCore + ?Sized>(
        &self,
        decisions: &mut Vec<FlatDecision>,
        input: Vec<f64>,
        offset: usize,
        mask: Vec<bool>,
        forced: Option<usize>,
        rng: Option<&mut R>,
    ) -> Result<usize> {
        let d = match forced {
            Some(c) => {
                if !mask.get(c).copied().unwrap_or(false) {
                    return Err(Error::InvalidAction(format!("flat decision at offset {offset} cannot choose {c}")));
                }
                let mut d = FlatDecision {
                    input,
                    heads: vec![HeadChoice { offset, mask, choice: c }],
                    log_prob: 0.0,
                };
                d.log_prob = self.nets.score(&d, 0.0, 0.0, None)?.0;
                d
            }
            None => self.nets.decide(input, &[(offset, mask)], rng)?,
        };
        let c = d.heads[0].choice;
        decisions.push(d);
        Ok(c)
    }

    /// Walks the decision sequence. `target` replays a given configuration
    /// (error if any of its choices is masked); otherwise samples or, without
    /// an RNG, takes modes.
    fn walk<R: RngCore + ?Sized>(
        &self,
        state: &StateEmbedding,
        target: Option<&Configuration>,
        mut rng: Option<&mut R>,
    ) -> Result<(Configuration, Vec<FlatDecision>)> {
        let x = state.input_vector();
        let off = head_offsets();
        let target_heads = target.map(|t| crate::policy::head_choices(&t.structure));
        let mut decisions = Vec::new();
        let mut choices = [0; N_HEADS];
        let mut w = None;
        for h in 0..N_HEADS {
            let input = self.input(&x, h, w, None, &[]);
            let c = self.pick(&mut decisions, input, off[h], self.structure_mask(h, w), target_heads.map(|t| t[h]), rng.as_deref_mut())?;
            choices[h] = c;
            if h == 0 {
                w = Some(Workflow::from_id(c)?);
            }
        }
        let structure = structure_from_choices(&choices)?;
        let stop = self.atoms.len();
        let mut prompts = Vec::new();
        for agent in 0..structure.workflow.agents_active() {
            let wanted = target.map(|t| t.prompts.get(agent).map(|p| p.ids().to_vec()).unwrap_or_default());
            let mut chosen = Vec::new();
            loop {
                let input = self.input(&x, N_HEADS, w, Some(agent), &chosen);
                let forced = wanted.as_ref().map(|ids| ids.get(chosen.len()).copied().unwrap_or(stop));
                let c = self.pick(&mut decisions, input, STRUCTURE_OUTPUTS, self.atom_mask(agent, &chosen), forced, rng.as_deref_mut())?;
                if c == stop {
                    break;
                }
                chosen.push(c);
            }
            prompts.push(PromptSequence::new(chosen)?);
        }
        Ok((Configuration::new(structure, prompts), decisions))
    }

    /// Joint log-probability of a full configuration.
    pub fn log_prob(&self, state: &StateEmbedding, config: &Configuration) -> Result<f64> {
        Ok(self.walk::<dyn RngCore>(state, Some(config), None)?.1.iter().map(|d| d.log_prob).sum())
    }
}

impl FlatPolicy for FlatEpisodePolicy {
    fn nets(&self) -> &FlatNets {
        &self.nets
    }

    fn nets_mut(&mut self) -> &mut FlatNets {
        &mut self.nets
    }

    fn rollout(&self, state: &StateEmbedding, rng: Option<&mut dyn RngCore>) -> Result<(Configuration, Vec<FlatDecision>)> {
        self.walk(state, None, rng)
    }
}

impl ConfigPolicy for FlatEpisodePolicy {
    fn act(&self, state: &StateEmbedding, rng: &mut dyn RngCore) -> Result<Configuration> {
        Ok(self.rollout(state, Some(rng))?.0)
    }

    fn greedy(&self, state: &StateEmbedding) -> Result<Configuration> {
        Ok(self.rollout(state, None)?.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatDiagnostics {
    pub batch: usize,
    pub mean_reward: f64,
    pub loss: LossParts,
}

struct FlatSample {
    decisions: Vec<FlatDecision>,
    returns: Vec<f64>,
}

fn flat_update<P: FlatPolicy>(
    policy: &mut P,
    opt: &mut (AdamState, AdamState),
    batch: &[FlatSample],
    cfg: &PpoConfig,
) -> Result<LossParts> {
    let mut values = Vec::new();
    for s in batch {
        for d in &s.decisions {
            values.push(value_estimate(&policy.nets().value, &d.input)?);
        }
    }
    let raw: Vec<f64> = batch.iter().flat_map(|s| s.returns.iter().copied()).zip(&values).map(|(g, v)| g - v).collect();
    let adv = normalize(&raw);
    let n = adv.len() as f64;
    let mut parts = LossParts::default();
    for _ in 0..cfg.epochs_per_batch {
        let nets = policy.nets();
        let mut pg = vec![0.0; nets.net.n_params()];
        let mut vg = vec![0.0; nets.value.n_params()];
        parts = LossParts::default();
        let mut k = 0;
        for s in batch {
            for (d, &ret) in s.decisions.iter().zip(&s.returns) {
                let (lp, _) = nets.score(d, 0.0, 0.0, None)?;
                let ratio = (lp - d.log_prob).exp();
                let (g, clipped) = surrogate_grad(ratio, adv[k], cfg.clip_eps);
                let (_, ent) = nets.score(d, -g / n, -cfg.entropy_coef / n, Some(&mut pg))?;
                let err = value_backprop(&nets.value, &d.input, ret, cfg.value_coef / n, &mut vg)?;
                parts.surrogate += clipped_surrogate(ratio, adv[k], cfg.clip_eps) / n;
                parts.entropy += ent / n;
                parts.value += err / n;
                parts.clip_fraction += f64::from(u8::from(clipped)) / n;
                parts.approx_kl += (d.log_prob - lp) / n;
                k += 1;
            }
        }
        parts.total = -parts.surrogate + cfg.value_coef * parts.value - cfg.entropy_coef * parts.entropy;
        if !parts.total.is_finite() {
            return Err(Error::Divergence(format!("flat baseline loss {}", parts.total)));
        }
        if cfg.max_grad_norm > 0.0 {
            clip_grad_norm_groups(&mut [pg.as_mut_slice(), vg.as_mut_slice()], cfg.max_grad_norm);
        }
        let nets = policy.nets_mut();
        opt.0.step(nets.net.params_mut(), &pg, cfg.lr_struct)?;
        opt.1.step(nets.value.params_mut(), &vg, cfg.lr_struct)?;
    }
    Ok(parts)
}

/// PPO on a flat baseline with the run's shared episode harness. Decision
/// `j` of an episode with `n` decisions is credited `gamma^(n-1-j) * r`.
pub fn train_flat<P: FlatPolicy, E: EnvContract>(
    policy: &mut P,
    env: &E,
    cfg: &PpoConfig,
    reward: &RewardConfig,
    run_seed: u64,
) -> Result<Vec<FlatDiagnostics>> {
    cfg.validate()?;
    let harness = Harness::new(env, reward, run_seed);
    let nets = policy.nets();
    let mut opt = (AdamState::new(nets.net.n_params()), AdamState::new(nets.value.n_params()));
    let mut diagnostics = Vec::new();
    let mut start = 0;
    while start < cfg.total_episodes {
        let n = cfg.batch_size.min(cfg.total_episodes - start);
        let mut batch = Vec::with_capacity(n);
        let mut total = 0.0;
        for i in start..start + n {
            let (record, decisions) = harness.episode(i as u64, |state, rng| policy.rollout(state, Some(rng as &mut dyn RngCore)))?;
            total += record.reward;
            batch.push(FlatSample {
                returns: prompt_returns(record.reward, decisions.len(), cfg.gamma),
                decisions,
            });
        }
        let loss = flat_update(policy, &mut opt, &batch, cfg)?;
        diagnostics.push(FlatDiagnostics {
            batch: diagnostics.len(),
            mean_reward: total / n as f64,
            loss,
        });
        start += n;
    }
    Ok(diagnostics)
}

/// Builds and trains the bandit baseline. Each episode is one decision, so
/// its advantage is the immediate reward minus the state value.
pub fn bandit_policy_train<E: EnvContract>(
    env: &E,
    state_dim: usize,
    hidden: &[usize],
    table: MaskTable,
    cfg: &PpoConfig,
    reward: &RewardConfig,
    run_seed: u64,
) -> Result<(BanditPolicy, Vec<FlatDiagnostics>)> {
    let mut rng = rng_from_seed(derive_seed(run_seed, stream::INIT, 1));
    let mut policy = BanditPolicy::new(state_dim, hidden, table, env.atoms().clone(), &mut rng)?;
    let diagnostics = train_flat(&mut policy, env, cfg, reward, run_seed)?;
    Ok((policy, diagnostics))
}

/// Builds and trains the flat sequential baseline.
#[allow(clippy::too_many_arguments)]
pub fn flat_episode_policy_train<E: EnvContract>(
    env: &E,
    state_dim: usize,
    hidden: &[usize],
    table: MaskTable,
    inject_masks: bool,
    cfg: &PpoConfig,
    reward: &RewardConfig,
    run_seed: u64,
) -> Result<(FlatEpisodePolicy, Vec<FlatDiagnostics>)> {
    let mut rng = rng_from_seed(derive_seed(run_seed, stream::INIT, 2));
    let mut policy = FlatEpisodePolicy::new(state_dim, hidden, table, env.atoms().clone(), inject_masks, &mut rng)?;
    let diagnostics = train_flat(&mut policy, env, cfg, reward, run_seed)?;
    Ok((policy, diagnostics))
}
