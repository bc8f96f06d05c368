use rand::Rng;

use crate::domain::{AtomLibrary, PromptSequence, Role, StructureAction, MAX_PROMPT_LEN, N_AGENTS, N_WORKFLOWS};
use crate::error::{Error, Result};
use crate::numeric::{DenseNet, MaskedCategorical};

/// One non-forced atom-or-STOP decision.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptStep {
    pub agent: usize,
    pub input: Vec<f64>,
    pub mask: Vec<bool>,
    /// Atom id, or `n_atoms` for STOP.
    pub choice: usize,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptRollout {
    pub sequences: Vec<PromptSequence>,
    pub steps: Vec<PromptStep>,
}

impl PromptRollout {
    pub fn log_prob(&self) -> f64 {
        self.steps.iter().map(|s| s.log_prob).sum()
    }
}

/// Sequential atom selector. Input: `[state; workflow one-hot; agent-slot
/// one-hot; chosen-atom multi-hot]`; output: one logit per atom plus STOP.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptPolicy {
    pub net: DenseNet,
    pub value: DenseNet,
    state_dim: usize,
    n_atoms: usize,
}

impl PromptPolicy {
    pub fn input_size_for(state_dim: usize, n_atoms: usize) -> usize {
        state_dim + N_WORKFLOWS + N_AGENTS + n_atoms
    }

    pub fn new<R: Rng + ?Sized>(state_dim: usize, n_atoms: usize, hidden: &[usize], rng: &mut R) -> Self {
        let input = Self::input_size_for(state_dim, n_atoms);
        let sizes = |out: usize| {
            let mut s = vec![input];
            s.extend_from_slice(hidden);
            s.push(out);
            s
        };
        Self {
            net: DenseNet::new(&sizes(n_atoms + 1), 0.01, rng),
            value: DenseNet::new(&sizes(1), 0.01, rng),
            state_dim,
            n_atoms,
        }
    }

    pub fn from_nets(net: DenseNet, value: DenseNet, state_dim: usize, n_atoms: usize) -> Result<Self> {
        let input = Self::input_size_for(state_dim, n_atoms);
        for (what, n) in [("prompt net", &net), ("prompt value net", &value)] {
            if n.input_size() != input {
                return Err(Error::shape(what, input, n.input_size()));
            }
        }
        if net.output_size() != n_atoms + 1 {
            return Err(Error::shape("prompt net output", n_atoms + 1, net.output_size()));
        }
        Ok(Self {
            net,
            value,
            state_dim,
            n_atoms,
        })
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn stop(&self) -> usize {
        self.n_atoms
    }

    pub fn step_input(&self, state: &[f64], a: &StructureAction, agent: usize, chosen: &[usize]) -> Result<Vec<f64>> {
        if state.len() != self.state_dim {
            return Err(Error::shape("prompt state", self.state_dim, state.len()));
        }
        let mut x = Vec::with_capacity(Self::input_size_for(self.state_dim, self.n_atoms));
        x.extend_from_slice(state);
        x.extend((0..N_WORKFLOWS).map(|i| f64::from(u8::from(i == a.workflow.id()))));
        x.extend((0..N_AGENTS).map(|i| f64::from(u8::from(i == agent))));
        x.extend((0..self.n_atoms).map(|i| f64::from(u8::from(chosen.contains(&i)))));
        Ok(x)
    }

    /// Unchosen atoms of the agent's role plus STOP; only STOP once full.
    pub fn step_mask(&self, atoms: &AtomLibrary, agent: usize, chosen: &[usize]) -> Vec<bool> {
        let mut mask = vec![false; self.n_atoms + 1];
        mask[self.n_atoms] = true;
        if chosen.len() < MAX_PROMPT_LEN {
            for id in atoms.ids_for_role(Role::for_agent(agent)) {
                if id < self.n_atoms && !chosen.contains(&id) {
                    mask[id] = true;
                }
            }
        }
        mask
    }

    fn dist(&self, input: &[f64], mask: Vec<bool>) -> Result<MaskedCategorical> {
        MaskedCategorical::new(self.net.forward(input)?, mask)
    }

    fn check_library(&self, atoms: &AtomLibrary) -> Result<()> {
        if atoms.len() != self.n_atoms {
            return Err(Error::shape("atom library", self.n_atoms, atoms.len()));
        }
        Ok(())
    }

    /// Runs the decision process for every active agent. `pick` chooses an
    /// index from each step's distribution; returning `None` is an error.
    fn unroll(
        &self,
        atoms: &AtomLibrary,
        state: &[f64],
        a: &StructureAction,
        mut pick: impl FnMut(usize, usize, &MaskedCategorical) -> Result<usize>,
    ) -> Result<PromptRollout> {
        self.check_library(atoms)?;
        let mut sequences = Vec::new();
        let mut steps = Vec::new();
        for agent in 0..a.workflow.agents_active() {
            let mut chosen = Vec::new();
            loop {
                let mask = self.step_mask(atoms, agent, &chosen);
                if mask.iter().filter(|&&m| m).count() == 1 {
                    break;
                }
                let input = self.step_input(state, a, agent, &chosen)?;
                let d = self.dist(&input, mask.clone())?;
                let choice = pick(agent, chosen.len(), &d)?;
                let log_prob = d.log_prob(choice)?;
                steps.push(PromptStep {
                    agent,
                    input,
                    mask,
                    choice,
                    log_prob,
                });
                if choice == self.n_atoms {
                    break;
                }
                chosen.push(choice);
            }
            sequences.push(PromptSequence::new(chosen)?);
        }
        Ok(PromptRollout { sequences, steps })
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        atoms: &AtomLibrary,
        state: &[f64],
        a: &StructureAction,
        rng: &mut R,
    ) -> Result<PromptRollout> {
        self.unroll(atoms, state, a, |_, _, d| Ok(d.sample(rng).0))
    }

    pub fn mode(&self, atoms: &AtomLibrary, state: &[f64], a: &StructureAction) -> Result<PromptRollout> {
        self.unroll(atoms, state, a, |_, _, d| Ok(d.mode()))
    }

    /// Replays given sequences, producing the same steps sampling would have.
    pub fn replay(
        &self,
        atoms: &AtomLibrary,
        state: &[f64],
        a: &StructureAction,
        prompts: &[PromptSequence],
    ) -> Result<PromptRollout> {
        let active = a.workflow.agents_active();
        if prompts.len() != active {
            return Err(Error::InvalidAction(format!(
                "{} expects {active} prompt sequences, got {}",
                a.workflow,
                prompts.len()
            )));
        }
        let stop = self.n_atoms;
        let out = self.unroll(atoms, state, a, |agent, pos, d| {
            let choice = prompts[agent].ids().get(pos).copied().unwrap_or(stop);
            if d.is_allowed(choice) {
                Ok(choice)
            } else {
                Err(Error::InvalidAction(format!("atom {choice} not allowed for agent {agent} at position {pos}")))
            }
        })?;
        for (agent, (got, want)) in out.sequences.iter().zip(prompts).enumerate() {
            if got != want {
                return Err(Error::InvalidAction(format!("agent {agent}: sequence {want:?} not reachable")));
            }
        }
        Ok(out)
    }

    /// Accumulates `d_logp * grad(log pi(choice)) + d_entropy * grad(H)` for
    /// one step into `grads`.
    pub fn backprop_step(&self, step: &PromptStep, d_logp: f64, d_entropy: f64, grads: &mut [f64]) -> Result<StepEval> {
        let cache = self.net.forward_cached(&step.input)?;
        let d = MaskedCategorical::new(cache.output().to_vec(), step.mask.clone())?;
        let log_prob = d.log_prob(step.choice)?;
        let entropy = d.entropy();
        if d_logp != 0.0 || d_entropy != 0.0 {
            let gl = d.log_prob_grad(step.choice);
            let ge = d.entropy_grad();
            let upstream: Vec<f64> = gl.iter().zip(&ge).map(|(l, e)| d_logp * l + d_entropy * e).collect();
            self.net.backward_into(&cache, &upstream, grads)?;
        }
        Ok(StepEval { log_prob, entropy })
    }

    /// Current log-probability and entropy of a recorded step.
    pub fn evaluate_step(&self, step: &PromptStep) -> Result<StepEval> {
        let d = self.dist(&step.input, step.mask.clone())?;
        Ok(StepEval {
            log_prob: d.log_prob(step.choice)?,
            entropy: d.entropy(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepEval {
    pub log_prob: f64,
    pub entropy: f64,
}

pub fn sample_prompts<R: Rng + ?Sized>(
    policy: &PromptPolicy,
    atoms: &AtomLibrary,
    state: &[f64],
    a: &StructureAction,
    rng: &mut R,
) -> Result<PromptRollout> {
    policy.sample(atoms, state, a, rng)
}
