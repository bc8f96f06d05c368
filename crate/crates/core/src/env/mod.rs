//! Environment contract (configure, execute, observe) and the synthetic
//! environment used for desk-scale verification.

mod embed;
mod synthetic;
mod templates;

pub use embed::{hash_embed, hash_embed_dim, EMBED_DIM};
pub use synthetic::{
    brute_force_best, execute_synthetic, expected_reward, fit_factors, generate_query, sigmoid,
    success_probability, tools_used, FitFactors, SpecDistribution, SuccessModel, SyntheticEnv,
    SyntheticQuerySpec, SyntheticTask, BASE_NEEDED_TOKENS, MAX_EXTRA_ROUNDS, TOKENS_PER_TOOL,
};
pub use templates::render_query;

use crate::domain::{
    AtomClass, AtomLibrary, BudgetTier, Configuration, ExecutionOutcome, PromptSequence, Query,
    Role, ToolRegistry, ToolSet, Workflow, MAX_PROMPT_LEN,
};
use crate::error::Result;
use crate::features::StateEmbedding;
use crate::policy::MaskTable;
use crate::reward::RewardConfig;

/// Upper bounds an environment guarantees for its outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvMaxima {
    pub steps: u32,
    pub tokens: u64,
    pub tools_used: u32,
    pub tools_allocated: u32,
}

impl EnvMaxima {
    pub fn reward_bounds(&self, cfg: &RewardConfig) -> (f64, f64) {
        cfg.bounds(self.steps, self.tokens, self.tools_used, self.tools_allocated)
    }
}

/// What the trainer needs from an environment. `execute` must be a pure
/// function of `(task, config, seed)`.
pub trait EnvContract {
    type Task: Clone;

    fn draw_task(&self, seed: u64) -> Result<Self::Task>;
    fn query<'a>(&self, task: &'a Self::Task) -> &'a Query;
    fn embed(&self, task: &Self::Task) -> StateEmbedding;
    fn execute(&self, task: &Self::Task, config: &Configuration, seed: u64) -> Result<ExecutionOutcome>;
    fn maxima(&self) -> EnvMaxima;
    fn atoms(&self) -> &AtomLibrary;
}

/// All prompt sequences an agent of `role` may receive. With `canonical`,
/// only ascending id orders are produced (atom order never changes the
/// synthetic outcome).
pub fn prompt_sequences(atoms: &AtomLibrary, role: Role, canonical: bool) -> Vec<PromptSequence> {
    let ids: Vec<usize> = atoms.ids_for_role(role).collect();
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn rec(ids: &[usize], canonical: bool, cur: &mut Vec<usize>, out: &mut Vec<PromptSequence>) {
        out.push(PromptSequence::new(cur.clone()).expect("distinct ids within length"));
        if cur.len() == MAX_PROMPT_LEN {
            return;
        }
        for &id in ids {
            if cur.contains(&id) || (canonical && cur.last().is_some_and(|&l| id < l)) {
                continue;
            }
            cur.push(id);
            rec(ids, canonical, cur, out);
            cur.pop();
        }
    }
    rec(&ids, canonical, &mut cur, &mut out);
    out
}

/// Every configuration valid under `table`, structure-major.
pub fn configuration_space(table: &MaskTable, atoms: &AtomLibrary, canonical: bool) -> Vec<Configuration> {
    let per_role: Vec<Vec<PromptSequence>> = (0..crate::domain::N_AGENTS)
        .map(|k| prompt_sequences(atoms, Role::for_agent(k), canonical))
        .collect();
    let mut out = Vec::new();
    for a in table.valid_actions() {
        let active = a.workflow.agents_active();
        let mut combos: Vec<Vec<PromptSequence>> = vec![Vec::new()];
        for seqs in &per_role[..active] {
            combos = combos
                .into_iter()
                .flat_map(|prefix| {
                    seqs.iter().map(move |s| {
                        let mut p = prefix.clone();
                        p.push(s.clone());
                        p
                    })
                })
                .collect();
        }
        out.extend(combos.into_iter().map(|p| Configuration::new(a, p)));
    }
    out
}

/// A synthetic environment together with the mask table it is searched under.
#[derive(Debug, Clone)]
pub struct Suite {
    pub env: SyntheticEnv,
    pub table: MaskTable,
}

impl Suite {
    pub fn configurations(&self) -> Vec<Configuration> {
        configuration_space(&self.table, &self.env.atoms, true)
    }
}

/// Full nine-workflow space with the default mask table and atom library.
pub fn full_suite() -> Suite {
    Suite {
        env: SyntheticEnv::default(),
        table: MaskTable::default(),
    }
}

/// Three workflows, four tool subsets, two budget tiers and four reasoner
/// atoms: small enough for exhaustive oracles.
pub fn reduced_suite() -> Suite {
    let calc = ToolSet::from_tools(&[ToolRegistry::CALCULATOR]).expect("valid tool");
    let search = ToolSet::from_tools(&[ToolRegistry::WEB_SEARCH]).expect("valid tool");
    let table = MaskTable::default()
        .restricted(
            &[Workflow::Direct, Workflow::ReasonVerifyAns, Workflow::AutonomousAgent],
            &[ToolSet::EMPTY, calc, search, calc.union(search)],
            &[BudgetTier::Low, BudgetTier::High],
        )
        .expect("reduced table keeps every head non-empty");
    let atoms = AtomLibrary::from_entries(&[
        (Role::Reasoner, AtomClass::General, "Answer the question directly and concisely."),
        (Role::Reasoner, AtomClass::Arithmetic, "Write out each arithmetic operation explicitly."),
        (Role::Reasoner, AtomClass::Factual, "Identify the entities and facts the question depends on."),
        (Role::Reasoner, AtomClass::UseTools, "Use the available tools whenever they can help."),
    ]);
    let env = SyntheticEnv {
        distribution: SpecDistribution {
            difficulty: [0.0, 0.6],
            tool_probs: [0.4, 0.4, 0.0, 0.0],
            depth_weights: [0.5, 0.3, 0.2],
            noise_scale: 0.1,
        },
        atoms,
        ..SyntheticEnv::default()
    };
    Suite { env, table }
}
