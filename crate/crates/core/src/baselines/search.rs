//! Fixed-configuration search: budgeted grid and single-pass coordinate ascent.

use serde::{Deserialize, Serialize};

use crate::domain::{
    AtomLibrary, BudgetTier, Configuration, PromptSequence, Role, StructureAction, ToolSet,
    Workflow, N_AGENTS,
};
use crate::env::{EnvContract, SyntheticEnv, SyntheticTask};
use crate::error::{Error, Result};
use crate::policy::MaskTable;
use crate::reward::{shaped_reward, RewardConfig};
use crate::seeds::{derive_seed, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchBudget {
    pub max_evaluations: usize,
    pub episodes_per_evaluation: usize,
}

impl Default for SearchBudget {
    fn default() -> Self {
        Self {
            max_evaluations: 50,
            episodes_per_evaluation: 20,
        }
    }
}

impl SearchBudget {
    pub fn validate(&self) -> Result<()> {
        if self.max_evaluations == 0 || self.episodes_per_evaluation == 0 {
            return Err(Error::config("search.budget", "both counts must be >= 1"));
        }
        Ok(())
    }
}

/// Scores one fixed configuration; higher is better.
pub trait Evaluator {
    fn evaluate(&mut self, c: &Configuration) -> Result<f64>;
}

impl<F: FnMut(&Configuration) -> Result<f64>> Evaluator for F {
    fn evaluate(&mut self, c: &Configuration) -> Result<f64> {
        self(c)
    }
}

/// Noise-free scoring: mean exact expected reward over a task set.
pub struct ExpectedEvaluator<'a> {
    pub env: &'a SyntheticEnv,
    pub tasks: &'a [SyntheticTask],
    pub reward: &'a RewardConfig,
}

impl Evaluator for ExpectedEvaluator<'_> {
    fn evaluate(&mut self, c: &Configuration) -> Result<f64> {
        let mut total = 0.0;
        for t in self.tasks {
            total += self.env.expected_reward(t, c, self.reward)?;
        }
        Ok(total / self.tasks.len().max(1) as f64)
    }
}

/// Mean shaped reward over seeded episodes. Every configuration sees the
/// same tasks and execution seeds.
pub struct SampledEvaluator<'a, E: EnvContract> {
    pub env: &'a E,
    pub reward: &'a RewardConfig,
    pub run_seed: u64,
    pub episodes: usize,
}

impl<E: EnvContract> Evaluator for SampledEvaluator<'_, E> {
    fn evaluate(&mut self, c: &Configuration) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..self.episodes as u64 {
            let task = self.env.draw_task(derive_seed(self.run_seed, stream::QUERIES, i))?;
            let outcome = self.env.execute(&task, c, derive_seed(self.run_seed, stream::SEARCH, i))?;
            total += shaped_reward(&outcome, self.reward).0;
        }
        Ok(total / self.episodes.max(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchStep {
    pub evaluation: usize,
    pub dimension: String,
    pub config: Configuration,
    pub utility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: Configuration,
    pub utility: f64,
    pub trace: Vec<SearchStep>,
}

fn better(u: f64, c: &Configuration, best: &Option<(Configuration, f64)>) -> bool {
    match best {
        None => true,
        Some((bc, bu)) => u > *bu || (u == *bu && c.canonical_key() < bc.canonical_key()),
    }
}

/// Evaluates up to `max_evaluations` grid entries in canonical order and
/// returns the best; ties go to the smaller canonical key.
pub fn grid_search(grid: &[Configuration], budget: &SearchBudget, eval: &mut dyn Evaluator) -> Result<SearchResult> {
    budget.validate()?;
    if grid.is_empty() {
        return Err(Error::Contract("grid search over an empty grid".into()));
    }
    let mut ordered: Vec<&Configuration> = grid.iter().collect();
    ordered.sort_by_key(|c| c.canonical_key());
    let mut best = None;
    let mut trace = Vec::new();
    for (i, c) in ordered.into_iter().take(budget.max_evaluations).enumerate() {
        let u = eval.evaluate(c)?;
        trace.push(SearchStep {
            evaluation: i,
            dimension: "grid".into(),
            config: c.clone(),
            utility: u,
        });
        if better(u, c, &best) {
            best = Some((c.clone(), u));
        }
    }
    let (best, utility) = best.expect("non-empty grid");
    Ok(SearchResult { best, utility, trace })
}

fn first_allowed<const N: usize>(mask: &[bool; N]) -> usize {
    mask.iter().position(|&b| b).expect("validated mask row")
}

/// Largest allowed tool subset for a head (ties: lowest index).
fn largest_allowed(mask: &[bool; crate::domain::N_TOOL_SUBSETS]) -> ToolSet {
    (0..mask.len())
        .filter(|&i| mask[i])
        .map(|i| ToolSet::from_index(i).expect("in range"))
        .max_by_key(|t| (t.len(), std::cmp::Reverse(t.index())))
        .expect("validated mask row")
}

fn canonical_atom(atoms: &AtomLibrary, agent: usize) -> PromptSequence {
    match atoms.ids_for_role(Role::for_agent(agent)).next() {
        Some(id) => PromptSequence::new(vec![id]).expect("single atom"),
        None => PromptSequence::empty(),
    }
}

/// Stratified candidate slice: each enabled workflow, no tools or the
/// largest allowed subsets, uniform Low or High budgets, empty prompts or
/// one canonical atom per agent. Entries the table forbids are skipped.
pub fn default_grid(table: &MaskTable, atoms: &AtomLibrary) -> Vec<Configuration> {
    let mut out = Vec::new();
    for w in table.enabled_workflows() {
        let row = table.row(w);
        let active = w.agents_active();
        for full_tools in [false, true] {
            let tools = if full_tools {
                [largest_allowed(&row.tools[0]), largest_allowed(&row.tools[1])]
            } else {
                [ToolSet::EMPTY; 2]
            };
            for tier in [BudgetTier::Low, BudgetTier::High] {
                let mut budgets = [BudgetTier::Low; N_AGENTS];
                budgets[..active].fill(tier);
                for with_atom in [false, true] {
                    let prompts = (0..active)
                        .map(|k| if with_atom { canonical_atom(atoms, k) } else { PromptSequence::empty() })
                        .collect();
                    let c = Configuration::new(StructureAction { workflow: w, tools, budgets }, prompts);
                    if table.allows(&c.structure) && !out.contains(&c) {
                        out.push(c);
                    }
                }
            }
        }
    }
    out
}

/// One coordinate of the greedy search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dimension {
    Workflow,
    Tools1,
    Tools2,
    Budget1,
    Budget2,
    Budget3,
    Atoms1,
    Atoms2,
    Atoms3,
}

impl Dimension {
    pub const DEFAULT_ORDER: [Dimension; 9] = [
        Dimension::Workflow,
        Dimension::Tools1,
        Dimension::Tools2,
        Dimension::Budget1,
        Dimension::Budget2,
        Dimension::Budget3,
        Dimension::Atoms1,
        Dimension::Atoms2,
        Dimension::Atoms3,
    ];

    fn name(self) -> &'static str {
        match self {
            Dimension::Workflow => "workflow",
            Dimension::Tools1 => "tools1",
            Dimension::Tools2 => "tools2",
            Dimension::Budget1 => "budget1",
            Dimension::Budget2 => "budget2",
            Dimension::Budget3 => "budget3",
            Dimension::Atoms1 => "atoms1",
            Dimension::Atoms2 => "atoms2",
            Dimension::Atoms3 => "atoms3",
        }
    }
}

/// Snaps a configuration onto the table after its workflow changed:
/// disallowed tool subsets and tiers fall back to the first allowed entry,
/// and prompt sequences are truncated or padded to the active agent count.
fn conform(table: &MaskTable, mut c: Configuration) -> Configuration {
    let row = table.row(c.structure.workflow);
    for k in 0..2 {
        if !row.tools[k][c.structure.tools[k].index()] {
            c.structure.tools[k] = ToolSet::from_index(first_allowed(&row.tools[k])).expect("in range");
        }
    }
    for k in 0..N_AGENTS {
        if !row.budgets[k][c.structure.budgets[k].index()] {
            c.structure.budgets[k] = BudgetTier::from_index(first_allowed(&row.budgets[k])).expect("in range");
        }
    }
    c.prompts.resize(c.structure.workflow.agents_active(), PromptSequence::empty());
    c
}

fn candidates(dim: Dimension, c: &Configuration, table: &MaskTable, atoms: &AtomLibrary) -> Vec<Configuration> {
    let row = table.row(c.structure.workflow);
    let with = |f: &dyn Fn(&mut Configuration)| {
        let mut n = c.clone();
        f(&mut n);
        n
    };
    match dim {
        Dimension::Workflow => table
            .enabled_workflows()
            .map(|w| conform(table, with(&|n| n.structure.workflow = w)))
            .collect(),
        Dimension::Tools1 | Dimension::Tools2 => {
            let k = (dim == Dimension::Tools2) as usize;
            (0..row.tools[k].len())
                .filter(|&i| row.tools[k][i])
                .map(|i| with(&|n| n.structure.tools[k] = ToolSet::from_index(i).expect("in range")))
                .collect()
        }
        Dimension::Budget1 | Dimension::Budget2 | Dimension::Budget3 => {
            let k = match dim {
                Dimension::Budget1 => 0,
                Dimension::Budget2 => 1,
                _ => 2,
            };
            BudgetTier::ALL
                .into_iter()
                .filter(|t| row.budgets[k][t.index()])
                .map(|t| with(&|n| n.structure.budgets[k] = t))
                .collect()
        }
        Dimension::Atoms1 | Dimension::Atoms2 | Dimension::Atoms3 => {
            let k = match dim {
                Dimension::Atoms1 => 0,
                Dimension::Atoms2 => 1,
                _ => 2,
            };
            if k >= c.structure.workflow.agents_active() {
                return Vec::new();
            }
            std::iter::once(PromptSequence::empty())
                .chain(atoms.ids_for_role(Role::for_agent(k)).map(|id| PromptSequence::new(vec![id]).expect("single atom")))
                .map(|p| with(&|n| n.prompts[k] = p.clone()))
                .collect()
        }
    }
}

/// Single-pass coordinate ascent from the minimal configuration. Every
/// candidate of every dimension is evaluated, so the trace length is the sum
/// of the per-dimension candidate counts.
pub fn greedy_search(
    table: &MaskTable,
    atoms: &AtomLibrary,
    order: &[Dimension],
    eval: &mut dyn Evaluator,
) -> Result<SearchResult> {
    table.validate()?;
    let start_workflow = table.enabled_workflows().next().unwrap_or(Workflow::Direct);
    let mut current = conform(
        table,
        Configuration::new(
            StructureAction {
                workflow: start_workflow,
                ..StructureAction::MINIMAL
            },
            Vec::new(),
        ),
    );
    let mut current_u = eval.evaluate(&current)?;
    let mut trace = Vec::new();
    for &dim in order {
        let mut best: Option<(Configuration, f64)> = None;
        for c in candidates(dim, &current, table, atoms) {
            let u = eval.evaluate(&c)?;
            trace.push(SearchStep {
                evaluation: trace.len(),
                dimension: dim.name().into(),
                config: c.clone(),
                utility: u,
            });
            if better(u, &c, &best) {
                best = Some((c, u));
            }
        }
        if let Some((c, u)) = best {
            current = c;
            current_u = u;
        }
    }
    Ok(SearchResult {
        best: current,
        utility: current_u,
        trace,
    })
}
