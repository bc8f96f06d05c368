//! Domain types shared across the crate: workflows, tool subsets, budget
//! tiers, structure actions and their mixed-radix indexing, prompt atoms,
//! configurations, execution outcomes and episode records.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::StateEmbedding;

pub const N_WORKFLOWS: usize = 9;
pub const N_TOOLS: usize = 4;
pub const N_TOOL_SUBSETS: usize = 1 << N_TOOLS;
pub const N_TIERS: usize = 3;
pub const N_AGENTS: usize = 3;
/// Size of the unmasked structure space: 9 workflows, 16 subsets for each
/// of two tool-using agents, 3 tiers for each of three agents.
pub const STRUCTURE_SPACE: usize =
    N_WORKFLOWS * N_TOOL_SUBSETS * N_TOOL_SUBSETS * N_TIERS * N_TIERS * N_TIERS;
pub const MAX_PROMPT_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Workflow {
    Direct,
    ReasonAns,
    ReasonVerifyAns,
    Routing,
    ParallelSectioning,
    ParallelVoting,
    OrchestratorWorkers,
    EvaluatorOptimizer,
    AutonomousAgent,
}

/// Inclusive range of LLM calls a workflow performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallCount {
    pub min: u32,
    pub max: u32,
}

impl Workflow {
    pub const ALL: [Workflow; N_WORKFLOWS] = [
        Workflow::Direct,
        Workflow::ReasonAns,
        Workflow::ReasonVerifyAns,
        Workflow::Routing,
        Workflow::ParallelSectioning,
        Workflow::ParallelVoting,
        Workflow::OrchestratorWorkers,
        Workflow::EvaluatorOptimizer,
        Workflow::AutonomousAgent,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL.get(id).copied().ok_or(Error::Range {
            index: id,
            size: N_WORKFLOWS,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Workflow::Direct => "Direct",
            Workflow::ReasonAns => "ReasonAns",
            Workflow::ReasonVerifyAns => "ReasonVerifyAns",
            Workflow::Routing => "Routing",
            Workflow::ParallelSectioning => "ParallelSectioning",
            Workflow::ParallelVoting => "ParallelVoting",
            Workflow::OrchestratorWorkers => "OrchestratorWorkers",
            Workflow::EvaluatorOptimizer => "EvaluatorOptimizer",
            Workflow::AutonomousAgent => "AutonomousAgent",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|w| w.name() == name)
    }

    pub fn llm_calls(self) -> CallCount {
        let fixed = |n| CallCount { min: n, max: n };
        match self {
            Workflow::Direct => fixed(1),
            Workflow::ReasonAns => fixed(2),
            Workflow::ReasonVerifyAns | Workflow::Routing => fixed(3),
            Workflow::ParallelSectioning
            | Workflow::ParallelVoting
            | Workflow::OrchestratorWorkers
            | Workflow::AutonomousAgent => fixed(4),
            Workflow::EvaluatorOptimizer => CallCount { min: 4, max: 7 },
        }
    }

    /// Number of distinct agent slots (1..=3) whose tools, budget and
    /// prompts matter for this topology.
    pub fn agents_active(self) -> usize {
        match self {
            Workflow::Direct => 1,
            Workflow::ReasonAns
            | Workflow::Routing
            | Workflow::ParallelVoting
            | Workflow::EvaluatorOptimizer
            | Workflow::AutonomousAgent => 2,
            Workflow::ReasonVerifyAns
            | Workflow::ParallelSectioning
            | Workflow::OrchestratorWorkers => 3,
        }
    }

    pub fn agent2_tools_allowed(self) -> bool {
        !matches!(
            self,
            Workflow::Direct | Workflow::ReasonAns | Workflow::ParallelVoting
        )
    }

    /// Topologies whose agents invoke allocated tools without an explicit
    /// instruction to do so.
    pub fn invokes_tools_unprompted(self) -> bool {
        matches!(
            self,
            Workflow::AutonomousAgent | Workflow::OrchestratorWorkers
        )
    }
}

impl fmt::Display for Workflow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Names of the four tool kinds, indexed by bit position in a [`ToolSet`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolRegistry {
    pub names: [String; N_TOOLS],
}

impl Default for ToolRegistry {
    fn default() -> Self {
        Self {
            names: [
                "calculator".into(),
                "web_search".into(),
                "python_exec".into(),
                "lookup".into(),
            ],
        }
    }
}

impl ToolRegistry {
    pub const CALCULATOR: usize = 0;
    pub const WEB_SEARCH: usize = 1;
    pub const PYTHON_EXEC: usize = 2;
    pub const LOOKUP: usize = 3;

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// A subset of the tool registry, stored as a 4-bit mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ToolSet(u8);

impl ToolSet {
    pub const EMPTY: ToolSet = ToolSet(0);
    pub const ALL: ToolSet = ToolSet((N_TOOL_SUBSETS - 1) as u8);

    pub fn from_index(index: usize) -> Result<Self> {
        if index < N_TOOL_SUBSETS {
            Ok(ToolSet(index as u8))
        } else {
            Err(Error::Range {
                index,
                size: N_TOOL_SUBSETS,
            })
        }
    }

    pub fn from_tools(tools: &[usize]) -> Result<Self> {
        tools.iter().try_fold(ToolSet::EMPTY, |acc, &t| {
            if t < N_TOOLS {
                Ok(ToolSet(acc.0 | (1 << t)))
            } else {
                Err(Error::Range {
                    index: t,
                    size: N_TOOLS,
                })
            }
        })
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn contains(self, tool: usize) -> bool {
        tool < N_TOOLS && self.0 & (1 << tool) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: ToolSet) -> ToolSet {
        ToolSet(self.0 | other.0)
    }

    pub fn intersection(self, other: ToolSet) -> ToolSet {
        ToolSet(self.0 & other.0)
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..N_TOOLS).filter(move |&t| self.contains(t))
    }
}

impl Serialize for ToolSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(self.0)
    }
}

impl<'de> Deserialize<'de> for ToolSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = usize::deserialize(d)?;
        ToolSet::from_index(raw).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BudgetTier {
    Low,
    Mid,
    High,
}

impl BudgetTier {
    pub const ALL: [BudgetTier; N_TIERS] = [BudgetTier::Low, BudgetTier::Mid, BudgetTier::High];

    pub fn tokens(self) -> u64 {
        match self {
            BudgetTier::Low => 256,
            BudgetTier::Mid => 1024,
            BudgetTier::High => 4096,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Self::ALL.get(index).copied().ok_or(Error::Range {
            index,
            size: N_TIERS,
        })
    }
}

/// The joint architectural decision: workflow, per-agent tool subsets for
/// the two tool-capable agents, and per-agent budget tiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StructureAction {
    pub workflow: Workflow,
    pub tools: [ToolSet; 2],
    pub budgets: [BudgetTier; N_AGENTS],
}

impl StructureAction {
    /// Direct, no tools, all-Low budgets; also index 0.
    pub const MINIMAL: StructureAction = StructureAction {
        workflow: Workflow::Direct,
        tools: [ToolSet::EMPTY, ToolSet::EMPTY],
        budgets: [BudgetTier::Low; N_AGENTS],
    };

    /// Mixed-radix index: workflow-major, then tools1, tools2, budget1..3.
    pub fn index(&self) -> usize {
        let mut i = self.workflow.id();
        i = i * N_TOOL_SUBSETS + self.tools[0].index();
        i = i * N_TOOL_SUBSETS + self.tools[1].index();
        for b in self.budgets {
            i = i * N_TIERS + b.index();
        }
        i
    }

    pub fn decode(index: usize) -> Result<Self> {
        if index >= STRUCTURE_SPACE {
            return Err(Error::Range {
                index,
                size: STRUCTURE_SPACE,
            });
        }
        let mut rest = index;
        let mut budgets = [BudgetTier::Low; N_AGENTS];
        for slot in budgets.iter_mut().rev() {
            *slot = BudgetTier::from_index(rest % N_TIERS)?;
            rest /= N_TIERS;
        }
        let t2 = ToolSet::from_index(rest % N_TOOL_SUBSETS)?;
        rest /= N_TOOL_SUBSETS;
        let t1 = ToolSet::from_index(rest % N_TOOL_SUBSETS)?;
        rest /= N_TOOL_SUBSETS;
        Ok(StructureAction {
            workflow: Workflow::from_id(rest)?,
            tools: [t1, t2],
            budgets,
        })
    }

    /// Tools available to agents that may actually use them under this
    /// workflow.
    pub fn usable_tools(&self) -> ToolSet {
        if self.workflow.agent2_tools_allowed() {
            self.tools[0].union(self.tools[1])
        } else {
            self.tools[0]
        }
    }

    pub fn n_tools_allocated(&self) -> u32 {
        (self.tools[0].len() + self.tools[1].len()) as u32
    }
}

pub fn index_structure_action(a: &StructureAction) -> usize {
    a.index()
}

pub fn decode_structure_action(i: usize) -> Result<StructureAction> {
    StructureAction::decode(i)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Reasoner,
    Verifier,
    Answerer,
}

impl Role {
    /// Agent slot 0 reasons, slot 1 verifies, slot 2 answers.
    pub fn for_agent(agent: usize) -> Role {
        match agent {
            0 => Role::Reasoner,
            1 => Role::Verifier,
            _ => Role::Answerer,
        }
    }
}

/// Semantic class of an atom; the synthetic environment scores relevance by
/// matching it against the latent query class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AtomClass {
    General,
    Arithmetic,
    MultiStep,
    Factual,
    UseTools,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptAtom {
    pub id: usize,
    pub role: Role,
    pub class: AtomClass,
    pub text: String,
}

/// The prompt-atom library; ids are dense `0..len`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AtomLibrary {
    atoms: Vec<PromptAtom>,
}

impl AtomLibrary {
    pub fn new(atoms: Vec<PromptAtom>) -> Result<Self> {
        for (i, a) in atoms.iter().enumerate() {
            if a.id != i {
                return Err(Error::Contract(format!(
                    "atom ids must be dense: position {i} has id {}",
                    a.id
                )));
            }
            if a.text.trim().is_empty() {
                return Err(Error::Contract(format!("atom {i} has empty text")));
            }
        }
        Ok(Self { atoms })
    }

    pub fn empty() -> Self {
        Self { atoms: Vec::new() }
    }

    /// Builds a library from `(role, class, text)` triples, assigning ids in order.
    pub fn from_entries(entries: &[(Role, AtomClass, &str)]) -> Self {
        let atoms = entries
            .iter()
            .enumerate()
            .map(|(id, &(role, class, text))| PromptAtom {
                id,
                role,
                class,
                text: text.to_string(),
            })
            .collect();
        Self { atoms }
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&PromptAtom> {
        self.atoms.get(id)
    }

    pub fn atoms(&self) -> &[PromptAtom] {
        &self.atoms
    }

    pub fn ids_for_role(&self, role: Role) -> impl Iterator<Item = usize> + '_ {
        self.atoms.iter().filter(move |a| a.role == role).map(|a| a.id)
    }
}

impl Default for AtomLibrary {
    fn default() -> Self {
        use AtomClass::*;
        use Role::*;
        Self::from_entries(&[
            (Reasoner, General, "Answer the question directly and concisely."),
            (Reasoner, Arithmetic, "Write out each arithmetic operation explicitly."),
            (Reasoner, MultiStep, "Decompose the problem into ordered sub-steps."),
            (Reasoner, Factual, "Identify the entities and facts the question depends on."),
            (Reasoner, UseTools, "Use the available tools whenever they can help."),
            (Verifier, General, "Check the reasoning for consistency with the question."),
            (Verifier, Arithmetic, "Recompute every intermediate calculation."),
            (Verifier, MultiStep, "Verify intermediate steps before accepting them."),
            (Verifier, UseTools, "Confirm results with a tool call where possible."),
            (Answerer, General, "State only the final answer."),
            (Answerer, Arithmetic, "Report the final number without units."),
            (Answerer, Factual, "Give the shortest span that answers the question."),
        ])
    }
}

/// Ordered, duplicate-free atom ids for one agent; an implicit STOP follows
/// the last id.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct PromptSequence(Vec<usize>);

impl PromptSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.len() > MAX_PROMPT_LEN {
            return Err(Error::InvalidAction(format!(
                "prompt sequence length {} exceeds {MAX_PROMPT_LEN}",
                ids.len()
            )));
        }
        for (i, id) in ids.iter().enumerate() {
            if ids[..i].contains(id) {
                return Err(Error::InvalidAction(format!("atom {id} repeated")));
            }
        }
        Ok(Self(ids))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<usize>> for PromptSequence {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        PromptSequence::new(v)
    }
}

impl From<PromptSequence> for Vec<usize> {
    fn from(p: PromptSequence) -> Self {
        p.0
    }
}

/// A full configuration: structure plus one prompt sequence per active agent.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Configuration {
    pub structure: StructureAction,
    pub prompts: Vec<PromptSequence>,
}

impl Configuration {
    pub fn new(structure: StructureAction, prompts: Vec<PromptSequence>) -> Self {
        Self { structure, prompts }
    }

    /// Checks shape constraints that every executor relies on: one prompt
    /// sequence per active agent, atoms known to the library and assigned
    /// to the matching role.
    pub fn validate(&self, atoms: &AtomLibrary) -> Result<()> {
        let active = self.structure.workflow.agents_active();
        if self.prompts.len() != active {
            return Err(Error::Contract(format!(
                "{} expects {active} prompt sequences, got {}",
                self.structure.workflow,
                self.prompts.len()
            )));
        }
        for (agent, seq) in self.prompts.iter().enumerate() {
            let role = Role::for_agent(agent);
            for &id in seq.ids() {
                let atom = atoms.get(id).ok_or(Error::Range {
                    index: id,
                    size: atoms.len(),
                })?;
                if atom.role != role {
                    return Err(Error::Contract(format!(
                        "atom {id} has role {:?} but agent {agent} is {role:?}",
                        atom.role
                    )));
                }
            }
        }
        Ok(())
    }

    /// Tie-break key: structure index first, then total prompt length, then ids.
    pub fn canonical_key(&self) -> (usize, usize, Vec<Vec<usize>>) {
        (
            self.structure.index(),
            self.prompts.iter().map(PromptSequence::len).sum(),
            self.prompts.iter().map(|p| p.ids().to_vec()).collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub gold_answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub answer_text: String,
    pub correct: bool,
    pub n_steps: u32,
    pub n_tokens: u64,
    pub n_tools_used: u32,
    pub n_tools_allocated: u32,
}

/// Signed reward terms; their sum is the episode reward.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RewardBreakdown {
    pub success: f64,
    pub steps: f64,
    pub tokens: f64,
    pub tools: f64,
}

impl RewardBreakdown {
    pub fn total(&self) -> f64 {
        self.success + self.steps + self.tokens + self.tools
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.success, self.steps, self.tokens, self.tools]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            success: a[0],
            steps: a[1],
            tokens: a[2],
            tools: a[3],
        }
    }
}

/// One configured-and-executed query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EpisodeRow", into = "EpisodeRow")]
pub struct EpisodeRecord {
    pub state: StateEmbedding,
    pub structure: StructureAction,
    pub prompts: Vec<PromptSequence>,
    pub outcome: ExecutionOutcome,
    pub reward: f64,
    pub breakdown: RewardBreakdown,
    pub seed: u64,
}

impl EpisodeRecord {
    pub fn configuration(&self) -> Configuration {
        Configuration::new(self.structure, self.prompts.clone())
    }
}

/// Flat JSONL row layout of an [`EpisodeRecord`].
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeRow {
    state_semantic: Vec<f64>,
    state_features: Vec<f64>,
    workflow: Workflow,
    tools1: ToolSet,
    tools2: ToolSet,
    budgets: [BudgetTier; N_AGENTS],
    prompts: Vec<PromptSequence>,
    answer_text: String,
    correct: bool,
    n_steps: u32,
    n_tokens: u64,
    n_tools_used: u32,
    n_tools_allocated: u32,
    reward: f64,
    reward_terms: [f64; 4],
    seed: u64,
}

impl From<EpisodeRecord> for EpisodeRow {
    fn from(r: EpisodeRecord) -> Self {
        EpisodeRow {
            state_semantic: r.state.semantic,
            state_features: r.state.features.to_vec(),
            workflow: r.structure.workflow,
            tools1: r.structure.tools[0],
            tools2: r.structure.tools[1],
            budgets: r.structure.budgets,
            prompts: r.prompts,
            answer_text: r.outcome.answer_text,
            correct: r.outcome.correct,
            n_steps: r.outcome.n_steps,
            n_tokens: r.outcome.n_tokens,
            n_tools_used: r.outcome.n_tools_used,
            n_tools_allocated: r.outcome.n_tools_allocated,
            reward: r.reward,
            reward_terms: r.breakdown.as_array(),
            seed: r.seed,
        }
    }
}

impl TryFrom<EpisodeRow> for EpisodeRecord {
    type Error = Error;
    fn try_from(row: EpisodeRow) -> Result<Self> {
        let features: [f64; 5] = row
            .state_features
            .as_slice()
            .try_into()
            .map_err(|_| Error::shape("state_features", 5, row.state_features.len()))?;
        Ok(EpisodeRecord {
            state: StateEmbedding {
                semantic: row.state_semantic,
                features,
            },
            structure: StructureAction {
                workflow: row.workflow,
                tools: [row.tools1, row.tools2],
                budgets: row.budgets,
            },
            prompts: row.prompts,
            outcome: ExecutionOutcome {
                answer_text: row.answer_text,
                correct: row.correct,
                n_steps: row.n_steps,
                n_tokens: row.n_tokens,
                n_tools_used: row.n_tools_used,
                n_tools_allocated: row.n_tools_allocated,
            },
            reward: row.reward,
            breakdown: RewardBreakdown::from_array(row.reward_terms),
            seed: row.seed,
        })
    }
}

/// Append-only episode store; iteration follows insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperienceBuffer {
    records: Vec<EpisodeRecord>,
}

impl ExperienceBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: EpisodeRecord) {
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, EpisodeRecord> {
        self.records.iter()
    }

    pub fn records(&self) -> &[EpisodeRecord] {
        &self.records
    }
}

impl FromIterator<EpisodeRecord> for ExperienceBuffer {
    fn from_iter<I: IntoIterator<Item = EpisodeRecord>>(iter: I) -> Self {
        Self {
            records: iter.into_iter().collect(),
        }
    }
}

impl Extend<EpisodeRecord> for ExperienceBuffer {
    fn extend<I: IntoIterator<Item = EpisodeRecord>>(&mut self, iter: I) {
        self.records.extend(iter);
    }
}

impl<'a> IntoIterator for &'a ExperienceBuffer {
    type Item = &'a EpisodeRecord;
    type IntoIter = std::slice::Iter<'a, EpisodeRecord>;
    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}
