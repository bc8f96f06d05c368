//! Synthetic agentic environment with a closed-form expected-reward oracle.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::embed::hash_embed_dim;
use super::templates::query_for;
use super::{EnvContract, EnvMaxima};
use crate::domain::{
    AtomClass, AtomLibrary, Configuration, ExecutionOutcome, Query, ToolRegistry, ToolSet,
    Workflow, N_TOOLS,
};
use crate::error::{Error, Result};
use crate::features::{extract_features_with, FeatureKeywords, StateEmbedding};
use crate::reward::{shaped_reward, RewardConfig};
use crate::seeds::rng_from_seed;

/// Token cost charged per tool invocation.
pub const TOKENS_PER_TOOL: u64 = 150;
/// Tokens an agent needs at difficulty 0.
pub const BASE_NEEDED_TOKENS: f64 = 256.0;
/// Maximum extra refinement rounds of the evaluator-optimizer loop.
pub const MAX_EXTRA_ROUNDS: u32 = 3;

/// Latent ground truth behind one query. Never shown to policies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticQuerySpec {
    pub difficulty: f64,
    pub required_tools: ToolSet,
    pub required_depth: u8,
    pub noise_scale: f64,
}

impl SyntheticQuerySpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(Error::Contract(format!("difficulty {} outside [0, 1]", self.difficulty)));
        }
        if !(1..=3).contains(&self.required_depth) {
            return Err(Error::Contract(format!("required_depth {} outside 1..=3", self.required_depth)));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Contract(format!("noise_scale {} must be finite and >= 0", self.noise_scale)));
        }
        Ok(())
    }

    /// Atom class that counts as relevant for this query.
    pub fn query_class(&self) -> AtomClass {
        let t = self.required_tools;
        if self.required_depth >= 2 {
            AtomClass::MultiStep
        } else if t.contains(ToolRegistry::CALCULATOR) || t.contains(ToolRegistry::PYTHON_EXEC) {
            AtomClass::Arithmetic
        } else if t.contains(ToolRegistry::WEB_SEARCH) || t.contains(ToolRegistry::LOOKUP) {
            AtomClass::Factual
        } else {
            AtomClass::General
        }
    }
}

/// Distribution over latent specs: uniform difficulty, independent tool
/// requirements, categorical depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecDistribution {
    pub difficulty: [f64; 2],
    pub tool_probs: [f64; N_TOOLS],
    pub depth_weights: [f64; 3],
    pub noise_scale: f64,
}

impl Default for SpecDistribution {
    fn default() -> Self {
        Self {
            difficulty: [0.0, 0.8],
            tool_probs: [0.35, 0.25, 0.15, 0.15],
            depth_weights: [0.5, 0.3, 0.2],
            noise_scale: 0.1,
        }
    }
}

impl SpecDistribution {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.difficulty;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::config("env.distribution.difficulty", "need 0 <= lo <= hi <= 1"));
        }
        if self.tool_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("env.distribution.tool_probs", "probabilities must lie in [0, 1]"));
        }
        if self.depth_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
            || self.depth_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::config("env.distribution.depth_weights", "need non-negative weights with positive sum"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::config("env.distribution.noise_scale", "must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SyntheticQuerySpec {
        let [lo, hi] = self.difficulty;
        let difficulty = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let mut tools = Vec::new();
        for (t, &p) in self.tool_probs.iter().enumerate() {
            if rng.random_bool(p) {
                tools.push(t);
            }
        }
        let total: f64 = self.depth_weights.iter().sum();
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut depth = 3;
        for (i, w) in self.depth_weights.iter().enumerate() {
            acc += w;
            if u < acc {
                depth = i as u8 + 1;
                break;
            }
        }
        SyntheticQuerySpec {
            difficulty,
            required_tools: ToolSet::from_tools(&tools).expect("tool ids in range"),
            required_depth: depth,
            noise_scale: self.noise_scale,
        }
    }
}

/// A query together with its latent spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub query: Query,
    pub spec: SyntheticQuerySpec,
}

pub fn generate_query<R: Rng + ?Sized>(dist: &SpecDistribution, rng: &mut R) -> (Query, SyntheticQuerySpec) {
    let spec = dist.sample(rng);
    (query_for(&spec, rng), spec)
}

/// Logistic success model over configuration-fit factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuccessModel {
    pub w0: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub w5: f64,
}

impl Default for SuccessModel {
    fn default() -> Self {
        Self {
            w0: -1.0,
            w1: 2.0,
            w2: 2.5,
            w3: 1.5,
            w4: 1.0,
            w5: 3.0,
        }
    }
}

/// Inputs to the success logit, all in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitFactors {
    pub depth_ok: f64,
    pub coverage: f64,
    pub adequacy: f64,
    pub relevance: f64,
}

impl SuccessModel {
    pub fn logit(&self, f: &FitFactors, difficulty: f64) -> f64 {
        self.w0 + self.w1 * f.depth_ok + self.w2 * f.coverage + self.w3 * f.adequacy + self.w4 * f.relevance
            - self.w5 * difficulty
    }

    pub fn probability(&self, f: &FitFactors, difficulty: f64) -> f64 {
        sigmoid(self.logit(f, difficulty))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn fit_factors(spec: &SyntheticQuerySpec, c: &Configuration, atoms: &AtomLibrary) -> FitFactors {
    let a = &c.structure;
    let active = a.workflow.agents_active();
    let depth_ok = f64::from(u8::from(active >= spec.required_depth as usize));
    let required = spec.required_tools;
    let coverage = required.intersection(a.usable_tools()).len() as f64 / required.len().max(1) as f64;
    let needed = BASE_NEEDED_TOKENS * (1.0 + 2.0 * spec.difficulty);
    let adequacy = a.budgets[..active]
        .iter()
        .map(|b| (b.tokens() as f64 / needed).min(1.0))
        .fold(1.0, f64::min);
    let class = spec.query_class();
    let chosen: Vec<&AtomClass> = c
        .prompts
        .iter()
        .flat_map(|p| p.ids())
        .filter_map(|&id| atoms.get(id).map(|atom| &atom.class))
        .collect();
    let relevance = if chosen.is_empty() {
        0.0
    } else {
        chosen.iter().filter(|&&&k| k == class).count() as f64 / chosen.len() as f64
    };
    FitFactors {
        depth_ok,
        coverage,
        adequacy,
        relevance,
    }
}

/// Tools that get invoked: allocated to an agent that may use them, required
/// by the query, and prompted for (or invoked unprompted by the topology).
pub fn tools_used(spec: &SyntheticQuerySpec, c: &Configuration, atoms: &AtomLibrary) -> ToolSet {
    let prompted = c
        .prompts
        .iter()
        .flat_map(|p| p.ids())
        .any(|&id| atoms.get(id).is_some_and(|a| a.class == AtomClass::UseTools));
    if prompted || c.structure.workflow.invokes_tools_unprompted() {
        spec.required_tools.intersection(c.structure.usable_tools())
    } else {
        ToolSet::EMPTY
    }
}

pub fn success_probability(
    spec: &SyntheticQuerySpec,
    c: &Configuration,
    model: &SuccessModel,
    atoms: &AtomLibrary,
) -> Result<f64> {
    spec.validate()?;
    c.validate(atoms)?;
    Ok(model.probability(&fit_factors(spec, c, atoms), spec.difficulty))
}

/// Per-agent base token spend and jitter half-width, both in tokens.
fn agent_token_params(tier_tokens: u64, spec: &SyntheticQuerySpec) -> (i64, i64) {
    let t = tier_tokens as f64;
    let base = (t * (0.5 + 0.5 * spec.difficulty)).round() as i64;
    let half_width = (t * spec.noise_scale).round() as i64;
    (base, half_width)
}

/// E[clamp(b + J, 0, t)] for J uniform on the integers -h..=h.
fn clamped_uniform_mean(b: i64, h: i64, t: i64) -> f64 {
    let lo = b - h;
    let hi = b + h;
    // Split [lo, hi] into the parts below 0, inside [0, t], and above t.
    let mid_lo = lo.max(0);
    let mid_hi = hi.min(t);
    let mut total: f64 = 0.0;
    if mid_lo <= mid_hi {
        let n = (mid_hi - mid_lo + 1) as f64;
        total += n * (mid_lo + mid_hi) as f64 / 2.0;
    }
    let above = (hi - t.max(lo - 1)).max(0);
    total += above as f64 * t as f64;
    total / (2 * h + 1) as f64
}

/// Executes a configuration against the latent model. Draw order from the
/// episode rng: correctness, extra refinement rounds, per-agent token jitter.
pub fn execute_synthetic<R: Rng + ?Sized>(
    task: &SyntheticTask,
    c: &Configuration,
    model: &SuccessModel,
    atoms: &AtomLibrary,
    rng: &mut R,
) -> Result<ExecutionOutcome> {
    let spec = &task.spec;
    let p = success_probability(spec, c, model, atoms)?;
    let correct = rng.random::<f64>() < p;
    let w = c.structure.workflow;
    let mut n_steps = w.llm_calls().min;
    if w == Workflow::EvaluatorOptimizer {
        n_steps += rng.random_range(0..=MAX_EXTRA_ROUNDS);
    }
    let used = tools_used(spec, c, atoms);
    let mut n_tokens = TOKENS_PER_TOOL * used.len() as u64;
    for b in &c.structure.budgets[..w.agents_active()] {
        let t = b.tokens() as i64;
        let (base, h) = agent_token_params(b.tokens(), spec);
        let jitter = if h > 0 { rng.random_range(-h..=h) } else { 0 };
        n_tokens += (base + jitter).clamp(0, t) as u64;
    }
    Ok(ExecutionOutcome {
        answer_text: if correct { "synthetic:correct" } else { "synthetic:incorrect" }.to_string(),
        correct,
        n_steps,
        n_tokens,
        n_tools_used: used.len() as u32,
        n_tools_allocated: c.structure.n_tools_allocated(),
    })
}

/// Exact expectation of the shaped reward over correctness, refinement
/// rounds and token jitter.
pub fn expected_reward(
    task: &SyntheticTask,
    c: &Configuration,
    model: &SuccessModel,
    atoms: &AtomLibrary,
    reward: &RewardConfig,
) -> Result<f64> {
    let spec = &task.spec;
    let p = success_probability(spec, c, model, atoms)?;
    let w = c.structure.workflow;
    let mut steps = f64::from(w.llm_calls().min);
    if w == Workflow::EvaluatorOptimizer {
        steps += f64::from(MAX_EXTRA_ROUNDS) / 2.0;
    }
    let used = tools_used(spec, c, atoms);
    let mut tokens = (TOKENS_PER_TOOL * used.len() as u64) as f64;
    for b in &c.structure.budgets[..w.agents_active()] {
        let (base, h) = agent_token_params(b.tokens(), spec);
        tokens += clamped_uniform_mean(base, h, b.tokens() as i64);
    }
    let branch = |correct: bool| {
        let outcome = ExecutionOutcome {
            answer_text: String::new(),
            correct,
            n_steps: 0,
            n_tokens: 0,
            n_tools_used: used.len() as u32,
            n_tools_allocated: c.structure.n_tools_allocated(),
        };
        let (r0, _) = shaped_reward(&outcome, reward);
        // Cost terms are linear, so plug in their expectations directly.
        r0 - reward.beta_steps * steps - reward.beta_tokens * tokens / reward.t_max
    };
    Ok(p * branch(true) + (1.0 - p) * branch(false))
}

/// Exact argmax of the expected reward over `subspace`. Ties go to the
/// smallest structure index, then the shortest prompt sequences.
pub fn brute_force_best<'a, I>(
    task: &SyntheticTask,
    subspace: I,
    model: &SuccessModel,
    atoms: &AtomLibrary,
    reward: &RewardConfig,
) -> Result<(Configuration, f64)>
where
    I: IntoIterator<Item = &'a Configuration>,
{
    let mut best: Option<(&Configuration, f64)> = None;
    for c in subspace {
        let u = expected_reward(task, c, model, atoms, reward)?;
        let better = match &best {
            None => true,
            Some((bc, bu)) => u > *bu || (u == *bu && c.canonical_key() < bc.canonical_key()),
        };
        if better {
            best = Some((c, u));
        }
    }
    best.map(|(c, u)| (c.clone(), u))
        .ok_or_else(|| Error::Contract("brute-force search over an empty subspace".into()))
}

/// The synthetic environment behind [`EnvContract`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticEnv {
    pub distribution: SpecDistribution,
    pub model: SuccessModel,
    pub embed_dim: usize,
    pub keywords: FeatureKeywords,
    #[serde(skip)]
    pub atoms: AtomLibrary,
}

impl Default for SyntheticEnv {
    fn default() -> Self {
        Self {
            distribution: SpecDistribution::default(),
            model: SuccessModel::default(),
            embed_dim: super::embed::EMBED_DIM,
            keywords: FeatureKeywords::default(),
            atoms: AtomLibrary::default(),
        }
    }
}

impl SyntheticEnv {
    pub fn state_dim(&self) -> usize {
        self.embed_dim + 5
    }

    pub fn expected_reward(&self, task: &SyntheticTask, c: &Configuration, reward: &RewardConfig) -> Result<f64> {
        expected_reward(task, c, &self.model, &self.atoms, reward)
    }
}

impl EnvContract for SyntheticEnv {
    type Task = SyntheticTask;

    fn draw_task(&self, seed: u64) -> Result<SyntheticTask> {
        let mut rng = rng_from_seed(seed);
        let (query, spec) = generate_query(&self.distribution, &mut rng);
        Ok(SyntheticTask { query, spec })
    }

    fn query<'a>(&self, task: &'a SyntheticTask) -> &'a Query {
        &task.query
    }

    fn embed(&self, task: &SyntheticTask) -> StateEmbedding {
        let text = &task.query.text;
        StateEmbedding::new(hash_embed_dim(text, self.embed_dim), &extract_features_with(text, &self.keywords))
    }

    fn execute(&self, task: &SyntheticTask, c: &Configuration, seed: u64) -> Result<ExecutionOutcome> {
        execute_synthetic(task, c, &self.model, &self.atoms, &mut rng_from_seed(seed))
    }

    fn maxima(&self) -> EnvMaxima {
        let max_calls = Workflow::ALL.iter().map(|w| w.llm_calls().max).max().unwrap_or(1);
        EnvMaxima {
            steps: max_calls,
            tokens: 3 * crate::domain::BudgetTier::High.tokens() + TOKENS_PER_TOOL * N_TOOLS as u64,
            tools_used: N_TOOLS as u32,
            tools_allocated: 2 * N_TOOLS as u32,
        }
    }

    fn atoms(&self) -> &AtomLibrary {
        &self.atoms
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{BudgetTier, PromptSequence, StructureAction};

    fn spec(d: f64, tools: &[usize], depth: u8) -> SyntheticQuerySpec {
        SyntheticQuerySpec {
            difficulty: d,
            required_tools: ToolSet::from_tools(tools).unwrap(),
            required_depth: depth,
            noise_scale: 0.0,
        }
    }

    fn task(s: SyntheticQuerySpec) -> SyntheticTask {
        SyntheticTask {
            query: Query {
                id: "t".into(),
                text: "t".into(),
                gold_answer: None,
            },
            spec: s,
        }
    }

    fn config(w: Workflow, t1: &[usize], t2: &[usize], tier: BudgetTier, reasoner: &[usize]) -> Configuration {
        let mut prompts = vec![PromptSequence::new(reasoner.to_vec()).unwrap()];
        prompts.resize(w.agents_active(), PromptSequence::empty());
        let mut budgets = [BudgetTier::Low; 3];
        for b in budgets.iter_mut().take(w.agents_active()) {
            *b = tier;
        }
        Configuration::new(
            StructureAction {
                workflow: w,
                tools: [ToolSet::from_tools(t1).unwrap(), ToolSet::from_tools(t2).unwrap()],
                budgets,
            },
            prompts,
        )
    }

    #[test]
    fn worked_success_probability() {
        let atoms = AtomLibrary::default();
        let c = config(Workflow::Direct, &[], &[], BudgetTier::Low, &[0]);
        let p = success_probability(&spec(0.0, &[], 1), &c, &SuccessModel::default(), &atoms).unwrap();
        let oracle = 1.0 / (1.0 + (-3.5f64).exp());
        assert!((p - oracle).abs() < 1e-12);
        assert!((p - 0.9707).abs() < 1e-4);
    }

    #[test]
    fn coverage_and_usage_rules() {
        let atoms = AtomLibrary::default();
        let s = spec(0.2, &[ToolRegistry::CALCULATOR, ToolRegistry::PYTHON_EXEC], 1);
        let c = config(Workflow::ReasonAns, &[ToolRegistry::PYTHON_EXEC], &[], BudgetTier::Mid, &[1]);
        assert_eq!(fit_factors(&s, &c, &atoms).coverage, 0.5);
        let mut rng = rng_from_seed(3);
        let out = execute_synthetic(&task(s), &c, &SuccessModel::default(), &atoms, &mut rng).unwrap();
        assert_eq!(out.n_tools_used, 0);
        assert!(out.n_tools_allocated > 0);
        let prompted = config(Workflow::ReasonAns, &[ToolRegistry::PYTHON_EXEC], &[], BudgetTier::Mid, &[4]);
        assert_eq!(tools_used(&s, &prompted, &atoms).len(), 1);
    }

    #[test]
    fn invalid_configuration_is_a_contract_error() {
        let atoms = AtomLibrary::default();
        let mut c = config(Workflow::Direct, &[], &[], BudgetTier::Low, &[]);
        c.prompts.push(PromptSequence::empty());
        let r = execute_synthetic(&task(spec(0.0, &[], 1)), &c, &SuccessModel::default(), &atoms, &mut rng_from_seed(0));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn clamped_uniform_mean_matches_enumeration() {
        for (b, h, t) in [(128, 0, 256), (200, 100, 256), (10, 30, 256), (100, 500, 256), (3000, 2000, 4096)] {
            let brute: f64 = (-h..=h).map(|j| ((b + j).clamp(0, t)) as f64).sum::<f64>() / (2 * h + 1) as f64;
            assert!((clamped_uniform_mean(b, h, t) - brute).abs() < 1e-9, "{b} {h} {t}");
        }
    }

    #[test]
    fn saturated_model_gives_correct_branch() {
        let atoms = AtomLibrary::default();
        let model = SuccessModel {
            w0: 100.0,
            ..Default::default()
        };
        let c = config(Workflow::Direct, &[], &[], BudgetTier::Low, &[0]);
        let t = task(spec(0.0, &[], 1));
        let e = expected_reward(&t, &c, &model, &atoms, &RewardConfig::default()).unwrap();
        // Direct: one step, 128 tokens, no tools.
        let det = 5.0 - 0.02 - 0.03 * 128.0 / 4096.0;
        assert!((e - det).abs() < 1e-12);
    }

    #[test]
    fn difficulty_is_monotone() {
        let atoms = AtomLibrary::default();
        let c = config(Workflow::ReasonVerifyAns, &[0], &[1], BudgetTier::Mid, &[2]);
        let mut last = f64::INFINITY;
        for i in 0..=20 {
            let p = success_probability(&spec(i as f64 / 20.0, &[0], 2), &c, &SuccessModel::default(), &atoms).unwrap();
            assert!(p <= last);
            last = p;
        }
    }

    #[test]
    fn brute_force_tie_break_and_empty() {
        let atoms = AtomLibrary::default();
        let t = task(spec(0.0, &[], 1));
        let a = config(Workflow::Direct, &[], &[], BudgetTier::Low, &[0]);
        let b = a.clone();
        let (best, _) = brute_force_best(&t, [&b, &a], &SuccessModel::default(), &atoms, &RewardConfig::default()).unwrap();
        assert_eq!(best, a);
        let empty: [&Configuration; 0] = [];
        assert!(brute_force_best(&t, empty, &SuccessModel::default(), &atoms, &RewardConfig::default()).is_err());
    }
}
