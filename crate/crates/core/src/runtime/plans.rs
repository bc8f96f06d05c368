//! Call graphs of the nine workflows and their execution against a chat
//! backend.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::backend::{call_with_retry, BackendEndpoint, ChatMessage, ChatRequest, ChatResponse, ChatTransport};
use super::tools::{parse_directives, ToolBox};
use crate::domain::{
    AtomLibrary, CallCount, Configuration, ExecutionOutcome, Query, ToolRegistry, ToolSet, Workflow,
};
use crate::env::{hash_embed_dim, EnvContract, EnvMaxima, EMBED_DIM};
use crate::error::{Error, Result};
use crate::features::{extract_features_with, FeatureKeywords, StateEmbedding};
use crate::seeds::rng_from_seed;

/// Fan-out width of the sectioning and voting workflows.
pub const FAN_OUT: usize = 3;
/// Refinement rounds allowed after the first critique.
pub const MAX_REFINEMENTS: usize = 3;
/// Iterations of the autonomous agent loop.
pub const AGENT_ITERATIONS: usize = 4;
/// Evaluator output that ends a refinement loop.
pub const ACCEPT: &str = "ACCEPT";

/// One stage of a workflow's call graph. Agent numbers are slots
/// (0 reasoner, 1 second agent, 2 answerer).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stage {
    Call { name: &'static str, agent: usize },
    /// Independent calls whose outputs all feed the next stage.
    FanOut { name: &'static str, agents: Vec<usize> },
    /// Aggregator call; the final answer is the fan-out majority when one
    /// exists, otherwise the aggregator's output.
    Vote { agent: usize },
    /// The router's reply picks which slot handles the next call: a reply
    /// mentioning "2" routes to `options[1]`.
    Route { router: usize, options: [usize; 2] },
    /// Generate, critique, refine; then up to `MAX_REFINEMENTS - 1` more
    /// critique/refine rounds until the critic replies ACCEPT.
    Refine { generator: usize, critic: usize },
    /// A fixed number of iterations; the first by `first`, the rest by `rest`.
    Loop { first: usize, rest: usize, iterations: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkflowPlan {
    pub workflow: Workflow,
    pub stages: Vec<Stage>,
}

impl WorkflowPlan {
    pub fn for_workflow(w: Workflow) -> Self {
        use Stage::*;
        let stages = match w {
            Workflow::Direct => vec![Call { name: "answer", agent: 0 }],
            Workflow::ReasonAns => vec![Call { name: "reason", agent: 0 }, Call { name: "answer", agent: 1 }],
            Workflow::ReasonVerifyAns => vec![
                Call { name: "reason", agent: 0 },
                Call { name: "verify", agent: 1 },
                Call { name: "answer", agent: 2 },
            ],
            Workflow::Routing => vec![Route { router: 0, options: [0, 1] }, Call { name: "answer", agent: 0 }],
            Workflow::ParallelSectioning => vec![
                FanOut { name: "section", agents: vec![1, 0, 0] },
                Call { name: "aggregate", agent: 2 },
            ],
            Workflow::ParallelVoting => vec![FanOut { name: "vote", agents: vec![0; FAN_OUT] }, Vote { agent: 1 }],
            Workflow::OrchestratorWorkers => vec![
                Call { name: "plan", agent: 0 },
                FanOut { name: "work", agents: vec![1, 1] },
                Call { name: "synthesize", agent: 2 },
            ],
            Workflow::EvaluatorOptimizer => vec![Refine { generator: 0, critic: 1 }],
            Workflow::AutonomousAgent => vec![Loop { first: 0, rest: 1, iterations: AGENT_ITERATIONS }],
        };
        Self { workflow: w, stages }
    }

    /// Fewest and most logical calls the plan can make.
    pub fn call_bounds(&self) -> CallCount {
        let (mut min, mut max) = (0, 0);
        for s in &self.stages {
            let (lo, hi) = match s {
                Stage::Call { .. } | Stage::Vote { .. } => (1, 1),
                Stage::FanOut { agents, .. } => (agents.len(), agents.len()),
                Stage::Route { .. } => (2, 2),
                Stage::Refine { .. } => (4, 2 * MAX_REFINEMENTS + 1),
                Stage::Loop { iterations, .. } => (*iterations, *iterations),
            };
            min += lo;
            max += hi;
        }
        CallCount {
            min: min as u32,
            max: max as u32,
        }
    }
}

/// Lowercase, trimmed, whitespace-collapsed text.
pub fn normalize_answer(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// The text after the last `Answer:` marker, or the whole reply.
fn extract_answer(text: &str) -> &str {
    let lower = text.to_lowercase();
    match lower.rfind("answer:") {
        Some(i) => text[i + "answer:".len()..].trim(),
        None => text.trim(),
    }
}

/// Majority over normalized answers (strictly more than half).
fn majority(answers: &[String]) -> Option<String> {
    let normalized: Vec<String> = answers.iter().map(|a| normalize_answer(extract_answer(a))).collect();
    normalized
        .iter()
        .find(|a| 2 * normalized.iter().filter(|b| b == a).count() > normalized.len())
        .cloned()
}

/// Everything a real-mode execution needs besides the query and
/// configuration.
pub struct RealExecutor<'a> {
    pub endpoint: &'a BackendEndpoint,
    pub transport: &'a dyn ChatTransport,
    pub tools: &'a ToolBox,
    pub registry: &'a ToolRegistry,
    pub atoms: &'a AtomLibrary,
    pub sleep: &'a (dyn Fn(Duration) + Sync),
}

struct Run<'e, 'a> {
    exec: &'e RealExecutor<'a>,
    query: &'e Query,
    config: &'e Configuration,
    cap: u32,
    calls: u32,
    tokens: u64,
    used: ToolSet,
    transcript: Vec<String>,
    tool_notes: Vec<String>,
}

impl Run<'_, '_> {
    fn agent_tools(&self, agent: usize) -> ToolSet {
        let s = &self.config.structure;
        match agent {
            0 => s.tools[0],
            1 if s.workflow.agent2_tools_allowed() => s.tools[1],
            _ => ToolSet::EMPTY,
        }
    }

    fn request(&self, agent: usize, stage: &str) -> ChatRequest {
        let s = &self.config.structure;
        let budget = s.budgets[agent.min(2)].tokens();
        let mut system = format!("You are the {stage} step of a {} workflow.", s.workflow);
        if let Some(p) = self.config.prompts.get(agent) {
            for &id in p.ids() {
                if let Some(a) = self.exec.atoms.get(id) {
                    system.push(' ');
                    system.push_str(&a.text);
                }
            }
        }
        let tools: Vec<&str> = self.agent_tools(agent).iter().map(|t| self.exec.registry.names[t].as_str()).collect();
        if !tools.is_empty() {
            system.push_str(&format!(
                " Tools: {}. Request one with a line `TOOL:<name>:<argument>`.",
                tools.join(", ")
            ));
        }
        system.push_str(" End with a line `Answer: <answer>`.");
        let mut user = self.query.text.clone();
        let mut context: Vec<&str> = self.transcript.iter().map(String::as_str).collect();
        context.extend(self.tool_notes.iter().map(String::as_str));
        if !context.is_empty() {
            // Roughly four characters per token; keep the most recent text.
            let limit = (budget as usize) * 4;
            let joined = context.join("\n\n");
            let start = joined.len().saturating_sub(limit);
            let start = (start..=joined.len()).find(|&i| joined.is_char_boundary(i)).unwrap_or(joined.len());
            user.push_str("\n\nEarlier steps:\n");
            user.push_str(&joined[start..]);
        }
        ChatRequest {
            model: self.exec.endpoint.model.clone(),
            messages: vec![ChatMessage::new("system", system), ChatMessage::new("user", user)],
            max_tokens: budget,
            temperature: self.exec.endpoint.temperature,
        }
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse> {
        call_with_retry(self.exec.transport, request, self.exec.endpoint, self.exec.sleep)
    }

    fn reserve(&mut self, n: usize) -> Result<()> {
        if self.calls + n as u32 > self.cap {
            return Err(Error::Contract(format!(
                "{} plan would exceed its cap of {} calls",
                self.config.structure.workflow, self.cap
            )));
        }
        self.calls += n as u32;
        Ok(())
    }

    /// Books a reply: tokens, tool directives, transcript.
    fn absorb(&mut self, agent: usize, stage: &str, reply: ChatResponse) -> String {
        self.tokens += reply.tokens;
        let allowed = self.agent_tools(agent);
        for call in parse_directives(&reply.text, self.exec.registry) {
            let (ran, note) = self.exec.tools.run(&call, allowed);
            if ran {
                self.used = self.used.union(ToolSet::from_tools(&[call.tool]).expect("registry index"));
            }
            self.tool_notes.push(note);
        }
        self.transcript.push(format!("[{stage}] {}", reply.text));
        reply.text
    }

    fn call(&mut self, agent: usize, stage: &str) -> Result<String> {
        self.reserve(1)?;
        let req = self.request(agent, stage);
        let reply = self.send(&req)?;
        Ok(self.absorb(agent, stage, reply))
    }

    fn fan_out(&mut self, agents: &[usize], stage: &str) -> Result<Vec<String>> {
        self.reserve(agents.len())?;
        let requests: Vec<ChatRequest> = agents.iter().map(|&a| self.request(a, stage)).collect();
        let mut replies = Vec::with_capacity(requests.len());
        for chunk in requests.chunks(self.exec.endpoint.max_in_flight.max(1)) {
            if chunk.len() == 1 {
                replies.push(self.send(&chunk[0]));
            } else {
                let this = &*self;
                replies.extend(std::thread::scope(|s| {
                    let handles: Vec<_> = chunk.iter().map(|r| s.spawn(move || this.send(r))).collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().unwrap_or_else(|_| Err(Error::Backend("call thread panicked".into()))))
                        .collect::<Vec<_>>()
                }));
            }
        }
        let mut out = Vec::with_capacity(agents.len());
        for (&a, r) in agents.iter().zip(replies) {
            out.push(self.absorb(a, stage, r?));
        }
        Ok(out)
    }

    fn execute(&mut self, plan: &WorkflowPlan) -> Result<String> {
        let mut last = String::new();
        for stage in &plan.stages {
            last = match stage {
                Stage::Call { name, agent } => self.call(*agent, name)?,
                Stage::FanOut { name, agents } => self.fan_out(agents, name)?.pop().unwrap_or_default(),
                Stage::Vote { agent } => {
                    let votes: Vec<String> = self.transcript[self.transcript.len() - FAN_OUT..]
                        .iter()
                        .map(|t| t.split_once("] ").map_or(t.clone(), |(_, b)| b.to_string()))
                        .collect();
                    let aggregated = self.call(*agent, "aggregate")?;
                    majority(&votes).unwrap_or(aggregated)
                }
                Stage::Route { router, options } => {
                    let route = self.call(*router, "route")?;
                    let target = if route.contains('2') { options[1] } else { options[0] };
                    self.call(target, "reason")?
                }
                Stage::Refine { generator, critic } => {
                    self.call(*generator, "generate")?;
                    self.call(*critic, "evaluate")?;
                    let mut draft = self.call(*generator, "refine")?;
                    for _ in 1..MAX_REFINEMENTS {
                        let verdict = self.call(*critic, "evaluate")?;
                        if verdict.contains(ACCEPT) {
                            break;
                        }
                        draft = self.call(*generator, "refine")?;
                    }
                    draft
                }
                Stage::Loop { first, rest, iterations } => {
                    let mut out = String::new();
                    for i in 0..*iterations {
                        out = self.call(if i == 0 { *first } else { *rest }, "iterate")?;
                    }
                    out
                }
            };
        }
        Ok(last)
    }
}

/// Runs `config` on `query` through the workflow's plan. Correctness is a
/// normalized exact match of the final `Answer:` text against the gold
/// answer, and false when there is none.
pub fn execute_real(query: &Query, config: &Configuration, exec: &RealExecutor<'_>) -> Result<ExecutionOutcome> {
    config.validate(exec.atoms)?;
    exec.endpoint.validate()?;
    let plan = WorkflowPlan::for_workflow(config.structure.workflow);
    let mut run = Run {
        exec,
        query,
        config,
        cap: plan.call_bounds().max,
        calls: 0,
        tokens: 0,
        used: ToolSet::EMPTY,
        transcript: Vec::new(),
        tool_notes: Vec::new(),
    };
    let answer = run.execute(&plan)?;
    let correct = query
        .gold_answer
        .as_deref()
        .is_some_and(|g| normalize_answer(extract_answer(&answer)) == normalize_answer(g));
    Ok(ExecutionOutcome {
        answer_text: answer,
        correct,
        n_steps: run.calls,
        n_tokens: run.tokens,
        n_tools_used: run.used.len() as u32,
        n_tools_allocated: config.structure.n_tools_allocated(),
    })
}

/// Reads queries from JSONL rows `{"id", "text", "gold_answer"}`.
pub fn load_queries(path: &Path) -> Result<Vec<Query>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Persist {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealTask {
    pub query: Query,
}

/// Real-mode environment over a fixed query set. Backend and parse failures
/// become failed episodes instead of errors.
pub struct RealEnv {
    pub endpoint: BackendEndpoint,
    pub transport: Box<dyn ChatTransport>,
    pub tools: ToolBox,
    pub registry: ToolRegistry,
    pub atoms: AtomLibrary,
    pub queries: Vec<Query>,
    pub keywords: FeatureKeywords,
    pub sleep: fn(Duration),
}

impl RealEnv {
    pub fn new(endpoint: BackendEndpoint, transport: Box<dyn ChatTransport>, atoms: AtomLibrary, queries: Vec<Query>) -> Result<Self> {
        endpoint.validate()?;
        if queries.is_empty() {
            return Err(Error::Contract("real mode needs at least one query".into()));
        }
        Ok(Self {
            endpoint,
            transport,
            tools: ToolBox::default(),
            registry: ToolRegistry::default(),
            atoms,
            queries,
            keywords: FeatureKeywords::default(),
            sleep: std::thread::sleep,
        })
    }

    pub fn state_dim(&self) -> usize {
        EMBED_DIM + 5
    }
}

impl EnvContract for RealEnv {
    type Task = RealTask;

    fn draw_task(&self, seed: u64) -> Result<RealTask> {
        use rand::Rng;
        let i = rng_from_seed(seed).random_range(0..self.queries.len());
        Ok(RealTask {
            query: self.queries[i].clone(),
        })
    }

    fn query<'a>(&self, task: &'a RealTask) -> &'a Query {
        &task.query
    }

    fn embed(&self, task: &RealTask) -> StateEmbedding {
        let text = &task.query.text;
        StateEmbedding::new(hash_embed_dim(text, EMBED_DIM), &extract_features_with(text, &self.keywords))
    }

    fn execute(&self, task: &RealTask, config: &Configuration, _seed: u64) -> Result<ExecutionOutcome> {
        let sleep = self.sleep;
        let sleep = move |d: Duration| sleep(d);
        let exec = RealExecutor {
            endpoint: &self.endpoint,
            transport: self.transport.as_ref(),
            tools: &self.tools,
            registry: &self.registry,
            atoms: &self.atoms,
            sleep: &sleep,
        };
        match execute_real(&task.query, config, &exec) {
            Err(e @ (Error::Backend(_) | Error::Parse(_))) => Ok(ExecutionOutcome {
                answer_text: format!("failed: {e}"),
                n_tools_allocated: config.structure.n_tools_allocated(),
                ..ExecutionOutcome::default()
            }),
            other => other,
        }
    }

    fn maxima(&self) -> EnvMaxima {
        let steps = Workflow::ALL.iter().map(|w| w.llm_calls().max).max().unwrap_or(1);
        EnvMaxima {
            // Usage counts prompt tokens too; bound each call by twice its
            // largest completion budget.
            steps,
            tokens: u64::from(steps) * 2 * crate::domain::BudgetTier::High.tokens(),
            tools_used: crate::domain::N_TOOLS as u32,
            tools_allocated: 2 * crate::domain::N_TOOLS as u32,
        }
    }

    fn atoms(&self) -> &AtomLibrary {
        &self.atoms
    }
}
