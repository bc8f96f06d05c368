//! End-to-end runs driven by a [`RunConfig`]: training, evaluation and
//! baseline search, with their on-disk artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::backend::{ChatTransport, HttpTransport};
use super::config::{Mode, RunConfig, SuiteKind};
use super::persist::persist_buffer;
use super::plans::{load_queries, RealEnv, RealTask};
use crate::analysis::{pareto_frontier, summarize, DiversityReport, ParetoPoint};
use crate::baselines::{
    bandit_policy_train, default_grid, flat_episode_policy_train, greedy_search, grid_search, Dimension,
    FlatDiagnostics, SampledEvaluator, SearchStep,
};
use crate::domain::{AtomLibrary, Configuration, EpisodeRecord, ExperienceBuffer, N_WORKFLOWS, Workflow};
use crate::env::{EnvContract, Suite};
use crate::error::{Error, Result};
use crate::features::StateEmbedding;
use crate::policy::{ConfigPolicy, HierarchicalPolicy, MaskTable};
use crate::reward::{shaped_reward, RewardConfig};
use crate::seeds::{derive_seed, rng_from_seed, stream};
use crate::train::{evaluate_greedy, evaluation_tasks, oracle_utility, train, RefinementOutcome, UpdateDiagnostics};

/// The environment a run executes against.
pub enum RunEnv {
    Synthetic(Suite),
    Real { env: RealEnv, table: MaskTable },
}

impl RunEnv {
    /// Builds the run's environment. Real mode uses `transport` when given,
    /// otherwise HTTP to the configured backend.
    pub fn build(cfg: &RunConfig, transport: Option<Box<dyn ChatTransport>>) -> Result<Self> {
        let suite = cfg.suite()?;
        match cfg.mode {
            Mode::Synthetic => Ok(RunEnv::Synthetic(suite)),
            Mode::Real => {
                let path = cfg
                    .real
                    .queries
                    .as_deref()
                    .ok_or_else(|| Error::config("real.queries", "required in real mode"))?;
                let transport = match transport {
                    Some(t) => t,
                    None => Box::new(HttpTransport::new(cfg.backend.clone())?),
                };
                let env = RealEnv::new(cfg.backend.clone(), transport, suite.env.atoms, load_queries(path)?)?;
                Ok(RunEnv::Real { env, table: suite.table })
            }
        }
    }

    pub fn table(&self) -> &MaskTable {
        match self {
            RunEnv::Synthetic(s) => &s.table,
            RunEnv::Real { table, .. } => table,
        }
    }

    pub fn atoms(&self) -> &AtomLibrary {
        match self {
            RunEnv::Synthetic(s) => &s.env.atoms,
            RunEnv::Real { env, .. } => &env.atoms,
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            RunEnv::Synthetic(s) => s.env.state_dim(),
            RunEnv::Real { env, .. } => env.state_dim(),
        }
    }

    /// Fresh policy from the run's initialization stream.
    pub fn init_policy(&self, cfg: &RunConfig) -> Result<HierarchicalPolicy> {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, stream::INIT, 0));
        HierarchicalPolicy::new(self.state_dim(), &cfg.policy, self.table().clone(), self.atoms().clone(), &mut rng)
    }
}

/// Always answers with the same configuration.
pub struct FixedPolicy(pub Configuration);

impl ConfigPolicy for FixedPolicy {
    fn act(&self, _: &StateEmbedding, _: &mut dyn rand::RngCore) -> Result<Configuration> {
        Ok(self.0.clone())
    }

    fn greedy(&self, _: &StateEmbedding) -> Result<Configuration> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub accuracy: f64,
    pub mean_reward: f64,
    pub mean_tokens: f64,
    pub mean_cost: f64,
    /// Mean exact expected reward of the greedy configurations (synthetic).
    pub expected_utility: Option<f64>,
    /// Mean best expected reward over the whole space (reduced suite).
    pub oracle_utility: Option<f64>,
    pub diversity: DiversityReport,
    /// Non-dominated per-workflow (cost, accuracy) points.
    pub frontier: Vec<ParetoPoint>,
}

/// Per-workflow summaries of `records` and their frontier.
pub fn workflow_frontier(records: &[EpisodeRecord], price_per_1k: f64) -> Vec<ParetoPoint> {
    let points: Vec<ParetoPoint> = Workflow::ALL
        .iter()
        .filter_map(|w| {
            let rs: Vec<EpisodeRecord> = records.iter().filter(|r| r.structure.workflow == *w).cloned().collect();
            (!rs.is_empty()).then(|| summarize(&w.to_string(), &rs, price_per_1k))
        })
        .collect();
    pareto_frontier(&points)
}

fn greedy_episodes<E: EnvContract>(
    env: &E,
    policy: &dyn ConfigPolicy,
    tasks: &[E::Task],
    reward: &RewardConfig,
    run_seed: u64,
) -> Result<Vec<EpisodeRecord>> {
    tasks
        .iter()
        .enumerate()
        .map(|(i, task)| {
            let state = env.embed(task);
            let config = policy.greedy(&state)?;
            let seed = derive_seed(run_seed, stream::EVAL_EXECUTION, i as u64);
            let outcome = env.execute(task, &config, seed)?;
            let (r, breakdown) = shaped_reward(&outcome, reward);
            Ok(EpisodeRecord {
                state,
                structure: config.structure,
                prompts: config.prompts,
                outcome,
                reward: r,
                breakdown,
                seed,
            })
        })
        .collect()
}

fn report(records: &[EpisodeRecord], cfg: &RunConfig) -> Result<EvalReport> {
    let n = records.len().max(1) as f64;
    let point = summarize("all", records, cfg.price_per_1k);
    Ok(EvalReport {
        episodes: records.len(),
        accuracy: point.accuracy,
        mean_reward: records.iter().map(|r| r.reward).sum::<f64>() / n,
        mean_tokens: records.iter().map(|r| r.outcome.n_tokens as f64).sum::<f64>() / n,
        mean_cost: point.cost,
        expected_utility: None,
        oracle_utility: None,
        diversity: DiversityReport::from_records(records)?,
        frontier: workflow_frontier(records, cfg.price_per_1k),
    })
}

/// Greedy evaluation on held-out tasks: synthetic tasks from the evaluation
/// stream, or the real query set in file order. Returns the episodes too.
pub fn evaluate(run: &RunEnv, cfg: &RunConfig, policy: &dyn ConfigPolicy) -> Result<(EvalReport, Vec<EpisodeRecord>)> {
    match run {
        RunEnv::Synthetic(suite) => {
            let tasks = evaluation_tasks(&suite.env, cfg.seed, cfg.env.eval_tasks)?;
            let records = greedy_episodes(&suite.env, policy, &tasks, &cfg.reward, cfg.seed)?;
            let mut rep = report(&records, cfg)?;
            rep.expected_utility = Some(evaluate_greedy(policy, &suite.env, &tasks, &cfg.reward)?);
            if cfg.env.suite == SuiteKind::Reduced {
                let space = suite.configurations();
                rep.oracle_utility = Some(oracle_utility(&suite.env, &tasks, &space, &cfg.reward)?);
            }
            Ok((rep, records))
        }
        RunEnv::Real { env, .. } => {
            let tasks: Vec<RealTask> = env
                .queries
                .iter()
                .take(cfg.env.eval_tasks)
                .map(|q| RealTask { query: q.clone() })
                .collect();
            let records = greedy_episodes(env, policy, &tasks, &cfg.reward, cfg.seed)?;
            Ok((report(&records, cfg)?, records))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: Mode,
    pub seed: u64,
    pub episodes: usize,
    pub batches: usize,
    pub final_batch_reward: f64,
    pub refinement: String,
    pub training_diversity: DiversityReport,
    /// Greedy expected utility of the untrained policy (synthetic).
    pub initial_expected_utility: Option<f64>,
    pub evaluation: EvalReport,
}

fn describe(r: &RefinementOutcome) -> String {
    match r {
        RefinementOutcome::NotRequested => "none".into(),
        RefinementOutcome::Skipped(why) => format!("skipped: {why}"),
        RefinementOutcome::Sft { elite, tau_eff, report } => format!(
            "sft on {elite} elite episodes (threshold {tau_eff:.4}), final loss {:.4}",
            report.epoch_losses.last().copied().unwrap_or(f64::NAN)
        ),
        RefinementOutcome::Dpo(d) => format!(
            "dpo on {} pairs, loss {:.4} -> {:.4}",
            d.pairs,
            d.initial_loss,
            d.epoch_losses.last().copied().unwrap_or(d.initial_loss)
        ),
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Trains, evaluates and writes `policy/*.bin`, `buffer.jsonl`,
/// `diagnostics.jsonl`, `eval_episodes.jsonl`, `report.json` and the
/// resolved `config.toml` into `cfg.output_dir`.
pub fn run_training(cfg: &RunConfig, run: &RunEnv) -> Result<TrainReport> {
    cfg.validate()?;
    let policy = run.init_policy(cfg)?;
    let initial = match run {
        RunEnv::Synthetic(suite) => {
            let tasks = evaluation_tasks(&suite.env, cfg.seed, cfg.env.eval_tasks)?;
            Some(evaluate_greedy(&policy, &suite.env, &tasks, &cfg.reward)?)
        }
        RunEnv::Real { .. } => None,
    };
    let mut no_op = |_: &UpdateDiagnostics| {};
    let out = match run {
        RunEnv::Synthetic(suite) => train(&suite.env, policy, &cfg.train, &cfg.reward, cfg.seed, &mut no_op)?,
        RunEnv::Real { env, .. } => train(env, policy, &cfg.train, &cfg.reward, cfg.seed, &mut no_op)?,
    };
    let (evaluation, eval_records) = evaluate(run, cfg, &out.policy)?;
    let rep = TrainReport {
        mode: cfg.mode,
        seed: cfg.seed,
        episodes: out.buffer.len(),
        batches: out.diagnostics.len(),
        final_batch_reward: out.diagnostics.last().map_or(f64::NAN, |d| d.mean_reward),
        refinement: describe(&out.refinement),
        training_diversity: DiversityReport::from_records(out.buffer.iter())?,
        initial_expected_utility: initial,
        evaluation,
    };
    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    out.policy.save(&dir.join("policy"))?;
    persist_buffer(&out.buffer, &dir.join("buffer.jsonl"))?;
    write_jsonl(&dir.join("diagnostics.jsonl"), &out.diagnostics)?;
    write_jsonl(&dir.join("eval_episodes.jsonl"), &eval_records)?;
    write_json(&dir.join("report.json"), &rep)?;
    std::fs::write(dir.join("config.toml"), super::config::dump_config(cfg)?)?;
    Ok(rep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMethod {
    Grid,
    Greedy,
    Bandit,
    FlatEpisode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub method: SearchMethod,
    /// Fixed configuration found by grid or greedy search.
    pub best: Option<Configuration>,
    /// Search-time utility of `best` (mean sampled reward).
    pub search_utility: Option<f64>,
    pub trace: Vec<SearchStep>,
    pub training: Vec<FlatDiagnostics>,
    pub evaluation: EvalReport,
}

/// Runs one baseline and evaluates its result like a trained policy.
/// Grid and greedy search score configurations on the search stream with
/// `search.episodes_per_evaluation` episodes each; the learned baselines
/// train with the run's PPO settings.
pub fn run_search(cfg: &RunConfig, run: &RunEnv, method: SearchMethod) -> Result<SearchReport> {
    cfg.validate()?;
    let episodes = cfg.search.episodes_per_evaluation;
    let fixed = |eval: &mut dyn crate::baselines::Evaluator| -> Result<crate::baselines::SearchResult> {
        match method {
            SearchMethod::Grid => grid_search(&default_grid(run.table(), run.atoms()), &cfg.search, eval),
            _ => greedy_search(run.table(), run.atoms(), &Dimension::DEFAULT_ORDER, eval),
        }
    };
    let (policy, best, search_utility, trace, training): (Box<dyn ConfigPolicy>, _, _, _, _) = match method {
        SearchMethod::Grid | SearchMethod::Greedy => {
            let result = match run {
                RunEnv::Synthetic(s) => fixed(&mut SampledEvaluator {
                    env: &s.env,
                    reward: &cfg.reward,
                    run_seed: cfg.seed,
                    episodes,
                })?,
                RunEnv::Real { env, .. } => fixed(&mut SampledEvaluator {
                    env,
                    reward: &cfg.reward,
                    run_seed: cfg.seed,
                    episodes,
                })?,
            };
            let best = result.best.clone();
            (Box::new(FixedPolicy(result.best)), Some(best), Some(result.utility), result.trace, Vec::new())
        }
        SearchMethod::Bandit | SearchMethod::FlatEpisode => {
            let (dim, hidden, table) = (run.state_dim(), cfg.policy.hidden.as_slice(), run.table().clone());
            let ppo = &cfg.train.ppo;
            macro_rules! learn {
                ($env:expr) => {
                    if method == SearchMethod::Bandit {
                        let (p, d) = bandit_policy_train($env, dim, hidden, table, ppo, &cfg.reward, cfg.seed)?;
                        (Box::new(p) as Box<dyn ConfigPolicy>, d)
                    } else {
                        let (p, d) = flat_episode_policy_train($env, dim, hidden, table, false, ppo, &cfg.reward, cfg.seed)?;
                        (Box::new(p) as Box<dyn ConfigPolicy>, d)
                    }
                };
            }
            let (p, d) = match run {
                RunEnv::Synthetic(s) => learn!(&s.env),
                RunEnv::Real { env, .. } => learn!(env),
            };
            (p, None, None, Vec::new(), d)
        }
    };
    let (evaluation, _) = evaluate(run, cfg, policy.as_ref())?;
    Ok(SearchReport {
        method,
        best,
        search_utility,
        trace,
        training,
        evaluation,
    })
}

/// Workflow usage counts of a buffer.
pub fn workflow_counts(buffer: &ExperienceBuffer) -> [u64; N_WORKFLOWS] {
    let mut counts = [0; N_WORKFLOWS];
    for r in buffer {
        counts[r.structure.workflow.id()] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{load_buffer, parse_config, MockTransport};

    fn small(out: &tempfile::TempDir) -> RunConfig {
        let mut cfg = parse_config(
            "seed = 3\n[env]\neval_tasks = 20\n[policy]\nhidden = [16]\n[train.ppo]\nbatch_size = 16\ntotal_episodes = 64\n",
        )
        .unwrap();
        cfg.output_dir = out.path().join("run");
        cfg
    }

    #[test]
    fn training_writes_artifacts_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(&dir);
        let run = RunEnv::build(&cfg, None).unwrap();
        let a = run_training(&cfg, &run).unwrap();
        assert_eq!((a.episodes, a.batches), (64, 4));
        for f in ["policy/structure.bin", "buffer.jsonl", "diagnostics.jsonl", "eval_episodes.jsonl", "report.json", "config.toml"] {
            assert!(cfg.output_dir.join(f).is_file(), "{f}");
        }
        assert_eq!(load_buffer(&cfg.output_dir.join("buffer.jsonl")).unwrap().len(), 64);
        let again = RunConfig {
            output_dir: dir.path().join("again"),
            ..cfg.clone()
        };
        assert_eq!(run_training(&again, &run).unwrap(), a);
        let loaded = HierarchicalPolicy::load(&cfg.output_dir.join("policy"), run.table().clone(), run.atoms().clone()).unwrap();
        assert_eq!(evaluate(&run, &cfg, &loaded).unwrap().0, a.evaluation);
        let o = a.evaluation.oracle_utility.unwrap();
        assert!(a.evaluation.expected_utility.unwrap() <= o + 1e-9);
    }

    #[test]
    fn zero_episodes_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(&dir);
        cfg.train.ppo.total_episodes = 0;
        let run = RunEnv::build(&cfg, None).unwrap();
        assert!(run_training(&cfg, &run).is_err());
    }

    #[test]
    fn searches_run_in_both_modes() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(&dir);
        cfg.search.episodes_per_evaluation = 2;
        let run = RunEnv::build(&cfg, None).unwrap();
        let g = run_search(&cfg, &run, SearchMethod::Grid).unwrap();
        assert_eq!(g.trace.len(), g.trace.len().min(cfg.search.max_evaluations));
        assert!(g.best.is_some());
        let b = run_search(&cfg, &run, SearchMethod::Bandit).unwrap();
        assert_eq!(b.training.len(), 4);

        let q = dir.path().join("q.jsonl");
        std::fs::write(&q, "{\"id\":\"a\",\"text\":\"What is 2+2?\",\"gold_answer\":\"4\"}\n").unwrap();
        cfg.mode = Mode::Real;
        cfg.real.queries = Some(q);
        cfg.train.ppo.total_episodes = 4;
        cfg.train.ppo.batch_size = 4;
        let run = RunEnv::build(&cfg, Some(Box::new(MockTransport::constant("Answer: 4", 10)))).unwrap();
        let rep = run_training(&cfg, &run).unwrap();
        assert_eq!(rep.evaluation.episodes, 1);
        assert_eq!(rep.evaluation.accuracy, 1.0);
        assert!(rep.evaluation.expected_utility.is_none());
        let s = run_search(&cfg, &run, SearchMethod::Greedy).unwrap();
        assert!(s.search_utility.is_some());
    }
}
