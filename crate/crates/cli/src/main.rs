use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use agentconf::analysis::{categorize_error, pareto_frontier, summarize, DiversityReport, ErrorKeywords, ParetoPoint};
use agentconf::policy::{enumerate_valid, HierarchicalPolicy};
use agentconf::runtime::{
    evaluate, load_buffer, load_config, load_queries, persist_buffer, run_search, run_training, write_json,
    write_jsonl, Mode, RunConfig, RunEnv, SearchMethod,
};
use agentconf::train::collect_episodes;
use agentconf::seeds::{derive_seed, stream};
use agentconf::{EpisodeRecord, Workflow};

#[derive(Parser)]
#[command(name = "agentconf", version, about = "Learn per-query agentic configurations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the configured mode.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Synthetic,
    Real,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Grid,
    Greedy,
    Bandit,
    FlatEpisode,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy, evaluate it, and write artifacts to the output directory.
    Train(RunArgs),
    /// Evaluate a saved policy on held-out tasks.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Directory holding the policy's `.bin` files.
        #[arg(long)]
        policy: PathBuf,
    },
    /// Run a baseline and evaluate its result.
    Search {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        method: MethodArg,
    },
    /// Roll out episodes from a fresh or saved policy without training.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Diversity, frontier and error taxonomy over episode logs.
    Analyze {
        /// Episode JSONL files; each becomes one frontier point.
        #[arg(required = true)]
        episodes: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.002)]
        price_per_1k: f64,
        /// Queries aligned line by line with the first episode file; enables
        /// the error histogram.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        frontier_csv: Option<PathBuf>,
        /// Report path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Count valid structure actions under the configured masks.
    EnumerateMasks {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => load_config(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.output_dir = o.clone();
    }
    if let Some(m) = args.mode {
        cfg.mode = match m {
            ModeArg::Synthetic => Mode::Synthetic,
            ModeArg::Real => Mode::Real,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(value)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

#[derive(Serialize)]
struct AnalysisReport {
    episodes: usize,
    diversity: DiversityReport,
    points: Vec<ParetoPoint>,
    frontier: Vec<ParetoPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    errors: Option<ErrorHistogram>,
}

#[derive(Serialize, Default)]
struct ErrorHistogram {
    categorized: usize,
    skipped_without_gold: usize,
    by_category: BTreeMap<String, usize>,
    by_subtype: BTreeMap<String, usize>,
}

fn label<T: Serialize>(v: &T) -> Result<String> {
    Ok(match serde_json::to_value(v)? {
        serde_json::Value::String(s) => s,
        other => other.to_string(),
    })
}

fn analyze(files: &[PathBuf], price: f64, queries: Option<&Path>) -> Result<AnalysisReport> {
    let mut all: Vec<EpisodeRecord> = Vec::new();
    let mut points = Vec::new();
    let mut first: Vec<EpisodeRecord> = Vec::new();
    for (i, f) in files.iter().enumerate() {
        let buf = load_buffer(f).with_context(|| format!("reading {}", f.display()))?;
        let records = buf.records().to_vec();
        points.push(summarize(&f.display().to_string(), &records, price));
        if i == 0 {
            first = records.clone();
        }
        all.extend(records);
    }
    if all.is_empty() {
        bail!("no episodes in the given files");
    }
    let errors = match queries {
        None => None,
        Some(q) => {
            let qs = load_queries(q)?;
            if qs.len() != first.len() {
                bail!("{} queries but {} episodes in {}", qs.len(), first.len(), files[0].display());
            }
            let kw = ErrorKeywords::default();
            let mut h = ErrorHistogram::default();
            for (r, q) in first.iter().zip(&qs) {
                if r.outcome.correct {
                    continue;
                }
                let Some(gold) = &q.gold_answer else {
                    h.skipped_without_gold += 1;
                    continue;
                };
                let l = categorize_error(r, &q.text, gold, &kw)?;
                h.categorized += 1;
                *h.by_category.entry(label(&l.category)?).or_default() += 1;
                *h.by_subtype.entry(label(&l.subtype)?).or_default() += 1;
            }
            Some(h)
        }
    };
    Ok(AnalysisReport {
        episodes: all.len(),
        diversity: DiversityReport::from_records(&all)?,
        frontier: pareto_frontier(&points),
        points,
        errors,
    })
}

fn frontier_csv(points: &[ParetoPoint]) -> String {
    let mut s = String::from("label,cost,accuracy\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.label.replace(',', ";"), p.cost, p.accuracy);
    }
    s
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => {
            let cfg = resolve(&args)?;
            let run = RunEnv::build(&cfg, None)?;
            let report = run_training(&cfg, &run)?;
            eprintln!("artifacts written to {}", cfg.output_dir.display());
            print_json(&report)?;
        }
        Command::Eval { run: args, policy } => {
            let cfg = resolve(&args)?;
            let run = RunEnv::build(&cfg, None)?;
            let p = HierarchicalPolicy::load(&policy, run.table().clone(), run.atoms().clone())
                .with_context(|| format!("loading policy from {}", policy.display()))?;
            let (report, records) = evaluate(&run, &cfg, &p)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            write_jsonl(&cfg.output_dir.join("eval_episodes.jsonl"), &records)?;
            write_json(&cfg.output_dir.join("eval_report.json"), &report)?;
            print_json(&report)?;
        }
        Command::Search { run: args, method } => {
            let cfg = resolve(&args)?;
            let run = RunEnv::build(&cfg, None)?;
            let method = match method {
                MethodArg::Grid => SearchMethod::Grid,
                MethodArg::Greedy => SearchMethod::Greedy,
                MethodArg::Bandit => SearchMethod::Bandit,
                MethodArg::FlatEpisode => SearchMethod::FlatEpisode,
            };
            let report = run_search(&cfg, &run, method)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            write_json(&cfg.output_dir.join("search_report.json"), &report)?;
            print_json(&report.evaluation)?;
        }
        Command::Simulate { run: args, episodes, policy } => {
            if episodes == 0 {
                bail!("--episodes must be >= 1");
            }
            let cfg = resolve(&args)?;
            let run = RunEnv::build(&cfg, None)?;
            let p = match &policy {
                Some(dir) => HierarchicalPolicy::load(dir, run.table().clone(), run.atoms().clone())?,
                None => run.init_policy(&cfg)?,
            };
            let seed = derive_seed(cfg.seed, stream::EVAL, u64::MAX);
            let buffer = match &run {
                RunEnv::Synthetic(s) => collect_episodes(&p, &s.env, &cfg.reward, seed, episodes)?,
                RunEnv::Real { env, .. } => collect_episodes(&p, env, &cfg.reward, seed, episodes)?,
            };
            std::fs::create_dir_all(&cfg.output_dir)?;
            let path = cfg.output_dir.join("episodes.jsonl");
            persist_buffer(&buffer, &path)?;
            print_json(&DiversityReport::from_records(buffer.iter())?)?;
            eprintln!("{} episodes written to {}", buffer.len(), path.display());
        }
        Command::Analyze {
            episodes,
            price_per_1k,
            queries,
            frontier_csv: csv,
            out,
        } => {
            let report = analyze(&episodes, price_per_1k, queries.as_deref())?;
            if let Some(p) = csv {
                std::fs::write(p, frontier_csv(&report.frontier))?;
            }
            match out {
                Some(p) => write_json(&p, &report)?,
                None => print_json(&report)?,
            }
        }
        Command::EnumerateMasks { config } => {
            let cfg = match &config {
                Some(p) => load_config(p)?,
                None => RunConfig::default(),
            };
            let table = cfg.suite()?.table;
            let per: BTreeMap<&str, usize> = Workflow::ALL
                .iter()
                .map(|&w| (w.name(), if table.workflows[w.id()] { table.row(w).count() } else { 0 }))
                .collect();
            print_json(&serde_json::json!({
                "per_workflow": per,
                "total": enumerate_valid(&table),
            }))?;
        }
    }
    Ok(())
}
