//! Run configuration: one TOML file describes a whole run. Unknown keys are
//! errors and every error names the offending key path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::backend::BackendEndpoint;
use crate::baselines::SearchBudget;
use crate::domain::{AtomLibrary, PromptAtom};
use crate::env::{full_suite, reduced_suite, SpecDistribution, SuccessModel, Suite};
use crate::error::{Error, Result};
use crate::policy::{MaskSpec, PolicyConfig};
use crate::reward::RewardConfig;
use crate::train::TrainSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Synthetic,
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteKind {
    /// Nine workflows, default masks and atom library.
    Full,
    /// Three workflows and four atoms, small enough for exact oracles.
    Reduced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSettings {
    pub suite: SuiteKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distribution: Option<SpecDistribution>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<SuccessModel>,
    /// Held-out tasks used for evaluation reports.
    pub eval_tasks: usize,
}

impl Default for EnvSettings {
    fn default() -> Self {
        Self {
            suite: SuiteKind::Reduced,
            distribution: None,
            model: None,
            eval_tasks: 300,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RealSettings {
    /// JSONL of `{"id", "text", "gold_answer"}` rows.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub queries: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Price per thousand tokens for cost reports.
    pub price_per_1k: f64,
    /// JSON array of prompt atoms replacing the suite's library.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub atoms: Option<PathBuf>,
    pub env: EnvSettings,
    pub reward: RewardConfig,
    pub train: TrainSettings,
    pub policy: PolicyConfig,
    /// Replaces the suite's mask table when present.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskSpec>,
    pub search: SearchBudget,
    pub backend: BackendEndpoint,
    pub real: RealSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Synthetic,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            price_per_1k: 0.002,
            atoms: None,
            env: EnvSettings::default(),
            reward: RewardConfig::default(),
            train: TrainSettings::default(),
            policy: PolicyConfig::default(),
            mask: None,
            search: SearchBudget::default(),
            backend: BackendEndpoint::default(),
            real: RealSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.price_per_1k >= 0.0 && self.price_per_1k.is_finite()) {
            return Err(Error::config("price_per_1k", "must be finite and >= 0"));
        }
        if self.env.eval_tasks == 0 {
            return Err(Error::config("env.eval_tasks", "must be >= 1"));
        }
        if self.policy.hidden.contains(&0) {
            return Err(Error::config("policy.hidden", "layer widths must be >= 1"));
        }
        if let Some(d) = &self.env.distribution {
            d.validate()?;
        }
        self.reward.validate()?;
        self.train.validate()?;
        self.search.validate()?;
        self.backend.validate()?;
        if self.mode == Mode::Real && self.real.queries.is_none() {
            return Err(Error::config("real.queries", "required in real mode"));
        }
        for (key, path) in [("atoms", &self.atoms), ("real.queries", &self.real.queries)] {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(Error::config(key, format!("{} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    /// Makes relative paths relative to `dir`.
    pub fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(p) = &mut self.atoms {
            fix(p);
        }
        if let Some(p) = &mut self.real.queries {
            fix(p);
        }
    }

    /// The environment and mask table the run trains against.
    pub fn suite(&self) -> Result<Suite> {
        let mut suite = match self.env.suite {
            SuiteKind::Full => full_suite(),
            SuiteKind::Reduced => reduced_suite(),
        };
        if let Some(d) = &self.env.distribution {
            suite.env.distribution = d.clone();
        }
        if let Some(m) = &self.env.model {
            suite.env.model = m.clone();
        }
        if let Some(spec) = &self.mask {
            suite.table = spec.build()?;
        }
        if let Some(path) = &self.atoms {
            suite.env.atoms = load_atoms(path)?;
        }
        Ok(suite)
    }
}

/// Reads a JSON array of atoms; ids must be dense `0..len`.
pub fn load_atoms(path: &Path) -> Result<AtomLibrary> {
    let text = std::fs::read_to_string(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let atoms: Vec<PromptAtom> = serde_path_to_error::deserialize(de)
        .map_err(|e| Error::config(format!("atoms{}", bracket_path(&e.path().to_string())), e.inner().to_string()))?;
    AtomLibrary::new(atoms)
}

fn bracket_path(p: &str) -> String {
    if p == "." { String::new() } else { format!(".{p}") }
}

/// Parses a config from TOML text without touching the filesystem.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::config("", e.to_string()))?;
    serde_path_to_error::deserialize(de).map_err(|e| Error::config(e.path().to_string(), e.inner().message()))
}

/// Loads, path-resolves and validates a config file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = parse_config(&text)?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    cfg.validate()?;
    Ok(cfg)
}

pub fn dump_config(cfg: &RunConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| Error::config("", e.to_string()))
}
