//! Learns per-query configurations (workflow, tool subsets, token budgets and
//! prompt composition) for an agentic execution system with a two-level
//! masked policy trained by PPO and refined on elite episodes.

pub mod analysis;
pub mod baselines;
pub mod domain;
pub mod env;
pub mod error;
pub mod features;
pub mod numeric;
pub mod policy;
pub mod reward;
pub mod runtime;
pub mod seeds;
pub mod train;

pub use domain::{
    decode_structure_action, index_structure_action, AtomClass, AtomLibrary, BudgetTier,
    Configuration, EpisodeRecord, ExecutionOutcome, ExperienceBuffer, PromptAtom, PromptSequence,
    Query, RewardBreakdown, Role, StructureAction, ToolRegistry, ToolSet, Workflow,
};
pub use error::{Error, Result};
pub use features::{extract_features, QueryFeatures, StateEmbedding};
pub use reward::RewardConfig;
