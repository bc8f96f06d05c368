//! Comparison methods: fixed-configuration search and flat policies that
//! ignore the structure/prompt hierarchy.

mod flat;
mod search;

pub use flat::{
    bandit_policy_train, flat_episode_policy_train, global_masks, train_flat, BanditPolicy,
    FlatDecision, FlatDiagnostics, FlatEpisodePolicy, FlatNets, FlatPolicy, HeadChoice,
};
pub use search::{
    default_grid, greedy_search, grid_search, Dimension, Evaluator, ExpectedEvaluator,
    SampledEvaluator, SearchBudget, SearchResult, SearchStep,
};
