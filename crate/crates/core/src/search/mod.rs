//! Trigger, threshold calibration and per-sample configuration search.

mod sample;
mod strategy;
mod threshold;

pub use sample::{run_sample, AdaptObjective, SampleConfig, SearchOutcome};
pub use strategy::{
    backward_elimination, bayesian_search, forward_selection, forward_selection_literal, grid_search,
    random_search, sample_configurations, search, Evaluation, FnObjective, Objective, SearchBudget, SearchResult,
    Strategy, TpeConfig,
};
pub use threshold::{calibrate_threshold, trigger};
