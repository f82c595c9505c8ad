use serde::{Deserialize, Serialize};

use crate::dab::{adapt_steps, AdaptConfig, AdaptorSet, Configuration, StepTrace};
use crate::error::Result;
use crate::net::TaskModel;
use crate::recon::ReconSuite;
use crate::rng::mix;
use crate::tensor::Tensor;

use super::strategy::{search, Evaluation, Objective, SearchBudget, Strategy};
use super::threshold::trigger;

/// Real adaptation as a search objective: each call starts from fresh
/// adaptors seeded by `(seed, ω)` and runs `M` steps.
pub struct AdaptObjective<'a> {
    task: &'a TaskModel,
    suite: &'a ReconSuite,
    x: &'a Tensor,
    config: AdaptConfig,
    seed: u64,
    best: Option<(f64, Tensor)>,
    last_output: Option<Tensor>,
    pub traces: Vec<StepTrace>,
}

impl<'a> AdaptObjective<'a> {
    pub fn new(task: &'a TaskModel, suite: &'a ReconSuite, x: &'a Tensor, config: AdaptConfig, seed: u64) -> Self {
        AdaptObjective { task, suite, x, config, seed, best: None, last_output: None, traces: Vec::new() }
    }
}

impl Objective for AdaptObjective<'_> {
    fn levels(&self) -> usize {
        self.task.levels()
    }

    fn evaluate(&mut self, omega: Configuration) -> Result<Evaluation> {
        let mut adaptors = AdaptorSet::init(self.task, mix(self.seed, omega.mask() as u64))?;
        let mut trace = adapt_steps(self.task, self.suite, &mut adaptors, omega, self.x, &self.config)?;
        let steps = trace.steps.len() + usize::from(trace.failure.is_some());
        let eps = trace.best_eps_y;
        if let Some(out) = trace.best_output.take() {
            if eps < self.best.as_ref().map_or(f64::INFINITY, |b| b.0) {
                self.best = Some((eps, out));
            }
        }
        self.last_output = trace.last_output.take();
        self.traces.push(trace);
        Ok(Evaluation { eps, steps })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SearchOutcome {
    pub triggered: bool,
    pub omega_star: Option<Configuration>,
    /// `ε_y` of the unadapted forward pass.
    pub eps_unadapted: f64,
    /// `ε_y` of the reported output.
    pub eps_best: f64,
    pub budget: SearchBudget,
    #[serde(skip)]
    pub output: Tensor,
    #[serde(skip)]
    pub traces: Vec<StepTrace>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub strategy: Strategy,
    pub tau: f64,
    pub adapt: AdaptConfig,
    pub seed: u64,
}

/// Gate, search and adapt one sample. Untriggered samples get the unadapted
/// output untouched; triggered samples never report an output whose `ε_y` is
/// above the unadapted one. `StaticAll` skips the gate and keeps the last step.
pub fn run_sample(task: &TaskModel, suite: &ReconSuite, x: &Tensor, cfg: &SampleConfig) -> Result<SearchOutcome> {
    let plain = task.translate(x)?;
    let eps_unadapted = suite.shift_errors(&plain, x)?.eps_y;
    let unadapted = plain.output().clone();
    let untouched = |triggered| SearchOutcome {
        triggered,
        omega_star: None,
        eps_unadapted,
        eps_best: eps_unadapted,
        budget: SearchBudget::default(),
        output: unadapted.clone(),
        traces: Vec::new(),
    };

    if cfg.strategy == Strategy::StaticAll {
        let mut objective = AdaptObjective::new(task, suite, x, cfg.adapt, cfg.seed);
        let result = search(&mut objective, Strategy::StaticAll, cfg.seed)?;
        let trace = &objective.traces[0];
        let Some(output) = objective.last_output.take() else {
            return Ok(SearchOutcome { budget: result.budget, traces: objective.traces, ..untouched(true) });
        };
        let eps_last = trace.steps.last().map_or(eps_unadapted, |s| s.eps_y);
        return Ok(SearchOutcome {
            triggered: true,
            omega_star: result.omega_star,
            eps_unadapted,
            eps_best: eps_last,
            budget: result.budget,
            output,
            traces: objective.traces,
        });
    }

    if !trigger(eps_unadapted, cfg.tau) {
        return Ok(untouched(false));
    }
    let mut objective = AdaptObjective::new(task, suite, x, cfg.adapt, cfg.seed);
    let result = search(&mut objective, cfg.strategy, cfg.seed)?;
    let traces = std::mem::take(&mut objective.traces);
    match (result.omega_star, objective.best.take()) {
        (Some(omega), Some((eps, output))) if eps <= eps_unadapted => Ok(SearchOutcome {
            triggered: true,
            omega_star: Some(omega),
            eps_unadapted,
            eps_best: eps,
            budget: result.budget,
            output,
            traces,
        }),
        _ => Ok(SearchOutcome { budget: result.budget, traces, ..untouched(true) }),
    }
}
