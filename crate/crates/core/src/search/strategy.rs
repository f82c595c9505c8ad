//! Configuration search over Ω, generic over the per-configuration objective
//! so the same code runs against real adaptation and against mock functions.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dab::Configuration;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

const RANDOM_STREAM: u64 = 0x5241_4E44;
const TPE_STREAM: u64 = 0x0054_5045;

/// Result of evaluating one configuration with fresh adaptors.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Best-step `ε_y`; non-finite values are treated as "no valid step".
    pub eps: f64,
    /// Adaptation steps (each one forward) spent.
    pub steps: usize,
}

pub trait Objective {
    /// Number of intermediate levels `k`.
    fn levels(&self) -> usize;
    fn evaluate(&mut self, omega: Configuration) -> Result<Evaluation>;
}

/// Deterministic objective backed by a closure, `steps` counted per call.
pub struct FnObjective<F> {
    pub levels: usize,
    pub steps: usize,
    pub f: F,
}

impl<F: FnMut(Configuration) -> f64> Objective for FnObjective<F> {
    fn levels(&self) -> usize {
        self.levels
    }

    fn evaluate(&mut self, omega: Configuration) -> Result<Evaluation> {
        Ok(Evaluation { eps: (self.f)(omega), steps: self.steps })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchBudget {
    pub configs_evaluated: usize,
    pub adapt_steps_total: usize,
    pub forwards_total: usize,
}

impl SearchBudget {
    pub fn is_zero(&self) -> bool {
        *self == SearchBudget::default()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub omega_star: Option<Configuration>,
    pub eps_best: f64,
    pub budget: SearchBudget,
    /// Every evaluation in order.
    pub history: Vec<(Configuration, f64)>,
}

/// Tracks budget and the running best (strict `<`, earliest wins ties).
struct Searcher<'a, O: ?Sized> {
    objective: &'a mut O,
    budget: SearchBudget,
    history: Vec<(Configuration, f64)>,
    best: Option<(Configuration, f64)>,
}

impl<'a, O: Objective + ?Sized> Searcher<'a, O> {
    fn new(objective: &'a mut O) -> Self {
        Searcher { objective, budget: SearchBudget::default(), history: Vec::new(), best: None }
    }

    fn best_eps(&self) -> f64 {
        self.best.map_or(f64::INFINITY, |b| b.1)
    }

    /// Evaluates `omega`; returns its error and whether it became the new best.
    fn eval(&mut self, omega: Configuration) -> Result<(f64, bool)> {
        let e = self.objective.evaluate(omega)?;
        let eps = if e.eps.is_finite() { e.eps } else { f64::INFINITY };
        self.budget.configs_evaluated += 1;
        self.budget.adapt_steps_total += e.steps;
        self.budget.forwards_total += e.steps;
        self.history.push((omega, eps));
        let improved = eps < self.best_eps();
        if improved {
            self.best = Some((omega, eps));
        }
        Ok((eps, improved))
    }

    fn finish(self) -> SearchResult {
        SearchResult {
            omega_star: self.best.map(|b| b.0),
            eps_best: self.best_eps(),
            budget: self.budget,
            history: self.history,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpeConfig {
    pub n_trials: usize,
    pub n_start: usize,
    /// Fraction of the history treated as "good".
    pub gamma: f64,
    pub candidates: usize,
}

impl Default for TpeConfig {
    fn default() -> Self {
        TpeConfig { n_trials: 20, n_start: 5, gamma: 0.25, candidates: 24 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Strategy {
    Grid,
    Random { n_config: usize },
    ForwardSelection,
    /// The literal round structure: cumulative candidate, stop at first non-improvement.
    ForwardSelectionLiteral,
    BackwardElimination,
    Tpe(TpeConfig),
    /// Every adaptor on, no gating, no search; the last step's output is kept.
    StaticAll,
}

impl Strategy {
    pub fn name(&self) -> String {
        match self {
            Strategy::Grid => "grid".into(),
            Strategy::Random { n_config } => format!("rand{n_config}"),
            Strategy::ForwardSelection => "fs".into(),
            Strategy::ForwardSelectionLiteral => "fs-literal".into(),
            Strategy::BackwardElimination => "be".into(),
            Strategy::Tpe(_) => "tpe".into(),
            Strategy::StaticAll => "static-all".into(),
        }
    }

    /// Whether results depend on the search seed.
    pub fn is_randomized(&self) -> bool {
        matches!(self, Strategy::Random { .. } | Strategy::Tpe(_))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "grid" => Strategy::Grid,
            "fs" => Strategy::ForwardSelection,
            "fs-literal" => Strategy::ForwardSelectionLiteral,
            "be" => Strategy::BackwardElimination,
            "tpe" => Strategy::Tpe(TpeConfig::default()),
            "static-all" => Strategy::StaticAll,
            _ => match s.strip_prefix("rand").and_then(|n| n.parse::<usize>().ok()) {
                Some(n) if n > 0 => Strategy::Random { n_config: n },
                _ => return Err(Error::UnknownStrategy(s.to_string())),
            },
        })
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.name()
    }
}

impl TryFrom<String> for Strategy {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Runs `strategy` against `objective`. `StaticAll` evaluates the full set once.
pub fn search<O: Objective + ?Sized>(objective: &mut O, strategy: Strategy, seed: u64) -> Result<SearchResult> {
    match strategy {
        Strategy::Grid => grid_search(objective),
        Strategy::Random { n_config } => random_search(objective, n_config, seed),
        Strategy::ForwardSelection => forward_selection(objective),
        Strategy::ForwardSelectionLiteral => forward_selection_literal(objective),
        Strategy::BackwardElimination => backward_elimination(objective),
        Strategy::Tpe(cfg) => bayesian_search(objective, &cfg, seed),
        Strategy::StaticAll => {
            let k = objective.levels();
            let mut s = Searcher::new(objective);
            s.eval(Configuration::full(k))?;
            Ok(s.finish())
        }
    }
}

fn check_levels(k: usize) -> Result<()> {
    if k == 0 || k > Configuration::MAX_LEVELS {
        return Err(Error::InvalidArgument(format!("search needs 1..={} levels, got {k}", Configuration::MAX_LEVELS)));
    }
    Ok(())
}

pub fn grid_search<O: Objective + ?Sized>(objective: &mut O) -> Result<SearchResult> {
    let k = objective.levels();
    check_levels(k)?;
    let mut s = Searcher::new(objective);
    for omega in Configuration::enumerate(k) {
        s.eval(omega)?;
    }
    Ok(s.finish())
}

/// `min(n, |Ω|)` distinct configurations drawn uniformly, in canonical order.
pub fn sample_configurations(k: usize, n: usize, seed: u64) -> Vec<Configuration> {
    let all = Configuration::enumerate(k);
    let m = n.min(all.len());
    let mut rng = stream_rng(seed, RANDOM_STREAM);
    let mut picked = sample(&mut rng, all.len(), m).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i]).collect()
}

pub fn random_search<O: Objective + ?Sized>(objective: &mut O, n_config: usize, seed: u64) -> Result<SearchResult> {
    let k = objective.levels();
    check_levels(k)?;
    if n_config == 0 {
        return Err(Error::InvalidArgument("random search needs N_config ≥ 1".into()));
    }
    let mut s = Searcher::new(objective);
    for omega in sample_configurations(k, n_config, seed) {
        s.eval(omega)?;
    }
    Ok(s.finish())
}

/// Greedy growth: each round tries adding every unselected level and adopts
/// the best strictly improving one.
pub fn forward_selection<O: Objective + ?Sized>(objective: &mut O) -> Result<SearchResult> {
    let k = objective.levels();
    check_levels(k)?;
    let mut s = Searcher::new(objective);
    let mut selected: Option<Configuration> = None;
    loop {
        let candidates: Vec<Configuration> = (1..=k)
            .filter(|&r| !selected.is_some_and(|sel| sel.contains(r)))
            .map(|r| selected.map_or_else(|| Configuration::from_levels(&[r], k), |sel| Ok(sel.with(r))))
            .collect::<Result<_>>()?;
        if candidates.is_empty() {
            break;
        }
        let mut adopted = None;
        for omega in candidates {
            if s.eval(omega)?.1 {
                adopted = Some(omega);
            }
        }
        match adopted {
            Some(omega) => selected = Some(omega),
            None => break,
        }
    }
    Ok(s.finish())
}

/// Round structure exactly as written in the pseudocode: each round rebuilds
/// a cumulative candidate from the unselected levels and aborts the whole
/// search at the first candidate that does not improve.
pub fn forward_selection_literal<O: Objective + ?Sized>(objective: &mut O) -> Result<SearchResult> {
    let k = objective.levels();
    check_levels(k)?;
    let mut s = Searcher::new(objective);
    let mut selected: Vec<usize> = Vec::new();
    'rounds: while selected.len() < k {
        let unselected: Vec<usize> = (1..=k).filter(|r| !selected.contains(r)).collect();
        let mut omega: Vec<usize> = Vec::new();
        for r in unselected {
            omega.push(r);
            let config = Configuration::from_levels(&omega, k)?;
            if s.eval(config)?.1 {
                selected.push(r);
            } else {
                break 'rounds;
            }
        }
    }
    Ok(s.finish())
}

/// Greedy shrink from the full set; stops when no single removal improves or
/// one level remains.
pub fn backward_elimination<O: Objective + ?Sized>(objective: &mut O) -> Result<SearchResult> {
    let k = objective.levels();
    check_levels(k)?;
    let mut s = Searcher::new(objective);
    let mut current = Configuration::full(k);
    s.eval(current)?;
    while current.len() > 1 {
        let mut adopted = None;
        for r in current.levels() {
            let omega = current.without(r).expect("more than one level");
            if s.eval(omega)?.1 {
                adopted = Some(omega);
            }
        }
        match adopted {
            Some(omega) => current = omega,
            None => break,
        }
    }
    Ok(s.finish())
}

/// TPE over `k` independent inclusion bits. The first `n_start` trials are the
/// random-search sample; later trials draw candidates from the good-set
/// Bernoulli density and keep the best good/bad likelihood ratio.
pub fn bayesian_search<O: Objective + ?Sized>(objective: &mut O, cfg: &TpeConfig, seed: u64) -> Result<SearchResult> {
    let k = objective.levels();
    check_levels(k)?;
    if cfg.n_start == 0 || cfg.n_start > cfg.n_trials {
        return Err(Error::InvalidArgument(format!(
            "need 1 ≤ n_start ({}) ≤ n_trials ({})",
            cfg.n_start, cfg.n_trials
        )));
    }
    if !(cfg.gamma > 0.0 && cfg.gamma < 1.0) || cfg.candidates == 0 {
        return Err(Error::InvalidArgument("gamma must be in (0,1) and candidates ≥ 1".into()));
    }
    let space = Configuration::enumerate(k);
    let mut s = Searcher::new(objective);
    let mut seen = HashSet::new();
    for omega in sample_configurations(k, cfg.n_start, seed) {
        seen.insert(omega);
        s.eval(omega)?;
    }
    let mut rng = stream_rng(seed, TPE_STREAM);
    for _ in cfg.n_start..cfg.n_trials {
        if seen.len() == space.len() {
            break;
        }
        let (good, bad) = bit_densities(&s.history, k, cfg.gamma);
        let mut pick: Option<(Configuration, f64)> = None;
        for _ in 0..cfg.candidates {
            let mask = (0..k).fold(0u32, |m, b| if rng.random::<f64>() < good[b] { m | 1 << b } else { m });
            let Ok(omega) = Configuration::from_mask(mask, k) else { continue };
            if seen.contains(&omega) {
                continue;
            }
            let score = log_likelihood(omega, &good) - log_likelihood(omega, &bad);
            if pick.is_none_or(|(_, best)| score > best) {
                pick = Some((omega, score));
            }
        }
        let omega = match pick {
            Some((omega, _)) => omega,
            None => {
                let unseen: Vec<Configuration> = space.iter().copied().filter(|c| !seen.contains(c)).collect();
                unseen[rng.random_range(0..unseen.len())]
            }
        };
        seen.insert(omega);
        s.eval(omega)?;
    }
    Ok(s.finish())
}

/// Add-one smoothed inclusion probabilities per bit for the good and bad splits.
fn bit_densities(history: &[(Configuration, f64)], k: usize, gamma: f64) -> (Vec<f64>, Vec<f64>) {
    let mut order: Vec<usize> = (0..history.len()).collect();
    order.sort_by(|&a, &b| history[a].1.total_cmp(&history[b].1));
    let n_good = ((gamma * history.len() as f64).ceil() as usize).clamp(1, history.len());
    let density = |idx: &[usize]| -> Vec<f64> {
        (0..k)
            .map(|b| {
                let hits = idx.iter().filter(|&&i| history[i].0.contains(b + 1)).count();
                (hits as f64 + 1.0) / (idx.len() as f64 + 2.0)
            })
            .collect()
    };
    (density(&order[..n_good]), density(&order[n_good..]))
}

fn log_likelihood(omega: Configuration, p: &[f64]) -> f64 {
    p.iter()
        .enumerate()
        .map(|(b, &pb)| if omega.contains(b + 1) { pb.ln() } else { (1.0 - pb).ln() })
        .sum()
}
