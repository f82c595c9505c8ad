//! Dynamic adaptation block: per-sample adaptors, the level selector, and
//! the M-step adaptation loop.
//!
//! The input adaptor is a residual 3×3 conv stack whose last layer starts at
//! zero; each level adaptor is a 1×1 channel map starting at the identity and
//! is applied at depth `i` and again at the mirrored depth `n − i`. A fresh
//! set therefore reproduces the unadapted forward pass exactly.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Conv, ConvVars, FeatureTrace, TaskModel, LEAKY_SLOPE};
use crate::recon::{concat_symmetric, Member, ReconSuite, ShiftErrors};
use crate::rng::stream_rng;
use crate::tensor::{AdamState, Tape, Tensor, Var};

/// Hidden width of the input adaptor.
pub const INPUT_ADAPTOR_WIDTH: usize = 8;

/// A non-empty subset of intermediate levels, stored as a bitmask (bit `i−1` ⇔ level `i`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Configuration(u32);

impl Configuration {
    pub const MAX_LEVELS: usize = 16;

    pub fn from_levels(levels: &[usize], k: usize) -> Result<Self> {
        let mut mask = 0u32;
        for &i in levels {
            if i == 0 || i > k || i > Self::MAX_LEVELS {
                return Err(Error::DepthOutOfRange { depth: i, max: k });
            }
            mask |= 1 << (i - 1);
        }
        if mask == 0 {
            return Err(Error::InvalidArgument("configuration must be non-empty".into()));
        }
        Ok(Configuration(mask))
    }

    pub fn from_mask(mask: u32, k: usize) -> Result<Self> {
        if mask == 0 || (k < 32 && mask >> k != 0) {
            return Err(Error::InvalidArgument(format!("mask {mask:#b} invalid for {k} levels")));
        }
        Ok(Configuration(mask))
    }

    pub fn full(k: usize) -> Self {
        Configuration(((1u64 << k) - 1) as u32)
    }

    pub fn mask(&self) -> u32 {
        self.0
    }

    pub fn contains(&self, level: usize) -> bool {
        level >= 1 && level <= 32 && self.0 & (1 << (level - 1)) != 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    /// Active levels in ascending order.
    pub fn levels(&self) -> Vec<usize> {
        (1..=32).filter(|&i| self.contains(i)).collect()
    }

    pub fn with(&self, level: usize) -> Self {
        Configuration(self.0 | (1 << (level - 1)))
    }

    pub fn without(&self, level: usize) -> Option<Self> {
        let m = self.0 & !(1 << (level - 1));
        (m != 0).then_some(Configuration(m))
    }

    /// Sort key: cardinality first, then the ascending level list lexicographically.
    pub fn canonical_key(&self) -> (usize, Vec<usize>) {
        (self.len(), self.levels())
    }

    /// Every configuration over `k` levels, in canonical order (`2^k − 1` of them).
    pub fn enumerate(k: usize) -> Vec<Configuration> {
        let mut all: Vec<Configuration> = (1..(1u32 << k)).map(Configuration).collect();
        all.sort_by_key(|c| c.canonical_key());
        all
    }
}

impl TryFrom<Vec<usize>> for Configuration {
    type Error = Error;
    fn try_from(levels: Vec<usize>) -> Result<Self> {
        Self::from_levels(&levels, Self::MAX_LEVELS)
    }
}

impl From<Configuration> for Vec<usize> {
    fn from(c: Configuration) -> Self {
        c.levels()
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.levels().iter().map(|i| i.to_string()).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

/// Residual input adaptor `x + conv2(leaky(conv1(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct InputAdaptor {
    pub conv1: Conv,
    pub conv2: Conv,
}

/// 1×1 adaptor for one level. `decoder` is `None` when the mirrored depth has
/// the same channel count and the encoder block is shared.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelAdaptor {
    pub encoder: Conv,
    pub decoder: Option<Conv>,
}

impl LevelAdaptor {
    pub fn identity(encoder_channels: usize, decoder_channels: usize) -> Self {
        LevelAdaptor {
            encoder: Conv::identity_1x1(encoder_channels),
            decoder: (decoder_channels != encoder_channels)
                .then(|| Conv::identity_1x1(decoder_channels)),
        }
    }

    pub fn is_shared(&self) -> bool {
        self.decoder.is_none()
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.decoder.as_ref().map_or(0, Conv::param_count)
    }

    fn convs(&self) -> Vec<&Conv> {
        std::iter::once(&self.encoder).chain(self.decoder.as_ref()).collect()
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv> {
        std::iter::once(&mut self.encoder).chain(self.decoder.as_mut()).collect()
    }
}

/// All test-time trainable parameters for one sample.
#[derive(Clone, Debug)]
pub struct AdaptorSet {
    pub input: InputAdaptor,
    pub levels: Vec<LevelAdaptor>,
    /// Per-level routing flag: adapt (`true`) or identity.
    pub selector: Vec<bool>,
    input_opt: AdamState,
    level_opts: Vec<AdamState>,
}

impl PartialEq for AdaptorSet {
    fn eq(&self, other: &Self) -> bool {
        self.input == other.input && self.levels == other.levels && self.selector == other.selector
    }
}

impl AdaptorSet {
    /// Identity-initialised adaptors for `task`.
    pub fn init(task: &TaskModel, seed: u64) -> Result<Self> {
        let n = task.depth_count();
        let channels = |d: usize| task.feature_shape(d).map(|s| s[0]);
        let pairs = (1..=task.levels())
            .map(|i| Ok((channels(i)?, channels(n - i)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::for_channels(task.config().io_channels, &pairs, seed))
    }

    /// Builds a set from `(encoder, decoder)` channel counts per level.
    pub fn for_channels(io_channels: usize, pairs: &[(usize, usize)], seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0xADA);
        let input = InputAdaptor {
            conv1: Conv::init(INPUT_ADAPTOR_WIDTH, io_channels, 3, &mut rng),
            conv2: Conv::zeros(io_channels, INPUT_ADAPTOR_WIDTH, 3),
        };
        let levels: Vec<LevelAdaptor> = pairs.iter().map(|&(e, d)| LevelAdaptor::identity(e, d)).collect();
        AdaptorSet {
            input,
            selector: vec![false; levels.len()],
            level_opts: vec![AdamState::new(0.0); levels.len()],
            levels,
            input_opt: AdamState::new(0.0),
        }
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn select(&mut self, omega: Configuration) {
        for (i, s) in self.selector.iter_mut().enumerate() {
            *s = omega.contains(i + 1);
        }
    }
}

/// Weights of the adaptation objective `w_x·ε_x + w_l·Σ_{i∈ω} ε_i + w_y·ε_y`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub input: f32,
    pub levels: f32,
    pub output: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { input: 1.0, levels: 1.0, output: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Update steps per configuration (`M`).
    pub steps: usize,
    pub lr: f32,
    pub weights: LossWeights,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig { steps: 5, lr: 1e-3, weights: LossWeights::default() }
    }
}

struct InputVars {
    conv1: ConvVars,
    conv2: ConvVars,
}

struct LevelVars {
    encoder: ConvVars,
    decoder: Option<ConvVars>,
}

struct Pass {
    x_adapted: Var,
    features: Vec<Var>,
    eps_x: Var,
    eps_levels: Vec<(usize, Var)>,
    eps_y: Var,
    loss: Var,
    input_vars: InputVars,
    level_vars: BTreeMap<usize, LevelVars>,
}

fn check_omega(omega: Configuration, k: usize) -> Result<()> {
    if omega.is_empty() {
        return Err(Error::InvalidArgument("configuration must be non-empty".into()));
    }
    if omega.levels().iter().any(|&i| i > k) {
        return Err(Error::DepthOutOfRange { depth: *omega.levels().last().unwrap(), max: k });
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn build_pass(
    tape: &mut Tape,
    task: &TaskModel,
    suite: &ReconSuite,
    adaptors: &AdaptorSet,
    omega: Configuration,
    x: &Tensor,
    weights: LossWeights,
    trainable: bool,
) -> Result<Pass> {
    let n = task.depth_count();
    let k = task.levels();
    check_omega(omega, k)?;
    if adaptors.level_count() != k || suite.level_count() != k {
        return Err(Error::ArchitectureMismatch(format!(
            "task has {k} levels, adaptors {}, suite {}",
            adaptors.level_count(),
            suite.level_count()
        )));
    }
    task.check_input(x)?;

    let task_vars = task.register(tape, false);
    let input_vars = InputVars {
        conv1: adaptors.input.conv1.register(tape, trainable),
        conv2: adaptors.input.conv2.register(tape, trainable),
    };
    let mut level_vars = BTreeMap::new();
    for i in omega.levels() {
        let a = &adaptors.levels[i - 1];
        level_vars.insert(
            i,
            LevelVars {
                encoder: a.encoder.register(tape, trainable),
                decoder: a.decoder.as_ref().map(|d| d.register(tape, trainable)),
            },
        );
    }

    let xv = tape.constant(x.clone());
    let f = Conv::apply(input_vars.conv1, tape, xv, 1)?;
    let f = tape.leaky_relu(f, LEAKY_SLOPE)?;
    let f = Conv::apply(input_vars.conv2, tape, f, 1)?;
    let x_adapted = tape.add(xv, f)?;

    let features = task.forward_on(tape, &task_vars, x_adapted, |tape, depth, h| {
        if depth <= k {
            if let Some(v) = level_vars.get(&depth) {
                return tape.conv1x1(h, v.encoder.weight, v.encoder.bias);
            }
        } else if depth < n && n - depth <= k {
            if let Some(v) = level_vars.get(&(n - depth)) {
                let block = v.decoder.unwrap_or(v.encoder);
                return tape.conv1x1(h, block.weight, block.bias);
            }
        }
        Ok(h)
    })?;

    let rx = suite.member(Member::Input)?;
    let rx_vars = rx.register(tape, false);
    let eps_x = rx.error_on(tape, &rx_vars, x_adapted)?;
    let mut eps_levels = Vec::new();
    for i in omega.levels() {
        let ri = suite.member(Member::Level(i))?;
        let vars = ri.register(tape, false);
        let cat = tape.concat_channels(features[i - 1], features[n - i - 1])?;
        eps_levels.push((i, ri.error_on(tape, &vars, cat)?));
    }
    let ry = suite.member(Member::Output)?;
    let ry_vars = ry.register(tape, false);
    let eps_y = ry.error_on(tape, &ry_vars, features[n - 1])?;

    let mut loss = tape.scale(eps_y, weights.output)?;
    let wx = tape.scale(eps_x, weights.input)?;
    loss = tape.add(loss, wx)?;
    for &(_, e) in &eps_levels {
        let we = tape.scale(e, weights.levels)?;
        loss = tape.add(loss, we)?;
    }

    Ok(Pass { x_adapted, features, eps_x, eps_levels, eps_y, loss, input_vars, level_vars })
}

fn read_errors(tape: &Tape, pass: &Pass) -> ShiftErrors {
    ShiftErrors {
        eps_x: tape.value(pass.eps_x).item() as f64,
        eps_levels: pass
            .eps_levels
            .iter()
            .map(|&(i, v)| (i, tape.value(v).item() as f64))
            .collect(),
        eps_y: tape.value(pass.eps_y).item() as f64,
    }
}

/// Forward pass routed through the adaptors of `omega` (plus the input adaptor).
pub fn adapted_forward(
    task: &TaskModel,
    suite: &ReconSuite,
    adaptors: &AdaptorSet,
    omega: Configuration,
    x: &Tensor,
) -> Result<(FeatureTrace, ShiftErrors)> {
    let mut tape = Tape::new();
    let pass = build_pass(&mut tape, task, suite, adaptors, omega, x, LossWeights::default(), false)?;
    let trace = FeatureTrace {
        features: pass.features.iter().map(|&v| tape.value(v).clone()).collect(),
    };
    Ok((trace, read_errors(&tape, &pass)))
}

/// Adapted input `A_x(x)` under the current adaptor parameters.
pub fn adapted_input(adaptors: &AdaptorSet, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let c1 = adaptors.input.conv1.register(&mut tape, false);
    let c2 = adaptors.input.conv2.register(&mut tape, false);
    let xv = tape.constant(x.clone());
    let f = Conv::apply(c1, &mut tape, xv, 1)?;
    let f = tape.leaky_relu(f, LEAKY_SLOPE)?;
    let f = Conv::apply(c2, &mut tape, f, 1)?;
    let xa = tape.add(xv, f)?;
    Ok(tape.value(xa).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub eps_x: f64,
    pub eps_levels: BTreeMap<usize, f64>,
    pub eps_y: f64,
    /// Whether this step's output is the returned snapshot.
    pub chosen: bool,
}

/// Per-step record of one configuration's adaptation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub configuration: Configuration,
    pub steps: Vec<StepRecord>,
    /// Lowest `ε_y` over the steps (`+∞` if no step completed).
    pub best_eps_y: f64,
    #[serde(skip)]
    pub best_output: Option<Tensor>,
    #[serde(skip)]
    pub last_output: Option<Tensor>,
    /// Set when a step hit a numeric failure; earlier steps remain valid.
    pub failure: Option<String>,
}

impl StepTrace {
    pub fn best_step(&self) -> Option<usize> {
        self.steps.iter().find(|s| s.chosen).map(|s| s.step)
    }
}

/// `steps` iterations of forward → loss → backward → Adam on the input
/// adaptor and the adaptors of `omega`. Task and suite are read-only.
pub fn adapt_steps(
    task: &TaskModel,
    suite: &ReconSuite,
    adaptors: &mut AdaptorSet,
    omega: Configuration,
    x: &Tensor,
    config: &AdaptConfig,
) -> Result<StepTrace> {
    if config.steps == 0 {
        return Err(Error::InvalidArgument("adaptation needs at least one step".into()));
    }
    check_omega(omega, task.levels())?;
    adaptors.select(omega);
    adaptors.input_opt.lr = config.lr;
    for opt in &mut adaptors.level_opts {
        opt.lr = config.lr;
    }

    let mut trace = StepTrace {
        configuration: omega,
        steps: Vec::with_capacity(config.steps),
        best_eps_y: f64::INFINITY,
        best_output: None,
        last_output: None,
        failure: None,
    };
    let mut best_index = None;

    for step in 1..=config.steps {
        match run_step(task, suite, adaptors, omega, x, config) {
            Ok((record, output)) => {
                if record.eps_y < trace.best_eps_y {
                    trace.best_eps_y = record.eps_y;
                    trace.best_output = Some(output.clone());
                    best_index = Some(trace.steps.len());
                }
                trace.last_output = Some(output);
                trace.steps.push(StepRecord { step, ..record });
            }
            Err(e @ Error::NumericFailure { .. }) => {
                trace.failure = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        }
    }
    if let Some(i) = best_index {
        trace.steps[i].chosen = true;
    }
    Ok(trace)
}

fn run_step(
    task: &TaskModel,
    suite: &ReconSuite,
    adaptors: &mut AdaptorSet,
    omega: Configuration,
    x: &Tensor,
    config: &AdaptConfig,
) -> Result<(StepRecord, Tensor)> {
    let mut tape = Tape::new();
    let pass = build_pass(&mut tape, task, suite, adaptors, omega, x, config.weights, true)?;
    let errors = read_errors(&tape, &pass);
    let loss = tape.value(pass.loss).item() as f64;
    let output = tape.value(*pass.features.last().expect("features")).clone();
    debug_assert!(tape.value(pass.x_adapted).is_finite());

    tape.backward(pass.loss)?;
    let grad = |v: Var, like: &Tensor| tape.grad(v).unwrap_or_else(|| Tensor::zeros(like.shape()));

    let iv = &pass.input_vars;
    let input_grads = [
        grad(iv.conv1.weight, &adaptors.input.conv1.weight),
        grad(iv.conv1.bias, &adaptors.input.conv1.bias),
        grad(iv.conv2.weight, &adaptors.input.conv2.weight),
        grad(iv.conv2.bias, &adaptors.input.conv2.bias),
    ];
    {
        let a = &mut adaptors.input;
        let mut params = [&mut a.conv1.weight, &mut a.conv1.bias, &mut a.conv2.weight, &mut a.conv2.bias];
        let g: Vec<Option<&Tensor>> = input_grads.iter().map(Some).collect();
        adaptors.input_opt.step(&mut params, &g)?;
    }
    for (&i, lv) in &pass.level_vars {
        let adaptor = &mut adaptors.levels[i - 1];
        let vars: Vec<ConvVars> = std::iter::once(lv.encoder).chain(lv.decoder).collect();
        let grads: Vec<Tensor> = vars
            .iter()
            .zip(adaptor.convs())
            .flat_map(|(v, c)| [grad(v.weight, &c.weight), grad(v.bias, &c.bias)])
            .collect();
        let mut params: Vec<&mut Tensor> = adaptor
            .convs_mut()
            .into_iter()
            .flat_map(|c| c.tensors_mut())
            .collect();
        let g: Vec<Option<&Tensor>> = grads.iter().map(Some).collect();
        adaptors.level_opts[i - 1].step(&mut params, &g)?;
    }

    Ok((
        StepRecord {
            step: 0,
            loss,
            eps_x: errors.eps_x,
            eps_levels: errors.eps_levels,
            eps_y: errors.eps_y,
            chosen: false,
        },
        output,
    ))
}

/// Concatenated adapted features for level `i`, as fed to `R_i`.
pub fn adapted_level_input(trace: &FeatureTrace, level: usize) -> Result<Tensor> {
    concat_symmetric(trace, level)
}
