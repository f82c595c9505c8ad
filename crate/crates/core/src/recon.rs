//! Per-level convolutional autoencoders whose reconstruction error serves as
//! a domain-shift signal.
//!
//! The suite holds one autoencoder on the input image, one on the output
//! image, and one per intermediate level `i`, fed with the channel
//! concatenation of the task features at depths `i` and `n − i`. Members are
//! trained independently with an MSE objective; errors at inference are mean
//! absolute reconstruction residuals.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{param_checksum, train_params, Conv, ConvVars, FeatureTrace, TaskModel, TrainReport, LEAKY_SLOPE};
use crate::rng::{mix, stream_rng};
use crate::tensor::{LrSchedule, Tape, Tensor, Var};

/// Undercomplete autoencoder: two stride-2 convolutions down to a quarter of
/// the spatial side, mirrored by two upsample+conv layers with a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    input_shape: [usize; 3],
    width: usize,
    pub(crate) params: Vec<Conv>,
    passthrough: bool,
}

impl Autoencoder {
    pub const MIN_WIDTH: usize = 4;

    pub fn new(input_shape: [usize; 3], seed: u64) -> Result<Self> {
        Self::with_width(input_shape, Self::default_width(input_shape[0]), seed)
    }

    pub fn default_width(channels: usize) -> usize {
        (channels / 2).max(Self::MIN_WIDTH)
    }

    pub fn with_width(input_shape: [usize; 3], width: usize, seed: u64) -> Result<Self> {
        let [c, h, w] = input_shape;
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "autoencoder input {input_shape:?} must have spatial sides divisible by 4"
            )));
        }
        if width == 0 {
            return Err(Error::Config("autoencoder width must be positive".into()));
        }
        let mut rng = stream_rng(seed, 0);
        let params = vec![
            Conv::init(width, c, 3, &mut rng),
            Conv::init(width, width, 3, &mut rng),
            Conv::init(width, width, 3, &mut rng),
            Conv::init(c, width, 3, &mut rng),
        ];
        Ok(Autoencoder { input_shape, width, params, passthrough: false })
    }

    /// Identity "reconstruction" with no parameters; every error it reports is zero.
    pub fn passthrough(input_shape: [usize; 3]) -> Self {
        Autoencoder { input_shape, width: input_shape[0], params: Vec::new(), passthrough: true }
    }

    pub fn is_passthrough(&self) -> bool {
        self.passthrough
    }

    pub(crate) fn from_parts(input_shape: [usize; 3], params: Vec<Conv>) -> Result<Self> {
        let reference = Self::new(input_shape, 0)?;
        let same = params.len() == reference.params.len()
            && params.iter().zip(&reference.params).all(|(a, b)| {
                a.weight.shape() == b.weight.shape() && a.bias.shape() == b.bias.shape()
            });
        if !same {
            return Err(Error::ArchitectureMismatch(format!(
                "autoencoder parameters do not fit input {input_shape:?}"
            )));
        }
        Ok(Autoencoder { params, ..reference })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn bottleneck_width(&self) -> usize {
        self.width
    }

    pub fn params(&self) -> &[Conv] {
        &self.params
    }

    pub(crate) fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<ConvVars> {
        self.params.iter().map(|p| p.register(tape, trainable)).collect()
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        if shape != self.input_shape {
            return Err(Error::shape(
                "reconstruct",
                format!("expected {:?}, got {shape:?}", self.input_shape),
            ));
        }
        Ok(())
    }

    pub(crate) fn reconstruct_on(&self, tape: &mut Tape, vars: &[ConvVars], x: Var) -> Result<Var> {
        self.check(tape.value(x).shape())?;
        if self.passthrough {
            return Ok(x);
        }
        let h = Conv::apply(vars[0], tape, x, 2)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = Conv::apply(vars[1], tape, h, 2)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = tape.upsample2x(h)?;
        let h = Conv::apply(vars[2], tape, h, 1)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        let h = tape.upsample2x(h)?;
        Conv::apply(vars[3], tape, h, 1)
    }

    /// Mean-L1 reconstruction residual of `x`, as a scalar on the tape.
    pub(crate) fn error_on(&self, tape: &mut Tape, vars: &[ConvVars], x: Var) -> Result<Var> {
        let r = self.reconstruct_on(tape, vars, x)?;
        tape.l1(x, r)
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let r = self.reconstruct_on(&mut tape, &vars, xv)?;
        Ok(tape.value(r).clone())
    }

    pub fn error(&self, x: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let e = self.error_on(&mut tape, &vars, xv)?;
        Ok(tape.value(e).item() as f64)
    }

    /// Trains with the per-element MSE objective on `inputs`.
    pub fn train(
        &mut self,
        inputs: &[Tensor],
        schedule: &LrSchedule,
        batch_size: usize,
        seed: u64,
    ) -> Result<TrainReport> {
        for x in inputs {
            self.check(x.shape())?;
        }
        let arch = self.clone();
        train_params(&mut self.params, inputs.len(), schedule, batch_size, seed, |tape, vars, i| {
            let x = tape.constant(inputs[i].clone());
            let r = arch.reconstruct_on(tape, vars, x)?;
            tape.mse(x, r)
        })
    }
}

/// Identifies one member of the suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Member {
    Input,
    Level(usize),
    Output,
}

impl std::fmt::Display for Member {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Member::Input => write!(f, "input"),
            Member::Level(i) => write!(f, "level{i}"),
            Member::Output => write!(f, "output"),
        }
    }
}

/// Reconstruction errors of one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftErrors {
    pub eps_x: f64,
    /// Keyed by level `i` (1-based).
    pub eps_levels: BTreeMap<usize, f64>,
    pub eps_y: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconSuite {
    task_layers: usize,
    pub(crate) input: Autoencoder,
    pub(crate) levels: Vec<Autoencoder>,
    pub(crate) output: Autoencoder,
    trained: BTreeMap<Member, bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteTrainReport {
    pub members: Vec<(Member, TrainReport)>,
}

/// `h_i ⊕ h_{n−i}` with `h_i` leading.
pub fn concat_symmetric(trace: &FeatureTrace, level: usize) -> Result<Tensor> {
    let n = trace.layers();
    let max = (n.saturating_sub(1)) / 2;
    if level == 0 || level > max {
        return Err(Error::DepthOutOfRange { depth: level, max });
    }
    let mut tape = Tape::new();
    let a = tape.constant(trace.feature(level)?.clone());
    let b = tape.constant(trace.feature(n - level)?.clone());
    let c = tape.concat_channels(a, b)?;
    Ok(tape.value(c).clone())
}

impl ReconSuite {
    /// Fresh members shaped after `task`'s feature taps.
    pub fn new(task: &TaskModel, seed: u64) -> Result<Self> {
        let n = task.depth_count();
        let levels = (1..=task.levels())
            .map(|i| {
                let a = task.feature_shape(i)?;
                let b = task.feature_shape(n - i)?;
                Autoencoder::new([a[0] + b[0], a[1], a[2]], mix(seed, Member::Level(i).stream()))
            })
            .collect::<Result<Vec<_>>>()?;
        let suite = ReconSuite {
            task_layers: n,
            input: Autoencoder::new(task.input_shape(), mix(seed, Member::Input.stream()))?,
            output: Autoencoder::new(task.feature_shape(n)?, mix(seed, Member::Output.stream()))?,
            levels,
            trained: BTreeMap::new(),
        };
        Ok(suite)
    }

    /// A suite whose members all reconstruct perfectly.
    pub fn passthrough(task: &TaskModel) -> Result<Self> {
        let n = task.depth_count();
        let levels = (1..=task.levels())
            .map(|i| {
                let a = task.feature_shape(i)?;
                let b = task.feature_shape(n - i)?;
                Ok(Autoencoder::passthrough([a[0] + b[0], a[1], a[2]]))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut suite = ReconSuite {
            task_layers: n,
            input: Autoencoder::passthrough(task.input_shape()),
            output: Autoencoder::passthrough(task.feature_shape(n)?),
            levels,
            trained: BTreeMap::new(),
        };
        for m in suite.members() {
            suite.trained.insert(m, true);
        }
        Ok(suite)
    }

    pub(crate) fn from_parts(
        task_layers: usize,
        input: Autoencoder,
        levels: Vec<Autoencoder>,
        output: Autoencoder,
        trained: BTreeMap<Member, bool>,
    ) -> Self {
        ReconSuite { task_layers, input, levels, output, trained }
    }

    pub fn task_layers(&self) -> usize {
        self.task_layers
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn members(&self) -> Vec<Member> {
        let mut m = vec![Member::Input];
        m.extend((1..=self.levels.len()).map(Member::Level));
        m.push(Member::Output);
        m
    }

    pub fn member(&self, m: Member) -> Result<&Autoencoder> {
        match m {
            Member::Input => Ok(&self.input),
            Member::Output => Ok(&self.output),
            Member::Level(i) => i
                .checked_sub(1)
                .and_then(|j| self.levels.get(j))
                .ok_or(Error::DepthOutOfRange { depth: i, max: self.levels.len() }),
        }
    }

    pub fn member_mut(&mut self, m: Member) -> Result<&mut Autoencoder> {
        let max = self.levels.len();
        match m {
            Member::Input => Ok(&mut self.input),
            Member::Output => Ok(&mut self.output),
            Member::Level(i) => i
                .checked_sub(1)
                .and_then(|j| self.levels.get_mut(j))
                .ok_or(Error::DepthOutOfRange { depth: i, max }),
        }
    }

    pub fn is_trained(&self, m: Member) -> bool {
        self.trained.get(&m).copied().unwrap_or(false)
    }

    pub fn is_fully_trained(&self) -> bool {
        self.members().into_iter().all(|m| self.is_trained(m))
    }

    pub fn checksum(&self) -> String {
        param_checksum(
            std::iter::once(&self.input)
                .chain(&self.levels)
                .chain(std::iter::once(&self.output))
                .flat_map(|ae| ae.params.iter()),
        )
    }

    /// Tensor that member `m` sees for a given forward pass.
    pub fn member_input(&self, m: Member, trace: &FeatureTrace, input: &Tensor) -> Result<Tensor> {
        match m {
            Member::Input => Ok(input.clone()),
            Member::Output => Ok(trace.output().clone()),
            Member::Level(i) => concat_symmetric(trace, i),
        }
    }

    /// Trains one member on its own level's tensors; no other member is touched.
    pub fn train_member(
        &mut self,
        m: Member,
        task: &TaskModel,
        inputs: &[Tensor],
        schedule: &LrSchedule,
        batch_size: usize,
        seed: u64,
    ) -> Result<TrainReport> {
        if !task.is_trained() {
            return Err(Error::UntrainedModel);
        }
        if inputs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut tensors = Vec::with_capacity(inputs.len());
        for x in inputs {
            let trace = task.translate(x)?;
            tensors.push(self.member_input(m, &trace, x)?);
        }
        let report = self
            .member_mut(m)?
            .train(&tensors, schedule, batch_size, mix(seed, m.stream()))?;
        self.trained.insert(m, true);
        Ok(report)
    }

    pub fn shift_errors(&self, trace: &FeatureTrace, adapted_input: &Tensor) -> Result<ShiftErrors> {
        if trace.layers() != self.task_layers {
            return Err(Error::ArchitectureMismatch(format!(
                "trace has {} layers, suite expects {}",
                trace.layers(),
                self.task_layers
            )));
        }
        let mut eps_levels = BTreeMap::new();
        for i in 1..=self.levels.len() {
            eps_levels.insert(i, self.levels[i - 1].error(&concat_symmetric(trace, i)?)?);
        }
        Ok(ShiftErrors {
            eps_x: self.input.error(adapted_input)?,
            eps_levels,
            eps_y: self.output.error(trace.output())?,
        })
    }

    /// Output-level error of the unadapted task model: the trigger statistic.
    pub fn unadapted_output_error(&self, task: &TaskModel, x: &Tensor) -> Result<f64> {
        let trace = task.translate(x)?;
        self.output.error(trace.output())
    }
}

impl Member {
    pub(crate) fn stream(&self) -> u64 {
        match self {
            Member::Input => 1,
            Member::Output => 2,
            Member::Level(i) => 16 + *i as u64,
        }
    }
}

/// Trains every member of `suite`, one after another, on the task's training inputs.
pub fn train_recon_suite(
    suite: &mut ReconSuite,
    task: &TaskModel,
    inputs: &[Tensor],
    schedule: &LrSchedule,
    batch_size: usize,
    seed: u64,
) -> Result<SuiteTrainReport> {
    if !task.is_trained() {
        return Err(Error::UntrainedModel);
    }
    if suite.task_layers != task.depth_count() {
        return Err(Error::ArchitectureMismatch(format!(
            "suite built for {} layers, task has {}",
            suite.task_layers,
            task.depth_count()
        )));
    }
    let mut members = Vec::new();
    for m in suite.members() {
        let r = suite.train_member(m, task, inputs, schedule, batch_size, seed)?;
        members.push((m, r));
    }
    Ok(SuiteTrainReport { members })
}
