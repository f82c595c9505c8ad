//! Train → calibrate → adapt → evaluate, as reusable stages.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{Dataset, DataSpec, Split, SplitName};
use super::report::{ReportRow, RunReport};
use crate::dab::{AdaptConfig, StepTrace};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_pair, PsnrMax};
use crate::net::{train_task, TaskConfig, TaskModel, TrainReport};
use crate::recon::{train_recon_suite, ReconSuite, SuiteTrainReport};
use crate::rng::mix;
use crate::search::{calibrate_threshold, run_sample, SampleConfig, Strategy};
use crate::tensor::{LrSchedule, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub data: DataSpec,
    pub task: TaskConfig,
    pub task_schedule: LrSchedule,
    pub recon_schedule: LrSchedule,
    pub batch_size: usize,
    pub task_seed: u64,
    pub recon_seed: u64,
    pub search_seed: u64,
    pub strategy: Strategy,
    pub percentile: f64,
    /// Take τ from the test splits instead of the calibration split.
    pub tau_transductive: bool,
    pub adapt: AdaptConfig,
    pub psnr_max: PsnrMax,
    /// Runs per randomized strategy; their metrics are averaged when comparing.
    pub random_repeats: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data: DataSpec::default(),
            task: TaskConfig::default(),
            task_schedule: LrSchedule { base_lr: 2e-3, hold_epochs: 15, decay_epochs: 15 },
            recon_schedule: LrSchedule { base_lr: 2e-3, hold_epochs: 15, decay_epochs: 15 },
            batch_size: 16,
            task_seed: 11,
            recon_seed: 13,
            search_seed: 17,
            strategy: Strategy::Grid,
            percentile: 95.0,
            tau_transductive: false,
            adapt: AdaptConfig::default(),
            psnr_max: PsnrMax::Generated,
            random_repeats: 3,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.task.validate()?;
        if self.task.image_size != self.data.image_size {
            return Err(Error::Config(format!(
                "task image_size {} differs from data image_size {}",
                self.task.image_size, self.data.image_size
            )));
        }
        if !(self.percentile > 0.0 && self.percentile < 100.0) {
            return Err(Error::Config(format!("percentile {} not in (0, 100)", self.percentile)));
        }
        if self.adapt.steps == 0 || self.batch_size == 0 || self.random_repeats == 0 {
            return Err(Error::Config("steps, batch_size and random_repeats must be ≥ 1".into()));
        }
        Ok(())
    }
}

pub fn train_task_stage(cfg: &PipelineConfig, data: &Dataset) -> Result<(TaskModel, TrainReport)> {
    cfg.validate()?;
    let mut model = TaskModel::new(cfg.task.clone(), cfg.task_seed)?;
    let report = train_task(
        &mut model,
        &data.train.inputs,
        &data.train.targets,
        &cfg.task_schedule,
        cfg.batch_size,
        cfg.task_seed,
    )?;
    Ok((model, report))
}

pub fn train_recon_stage(cfg: &PipelineConfig, task: &TaskModel, data: &Dataset) -> Result<(ReconSuite, SuiteTrainReport)> {
    let mut suite = ReconSuite::new(task, cfg.recon_seed)?;
    let report =
        train_recon_suite(&mut suite, task, &data.train.inputs, &cfg.recon_schedule, cfg.batch_size, cfg.recon_seed)?;
    Ok((suite, report))
}

/// Unadapted output errors `ε_y` for every sample of `split`, in order.
pub fn unadapted_errors(task: &TaskModel, suite: &ReconSuite, split: &Split) -> Result<Vec<f64>> {
    split
        .inputs
        .par_iter()
        .map(|x| {
            let trace = task.translate(x)?;
            Ok(suite.shift_errors(&trace, x)?.eps_y)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub percentile: f64,
    pub tau: f64,
    pub transductive: bool,
    /// `(sample id, ε_y)` of the samples τ was computed from.
    pub errors: Vec<(u64, f64)>,
}

impl Calibration {
    /// τ at another percentile over the same errors.
    pub fn at(&self, percentile: f64) -> Result<Calibration> {
        let values: Vec<f64> = self.errors.iter().map(|e| e.1).collect();
        Ok(Calibration { percentile, tau: calibrate_threshold(&values, percentile)?, ..self.clone() })
    }
}

pub fn calibrate(
    task: &TaskModel,
    suite: &ReconSuite,
    data: &Dataset,
    percentile: f64,
    transductive: bool,
) -> Result<Calibration> {
    let splits: &[SplitName] =
        if transductive { &[SplitName::IdTest, SplitName::OodTest] } else { &[SplitName::Calib] };
    let mut errors = Vec::new();
    for &name in splits {
        let split = data.split(name);
        errors.extend(split.ids.iter().copied().zip(unadapted_errors(task, suite, split)?));
    }
    let values: Vec<f64> = errors.iter().map(|e| e.1).collect();
    Ok(Calibration { percentile, tau: calibrate_threshold(&values, percentile)?, transductive, errors })
}

pub struct RunOptions {
    pub strategy: Strategy,
    pub seed: u64,
    pub adapt: AdaptConfig,
    pub psnr_max: PsnrMax,
    pub keep_traces: bool,
    pub keep_outputs: bool,
}

impl RunOptions {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        RunOptions {
            strategy: cfg.strategy,
            seed: cfg.search_seed,
            adapt: cfg.adapt,
            psnr_max: cfg.psnr_max,
            keep_traces: false,
            keep_outputs: false,
        }
    }
}

struct SampleResult {
    row: ReportRow,
    output: Option<Tensor>,
    traces: Option<Vec<StepTrace>>,
}

/// Runs gated TTA on the ID and OOD test splits.
pub fn run_tta(
    task: &TaskModel,
    suite: &ReconSuite,
    data: &Dataset,
    calibration: &Calibration,
    opts: &RunOptions,
) -> Result<RunReport> {
    let (t0, s0) = (task.checksum(), suite.checksum());
    let mut work = Vec::new();
    for name in [SplitName::IdTest, SplitName::OodTest] {
        let split = data.split(name);
        for i in 0..split.len() {
            work.push((name, split.ids[i], &split.inputs[i], &split.targets[i]));
        }
    }
    let results: Vec<SampleResult> = work
        .par_iter()
        .map(|&(split, id, x, y)| {
            let cfg = SampleConfig {
                strategy: opts.strategy,
                tau: calibration.tau,
                adapt: opts.adapt,
                seed: mix(opts.seed, id),
            };
            let outcome = run_sample(task, suite, x, &cfg)?;
            let plain = task.translate(x)?;
            let before = evaluate_pair(plain.output(), y, opts.psnr_max)?;
            let after = evaluate_pair(&outcome.output, y, opts.psnr_max)?;
            let row = ReportRow {
                sample_id: id,
                split,
                eps_unadapted: outcome.eps_unadapted,
                triggered: outcome.triggered,
                omega_star: outcome.omega_star.map(|o| o.to_string()).unwrap_or_default(),
                eps_best: outcome.eps_best,
                configs_evaluated: outcome.budget.configs_evaluated,
                adapt_steps_total: outcome.budget.adapt_steps_total,
                forwards_total: outcome.budget.forwards_total,
                mae_no_tta: before.mae,
                psnr_no_tta: before.psnr,
                ssim_no_tta: before.ssim,
                mae_tta: after.mae,
                psnr_tta: after.psnr,
                ssim_tta: after.ssim,
            };
            Ok(SampleResult {
                row,
                output: opts.keep_outputs.then_some(outcome.output),
                traces: opts.keep_traces.then_some(outcome.traces),
            })
        })
        .collect::<Result<_>>()?;
    if task.checksum() != t0 || suite.checksum() != s0 {
        return Err(Error::Tape("frozen parameters changed during adaptation".into()));
    }
    let mut report = RunReport {
        strategy: opts.strategy.name(),
        seed: opts.seed,
        percentile: calibration.percentile,
        tau: calibration.tau,
        transductive: calibration.transductive,
        rows: Vec::with_capacity(results.len()),
        outputs: Vec::new(),
        traces: Vec::new(),
    };
    for r in results {
        if let Some(o) = r.output {
            report.outputs.push(o);
        }
        if let Some(t) = r.traces {
            report.traces.push((r.row.sample_id, t));
        }
        report.rows.push(r.row);
    }
    Ok(report)
}

/// Everything needed to reproduce a run, plus content hashes of its inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub strategy: Strategy,
    pub seed: u64,
    pub percentile: f64,
    pub tau: f64,
    pub transductive: bool,
    pub task_checksum: String,
    pub suite_checksum: String,
    /// Input path → SHA-256 of its manifest or index file.
    pub inputs: std::collections::BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(
        config: &PipelineConfig,
        opts: &RunOptions,
        calibration: &Calibration,
        task: &TaskModel,
        suite: &ReconSuite,
    ) -> Self {
        RunManifest {
            config: config.clone(),
            strategy: opts.strategy,
            seed: opts.seed,
            percentile: calibration.percentile,
            tau: calibration.tau,
            transductive: calibration.transductive,
            task_checksum: task.checksum(),
            suite_checksum: suite.checksum(),
            inputs: Default::default(),
        }
    }

    /// Records the hash of `dir/<file>` under `dir`'s path.
    pub fn hash_input(&mut self, dir: &std::path::Path, file: &str) -> Result<()> {
        let sha = super::io::sha256_file(&dir.join(file))?;
        self.inputs.insert(dir.display().to_string(), sha);
        Ok(())
    }
}

/// Trained models plus calibration, kept together so several runs can reuse them.
pub struct Prepared {
    pub task: TaskModel,
    pub suite: ReconSuite,
    pub calibration: Calibration,
    pub task_report: TrainReport,
    pub recon_report: SuiteTrainReport,
}

pub fn prepare(cfg: &PipelineConfig, data: &Dataset) -> Result<Prepared> {
    let (task, task_report) = train_task_stage(cfg, data)?;
    let (suite, recon_report) = train_recon_stage(cfg, &task, data)?;
    let calibration = calibrate(&task, &suite, data, cfg.percentile, cfg.tau_transductive)?;
    Ok(Prepared { task, suite, calibration, task_report, recon_report })
}
