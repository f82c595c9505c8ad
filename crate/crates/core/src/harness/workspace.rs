//! Directory-level stages used by the command line: every stage reads its
//! inputs from disk and writes its artifacts next to them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{load_suite, load_task, save_suite, save_task};
use super::data::{generate, load_dataset, save_dataset, Dataset};
use super::io::{create_dir, load_json, save_json};
use super::pipeline::{
    calibrate, run_tta, train_recon_stage, train_task_stage, Calibration, PipelineConfig, RunManifest, RunOptions,
};
use super::report::{compare_runs, read_report_csv, write_run, write_wilcoxon_csv, Comparison, RunSummary};
use crate::error::{Error, Result};
use crate::net::TaskModel;
use crate::recon::ReconSuite;
use crate::search::Strategy;

pub fn gen_data(cfg: &PipelineConfig, out: &Path, pgm_samples: usize) -> Result<Dataset> {
    let data = generate(&cfg.data)?;
    save_dataset(&data, out, pgm_samples)?;
    Ok(data)
}

pub fn train_task_dir(cfg: &PipelineConfig, data_dir: &Path, out: &Path) -> Result<TaskModel> {
    let data = load_dataset(data_dir)?;
    let (task, report) = train_task_stage(cfg, &data)?;
    save_task(&task, out)?;
    save_json(&out.join("train_report.json"), &report)?;
    Ok(task)
}

pub fn train_recon_dir(cfg: &PipelineConfig, data_dir: &Path, task_dir: &Path, out: &Path) -> Result<ReconSuite> {
    let data = load_dataset(data_dir)?;
    let task = load_task(task_dir)?;
    let (suite, report) = train_recon_stage(cfg, &task, &data)?;
    save_suite(&suite, out)?;
    save_json(&out.join("train_report.json"), &report)?;
    Ok(suite)
}

pub fn calibrate_dir(
    cfg: &PipelineConfig,
    data_dir: &Path,
    task_dir: &Path,
    recon_dir: &Path,
    out: &Path,
) -> Result<Calibration> {
    let data = load_dataset(data_dir)?;
    let task = load_task(task_dir)?;
    let suite = load_suite(recon_dir, &task)?;
    let cal = calibrate(&task, &suite, &data, cfg.percentile, cfg.tau_transductive)?;
    save_json(out, &cal)?;
    Ok(cal)
}

/// Paths of the stage inputs a run reads.
#[derive(Clone, Debug)]
pub struct RunInputs {
    pub data: PathBuf,
    pub task: PathBuf,
    pub recon: PathBuf,
    pub calibration: PathBuf,
}

/// Loads the inputs, re-derives τ at `cfg.percentile` when it differs from
/// the stored calibration, runs TTA and writes the run directory.
pub fn run_tta_dir(cfg: &PipelineConfig, inputs: &RunInputs, opts: &RunOptions, out: &Path) -> Result<RunSummary> {
    let data = load_dataset(&inputs.data)?;
    let task = load_task(&inputs.task)?;
    let suite = load_suite(&inputs.recon, &task)?;
    let stored: Calibration = load_json(&inputs.calibration)?;
    if stored.transductive != cfg.tau_transductive {
        return Err(Error::Config(format!(
            "calibration transductive={} but run asks for transductive={}",
            stored.transductive, cfg.tau_transductive
        )));
    }
    let cal = if stored.percentile == cfg.percentile { stored } else { stored.at(cfg.percentile)? };
    let report = run_tta(&task, &suite, &data, &cal, opts)?;
    let summary = write_run(out, &report)?;
    let mut manifest = RunManifest::new(cfg, opts, &cal, &task, &suite);
    manifest.hash_input(&inputs.data, "index.json")?;
    manifest.hash_input(&inputs.task, "manifest.json")?;
    manifest.hash_input(&inputs.recon, "manifest.json")?;
    save_json(&out.join("manifest.json"), &manifest)?;
    save_json(&out.join("calibration.json"), &cal)?;
    Ok(summary)
}

#[derive(Deserialize)]
struct StrategyTag {
    strategy: Strategy,
}

/// Reads the strategy name recorded in a run's manifest.
pub fn run_strategy(run_dir: &Path) -> Result<Strategy> {
    Ok(load_json::<StrategyTag>(&run_dir.join("manifest.json"))?.strategy)
}

pub fn compare_dirs(runs: &[PathBuf], alpha: f64, out: &Path) -> Result<Comparison> {
    let mut loaded = Vec::new();
    for dir in runs {
        loaded.push((run_strategy(dir)?.name(), read_report_csv(&dir.join("report.csv"))?));
    }
    let cmp = compare_runs(&loaded, alpha)?;
    write_wilcoxon_csv(out, &cmp)?;
    Ok(cmp)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub percentile: f64,
    pub tau: f64,
    pub triggered_id: usize,
    pub triggered_ood: usize,
    pub triggered_total: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutcome {
    pub runs: Vec<(String, PathBuf, RunSummary)>,
    pub sweep: Vec<SweepPoint>,
}

/// Full benchmark under `out`: data, checkpoints, calibration, one run per
/// strategy (randomized ones repeated with consecutive seeds), the Wilcoxon
/// matrix, and an optional threshold sweep with the configured strategy.
pub fn pipeline_dir(
    cfg: &PipelineConfig,
    out: &Path,
    strategies: &[Strategy],
    sweep_percentiles: &[f64],
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    create_dir(out)?;
    save_json(&out.join("config.json"), cfg)?;
    let inputs = RunInputs {
        data: out.join("data"),
        task: out.join("task"),
        recon: out.join("recon"),
        calibration: out.join("calibration.json"),
    };
    gen_data(cfg, &inputs.data, 4)?;
    train_task_dir(cfg, &inputs.data, &inputs.task)?;
    train_recon_dir(cfg, &inputs.data, &inputs.task, &inputs.recon)?;
    calibrate_dir(cfg, &inputs.data, &inputs.task, &inputs.recon, &inputs.calibration)?;

    let mut outcome = PipelineOutcome::default();
    let mut run_dirs = Vec::new();
    for &strategy in strategies {
        let repeats = if strategy.is_randomized() { cfg.random_repeats } else { 1 };
        for r in 0..repeats {
            let seed = cfg.search_seed + r as u64;
            let name = if strategy.is_randomized() { format!("{strategy}-seed{seed}") } else { strategy.name() };
            let dir = out.join("runs").join(&name);
            let opts = RunOptions { strategy, seed, ..RunOptions::from_config(cfg) };
            let summary = run_tta_dir(cfg, &inputs, &opts, &dir)?;
            run_dirs.push(dir.clone());
            outcome.runs.push((name, dir, summary));
        }
    }
    if !run_dirs.is_empty() {
        compare_dirs(&run_dirs, 0.05, &out.join("wilcoxon.csv"))?;
    }
    for &p in sweep_percentiles {
        let dir = out.join("sweep").join(format!("p{p}"));
        let pcfg = PipelineConfig { percentile: p, ..cfg.clone() };
        let summary = run_tta_dir(&pcfg, &inputs, &RunOptions::from_config(&pcfg), &dir)?;
        let count = |s: super::data::SplitName| {
            summary.splits.get(&s).map_or(0, |x| x.triggered.n)
        };
        let (id, ood) = (count(super::data::SplitName::IdTest), count(super::data::SplitName::OodTest));
        outcome.sweep.push(SweepPoint {
            percentile: p,
            tau: summary.tau,
            triggered_id: id,
            triggered_ood: ood,
            triggered_total: id + ood,
        });
    }
    if !outcome.sweep.is_empty() {
        let path = out.join("sweep.csv");
        let mut w = csv::Writer::from_path(&path)
            .map_err(|e| Error::Corrupt { path: path.clone(), detail: e.to_string() })?;
        for p in &outcome.sweep {
            w.serialize(p).map_err(|e| Error::Corrupt { path: path.clone(), detail: e.to_string() })?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    save_json(&out.join("pipeline.json"), &outcome)?;
    Ok(outcome)
}
