use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tta_core::harness::io::load_json;
use tta_core::harness::report::{read_report_csv, summarize_rows, write_traces, RunReport};
use tta_core::harness::workspace::{
    calibrate_dir, compare_dirs, gen_data, pipeline_dir, run_tta_dir, train_recon_dir,
    train_task_dir, RunInputs,
};
use tta_core::harness::{load_dataset, load_suite, load_task, Calibration, PipelineConfig, RunManifest, RunOptions};
use tta_core::metrics::PsnrMax;
use tta_core::search::{run_sample, SampleConfig, Strategy};

#[derive(Parser)]
#[command(name = "tta", version, about = "Sample-aware test-time adaptation benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every stage; flags override the JSON config.
#[derive(Args, Clone, Default)]
struct Common {
    /// JSON pipeline config; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    strategy: Option<String>,
    #[arg(long, global = true)]
    percentile: Option<f64>,
    /// Adaptation steps per configuration.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Adaptation learning rate.
    #[arg(long, global = true)]
    lr: Option<f32>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Compute τ over the test splits instead of the calibration split.
    #[arg(long, global = true)]
    tau_transductive: bool,
    /// `generated` (max of the output image) or `range` (1.0).
    #[arg(long, global = true)]
    psnr_max: Option<String>,
    /// Use the literal round structure for `--strategy fs`.
    #[arg(long, global = true)]
    fs_faithful_pseudocode: bool,
}

impl Common {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg: PipelineConfig = match &self.config {
            Some(p) => load_json(p).with_context(|| format!("reading config {}", p.display()))?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = &self.strategy {
            cfg.strategy = s.parse()?;
        }
        if self.fs_faithful_pseudocode && cfg.strategy == Strategy::ForwardSelection {
            cfg.strategy = Strategy::ForwardSelectionLiteral;
        }
        if let Some(p) = self.percentile {
            cfg.percentile = p;
        }
        if let Some(m) = self.steps {
            cfg.adapt.steps = m;
        }
        if let Some(lr) = self.lr {
            cfg.adapt.lr = lr;
        }
        if let Some(seed) = self.seed {
            cfg.search_seed = seed;
        }
        cfg.tau_transductive |= self.tau_transductive;
        match self.psnr_max.as_deref() {
            None => {}
            Some("generated") => cfg.psnr_max = PsnrMax::Generated,
            Some("range") => cfg.psnr_max = PsnrMax::Range,
            Some(other) => bail!("unknown --psnr-max `{other}` (generated|range)"),
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct Inputs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    recon: PathBuf,
    #[arg(long)]
    calibration: PathBuf,
}

impl Inputs {
    fn to_run_inputs(&self) -> RunInputs {
        RunInputs {
            data: self.data.clone(),
            task: self.task.clone(),
            recon: self.recon.clone(),
            calibration: self.calibration.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic paired dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// PGM previews per evaluation split.
        #[arg(long, default_value_t = 4)]
        pgm: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Train the task model.
    TrainTask {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train the reconstruction suite against a trained task model.
    TrainRecon {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compute the trigger threshold τ.
    Calibrate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run gated TTA over the test splits.
    RunTta {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-step traces.
        #[arg(long)]
        dump_traces: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Recompute `summary.json` from a run's `report.csv`.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
    },
    /// Pairwise Wilcoxon matrix over runs.
    Compare {
        #[arg(long, num_args = 2.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Step traces for selected samples.
    DumpTraces {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Every stage in one directory.
    Pipeline {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "grid,rand10,fs,be,tpe,static-all")]
        strategies: Vec<String>,
        /// Threshold sweep percentiles; empty to skip.
        #[arg(long, value_delimiter = ',', default_value = "85,90,95,98")]
        sweep: Vec<f64>,
        #[command(flatten)]
        common: Common,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn dump_traces(cfg: &PipelineConfig, inputs: &Inputs, ids: &[u64], out: &Path) -> Result<()> {
    let data = load_dataset(&inputs.data)?;
    let task = load_task(&inputs.task)?;
    let suite = load_suite(&inputs.recon, &task)?;
    let stored: Calibration = load_json(&inputs.calibration)?;
    let cal = if stored.percentile == cfg.percentile { stored } else { stored.at(cfg.percentile)? };
    let mut traces = Vec::new();
    for &id in ids {
        let split = [&data.id_test, &data.ood_test, &data.calib, &data.train]
            .into_iter()
            .find(|s| s.ids.contains(&id))
            .with_context(|| format!("sample {id} not in dataset"))?;
        let i = split.ids.iter().position(|&x| x == id).expect("found above");
        let sample = SampleConfig {
            strategy: cfg.strategy,
            tau: cal.tau,
            adapt: cfg.adapt,
            seed: tta_core::rng::mix(cfg.search_seed, id),
        };
        let outcome = run_sample(&task, &suite, &split.inputs[i], &sample)?;
        eprintln!(
            "sample {id}: triggered={} eps {:.5} -> {:.5} omega={:?}",
            outcome.triggered,
            outcome.eps_unadapted,
            outcome.eps_best,
            outcome.omega_star.map(|o| o.to_string())
        );
        traces.push((id, outcome.traces));
    }
    write_traces(out, &traces)?;
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { out, pgm, common } => {
            let data = gen_data(&common.resolve()?, &out, pgm)?;
            println!(
                "wrote {} train / {} calib / {} id / {} ood samples to {}",
                data.train.len(),
                data.calib.len(),
                data.id_test.len(),
                data.ood_test.len(),
                out.display()
            );
        }
        Command::TrainTask { data, out, common } => {
            let task = train_task_dir(&common.resolve()?, &data, &out)?;
            println!("task checksum {}", task.checksum());
        }
        Command::TrainRecon { data, task, out, common } => {
            let suite = train_recon_dir(&common.resolve()?, &data, &task, &out)?;
            println!("suite checksum {}", suite.checksum());
        }
        Command::Calibrate { data, task, recon, out, common } => {
            let cal = calibrate_dir(&common.resolve()?, &data, &task, &recon, &out)?;
            println!("tau = {} (p{}, {} samples)", cal.tau, cal.percentile, cal.errors.len());
        }
        Command::RunTta { inputs, out, dump_traces, common } => {
            let cfg = common.resolve()?;
            let opts = RunOptions { keep_traces: dump_traces, ..RunOptions::from_config(&cfg) };
            print_json(&run_tta_dir(&cfg, &inputs.to_run_inputs(), &opts, &out)?)?;
        }
        Command::Evaluate { run } => {
            let manifest: RunManifest = load_json(&run.join("manifest.json"))?;
            let rows = read_report_csv(&run.join("report.csv"))?;
            let meta = RunReport {
                strategy: manifest.strategy.name(),
                seed: manifest.seed,
                percentile: manifest.percentile,
                tau: manifest.tau,
                transductive: manifest.transductive,
                ..RunReport::default()
            };
            let summary = summarize_rows(&meta, &rows);
            tta_core::harness::io::save_json(&run.join("summary.json"), &summary)?;
            print_json(&summary)?;
        }
        Command::Compare { runs, out, alpha } => {
            let cmp = compare_dirs(&runs, alpha, &out)?;
            println!("{} entries, m = {}, alpha_corr = {}", cmp.names.len(), cmp.comparisons, cmp.alpha_corr);
        }
        Command::DumpTraces { inputs, ids, out, common } => {
            dump_traces(&common.resolve()?, &inputs, &ids, &out)?;
        }
        Command::Pipeline { out, strategies, sweep, common } => {
            let cfg = common.resolve()?;
            let strategies = strategies
                .iter()
                .map(|s| {
                    let st: Strategy = s.parse()?;
                    Ok(if common.fs_faithful_pseudocode && st == Strategy::ForwardSelection {
                        Strategy::ForwardSelectionLiteral
                    } else {
                        st
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let outcome = pipeline_dir(&cfg, &out, &strategies, &sweep)?;
            for (name, _, s) in &outcome.runs {
                for (split, v) in &s.splits {
                    println!(
                        "{name:>16} {split:>8}: triggered {:>3}/{:<3} MAE {:.4} -> {:.4}",
                        v.triggered.n, v.all.n, v.all.no_tta.mae.mean, v.all.tta.mae.mean
                    );
                }
            }
            for p in &outcome.sweep {
                println!("p{}: tau {:.5}, triggered {}", p.percentile, p.tau, p.triggered_total);
            }
        }
    }
    Ok(())
}
