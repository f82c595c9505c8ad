//! Synthetic benchmark, persistence and end-to-end runs.

pub mod checkpoint;
pub mod data;
pub mod io;
pub mod pipeline;
pub mod report;
pub mod workspace;

pub use checkpoint::{load_suite, load_task, save_suite, save_task};
pub use data::{generate, load_dataset, save_dataset, DataSpec, Dataset, Split, SplitName, TaskKind};
pub use pipeline::{
    calibrate, prepare, run_tta, train_recon_stage, train_task_stage, unadapted_errors, Calibration,
    PipelineConfig, Prepared, RunManifest, RunOptions,
};
pub use report::{
    compare_runs, read_report_csv, write_run, write_wilcoxon_csv, Cell, Comparison, ReportRow, RunReport,
    RunSummary,
};
