//! Run artifacts: per-sample CSV, budget CSV, JSON summary, and the pairwise
//! Wilcoxon matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::SplitName;
use super::io::{create_dir, save_json};
use crate::dab::StepTrace;
use crate::error::{Error, Result};
use crate::metrics::{MetricsSummary, SampleMetrics};
use crate::stats::{bonferroni_threshold, wilcoxon_signed_rank};
use crate::tensor::Tensor;

pub const REPORT_SCHEMA: u32 = 1;
const SCHEMA_LINE: &str = "# report_schema=1";

/// One test sample of a run. Column order is the CSV schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub sample_id: u64,
    pub split: SplitName,
    pub eps_unadapted: f64,
    pub triggered: bool,
    /// Chosen configuration such as `{1,3}`; empty when none.
    pub omega_star: String,
    pub eps_best: f64,
    pub configs_evaluated: usize,
    pub adapt_steps_total: usize,
    pub forwards_total: usize,
    pub mae_no_tta: f64,
    pub psnr_no_tta: f64,
    pub ssim_no_tta: f64,
    pub mae_tta: f64,
    pub psnr_tta: f64,
    pub ssim_tta: f64,
}

impl ReportRow {
    pub fn no_tta(&self) -> SampleMetrics {
        SampleMetrics { mae: self.mae_no_tta, psnr: self.psnr_no_tta, ssim: self.ssim_no_tta }
    }

    pub fn tta(&self) -> SampleMetrics {
        SampleMetrics { mae: self.mae_tta, psnr: self.psnr_tta, ssim: self.ssim_tta }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunReport {
    pub strategy: String,
    pub seed: u64,
    pub percentile: f64,
    pub tau: f64,
    pub transductive: bool,
    pub rows: Vec<ReportRow>,
    /// Reported outputs in row order, when requested.
    pub outputs: Vec<Tensor>,
    /// Per-sample step traces, when requested.
    pub traces: Vec<(u64, Vec<StepTrace>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetSummary {
    pub n: usize,
    pub no_tta: MetricsSummary,
    pub tta: MetricsSummary,
    pub negative_ssim: usize,
}

impl SetSummary {
    fn of(rows: &[&ReportRow]) -> SetSummary {
        let before: Vec<SampleMetrics> = rows.iter().map(|r| r.no_tta()).collect();
        let after: Vec<SampleMetrics> = rows.iter().map(|r| r.tta()).collect();
        SetSummary {
            n: rows.len(),
            no_tta: MetricsSummary::of(&before),
            tta: MetricsSummary::of(&after),
            negative_ssim: after.iter().filter(|m| m.ssim < 0.0).count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    /// Every sample of the split.
    pub all: SetSummary,
    /// Triggered samples only.
    pub triggered: SetSummary,
    pub triggered_fraction: f64,
    pub mean_eps_unadapted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub report_schema: u32,
    pub strategy: String,
    pub seed: u64,
    pub percentile: f64,
    pub tau: f64,
    pub transductive: bool,
    pub splits: BTreeMap<SplitName, SplitSummary>,
    pub configs_evaluated: usize,
    pub adapt_steps_total: usize,
    pub forwards_total: usize,
}

impl RunReport {
    pub fn rows_of(&self, split: SplitName) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn summary(&self) -> RunSummary {
        summarize(self, &self.rows)
    }
}

fn summarize(meta: &RunReport, rows: &[ReportRow]) -> RunSummary {
    let mut splits = BTreeMap::new();
    for name in [SplitName::IdTest, SplitName::OodTest] {
        let all: Vec<&ReportRow> = rows.iter().filter(|r| r.split == name).collect();
        if all.is_empty() {
            continue;
        }
        let trig: Vec<&ReportRow> = all.iter().copied().filter(|r| r.triggered).collect();
        splits.insert(
            name,
            SplitSummary {
                triggered_fraction: trig.len() as f64 / all.len() as f64,
                mean_eps_unadapted: all.iter().map(|r| r.eps_unadapted).sum::<f64>() / all.len() as f64,
                all: SetSummary::of(&all),
                triggered: SetSummary::of(&trig),
            },
        );
    }
    RunSummary {
        report_schema: REPORT_SCHEMA,
        strategy: meta.strategy.clone(),
        seed: meta.seed,
        percentile: meta.percentile,
        tau: meta.tau,
        transductive: meta.transductive,
        splits,
        configs_evaluated: rows.iter().map(|r| r.configs_evaluated).sum(),
        adapt_steps_total: rows.iter().map(|r| r.adapt_steps_total).sum(),
        forwards_total: rows.iter().map(|r| r.forwards_total).sum(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Corrupt { path: path.to_path_buf(), detail: e.to_string() }
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "{SCHEMA_LINE}").map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let first = text.lines().next().unwrap_or_default();
    if first != SCHEMA_LINE {
        let found = first.strip_prefix("# report_schema=").and_then(|v| v.parse().ok()).unwrap_or(0);
        return Err(Error::Version { found, expected: REPORT_SCHEMA });
    }
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

#[derive(Serialize)]
struct BudgetRow<'a> {
    sample_id: u64,
    split: SplitName,
    strategy: &'a str,
    triggered: bool,
    configs_evaluated: usize,
    adapt_steps_total: usize,
    forwards_total: usize,
}

pub fn write_budget_csv(path: &Path, strategy: &str, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(BudgetRow {
            sample_id: r.sample_id,
            split: r.split,
            strategy,
            triggered: r.triggered,
            configs_evaluated: r.configs_evaluated,
            adapt_steps_total: r.adapt_steps_total,
            forwards_total: r.forwards_total,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `report.csv`, `budget.csv`, `summary.json` and, if present, `traces.jsonl`.
pub fn write_run(dir: &Path, report: &RunReport) -> Result<RunSummary> {
    create_dir(dir)?;
    write_report_csv(&dir.join("report.csv"), &report.rows)?;
    write_budget_csv(&dir.join("budget.csv"), &report.strategy, &report.rows)?;
    let summary = report.summary();
    save_json(&dir.join("summary.json"), &summary)?;
    if !report.traces.is_empty() {
        write_traces(&dir.join("traces.jsonl"), &report.traces)?;
    }
    Ok(summary)
}

#[derive(Serialize)]
struct TraceLine<'a> {
    sample_id: u64,
    configurations: &'a [StepTrace],
}

pub fn write_traces(path: &Path, traces: &[(u64, Vec<StepTrace>)]) -> Result<()> {
    let mut out = Vec::new();
    for (id, t) in traces {
        serde_json::to_writer(&mut out, &TraceLine { sample_id: *id, configurations: t })?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Summary recomputed from a `report.csv` (run metadata taken from `meta`).
pub fn summarize_rows(meta: &RunReport, rows: &[ReportRow]) -> RunSummary {
    summarize(meta, rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Cell {
    Tested { p: f64, significant: bool },
    AllDifferencesZero,
    TooFewPairs,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Tested { p, significant } => format!("{p:.4e}{}", if *significant { "*" } else { "" }),
            Cell::AllDifferencesZero => "zero".into(),
            Cell::TooFewPairs => "n/a".into(),
        }
    }
}

pub const METRIC_ORDER: [&str; 3] = ["ssim", "mae", "psnr"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub names: Vec<String>,
    pub alpha: f64,
    /// Number of pairwise comparisons `m`.
    pub comparisons: usize,
    pub alpha_corr: f64,
    /// `cells[i][j]` holds SSIM, MAE, PSNR results for row `i` vs column `j` (i ≠ j).
    pub cells: Vec<Vec<Option<[Cell; 3]>>>,
}

/// Per-sample metric triples (ssim, mae, psnr) keyed by sample id.
pub type MetricTable = BTreeMap<u64, [f64; 3]>;

fn table(rows: &[ReportRow], use_tta: bool) -> MetricTable {
    rows.iter()
        .map(|r| {
            let m = if use_tta { r.tta() } else { r.no_tta() };
            (r.sample_id, [m.ssim, m.mae, m.psnr])
        })
        .collect()
}

/// Groups runs by strategy name and averages repeated runs per sample. The
/// unadapted metrics of the first run become the `no-tta` entry.
pub fn collect_tables(runs: &[(String, Vec<ReportRow>)]) -> Result<Vec<(String, MetricTable)>> {
    let Some((_, first)) = runs.first() else {
        return Err(Error::InvalidArgument("nothing to compare".into()));
    };
    let ids: BTreeSet<u64> = first.iter().map(|r| r.sample_id).collect();
    let mut grouped: Vec<(String, Vec<MetricTable>)> = Vec::new();
    for (name, rows) in runs {
        let these: BTreeSet<u64> = rows.iter().map(|r| r.sample_id).collect();
        if these != ids || these.len() != rows.len() {
            return Err(Error::SampleIdMismatch(format!("run `{name}` covers different samples")));
        }
        match grouped.iter_mut().find(|g| &g.0 == name) {
            Some(g) => g.1.push(table(rows, true)),
            None => grouped.push((name.clone(), vec![table(rows, true)])),
        }
    }
    let mut out = vec![("no-tta".to_string(), table(first, false))];
    for (name, tables) in grouped {
        let n = tables.len() as f64;
        let mean = ids
            .iter()
            .map(|id| {
                let mut acc = [0.0; 3];
                for t in &tables {
                    for (a, v) in acc.iter_mut().zip(t[id]) {
                        *a += v / n;
                    }
                }
                (*id, acc)
            })
            .collect();
        out.push((name, mean));
    }
    Ok(out)
}

pub fn compare_tables(tables: &[(String, MetricTable)], alpha: f64) -> Result<Comparison> {
    if tables.len() < 2 {
        return Err(Error::InvalidArgument("need at least two entries to compare".into()));
    }
    let s = tables.len();
    let m = s * (s - 1) / 2;
    let alpha_corr = bonferroni_threshold(alpha, m);
    let mut cells = vec![vec![None; s]; s];
    for i in 0..s {
        for j in 0..s {
            if i == j {
                continue;
            }
            let mut triple = [Cell::TooFewPairs; 3];
            for (k, cell) in triple.iter_mut().enumerate() {
                let (a, b): (Vec<f64>, Vec<f64>) = tables[i]
                    .1
                    .iter()
                    .map(|(id, v)| (v[k], tables[j].1[id][k]))
                    .filter(|(x, y)| x.is_finite() && y.is_finite())
                    .unzip();
                *cell = match wilcoxon_signed_rank(&a, &b) {
                    Ok(r) => Cell::Tested { p: r.p_value, significant: r.p_value < alpha_corr },
                    Err(Error::AllDifferencesZero) => Cell::AllDifferencesZero,
                    Err(Error::InvalidArgument(_)) => Cell::TooFewPairs,
                    Err(e) => return Err(e),
                };
            }
            cells[i][j] = Some(triple);
        }
    }
    Ok(Comparison {
        names: tables.iter().map(|t| t.0.clone()).collect(),
        alpha,
        comparisons: m,
        alpha_corr,
        cells,
    })
}

pub fn compare_runs(runs: &[(String, Vec<ReportRow>)], alpha: f64) -> Result<Comparison> {
    compare_tables(&collect_tables(runs)?, alpha)
}

/// Matrix CSV; each off-diagonal cell is `ssim|mae|psnr` p-values, `*` marking significance.
pub fn write_wilcoxon_csv(path: &Path, cmp: &Comparison) -> Result<()> {
    let mut text = format!("# alpha_corr={},m={},alpha={}\n", cmp.alpha_corr, cmp.comparisons, cmp.alpha);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["strategy".to_string()];
    header.extend(cmp.names.iter().cloned());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (i, name) in cmp.names.iter().enumerate() {
        let mut rec = vec![name.clone()];
        for cell in &cmp.cells[i] {
            rec.push(match cell {
                None => "-".into(),
                Some(t) => t.iter().map(Cell::render).collect::<Vec<_>>().join("|"),
            });
        }
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    text.push_str(&String::from_utf8(w.into_inner().map_err(|e| Error::Config(e.to_string()))?).expect("utf8"));
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
