use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EvalReport;
use crate::data::Benchmark;
use crate::error::{Error, Result};
use crate::train::{run, InstanceCalibration, RunOptions, SemanticCalibration, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridAxis {
    /// Values are smoothing weights.
    Alpha,
    /// Values are instance temperatures.
    Temperature,
    /// Values are `<p_hat>/<q_hat>` calibration pairs, each `smoothing` or
    /// `scaling`, e.g. `smoothing/scaling`.
    Strategy,
    /// Values are `standard`, `without_p_hat` (alpha = 1),
    /// `without_q_hat` (instance target is the raw `q^w`) or `without_both`.
    ComponentRemoval,
}

impl FromStr for GridAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(Self::Alpha),
            "temperature" => Ok(Self::Temperature),
            "strategy" => Ok(Self::Strategy),
            "component_removal" => Ok(Self::ComponentRemoval),
            other => Err(Error::config(format!("unknown grid axis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub axis: GridAxis,
    pub values: Vec<String>,
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
}

fn parse_f64(value: &str) -> Result<f64> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("`{value}` is not a number")))
}

impl AblationGrid {
    /// The complete run config for one cell and seed.
    pub fn cell_config(&self, value: &str, seed: u64) -> Result<TrainConfig> {
        let mut c = TrainConfig {
            seed,
            ..self.base.clone()
        };
        match self.axis {
            GridAxis::Alpha => c.alpha = parse_f64(value)?,
            GridAxis::Temperature => c.temperature = parse_f64(value)?,
            GridAxis::Strategy => {
                let (p, q) = value
                    .split_once('/')
                    .ok_or_else(|| Error::config(format!("strategy `{value}` is not `<p>/<q>`")))?;
                c.p_calibration = match p.trim() {
                    "smoothing" => SemanticCalibration::Smoothing,
                    "scaling" => SemanticCalibration::Scaling,
                    other => return Err(Error::config(format!("unknown calibration `{other}`"))),
                };
                c.q_calibration = match q.trim() {
                    "smoothing" => InstanceCalibration::Smoothing,
                    "scaling" => InstanceCalibration::Scaling,
                    other => return Err(Error::config(format!("unknown calibration `{other}`"))),
                };
            }
            GridAxis::ComponentRemoval => match value.trim() {
                "standard" => {}
                "without_p_hat" => c.alpha = 1.0,
                "without_q_hat" => c.q_calibration = InstanceCalibration::Off,
                "without_both" => {
                    c.alpha = 1.0;
                    c.q_calibration = InstanceCalibration::Off;
                }
                other => return Err(Error::config(format!("unknown component cell `{other}`"))),
            },
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.seeds.is_empty() {
            return Err(Error::config("a grid needs at least one value and one seed"));
        }
        for v in &self.values {
            self.cell_config(v, self.seeds[0])?;
        }
        Ok(())
    }

    /// Every `(value, seed)` pair, value-major.
    pub fn cells(&self) -> Vec<(String, u64)> {
        self.values
            .iter()
            .flat_map(|v| self.seeds.iter().map(move |&s| (v.clone(), s)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub value: String,
    pub seed: u64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

/// Mean and sample standard deviation over seeds; the means are `None`
/// when any run of the cell failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub value: String,
    pub runs: usize,
    pub failed: usize,
    pub student_accuracy: Option<(f64, f64)>,
    pub ema_accuracy: Option<(f64, f64)>,
    pub pseudo_label_accuracy: Option<(f64, f64)>,
    pub unlabeled_accuracy: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResults {
    pub axis: GridAxis,
    pub results: Vec<CellResult>,
    pub summary: Vec<CellSummary>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn summarize(value: &str, results: &[CellResult]) -> CellSummary {
    let cell: Vec<&CellResult> = results.iter().filter(|r| r.value == value).collect();
    let reports: Vec<&EvalReport> = cell.iter().filter_map(|r| r.report.as_ref()).collect();
    let failed = cell.len() - reports.len();
    let stat = |f: &dyn Fn(&EvalReport) -> Option<f64>| -> Option<(f64, f64)> {
        if failed > 0 || reports.is_empty() {
            return None;
        }
        let values: Option<Vec<f64>> = reports.iter().map(|r| f(r)).collect();
        values.map(|v| mean_std(&v))
    };
    CellSummary {
        value: value.to_string(),
        runs: cell.len(),
        failed,
        student_accuracy: stat(&|r| Some(r.student_accuracy)),
        ema_accuracy: stat(&|r| Some(r.ema_accuracy)),
        pseudo_label_accuracy: stat(&|r| r.pseudo_label_accuracy),
        unlabeled_accuracy: stat(&|r| r.unlabeled_accuracy),
    }
}

fn run_dir(root: &Path, value: &str, seed: u64) -> PathBuf {
    let clean: String = value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
        .collect();
    root.join("runs").join(format!("{clean}-seed{seed}"))
}

/// Runs every cell for every seed (in parallel), then writes `results.csv`
/// and `summary.txt` under `out_dir` when given. A failing run is recorded
/// and the rest of the grid continues.
pub fn run_grid<F>(grid: &AblationGrid, make_benchmark: F, out_dir: Option<&Path>) -> Result<GridResults>
where
    F: Fn(u64) -> Result<Benchmark> + Sync,
{
    grid.validate()?;
    let results: Vec<CellResult> = grid
        .cells()
        .into_par_iter()
        .map(|(value, seed)| {
            let outcome = grid.cell_config(&value, seed).and_then(|config| {
                let bench = make_benchmark(seed)?;
                let options = RunOptions {
                    out_dir: out_dir.map(|d| run_dir(d, &value, seed)),
                    ..RunOptions::default()
                };
                let out = run(&config, &bench, options)?;
                out.final_eval()
                    .cloned()
                    .ok_or_else(|| Error::input("run produced no evaluation"))
            });
            match outcome {
                Ok(report) => CellResult {
                    value,
                    seed,
                    report: Some(report),
                    error: None,
                },
                Err(e) => CellResult {
                    value,
                    seed,
                    report: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let summary = grid.values.iter().map(|v| summarize(v, &results)).collect();
    let out = GridResults {
        axis: grid.axis,
        results,
        summary,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        out.write_csv(&dir.join("results.csv"))?;
        let path = dir.join("summary.txt");
        std::fs::write(&path, out.summary_text()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(out)
}

#[derive(Serialize)]
struct CsvRow<'a> {
    value: &'a str,
    seed: u64,
    status: &'a str,
    student_accuracy: Option<f64>,
    ema_accuracy: Option<f64>,
    pseudo_label_accuracy: Option<f64>,
    unlabeled_accuracy: Option<f64>,
    retained_fraction: Option<f64>,
    error: &'a str,
}

impl GridResults {
    /// One row per run.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.results {
            let rep = r.report.as_ref();
            w.serialize(CsvRow {
                value: &r.value,
                seed: r.seed,
                status: if rep.is_some() { "ok" } else { "failed" },
                student_accuracy: rep.map(|x| x.student_accuracy),
                ema_accuracy: rep.map(|x| x.ema_accuracy),
                pseudo_label_accuracy: rep.and_then(|x| x.pseudo_label_accuracy),
                unlabeled_accuracy: rep.and_then(|x| x.unlabeled_accuracy),
                retained_fraction: rep.and_then(|x| x.retained_fraction),
                error: r.error.as_deref().unwrap_or(""),
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Human-readable mean ± std table.
    pub fn summary_text(&self) -> String {
        let fmt = |s: Option<(f64, f64)>| match s {
            Some((m, sd)) => format!("{:6.2} ± {:5.2}", 100.0 * m, 100.0 * sd),
            None => format!("{:>14}", "n/a"),
        };
        let mut out = String::new();
        writeln!(out, "axis: {:?}", self.axis).unwrap();
        writeln!(
            out,
            "{:<24} {:>5} {:>14} {:>14} {:>14} {:>14}",
            "value", "runs", "student", "ema", "pseudo-label", "unlabeled"
        )
        .unwrap();
        for s in &self.summary {
            write!(
                out,
                "{:<24} {:>5} {} {} {} {}",
                s.value,
                s.runs,
                fmt(s.student_accuracy),
                fmt(s.ema_accuracy),
                fmt(s.pseudo_label_accuracy),
                fmt(s.unlabeled_accuracy)
            )
            .unwrap();
            if s.failed > 0 {
                write!(out, "  INCOMPLETE: {} of {} runs failed", s.failed, s.runs).unwrap();
            }
            out.push('\n');
        }
        out
    }
}
