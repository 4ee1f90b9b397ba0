//! Convergence comparison of two recorded runs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use waveqed::analysis::{convergence_metric, cost_model, CostKind};
use waveqed::series::Observable;

use crate::config::EngineKind;
use crate::record::{load_summary, read_series_csv, CsvSeries, MetricRow, RunSummary, Versions};
use crate::CliError;

/// One side of a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRef {
    pub run_id: String,
    pub engine: String,
    pub n: usize,
    /// Leading cost of the engine configuration, for the engines with a
    /// resource knob.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost: Option<f64>,
}

/// Per-observable deviation of run A from run B over [0, t_final].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareReport {
    pub a: RunRef,
    pub b: RunRef,
    pub t_final: f64,
    pub rows: Vec<MetricRow>,
    pub versions: Versions,
}

fn cost_of(summary: &RunSummary) -> Option<f64> {
    let cfg = &summary.config;
    match cfg.engine.kind {
        EngineKind::Tn => Some(cost_model(CostKind::Tn, cfg.system.n, cfg.engine.chi_tr)),
        EngineKind::Tnqs => Some(cost_model(CostKind::Nqs, cfg.system.n, cfg.engine.d_h)),
        _ => None,
    }
}

fn run_ref(summary: &RunSummary) -> RunRef {
    RunRef {
        run_id: summary.run_id.clone(),
        engine: summary.engine.clone(),
        n: summary.config.system.n,
        cost: cost_of(summary),
    }
}

/// Loads a run summary and the series it is judged by: the smoothed
/// CSV when the run wrote one, the raw CSV otherwise.
pub fn load_run(summary_path: &Path) -> Result<(RunSummary, CsvSeries), CliError> {
    let summary = load_summary(summary_path)?;
    let csv_name = summary
        .smoothed_csv
        .as_ref()
        .or(summary.csv.as_ref())
        .ok_or_else(|| {
            CliError::Config(format!(
                "summary {} records no CSV artifact",
                summary_path.display()
            ))
        })?;
    let dir = summary_path.parent().unwrap_or_else(|| Path::new("."));
    let series = read_series_csv(&dir.join(csv_name))?;
    Ok((summary, series))
}

/// Compares run A against run B as the reference.  Without an explicit
/// `t_final` the comparison covers the overlap of the two horizons.
pub fn compare_runs(
    a_path: &Path,
    b_path: &Path,
    t_final: Option<f64>,
) -> Result<CompareReport, CliError> {
    let (summary_a, series_a) = load_run(a_path)?;
    let (summary_b, series_b) = load_run(b_path)?;

    let mut columns = Vec::with_capacity(3);
    for obs in Observable::all() {
        let name = obs.column_name();
        let missing = |which: &Path| {
            CliError::Config(format!("{} lacks the {} column", which.display(), name))
        };
        let col_a = series_a.column(name).ok_or_else(|| missing(a_path))?;
        let col_b = series_b.column(name).ok_or_else(|| missing(b_path))?;
        columns.push((name, col_a, col_b));
    }
    let t_eff = t_final.unwrap_or_else(|| {
        columns
            .iter()
            .flat_map(|(_, a, b)| [&a.times, &b.times])
            .map(|times| *times.last().expect("columns are never empty"))
            .fold(f64::INFINITY, f64::min)
    });

    let mut rows = Vec::with_capacity(3);
    for (name, col_a, col_b) in columns {
        let metric =
            convergence_metric(&col_a.times, &col_a.values, &col_b.times, &col_b.values, t_eff)?;
        rows.push(MetricRow { observable: (*name).into(), metric });
    }

    Ok(CompareReport {
        a: run_ref(&summary_a),
        b: run_ref(&summary_b),
        t_final: t_eff,
        rows,
        versions: Versions::current(),
    })
}
