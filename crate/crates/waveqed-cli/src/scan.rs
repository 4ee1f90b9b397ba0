//! Spacing scans: one run per epsilon, peak extraction, quadratic fit,
//! and the perturbative overlay.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use waveqed::analysis::PeakScan;

use crate::config::{OutputFormat, RunConfig, SpacingMode};
use crate::record::{csv_quote, run_id, write_json_atomic, Versions};
use crate::run::run_scenario;
use crate::CliError;

/// One measured peak of the scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub epsilon: f64,
    pub peak: f64,
    pub peak_time: f64,
    pub run_id: String,
}

/// One scan entry that failed; the scan continues past it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanFailure {
    pub epsilon: f64,
    pub error: String,
}

/// Quadratic trend of the measured peaks in x = 100 epsilon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitLine {
    pub c2: f64,
    pub c0: f64,
}

/// Perturbative prediction at one spacing, anchored to the measured
/// commensurate peak.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionPoint {
    pub epsilon: f64,
    pub predicted: f64,
}

/// Index of a finished scan, written atomically next to its table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanIndex {
    pub scan_id: String,
    pub engine: String,
    pub n: usize,
    pub epsilons: Vec<f64>,
    pub points: Vec<ScanPoint>,
    pub failures: Vec<ScanFailure>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitLine>,
    pub prediction: Vec<PredictionPoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
    pub versions: Versions,
}

/// Scan identity: the base run identity with the spacing replaced by
/// the epsilon list.
fn scan_id(base: &RunConfig, epsilons: &[f64]) -> String {
    let mut probe = base.clone();
    probe.system.spacing = SpacingMode::Explicit {
        phases: epsilons.iter().map(|&e| e.abs()).collect(),
    };
    let base_id = run_id(&probe);
    let hash = base_id.rsplit('-').next().unwrap_or("0");
    format!("scan-{}-n{}-{}", base.engine.kind, base.system.n, hash)
}

/// Runs the base scenario once per epsilon with uniform-epsilon
/// spacing, extracts the smoothed peak intensity of each run, and fits
/// the trend.  Individual run failures are recorded and the scan moves
/// on; the caller decides how to surface them.
pub fn scan_epsilon(base: &RunConfig, epsilons: &[f64]) -> Result<ScanIndex, CliError> {
    if epsilons.is_empty() {
        return Err(CliError::Config("epsilon list must not be empty".into()));
    }
    for (i, eps) in epsilons.iter().enumerate() {
        if epsilons[..i].contains(eps) {
            return Err(CliError::Config(format!("duplicate epsilon {eps}")));
        }
    }

    let mut points = Vec::new();
    let mut failures = Vec::new();
    for &epsilon in epsilons {
        let mut cfg = base.clone();
        cfg.system.spacing = SpacingMode::UniformEpsilon { epsilon };
        match run_scenario(&cfg, None) {
            Ok(summary) => points.push(ScanPoint {
                epsilon,
                peak: summary.peak_ir.value,
                peak_time: summary.peak_ir.time,
                run_id: summary.run_id,
            }),
            Err(err) => {
                eprintln!("scan entry epsilon = {epsilon} failed: {err}");
                failures.push(ScanFailure { epsilon, error: err.to_string() });
            }
        }
    }

    // The quadratic trend and its perturbative anchor are defined for
    // stretched spacings only; compressed-spacing points stay in the
    // table without a prediction.
    let measured: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.epsilon >= 0.0)
        .map(|p| (p.epsilon, p.peak))
        .collect();
    let (fit, prediction) = if measured.is_empty() {
        (None, Vec::new())
    } else {
        let scan = PeakScan::new(measured, base.system.n)?;
        (
            scan.fit.map(|(c2, c0)| FitLine { c2, c0 }),
            scan.prediction
                .into_iter()
                .map(|(epsilon, predicted)| PredictionPoint { epsilon, predicted })
                .collect(),
        )
    };

    let mut index = ScanIndex {
        scan_id: scan_id(base, epsilons),
        engine: base.engine.kind.as_str().into(),
        n: base.system.n,
        epsilons: epsilons.to_vec(),
        points,
        failures,
        fit,
        prediction,
        csv: None,
        versions: Versions::current(),
    };

    let out_dir = base.out_dir();
    std::fs::create_dir_all(&out_dir).map_err(|err| {
        CliError::Config(format!("cannot create output dir {}: {}", out_dir.display(), err))
    })?;
    if base.wants(OutputFormat::Csv) {
        let name = format!("{}.csv", index.scan_id);
        std::fs::write(out_dir.join(&name), table_csv(&index))?;
        index.csv = Some(name);
    }
    if base.wants(OutputFormat::Json) {
        write_json_atomic(&out_dir.join(format!("{}.json", index.scan_id)), &index)?;
    }
    Ok(index)
}

/// The scan table: one row per requested epsilon, successful or not.
fn table_csv(index: &ScanIndex) -> String {
    let mut text = String::from("epsilon,peak,peak_time,predicted,run_id,status\n");
    for &epsilon in &index.epsilons {
        if let Some(point) = index.points.iter().find(|p| p.epsilon == epsilon) {
            let predicted = index
                .prediction
                .iter()
                .find(|p| p.epsilon == epsilon)
                .map(|p| p.predicted.to_string())
                .unwrap_or_default();
            writeln!(
                text,
                "{},{},{},{},{},ok",
                epsilon, point.peak, point.peak_time, predicted, point.run_id
            )
            .expect("string writes cannot fail");
        } else {
            let error = index
                .failures
                .iter()
                .find(|f| f.epsilon == epsilon)
                .map(|f| f.error.as_str())
                .unwrap_or("not run");
            writeln!(text, "{},,,,,{}", epsilon, csv_quote(error))
                .expect("string writes cannot fail");
        }
    }
    text
}
