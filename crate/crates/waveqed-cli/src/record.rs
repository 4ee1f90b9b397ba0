//! Run artifacts: deterministic ids, the CSV series format, JSON
//! summaries, and atomic file writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use waveqed::series::{Observable, ObservableSeries};
use waveqed::tnqs::TrainingLog;

use crate::config::{RunConfig, Units};
use crate::CliError;

/// Fixed header of every series CSV.
pub const CSV_HEADER: &str = "t,observable,value,stderr,engine,run_id";

/// FNV-1a over a byte string.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &byte in bytes {
        hash = (hash ^ u64::from(byte)).wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// The configuration slice that determines results; the output block is
/// excluded so moving artifacts does not rename them.
#[derive(Serialize)]
struct RunIdentity<'a> {
    units: &'a Units,
    seed: u64,
    system: &'a crate::config::SystemBlock,
    engine: &'a crate::config::EngineBlock,
    time: &'a crate::config::TimeBlock,
    train: &'a crate::config::TrainBlock,
}

/// Deterministic run id: engine, emitter count, and a hash over every
/// result-affecting key.
pub fn run_id(cfg: &RunConfig) -> String {
    let identity = RunIdentity {
        units: &cfg.units,
        seed: cfg.seed,
        system: &cfg.system,
        engine: &cfg.engine,
        time: &cfg.time,
        train: &cfg.train,
    };
    let encoded = serde_json::to_string(&identity).expect("config serialization cannot fail");
    format!("{}-n{}-{:016x}", cfg.engine.kind, cfg.system.n, fnv1a(encoded.as_bytes()))
}

/// Writes one series in the stable CSV schema, one row per time sample
/// and observable.  `extra` columns (entanglement, bond dimension) ride
/// along as additional observable names within each time group.
pub fn write_series_csv(
    path: &Path,
    series: &ObservableSeries,
    run_id: &str,
    extra: &[(&str, Vec<f64>)],
) -> Result<(), CliError> {
    for (name, values) in extra {
        if values.len() != series.times.len() {
            return Err(CliError::Config(format!(
                "extra column {} has {} values for {} samples",
                name,
                values.len(),
                series.times.len()
            )));
        }
    }
    let engine = series.engine.as_str();
    let mut text = String::with_capacity(series.times.len() * 64);
    text.push_str(CSV_HEADER);
    text.push('\n');
    for (k, (&t, point)) in series.times.iter().zip(&series.points).enumerate() {
        for obs in Observable::all() {
            let row = format!(
                "{},{},{},{},{},{}\n",
                t,
                obs.column_name(),
                point.value(obs),
                point.stderr(obs),
                engine,
                run_id
            );
            text.push_str(&row);
        }
        for (name, values) in extra {
            let row = format!("{},{},{},0,{},{}\n", t, name, values[k], engine, run_id);
            text.push_str(&row);
        }
    }
    fs::write(path, text)?;
    Ok(())
}

/// One column read back from a series CSV.
#[derive(Debug, Clone)]
pub struct CsvColumn {
    pub observable: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

/// A series CSV parsed back into per-observable columns.
#[derive(Debug, Clone)]
pub struct CsvSeries {
    pub run_id: String,
    pub engine: String,
    pub columns: Vec<CsvColumn>,
}

impl CsvSeries {
    pub fn column(&self, observable: &str) -> Option<&CsvColumn> {
        self.columns.iter().find(|c| c.observable == observable)
    }
}

/// Reads a series CSV written by [`write_series_csv`].
pub fn read_series_csv(path: &Path) -> Result<CsvSeries, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|err| CliError::Config(format!("cannot read {}: {}", path.display(), err)))?;
    let mut lines = text.lines();
    let bad = |line: usize, what: &str| {
        CliError::Config(format!("{}:{}: {}", path.display(), line, what))
    };
    match lines.next() {
        Some(header) if header == CSV_HEADER => {}
        _ => return Err(bad(1, "missing series header")),
    }
    let mut series = CsvSeries { run_id: String::new(), engine: String::new(), columns: vec![] };
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(bad(lineno, "expected 6 fields"));
        }
        let t: f64 = fields[0].parse().map_err(|_| bad(lineno, "bad time"))?;
        let value: f64 = fields[2].parse().map_err(|_| bad(lineno, "bad value"))?;
        if series.columns.is_empty() {
            series.engine = fields[4].to_string();
            series.run_id = fields[5].to_string();
        } else if series.engine != fields[4] {
            return Err(bad(lineno, "engine changes mid-file"));
        }
        let name = fields[1];
        match series.columns.iter_mut().find(|c| c.observable == name) {
            Some(column) => {
                column.times.push(t);
                column.values.push(value);
            }
            None => series.columns.push(CsvColumn {
                observable: name.to_string(),
                times: vec![t],
                values: vec![value],
            }),
        }
    }
    if series.columns.is_empty() {
        return Err(bad(2, "no data rows"));
    }
    Ok(series)
}

/// Crate versions stamped into artifacts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Versions {
    pub waveqed: String,
    pub cli: String,
}

impl Versions {
    pub fn current() -> Self {
        Versions { waveqed: waveqed::VERSION.into(), cli: env!("CARGO_PKG_VERSION").into() }
    }
}

/// Largest smoothed right-channel intensity and where it occurs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakIr {
    pub value: f64,
    pub time: f64,
}

/// One observable's deviation metric against a reference run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub observable: String,
    pub metric: f64,
}

/// JSON record of one run.  The peak is extracted from the smoothed
/// intensity; the raw series lives in the sibling CSV named by `csv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub engine: String,
    pub units: Units,
    pub seed: u64,
    pub config: RunConfig,
    pub config_hash: u64,
    pub samples: usize,
    pub peak_ir: PeakIr,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub peak_bond: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discarded_weight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub training: Option<Vec<TrainingLog>>,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convergence: Option<Vec<MetricRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smoothed_csv: Option<String>,
    pub versions: Versions,
}

/// Reads a run summary back from disk.
pub fn load_summary(path: &Path) -> Result<RunSummary, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|err| CliError::Config(format!("cannot read {}: {}", path.display(), err)))?;
    serde_json::from_str(&text)
        .map_err(|err| CliError::Config(format!("summary {}: {}", path.display(), err)))
}

/// Serializes `value` to pretty JSON and moves it into place, so a
/// half-written file is never observed at `path`.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(text.as_bytes())?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Quotes one CSV field, doubling interior quotes, when it contains a
/// delimiter, quote, or newline.
pub fn csv_quote(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}
