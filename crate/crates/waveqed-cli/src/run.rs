//! Engine dispatch: one resolved configuration in, one set of artifacts
//! out.

use std::path::{Path, PathBuf};
use std::time::Instant;

use waveqed::analysis::{peak_intensity, smooth_series};
use waveqed::ed::{self, evolve_dicke, evolve_ed};
use waveqed::model::build_lindblad_terms;
use waveqed::povm::{build_frames, build_generator_blocks, evolve_povm_exact, rho_to_probs};
use waveqed::series::{Observable, ObservableSeries, TimeGrid};
use waveqed::tn::evolve_tn;
use waveqed::tnqs::{evolve_tnqs, TrainingLog};

use crate::config::{EngineKind, OutputFormat, RunConfig};
use crate::record::{
    load_summary, read_series_csv, run_id, write_json_atomic, write_series_csv, MetricRow,
    PeakIr, RunSummary, Versions,
};
use crate::CliError;

/// Savitzky-Golay window used for peak extraction, auto-reduced for
/// short series.
pub const PEAK_SMOOTH_WINDOW: usize = 201;
/// Polynomial order of the peak-extraction filter.
pub const PEAK_SMOOTH_ORDER: usize = 3;

/// Everything an engine hands back; the optional channels are filled by
/// the engines that produce them.
pub struct EngineOutput {
    pub series: ObservableSeries,
    pub smoothed: Option<ObservableSeries>,
    pub entanglement: Option<Vec<f64>>,
    pub max_bond: Option<Vec<usize>>,
    pub e_max: Option<f64>,
    pub discarded_weight: Option<f64>,
    pub logs: Option<Vec<TrainingLog>>,
}

impl EngineOutput {
    fn plain(series: ObservableSeries) -> Self {
        EngineOutput {
            series,
            smoothed: None,
            entanglement: None,
            max_bond: None,
            e_max: None,
            discarded_weight: None,
            logs: None,
        }
    }
}

/// Runs the selected engine on the resolved configuration.
pub fn execute(cfg: &RunConfig) -> Result<EngineOutput, CliError> {
    let system = cfg.system.to_system()?;
    let grid = TimeGrid::new(cfg.time.t_total, cfg.time.dt)?;
    match cfg.engine.kind {
        EngineKind::Ed => {
            let terms = build_lindblad_terms(&system)?;
            let rho0 = ed::initial_state(system.n)?;
            Ok(EngineOutput::plain(evolve_ed(&terms, &rho0, &grid)?))
        }
        EngineKind::Dicke => Ok(EngineOutput::plain(evolve_dicke(&system, &grid)?)),
        EngineKind::Tn => {
            let terms = build_lindblad_terms(&system)?;
            let policy = cfg.engine.truncation()?;
            let run = evolve_tn(&terms, &policy, &grid)?;
            Ok(EngineOutput {
                series: run.series,
                smoothed: None,
                entanglement: Some(run.entanglement),
                max_bond: Some(run.max_bond),
                e_max: Some(run.e_max),
                discarded_weight: Some(run.discarded_weight),
                logs: None,
            })
        }
        EngineKind::PovmExact => {
            let terms = build_lindblad_terms(&system)?;
            let frame = build_frames();
            let generator = build_generator_blocks(&terms, &frame);
            let p0 = rho_to_probs(&ed::initial_state(system.n)?, &frame)?;
            Ok(EngineOutput::plain(evolve_povm_exact(&generator, &p0, &grid)?))
        }
        EngineKind::Tnqs => {
            let terms = build_lindblad_terms(&system)?;
            let frame = build_frames();
            let generator = build_generator_blocks(&terms, &frame);
            let p0 = rho_to_probs(&ed::initial_state(system.n)?, &frame)?;
            let run = evolve_tnqs(
                &generator,
                &p0,
                &cfg.engine.architecture(),
                &cfg.train_config(),
                cfg.intervals()?,
                cfg.seed,
            )?;
            Ok(EngineOutput {
                series: run.series,
                smoothed: Some(run.smoothed),
                entanglement: None,
                max_bond: None,
                e_max: None,
                discarded_weight: None,
                logs: Some(run.logs),
            })
        }
    }
}

/// The series a run is judged by: its own smoothed output when the
/// engine produces one, otherwise the raw series smoothed with the
/// peak-extraction filter.
fn smoothed_view(output: &EngineOutput) -> Result<ObservableSeries, CliError> {
    match &output.smoothed {
        Some(series) => Ok(series.clone()),
        None => Ok(smooth_series(&output.series, PEAK_SMOOTH_WINDOW, PEAK_SMOOTH_ORDER)?),
    }
}

/// Convergence rows of `series` against the reference summary on disk,
/// over the overlap of the two time ranges.
fn convergence_rows(
    series: &ObservableSeries,
    reference_path: &Path,
) -> Result<(String, Vec<MetricRow>), CliError> {
    let reference = load_summary(reference_path)?;
    let csv_name = reference
        .smoothed_csv
        .as_ref()
        .or(reference.csv.as_ref())
        .ok_or_else(|| {
            CliError::Config(format!(
                "reference {} records no CSV artifact",
                reference_path.display()
            ))
        })?;
    let dir = reference_path.parent().unwrap_or_else(|| Path::new("."));
    let ref_series = read_series_csv(&dir.join(csv_name))?;

    let last = *series.times.last().expect("series is never empty");
    let mut rows = Vec::with_capacity(3);
    for obs in Observable::all() {
        let column = ref_series.column(obs.column_name()).ok_or_else(|| {
            CliError::Config(format!(
                "reference CSV lacks the {} column",
                obs.column_name()
            ))
        })?;
        let ref_last = *column.times.last().expect("columns are never empty");
        let t_final = last.min(ref_last);
        let metric = waveqed::analysis::convergence_metric(
            &series.times,
            &series.column(obs),
            &column.times,
            &column.values,
            t_final,
        )?;
        rows.push(MetricRow { observable: obs.column_name().into(), metric });
    }
    Ok((reference.run_id, rows))
}

/// Executes one scenario and writes its artifacts into the output
/// directory.  Timing goes to stderr; the files carry none.
pub fn run_scenario(cfg: &RunConfig, reference: Option<&Path>) -> Result<RunSummary, CliError> {
    let id = run_id(cfg);
    let started = Instant::now();
    let output = execute(cfg)?;
    eprintln!("run {id}: engine finished in {:.2?}", started.elapsed());

    let smoothed = smoothed_view(&output)?;
    let (peak_value, peak_time) =
        peak_intensity(&smoothed.times, &smoothed.column(Observable::Ir))?;

    let out_dir = cfg.out_dir();
    std::fs::create_dir_all(&out_dir).map_err(|err| {
        CliError::Config(format!("cannot create output dir {}: {}", out_dir.display(), err))
    })?;

    let mut csv_name = None;
    let mut smoothed_csv_name = None;
    if cfg.wants(OutputFormat::Csv) {
        let mut extra: Vec<(&str, Vec<f64>)> = Vec::new();
        if let Some(oe) = &output.entanglement {
            extra.push(("oe", oe.clone()));
        }
        if let Some(bonds) = &output.max_bond {
            extra.push(("chi", bonds.iter().map(|&b| b as f64).collect()));
        }
        let name = format!("{id}.csv");
        write_series_csv(&out_dir.join(&name), &output.series, &id, &extra)?;
        csv_name = Some(name);
        if output.smoothed.is_some() {
            let name = format!("{id}.smoothed.csv");
            write_series_csv(&out_dir.join(&name), &smoothed, &format!("{id}-smoothed"), &[])?;
            smoothed_csv_name = Some(name);
        }
    }

    let (reference_id, rows) = match reference {
        Some(path) => {
            let judged = if output.smoothed.is_some() { &smoothed } else { &output.series };
            let (ref_id, rows) = convergence_rows(judged, path)?;
            (Some(ref_id), Some(rows))
        }
        None => (None, None),
    };

    let mut warnings = output.series.meta.warnings.clone();
    warnings.extend(smoothed.meta.warnings.iter().cloned());
    warnings.dedup();

    let summary = RunSummary {
        run_id: id.clone(),
        engine: cfg.engine.kind.as_str().into(),
        units: cfg.units,
        seed: cfg.seed,
        config: cfg.clone(),
        config_hash: output.series.meta.config_hash,
        samples: output.series.len(),
        peak_ir: PeakIr { value: peak_value, time: peak_time },
        e_max: output.e_max,
        peak_bond: output.max_bond.as_ref().and_then(|b| b.iter().max().copied()),
        discarded_weight: output.discarded_weight,
        final_loss: output.logs.as_ref().and_then(|logs| logs.last().map(|l| l.exit_loss)),
        training: output.logs,
        warnings,
        reference: reference_id,
        convergence: rows,
        csv: csv_name,
        smoothed_csv: smoothed_csv_name,
        versions: Versions::current(),
    };
    if cfg.wants(OutputFormat::Json) {
        write_json_atomic(&out_dir.join(format!("{id}.json")), &summary)?;
    }
    Ok(summary)
}

/// Path of the summary a finished run wrote, when JSON output is on.
pub fn summary_path(cfg: &RunConfig, summary: &RunSummary) -> Option<PathBuf> {
    cfg.wants(OutputFormat::Json)
        .then(|| cfg.out_dir().join(format!("{}.json", summary.run_id)))
}
