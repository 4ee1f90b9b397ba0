//! Time-series containers shared by every engine.
//!
//! Times are expressed in units of the inverse total decay rate. Exact
//! engines report zero standard errors; sampling engines fill them from the
//! estimator spread, and validation widens its magnetization bound by the
//! reported error so that statistical excursions are not rejected.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by grid construction and series validation.
#[derive(Debug, Error)]
pub enum SeriesError {
    #[error("time step must be positive and finite, got {dt}")]
    BadStep { dt: f64 },
    #[error("horizon {t_final} must cover at least one step of {dt}")]
    BadHorizon { t_final: f64, dt: f64 },
    #[error("series holds {times} times but {points} points")]
    LengthMismatch { times: usize, points: usize },
    #[error("times must increase strictly at index {index}")]
    TimesNotIncreasing { index: usize },
    #[error("magnetization {value} out of range at index {index}")]
    MagnetizationOutOfRange { index: usize, value: f64 },
}

/// Identifies which engine produced a series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineTag {
    Ed,
    Dicke,
    Tn,
    PovmExact,
    PovmSampled,
    Tnqs,
}

impl EngineTag {
    /// Stable lowercase name used in CSV output and run identifiers.
    pub fn as_str(self) -> &'static str {
        match self {
            EngineTag::Ed => "ed",
            EngineTag::Dicke => "dicke",
            EngineTag::Tn => "tn",
            EngineTag::PovmExact => "povm-exact",
            EngineTag::PovmSampled => "povm-sampled",
            EngineTag::Tnqs => "tnqs",
        }
    }
}

impl std::fmt::Display for EngineTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One of the three reported observables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Observable {
    /// Mean magnetization (1/n) Σ_j ⟨σ_j^z⟩.
    Z,
    /// Magnetization fluctuations (1/n) Σ_{jℓ} (⟨σ_j^z σ_ℓ^z⟩ − ⟨σ_j^z⟩⟨σ_ℓ^z⟩),
    /// diagonal terms included.
    Fz2,
    /// Right-moving emission intensity ⟨c_R† c_R⟩/n.
    Ir,
}

impl Observable {
    /// Column name used in CSV output.
    pub fn column_name(self) -> &'static str {
        match self {
            Observable::Z => "z",
            Observable::Fz2 => "fz2",
            Observable::Ir => "ir",
        }
    }

    /// All observables in output order.
    pub fn all() -> [Observable; 3] {
        [Observable::Z, Observable::Fz2, Observable::Ir]
    }
}

/// Observable values at one time, with per-field standard errors.
///
/// Exact engines leave every error at zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservablePoint {
    pub z: f64,
    pub fz2: f64,
    pub ir: f64,
    pub z_err: f64,
    pub fz2_err: f64,
    pub ir_err: f64,
}

impl ObservablePoint {
    /// Point with the given values and zero standard errors.
    pub fn exact(z: f64, fz2: f64, ir: f64) -> Self {
        ObservablePoint {
            z,
            fz2,
            ir,
            z_err: 0.0,
            fz2_err: 0.0,
            ir_err: 0.0,
        }
    }

    pub fn value(&self, obs: Observable) -> f64 {
        match obs {
            Observable::Z => self.z,
            Observable::Fz2 => self.fz2,
            Observable::Ir => self.ir,
        }
    }

    pub fn stderr(&self, obs: Observable) -> f64 {
        match obs {
            Observable::Z => self.z_err,
            Observable::Fz2 => self.fz2_err,
            Observable::Ir => self.ir_err,
        }
    }
}

/// Provenance attached to a series: the sampling seed when one was used, the
/// integration step, a fingerprint of the generating configuration, and any
/// diagnostic warnings collected during the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub seed: Option<u64>,
    pub dt: f64,
    pub config_hash: u64,
    pub warnings: Vec<String>,
}

impl RunMeta {
    pub fn new(dt: f64, config_hash: u64) -> Self {
        RunMeta {
            seed: None,
            dt,
            config_hash,
            warnings: Vec::new(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }
}

/// Observable trajectory produced by one engine run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObservableSeries {
    pub engine: EngineTag,
    pub meta: RunMeta,
    pub times: Vec<f64>,
    pub points: Vec<ObservablePoint>,
}

impl ObservableSeries {
    pub fn new(engine: EngineTag, meta: RunMeta) -> Self {
        ObservableSeries {
            engine,
            meta,
            times: Vec::new(),
            points: Vec::new(),
        }
    }

    pub fn push(&mut self, t: f64, point: ObservablePoint) {
        self.times.push(t);
        self.points.push(point);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Values of one observable across all times.
    pub fn column(&self, obs: Observable) -> Vec<f64> {
        self.points.iter().map(|p| p.value(obs)).collect()
    }

    /// Standard errors of one observable across all times.
    pub fn stderr_column(&self, obs: Observable) -> Vec<f64> {
        self.points.iter().map(|p| p.stderr(obs)).collect()
    }

    /// Checks structural invariants: matching lengths, strictly increasing
    /// times, and magnetization within [−1, 1] up to numerical slack plus a
    /// six-standard-error statistical allowance.
    pub fn validate(&self) -> Result<(), SeriesError> {
        if self.times.len() != self.points.len() {
            return Err(SeriesError::LengthMismatch {
                times: self.times.len(),
                points: self.points.len(),
            });
        }
        for i in 1..self.times.len() {
            if self.times[i] <= self.times[i - 1] {
                return Err(SeriesError::TimesNotIncreasing { index: i });
            }
        }
        for (i, p) in self.points.iter().enumerate() {
            let bound = 1.0 + 1e-8 + 6.0 * p.z_err;
            // NaN magnetization must fail the bound check too.
            if p.z.is_nan() || p.z.abs() > bound {
                return Err(SeriesError::MagnetizationOutOfRange {
                    index: i,
                    value: p.z,
                });
            }
        }
        Ok(())
    }
}

/// Uniform time grid: samples at k·dt for k = 0..=steps, where steps is the
/// nearest integer to t_final/dt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_final: f64,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(t_final: f64, dt: f64) -> Result<Self, SeriesError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SeriesError::BadStep { dt });
        }
        if !(t_final >= dt && t_final.is_finite()) {
            return Err(SeriesError::BadHorizon { t_final, dt });
        }
        Ok(TimeGrid { t_final, dt })
    }

    /// Number of integration steps; the grid holds steps + 1 samples
    /// including t = 0.
    pub fn steps(&self) -> usize {
        ((self.t_final / self.dt).round() as usize).max(1)
    }

    /// Sample times, k·dt for k = 0..=steps.
    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps()).map(|k| k as f64 * self.dt).collect()
    }
}
