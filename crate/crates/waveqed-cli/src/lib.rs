//! Scenario orchestration for the waveguide-emitter engines: layered
//! configuration, engine dispatch, artifact emission, spacing scans,
//! and run comparison.
//!
//! Artifacts are bit-stable for the deterministic engines: run ids
//! derive from the resolved configuration and seed alone, floats are
//! written in shortest round-trip form, and wall-clock timing goes to
//! stderr, never into a file.

pub mod compare;
pub mod config;
pub mod record;
pub mod run;
pub mod scan;

use thiserror::Error;
use waveqed::analysis::AnalysisError;
use waveqed::ed::EdError;
use waveqed::model::ModelError;
use waveqed::povm::PovmError;
use waveqed::series::SeriesError;
use waveqed::tn::TnError;
use waveqed::tnqs::TnqsError;

/// Failure classes carrying their process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    /// Unusable configuration, arguments, or input files.
    #[error("{0}")]
    Config(String),
    /// An engine refused the requested size or structure.
    #[error("{0}")]
    Guard(String),
    /// The computation itself broke down.
    #[error("{0}")]
    Numerical(String),
    /// A scan finished but some of its entries failed.
    #[error("{0}")]
    Partial(String),
}

impl CliError {
    /// Process exit code: 2 config, 3 guard, 4 numerical, 5 partial.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Guard(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Partial(_) => 5,
        }
    }
}

/// Error text with every source in the chain appended.
fn chain_text(err: &dyn std::error::Error) -> String {
    let mut text = err.to_string();
    let mut source = err.source();
    while let Some(cause) = source {
        text.push_str(": ");
        text.push_str(&cause.to_string());
        source = cause.source();
    }
    text
}

impl From<ModelError> for CliError {
    fn from(err: ModelError) -> Self {
        CliError::Config(chain_text(&err))
    }
}

impl From<SeriesError> for CliError {
    fn from(err: SeriesError) -> Self {
        CliError::Config(chain_text(&err))
    }
}

impl From<AnalysisError> for CliError {
    fn from(err: AnalysisError) -> Self {
        CliError::Config(chain_text(&err))
    }
}

impl From<EdError> for CliError {
    fn from(err: EdError) -> Self {
        match err {
            EdError::GuardExceeded { .. }
            | EdError::SuperoperatorTooLarge { .. }
            | EdError::NotCollective => CliError::Guard(chain_text(&err)),
            EdError::Model(inner) => inner.into(),
            _ => CliError::Config(chain_text(&err)),
        }
    }
}

impl From<TnError> for CliError {
    fn from(err: TnError) -> Self {
        match err {
            TnError::NumericalCollapse { .. } | TnError::Linalg(_) => {
                CliError::Numerical(chain_text(&err))
            }
            _ => CliError::Config(chain_text(&err)),
        }
    }
}

impl From<PovmError> for CliError {
    fn from(err: PovmError) -> Self {
        match err {
            PovmError::GuardExceeded { .. } => CliError::Guard(chain_text(&err)),
            PovmError::NormalizationDrift { .. } => CliError::Numerical(chain_text(&err)),
            _ => CliError::Config(chain_text(&err)),
        }
    }
}

impl From<TnqsError> for CliError {
    fn from(err: TnqsError) -> Self {
        match err {
            TnqsError::Diverged { .. } | TnqsError::EvolveAborted { .. } => {
                CliError::Numerical(chain_text(&err))
            }
            TnqsError::Povm(inner) => inner.into(),
            TnqsError::Analysis(inner) => inner.into(),
            _ => CliError::Config(chain_text(&err)),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Config(chain_text(&err))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(err: serde_json::Error) -> Self {
        CliError::Config(chain_text(&err))
    }
}
