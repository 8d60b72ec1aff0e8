// SPDX-License-Identifier: Apache-2.0

use std::io;
use std::path::{Path, PathBuf};

use power_attest::protocol::ProtocolError;
use serde::Serialize;
use thiserror::Error;

/// Exit status for a negative attestation result.
pub const EXIT_NEGATIVE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Core(#[from] power_attest::Error),
}

impl CliError {
    pub fn io(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.to_owned(),
            source,
        }
    }

    /// `validation` for bad arguments, configs and input files; `internal`
    /// for I/O failures; `negative` when an adversary branch got through.
    pub fn kind(&self) -> &'static str {
        use power_attest::Error as E;
        match self {
            CliError::Validation(_) => "validation",
            CliError::Io { .. } => "internal",
            CliError::Core(e) => match e {
                E::Protocol(ProtocolError::HarnessFailure { .. }) => "negative",
                E::Protocol(ProtocolError::NothingRecorded) => "internal",
                E::Protocol(ProtocolError::Io(_)) => "internal",
                E::Trace(power_attest::trace::TraceError::Io(_)) => "internal",
                E::Template(power_attest::template::TemplateError::Io(_)) => "internal",
                E::Synth(power_attest::synth::SynthError::Io(_)) => "internal",
                E::Manifest(power_attest::manifest::ManifestError::Io(_)) => "internal",
                _ => "validation",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "negative" => EXIT_NEGATIVE,
            "validation" => EXIT_VALIDATION,
            _ => EXIT_INTERNAL,
        }
    }

    pub fn report(&self, stage: Option<&str>) -> ErrorReport {
        ErrorReport {
            stage: stage.map(str::to_owned),
            kind: self.kind(),
            exit_code: self.exit_code(),
            message: self.to_string(),
        }
    }
}

macro_rules! core_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Core(e.into())
            }
        }
    )*};
}

core_from!(
    power_attest::trace::TraceError,
    power_attest::synth::SynthError,
    power_attest::template::TemplateError,
    power_attest::matcher::MatchError,
    power_attest::eval::EvalError,
    power_attest::security::SecurityError,
    power_attest::manifest::ManifestError,
    ProtocolError
);

/// Machine-readable failure, printed to stderr and written as `error.json`
/// by the pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ErrorReport {
    pub stage: Option<String>,
    pub kind: &'static str,
    pub exit_code: i32,
    pub message: String,
}
