// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

use crate::eval::EvalError;
use crate::manifest::ManifestError;
use crate::matcher::MatchError;
use crate::protocol::ProtocolError;
use crate::security::SecurityError;
use crate::synth::SynthError;
use crate::template::TemplateError;
use crate::trace::TraceError;

/// Any error raised by this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Security(#[from] SecurityError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}
