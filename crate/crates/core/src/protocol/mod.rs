// SPDX-License-Identifier: Apache-2.0

//! Executable model of the attestation protocol.
//!
//! Four actors take part: the verifier `V`, the untrusted prover `P`, the
//! prover's trusted execution environment `TEE`, and the measurements tray
//! `MT` that holds the templates. Each actor is a single-threaded state
//! machine driven by [`actors::Input`]s; a router delivers messages between
//! them on a virtual clock ([`net`]) and lets an adversary read, drop,
//! rewrite or inject bytes on any network link.
//!
//! Message flow for one session:
//!
//! | step | link     | message |
//! |------|----------|---------|
//! | 1    | V → P    | `M1 = <r1, A>` |
//! | 2    | P → TEE  | launch for `A`, TEE answers with a fresh `pk_TEE` |
//! | 3    | P → V    | `M2 = <r2, Enc_V(P, res, pk_TEE), sig_P(H1)>` |
//! | 4    | V → P    | `M3 = <r3, n, tau, A, sig_V(H2)>` |
//! | 5    | P → TEE  | physical executions, then an acknowledgement |
//! | 6    | TEE → P  | `M4 = <r4, Enc_V(tr_1..tr_n), sig_TEE(H3)>` |
//! | 7    | P → V    | `M5 = <r5, M4, H(tau, A), out, sig_P(H4)>` |
//! | 8    | V → MT   | `M6 = <r6, Enc_MT(tau, out, A, traces), sig_V(H5)>` |
//! | 9    | MT → V   | `M7 = <r7, Enc_V(b), sig_MT(H6)>` |
//!
//! Hash inputs, each framed field by field:
//!
//! - `H1 = H(r2, P, res, pk_TEE)`
//! - `H2 = H(r3, tau, A, n)`
//! - `H3 = H(r4, tr_1, ..., tr_n)`
//! - `H4 = H(r5, M4, out)`
//! - `H5 = H(r6, tau, A, out, tr_1, ..., tr_n)`
//! - `H6 = H(r7, b)`
//!
//! Steps 4 to 7 repeat until `V` holds `n` traces when rounds are smaller
//! than the batch; `M6` then carries every round's `(tau, out)` pair.

pub mod actors;
pub mod attacks;
pub mod checksum;
pub mod crypto;
pub mod net;
pub mod session;
pub mod transcript;
pub mod wire;

use std::fmt;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use actors::{Phase, ProverMode, Workload};
pub use crypto::ProtocolParameters;
pub use session::{build_template_store, SessionOutcome, Simulation, SimulationConfig, TemplateStore, World};
pub use transcript::TranscriptEntry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "V")]
    Verifier,
    #[serde(rename = "P")]
    Prover,
    #[serde(rename = "TEE")]
    Tee,
    #[serde(rename = "MT")]
    Tray,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Verifier, Role::Prover, Role::Tee, Role::Tray];

    pub fn label(self) -> &'static str {
        match self {
            Role::Verifier => "V",
            Role::Prover => "P",
            Role::Tee => "TEE",
            Role::Tray => "MT",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Why an actor refused a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AbortReason {
    BadSignature,
    StaleNonce,
    TimingExceeded,
    ChecksumMismatch,
    FingerprintMismatch,
    UnknownApplication,
    Undecryptable,
    Malformed,
    OutOfPhase,
    Timeout,
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("no profile for application {0}")]
    UnknownApplication(String),
    #[error("attack branch {branch} was accepted by the verifier")]
    HarnessFailure { branch: String },
    #[error("no message to replay: run an honest session first")]
    NothingRecorded,
    #[error("transcript line {line}: {reason}")]
    BadTranscript { line: usize, reason: String },
    #[error(transparent)]
    Template(#[from] crate::template::TemplateError),
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
    #[error(transparent)]
    Io(#[from] io::Error),
}
