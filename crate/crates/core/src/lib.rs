// SPDX-License-Identifier: Apache-2.0

//! Remote power-analysis attestation.
//!
//! A prover runs a program while an on-chip ADC samples the supply voltage.
//! A verifier decides whether the program that ran is the one it asked for by
//! correlating the captured traces with a per-program template.
//!
//! - [`trace`]: the trace model, the raw capture layout, trigger detection
//!   and length buckets.
//! - [`synth`]: deterministic synthetic captures standing in for hardware.
//! - [`savgol`] and [`template`]: template construction and threshold
//!   calibration.
//! - [`matcher`]: Pearson correlation and attestation decisions.
//! - [`eval`]: confusion statistics over a labelled corpus.
//! - [`security`]: binomial parameterisation of multi-trace attestation.
//! - [`protocol`]: the verifier / prover / TEE / measurements-tray protocol
//!   over simulated channels, with adversary harnesses.
//! - [`manifest`]: corpus manifests that back labelled trace sets.
//!
//! The `book/` directory holds a longer guide; its code blocks are compiled
//! as doctests of this crate.

pub mod eval;
pub mod manifest;
pub mod matcher;
pub mod protocol;
pub mod savgol;
pub mod security;
pub mod synth;
pub mod template;
pub mod trace;

mod error;

pub use error::Error;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/capture.md")]
    mod capture {}
    #[doc = include_str!("../../../book/src/synthesis.md")]
    mod synthesis {}
    #[doc = include_str!("../../../book/src/templates.md")]
    mod templates {}
    #[doc = include_str!("../../../book/src/matching.md")]
    mod matching {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/security.md")]
    mod security {}
    #[doc = include_str!("../../../book/src/protocol.md")]
    mod protocol {}
}
