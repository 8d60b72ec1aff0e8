// SPDX-License-Identifier: Apache-2.0

//! Adversaries and the harnesses that run them against a deployment.
//!
//! - Measurement substitution: the adversary controls `P` and swaps the
//!   TEE's `M4` for an old one (verbatim or with a fresh nonce) or for a
//!   fabricated one under a made-up signature.
//! - False result: the adversary sits between `MT` and `V` and rewrites
//!   `M7`, either substituting the encrypted bit or replaying an old `M7`.
//! - Application substitution: `P` runs a different program than the one
//!   requested, and the harness measures how often `V` still gets `b = 1`.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use serde::{Deserialize, Serialize};

use super::crypto::PublicKeys;
use super::net::Interposer;
use super::session::{SessionOutcome, Simulation};
use super::wire::{encode_trace_batch, Message};
use super::{AbortReason, ProtocolError, Role};
use crate::security::{RateEstimate, SIMULATION_CONFIDENCE};

/// Passes everything through and keeps a copy of every message with `tag`
/// on the link `from -> to`.
#[derive(Debug)]
pub struct Recorder {
    pub from: Role,
    pub to: Role,
    pub tag: u8,
    pub recorded: Vec<Vec<u8>>,
}

impl Recorder {
    pub fn new(from: Role, to: Role, tag: u8) -> Self {
        Self {
            from,
            to,
            tag,
            recorded: Vec::new(),
        }
    }
}

impl Interposer for Recorder {
    fn intercept(&mut self, _: u64, from: Role, to: Role, bytes: Vec<u8>) -> Vec<Vec<u8>> {
        if (from, to) == (self.from, self.to) && bytes.first() == Some(&self.tag) {
            self.recorded.push(bytes.clone());
        }
        vec![bytes]
    }
}

/// Flips bits of one byte of the first message with `tag`. `offset` is
/// taken modulo the message length, counted from the end when
/// `from_end` is set.
#[derive(Debug, Clone)]
pub struct FlipByte {
    pub tag: u8,
    pub offset: usize,
    pub from_end: bool,
    pub mask: u8,
    pub done: bool,
}

impl FlipByte {
    pub fn new(tag: u8, offset: usize, mask: u8) -> Self {
        Self {
            tag,
            offset,
            from_end: false,
            mask: mask.max(1),
            done: false,
        }
    }

    /// Targets the byte `back` positions before the end (1 is the last).
    pub fn from_end(tag: u8, back: usize, mask: u8) -> Self {
        Self {
            from_end: true,
            ..Self::new(tag, back, mask)
        }
    }
}

impl Interposer for FlipByte {
    fn intercept(&mut self, _: u64, _: Role, _: Role, mut bytes: Vec<u8>) -> Vec<Vec<u8>> {
        if !self.done && bytes.first() == Some(&self.tag) {
            let i = if self.from_end {
                bytes.len() - 1 - (self.offset.max(1) - 1) % bytes.len()
            } else {
                self.offset % bytes.len()
            };
            bytes[i] ^= self.mask;
            self.done = true;
        }
        vec![bytes]
    }
}

/// Tally of one attack branch.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchReport {
    pub branch: String,
    pub sessions: usize,
    pub aborted: usize,
    pub reasons: BTreeMap<String, usize>,
    /// Reason the case analysis predicts for this branch; `None` for a
    /// control branch that must be accepted.
    pub expected: Option<AbortReason>,
}

impl BranchReport {
    fn new(branch: impl fmt::Display, expected: Option<AbortReason>) -> Self {
        Self {
            branch: branch.to_string(),
            expected,
            ..Self::default()
        }
    }

    fn record(&mut self, outcome: &SessionOutcome) {
        self.sessions += 1;
        if let Some(r) = outcome.abort {
            self.aborted += 1;
            *self.reasons.entry(r.to_string()).or_default() += 1;
        }
    }

    /// True when every session ended as the case analysis predicts.
    pub fn as_expected(&self) -> bool {
        match self.expected {
            Some(r) => self.aborted == self.sessions && self.reasons.get(&r.to_string()) == Some(&self.sessions),
            None => self.aborted == 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubstitutionBranch {
    /// Forward an old `M4` unchanged.
    Replay,
    /// Forward an old `M4` with its nonce replaced by a fresh one.
    NonceSwap,
    /// Fabricate fresh measurements under a made-up TEE signature.
    ForgedSignature,
}

impl SubstitutionBranch {
    pub const ALL: [SubstitutionBranch; 3] = [Self::Replay, Self::NonceSwap, Self::ForgedSignature];

    pub fn expected(self) -> AbortReason {
        match self {
            Self::Replay => AbortReason::StaleNonce,
            Self::NonceSwap | Self::ForgedSignature => AbortReason::BadSignature,
        }
    }
}

impl fmt::Display for SubstitutionBranch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Replay => "replay-old-m4",
            Self::NonceSwap => "old-m4-fresh-nonce",
            Self::ForgedSignature => "forged-tee-signature",
        })
    }
}

/// A compromised prover replacing the TEE's measurements.
pub struct MeasurementSubstitution {
    pub branch: SubstitutionBranch,
    old_m4: Vec<u8>,
    pk_v: PublicKeys,
    rng: ChaCha20Rng,
}

impl MeasurementSubstitution {
    pub fn new(branch: SubstitutionBranch, old_m4: Vec<u8>, pk_v: PublicKeys, seed: u64) -> Self {
        Self {
            branch,
            old_m4,
            pk_v,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    fn forge(&mut self, fresh: &[u8]) -> Vec<u8> {
        let Ok(Message::M4 { ct: old_ct, sig: old_sig, .. }) = Message::decode(&self.old_m4) else {
            return fresh.to_vec();
        };
        match self.branch {
            SubstitutionBranch::Replay => self.old_m4.clone(),
            SubstitutionBranch::NonceSwap => Message::M4 {
                r4: self.rng.gen(),
                ct: old_ct,
                sig: old_sig,
            }
            .encode(),
            SubstitutionBranch::ForgedSignature => {
                // Measurements of the adversary's choosing: one flat
                // mid-scale capture the size of the fresh batch.
                let size = match Message::decode(fresh) {
                    Ok(Message::M4 { ct, .. }) => ct.len().saturating_sub(64) & !3,
                    _ => 4,
                };
                let ct = self.pk_v.encrypt(&encode_trace_batch(&[vec![0x80u8; size.max(4)]]), &mut self.rng);
                let mut sig = [0u8; 64];
                self.rng.fill_bytes(&mut sig);
                Message::M4 {
                    r4: self.rng.gen(),
                    ct,
                    sig,
                }
                .encode()
            }
        }
    }
}

impl Interposer for MeasurementSubstitution {
    fn intercept(&mut self, _: u64, from: Role, to: Role, bytes: Vec<u8>) -> Vec<Vec<u8>> {
        if (from, to) == (Role::Tee, Role::Prover) && bytes.first() == Some(&4) {
            return vec![self.forge(&bytes)];
        }
        vec![bytes]
    }
}

/// Runs one honest session to record an `M4`, then `sessions` adversarial
/// sessions cycling through the substitution branches.
///
/// Fails with [`ProtocolError::HarnessFailure`] if the verifier accepts
/// any substituted batch.
pub fn attack_measurement_substitution(sim: &mut Simulation, sessions: usize, seed: u64) -> Result<Vec<BranchReport>, ProtocolError> {
    let mut recorder = Recorder::new(Role::Tee, Role::Prover, 4);
    sim.run_session_with(&mut recorder);
    let old_m4 = recorder.recorded.pop().ok_or(ProtocolError::NothingRecorded)?;
    let pk_v = *sim.directory().get(Role::Verifier).expect("verifier key published");
    let mut reports: Vec<BranchReport> = SubstitutionBranch::ALL
        .iter()
        .map(|b| BranchReport::new(b, Some(b.expected())))
        .collect();
    for i in 0..sessions {
        let k = i % SubstitutionBranch::ALL.len();
        let branch = SubstitutionBranch::ALL[k];
        let mut adv = MeasurementSubstitution::new(branch, old_m4.clone(), pk_v, seed.wrapping_add(i as u64));
        let outcome = sim.run_session_with(&mut adv);
        if outcome.abort.is_none() {
            return Err(ProtocolError::HarnessFailure { branch: branch.to_string() });
        }
        reports[k].record(&outcome);
    }
    Ok(reports)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FalseResultBranch {
    /// Keep `r7` and `sig_MT`, re-encrypt the claimed bit under `pk_V`.
    SubstituteBit,
    /// An older `M7` with a fresh nonce.
    StaleWithFreshNonce,
    /// An older `M7` unchanged.
    Replay,
    /// Control: the honest `M7` untouched.
    Untouched,
}

impl FalseResultBranch {
    pub const ALL: [FalseResultBranch; 4] = [Self::SubstituteBit, Self::StaleWithFreshNonce, Self::Replay, Self::Untouched];

    pub fn expected(self) -> Option<AbortReason> {
        match self {
            Self::SubstituteBit | Self::StaleWithFreshNonce => Some(AbortReason::BadSignature),
            Self::Replay => Some(AbortReason::StaleNonce),
            Self::Untouched => None,
        }
    }
}

impl fmt::Display for FalseResultBranch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SubstituteBit => "substitute-encrypted-bit",
            Self::StaleWithFreshNonce => "old-m7-fresh-nonce",
            Self::Replay => "replay-old-m7",
            Self::Untouched => "untouched",
        })
    }
}

/// An eavesdropper on the MT-to-V link rewriting the verdict.
pub struct FalseResult {
    pub branch: FalseResultBranch,
    /// The bit the adversary wants `V` to see.
    pub claimed: bool,
    old_m7: Vec<u8>,
    pk_v: PublicKeys,
    rng: ChaCha20Rng,
}

impl FalseResult {
    pub fn new(branch: FalseResultBranch, claimed: bool, old_m7: Vec<u8>, pk_v: PublicKeys, seed: u64) -> Self {
        Self {
            branch,
            claimed,
            old_m7,
            pk_v,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }
}

impl Interposer for FalseResult {
    fn intercept(&mut self, _: u64, from: Role, to: Role, bytes: Vec<u8>) -> Vec<Vec<u8>> {
        if (from, to) != (Role::Tray, Role::Verifier) || bytes.first() != Some(&7) {
            return vec![bytes];
        }
        let replaced = match (self.branch, Message::decode(&bytes), Message::decode(&self.old_m7)) {
            (FalseResultBranch::SubstituteBit, Ok(Message::M7 { r7, sig, .. }), _) => Message::M7 {
                r7,
                ct: self.pk_v.encrypt(&[u8::from(self.claimed)], &mut self.rng),
                sig,
            }
            .encode(),
            (FalseResultBranch::StaleWithFreshNonce, _, Ok(Message::M7 { ct, sig, .. })) => Message::M7 {
                r7: self.rng.gen(),
                ct,
                sig,
            }
            .encode(),
            (FalseResultBranch::Replay, _, _) => self.old_m7.clone(),
            _ => bytes,
        };
        vec![replaced]
    }
}

/// Runs an honest control session to learn the verdict and record an
/// `M7`, then `sessions` sessions cycling through the branches. The
/// substituted bit is the opposite of the control verdict, so the
/// deployment should give a deterministic verdict (for example `x_th = 0`).
///
/// Fails with [`ProtocolError::HarnessFailure`] if any rewritten `M7` is
/// accepted.
pub fn attack_false_result(sim: &mut Simulation, sessions: usize, seed: u64) -> Result<Vec<BranchReport>, ProtocolError> {
    let mut recorder = Recorder::new(Role::Tray, Role::Verifier, 7);
    let control = sim.run_session_with(&mut recorder);
    let old_m7 = recorder.recorded.pop().ok_or(ProtocolError::NothingRecorded)?;
    let honest_bit = control.verdict.ok_or(ProtocolError::NothingRecorded)?;
    let pk_v = *sim.directory().get(Role::Verifier).expect("verifier key published");
    let mut reports: Vec<BranchReport> = FalseResultBranch::ALL.iter().map(|b| BranchReport::new(b, b.expected())).collect();
    for i in 0..sessions {
        let k = i % FalseResultBranch::ALL.len();
        let branch = FalseResultBranch::ALL[k];
        let mut adv = FalseResult::new(branch, !honest_bit, old_m7.clone(), pk_v, seed.wrapping_add(i as u64));
        let outcome = sim.run_session_with(&mut adv);
        if branch != FalseResultBranch::Untouched && outcome.abort.is_none() {
            return Err(ProtocolError::HarnessFailure { branch: branch.to_string() });
        }
        reports[k].record(&outcome);
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstitutionReport {
    pub sessions: u64,
    pub accepted: u64,
    pub estimate: RateEstimate,
    /// Per-session verdicts in order; `false` for aborted sessions.
    #[serde(skip)]
    pub verdicts: Vec<bool>,
}

impl SubstitutionReport {
    fn from_verdicts(verdicts: Vec<bool>) -> Self {
        let accepted = verdicts.iter().filter(|&&b| b).count() as u64;
        let sessions = verdicts.len() as u64;
        Self {
            sessions,
            accepted,
            estimate: RateEstimate::new(accepted, sessions, SIMULATION_CONFIDENCE),
            verdicts,
        }
    }
}

/// Runs `sessions` full sessions against a deployment whose prover
/// substitutes the application, counting `b = 1` verdicts.
pub fn attack_application_substitution(sim: &mut Simulation, sessions: u64) -> SubstitutionReport {
    let verdicts = (0..sessions).map(|_| sim.run_session().verdict == Some(true)).collect();
    SubstitutionReport::from_verdicts(verdicts)
}

/// Multi-trace acceptance estimated from single-trace verdicts: each of
/// `sessions` batches draws `n` verdicts with replacement from `pool` and
/// is accepted when at least `x_th` of them passed.
pub fn bootstrap_multi_trace(pool: &[bool], n: u32, x_th: u32, sessions: u64, seed: u64) -> SubstitutionReport {
    if pool.is_empty() {
        return SubstitutionReport::from_verdicts(vec![x_th == 0; sessions as usize]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let verdicts = (0..sessions)
        .map(|_| (0..n).filter(|_| pool[rng.gen_range(0..pool.len())]).count() as u32 >= x_th)
        .collect();
    SubstitutionReport::from_verdicts(verdicts)
}
