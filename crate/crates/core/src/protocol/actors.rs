// SPDX-License-Identifier: Apache-2.0

//! The four protocol parties as single-threaded state machines.
//!
//! An actor sees only its own keys, the public directory and the inputs the
//! router hands it. Every handled input yields a status (accepted, or the
//! abort reason) and the messages to send, each with the processing delay
//! that precedes it.

use std::collections::HashSet;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::checksum::{checksum, ChecksumSpec};
use super::crypto::{hash_fields, Digest, Directory, FieldHasher, Nonce, PartyKeys, PublicKeys};
use super::session::{TemplateStore, World};
use super::wire::{decode_trace_batch, decode_verdict, encode_trace_batch, LaunchReport, Malformed, Message, TrayRequest};
use super::{AbortReason, Role};

/// Virtual time in microseconds.
pub type VirtualTime = u64;

/// One run of a program on the prover, as seen by the power sensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Execution {
    pub program_id: String,
    /// Seed of the measurement noise for this run.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Wire(Vec<u8>),
    /// Physical side effects of executions; delivered to the TEE's sensor
    /// and never visible to the network adversary.
    Physical(Vec<Execution>),
}

#[derive(Debug, Clone)]
pub enum Input {
    /// Begin a session. Only the verifier acts on it.
    Start { session: u64, forced_token: Option<Nonce> },
    Deliver { from: Role, payload: Payload },
    /// Nothing more will arrive for this session.
    Timeout,
}

#[derive(Debug, Clone)]
pub struct Outbound {
    pub to: Role,
    pub payload: Payload,
    pub delay_us: VirtualTime,
}

#[derive(Debug, Clone, Default)]
pub struct Handled {
    pub status: Option<AbortReason>,
    pub outputs: Vec<Outbound>,
    /// Set by the verifier when a session reaches `Done` or `Aborted`.
    pub outcome: Option<VerifierReport>,
}

impl Handled {
    fn ok(outputs: Vec<Outbound>) -> Self {
        Self { outputs, ..Self::default() }
    }

    fn abort(reason: AbortReason) -> Self {
        Self {
            status: Some(reason),
            ..Self::default()
        }
    }
}

pub trait Actor: Send {
    fn role(&self) -> Role;
    fn handle(&mut self, now: VirtualTime, input: Input) -> Handled;
}

/// Verifier session phases, in the only order they may be entered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Setup,
    LaunchPending,
    Launched,
    ComputePending,
    AwaitingVerdict,
    Done,
    Aborted,
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Done | Phase::Aborted)
    }
}

/// What the verifier concluded about one session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifierReport {
    pub session: u64,
    pub phases: Vec<Phase>,
    pub verdict: Option<bool>,
    pub abort: Option<AbortReason>,
    pub delta_t_us: Option<VirtualTime>,
    /// `(tau, out)` for every completed computation round.
    pub rounds: Vec<(Nonce, Digest)>,
    pub traces_collected: usize,
    /// The decrypted traces, when the verifier is configured to keep them.
    pub traces: Vec<Vec<u8>>,
}

/// Output of application `app_id` on input `token`.
pub fn app_output(app_id: &str, token: &Nonce) -> Digest {
    hash_fields("app-output", &[app_id.as_bytes(), token])
}

/// The fingerprint `H(tau, A)`.
pub fn fingerprint(token: &Nonce, app_id: &str) -> Digest {
    hash_fields("fingerprint", &[token, app_id.as_bytes()])
}

pub fn h1(r2: &Nonce, prover_id: &str, res: &Digest, pk_tee: &[u8]) -> Digest {
    hash_fields("H1", &[r2, prover_id.as_bytes(), res, pk_tee])
}

pub fn h2(r3: &Nonce, token: &Nonce, app_id: &str, n: u32) -> Digest {
    hash_fields("H2", &[r3, token, app_id.as_bytes(), &n.to_le_bytes()])
}

pub fn h3(r4: &Nonce, traces: &[Vec<u8>]) -> Digest {
    let mut h = FieldHasher::new("H3");
    h.field(r4);
    for t in traces {
        h.field(t);
    }
    h.finish()
}

pub fn h4(r5: &Nonce, m4: &[u8], out: &Digest) -> Digest {
    hash_fields("H4", &[r5, m4, out])
}

/// `H5 = H(r6, tau.., A, out.., tr..)`, in the order of the hash
/// definition rather than the message body. The round count is hashed
/// first so the variable-length lists cannot be re-split.
pub fn h5(r6: &Nonce, req: &TrayRequest) -> Digest {
    let mut h = FieldHasher::new("H5");
    h.field(r6).field(&(req.rounds.len() as u32).to_le_bytes());
    for (tau, _) in &req.rounds {
        h.field(tau);
    }
    h.field(req.app_id.as_bytes());
    for (_, out) in &req.rounds {
        h.field(out);
    }
    for t in &req.traces {
        h.field(t);
    }
    h.finish()
}

pub fn h6(r7: &Nonce, b: bool) -> Digest {
    hash_fields("H6", &[r7, &[u8::from(b)]])
}

/// Per-actor randomness, derived from the simulation seed and the role.
pub fn actor_rng(seed: u64, role: Role) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(role as u64 + 1);
    rng
}

/// Nonces an actor has already observed or issued.
#[derive(Debug, Default)]
struct Freshness {
    seen: HashSet<Nonce>,
}

impl Freshness {
    /// Records every nonce; true if none had been seen before.
    fn check(&mut self, nonces: &[&Nonce]) -> bool {
        let mut fresh = true;
        for n in nonces {
            fresh &= self.seen.insert(**n);
        }
        fresh
    }

    fn issue(&mut self, rng: &mut ChaCha20Rng) -> Nonce {
        loop {
            let mut n = [0u8; 32];
            rng.fill_bytes(&mut n);
            if self.seen.insert(n) {
                return n;
            }
        }
    }
}

fn wire(to: Role, msg: &Message, delay_us: VirtualTime) -> Outbound {
    Outbound {
        to,
        payload: Payload::Wire(msg.encode()),
        delay_us,
    }
}

fn decode(payload: Payload) -> Result<(Message, Vec<u8>), AbortReason> {
    match payload {
        Payload::Wire(bytes) => Message::decode(&bytes).map(|m| (m, bytes)).map_err(|Malformed| AbortReason::Malformed),
        Payload::Physical(_) => Err(AbortReason::OutOfPhase),
    }
}

#[derive(Debug, Clone)]
pub struct VerifierConfig {
    pub prover_id: String,
    pub app_id: String,
    pub traces_per_session: u32,
    pub traces_per_round: u32,
    /// The verifier's reference copy of the prover's memory image.
    pub reference_image: Arc<Vec<u8>>,
    pub checksum: ChecksumSpec,
    pub expected_dt_us: VirtualTime,
    pub keep_traces: bool,
}

#[derive(Debug)]
struct VerifierSession {
    id: u64,
    phase: Phase,
    history: Vec<Phase>,
    r1: Nonce,
    t1: VirtualTime,
    delta_t: Option<VirtualTime>,
    forced_token: Option<Nonce>,
    pk_tee: Option<PublicKeys>,
    token: Nonce,
    round_n: u32,
    rounds: Vec<(Nonce, Digest)>,
    traces: Vec<Vec<u8>>,
    verdict: Option<bool>,
    abort: Option<AbortReason>,
}

pub struct Verifier {
    cfg: VerifierConfig,
    keys: PartyKeys,
    dir: Directory,
    rng: ChaCha20Rng,
    nonces: Freshness,
    used_tokens: HashSet<Nonce>,
    session: Option<VerifierSession>,
}

impl Verifier {
    pub fn new(cfg: VerifierConfig, keys: PartyKeys, dir: Directory, rng: ChaCha20Rng) -> Self {
        Self {
            cfg,
            keys,
            dir,
            rng,
            nonces: Freshness::default(),
            used_tokens: HashSet::new(),
            session: None,
        }
    }

    fn enter(&mut self, phase: Phase) {
        let s = self.session.as_mut().expect("active session");
        debug_assert!(phase > s.phase, "{:?} -> {:?}", s.phase, phase);
        s.phase = phase;
        s.history.push(phase);
    }

    fn report(&self) -> VerifierReport {
        let s = self.session.as_ref().expect("active session");
        VerifierReport {
            session: s.id,
            phases: s.history.clone(),
            verdict: s.verdict,
            abort: s.abort,
            delta_t_us: s.delta_t,
            rounds: s.rounds.clone(),
            traces_collected: s.traces.len(),
            traces: if self.cfg.keep_traces { s.traces.clone() } else { Vec::new() },
        }
    }

    fn fail(&mut self, reason: AbortReason) -> Handled {
        let s = self.session.as_mut().expect("active session");
        s.abort = Some(reason);
        self.enter(Phase::Aborted);
        Handled {
            status: Some(reason),
            outputs: Vec::new(),
            outcome: Some(self.report()),
        }
    }

    fn start(&mut self, now: VirtualTime, session: u64, forced_token: Option<Nonce>) -> Handled {
        let r1 = self.nonces.issue(&mut self.rng);
        self.session = Some(VerifierSession {
            id: session,
            phase: Phase::Setup,
            history: vec![Phase::Setup],
            r1,
            t1: now,
            delta_t: None,
            forced_token,
            pk_tee: None,
            token: [0; 32],
            round_n: 0,
            rounds: Vec::new(),
            traces: Vec::new(),
            verdict: None,
            abort: None,
        });
        self.enter(Phase::LaunchPending);
        let m1 = Message::M1 {
            r1,
            app_id: self.cfg.app_id.clone(),
        };
        Handled::ok(vec![wire(Role::Prover, &m1, 0)])
    }

    /// Sends `M3` for the next round of computations.
    fn next_round(&mut self) -> Handled {
        let s = self.session.as_mut().expect("active session");
        let token = match s.forced_token.take() {
            Some(t) => t,
            None => loop {
                let t: Nonce = self.rng.gen();
                if !self.used_tokens.contains(&t) {
                    break t;
                }
            },
        };
        if !self.used_tokens.insert(token) {
            return self.fail(AbortReason::StaleNonce);
        }
        let remaining = self.cfg.traces_per_session - s.traces.len() as u32;
        let n = remaining.min(self.cfg.traces_per_round);
        s.token = token;
        s.round_n = n;
        let r3 = self.nonces.issue(&mut self.rng);
        let sig = self.keys.sign(&h2(&r3, &token, &self.cfg.app_id, n));
        let m3 = Message::M3 {
            r3,
            n,
            token,
            app_id: self.cfg.app_id.clone(),
            sig,
        };
        if self.session.as_ref().unwrap().phase < Phase::ComputePending {
            self.enter(Phase::ComputePending);
        }
        Handled::ok(vec![wire(Role::Prover, &m3, 0)])
    }

    fn on_m2(&mut self, now: VirtualTime, r2: Nonce, ct: Vec<u8>, sig: [u8; 64]) -> Result<Handled, AbortReason> {
        if !self.nonces.check(&[&r2]) {
            return Err(AbortReason::StaleNonce);
        }
        if self.phase() != Phase::LaunchPending {
            return Err(AbortReason::OutOfPhase);
        }
        let plain = self.keys.decrypt(&ct).ok_or(AbortReason::Undecryptable)?;
        let report = LaunchReport::decode(&plain).map_err(|_| AbortReason::Malformed)?;
        let pk_p = self.dir.get(Role::Prover).expect("prover key published");
        if report.prover_id != self.cfg.prover_id || !pk_p.verify(&h1(&r2, &report.prover_id, &report.res, &report.pk_tee), &sig) {
            return Err(AbortReason::BadSignature);
        }
        let s = self.session.as_mut().unwrap();
        let dt = now - s.t1;
        s.delta_t = Some(dt);
        if dt > self.cfg.expected_dt_us {
            return Err(AbortReason::TimingExceeded);
        }
        if report.res != checksum(&s.r1, &self.cfg.reference_image, self.cfg.checksum.iterations) {
            return Err(AbortReason::ChecksumMismatch);
        }
        s.pk_tee = Some(PublicKeys::from_bytes(&report.pk_tee).ok_or(AbortReason::Malformed)?);
        self.enter(Phase::Launched);
        Ok(self.next_round())
    }

    fn on_m5(&mut self, r5: Nonce, m4_bytes: Vec<u8>, fp: Digest, out: Digest, sig: [u8; 64]) -> Result<Handled, AbortReason> {
        let Ok(Message::M4 { r4, ct, sig: sig_tee }) = Message::decode(&m4_bytes) else {
            return Err(AbortReason::Malformed);
        };
        if !self.nonces.check(&[&r5, &r4]) {
            return Err(AbortReason::StaleNonce);
        }
        if self.phase() != Phase::ComputePending {
            return Err(AbortReason::OutOfPhase);
        }
        let pk_p = self.dir.get(Role::Prover).expect("prover key published");
        if !pk_p.verify(&h4(&r5, &m4_bytes, &out), &sig) {
            return Err(AbortReason::BadSignature);
        }
        let plain = self.keys.decrypt(&ct).ok_or(AbortReason::Undecryptable)?;
        drop(ct);
        let traces = decode_trace_batch(&plain).map_err(|_| AbortReason::Malformed)?;
        drop(plain);
        let s = self.session.as_mut().unwrap();
        let pk_tee = s.pk_tee.expect("launched sessions hold the TEE key");
        if !pk_tee.verify(&h3(&r4, &traces), &sig_tee) {
            return Err(AbortReason::BadSignature);
        }
        if fp != fingerprint(&s.token, &self.cfg.app_id) {
            return Err(AbortReason::FingerprintMismatch);
        }
        if traces.len() != s.round_n as usize {
            return Err(AbortReason::Malformed);
        }
        s.traces.extend(traces);
        s.rounds.push((s.token, out));
        if s.traces.len() < self.cfg.traces_per_session as usize {
            return Ok(self.next_round());
        }
        let req = TrayRequest {
            rounds: s.rounds.clone(),
            app_id: self.cfg.app_id.clone(),
            traces: if self.cfg.keep_traces { s.traces.clone() } else { std::mem::take(&mut s.traces) },
        };
        let collected = req.traces.len();
        let r6 = self.nonces.issue(&mut self.rng);
        let sig = self.keys.sign(&h5(&r6, &req));
        let ct = self
            .dir
            .get(Role::Tray)
            .expect("tray key published")
            .encrypt(&req.encode(), &mut self.rng);
        drop(req);
        let s = self.session.as_mut().unwrap();
        if !self.cfg.keep_traces {
            // Keep the count for the report without holding the samples.
            s.traces = vec![Vec::new(); collected];
        }
        self.enter(Phase::AwaitingVerdict);
        Ok(Handled::ok(vec![wire(Role::Tray, &Message::M6 { r6, ct, sig }, 0)]))
    }

    fn on_m7(&mut self, r7: Nonce, ct: Vec<u8>, sig: [u8; 64]) -> Result<Handled, AbortReason> {
        if !self.nonces.check(&[&r7]) {
            return Err(AbortReason::StaleNonce);
        }
        if self.phase() != Phase::AwaitingVerdict {
            return Err(AbortReason::OutOfPhase);
        }
        let plain = self.keys.decrypt(&ct).ok_or(AbortReason::Undecryptable)?;
        let b = decode_verdict(&plain).map_err(|_| AbortReason::Malformed)?;
        if !self.dir.get(Role::Tray).expect("tray key published").verify(&h6(&r7, b), &sig) {
            return Err(AbortReason::BadSignature);
        }
        self.session.as_mut().unwrap().verdict = Some(b);
        self.enter(Phase::Done);
        Ok(Handled {
            outcome: Some(self.report()),
            ..Handled::default()
        })
    }

    fn phase(&self) -> Phase {
        self.session.as_ref().map_or(Phase::Setup, |s| s.phase)
    }
}

impl Actor for Verifier {
    fn role(&self) -> Role {
        Role::Verifier
    }

    fn handle(&mut self, now: VirtualTime, input: Input) -> Handled {
        let (from, payload) = match input {
            Input::Start { session, forced_token } => return self.start(now, session, forced_token),
            Input::Timeout => {
                return match self.session {
                    Some(ref s) if !s.phase.is_terminal() => self.fail(AbortReason::Timeout),
                    _ => Handled::default(),
                }
            }
            Input::Deliver { from, payload } => (from, payload),
        };
        if self.session.is_none() || self.phase().is_terminal() {
            return Handled::abort(AbortReason::OutOfPhase);
        }
        let result = decode(payload).and_then(|(msg, _)| match (from, msg) {
            (Role::Prover, Message::M2 { r2, ct, sig }) => self.on_m2(now, r2, ct, sig),
            (Role::Prover, Message::M5 { r5, m4, fingerprint, out, sig }) => self.on_m5(r5, m4, fingerprint, out, sig),
            (Role::Tray, Message::M7 { r7, ct, sig }) => self.on_m7(r7, ct, sig),
            _ => Err(AbortReason::OutOfPhase),
        });
        match result {
            Ok(h) => h,
            Err(reason) => self.fail(reason),
        }
    }
}

/// How the prover's platform computes the setup checksum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProverMode {
    Honest,
    /// The memory image differs from the reference in one byte.
    FlippedByte { index: usize },
    /// The checksum is computed correctly but under emulation, paying the
    /// manipulation penalty.
    Emulated,
}

/// Which program actually runs when the prover is asked to run `A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Workload {
    Honest,
    /// Each run picks a program from `(program_id, probability)` pairs;
    /// leftover probability runs the requested application.
    Substitute { mixture: Vec<(String, f64)> },
}

impl Workload {
    fn pick(&self, app_id: &str, rng: &mut ChaCha20Rng) -> String {
        match self {
            Workload::Honest => app_id.to_owned(),
            Workload::Substitute { mixture } => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for (id, p) in mixture {
                    acc += p;
                    if u < acc {
                        return id.clone();
                    }
                }
                app_id.to_owned()
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProverConfig {
    pub prover_id: String,
    pub image: Arc<Vec<u8>>,
    pub checksum: ChecksumSpec,
    pub mode: ProverMode,
    pub workload: Workload,
}

#[derive(Debug, Default)]
struct ProverRound {
    out: Digest,
    fingerprint: Digest,
}

pub struct Prover {
    cfg: ProverConfig,
    keys: PartyKeys,
    dir: Directory,
    world: Arc<World>,
    rng: ChaCha20Rng,
    nonces: Freshness,
    launched_app: Option<String>,
    pending_res: Option<Digest>,
    round: Option<ProverRound>,
}

impl Prover {
    pub fn new(cfg: ProverConfig, keys: PartyKeys, dir: Directory, world: Arc<World>, rng: ChaCha20Rng) -> Self {
        Self {
            cfg,
            keys,
            dir,
            world,
            rng,
            nonces: Freshness::default(),
            launched_app: None,
            pending_res: None,
            round: None,
        }
    }

    fn on_m1(&mut self, r1: Nonce, app_id: String) -> Result<Handled, AbortReason> {
        if !self.nonces.check(&[&r1]) {
            return Err(AbortReason::StaleNonce);
        }
        if self.world.profile(&app_id).is_none() {
            return Err(AbortReason::UnknownApplication);
        }
        let iterations = self.cfg.checksum.iterations;
        let (res, manipulated) = match self.cfg.mode {
            ProverMode::Honest => (checksum(&r1, &self.cfg.image, iterations), false),
            ProverMode::FlippedByte { index } => {
                let mut image = self.cfg.image.to_vec();
                let i = index % image.len().max(1);
                if let Some(b) = image.get_mut(i) {
                    *b ^= 0x01;
                }
                (checksum(&r1, &image, iterations), false)
            }
            ProverMode::Emulated => (checksum(&r1, &self.cfg.image, iterations), true),
        };
        self.pending_res = Some(res);
        self.launched_app = Some(app_id.clone());
        self.round = None;
        let delay = self.cfg.checksum.duration_us(manipulated);
        Ok(Handled::ok(vec![wire(Role::Tee, &Message::Launch { app_id }, delay)]))
    }

    fn on_ready(&mut self, pk_tee: [u8; 64]) -> Result<Handled, AbortReason> {
        let res = self.pending_res.take().ok_or(AbortReason::OutOfPhase)?;
        let r2 = self.nonces.issue(&mut self.rng);
        let report = LaunchReport {
            prover_id: self.cfg.prover_id.clone(),
            res,
            pk_tee,
        };
        let sig = self.keys.sign(&h1(&r2, &report.prover_id, &res, &pk_tee));
        let ct = self
            .dir
            .get(Role::Verifier)
            .expect("verifier key published")
            .encrypt(&report.encode(), &mut self.rng);
        Ok(Handled::ok(vec![wire(Role::Verifier, &Message::M2 { r2, ct, sig }, 0)]))
    }

    fn on_m3(&mut self, r3: Nonce, n: u32, token: Nonce, app_id: String, sig: [u8; 64]) -> Result<Handled, AbortReason> {
        if !self.nonces.check(&[&r3]) {
            return Err(AbortReason::StaleNonce);
        }
        if !self.dir.get(Role::Verifier).expect("verifier key published").verify(&h2(&r3, &token, &app_id, n), &sig) {
            return Err(AbortReason::BadSignature);
        }
        if self.launched_app.as_deref() != Some(app_id.as_str()) {
            return Err(AbortReason::UnknownApplication);
        }
        if n == 0 {
            return Err(AbortReason::Malformed);
        }
        let mut runs = Vec::with_capacity(n as usize);
        let mut busy = 0;
        for _ in 0..n {
            let program_id = self.cfg.workload.pick(&app_id, &mut self.rng);
            busy += self.world.run_time_us(&program_id).ok_or(AbortReason::UnknownApplication)?;
            runs.push(Execution {
                program_id,
                seed: self.rng.gen(),
            });
        }
        self.round = Some(ProverRound {
            out: app_output(&app_id, &token),
            fingerprint: fingerprint(&token, &app_id),
        });
        Ok(Handled::ok(vec![
            Outbound {
                to: Role::Tee,
                payload: Payload::Physical(runs),
                delay_us: busy,
            },
            wire(Role::Tee, &Message::Ack, busy),
        ]))
    }

    fn on_m4(&mut self, m4: Vec<u8>) -> Result<Handled, AbortReason> {
        let round = self.round.take().ok_or(AbortReason::OutOfPhase)?;
        let r5 = self.nonces.issue(&mut self.rng);
        let sig = self.keys.sign(&h4(&r5, &m4, &round.out));
        let m5 = Message::M5 {
            r5,
            m4,
            fingerprint: round.fingerprint,
            out: round.out,
            sig,
        };
        Ok(Handled::ok(vec![wire(Role::Verifier, &m5, 0)]))
    }
}

impl Actor for Prover {
    fn role(&self) -> Role {
        Role::Prover
    }

    fn handle(&mut self, _now: VirtualTime, input: Input) -> Handled {
        let Input::Deliver { from, payload } = input else {
            return Handled::default();
        };
        let result = decode(payload).and_then(|(msg, bytes)| match (from, msg) {
            (Role::Verifier, Message::M1 { r1, app_id }) => self.on_m1(r1, app_id),
            (Role::Verifier, Message::M3 { r3, n, token, app_id, sig }) => self.on_m3(r3, n, token, app_id, sig),
            (Role::Tee, Message::Ready { pk_tee }) => self.on_ready(pk_tee),
            (Role::Tee, Message::M4 { .. }) => self.on_m4(bytes),
            _ => Err(AbortReason::OutOfPhase),
        });
        result.unwrap_or_else(Handled::abort)
    }
}

/// The prover's trusted execution environment and its power sensor.
pub struct Tee {
    dir: Directory,
    world: Arc<World>,
    rng: ChaCha20Rng,
    nonces: Freshness,
    /// Keys of the current launch; replaced on every launch.
    keys: Option<PartyKeys>,
    app_id: Option<String>,
    pending: Vec<Vec<u8>>,
}

impl Tee {
    pub fn new(dir: Directory, world: Arc<World>, rng: ChaCha20Rng) -> Self {
        Self {
            dir,
            world,
            rng,
            nonces: Freshness::default(),
            keys: None,
            app_id: None,
            pending: Vec::new(),
        }
    }

    fn on_ack(&mut self) -> Result<Handled, AbortReason> {
        let keys = self.keys.as_ref().ok_or(AbortReason::OutOfPhase)?;
        let traces = std::mem::take(&mut self.pending);
        let r4 = self.nonces.issue(&mut self.rng);
        let sig = keys.sign(&h3(&r4, &traces));
        let ct = self
            .dir
            .get(Role::Verifier)
            .expect("verifier key published")
            .encrypt(&encode_trace_batch(&traces), &mut self.rng);
        drop(traces);
        Ok(Handled::ok(vec![wire(Role::Prover, &Message::M4 { r4, ct, sig }, 0)]))
    }
}

impl Actor for Tee {
    fn role(&self) -> Role {
        Role::Tee
    }

    fn handle(&mut self, _now: VirtualTime, input: Input) -> Handled {
        let Input::Deliver { from, payload } = input else {
            return Handled::default();
        };
        if let Payload::Physical(runs) = payload {
            let Some(app) = self.app_id.as_deref() else {
                return Handled::abort(AbortReason::OutOfPhase);
            };
            for run in &runs {
                match self.world.capture(app, run) {
                    Some(t) => self.pending.push(t),
                    None => return Handled::abort(AbortReason::UnknownApplication),
                }
            }
            return Handled::default();
        }
        let result = decode(payload).and_then(|(msg, _)| match (from, msg) {
            (Role::Prover, Message::Launch { app_id }) => {
                if self.world.profile(&app_id).is_none() {
                    return Err(AbortReason::UnknownApplication);
                }
                let keys = PartyKeys::generate(Role::Tee, &mut self.rng);
                let pk_tee = keys.public().to_bytes();
                self.keys = Some(keys);
                self.app_id = Some(app_id);
                self.pending.clear();
                Ok(Handled::ok(vec![wire(Role::Prover, &Message::Ready { pk_tee }, 0)]))
            }
            (Role::Prover, Message::Ack) => self.on_ack(),
            _ => Err(AbortReason::OutOfPhase),
        });
        result.unwrap_or_else(Handled::abort)
    }
}

#[derive(Debug, Clone)]
pub struct TrayConfig {
    /// Minimum number of passing traces for `b = 1`.
    pub x_th: u32,
}

/// The measurements tray: holds templates and issues verdicts.
pub struct Tray {
    cfg: TrayConfig,
    keys: PartyKeys,
    dir: Directory,
    store: Arc<TemplateStore>,
    rng: ChaCha20Rng,
    nonces: Freshness,
}

impl Tray {
    pub fn new(cfg: TrayConfig, keys: PartyKeys, dir: Directory, store: Arc<TemplateStore>, rng: ChaCha20Rng) -> Self {
        Self {
            cfg,
            keys,
            dir,
            store,
            rng,
            nonces: Freshness::default(),
        }
    }

    fn on_m6(&mut self, r6: Nonce, ct: Vec<u8>, sig: [u8; 64]) -> Result<Handled, AbortReason> {
        if !self.nonces.check(&[&r6]) {
            return Err(AbortReason::StaleNonce);
        }
        let plain = self.keys.decrypt(&ct).ok_or(AbortReason::Undecryptable)?;
        drop(ct);
        let req = TrayRequest::decode(&plain).map_err(|_| AbortReason::Malformed)?;
        drop(plain);
        if !self.dir.get(Role::Verifier).expect("verifier key published").verify(&h5(&r6, &req), &sig) {
            return Err(AbortReason::BadSignature);
        }
        let outputs_ok = req.rounds.iter().all(|(tau, out)| *out == app_output(&req.app_id, tau));
        let passes = self.store.pass_count(&req.app_id, &req.traces).ok_or(AbortReason::UnknownApplication)?;
        let b = outputs_ok && passes >= self.cfg.x_th as usize;
        let r7 = self.nonces.issue(&mut self.rng);
        let sig = self.keys.sign(&h6(&r7, b));
        let ct = self
            .dir
            .get(Role::Verifier)
            .expect("verifier key published")
            .encrypt(&[u8::from(b)], &mut self.rng);
        Ok(Handled::ok(vec![wire(Role::Verifier, &Message::M7 { r7, ct, sig }, 0)]))
    }
}

impl Actor for Tray {
    fn role(&self) -> Role {
        Role::Tray
    }

    fn handle(&mut self, _now: VirtualTime, input: Input) -> Handled {
        let Input::Deliver { from, payload } = input else {
            return Handled::default();
        };
        let result = decode(payload).and_then(|(msg, _)| match (from, msg) {
            (Role::Verifier, Message::M6 { r6, ct, sig }) => self.on_m6(r6, ct, sig),
            _ => Err(AbortReason::OutOfPhase),
        });
        result.unwrap_or_else(Handled::abort)
    }
}
