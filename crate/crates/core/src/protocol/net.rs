// SPDX-License-Identifier: Apache-2.0

//! Message delivery on a virtual clock.
//!
//! The router owns the only clock. A message sent at time `t` after a
//! processing delay `d` over a link with latency `l` is delivered at
//! `t + d + l`; ties are broken by send order. Every wire message on a
//! link passes through an [`Interposer`] first, which may return it
//! unchanged, drop it, rewrite it or add more messages. Physical
//! execution records bypass the interposer.
//!
//! Actors run either on the caller's thread ([`Interleaved`]) or on one
//! thread each ([`Threaded`]). The router waits for each actor's reply
//! before it delivers the next event, so both hosts produce the same
//! transcript.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::mpsc;
use std::thread;

use super::actors::{Actor, Handled, Input, Outbound, Payload, VerifierReport, VirtualTime};
use super::crypto::Nonce;
use super::transcript::TranscriptEntry;
use super::wire::tag_name;
use super::Role;

/// An adversary's position on the network.
pub trait Interposer: Send {
    /// Called for every wire message before it enters the link. Returns
    /// the messages to deliver in its place.
    fn intercept(&mut self, session: u64, from: Role, to: Role, bytes: Vec<u8>) -> Vec<Vec<u8>>;
}

/// Delivers every message unchanged.
#[derive(Debug, Default, Clone, Copy)]
pub struct PassThrough;

impl Interposer for PassThrough {
    fn intercept(&mut self, _: u64, _: Role, _: Role, bytes: Vec<u8>) -> Vec<Vec<u8>> {
        vec![bytes]
    }
}

/// Something that can run actors.
pub trait Host {
    fn call(&mut self, role: Role, now: VirtualTime, input: Input) -> Handled;
}

/// All actors on the caller's thread.
pub struct Interleaved {
    actors: BTreeMap<Role, Box<dyn Actor>>,
}

impl Interleaved {
    pub fn new(actors: Vec<Box<dyn Actor>>) -> Self {
        Self {
            actors: actors.into_iter().map(|a| (a.role(), a)).collect(),
        }
    }
}

impl Host for Interleaved {
    fn call(&mut self, role: Role, now: VirtualTime, input: Input) -> Handled {
        self.actors.get_mut(&role).expect("actor for every role").handle(now, input)
    }
}

struct Worker {
    requests: mpsc::Sender<(VirtualTime, Input)>,
    replies: mpsc::Receiver<Handled>,
    handle: Option<thread::JoinHandle<()>>,
}

/// One thread per actor.
pub struct Threaded {
    workers: BTreeMap<Role, Worker>,
}

impl Threaded {
    pub fn new(actors: Vec<Box<dyn Actor>>) -> Self {
        let workers = actors
            .into_iter()
            .map(|mut actor| {
                let role = actor.role();
                let (req_tx, req_rx) = mpsc::channel::<(VirtualTime, Input)>();
                let (rep_tx, rep_rx) = mpsc::channel();
                let handle = thread::Builder::new()
                    .name(format!("actor-{role}"))
                    .spawn(move || {
                        for (now, input) in req_rx {
                            if rep_tx.send(actor.handle(now, input)).is_err() {
                                break;
                            }
                        }
                    })
                    .expect("spawn actor thread");
                (
                    role,
                    Worker {
                        requests: req_tx,
                        replies: rep_rx,
                        handle: Some(handle),
                    },
                )
            })
            .collect();
        Self { workers }
    }
}

impl Host for Threaded {
    fn call(&mut self, role: Role, now: VirtualTime, input: Input) -> Handled {
        let w = self.workers.get(&role).expect("actor for every role");
        w.requests.send((now, input)).expect("actor thread alive");
        w.replies.recv().expect("actor thread alive")
    }
}

impl Drop for Threaded {
    fn drop(&mut self) {
        for w in self.workers.values_mut() {
            // Closing the request channel ends the worker loop.
            let (dead, _) = mpsc::channel();
            w.requests = dead;
            if let Some(h) = w.handle.take() {
                let _ = h.join();
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Latency {
    /// One-way latency between V, P and MT.
    pub network_us: VirtualTime,
    /// One-way latency between P and its TEE.
    pub platform_us: VirtualTime,
}

impl Default for Latency {
    fn default() -> Self {
        Self {
            network_us: 1_000,
            platform_us: 10,
        }
    }
}

impl Latency {
    pub fn between(&self, a: Role, b: Role) -> VirtualTime {
        match (a, b) {
            (Role::Prover, Role::Tee) | (Role::Tee, Role::Prover) => self.platform_us,
            _ => self.network_us,
        }
    }
}

struct Event {
    at: VirtualTime,
    seq: u64,
    from: Role,
    to: Role,
    payload: Payload,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed: BinaryHeap is a max-heap and the earliest event goes first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// The virtual clock and delivery queue.
#[derive(Debug, Default)]
pub struct Network {
    now: VirtualTime,
    seq: u64,
    latency: Latency,
}

impl Network {
    pub fn new(latency: Latency) -> Self {
        Self {
            now: 0,
            seq: 0,
            latency,
        }
    }

    pub fn now(&self) -> VirtualTime {
        self.now
    }

    /// Runs one session to completion and returns the verifier's report.
    pub fn run_session(
        &mut self,
        host: &mut dyn Host,
        session: u64,
        forced_token: Option<Nonce>,
        interposer: &mut dyn Interposer,
        transcript: &mut Vec<TranscriptEntry>,
    ) -> VerifierReport {
        let mut queue = BinaryHeap::new();
        let first = host.call(Role::Verifier, self.now, Input::Start { session, forced_token });
        let mut report = first.outcome;
        self.schedule(&mut queue, session, Role::Verifier, first.outputs, interposer);
        while let Some(ev) = queue.pop() {
            self.now = ev.at;
            let (tag, nonce) = describe(&ev.payload);
            let handled = host.call(
                ev.to,
                self.now,
                Input::Deliver {
                    from: ev.from,
                    payload: ev.payload,
                },
            );
            transcript.push(TranscriptEntry {
                session_id: session,
                virtual_time: self.now,
                sender: ev.from,
                receiver: ev.to,
                message_tag: tag,
                nonce_hex: nonce,
                accepted: handled.status.is_none(),
                abort_reason: handled.status,
            });
            if report.is_none() {
                report = handled.outcome;
            }
            self.schedule(&mut queue, session, ev.to, handled.outputs, interposer);
        }
        report
            .or_else(|| host.call(Role::Verifier, self.now, Input::Timeout).outcome)
            .expect("the verifier reports every session it starts")
    }

    fn schedule(&mut self, queue: &mut BinaryHeap<Event>, session: u64, from: Role, outputs: Vec<Outbound>, interposer: &mut dyn Interposer) {
        for out in outputs {
            let at = self.now + out.delay_us + self.latency.between(from, out.to);
            let payloads = match out.payload {
                Payload::Wire(bytes) => interposer
                    .intercept(session, from, out.to, bytes)
                    .into_iter()
                    .map(Payload::Wire)
                    .collect(),
                physical => vec![physical],
            };
            for payload in payloads {
                self.seq += 1;
                queue.push(Event {
                    at,
                    seq: self.seq,
                    from,
                    to: out.to,
                    payload,
                });
            }
        }
    }
}

/// Transcript tag and nonce of a payload, read from the wire layout
/// without a full decode.
fn describe(payload: &Payload) -> (String, String) {
    match payload {
        Payload::Physical(_) => ("EXEC".into(), String::new()),
        Payload::Wire(bytes) => {
            let tag = bytes.first().and_then(|&t| tag_name(t)).unwrap_or("?");
            let has_nonce = tag.starts_with('M');
            let nonce = match bytes.get(1..37) {
                Some(f) if has_nonce && f[..4] == 32u32.to_le_bytes() => hex::encode(&f[4..]),
                _ => String::new(),
            };
            (tag.into(), nonce)
        }
    }
}
