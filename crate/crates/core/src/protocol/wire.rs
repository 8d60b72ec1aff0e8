// SPDX-License-Identifier: Apache-2.0

//! Deterministic message encoding.
//!
//! A message is one tag byte followed by its fields, each written as a
//! little-endian `u32` length and the field bytes. Integers are fixed-width
//! little-endian fields. Decoding is strict: every field must have the
//! expected size and no bytes may trail the last field.

use super::crypto::{Digest, Nonce, DIGEST_LEN, NONCE_LEN, PUBLIC_KEYS_LEN, SIGNATURE_LEN};

#[derive(Debug, Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self { buf: Vec::with_capacity(n) }
    }

    pub fn tag(&mut self, tag: u8) -> &mut Self {
        self.buf.push(tag);
        self
    }

    pub fn bytes(&mut self, field: &[u8]) -> &mut Self {
        let len = u32::try_from(field.len()).expect("field longer than 4 GiB");
        self.buf.extend_from_slice(&len.to_le_bytes());
        self.buf.extend_from_slice(field);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.bytes(&v.to_le_bytes())
    }

    pub fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.buf)
    }
}

/// Decoding failure; the receiving actor reports it as `Malformed`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Malformed;

pub struct Decoder<'a> {
    rest: &'a [u8],
}

impl<'a> Decoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { rest: bytes }
    }

    pub fn tag(&mut self) -> Result<u8, Malformed> {
        let (&t, rest) = self.rest.split_first().ok_or(Malformed)?;
        self.rest = rest;
        Ok(t)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], Malformed> {
        if self.rest.len() < 4 {
            return Err(Malformed);
        }
        let len = u32::from_le_bytes(self.rest[..4].try_into().unwrap()) as usize;
        let rest = &self.rest[4..];
        if rest.len() < len {
            return Err(Malformed);
        }
        let (field, rest) = rest.split_at(len);
        self.rest = rest;
        Ok(field)
    }

    pub fn fixed<const N: usize>(&mut self) -> Result<[u8; N], Malformed> {
        self.bytes()?.try_into().map_err(|_| Malformed)
    }

    pub fn u32(&mut self) -> Result<u32, Malformed> {
        Ok(u32::from_le_bytes(self.fixed()?))
    }

    pub fn string(&mut self) -> Result<String, Malformed> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Malformed)
    }

    pub fn end(&self) -> Result<(), Malformed> {
        if self.rest.is_empty() {
            Ok(())
        } else {
            Err(Malformed)
        }
    }
}

pub type Signature = [u8; SIGNATURE_LEN];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    M1 { r1: Nonce, app_id: String },
    M2 { r2: Nonce, ct: Vec<u8>, sig: Signature },
    M3 { r3: Nonce, n: u32, token: Nonce, app_id: String, sig: Signature },
    M4 { r4: Nonce, ct: Vec<u8>, sig: Signature },
    /// `m4` is the exact encoding of the TEE's `M4`.
    M5 { r5: Nonce, m4: Vec<u8>, fingerprint: Digest, out: Digest, sig: Signature },
    M6 { r6: Nonce, ct: Vec<u8>, sig: Signature },
    M7 { r7: Nonce, ct: Vec<u8>, sig: Signature },
    /// On-platform request from `P` to start a TEE for an application.
    Launch { app_id: String },
    /// The freshly launched TEE's public keys.
    Ready { pk_tee: [u8; PUBLIC_KEYS_LEN] },
    /// `P` has produced its output; the TEE may release the measurements.
    Ack,
}

const TAGS: [(u8, &str); 10] = [
    (1, "M1"),
    (2, "M2"),
    (3, "M3"),
    (4, "M4"),
    (5, "M5"),
    (6, "M6"),
    (7, "M7"),
    (0x10, "LAUNCH"),
    (0x11, "READY"),
    (0x12, "ACK"),
];

/// Transcript name for a tag byte.
pub fn tag_name(tag: u8) -> Option<&'static str> {
    TAGS.iter().find(|(t, _)| *t == tag).map(|(_, n)| *n)
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::M1 { .. } => 1,
            Message::M2 { .. } => 2,
            Message::M3 { .. } => 3,
            Message::M4 { .. } => 4,
            Message::M5 { .. } => 5,
            Message::M6 { .. } => 6,
            Message::M7 { .. } => 7,
            Message::Launch { .. } => 0x10,
            Message::Ready { .. } => 0x11,
            Message::Ack => 0x12,
        }
    }

    pub fn name(&self) -> &'static str {
        tag_name(self.tag()).expect("every variant has a name")
    }

    /// The message's own freshness nonce, if it carries one.
    pub fn nonce(&self) -> Option<&Nonce> {
        match self {
            Message::M1 { r1: r, .. }
            | Message::M2 { r2: r, .. }
            | Message::M3 { r3: r, .. }
            | Message::M4 { r4: r, .. }
            | Message::M5 { r5: r, .. }
            | Message::M6 { r6: r, .. }
            | Message::M7 { r7: r, .. } => Some(r),
            _ => None,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::with_capacity(self.encoded_len_hint());
        e.tag(self.tag());
        match self {
            Message::M1 { r1, app_id } => e.bytes(r1).bytes(app_id.as_bytes()),
            Message::M2 { r2: r, ct, sig } | Message::M4 { r4: r, ct, sig } | Message::M6 { r6: r, ct, sig } | Message::M7 { r7: r, ct, sig } => {
                e.bytes(r).bytes(ct).bytes(sig)
            }
            Message::M3 { r3, n, token, app_id, sig } => e.bytes(r3).u32(*n).bytes(token).bytes(app_id.as_bytes()).bytes(sig),
            Message::M5 { r5, m4, fingerprint, out, sig } => e.bytes(r5).bytes(m4).bytes(fingerprint).bytes(out).bytes(sig),
            Message::Launch { app_id } => e.bytes(app_id.as_bytes()),
            Message::Ready { pk_tee } => e.bytes(pk_tee),
            Message::Ack => &mut e,
        };
        e.finish()
    }

    fn encoded_len_hint(&self) -> usize {
        let body = match self {
            Message::M2 { ct, .. } | Message::M4 { ct, .. } | Message::M6 { ct, .. } | Message::M7 { ct, .. } => ct.len(),
            Message::M5 { m4, .. } => m4.len(),
            _ => 0,
        };
        body + 256
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, Malformed> {
        let mut d = Decoder::new(bytes);
        let tag = d.tag()?;
        let msg = match tag {
            1 => Message::M1 { r1: d.fixed()?, app_id: d.string()? },
            2 | 4 | 6 | 7 => {
                let r = d.fixed()?;
                let ct = d.bytes()?.to_vec();
                let sig = d.fixed()?;
                match tag {
                    2 => Message::M2 { r2: r, ct, sig },
                    4 => Message::M4 { r4: r, ct, sig },
                    6 => Message::M6 { r6: r, ct, sig },
                    _ => Message::M7 { r7: r, ct, sig },
                }
            }
            3 => Message::M3 {
                r3: d.fixed()?,
                n: d.u32()?,
                token: d.fixed()?,
                app_id: d.string()?,
                sig: d.fixed()?,
            },
            5 => Message::M5 {
                r5: d.fixed()?,
                m4: d.bytes()?.to_vec(),
                fingerprint: d.fixed()?,
                out: d.fixed()?,
                sig: d.fixed()?,
            },
            0x10 => Message::Launch { app_id: d.string()? },
            0x11 => Message::Ready { pk_tee: d.fixed()? },
            0x12 => Message::Ack,
            _ => return Err(Malformed),
        };
        d.end()?;
        Ok(msg)
    }
}

/// Plaintext of `M2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchReport {
    pub prover_id: String,
    pub res: Digest,
    pub pk_tee: [u8; PUBLIC_KEYS_LEN],
}

impl LaunchReport {
    pub fn encode(&self) -> Vec<u8> {
        Encoder::new().bytes(self.prover_id.as_bytes()).bytes(&self.res).bytes(&self.pk_tee).finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, Malformed> {
        let mut d = Decoder::new(bytes);
        let r = Self {
            prover_id: d.string()?,
            res: d.fixed()?,
            pk_tee: d.fixed()?,
        };
        d.end()?;
        Ok(r)
    }
}

/// A batch of encoded traces: a count, then one field per trace.
pub fn encode_traces(e: &mut Encoder, traces: &[Vec<u8>]) {
    e.u32(traces.len() as u32);
    for t in traces {
        e.bytes(t);
    }
}

pub fn decode_traces(d: &mut Decoder<'_>) -> Result<Vec<Vec<u8>>, Malformed> {
    let n = d.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        out.push(d.bytes()?.to_vec());
    }
    Ok(out)
}

/// Plaintext of `M6`: one `(tau, out)` pair per computation round, the
/// application and the collected traces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrayRequest {
    pub rounds: Vec<(Nonce, Digest)>,
    pub app_id: String,
    pub traces: Vec<Vec<u8>>,
}

impl TrayRequest {
    pub fn encode(&self) -> Vec<u8> {
        let size: usize = self.traces.iter().map(|t| t.len() + 4).sum();
        let mut e = Encoder::with_capacity(size + 128 * (self.rounds.len() + 1));
        e.u32(self.rounds.len() as u32);
        for (tau, out) in &self.rounds {
            e.bytes(tau).bytes(out);
        }
        e.bytes(self.app_id.as_bytes());
        encode_traces(&mut e, &self.traces);
        e.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, Malformed> {
        let mut d = Decoder::new(bytes);
        let k = d.u32()? as usize;
        let mut rounds = Vec::with_capacity(k.min(1 << 16));
        for _ in 0..k {
            rounds.push((d.fixed()?, d.fixed()?));
        }
        let app_id = d.string()?;
        let traces = decode_traces(&mut d)?;
        d.end()?;
        Ok(Self { rounds, app_id, traces })
    }
}

pub fn encode_trace_batch(traces: &[Vec<u8>]) -> Vec<u8> {
    let size: usize = traces.iter().map(|t| t.len() + 4).sum();
    let mut e = Encoder::with_capacity(size + 4);
    encode_traces(&mut e, traces);
    e.finish()
}

pub fn decode_trace_batch(bytes: &[u8]) -> Result<Vec<Vec<u8>>, Malformed> {
    let mut d = Decoder::new(bytes);
    let t = decode_traces(&mut d)?;
    d.end()?;
    Ok(t)
}

/// Plaintext of `M7`: exactly one byte, 0 or 1.
pub fn decode_verdict(bytes: &[u8]) -> Result<bool, Malformed> {
    match bytes {
        [0] => Ok(false),
        [1] => Ok(true),
        _ => Err(Malformed),
    }
}

const _: () = assert!(NONCE_LEN == 32 && DIGEST_LEN == 32);
