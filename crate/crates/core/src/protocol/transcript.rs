// SPDX-License-Identifier: Apache-2.0

//! Transcript logs: a header line with the protocol parameters, then one
//! JSON object per delivered message.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::crypto::ProtocolParameters;
use super::{AbortReason, ProtocolError, Role};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptEntry {
    pub session_id: u64,
    pub virtual_time: u64,
    pub sender: Role,
    pub receiver: Role,
    pub message_tag: String,
    /// Hex of the message's own nonce; empty for on-platform messages.
    pub nonce_hex: String,
    pub accepted: bool,
    pub abort_reason: Option<AbortReason>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    protocol_parameters: ProtocolParameters,
}

pub fn write_transcript<W: Write>(mut out: W, params: &ProtocolParameters, entries: &[TranscriptEntry]) -> Result<(), ProtocolError> {
    let header = Header {
        protocol_parameters: params.clone(),
    };
    serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    for e in entries {
        serde_json::to_writer(&mut out, e).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_transcript<R: BufRead>(input: R) -> Result<(ProtocolParameters, Vec<TranscriptEntry>), ProtocolError> {
    let mut lines = input.lines().enumerate();
    let bad = |line: usize, e: serde_json::Error| ProtocolError::BadTranscript {
        line: line + 1,
        reason: e.to_string(),
    };
    let (i, first) = lines.next().ok_or(ProtocolError::BadTranscript {
        line: 1,
        reason: "missing header".into(),
    })?;
    let header: Header = serde_json::from_str(&first?).map_err(|e| bad(i, e))?;
    let mut entries = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&line).map_err(|e| bad(i, e))?);
    }
    Ok((header.protocol_parameters, entries))
}
