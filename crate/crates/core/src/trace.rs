// SPDX-License-Identifier: Apache-2.0

//! Trace data model and the XADC capture layout.
//!
//! A raw capture is a run of little-endian 32-bit words as written by the DMA
//! engine. Every word holds two 16-bit ADC readings; the low half comes first
//! in time. Each reading carries 12 significant bits aligned to the top of the
//! half-word, so a sample value is `raw >> 4`.
//!
//! Decoded traces are stored in `.trc` files:
//!
//! | offset | size | field                                     |
//! |--------|------|-------------------------------------------|
//! | 0      | 8    | magic `PWRTRC01`                          |
//! | 8      | 4    | sample count `N` (u32 LE)                 |
//! | 12     | 4    | sample rate in Hz (u32 LE)                |
//! | 16     | 4    | start trigger, `0xFFFFFFFF` if unset      |
//! | 20     | 4    | end trigger, `0xFFFFFFFF` if unset        |
//! | 24     | 8·N  | samples as f64 LE                         |

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::TriggerConfig;

/// XADC conversion rate.
pub const SAMPLE_RATE_HZ: u32 = 1_000_000;

/// Samples per capture buffer (the DMA transfer size used for every trace).
pub const CAPTURE_LEN: usize = 1 << 21;

/// Right shift that recovers a 12-bit code from its 16-bit container.
pub const SAMPLE_SHIFT: u32 = 4;

/// Largest 12-bit ADC code.
pub const ADC_FULL_SCALE: u16 = 0x0fff;

const TRC_MAGIC: &[u8; 8] = b"PWRTRC01";
const UNSET_TRIGGER: u32 = u32::MAX;

/// Detrended excursions must clear this many robust standard deviations
/// (plus the configured minimum) to count as a trigger mark.
const NOISE_FLOOR_SIGMAS: f64 = 6.0;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("capture length {0} is not a multiple of 4 bytes")]
    MalformedCapture(usize),
    #[error("capture is empty")]
    EmptyCapture,
    #[error("trace has no samples")]
    EmptyTrace,
    #[error("sample {index} is not finite")]
    NonFiniteSample { index: usize },
    #[error("sample rate must be positive")]
    InvalidSampleRate,
    #[error("invalid trigger pair ({start}, {end}) for {len} samples")]
    InvalidTriggers { start: usize, end: usize, len: usize },
    #[error("trigger marks not found")]
    TriggersNotFound,
    #[error("trace has no trigger marks")]
    TriggersUnset,
    #[error("window of {needed} samples from index {start} exceeds the {available} available")]
    TooShort {
        start: usize,
        needed: usize,
        available: usize,
    },
    #[error("length bucket exponent {0} is outside 17..=21")]
    InvalidBucket(u8),
    #[error("sample {index} ({value}) is not a 12-bit ADC code")]
    NotAdcCode { index: usize, value: f64 },
    #[error("{0} samples cannot be packed two per word")]
    OddLength(usize),
    #[error("bad trace file: {0}")]
    BadFile(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Start and end trigger positions, as sample indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triggers {
    pub start: usize,
    pub end: usize,
}

/// A sequence of voltage readings in ADC units.
///
/// Samples are non-empty and finite. When trigger marks are present they
/// satisfy `start < end <= len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    samples: Vec<f64>,
    sample_rate_hz: u32,
    triggers: Option<Triggers>,
    program_id: Option<String>,
}

impl Trace {
    pub fn new(samples: Vec<f64>) -> Result<Self, TraceError> {
        if samples.is_empty() {
            return Err(TraceError::EmptyTrace);
        }
        if let Some(index) = samples.iter().position(|s| !s.is_finite()) {
            return Err(TraceError::NonFiniteSample { index });
        }
        Ok(Self {
            samples,
            sample_rate_hz: SAMPLE_RATE_HZ,
            triggers: None,
            program_id: None,
        })
    }

    pub fn with_triggers(mut self, start: usize, end: usize) -> Result<Self, TraceError> {
        if start >= end || end > self.samples.len() {
            return Err(TraceError::InvalidTriggers {
                start,
                end,
                len: self.samples.len(),
            });
        }
        self.triggers = Some(Triggers { start, end });
        Ok(self)
    }

    pub fn without_triggers(mut self) -> Self {
        self.triggers = None;
        self
    }

    pub fn with_program_id(mut self, program_id: impl Into<String>) -> Self {
        self.program_id = Some(program_id.into());
        self
    }

    pub fn with_sample_rate(mut self, hz: u32) -> Result<Self, TraceError> {
        if hz == 0 {
            return Err(TraceError::InvalidSampleRate);
        }
        self.sample_rate_hz = hz;
        Ok(self)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// Always false; traces are non-empty by construction.
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn triggers(&self) -> Option<Triggers> {
        self.triggers
    }

    pub fn program_id(&self) -> Option<&str> {
        self.program_id.as_deref()
    }

    /// Borrowed view of the `bucket`-sized window starting at the start trigger.
    pub fn execution_window(&self, bucket: LengthBucket) -> Result<&[f64], TraceError> {
        let start = self.triggers.ok_or(TraceError::TriggersUnset)?.start;
        self.window_at(start, bucket.size())
    }

    pub(crate) fn window_at(&self, start: usize, len: usize) -> Result<&[f64], TraceError> {
        match start.checked_add(len) {
            Some(end) if end <= self.samples.len() => Ok(&self.samples[start..end]),
            _ => Err(TraceError::TooShort {
                start,
                needed: len,
                available: self.samples.len(),
            }),
        }
    }

    /// Locates the trigger marks and records them on the trace.
    pub fn locate_triggers(self, config: &TriggerConfig) -> Result<Self, TraceError> {
        let Triggers { start, end } = detect_triggers(&self, config)?;
        self.with_triggers(start, end)
    }
}

/// Execution-window length class. Bucket `e` keeps `2^e` samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct LengthBucket(u8);

impl LengthBucket {
    pub const MIN_EXPONENT: u8 = 17;
    pub const MAX_EXPONENT: u8 = 21;
    pub const SMALLEST: LengthBucket = LengthBucket(Self::MIN_EXPONENT);
    pub const LARGEST: LengthBucket = LengthBucket(Self::MAX_EXPONENT);

    pub fn new(exponent: u8) -> Result<Self, TraceError> {
        if (Self::MIN_EXPONENT..=Self::MAX_EXPONENT).contains(&exponent) {
            Ok(Self(exponent))
        } else {
            Err(TraceError::InvalidBucket(exponent))
        }
    }

    pub fn exponent(self) -> u8 {
        self.0
    }

    /// Number of samples kept by this bucket.
    pub fn size(self) -> usize {
        1 << self.0
    }

    pub fn all() -> impl Iterator<Item = LengthBucket> {
        (Self::MIN_EXPONENT..=Self::MAX_EXPONENT).map(LengthBucket)
    }

    /// Smallest bucket holding `span` samples, if any.
    pub fn fitting(span: usize) -> Option<Self> {
        Self::all().find(|b| b.size() >= span)
    }
}

impl TryFrom<u8> for LengthBucket {
    type Error = TraceError;

    fn try_from(exponent: u8) -> Result<Self, Self::Error> {
        Self::new(exponent)
    }
}

impl From<LengthBucket> for u8 {
    fn from(bucket: LengthBucket) -> u8 {
        bucket.0
    }
}

/// Capture buffer as transferred by DMA: two readings per word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawCapture {
    pub words: Vec<u32>,
}

impl RawCapture {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TraceError> {
        if bytes.is_empty() {
            return Err(TraceError::EmptyCapture);
        }
        if bytes.len() % 4 != 0 {
            return Err(TraceError::MalformedCapture(bytes.len()));
        }
        let words = bytes
            .chunks_exact(4)
            .map(|w| u32::from_le_bytes([w[0], w[1], w[2], w[3]]))
            .collect();
        Ok(Self { words })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.words.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    pub fn word_count(&self) -> usize {
        self.words.len()
    }

    /// 12-bit codes in time order.
    pub fn codes(&self) -> impl Iterator<Item = u16> + '_ {
        self.words.iter().flat_map(|&w| {
            let low = (w & 0xffff) as u16;
            let high = (w >> 16) as u16;
            [low >> SAMPLE_SHIFT, high >> SAMPLE_SHIFT]
        })
    }
}

/// Decodes a raw capture into a trace with no trigger marks.
pub fn decode_capture(bytes: &[u8]) -> Result<Trace, TraceError> {
    let raw = RawCapture::from_bytes(bytes)?;
    Trace::new(raw.codes().map(f64::from).collect())
}

/// Packs integer samples in `0..=4095` back into the raw capture layout.
pub fn encode_capture(trace: &Trace) -> Result<Vec<u8>, TraceError> {
    encode_codes(trace.samples())
}

pub(crate) fn encode_codes(samples: &[f64]) -> Result<Vec<u8>, TraceError> {
    if samples.len() % 2 != 0 {
        return Err(TraceError::OddLength(samples.len()));
    }
    let code = |index: usize| -> Result<u32, TraceError> {
        let value = samples[index];
        if value.fract() != 0.0 || !(0.0..=f64::from(ADC_FULL_SCALE)).contains(&value) {
            return Err(TraceError::NotAdcCode { index, value });
        }
        Ok((value as u32) << SAMPLE_SHIFT)
    };
    let mut bytes = Vec::with_capacity(samples.len() * 2);
    for pair in (0..samples.len()).step_by(2) {
        let word = code(pair)? | (code(pair + 1)? << 16);
        bytes.extend_from_slice(&word.to_le_bytes());
    }
    Ok(bytes)
}

/// Finds the two trigger marks of a capture.
///
/// The signal is detrended with a centred moving average. The two strongest
/// excursions that clear the noise floor (6 robust standard deviations of the
/// detrended signal) by at least `config.min_excursion` are taken as the
/// marks, and each is reported at its leading edge, earliest first.
pub fn detect_triggers(trace: &Trace, config: &TriggerConfig) -> Result<Triggers, TraceError> {
    let x = trace.samples();
    if x.len() < LengthBucket::SMALLEST.size() {
        return Err(TraceError::TooShort {
            start: 0,
            needed: LengthBucket::SMALLEST.size(),
            available: x.len(),
        });
    }
    let width = config.width_samples.max(1);
    let half = (8 * width).max(128);
    let detrended = detrend(x, half);
    let threshold = NOISE_FLOOR_SIGMAS * robust_sigma(&detrended) + config.min_excursion;

    let first = strongest_excursion(&detrended, threshold, None).ok_or(TraceError::TriggersNotFound)?;
    let guard = first.saturating_sub(2 * half)..(first + width + 2 * half + 1);
    let second =
        strongest_excursion(&detrended, threshold, Some(guard)).ok_or(TraceError::TriggersNotFound)?;

    let (start, end) = if first < second { (first, second) } else { (second, first) };
    Ok(Triggers { start, end })
}

fn detrend(x: &[f64], half: usize) -> Vec<f64> {
    let mut prefix = Vec::with_capacity(x.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for &v in x {
        acc += v;
        prefix.push(acc);
    }
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            x[i] - (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

fn robust_sigma(d: &[f64]) -> f64 {
    let mut scratch: Vec<f64> = d.to_vec();
    let mid = scratch.len() / 2;
    let median = *scratch.select_nth_unstable_by(mid, f64::total_cmp).1;
    for v in scratch.iter_mut() {
        *v = (*v - median).abs();
    }
    let mad = *scratch.select_nth_unstable_by(mid, f64::total_cmp).1;
    1.4826 * mad
}

/// Leading edge of the largest excursion above `threshold`, skipping `exclude`.
fn strongest_excursion(
    d: &[f64],
    threshold: f64,
    exclude: Option<std::ops::Range<usize>>,
) -> Option<usize> {
    let excluded = |i: usize| exclude.as_ref().is_some_and(|r| r.contains(&i));
    let (peak, magnitude) = d
        .iter()
        .enumerate()
        .filter(|&(i, _)| !excluded(i))
        .map(|(i, v)| (i, v.abs()))
        .fold(None, |best: Option<(usize, f64)>, (i, m)| match best {
            Some((_, bm)) if bm >= m => best,
            _ => Some((i, m)),
        })?;
    if magnitude <= threshold {
        return None;
    }
    let sign = d[peak].signum();
    let mut edge = peak;
    while edge > 0 && !excluded(edge - 1) && d[edge - 1] * sign >= 0.5 * magnitude {
        edge -= 1;
    }
    Some(edge)
}

/// Copies the `bucket`-sized execution window that starts at the start trigger.
///
/// The start-trigger sample is the first sample of the window. The result keeps
/// the program label and carries trigger marks relative to the window.
pub fn trim_to_bucket(trace: &Trace, bucket: LengthBucket) -> Result<Trace, TraceError> {
    let marks = trace.triggers.ok_or(TraceError::TriggersUnset)?;
    let window = trace.execution_window(bucket)?;
    let end = (marks.end - marks.start).min(window.len());
    Ok(Trace {
        samples: window.to_vec(),
        sample_rate_hz: trace.sample_rate_hz,
        triggers: Some(Triggers { start: 0, end }),
        program_id: trace.program_id.clone(),
    })
}

/// Writes a trace in the `.trc` layout. The program label is not stored.
pub fn write_trace<W: Write>(mut out: W, trace: &Trace) -> Result<(), TraceError> {
    let n = u32::try_from(trace.len())
        .map_err(|_| TraceError::BadFile(format!("{} samples overflow the header", trace.len())))?;
    let mark = |v: Option<usize>| -> Result<u32, TraceError> {
        match v {
            None => Ok(UNSET_TRIGGER),
            Some(i) => u32::try_from(i)
                .ok()
                .filter(|&i| i != UNSET_TRIGGER)
                .ok_or_else(|| TraceError::BadFile(format!("trigger {i} overflows the header"))),
        }
    };
    out.write_all(TRC_MAGIC)?;
    out.write_all(&n.to_le_bytes())?;
    out.write_all(&trace.sample_rate_hz.to_le_bytes())?;
    out.write_all(&mark(trace.triggers.map(|t| t.start))?.to_le_bytes())?;
    out.write_all(&mark(trace.triggers.map(|t| t.end))?.to_le_bytes())?;
    let mut buf = Vec::with_capacity(trace.len() * 8);
    for s in &trace.samples {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

/// Reads a `.trc` stream written by [`write_trace`].
pub fn read_trace<R: Read>(mut input: R) -> Result<Trace, TraceError> {
    let mut header = [0u8; 24];
    input.read_exact(&mut header).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => TraceError::BadFile("truncated header".into()),
        _ => TraceError::Io(e),
    })?;
    if &header[..8] != TRC_MAGIC {
        return Err(TraceError::BadFile("bad magic".into()));
    }
    let field = |at: usize| u32::from_le_bytes([header[at], header[at + 1], header[at + 2], header[at + 3]]);
    let n = field(8) as usize;
    let rate = field(12);
    let (start, end) = (field(16), field(20));

    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    if body.len() != n * 8 {
        return Err(TraceError::BadFile(format!(
            "header declares {n} samples but body holds {} bytes",
            body.len()
        )));
    }
    let samples = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let trace = Trace::new(samples)?.with_sample_rate(rate)?;
    match (start, end) {
        (UNSET_TRIGGER, UNSET_TRIGGER) => Ok(trace),
        (UNSET_TRIGGER, _) | (_, UNSET_TRIGGER) => {
            Err(TraceError::BadFile("only one trigger mark set".into()))
        }
        (s, e) => trace.with_triggers(s as usize, e as usize),
    }
}

pub fn save_trace(path: impl AsRef<Path>, trace: &Trace) -> Result<(), TraceError> {
    write_trace(BufWriter::new(fs::File::create(path)?), trace)
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Trace, TraceError> {
    read_trace(BufReader::new(fs::File::open(path)?))
}

/// Reads a headerless `.xadc` capture file.
pub fn load_capture(path: impl AsRef<Path>) -> Result<Trace, TraceError> {
    decode_capture(&fs::read(path)?)
}

pub fn save_capture(path: impl AsRef<Path>, trace: &Trace) -> Result<(), TraceError> {
    fs::write(path, encode_capture(trace)?)?;
    Ok(())
}
