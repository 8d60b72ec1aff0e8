// SPDX-License-Identifier: Apache-2.0

//! Deterministic synthetic traces standing in for captured hardware traces.
//!
//! Every synthetic capture is `CAPTURE_LEN` samples long and laid out as
//!
//! ```text
//! [0, w)              start trigger pulse
//! [w, w + d)          program signature (sinusoids + activity envelope)
//! [w + d, 2w + d)     end trigger pulse
//! [2w + d, 2^21)      baseline tail
//! ```
//!
//! where `w` is the trigger width and `d` the program duration. The trace's
//! trigger marks are `(0, w + d)`, so the execution window of the program's
//! length bucket starts with the start pulse.
//!
//! Noise is i.i.d. Gaussian, drawn from xoshiro256++ in blocks of
//! [`NOISE_BLOCK`] samples. Block `b` of a trace with seed `s` is produced by
//! `Xoshiro256PlusPlus::seed_from_u64(s ^ splitmix64(b))`, sampled with the
//! `rand_distr` ziggurat `StandardNormal`. Any window of a trace is therefore
//! bit-identical to the same slice of the full trace, and corpora can be
//! regenerated lazily from `(profile, seed)` alone.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{LengthBucket, Trace, Triggers, CAPTURE_LEN, SAMPLE_RATE_HZ};

/// Samples per independently seeded noise block.
pub const NOISE_BLOCK: usize = 4096;

const DEFAULT_PROFILES: &str = include_str!("../data/default_profiles.json");

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("profile {program_id}: {reason}")]
    InvalidProfile { program_id: String, reason: String },
    #[error("profile {program_id}: {needed} samples do not fit in a {CAPTURE_LEN}-sample capture")]
    ProfileTooLong { program_id: String, needed: usize },
    #[error("duplicate program id {0}")]
    DuplicateProgramId(String),
    #[error("profile set is empty")]
    EmptyProfileSet,
    #[error("invalid trigger config: {0}")]
    InvalidTriggerConfig(String),
    #[error("bad profile file: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sinusoid {
    pub frequency_hz: f64,
    pub amplitude: f64,
    pub phase: f64,
}

/// Activity level that holds from `offset` (relative to the signature start)
/// until the next step. Before the first step the level is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeStep {
    pub offset: usize,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramProfile {
    pub program_id: String,
    pub duration_samples: usize,
    pub signature: Vec<Sinusoid>,
    pub envelope: Vec<EnvelopeStep>,
    pub baseline_level: f64,
    pub noise_sigma: f64,
}

/// Profile fields as stored in a profile set file, keyed by program id.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFields {
    duration_samples: usize,
    #[serde(default)]
    signature: Vec<Sinusoid>,
    #[serde(default)]
    envelope: Vec<EnvelopeStep>,
    baseline_level: f64,
    noise_sigma: f64,
}

impl ProgramProfile {
    pub fn validate(&self, trigger: &TriggerConfig) -> Result<(), SynthError> {
        let invalid = |reason: String| SynthError::InvalidProfile {
            program_id: self.program_id.clone(),
            reason,
        };
        if self.program_id.is_empty() {
            return Err(invalid("empty program id".into()));
        }
        if self.duration_samples == 0 {
            return Err(invalid("duration must be positive".into()));
        }
        let needed = self.duration_samples + 2 * trigger.width_samples;
        if needed > CAPTURE_LEN {
            return Err(SynthError::ProfileTooLong {
                program_id: self.program_id.clone(),
                needed,
            });
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(invalid(format!("noise_sigma {} is not a non-negative number", self.noise_sigma)));
        }
        if !self.baseline_level.is_finite() {
            return Err(invalid("baseline is not finite".into()));
        }
        let nyquist = f64::from(SAMPLE_RATE_HZ) / 2.0;
        for s in &self.signature {
            if !(s.frequency_hz > 0.0 && s.frequency_hz < nyquist) {
                return Err(invalid(format!("frequency {} Hz outside (0, {nyquist})", s.frequency_hz)));
            }
            if !(s.amplitude.is_finite() && s.phase.is_finite()) {
                return Err(invalid("sinusoid amplitude and phase must be finite".into()));
            }
        }
        for pair in self.envelope.windows(2) {
            if pair[1].offset <= pair[0].offset {
                return Err(invalid("envelope offsets must increase".into()));
            }
        }
        if let Some(step) = self.envelope.iter().find(|s| s.offset >= self.duration_samples || !s.level.is_finite()) {
            return Err(invalid(format!("envelope step at {} is out of range", step.offset)));
        }
        Ok(())
    }

    /// Smallest bucket covering the pulses and the signature.
    pub fn bucket(&self, trigger: &TriggerConfig) -> Result<LengthBucket, SynthError> {
        let needed = self.duration_samples + 2 * trigger.width_samples;
        LengthBucket::fitting(needed).ok_or_else(|| SynthError::ProfileTooLong {
            program_id: self.program_id.clone(),
            needed,
        })
    }

    /// Same program with its signature and envelope amplified by `gain`.
    pub fn amplified(&self, program_id: impl Into<String>, gain: f64) -> ProgramProfile {
        let mut p = self.clone();
        p.program_id = program_id.into();
        for s in &mut p.signature {
            s.amplitude *= gain;
        }
        for e in &mut p.envelope {
            e.level *= gain;
        }
        p
    }
}

/// Shape of the injected trigger pulses and the tolerance used when
/// recovering them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerConfig {
    pub amplitude: f64,
    pub width_samples: usize,
    pub min_excursion: f64,
    pub tolerance_samples: usize,
}

impl Default for TriggerConfig {
    fn default() -> Self {
        Self {
            amplitude: 600.0,
            width_samples: 16,
            min_excursion: 100.0,
            tolerance_samples: 16,
        }
    }
}

impl TriggerConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.width_samples == 0 {
            return Err(SynthError::InvalidTriggerConfig("width_samples must be at least 1".into()));
        }
        if self.tolerance_samples == 0 {
            return Err(SynthError::InvalidTriggerConfig("tolerance_samples must be positive".into()));
        }
        if !self.amplitude.is_finite() || !self.min_excursion.is_finite() || self.min_excursion < 0.0 {
            return Err(SynthError::InvalidTriggerConfig("amplitude and min_excursion must be finite".into()));
        }
        Ok(())
    }
}

/// A profile with its noiseless capture rendered once, ready to produce noisy
/// traces or windows of them.
#[derive(Debug, Clone)]
pub struct RenderedProfile {
    profile: ProgramProfile,
    bucket: LengthBucket,
    triggers: Triggers,
    clean: Arc<[f64]>,
}

impl RenderedProfile {
    pub fn new(profile: ProgramProfile, trigger: &TriggerConfig) -> Result<Self, SynthError> {
        trigger.validate()?;
        profile.validate(trigger)?;
        let bucket = profile.bucket(trigger)?;
        let w = trigger.width_samples;
        let d = profile.duration_samples;
        let mut clean = vec![profile.baseline_level; CAPTURE_LEN];
        for range in [0..w, w + d..2 * w + d] {
            clean[range].iter_mut().for_each(|s| *s += trigger.amplitude);
        }
        let rate = f64::from(SAMPLE_RATE_HZ);
        let mut step = 0;
        let mut level = 0.0;
        for (j, s) in clean[w..w + d].iter_mut().enumerate() {
            while step < profile.envelope.len() && profile.envelope[step].offset == j {
                level = profile.envelope[step].level;
                step += 1;
            }
            let t = j as f64 / rate;
            let tone: f64 = profile
                .signature
                .iter()
                .map(|c| c.amplitude * (std::f64::consts::TAU * c.frequency_hz * t + c.phase).sin())
                .sum();
            *s += tone + level;
        }
        Ok(Self {
            profile,
            bucket,
            triggers: Triggers { start: 0, end: w + d },
            clean: clean.into(),
        })
    }

    pub fn profile(&self) -> &ProgramProfile {
        &self.profile
    }

    pub fn program_id(&self) -> &str {
        &self.profile.program_id
    }

    pub fn bucket(&self) -> LengthBucket {
        self.bucket
    }

    pub fn triggers(&self) -> Triggers {
        self.triggers
    }

    /// The capture without noise.
    pub fn noiseless(&self) -> &[f64] {
        &self.clean
    }

    /// Fills `out` with samples `[start, start + out.len())` of the trace
    /// generated from `seed`.
    ///
    /// # Panics
    ///
    /// If the window runs past the end of the capture.
    pub fn window_into(&self, seed: u64, start: usize, out: &mut [f64]) {
        let end = start + out.len();
        assert!(end <= CAPTURE_LEN, "window [{start}, {end}) exceeds the capture");
        let sigma = self.profile.noise_sigma;
        if sigma == 0.0 || out.is_empty() {
            out.copy_from_slice(&self.clean[start..end]);
            return;
        }
        let mut block = [0.0f64; NOISE_BLOCK];
        for b in start / NOISE_BLOCK..=(end - 1) / NOISE_BLOCK {
            fill_noise_block(seed, b as u64, &mut block);
            let lo = (b * NOISE_BLOCK).max(start);
            let hi = ((b + 1) * NOISE_BLOCK).min(end);
            let noise = &block[lo - b * NOISE_BLOCK..];
            for ((o, c), z) in out[lo - start..hi - start].iter_mut().zip(&self.clean[lo..hi]).zip(noise) {
                *o = c + sigma * z;
            }
        }
    }

    pub fn window(&self, seed: u64, start: usize, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        self.window_into(seed, start, &mut out);
        out
    }

    /// The full labelled capture for `seed`.
    pub fn trace(&self, seed: u64) -> Trace {
        Trace::new(self.window(seed, 0, CAPTURE_LEN))
            .and_then(|t| t.with_triggers(self.triggers.start, self.triggers.end))
            .expect("rendered captures are finite and carry valid marks")
            .with_program_id(self.profile.program_id.clone())
    }
}

fn fill_noise_block(seed: u64, block: u64, out: &mut [f64; NOISE_BLOCK]) {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ SplitMix64::new(block).next_u64());
    for z in out.iter_mut() {
        *z = rng.sample(StandardNormal);
    }
}

/// Generates one labelled synthetic capture.
pub fn generate_trace(profile: &ProgramProfile, trigger: &TriggerConfig, seed: u64) -> Result<Trace, SynthError> {
    Ok(RenderedProfile::new(profile.clone(), trigger)?.trace(seed))
}

/// SplitMix64, used to derive per-trace seeds from a corpus seed.
#[derive(Debug, Clone)]
pub struct SplitMix64(u64);

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub program_id: String,
    pub profile_index: usize,
    pub seed: u64,
}

/// A labelled corpus. Traces are regenerated on demand from their seeds.
///
/// Entries are grouped by profile in declaration order; entry `k` uses the
/// `k`-th SplitMix64 output of the corpus seed.
#[derive(Debug, Clone)]
pub struct Corpus {
    profiles: Vec<Arc<RenderedProfile>>,
    entries: Vec<CorpusEntry>,
    per_program: usize,
}

/// Builds a corpus of `per_program` traces for each profile.
pub fn corpus(
    profiles: &[ProgramProfile],
    trigger: &TriggerConfig,
    per_program: usize,
    seed: u64,
) -> Result<Corpus, SynthError> {
    let rendered = render_all(profiles, trigger)?;
    Ok(Corpus::from_rendered(rendered, per_program, seed))
}

/// Renders a profile set, rejecting empty sets and duplicate ids.
pub fn render_all(profiles: &[ProgramProfile], trigger: &TriggerConfig) -> Result<Vec<Arc<RenderedProfile>>, SynthError> {
    if profiles.is_empty() {
        return Err(SynthError::EmptyProfileSet);
    }
    let mut seen = HashSet::new();
    for p in profiles {
        if !seen.insert(p.program_id.as_str()) {
            return Err(SynthError::DuplicateProgramId(p.program_id.clone()));
        }
    }
    profiles
        .iter()
        .map(|p| RenderedProfile::new(p.clone(), trigger).map(Arc::new))
        .collect()
}

impl Corpus {
    pub fn from_rendered(profiles: Vec<Arc<RenderedProfile>>, per_program: usize, seed: u64) -> Self {
        let mut seeds = SplitMix64::new(seed);
        let entries = profiles
            .iter()
            .enumerate()
            .flat_map(|(i, p)| std::iter::repeat((i, p.program_id().to_owned())).take(per_program))
            .map(|(profile_index, program_id)| CorpusEntry {
                program_id,
                profile_index,
                seed: seeds.next_u64(),
            })
            .collect();
        Self {
            profiles,
            entries,
            per_program,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn per_program(&self) -> usize {
        self.per_program
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn profiles(&self) -> &[Arc<RenderedProfile>] {
        &self.profiles
    }

    pub fn profile(&self, program_id: &str) -> Option<&Arc<RenderedProfile>> {
        self.profiles.iter().find(|p| p.program_id() == program_id)
    }

    /// Entry indices labelled `program_id`.
    pub fn indices_of(&self, program_id: &str) -> std::ops::Range<usize> {
        match self.profiles.iter().position(|p| p.program_id() == program_id) {
            Some(i) => i * self.per_program..(i + 1) * self.per_program,
            None => 0..0,
        }
    }

    pub fn trace(&self, index: usize) -> Trace {
        let e = &self.entries[index];
        self.profiles[e.profile_index].trace(e.seed)
    }

    /// Samples `[start, start + len)` of trace `index`.
    pub fn window(&self, index: usize, start: usize, len: usize) -> Vec<f64> {
        let e = &self.entries[index];
        self.profiles[e.profile_index].window(e.seed, start, len)
    }
}

/// Parses a profile set: a JSON object mapping program id to profile fields.
/// Declaration order is preserved.
pub fn parse_profiles(json: &str) -> Result<Vec<ProgramProfile>, SynthError> {
    let map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(json)?;
    map.into_iter()
        .map(|(program_id, value)| {
            let f: ProfileFields = serde_json::from_value(value)?;
            Ok(ProgramProfile {
                program_id,
                duration_samples: f.duration_samples,
                signature: f.signature,
                envelope: f.envelope,
                baseline_level: f.baseline_level,
                noise_sigma: f.noise_sigma,
            })
        })
        .collect()
}

pub fn profiles_to_json(profiles: &[ProgramProfile]) -> Result<String, SynthError> {
    let mut map = serde_json::Map::new();
    for p in profiles {
        let fields = ProfileFields {
            duration_samples: p.duration_samples,
            signature: p.signature.clone(),
            envelope: p.envelope.clone(),
            baseline_level: p.baseline_level,
            noise_sigma: p.noise_sigma,
        };
        if map.insert(p.program_id.clone(), serde_json::to_value(fields)?).is_some() {
            return Err(SynthError::DuplicateProgramId(p.program_id.clone()));
        }
    }
    Ok(serde_json::to_string_pretty(&map)?)
}

pub fn load_profiles(path: impl AsRef<Path>) -> Result<Vec<ProgramProfile>, SynthError> {
    parse_profiles(&fs::read_to_string(path)?)
}

/// The bundled eight-program set, covering all five length buckets.
pub fn default_profiles() -> Vec<ProgramProfile> {
    parse_profiles(DEFAULT_PROFILES).expect("bundled profile set parses")
}

/// The bundled profile set as JSON text.
pub fn default_profiles_json() -> &'static str {
    DEFAULT_PROFILES
}
