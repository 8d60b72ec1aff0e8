// SPDX-License-Identifier: Apache-2.0

//! Program templates: the filtered mean of many execution windows, plus a
//! per-template correlation threshold.
//!
//! Template files (`.tpl`) are laid out as
//!
//! | field          | encoding                                   |
//! |----------------|--------------------------------------------|
//! | magic          | `PWRTPL01`                                 |
//! | program id     | u32 LE byte length, then UTF-8             |
//! | bucket         | u8 exponent                                |
//! | corr_thres     | f64 LE, NaN while uncalibrated             |
//! | trace_count    | u32 LE                                     |
//! | filter_window  | u16 LE                                     |
//! | filter_order   | u8                                         |
//! | samples        | `2^exponent` f64 LE                        |

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::matcher::{pearson, MatchError, PreparedTemplate};
use crate::savgol::{savitzky_golay, BadFilterParams};
use crate::trace::{LengthBucket, Trace, TraceError};

pub const DEFAULT_FILTER_WINDOW: u16 = 51;
pub const DEFAULT_FILTER_ORDER: u8 = 3;
pub const DEFAULT_PERCENTILE: f64 = 25.0;

/// Calibration needs at least this many correlations.
pub const MIN_CALIBRATION_TRACES: usize = 4;

const TPL_MAGIC: &[u8; 8] = b"PWRTPL01";

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("traces carry different labels ({expected} and {found})")]
    MixedLabels { expected: String, found: String },
    #[error("trace {0} has no program label")]
    Unlabelled(usize),
    #[error("need at least {needed} traces, got {got}")]
    InsufficientTraces { needed: usize, got: usize },
    #[error(transparent)]
    BadFilterParams(#[from] BadFilterParams),
    #[error("percentile {0} is outside [0, 100]")]
    BadPercentile(f64),
    #[error("window has {got} samples, bucket needs {expected}")]
    WindowLength { expected: usize, got: usize },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error("bad template file: {0}")]
    BadFile(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    pub program_id: String,
    pub samples: Vec<f64>,
    pub bucket: LengthBucket,
    pub corr_thres: Option<f64>,
    pub trace_count: u32,
    pub filter_window: u16,
    pub filter_order: u8,
}

impl Template {
    pub fn is_calibrated(&self) -> bool {
        self.corr_thres.is_some()
    }
}

/// Accumulates execution windows one at a time, so a template can be built
/// without holding every trace in memory.
#[derive(Debug, Clone)]
pub struct TemplateBuilder {
    program_id: String,
    bucket: LengthBucket,
    sum: Vec<f64>,
    count: u32,
}

impl TemplateBuilder {
    pub fn new(program_id: impl Into<String>, bucket: LengthBucket) -> Self {
        Self {
            program_id: program_id.into(),
            bucket,
            sum: vec![0.0; bucket.size()],
            count: 0,
        }
    }

    pub fn program_id(&self) -> &str {
        &self.program_id
    }

    pub fn count(&self) -> u32 {
        self.count
    }

    /// Adds one execution window of exactly `bucket.size()` samples.
    pub fn add_window(&mut self, window: &[f64]) -> Result<(), TemplateError> {
        if window.len() != self.sum.len() {
            return Err(TemplateError::WindowLength {
                expected: self.sum.len(),
                got: window.len(),
            });
        }
        for (s, x) in self.sum.iter_mut().zip(window) {
            *s += x;
        }
        self.count += 1;
        Ok(())
    }

    /// Adds a labelled trace, trimming it to the bucket.
    pub fn add_trace(&mut self, trace: &Trace) -> Result<(), TemplateError> {
        match trace.program_id() {
            Some(id) if id == self.program_id => self.add_window(trace.execution_window(self.bucket)?),
            Some(id) => Err(TemplateError::MixedLabels {
                expected: self.program_id.clone(),
                found: id.to_owned(),
            }),
            None => Err(TemplateError::Unlabelled(self.count as usize)),
        }
    }

    /// Averages the windows, then smooths the mean.
    pub fn finish(self, window: u16, order: u8) -> Result<Template, TemplateError> {
        if self.count < 2 {
            return Err(TemplateError::InsufficientTraces {
                needed: 2,
                got: self.count as usize,
            });
        }
        let n = f64::from(self.count);
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let samples = savitzky_golay(&mean, usize::from(window), usize::from(order))?;
        Ok(Template {
            program_id: self.program_id,
            samples,
            bucket: self.bucket,
            corr_thres: None,
            trace_count: self.count,
            filter_window: window,
            filter_order: order,
        })
    }
}

/// Builds an uncalibrated template from traces of one program.
///
/// ```
/// use power_attest::template::build_template;
/// use power_attest::trace::{LengthBucket, Trace};
///
/// let bucket = LengthBucket::new(17).unwrap();
/// let flat = |v: f64| {
///     Trace::new(vec![v; bucket.size()])
///         .unwrap()
///         .with_triggers(0, 100)
///         .unwrap()
///         .with_program_id("idle")
/// };
/// let tpl = build_template(&[flat(2.0), flat(4.0)], bucket, 51, 3).unwrap();
/// assert!(tpl.samples.iter().all(|&s| (s - 3.0).abs() < 1e-12));
/// assert_eq!(tpl.corr_thres, None);
/// ```
pub fn build_template(traces: &[Trace], bucket: LengthBucket, window: u16, order: u8) -> Result<Template, TemplateError> {
    // Check the filter before any averaging work.
    check_filter(bucket, window, order)?;
    let first = traces.first().ok_or(TemplateError::InsufficientTraces { needed: 2, got: 0 })?;
    let id = first.program_id().ok_or(TemplateError::Unlabelled(0))?;
    let mut builder = TemplateBuilder::new(id, bucket);
    for trace in traces {
        builder.add_trace(trace)?;
    }
    builder.finish(window, order)
}

pub fn check_filter(bucket: LengthBucket, window: u16, order: u8) -> Result<(), TemplateError> {
    let (w, o) = (usize::from(window), usize::from(order));
    if w % 2 == 0 || w == 0 || w > bucket.size() || o >= w {
        return Err(BadFilterParams {
            window: w,
            order: o,
            len: bucket.size(),
        }
        .into());
    }
    Ok(())
}

/// Value at index `floor(percentile / 100 * count)` of the ascending
/// correlations (clamped to the last index). Sorts `correlations` in place.
pub fn percentile_threshold(correlations: &mut [f64], percentile: f64) -> Result<f64, TemplateError> {
    if !(0.0..=100.0).contains(&percentile) {
        return Err(TemplateError::BadPercentile(percentile));
    }
    if correlations.len() < MIN_CALIBRATION_TRACES {
        return Err(TemplateError::InsufficientTraces {
            needed: MIN_CALIBRATION_TRACES,
            got: correlations.len(),
        });
    }
    correlations.sort_by(f64::total_cmp);
    let index = ((percentile / 100.0) * correlations.len() as f64).floor() as usize;
    Ok(correlations[index.min(correlations.len() - 1)])
}

/// Sets `corr_thres` from the Pearson correlations of `traces` against the
/// template.
pub fn calibrate_threshold(template: &Template, traces: &[Trace], percentile: f64) -> Result<Template, TemplateError> {
    if !(0.0..=100.0).contains(&percentile) {
        return Err(TemplateError::BadPercentile(percentile));
    }
    if traces.len() < MIN_CALIBRATION_TRACES {
        return Err(TemplateError::InsufficientTraces {
            needed: MIN_CALIBRATION_TRACES,
            got: traces.len(),
        });
    }
    let mut correlations = Vec::with_capacity(traces.len());
    for (i, trace) in traces.iter().enumerate() {
        match trace.program_id() {
            Some(id) if id == template.program_id => {}
            Some(id) => {
                return Err(TemplateError::MixedLabels {
                    expected: template.program_id.clone(),
                    found: id.to_owned(),
                })
            }
            None => return Err(TemplateError::Unlabelled(i)),
        }
        correlations.push(pearson(trace.execution_window(template.bucket)?, &template.samples)?);
    }
    calibrate_from_correlations(template, correlations, percentile)
}

/// Like [`calibrate_threshold`], with the correlations already computed.
pub fn calibrate_from_correlations(
    template: &Template,
    mut correlations: Vec<f64>,
    percentile: f64,
) -> Result<Template, TemplateError> {
    let thres = percentile_threshold(&mut correlations, percentile)?;
    Ok(Template {
        corr_thres: Some(thres),
        ..template.clone()
    })
}

/// Calibrates from windows produced on demand, using the prepared fast
/// correlation path.
pub fn calibrate_windows<I>(template: &Template, windows: I, percentile: f64) -> Result<Template, TemplateError>
where
    I: IntoIterator<Item = Result<Vec<f64>, TemplateError>>,
{
    let prepared = PreparedTemplate::new(template)?;
    let correlations = windows
        .into_iter()
        .map(|w| Ok(prepared.correlate(&w?)?))
        .collect::<Result<Vec<f64>, TemplateError>>()?;
    calibrate_from_correlations(template, correlations, percentile)
}

pub fn write_template<W: Write>(mut out: W, t: &Template) -> Result<(), TemplateError> {
    if t.samples.len() != t.bucket.size() {
        return Err(TemplateError::WindowLength {
            expected: t.bucket.size(),
            got: t.samples.len(),
        });
    }
    let id = t.program_id.as_bytes();
    let id_len = u32::try_from(id.len()).map_err(|_| TemplateError::BadFile("program id too long".into()))?;
    out.write_all(TPL_MAGIC)?;
    out.write_all(&id_len.to_le_bytes())?;
    out.write_all(id)?;
    out.write_all(&[t.bucket.exponent()])?;
    out.write_all(&t.corr_thres.unwrap_or(f64::NAN).to_le_bytes())?;
    out.write_all(&t.trace_count.to_le_bytes())?;
    out.write_all(&t.filter_window.to_le_bytes())?;
    out.write_all(&[t.filter_order])?;
    let mut buf = Vec::with_capacity(t.samples.len() * 8);
    for s in &t.samples {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn read_template<R: Read>(mut input: R) -> Result<Template, TemplateError> {
    fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N], TemplateError> {
        let mut b = [0u8; N];
        r.read_exact(&mut b).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => TemplateError::BadFile("truncated header".into()),
            _ => TemplateError::Io(e),
        })?;
        Ok(b)
    }
    if &take::<8>(&mut input)? != TPL_MAGIC {
        return Err(TemplateError::BadFile("bad magic".into()));
    }
    let id_len = u32::from_le_bytes(take(&mut input)?) as usize;
    if id_len > 4096 {
        return Err(TemplateError::BadFile(format!("program id length {id_len}")));
    }
    let mut id = vec![0u8; id_len];
    input
        .read_exact(&mut id)
        .map_err(|_| TemplateError::BadFile("truncated program id".into()))?;
    let program_id = String::from_utf8(id).map_err(|_| TemplateError::BadFile("program id is not UTF-8".into()))?;
    let bucket = LengthBucket::new(take::<1>(&mut input)?[0])?;
    let thres = f64::from_le_bytes(take(&mut input)?);
    let trace_count = u32::from_le_bytes(take(&mut input)?);
    let filter_window = u16::from_le_bytes(take(&mut input)?);
    let filter_order = take::<1>(&mut input)?[0];

    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    if body.len() != bucket.size() * 8 {
        return Err(TemplateError::BadFile(format!(
            "bucket {} needs {} sample bytes, found {}",
            bucket.exponent(),
            bucket.size() * 8,
            body.len()
        )));
    }
    let samples = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Template {
        program_id,
        samples,
        bucket,
        corr_thres: (!thres.is_nan()).then_some(thres),
        trace_count,
        filter_window,
        filter_order,
    })
}

pub fn save_template(path: impl AsRef<Path>, t: &Template) -> Result<(), TemplateError> {
    write_template(BufWriter::new(fs::File::create(path)?), t)
}

pub fn load_template(path: impl AsRef<Path>) -> Result<Template, TemplateError> {
    read_template(BufReader::new(fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{RenderedProfile, SplitMix64, TriggerConfig};

    fn bucket() -> LengthBucket {
        LengthBucket::SMALLEST
    }

    fn labelled(samples: Vec<f64>, id: &str) -> Trace {
        Trace::new(samples).unwrap().with_triggers(0, 10).unwrap().with_program_id(id)
    }

    #[test]
    fn symmetric_pair_averages_to_constant() {
        let n = bucket().size();
        let t: Vec<f64> = (0..n).map(|i| ((i * 7919) % 1000) as f64).collect();
        let mirror: Vec<f64> = t.iter().map(|v| -v + 2.0 * 5.0).collect();
        let mut b = TemplateBuilder::new("p", bucket());
        b.add_trace(&labelled(t, "p")).unwrap();
        b.add_trace(&labelled(mirror, "p")).unwrap();
        // Window 1, order 0 is the identity filter, exposing the raw mean.
        let tpl = b.finish(1, 0).unwrap();
        assert!(tpl.samples.iter().all(|&s| (s - 5.0).abs() < 1e-12));
    }

    #[test]
    fn build_errors() {
        let a = labelled(vec![1.0; bucket().size()], "a");
        let b = labelled(vec![1.0; bucket().size()], "b");
        assert!(matches!(
            build_template(&[a.clone(), b], bucket(), 51, 3),
            Err(TemplateError::MixedLabels { .. })
        ));
        assert!(matches!(
            build_template(&[a.clone()], bucket(), 51, 3),
            Err(TemplateError::InsufficientTraces { got: 1, .. })
        ));
        assert!(matches!(
            build_template(&[a.clone(), a.clone()], bucket(), 50, 3),
            Err(TemplateError::BadFilterParams(_))
        ));
        assert!(matches!(
            build_template(&[a.clone(), a], bucket(), 5, 5),
            Err(TemplateError::BadFilterParams(_))
        ));
    }

    #[test]
    fn permutation_does_not_change_template() {
        let n = bucket().size();
        let traces: Vec<Trace> = (0..5)
            .map(|k| labelled((0..n).map(|i| ((i * (k + 3)) % 17) as f64 * 0.25).collect(), "p"))
            .collect();
        let mut rev = traces.clone();
        rev.reverse();
        let a = build_template(&traces, bucket(), 51, 3).unwrap();
        let b = build_template(&rev, bucket(), 51, 3).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn template_recovers_noiseless_signal() {
        let trigger = TriggerConfig::default();
        // Tones well below the filter's pass band edge, so smoothing leaves
        // the clean signal intact to far better than the tolerance.
        let p = crate::synth::ProgramProfile {
            program_id: "slow".into(),
            duration_samples: 100_000,
            signature: vec![
                crate::synth::Sinusoid { frequency_hz: 400.0, amplitude: 12.0, phase: 0.4 },
                crate::synth::Sinusoid { frequency_hz: 900.0, amplitude: 8.0, phase: 1.3 },
            ],
            envelope: vec![
                crate::synth::EnvelopeStep { offset: 0, level: 10.0 },
                crate::synth::EnvelopeStep { offset: 50_000, level: -10.0 },
            ],
            baseline_level: 1365.0,
            noise_sigma: 0.01,
        };
        let r = RenderedProfile::new(p, &trigger).unwrap();
        let mut b = TemplateBuilder::new(r.program_id(), r.bucket());
        let mut seeds = SplitMix64::new(77);
        let mut buf = vec![0.0; r.bucket().size()];
        for _ in 0..1000 {
            r.window_into(seeds.next_u64(), 0, &mut buf);
            b.add_window(&buf).unwrap();
        }
        let tpl = b.finish(51, 3).unwrap();
        let w = trigger.width_samples;
        let d = r.profile().duration_samples;
        let edges = [w, w + d, 2 * w + d];
        let clean = r.noiseless();
        let mut checked = 0;
        for i in 0..tpl.samples.len() {
            if edges.iter().any(|&e| i.abs_diff(e) <= 60) || i <= 60 || r.profile().envelope.iter().any(|s| i.abs_diff(w + s.offset) <= 60) {
                continue;
            }
            assert!((tpl.samples[i] - clean[i]).abs() < 0.005, "index {i}");
            checked += 1;
        }
        assert!(checked > 100_000);
    }

    #[test]
    fn index_arithmetic_of_percentile() {
        let mut c = vec![0.4, 0.1, 0.3, 0.2];
        assert_eq!(percentile_threshold(&mut c, 25.0).unwrap(), 0.2);
        let mut c = vec![0.4, 0.1, 0.3, 0.2];
        assert_eq!(percentile_threshold(&mut c, 100.0).unwrap(), 0.4);
        assert!(percentile_threshold(&mut [0.1, 0.2, 0.3], 25.0).is_err());
        assert!(percentile_threshold(&mut [0.1; 4], 200.0).is_err());
    }

    #[test]
    fn seven_hundred_fifty_of_a_thousand_at_or_above() {
        let mut rng = SplitMix64::new(3);
        let mut c: Vec<f64> = (0..1000).map(|_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64).collect();
        let original = c.clone();
        let t = percentile_threshold(&mut c, 25.0).unwrap();
        assert_eq!(original.iter().filter(|&&v| v >= t).count(), 750);
    }

    #[test]
    fn file_round_trip() {
        let n = bucket().size();
        let mut t = Template {
            program_id: "prog-π".into(),
            samples: (0..n).map(|i| i as f64 * 0.5 - 3.0).collect(),
            bucket: bucket(),
            corr_thres: None,
            trace_count: 1000,
            filter_window: 51,
            filter_order: 3,
        };
        for thres in [None, Some(0.6318)] {
            t.corr_thres = thres;
            let mut buf = Vec::new();
            write_template(&mut buf, &t).unwrap();
            assert_eq!(read_template(buf.as_slice()).unwrap(), t);
        }
        let mut buf = Vec::new();
        write_template(&mut buf, &t).unwrap();
        assert!(read_template(&buf[..buf.len() - 1]).is_err());
    }
}
