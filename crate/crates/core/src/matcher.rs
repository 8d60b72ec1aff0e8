// SPDX-License-Identifier: Apache-2.0

//! Pearson correlation and attestation decisions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::template::Template;
use crate::trace::{Trace, TraceError};

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("input has zero variance")]
    DegenerateInput,
    #[error("template {0} has no calibrated threshold")]
    UncalibratedTemplate(String),
    #[error("threshold {x_th} exceeds the batch of {count} traces")]
    ThresholdExceedsBatch { x_th: usize, count: usize },
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Neumaier {
    sum: f64,
    carry: f64,
}

impl Neumaier {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(self) -> f64 {
        self.sum + self.carry
    }
}

/// Sample Pearson correlation of two equal-length sequences.
///
/// One pass over the data, on values shifted by their first elements, with
/// compensated sums. Constant inputs are an error rather than a zero.
///
/// ```
/// use power_attest::matcher::pearson;
///
/// let a = [1.0, 2.0, 4.0, 8.0];
/// let b: Vec<f64> = a.iter().map(|x| 7.0 - 3.0 * x).collect();
/// assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-15);
/// assert!((pearson(&a, &b).unwrap() + 1.0).abs() < 1e-15);
/// assert!(pearson(&a, &[5.0; 4]).is_err());
/// ```
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, MatchError> {
    if a.len() != b.len() {
        return Err(MatchError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(MatchError::TooShort(a.len()));
    }
    let (a0, b0) = (a[0], b[0]);
    let mut sa = Neumaier::default();
    let mut sb = Neumaier::default();
    let mut saa = Neumaier::default();
    let mut sbb = Neumaier::default();
    let mut sab = Neumaier::default();
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - a0, y - b0);
        sa.add(dx);
        sb.add(dy);
        saa.add(dx * dx);
        sbb.add(dy * dy);
        sab.add(dx * dy);
    }
    let n = a.len() as f64;
    let (sa, sb) = (sa.value(), sb.value());
    let var_a = saa.value() - sa * sa / n;
    let var_b = sbb.value() - sb * sb / n;
    if var_a <= 0.0 || var_b <= 0.0 {
        return Err(MatchError::DegenerateInput);
    }
    let cov = sab.value() - sa * sb / n;
    Ok((cov / (var_a.sqrt() * var_b.sqrt())).clamp(-1.0, 1.0))
}

const LANES: usize = 4;
const BLOCK: usize = 1024;

/// A template normalised once (centred, unit norm) for repeated matching.
#[derive(Debug, Clone)]
pub struct PreparedTemplate {
    program_id: String,
    threshold: Option<f64>,
    unit: Vec<f64>,
    unit_sum: f64,
}

impl PreparedTemplate {
    pub fn new(template: &Template) -> Result<Self, MatchError> {
        Self::from_samples(&template.program_id, &template.samples, template.corr_thres)
    }

    pub fn from_samples(program_id: &str, samples: &[f64], threshold: Option<f64>) -> Result<Self, MatchError> {
        if samples.len() < 2 {
            return Err(MatchError::TooShort(samples.len()));
        }
        let n = samples.len() as f64;
        let mut s = Neumaier::default();
        samples.iter().for_each(|&v| s.add(v));
        let mean = s.value() / n;
        let mut ss = Neumaier::default();
        samples.iter().for_each(|&v| ss.add((v - mean) * (v - mean)));
        let norm = ss.value().sqrt();
        if norm == 0.0 {
            return Err(MatchError::DegenerateInput);
        }
        let unit: Vec<f64> = samples.iter().map(|&v| (v - mean) / norm).collect();
        let mut us = Neumaier::default();
        unit.iter().for_each(|&v| us.add(v));
        Ok(Self {
            program_id: program_id.to_owned(),
            threshold,
            unit,
            unit_sum: us.value(),
        })
    }

    pub fn program_id(&self) -> &str {
        &self.program_id
    }

    pub fn len(&self) -> usize {
        self.unit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unit.is_empty()
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    /// Pearson correlation of `window` with the template.
    ///
    /// Sums run in independent lanes within fixed blocks; block totals are
    /// combined with compensation. Agrees with [`pearson`] to about 1e-13.
    pub fn correlate(&self, window: &[f64]) -> Result<f64, MatchError> {
        if window.len() != self.unit.len() {
            return Err(MatchError::LengthMismatch(window.len(), self.unit.len()));
        }
        let x0 = window[0];
        let mut s1 = Neumaier::default();
        let mut s2 = Neumaier::default();
        let mut sd = Neumaier::default();
        for (xb, tb) in window.chunks(BLOCK).zip(self.unit.chunks(BLOCK)) {
            let mut a1 = [0.0; LANES];
            let mut a2 = [0.0; LANES];
            let mut ad = [0.0; LANES];
            let mut xc = xb.chunks_exact(LANES);
            let mut tc = tb.chunks_exact(LANES);
            for (x, t) in (&mut xc).zip(&mut tc) {
                for l in 0..LANES {
                    let d = x[l] - x0;
                    a1[l] += d;
                    a2[l] += d * d;
                    ad[l] += d * t[l];
                }
            }
            for (x, t) in xc.remainder().iter().zip(tc.remainder()) {
                let d = x - x0;
                a1[0] += d;
                a2[0] += d * d;
                ad[0] += d * t;
            }
            s1.add((a1[0] + a1[1]) + (a1[2] + a1[3]));
            s2.add((a2[0] + a2[1]) + (a2[2] + a2[3]));
            sd.add((ad[0] + ad[1]) + (ad[2] + ad[3]));
        }
        let n = window.len() as f64;
        let s1 = s1.value();
        let var = s2.value() - s1 * s1 / n;
        if var <= 0.0 {
            return Err(MatchError::DegenerateInput);
        }
        let dot = sd.value() - (s1 / n) * self.unit_sum;
        Ok((dot / var.sqrt()).clamp(-1.0, 1.0))
    }

    /// Single-trace decision for an already trimmed window.
    pub fn decide(&self, window: &[f64]) -> Result<AttestDecision, MatchError> {
        let threshold = self
            .threshold
            .ok_or_else(|| MatchError::UncalibratedTemplate(self.program_id.clone()))?;
        let correlation = self.correlate(window)?;
        Ok(AttestDecision::Single {
            correlation,
            threshold,
            passed: correlation >= threshold,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AttestDecision {
    Single {
        correlation: f64,
        threshold: f64,
        passed: bool,
    },
    Multi {
        pass_count: usize,
        trace_count: usize,
        x_th: usize,
        passed: bool,
    },
}

impl AttestDecision {
    pub fn passed(&self) -> bool {
        match self {
            AttestDecision::Single { passed, .. } | AttestDecision::Multi { passed, .. } => *passed,
        }
    }

    /// Aggregates single-trace outcomes into a multi-trace decision.
    pub fn multi(pass_count: usize, trace_count: usize, x_th: usize) -> Result<Self, MatchError> {
        if x_th > trace_count {
            return Err(MatchError::ThresholdExceedsBatch { x_th, count: trace_count });
        }
        Ok(AttestDecision::Multi {
            pass_count,
            trace_count,
            x_th,
            passed: pass_count >= x_th,
        })
    }
}

/// Attests one trace against a calibrated template.
pub fn attest_single(trace: &Trace, template: &Template) -> Result<AttestDecision, MatchError> {
    let threshold = template
        .corr_thres
        .ok_or_else(|| MatchError::UncalibratedTemplate(template.program_id.clone()))?;
    let correlation = pearson(trace.execution_window(template.bucket)?, &template.samples)?;
    Ok(AttestDecision::Single {
        correlation,
        threshold,
        passed: correlation >= threshold,
    })
}

/// Like [`attest_single`], keeping the best correlation over start offsets
/// within `max_lag` samples of the start trigger.
pub fn attest_single_with_lag(trace: &Trace, template: &Template, max_lag: usize) -> Result<AttestDecision, MatchError> {
    let threshold = template
        .corr_thres
        .ok_or_else(|| MatchError::UncalibratedTemplate(template.program_id.clone()))?;
    let start = trace.triggers().ok_or(TraceError::TriggersUnset)?.start;
    let prepared = PreparedTemplate::new(template)?;
    let len = template.bucket.size();
    let mut best: Option<f64> = None;
    for s in start.saturating_sub(max_lag)..=start + max_lag {
        let Ok(w) = trace.window_at(s, len) else { continue };
        let r = prepared.correlate(w)?;
        best = Some(best.map_or(r, |b: f64| b.max(r)));
    }
    let correlation = match best {
        Some(r) => r,
        None => return Err(trace.execution_window(template.bucket).unwrap_err().into()),
    };
    Ok(AttestDecision::Single {
        correlation,
        threshold,
        passed: correlation >= threshold,
    })
}

/// Counts single-trace passes over a batch and compares with `x_th`.
pub fn attest_multi(traces: &[Trace], template: &Template, x_th: usize) -> Result<AttestDecision, MatchError> {
    if x_th > traces.len() {
        return Err(MatchError::ThresholdExceedsBatch { x_th, count: traces.len() });
    }
    let prepared = PreparedTemplate::new(template)?;
    let mut pass_count = 0;
    for t in traces {
        if prepared.decide(t.execution_window(template.bucket)?)?.passed() {
            pass_count += 1;
        }
    }
    AttestDecision::multi(pass_count, traces.len(), x_th)
}

/// [`attest_multi`] over windows that are already trimmed to the bucket.
pub fn attest_multi_windows<'a, I>(windows: I, prepared: &PreparedTemplate, x_th: usize) -> Result<AttestDecision, MatchError>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut count = 0;
    let mut pass_count = 0;
    for w in windows {
        count += 1;
        if prepared.decide(w)?.passed() {
            pass_count += 1;
        }
    }
    AttestDecision::multi(pass_count, count, x_th)
}
