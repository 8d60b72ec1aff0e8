// SPDX-License-Identifier: Apache-2.0

//! Plot data as CSV rows `series,index,value`.
//!
//! Sample series are named `trace` and `template`. Trigger positions are
//! emitted as rows of the `trigger` series, whose value is the sample at
//! that index. When a template is overlaid, the trace is cut to the
//! template's window from its start trigger, and indices count from there.

use std::io::Write;

use power_attest::template::Template;
use power_attest::trace::{Trace, TraceError};

/// Writes the plot rows. `stride` keeps every `stride`-th sample of each
/// series; trigger rows are always written.
pub fn write_plot_csv<W: Write>(mut out: W, trace: Option<&Trace>, template: Option<&Template>, stride: usize) -> Result<(), TraceError> {
    let stride = stride.max(1);
    writeln!(out, "series,index,value")?;
    let series = |out: &mut W, name: &str, samples: &[f64]| -> std::io::Result<()> {
        for (i, v) in samples.iter().enumerate().step_by(stride) {
            writeln!(out, "{name},{i},{v}")?;
        }
        Ok(())
    };
    match (trace, template) {
        (Some(t), None) => {
            series(&mut out, "trace", t.samples())?;
            if let Some(tr) = t.triggers() {
                for i in [tr.start, tr.end] {
                    writeln!(out, "trigger,{i},{}", t.samples()[i.min(t.len() - 1)])?;
                }
            }
        }
        (Some(t), Some(tpl)) => {
            let window = t.execution_window(tpl.bucket)?;
            series(&mut out, "trace", window)?;
            series(&mut out, "template", &tpl.samples)?;
            let tr = t.triggers().ok_or(TraceError::TriggersUnset)?;
            for i in [tr.start, tr.end] {
                let rel = i - tr.start;
                if rel < window.len() {
                    writeln!(out, "trigger,{rel},{}", window[rel])?;
                }
            }
        }
        (None, Some(tpl)) => series(&mut out, "template", &tpl.samples)?,
        (None, None) => {}
    }
    out.flush()?;
    Ok(())
}
