// SPDX-License-Identifier: Apache-2.0

//! The end-to-end pipeline: synth, template, calibrate, eval, secparam,
//! protocol-sim.
//!
//! Output layout under the chosen directory:
//!
//! ```text
//! profiles.json
//! corpus/{build,calibrate,eval}/manifest.jsonl   lazy manifests
//! templates/<program>.tpl
//! eval/report.json, eval/report.csv
//! plots/<program>.csv                            first eval trace vs template
//! secparam.json, table.txt
//! protocol/summary.json, protocol/transcript.jsonl
//! summary.json
//! ```
//!
//! Corpus manifests are written without trace files; each entry is
//! regenerated from its seed when read. Every artifact depends only on the
//! config, so two runs with the same config produce identical trees. On
//! failure `error.json` describes the failing stage.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use power_attest::eval::{evaluate_with, worst_fp_rate, EvalOptions, WorstFp};
use power_attest::manifest::{corpus_manifest, write_manifest, PROFILES_FILE};
use power_attest::protocol::transcript::write_transcript;
use power_attest::protocol::{Simulation, SimulationConfig, TemplateStore, World};
use power_attest::synth::{profiles_to_json, render_all, Corpus, SplitMix64};
use power_attest::template::{save_template, Template};
use serde::Serialize;

use crate::commands::{build_template, calibrate_template, ensure_parent, level_params, par_map, profiles_or_default, run_honest, write_file, write_json, HonestSummary, ParamsReport};
use crate::config::Config;
use crate::error::CliError;
use crate::plot::write_plot_csv;
use crate::table::{format_table, security_levels};

/// Stride of the per-program plot files.
const PLOT_STRIDE: usize = 256;

#[derive(Debug, Serialize)]
pub struct PipelineSummary {
    pub programs: Vec<String>,
    pub corpus: CorpusSizes,
    pub templates: Vec<TemplateSummary>,
    pub worst_fp: Option<WorstFp>,
    pub secparam: ParamsReport,
    pub protocol: ProtocolSummary,
}

#[derive(Debug, Serialize)]
pub struct CorpusSizes {
    pub build: usize,
    pub calibrate: usize,
    pub eval: usize,
}

#[derive(Debug, Serialize)]
pub struct TemplateSummary {
    pub program_id: String,
    pub corr_thres: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Serialize)]
pub struct ProtocolSummary {
    pub app: String,
    pub n: u64,
    pub x_th: u64,
    #[serde(flatten)]
    pub sessions: HonestSummary,
}

/// Runs every stage in order. On failure returns the stage name with the
/// error, after writing `error.json` under `out`.
pub fn run_pipeline(config: &Config, out: &Path) -> Result<PipelineSummary, (String, CliError)> {
    let result = config
        .validate()
        .map_err(|e| ("config".to_owned(), e))
        .and_then(|()| stages(config, out));
    let error_path = out.join("error.json");
    match result {
        Ok(summary) => {
            if error_path.exists() {
                fs::remove_file(&error_path).map_err(|e| ("config".to_owned(), CliError::io(&error_path)(e)))?;
            }
            Ok(summary)
        }
        Err((stage, e)) => {
            // Best effort: the original error matters more than a failed report.
            let _ = write_json(&error_path, &e.report(Some(&stage)));
            Err((stage, e))
        }
    }
}

fn at(stage: &str) -> impl FnOnce(CliError) -> (String, CliError) + '_ {
    move |e| (stage.to_owned(), e)
}

fn stages(config: &Config, out: &Path) -> Result<PipelineSummary, (String, CliError)> {
    let p = &config.pipeline;
    let threads = p.threads;

    // synth
    let profiles = profiles_or_default(p.profiles.as_deref()).map_err(at("synth"))?;
    let rendered = render_all(&profiles, &config.trigger).map_err(|e| at("synth")(e.into()))?;
    let programs: Vec<String> = profiles.iter().map(|p| p.program_id.clone()).collect();
    let mut seeds = SplitMix64::new(config.seed);
    let build = Corpus::from_rendered(rendered.clone(), p.build_traces, seeds.next_u64());
    let calib = Corpus::from_rendered(rendered.clone(), p.calibration_traces, seeds.next_u64());
    let eval = Corpus::from_rendered(rendered, p.eval_traces, seeds.next_u64());
    let protocol_seed = seeds.next_u64();
    let profiles_json = profiles_to_json(&profiles).map_err(|e| at("synth")(e.into()))?;
    write_file(&out.join(PROFILES_FILE), profiles_json.as_bytes()).map_err(at("synth"))?;
    for (name, c) in [("build", &build), ("calibrate", &calib), ("eval", &eval)] {
        let dir = out.join("corpus").join(name);
        write_file(&dir.join(PROFILES_FILE), profiles_json.as_bytes()).map_err(at("synth"))?;
        let mut buf = Vec::new();
        write_manifest(&mut buf, &corpus_manifest(c)).expect("writes to memory");
        write_file(&dir.join("manifest.jsonl"), &buf).map_err(at("synth"))?;
    }

    // template
    let built: Vec<Template> = build
        .profiles()
        .iter()
        .map(|r| {
            let indices: Vec<usize> = build.indices_of(r.program_id()).collect();
            build_template(&build, &indices, r.program_id(), r.bucket(), config.filter_window, config.filter_order, threads)
        })
        .collect::<Result<_, _>>()
        .map_err(at("template"))?;

    // calibrate
    let templates: Vec<Template> = built
        .iter()
        .map(|t| {
            let indices: Vec<usize> = calib.indices_of(&t.program_id).collect();
            calibrate_template(t, &calib, &indices, config.percentile, threads)
        })
        .collect::<Result<_, _>>()
        .map_err(at("calibrate"))?;
    for t in &templates {
        let path = out.join("templates").join(format!("{}.tpl", t.program_id));
        ensure_parent(&path).map_err(at("calibrate"))?;
        save_template(&path, t).map_err(|e| at("calibrate")(e.into()))?;
    }

    // eval
    let threads_nz = std::num::NonZeroUsize::new(threads).expect("validated");
    let report = evaluate_with(&templates, &eval, EvalOptions { threads: threads_nz }).map_err(|e| at("eval")(e.into()))?;
    write_file(&out.join("eval/report.json"), format!("{}\n", report.to_json()).as_bytes()).map_err(at("eval"))?;
    write_file(&out.join("eval/report.csv"), report.to_csv().as_bytes()).map_err(at("eval"))?;
    let plots = par_map(&templates, threads, |t| -> Result<Vec<u8>, CliError> {
        let trace = eval.trace(eval.indices_of(&t.program_id).start);
        let mut buf = Vec::new();
        write_plot_csv(&mut buf, Some(&trace), Some(t), PLOT_STRIDE)?;
        Ok(buf)
    });
    for (t, csv) in templates.iter().zip(plots) {
        let csv = csv.map_err(at("eval"))?;
        write_file(&out.join("plots").join(format!("{}.csv", t.program_id)), &csv).map_err(at("eval"))?;
    }

    // secparam
    let params = level_params(config, config.security_level, config.level_rule).map_err(at("secparam"))?;
    let secparam = ParamsReport::from(&params);
    write_json(&out.join("secparam.json"), &secparam).map_err(at("secparam"))?;
    let rows = security_levels(config.p_alpha, config.p_beta, config.level_rule).map_err(|e| at("secparam")(e.into()))?;
    write_file(&out.join("table.txt"), format_table(&rows).as_bytes()).map_err(at("secparam"))?;

    // protocol-sim
    let app = p.app.clone().unwrap_or_else(|| programs[0].clone());
    let world = Arc::new(World::new(&profiles, &config.trigger).map_err(|e| at("protocol-sim")(e.into()))?);
    let store = TemplateStore::new(templates.clone()).map_err(|e| at("protocol-sim")(e.into()))?;
    let cfg = SimulationConfig {
        app_id: app.clone(),
        traces_per_session: params.n as u32,
        x_th: params.x_th as u32,
        seed: protocol_seed,
        ..SimulationConfig::default()
    };
    let mut sim = Simulation::new(world, Arc::new(store), &cfg).map_err(|e| at("protocol-sim")(e.into()))?;
    let sessions = run_honest(&mut sim, p.sessions);
    let mut buf = Vec::new();
    write_transcript(&mut buf, sim.parameters(), sim.transcript()).map_err(|e| at("protocol-sim")(e.into()))?;
    write_file(&out.join("protocol/transcript.jsonl"), &buf).map_err(at("protocol-sim"))?;
    let protocol = ProtocolSummary {
        app,
        n: params.n,
        x_th: params.x_th,
        sessions,
    };
    write_json(&out.join("protocol/summary.json"), &protocol).map_err(at("protocol-sim"))?;

    let summary = PipelineSummary {
        programs,
        corpus: CorpusSizes {
            build: build.len(),
            calibrate: calib.len(),
            eval: eval.len(),
        },
        templates: report
            .templates
            .iter()
            .map(|t| TemplateSummary {
                program_id: t.program_id.clone(),
                corr_thres: t.corr_thres,
                precision: t.precision,
                recall: t.recall,
                f1: t.f1,
            })
            .collect(),
        worst_fp: worst_fp_rate(&report),
        secparam,
        protocol,
    };
    write_json(&out.join("summary.json"), &summary).map_err(at("summary"))?;
    Ok(summary)
}
