// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use power_attest::eval::{evaluate_with, worst_fp_rate, EvalOptions, LabeledTraces};
use power_attest::manifest::{corpus_manifest, write_manifest, ManifestSet, PROFILES_FILE};
use power_attest::matcher::{AttestDecision, PreparedTemplate};
use power_attest::protocol::attacks::{attack_application_substitution, attack_false_result, attack_measurement_substitution, BranchReport};
use power_attest::protocol::session::StoreOptions;
use power_attest::protocol::transcript::write_transcript;
use power_attest::protocol::{build_template_store, Simulation, SimulationConfig, TemplateStore, Workload, World};
use power_attest::security::{
    min_traces_with, threshold_traces, LevelRule, RateEstimate, SecurityParams, DEFAULT_N_CAP, SIMULATION_CONFIDENCE,
};
use power_attest::synth::{corpus, default_profiles, load_profiles, profiles_to_json, ProgramProfile};
use power_attest::template::{calibrate_from_correlations, check_filter, load_template, save_template, Template, TemplateBuilder};
use power_attest::trace::{load_capture, load_trace, save_trace, LengthBucket, Trace};
use serde::Serialize;

use crate::args::*;
use crate::config::Config;
use crate::error::{CliError, EXIT_NEGATIVE};
use crate::pipeline::run_pipeline;
use crate::plot::write_plot_csv;
use crate::table::{format_table, security_levels};

/// Runs one subcommand and returns its exit status (0 or 1).
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<i32, CliError> {
    let config = match (Config::resolve(cli.config.as_deref()), &cli.command) {
        (Ok(c), _) => c,
        (Err(e), Command::Pipeline(a)) => {
            // The pipeline reports every failure in its output directory.
            let _ = write_json(&a.out.join("error.json"), &e.report(Some("config")));
            return Err(e);
        }
        (Err(e), _) => return Err(e),
    };
    match cli.command {
        Command::Decode(a) => decode(&config, a, stdout),
        Command::Synth(a) => synth(&config, a, stdout),
        Command::Template(a) => template(&config, a, stdout),
        Command::Calibrate(a) => calibrate(&config, a, stdout),
        Command::Attest(a) => attest(&config, a, stdout),
        Command::AttestMulti(a) => attest_multi(&config, a, stdout),
        Command::Eval(a) => eval(&config, a, stdout),
        Command::Secparam(a) => secparam(&config, a, stdout),
        Command::ProtocolSim(a) => protocol_sim(&config, a, stdout),
        Command::Pipeline(a) => {
            let summary = run_pipeline(&config, &a.out).map_err(|(_, e)| e)?;
            print_json(stdout, &summary)?;
            Ok(0)
        }
        Command::Plot(a) => plot(&config, a, stdout),
    }
}

pub(crate) fn print_json<T: Serialize + ?Sized>(out: &mut dyn Write, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    writeln!(out, "{text}").map_err(CliError::io(Path::new("<stdout>")))
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(CliError::io(path))
}

pub(crate) fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(CliError::io(dir)),
        None => Ok(()),
    }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    ensure_parent(path)?;
    Ok(BufWriter::new(fs::File::create(path).map_err(CliError::io(path))?))
}

pub(crate) fn profiles_or_default(path: Option<&Path>) -> Result<Vec<ProgramProfile>, CliError> {
    match path {
        Some(p) => Ok(load_profiles(p)?),
        None => Ok(default_profiles()),
    }
}

/// Maps `f` over `items` on up to `threads` scoped threads, keeping order.
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if items.is_empty() {
        return Vec::new();
    }
    let chunk = items.len().div_ceil(threads.clamp(1, items.len()));
    std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

/// Averages the windows of `indices`; windows are generated `threads` at a
/// time and summed in index order.
pub(crate) fn build_template<S: LabeledTraces + Sync + ?Sized>(
    source: &S,
    indices: &[usize],
    program_id: &str,
    bucket: LengthBucket,
    window: u16,
    order: u8,
    threads: usize,
) -> Result<Template, CliError> {
    check_filter(bucket, window, order)?;
    let mut builder = TemplateBuilder::new(program_id, bucket);
    for batch in indices.chunks(threads.max(1)) {
        for w in par_map(batch, threads, |&i| source.window(i, bucket.size())) {
            builder.add_window(&w?)?;
        }
    }
    Ok(builder.finish(window, order)?)
}

pub(crate) fn calibrate_template<S: LabeledTraces + Sync + ?Sized>(
    template: &Template,
    source: &S,
    indices: &[usize],
    percentile: f64,
    threads: usize,
) -> Result<Template, CliError> {
    let prepared = PreparedTemplate::new(template)?;
    let correlations = par_map(indices, threads, |&i| -> Result<f64, CliError> {
        Ok(prepared.correlate(&source.window(i, prepared.len())?)?)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    Ok(calibrate_from_correlations(template, correlations, percentile)?)
}

pub(crate) fn load_templates(dir: &Path) -> Result<Vec<Template>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(CliError::io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tpl"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Validation(format!("no .tpl files in {}", dir.display())));
    }
    paths.iter().map(|p| Ok(load_template(p)?)).collect()
}

fn threads() -> usize {
    std::thread::available_parallelism().map_or(1, NonZeroUsize::get)
}

fn with_triggers(trace: Trace, config: &Config) -> Result<Trace, CliError> {
    if trace.triggers().is_some() {
        return Ok(trace);
    }
    Ok(trace.locate_triggers(&config.trigger)?)
}

#[derive(Serialize)]
struct TriggerPair {
    start: usize,
    end: usize,
}

fn trigger_pair(t: &Trace) -> Option<TriggerPair> {
    t.triggers().map(|tr| TriggerPair {
        start: tr.start,
        end: tr.end,
    })
}

fn decode(config: &Config, a: DecodeArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let mut trace = load_capture(&a.input)?;
    if a.detect_triggers {
        trace = trace.locate_triggers(&config.trigger)?;
    }
    ensure_parent(&a.output)?;
    save_trace(&a.output, &trace)?;
    #[derive(Serialize)]
    struct Report {
        samples: usize,
        triggers: Option<TriggerPair>,
    }
    print_json(
        out,
        &Report {
            samples: trace.len(),
            triggers: trigger_pair(&trace),
        },
    )?;
    Ok(0)
}

fn synth(config: &Config, a: SynthArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let profiles = profiles_or_default(a.profiles.as_deref())?;
    let seed = a.seed.unwrap_or(config.seed);
    let c = corpus(&profiles, &config.trigger, a.count, seed)?;
    let entries = corpus_manifest(&c);
    write_file(&a.out_dir.join(PROFILES_FILE), profiles_to_json(&profiles)?.as_bytes())?;
    if !a.lazy {
        let indices: Vec<usize> = (0..c.len()).collect();
        for r in par_map(&indices, threads(), |&i| -> Result<(), CliError> {
            let path = a.out_dir.join(&entries[i].path);
            ensure_parent(&path)?;
            Ok(save_trace(&path, &c.trace(i))?)
        }) {
            r?;
        }
    }
    let manifest = a.out_dir.join("manifest.jsonl");
    write_manifest(create(&manifest)?, &entries).map_err(CliError::io(&manifest))?;
    #[derive(Serialize)]
    struct Report {
        programs: usize,
        traces: usize,
        seed: u64,
        manifest: PathBuf,
        lazy: bool,
    }
    print_json(
        out,
        &Report {
            programs: profiles.len(),
            traces: c.len(),
            seed,
            manifest,
            lazy: a.lazy,
        },
    )?;
    Ok(0)
}

fn open_manifest(config: &Config, path: &Path) -> Result<ManifestSet, CliError> {
    Ok(ManifestSet::open(path, None, &config.trigger)?)
}

fn template(config: &Config, a: TemplateArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let set = open_manifest(config, &a.manifest)?.only(&a.program);
    if set.is_empty() {
        return Err(CliError::Validation(format!("manifest has no traces of {}", a.program)));
    }
    let bucket = match (a.bucket, set.profile(&a.program)) {
        (Some(e), _) => LengthBucket::new(e)?,
        (None, Some(p)) => p.bucket(),
        (None, None) => return Err(CliError::Validation("no profile set next to the manifest; pass --bucket".into())),
    };
    let indices: Vec<usize> = (0..set.len()).collect();
    let window = a.window.unwrap_or(config.filter_window);
    let order = a.order.unwrap_or(config.filter_order);
    let tpl = build_template(&set, &indices, &a.program, bucket, window, order, threads())?;
    ensure_parent(&a.out)?;
    save_template(&a.out, &tpl)?;
    #[derive(Serialize)]
    struct Report<'a> {
        program_id: &'a str,
        bucket_exponent: u8,
        trace_count: u32,
        filter_window: u16,
        filter_order: u8,
    }
    print_json(
        out,
        &Report {
            program_id: &tpl.program_id,
            bucket_exponent: tpl.bucket.exponent(),
            trace_count: tpl.trace_count,
            filter_window: tpl.filter_window,
            filter_order: tpl.filter_order,
        },
    )?;
    Ok(0)
}

fn calibrate(config: &Config, a: CalibrateArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let tpl = load_template(&a.template)?;
    let set = open_manifest(config, &a.manifest)?.only(&tpl.program_id);
    let indices: Vec<usize> = (0..set.len()).collect();
    let percentile = a.percentile.unwrap_or(config.percentile);
    let tpl = calibrate_template(&tpl, &set, &indices, percentile, threads())?;
    let dest = a.out.as_ref().unwrap_or(&a.template);
    ensure_parent(dest)?;
    save_template(dest, &tpl)?;
    #[derive(Serialize)]
    struct Report<'a> {
        program_id: &'a str,
        corr_thres: Option<f64>,
        calibration_traces: usize,
        percentile: f64,
    }
    print_json(
        out,
        &Report {
            program_id: &tpl.program_id,
            corr_thres: tpl.corr_thres,
            calibration_traces: indices.len(),
            percentile,
        },
    )?;
    Ok(0)
}

#[derive(Serialize)]
struct AttestReport<'a> {
    program_id: &'a str,
    #[serde(flatten)]
    decision: AttestDecision,
}

fn attest(config: &Config, a: AttestArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let tpl = load_template(&a.template)?;
    let trace = with_triggers(load_trace(&a.trace)?, config)?;
    let decision = power_attest::matcher::attest_single(&trace, &tpl)?;
    let passed = decision.passed();
    print_json(
        out,
        &AttestReport {
            program_id: &tpl.program_id,
            decision,
        },
    )?;
    Ok(if passed { 0 } else { EXIT_NEGATIVE })
}

fn attest_multi(config: &Config, a: AttestMultiArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let tpl = load_template(&a.template)?;
    let prepared = PreparedTemplate::new(&tpl)?;
    let set = open_manifest(config, &a.manifest)?;
    let indices: Vec<usize> = (0..set.len()).collect();
    let passes = par_map(&indices, threads(), |&i| -> Result<bool, CliError> {
        Ok(prepared.decide(&set.window(i, prepared.len())?)?.passed())
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let pass_count = passes.iter().filter(|&&p| p).count();
    let decision = AttestDecision::multi(pass_count, passes.len(), a.x_th)?;
    let passed = decision.passed();
    print_json(
        out,
        &AttestReport {
            program_id: &tpl.program_id,
            decision,
        },
    )?;
    Ok(if passed { 0 } else { EXIT_NEGATIVE })
}

fn eval(config: &Config, a: EvalArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let dir = a.templates.as_ref().unwrap_or(&config.template_dir);
    let templates = load_templates(dir)?;
    let set = open_manifest(config, &a.manifest)?;
    let threads = a.threads.unwrap_or(config.pipeline.threads);
    let threads = NonZeroUsize::new(threads).ok_or_else(|| CliError::Validation("--threads must be positive".into()))?;
    let report = evaluate_with(&templates, &set, EvalOptions { threads })?;
    write_file(&a.out, format!("{}\n", report.to_json()).as_bytes())?;
    if let Some(csv) = &a.csv {
        write_file(csv, report.to_csv().as_bytes())?;
    }
    #[derive(Serialize)]
    struct Report {
        templates: usize,
        traces: usize,
        worst_fp: Option<power_attest::eval::WorstFp>,
    }
    print_json(
        out,
        &Report {
            templates: templates.len(),
            traces: set.len(),
            worst_fp: worst_fp_rate(&report),
        },
    )?;
    Ok(0)
}

#[derive(Debug, Serialize)]
pub struct ParamsReport {
    pub n: u64,
    pub x_th: u64,
    pub p_cheat: f64,
    pub p_honest: f64,
    pub honest_failure: f64,
    pub security_bits: f64,
    pub p_alpha: f64,
    pub p_beta: f64,
}

impl From<&SecurityParams> for ParamsReport {
    fn from(p: &SecurityParams) -> Self {
        Self {
            n: p.n,
            x_th: p.x_th,
            p_cheat: p.p_cheat,
            p_honest: p.p_honest,
            honest_failure: p.honest_failure,
            security_bits: p.security_bits(),
            p_alpha: p.p_alpha,
            p_beta: p.p_beta,
        }
    }
}

pub(crate) fn level_params(config: &Config, level: u32, rule: LevelRule) -> Result<SecurityParams, CliError> {
    Ok(min_traces_with(config.p_alpha, config.p_beta, level, rule, DEFAULT_N_CAP)?)
}

fn secparam(config: &Config, a: SecparamArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let mut config = config.clone();
    config.p_alpha = a.p_alpha.unwrap_or(config.p_alpha);
    config.p_beta = a.p_beta.unwrap_or(config.p_beta);
    config.validate()?;
    let rule = a.rule.map_or(config.level_rule, LevelRule::from);
    if a.table {
        let rows = security_levels(config.p_alpha, config.p_beta, rule)?;
        if a.json {
            print_json(out, &rows)?;
        } else {
            write!(out, "{}", format_table(&rows)).map_err(CliError::io(Path::new("<stdout>")))?;
        }
        return Ok(0);
    }
    let params = match a.n {
        Some(n) => {
            let x_th = match a.x_th {
                Some(x) => x,
                None => threshold_traces(n, config.p_alpha, config.p_beta)?,
            };
            SecurityParams::with_threshold(n, x_th, config.p_alpha, config.p_beta)?
        }
        None => level_params(&config, a.level.unwrap_or(config.security_level), rule)?,
    };
    print_json(out, &ParamsReport::from(&params))?;
    Ok(0)
}

/// Parses `id=probability` pairs; with none given, every profile other than
/// `app` with equal weight.
fn mixture(app: &str, impostors: &[String], profiles: &[ProgramProfile]) -> Result<Vec<(String, f64)>, CliError> {
    if impostors.is_empty() {
        let others: Vec<&str> = profiles.iter().map(|p| p.program_id.as_str()).filter(|&id| id != app).collect();
        if others.is_empty() {
            return Err(CliError::Validation("the profile set has no program other than the application".into()));
        }
        let w = 1.0 / others.len() as f64;
        return Ok(others.into_iter().map(|id| (id.to_owned(), w)).collect());
    }
    impostors
        .iter()
        .map(|s| {
            let (id, p) = s.split_once('=').unwrap_or((s, "1"));
            let p: f64 = p
                .parse()
                .map_err(|_| CliError::Validation(format!("bad impostor weight in {s:?}")))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(CliError::Validation(format!("impostor probability {p} is outside [0, 1]")));
            }
            Ok((id.to_owned(), p))
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct HonestSummary {
    pub sessions: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub aborted: BTreeMap<String, u64>,
    pub estimate: RateEstimate,
}

pub(crate) fn run_honest(sim: &mut Simulation, sessions: u64) -> HonestSummary {
    let mut accepted = 0;
    let mut rejected = 0;
    let mut aborted: BTreeMap<String, u64> = BTreeMap::new();
    for _ in 0..sessions {
        let r = sim.run_session();
        match (r.abort, r.verdict) {
            (Some(reason), _) => *aborted.entry(reason.to_string()).or_default() += 1,
            (None, Some(true)) => accepted += 1,
            (None, _) => rejected += 1,
        }
    }
    HonestSummary {
        sessions,
        accepted,
        rejected,
        aborted,
        estimate: RateEstimate::new(accepted, sessions, SIMULATION_CONFIDENCE),
    }
}

fn protocol_sim(config: &Config, a: ProtocolSimArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let profiles = profiles_or_default(a.profiles.as_deref())?;
    let seed = a.seed.unwrap_or(config.seed);
    let (n, x_th) = match a.n {
        Some(n) => {
            let x_th = match a.x_th {
                Some(x) => x,
                None => threshold_traces(u64::from(n), config.p_alpha, config.p_beta)? as u32,
            };
            (n, x_th)
        }
        None => {
            let p = level_params(config, a.level.unwrap_or(config.security_level), config.level_rule)?;
            (p.n as u32, a.x_th.unwrap_or(p.x_th as u32))
        }
    };
    let world = Arc::new(World::new(&profiles, &config.trigger)?);
    let store = match &a.templates {
        Some(dir) => TemplateStore::new(load_templates(dir)?)?,
        None => build_template_store(
            &world,
            &[a.app.as_str()],
            &StoreOptions {
                build_traces: a.build_traces,
                calibration_traces: a.build_traces,
                percentile: config.percentile,
                filter_window: config.filter_window,
                filter_order: config.filter_order,
                seed: seed ^ 0x7e3a_11a7,
            },
        )?,
    };
    let workload = match a.attack {
        Attack::SubstApp => Workload::Substitute {
            mixture: mixture(&a.app, &a.impostors, &profiles)?,
        },
        _ => Workload::Honest,
    };
    let cfg = SimulationConfig {
        app_id: a.app.clone(),
        traces_per_session: n,
        x_th,
        seed,
        workload,
        threaded: a.threaded,
        ..SimulationConfig::default()
    };
    let mut sim = Simulation::new(world, Arc::new(store), &cfg)?;

    #[derive(Serialize)]
    struct Report<T: Serialize> {
        attack: &'static str,
        app: String,
        n: u32,
        x_th: u32,
        seed: u64,
        #[serde(flatten)]
        result: T,
    }
    #[derive(Serialize)]
    struct Branches {
        branches: Vec<BranchReport>,
    }
    let report = |attack, result| Report {
        attack,
        app: a.app.clone(),
        n,
        x_th,
        seed,
        result,
    };
    let status = match a.attack {
        Attack::None => {
            let s = run_honest(&mut sim, a.sessions);
            let status = if s.accepted == s.sessions { 0 } else { EXIT_NEGATIVE };
            print_json(out, &report("none", serde_json::to_value(s).expect("serializes")))?;
            status
        }
        Attack::SubstMeas | Attack::FalseResult => {
            let (name, branches) = if a.attack == Attack::SubstMeas {
                ("subst-meas", attack_measurement_substitution(&mut sim, a.sessions as usize, seed)?)
            } else {
                ("false-result", attack_false_result(&mut sim, a.sessions as usize, seed)?)
            };
            let ok = branches.iter().all(BranchReport::as_expected);
            print_json(out, &report(name, serde_json::to_value(Branches { branches }).expect("serializes")))?;
            if ok {
                0
            } else {
                EXIT_NEGATIVE
            }
        }
        Attack::SubstApp => {
            let r = attack_application_substitution(&mut sim, a.sessions);
            print_json(out, &report("subst-app", serde_json::to_value(r).expect("serializes")))?;
            0
        }
    };
    if let Some(path) = &a.transcript {
        write_transcript(create(path)?, sim.parameters(), sim.transcript())?;
    }
    Ok(status)
}

fn plot(config: &Config, a: PlotArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    if a.trace.is_none() && a.template.is_none() {
        return Err(CliError::Validation("plot needs --trace, --template or both".into()));
    }
    let template = a.template.as_deref().map(load_template).transpose()?;
    let trace = match a.trace.as_deref().map(load_trace).transpose()? {
        Some(t) if template.is_some() => Some(with_triggers(t, config)?),
        other => other,
    };
    let file = create(&a.out)?;
    write_plot_csv(file, trace.as_ref(), template.as_ref(), a.stride)?;
    #[derive(Serialize)]
    struct Report<'a> {
        out: &'a Path,
        trace_samples: Option<usize>,
        template_samples: Option<usize>,
    }
    print_json(
        out,
        &Report {
            out: &a.out,
            trace_samples: trace.as_ref().map(Trace::len),
            template_samples: template.as_ref().map(|t| t.samples.len()),
        },
    )?;
    Ok(0)
}
