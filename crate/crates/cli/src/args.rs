// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use power_attest::security::LevelRule;

/// Power-analysis attestation tools.
///
/// Exit status: 0 success, 1 negative attestation, 2 invalid input or
/// configuration, 3 internal error. Failures print a JSON report on stderr.
#[derive(Debug, Parser)]
#[command(name = "power-attest", version)]
pub struct Cli {
    /// Config file (JSON). Defaults to $POWER_ATTEST_CONFIG, then
    /// ./power-attest.json.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decode a raw .xadc capture into a .trc trace.
    Decode(DecodeArgs),
    /// Write a synthetic labelled corpus.
    Synth(SynthArgs),
    /// Average a program's traces into a template.
    Template(TemplateArgs),
    /// Set a template's correlation threshold from held-out traces.
    Calibrate(CalibrateArgs),
    /// Attest one trace against a template.
    Attest(AttestArgs),
    /// Attest a batch of traces with a pass threshold.
    AttestMulti(AttestMultiArgs),
    /// Evaluate templates against a labelled corpus.
    Eval(EvalArgs),
    /// Security parameters for multi-trace attestation.
    Secparam(SecparamArgs),
    /// Simulate protocol sessions, optionally under attack.
    ProtocolSim(ProtocolSimArgs),
    /// Run synth, template, calibrate, eval, secparam and protocol-sim.
    Pipeline(PipelineArgs),
    /// Write plot data for a trace and/or template as CSV.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    /// Locate the trigger marks and store them in the trace header.
    #[arg(long)]
    pub detect_triggers: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Profile set; the bundled eight-program set when omitted.
    #[arg(long)]
    pub profiles: Option<PathBuf>,
    /// Traces per program.
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Write only the manifest and profile set; traces are regenerated
    /// from their seeds when read.
    #[arg(long)]
    pub lazy: bool,
}

#[derive(Debug, Args)]
pub struct TemplateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub program: String,
    /// Length bucket exponent, 17..=21. Taken from the profile set next to
    /// the manifest when omitted.
    #[arg(long)]
    pub bucket: Option<u8>,
    #[arg(long)]
    pub window: Option<u16>,
    #[arg(long)]
    pub order: Option<u8>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub template: PathBuf,
    /// Held-out traces; only entries of the template's program are used.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub percentile: Option<f64>,
    /// Where to write the calibrated template; in place when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttestArgs {
    #[arg(long)]
    pub template: PathBuf,
    #[arg(long)]
    pub trace: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttestMultiArgs {
    #[arg(long)]
    pub template: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long = "x-th")]
    pub x_th: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of .tpl files.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the per-template summary as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SecparamArgs {
    #[arg(long)]
    pub p_alpha: Option<f64>,
    #[arg(long)]
    pub p_beta: Option<f64>,
    /// Target level in bits; ignored with --n.
    #[arg(long)]
    pub level: Option<u32>,
    /// Evaluate a given batch size instead of searching.
    #[arg(long)]
    pub n: Option<u64>,
    /// Threshold for --n; the midpoint threshold when omitted.
    #[arg(long = "x-th", requires = "n")]
    pub x_th: Option<u64>,
    /// Print the 32/64/128/256-bit table.
    #[arg(long, conflicts_with_all = ["n", "level"])]
    pub table: bool,
    /// Print the table as JSON.
    #[arg(long, requires = "table")]
    pub json: bool,
    #[arg(long, value_enum)]
    pub rule: Option<Rule>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Rule {
    Strict,
    NearestBit,
}

impl From<Rule> for LevelRule {
    fn from(r: Rule) -> Self {
        match r {
            Rule::Strict => LevelRule::Strict,
            Rule::NearestBit => LevelRule::NearestBit,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Attack {
    None,
    SubstMeas,
    FalseResult,
    SubstApp,
}

#[derive(Debug, Args)]
pub struct ProtocolSimArgs {
    /// Profile set; the bundled set when omitted.
    #[arg(long)]
    pub profiles: Option<PathBuf>,
    #[arg(long)]
    pub app: String,
    #[arg(long)]
    pub level: Option<u32>,
    #[arg(long, value_enum, default_value = "none")]
    pub attack: Attack,
    #[arg(long, default_value_t = 100)]
    pub sessions: u64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Traces per session; overrides the level.
    #[arg(long)]
    pub n: Option<u32>,
    /// Pass threshold; overrides the level.
    #[arg(long = "x-th")]
    pub x_th: Option<u32>,
    /// Programs the prover runs instead, as `id=probability`. Defaults to
    /// every other profile with equal weight.
    #[arg(long = "impostor")]
    pub impostors: Vec<String>,
    /// Directory of calibrated .tpl files for the tray; built from the
    /// profiles when omitted.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// Traces per template when the tray's templates are built here.
    #[arg(long, default_value_t = 200)]
    pub build_traces: usize,
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    /// One thread per actor.
    #[arg(long)]
    pub threaded: bool,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Overlay a template; the trace is cut to its window.
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep every k-th sample.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
}
