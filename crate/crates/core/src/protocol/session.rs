// SPDX-License-Identifier: Apache-2.0

//! Wiring the actors into runnable sessions.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::actors::{
    actor_rng, Actor, Execution, Prover, ProverConfig, ProverMode, Tee, Tray, TrayConfig, Verifier, VerifierConfig, VerifierReport,
    Workload,
};
use super::checksum::{memory_image, ChecksumSpec};
use super::crypto::{setup, Directory, Nonce, ProtocolParameters};
use super::net::{Host, Interleaved, Interposer, Latency, Network, PassThrough, Threaded};
use super::transcript::TranscriptEntry;
use super::{ProtocolError, Role};
use crate::matcher::PreparedTemplate;
use crate::synth::{render_all, ProgramProfile, RenderedProfile, SplitMix64, TriggerConfig};
use crate::template::{calibrate_windows, Template, TemplateBuilder, TemplateError};
use crate::trace::{decode_capture, encode_codes, ADC_FULL_SCALE, CAPTURE_LEN};

pub type SessionOutcome = VerifierReport;

/// The physical side of the simulation: the programs the prover can run
/// and what the TEE's sensor sees when they run.
#[derive(Debug, Clone)]
pub struct World {
    profiles: HashMap<String, Arc<RenderedProfile>>,
}

impl World {
    pub fn new(profiles: &[ProgramProfile], trigger: &TriggerConfig) -> Result<Self, ProtocolError> {
        Ok(Self::from_rendered(render_all(profiles, trigger)?))
    }

    pub fn from_rendered(rendered: Vec<Arc<RenderedProfile>>) -> Self {
        Self {
            profiles: rendered.into_iter().map(|r| (r.program_id().to_owned(), r)).collect(),
        }
    }

    pub fn profile(&self, program_id: &str) -> Option<&Arc<RenderedProfile>> {
        self.profiles.get(program_id)
    }

    /// Wall time of one run at one sample per microsecond: the span of
    /// the program's length bucket.
    pub fn run_time_us(&self, program_id: &str) -> Option<u64> {
        self.profile(program_id).map(|p| p.bucket().size() as u64)
    }

    /// Sensor readings for one run, as ADC codes: the window of the
    /// declared application's length bucket, starting at the run's start
    /// trigger.
    pub fn sensor_window(&self, declared_app: &str, run: &Execution) -> Option<Vec<f64>> {
        let len = self.profile(declared_app)?.bucket().size();
        let executed = self.profile(&run.program_id)?;
        let start = executed.triggers().start.min(CAPTURE_LEN - len);
        let mut w = executed.window(run.seed, start, len);
        let full_scale = f64::from(ADC_FULL_SCALE);
        for v in &mut w {
            *v = v.round().clamp(0.0, full_scale);
        }
        Some(w)
    }

    /// [`World::sensor_window`] in the raw capture layout.
    pub fn capture(&self, declared_app: &str, run: &Execution) -> Option<Vec<u8>> {
        let w = self.sensor_window(declared_app, run)?;
        Some(encode_codes(&w).expect("bucket windows have even length and hold ADC codes"))
    }
}

/// Calibrated templates held by the measurements tray.
#[derive(Debug, Clone)]
pub struct TemplateStore {
    templates: HashMap<String, (Template, PreparedTemplate)>,
}

impl TemplateStore {
    pub fn new(templates: Vec<Template>) -> Result<Self, ProtocolError> {
        let mut map = HashMap::new();
        for t in templates {
            if !t.is_calibrated() {
                return Err(TemplateError::Match(crate::matcher::MatchError::UncalibratedTemplate(t.program_id.clone())).into());
            }
            let p = PreparedTemplate::new(&t).map_err(TemplateError::from)?;
            map.insert(t.program_id.clone(), (t, p));
        }
        Ok(Self { templates: map })
    }

    pub fn template(&self, app_id: &str) -> Option<&Template> {
        self.templates.get(app_id).map(|(t, _)| t)
    }

    /// Whether one encoded trace passes `app_id`'s threshold. A trace of
    /// the wrong length or that does not decode fails.
    pub fn passes(&self, app_id: &str, trace: &[u8]) -> Option<bool> {
        let (_, prepared) = self.templates.get(app_id)?;
        let Ok(decoded) = decode_capture(trace) else {
            return Some(false);
        };
        Some(prepared.decide(decoded.samples()).map(|d| d.passed()).unwrap_or(false))
    }

    /// Number of passing traces, or `None` if `app_id` has no template.
    pub fn pass_count(&self, app_id: &str, traces: &[Vec<u8>]) -> Option<usize> {
        self.templates.get(app_id)?;
        Some(traces.iter().filter(|t| self.passes(app_id, t) == Some(true)).count())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreOptions {
    pub build_traces: usize,
    /// Calibration traces, disjoint from the build traces.
    pub calibration_traces: usize,
    pub percentile: f64,
    pub filter_window: u16,
    pub filter_order: u8,
    pub seed: u64,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self {
            build_traces: 200,
            calibration_traces: 200,
            percentile: crate::template::DEFAULT_PERCENTILE,
            filter_window: crate::template::DEFAULT_FILTER_WINDOW,
            filter_order: crate::template::DEFAULT_FILTER_ORDER,
            seed: 0x5eed_0f_7a7e,
        }
    }
}

/// Builds and calibrates a template per application from honest runs seen
/// through the sensor, exactly as the TEE would report them.
pub fn build_template_store(world: &World, apps: &[&str], opts: &StoreOptions) -> Result<TemplateStore, ProtocolError> {
    let mut seeds = SplitMix64::new(opts.seed);
    let mut templates = Vec::with_capacity(apps.len());
    for &app in apps {
        let profile = world.profile(app).ok_or_else(|| ProtocolError::UnknownApplication(app.to_owned()))?;
        let run = |seeds: &mut SplitMix64| {
            world
                .sensor_window(
                    app,
                    &Execution {
                        program_id: app.to_owned(),
                        seed: seeds.next_u64(),
                    },
                )
                .expect("profile exists")
        };
        let mut builder = TemplateBuilder::new(app, profile.bucket());
        for _ in 0..opts.build_traces {
            builder.add_window(&run(&mut seeds))?;
        }
        let template = builder.finish(opts.filter_window, opts.filter_order)?;
        let windows: Vec<_> = (0..opts.calibration_traces).map(|_| Ok(run(&mut seeds))).collect();
        templates.push(calibrate_windows(&template, windows, opts.percentile)?);
    }
    TemplateStore::new(templates)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub app_id: String,
    /// Traces per session, `n`.
    pub traces_per_session: u32,
    /// Traces per computation round; `None` means one round of `n`.
    pub traces_per_round: Option<u32>,
    pub x_th: u32,
    pub seed: u64,
    pub latency: LatencyConfig,
    pub checksum: ChecksumSpec,
    pub image_len: usize,
    /// Allowance on top of the honest launch time before `V` rejects it.
    pub timing_slack_us: u64,
    pub prover_mode: ProverMode,
    pub workload: Workload,
    pub keep_traces: bool,
    /// Run each actor on its own thread.
    pub threaded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyConfig {
    pub network_us: u64,
    pub platform_us: u64,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        let l = Latency::default();
        Self {
            network_us: l.network_us,
            platform_us: l.platform_us,
        }
    }
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            app_id: String::new(),
            traces_per_session: 52,
            traces_per_round: None,
            x_th: 21,
            seed: 0,
            latency: LatencyConfig::default(),
            checksum: ChecksumSpec::default(),
            image_len: 4096,
            timing_slack_us: 500,
            prover_mode: ProverMode::Honest,
            workload: Workload::Honest,
            keep_traces: false,
            threaded: false,
        }
    }
}

impl SimulationConfig {
    /// The verifier's bound on the launch round trip: two network hops,
    /// two on-platform hops, the honest checksum time and the slack.
    pub fn expected_dt_us(&self) -> u64 {
        2 * self.latency.network_us + 2 * self.latency.platform_us + self.checksum.base_duration_us() + self.timing_slack_us
    }

    pub fn validate(&self, world: &World) -> Result<(), ProtocolError> {
        let bad = |m: &str| Err(ProtocolError::InvalidConfig(m.to_owned()));
        if world.profile(&self.app_id).is_none() {
            return Err(ProtocolError::UnknownApplication(self.app_id.clone()));
        }
        if self.traces_per_session == 0 {
            return bad("traces_per_session must be at least 1");
        }
        if self.traces_per_round == Some(0) {
            return bad("traces_per_round must be at least 1");
        }
        if self.x_th > self.traces_per_session {
            return bad("x_th exceeds traces_per_session");
        }
        if self.image_len == 0 || self.checksum.iterations == 0 {
            return bad("checksum needs a non-empty image and at least one iteration");
        }
        if let Workload::Substitute { mixture } = &self.workload {
            let mut total = 0.0;
            for (id, p) in mixture {
                if world.profile(id).is_none() {
                    return Err(ProtocolError::UnknownApplication(id.clone()));
                }
                if !(0.0..=1.0).contains(p) {
                    return bad("mixture probabilities must lie in [0, 1]");
                }
                total += p;
            }
            if total > 1.0 + 1e-12 {
                return bad("mixture probabilities sum above 1");
            }
        }
        Ok(())
    }
}

/// A running deployment: the four actors, the network and the transcript.
pub struct Simulation {
    host: Box<dyn Host>,
    net: Network,
    directory: Directory,
    transcript: Vec<TranscriptEntry>,
    next_session: u64,
    params: ProtocolParameters,
}

const PROVER_ID: &str = "P";

impl Simulation {
    pub fn new(world: Arc<World>, store: Arc<TemplateStore>, cfg: &SimulationConfig) -> Result<Self, ProtocolError> {
        cfg.validate(&world)?;
        let (mut keys, dir) = setup(&Role::ALL, cfg.seed);
        let image = Arc::new(memory_image(cfg.image_len, cfg.seed ^ 0x1a9e_0000));
        let verifier = Verifier::new(
            VerifierConfig {
                prover_id: PROVER_ID.into(),
                app_id: cfg.app_id.clone(),
                traces_per_session: cfg.traces_per_session,
                traces_per_round: cfg.traces_per_round.unwrap_or(cfg.traces_per_session),
                reference_image: image.clone(),
                checksum: cfg.checksum.clone(),
                expected_dt_us: cfg.expected_dt_us(),
                keep_traces: cfg.keep_traces,
            },
            keys.remove(&Role::Verifier).unwrap(),
            dir.clone(),
            actor_rng(cfg.seed, Role::Verifier),
        );
        let prover = Prover::new(
            ProverConfig {
                prover_id: PROVER_ID.into(),
                image,
                checksum: cfg.checksum.clone(),
                mode: cfg.prover_mode.clone(),
                workload: cfg.workload.clone(),
            },
            keys.remove(&Role::Prover).unwrap(),
            dir.clone(),
            world.clone(),
            actor_rng(cfg.seed, Role::Prover),
        );
        let tee = Tee::new(dir.clone(), world, actor_rng(cfg.seed, Role::Tee));
        let tray = Tray::new(
            TrayConfig { x_th: cfg.x_th },
            keys.remove(&Role::Tray).unwrap(),
            dir.clone(),
            store,
            actor_rng(cfg.seed, Role::Tray),
        );
        let actors: Vec<Box<dyn Actor>> = vec![Box::new(verifier), Box::new(prover), Box::new(tee), Box::new(tray)];
        let host: Box<dyn Host> = if cfg.threaded {
            Box::new(Threaded::new(actors))
        } else {
            Box::new(Interleaved::new(actors))
        };
        Ok(Self {
            host,
            net: Network::new(Latency {
                network_us: cfg.latency.network_us,
                platform_us: cfg.latency.platform_us,
            }),
            directory: dir,
            transcript: Vec::new(),
            next_session: 0,
            params: ProtocolParameters::default(),
        })
    }

    /// The public keys, as any party or adversary sees them.
    pub fn directory(&self) -> &Directory {
        &self.directory
    }

    pub fn parameters(&self) -> &ProtocolParameters {
        &self.params
    }

    pub fn run_session(&mut self) -> SessionOutcome {
        self.run_session_with(&mut PassThrough)
    }

    pub fn run_session_with(&mut self, interposer: &mut dyn Interposer) -> SessionOutcome {
        self.run(None, interposer)
    }

    /// Runs a session whose first computation round uses `token` instead
    /// of a freshly drawn one.
    pub fn run_session_with_token(&mut self, token: Nonce) -> SessionOutcome {
        self.run(Some(token), &mut PassThrough)
    }

    fn run(&mut self, token: Option<Nonce>, interposer: &mut dyn Interposer) -> SessionOutcome {
        let id = self.next_session;
        self.next_session += 1;
        self.net.run_session(self.host.as_mut(), id, token, interposer, &mut self.transcript)
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn take_transcript(&mut self) -> Vec<TranscriptEntry> {
        std::mem::take(&mut self.transcript)
    }
}
