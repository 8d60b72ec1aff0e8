// SPDX-License-Identifier: Apache-2.0

//! Run configuration, loaded from JSON with unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use power_attest::savgol;
use power_attest::security::{LevelRule, REFERENCE_P_ALPHA, REFERENCE_P_BETA};
use power_attest::synth::TriggerConfig;
use power_attest::template::{DEFAULT_FILTER_ORDER, DEFAULT_FILTER_WINDOW, DEFAULT_PERCENTILE, MIN_CALIBRATION_TRACES};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Environment variable naming the config file.
pub const CONFIG_ENV: &str = "POWER_ATTEST_CONFIG";

/// Config file looked up in the working directory when neither `--config`
/// nor the environment variable names one.
pub const DEFAULT_CONFIG_FILE: &str = "power-attest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub filter_window: u16,
    pub filter_order: u8,
    pub percentile: f64,
    pub trigger: TriggerConfig,
    pub p_alpha: f64,
    pub p_beta: f64,
    pub security_level: u32,
    /// How `security_level` is matched against a cheat probability.
    pub level_rule: LevelRule,
    pub template_dir: PathBuf,
    pub corpus_dir: PathBuf,
    pub seed: u64,
    pub pipeline: PipelineConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            filter_window: DEFAULT_FILTER_WINDOW,
            filter_order: DEFAULT_FILTER_ORDER,
            percentile: DEFAULT_PERCENTILE,
            trigger: TriggerConfig::default(),
            p_alpha: REFERENCE_P_ALPHA,
            p_beta: REFERENCE_P_BETA,
            security_level: 32,
            level_rule: LevelRule::NearestBit,
            template_dir: PathBuf::from("templates"),
            corpus_dir: PathBuf::from("corpus"),
            seed: 1,
            pipeline: PipelineConfig::default(),
        }
    }
}

/// Sizes for `power-attest pipeline`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Profile set file; the bundled set when absent.
    pub profiles: Option<PathBuf>,
    /// Traces per program used to average each template.
    pub build_traces: usize,
    /// Held-out traces per program used to calibrate thresholds.
    pub calibration_traces: usize,
    /// Held-out traces per program in the evaluation corpus.
    pub eval_traces: usize,
    /// Application attested by the protocol stage; the first profile when
    /// absent.
    pub app: Option<String>,
    /// Honest protocol sessions.
    pub sessions: u64,
    /// Evaluation worker threads.
    pub threads: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            profiles: None,
            build_traces: 200,
            calibration_traces: 200,
            eval_traces: 250,
            app: None,
            sessions: 50,
            threads: 4,
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let config: Config = serde_json::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_owned(),
            source: e,
        })?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// `explicit`, else `$POWER_ATTEST_CONFIG`, else `./power-attest.json`
    /// if present, else the defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self, CliError> {
        if let Some(p) = explicit {
            return Self::load(p);
        }
        if let Some(p) = std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()) {
            return Self::load(Path::new(&p));
        }
        let local = Path::new(DEFAULT_CONFIG_FILE);
        if local.exists() {
            return Self::load(local);
        }
        Ok(Self::default())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        if !self.percentile.is_finite() || !(0.0..=100.0).contains(&self.percentile) {
            return bad(format!("percentile {} is outside [0, 100]", self.percentile));
        }
        if let Err(e) = savgol::coefficients(usize::from(self.filter_window), usize::from(self.filter_order)) {
            return bad(format!("filter: {e}"));
        }
        if let Err(e) = self.trigger.validate() {
            return bad(e.to_string());
        }
        if !(0.0..1.0).contains(&self.p_alpha) || !(self.p_beta > self.p_alpha && self.p_beta <= 1.0) {
            return bad(format!(
                "need 0 <= p_alpha < p_beta <= 1, got p_alpha={}, p_beta={}",
                self.p_alpha, self.p_beta
            ));
        }
        if self.security_level == 0 {
            return bad("security_level must be at least 1".into());
        }
        let p = &self.pipeline;
        if p.build_traces < 2 {
            return bad("pipeline.build_traces must be at least 2".into());
        }
        if p.calibration_traces < MIN_CALIBRATION_TRACES {
            return bad(format!("pipeline.calibration_traces must be at least {MIN_CALIBRATION_TRACES}"));
        }
        if p.eval_traces == 0 {
            return bad("pipeline.eval_traces must be positive".into());
        }
        if p.threads == 0 {
            return bad("pipeline.threads must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = Config::default();
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(Config::from_json(&text).unwrap(), c);
        assert_eq!(Config::from_json("{}").unwrap(), c);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        for text in [
            r#"{"percentile": 200}"#,
            r#"{"percentile": -1}"#,
            r#"{"filter_window": 50}"#,
            r#"{"filter_window": 5, "filter_order": 5}"#,
            r#"{"p_alpha": 0.7, "p_beta": 0.6}"#,
            r#"{"security_level": 0}"#,
            r#"{"pipeline": {"calibration_traces": 1}}"#,
            r#"{"trigger": {"amplitude": 1, "width_samples": 0, "min_excursion": 1, "tolerance_samples": 1}}"#,
            r#"{"percentlie": 25}"#,
            r#"{"pipeline": {"sesions": 3}}"#,
        ] {
            assert!(matches!(Config::from_json(text), Err(CliError::Validation(_))), "{text}");
        }
    }
}
