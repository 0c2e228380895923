//! Experiment configuration: one TOML file drives every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Hyperparams, RewardConfig};
use crate::simenv::SimConfig;
use crate::workload::{builtin_profile, CalibrationConstants, WorkloadProfile};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("override references unknown config key \"{0}\"")]
    UnknownKey(String),
    #[error("override for \"{key}\" is not a valid {expected}: {raw}")]
    BadOverrideValue { key: String, expected: &'static str, raw: String },
    #[error("override \"{0}\" must have the form key=value")]
    BadOverrideSyntax(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Workload selector: a builtin profile label or explicit parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileSpec {
    Builtin(String),
    Custom { bloat_mb: u32, prime_n: u32, sleep_ms: u32 },
}

impl ProfileSpec {
    pub fn resolve(&self) -> Result<WorkloadProfile, ConfigError> {
        match self {
            ProfileSpec::Builtin(label) => builtin_profile(label).ok_or_else(|| {
                ConfigError::Invalid(format!("profile: no builtin profile named \"{label}\""))
            }),
            ProfileSpec::Custom { bloat_mb, prime_n, sleep_ms } => {
                Ok(WorkloadProfile::new(0, *bloat_mb, *prime_n, *sleep_ms))
            }
        }
    }
}

/// Concurrency grid for the baseline sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub start: u32,
    pub end: u32,
    pub step: u32,
    pub repetitions: u32,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { start: 10, end: 310, step: 20, repetitions: 10 }
    }
}

impl SweepConfig {
    pub fn levels(&self) -> Vec<u32> {
        (self.start..=self.end).step_by(self.step as usize).collect()
    }
}

/// Everything one experiment needs; every field has a default, so an empty
/// file (or none at all) is a valid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Seed from which every per-run seed is derived.
    pub master_seed: u64,
    /// Offered request rate of each load test.
    pub rate_rps: f64,
    /// Attack window of each load test.
    pub duration_ms: u64,
    /// Number of training iterations (also the comparison length).
    pub iterations: u64,
    /// Concurrency limit of the first training iteration.
    pub start_conc: u32,
    /// Window, in iterations, for the modal-concurrency summary.
    pub modal_window: u64,
    /// Soft concurrency target of the platform-default comparison arm.
    pub compare_target: u32,
    /// Container target percentage of the comparison arm.
    pub compare_target_percentage: f64,
    /// Directory for result files.
    pub output_dir: PathBuf,
    pub profile: ProfileSpec,
    pub calibration: CalibrationConstants,
    pub sim: SimConfig,
    pub hp: Hyperparams,
    pub reward: RewardConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 1,
            rate_rps: 500.0,
            duration_ms: 30_000,
            iterations: 600,
            start_conc: Hyperparams::default().midpoint_conc(),
            modal_window: 100,
            compare_target: 100,
            compare_target_percentage: 0.7,
            output_dir: PathBuf::from("results"),
            profile: ProfileSpec::Builtin("VII".to_string()),
            calibration: CalibrationConstants::default(),
            sim: SimConfig::default(),
            hp: Hyperparams::default(),
            reward: RewardConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let cfg: Self = toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Ok(cfg)
    }

    /// Desk-scale switch: shrinks each load test to 100 rps over 3 s.
    pub fn apply_fast(&mut self) {
        self.rate_rps = 100.0;
        self.duration_ms = 3000;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if !(self.rate_rps > 0.0 && self.rate_rps.is_finite()) {
            return bad(format!("rate_rps must be positive, got {}", self.rate_rps));
        }
        if self.duration_ms == 0 {
            return bad("duration_ms must be positive".into());
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.modal_window == 0 {
            return bad("modal_window must be at least 1".into());
        }
        if self.sweep.start < 1 || self.sweep.end > 1000 {
            return bad(format!(
                "sweep grid {}..={} must stay within 1..=1000",
                self.sweep.start, self.sweep.end
            ));
        }
        if self.sweep.step == 0 || self.sweep.start > self.sweep.end {
            return bad("sweep step must be positive and start <= end".into());
        }
        if self.sweep.repetitions == 0 {
            return bad("sweep repetitions must be at least 1".into());
        }
        if self.compare_target < 1 {
            return bad("compare_target must be at least 1".into());
        }
        if !(self.compare_target_percentage > 0.0 && self.compare_target_percentage <= 1.0) {
            return bad(format!(
                "compare_target_percentage must be in (0, 1], got {}",
                self.compare_target_percentage
            ));
        }
        if !(self.reward.tolerance >= 0.0 && self.reward.tolerance < 1.0) {
            return bad(format!(
                "reward tolerance must be in [0, 1), got {}",
                self.reward.tolerance
            ));
        }
        if self.calibration.cpu_ms_per_unit_prime <= 0.0
            || !self.calibration.cpu_ms_per_unit_prime.is_finite()
        {
            return bad("calibration.cpu_ms_per_unit_prime must be positive".into());
        }
        if self.calibration.cpu_base_ms < 0.0 || self.calibration.mem_overhead_mb < 0.0 {
            return bad("calibration constants must be non-negative".into());
        }
        self.hp.validate().map_err(ConfigError::Invalid)?;
        if !self.hp.on_grid(self.start_conc) {
            return bad(format!(
                "start_conc {} is not on the concurrency grid {}..={}",
                self.start_conc, self.hp.conc_min, self.hp.conc_max
            ));
        }
        self.sim.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.profile.resolve()?;
        Ok(())
    }

    /// Applies `key=value` overrides with dotted paths (`sim.max_pods=5`).
    /// Every key must already exist in the serialized config.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, ConfigError> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let rendered =
            toml::to_string(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut table: toml::Table =
            toml::from_str(&rendered).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for entry in overrides {
            let (key, raw) = entry
                .split_once('=')
                .ok_or_else(|| ConfigError::BadOverrideSyntax(entry.clone()))?;
            set_dotted(&mut table, key.trim(), raw.trim())?;
        }
        let patched =
            toml::to_string(&table).map_err(|e| ConfigError::Parse(e.to_string()))?;
        toml::from_str(&patched).map_err(|e| ConfigError::Parse(e.to_string()))
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, raw: &str) -> Result<(), ConfigError> {
    let unknown = || ConfigError::UnknownKey(key.to_string());
    let mut current = table;
    let segments: Vec<&str> = key.split('.').collect();
    let (last, path) = segments.split_last().ok_or_else(unknown)?;
    for segment in path {
        current = current
            .get_mut(*segment)
            .and_then(|v| v.as_table_mut())
            .ok_or_else(unknown)?;
    }
    let slot = current.get_mut(*last).ok_or_else(unknown)?;
    let bad = |expected: &'static str| ConfigError::BadOverrideValue {
        key: key.to_string(),
        expected,
        raw: raw.to_string(),
    };
    *slot = match slot {
        toml::Value::Boolean(_) => {
            toml::Value::Boolean(raw.parse().map_err(|_| bad("boolean"))?)
        }
        toml::Value::Integer(_) => {
            toml::Value::Integer(raw.parse().map_err(|_| bad("integer"))?)
        }
        toml::Value::Float(_) => toml::Value::Float(raw.parse().map_err(|_| bad("number"))?),
        toml::Value::String(_) => toml::Value::String(raw.to_string()),
        _ => return Err(bad("scalar")),
    };
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_paper_scale() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.rate_rps, 500.0);
        assert_eq!(cfg.duration_ms, 30_000);
        assert_eq!(cfg.sweep.levels().len(), 16);
        assert_eq!(cfg.sweep.repetitions, 10);
        assert_eq!(cfg.start_conc, 170);
        let mut fast = cfg;
        fast.apply_fast();
        assert_eq!((fast.rate_rps, fast.duration_ms), (100.0, 3000));
    }

    #[test]
    fn loads_partial_toml() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(
            &path,
            "profile = \"X\"\nmaster_seed = 7\n[sim]\nmax_pods = 5\n[sweep]\nrepetitions = 2\n",
        )
        .unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.master_seed, 7);
        assert_eq!(cfg.sim.max_pods, 5);
        assert_eq!(cfg.sweep.repetitions, 2);
        assert_eq!(cfg.profile.resolve().unwrap().bloat_mb, 256);
        // untouched keys keep their defaults
        assert_eq!(cfg.rate_rps, 500.0);
        assert_eq!(cfg.sim.cold_start_ms, 2000);
    }

    #[test]
    fn custom_profile_table() {
        let cfg: ExperimentConfig =
            toml::from_str("[profile]\nbloat_mb = 64\nprime_n = 500\nsleep_ms = 20\n").unwrap();
        let p = cfg.profile.resolve().unwrap();
        assert_eq!((p.bloat_mb, p.prime_n, p.sleep_ms), (64, 500, 20));
    }

    #[test]
    fn overrides_set_existing_keys() {
        let cfg = ExperimentConfig::default();
        let patched = cfg
            .with_overrides(&[
                "sim.max_pods=9".into(),
                "hp.gamma=0.8".into(),
                "rate_rps=50".into(),
                "sim.scale_to_zero=false".into(),
                "profile=X".into(),
            ])
            .unwrap();
        assert_eq!(patched.sim.max_pods, 9);
        assert_eq!(patched.hp.gamma, 0.8);
        assert_eq!(patched.rate_rps, 50.0);
        assert!(!patched.sim.scale_to_zero);
        assert_eq!(patched.profile, ProfileSpec::Builtin("X".into()));
    }

    #[test]
    fn overrides_reject_unknown_keys_and_bad_values() {
        let cfg = ExperimentConfig::default();
        assert!(matches!(
            cfg.with_overrides(&["sim.no_such_knob=1".into()]),
            Err(ConfigError::UnknownKey(k)) if k == "sim.no_such_knob"
        ));
        assert!(matches!(
            cfg.with_overrides(&["sim.max_pods=many".into()]),
            Err(ConfigError::BadOverrideValue { .. })
        ));
        assert!(matches!(
            cfg.with_overrides(&["sim.max_pods".into()]),
            Err(ConfigError::BadOverrideSyntax(_))
        ));
    }

    #[test]
    fn validation_catches_bad_grids() {
        let cfg = ExperimentConfig { start_conc: 75, ..ExperimentConfig::default() };
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.sweep.end = 1200;
        assert!(cfg.validate().is_err());

        let cfg = ExperimentConfig { iterations: 0, ..ExperimentConfig::default() };
        assert!(cfg.validate().is_err());

        let cfg = ExperimentConfig {
            profile: ProfileSpec::Builtin("XIX".into()),
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
