//! Experiment files (TOML) and the shipped presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{DeviceSpec, Environment, EngineError, RunConfig, TraceMode, TraceSource};
use crate::learner::{AggregatorConfig, PopulationSpec, TrainParams};
use crate::scheduler::SchedulerConfig;
use crate::selection::{PolicyKind, SelectionPolicy};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("parse error at {location}: {message}")]
    ParseError { location: String, message: String },
    #[error("invalid value for `{field}`: {reason}")]
    ValidationError { field: String, reason: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

impl ConfigError {
    pub fn validation(field: impl Into<String>, reason: impl ToString) -> Self {
        ConfigError::ValidationError {
            field: field.into(),
            reason: reason.to_string(),
        }
    }
}

/// Presets compiled into the binary.
pub const PRESETS: &[(&str, &str)] = &[
    ("motivating", include_str!("../presets/motivating.toml")),
    ("headline", include_str!("../presets/headline.toml")),
    ("ablation", include_str!("../presets/ablation.toml")),
    ("window-sweep", include_str!("../presets/window-sweep.toml")),
];

pub fn preset_source(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}
fn default_outdir() -> PathBuf {
    PathBuf::from("out")
}
fn default_target() -> f64 {
    0.5
}
fn default_eval_every() -> usize {
    10
}
fn default_warmup() -> usize {
    5
}

/// Round and simulated-time limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budget {
    pub max_rounds: usize,
    pub max_sim_hours: f64,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            max_rounds: 500,
            max_sim_hours: 1000.0,
        }
    }
}

/// One named policy of the matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyEntry {
    pub name: String,
    pub kind: PolicyKind,
    #[serde(default = "PolicyEntry::default_k")]
    pub k: usize,
    #[serde(default = "PolicyEntry::default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub preferred_duration: Option<f64>,
    #[serde(default = "PolicyEntry::default_penalty_exponent")]
    pub penalty_exponent: f64,
    #[serde(default)]
    pub trace_mode: TraceMode,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
}

impl PolicyEntry {
    fn default_k() -> usize {
        SelectionPolicy::new(PolicyKind::Random).k
    }
    fn default_epsilon() -> f64 {
        SelectionPolicy::new(PolicyKind::Random).epsilon
    }
    fn default_penalty_exponent() -> f64 {
        SelectionPolicy::new(PolicyKind::Random).penalty_exponent
    }

    pub fn new(name: impl Into<String>, kind: PolicyKind) -> Self {
        let p = SelectionPolicy::new(kind);
        Self {
            name: name.into(),
            kind,
            k: p.k,
            epsilon: p.epsilon,
            preferred_duration: None,
            penalty_exponent: p.penalty_exponent,
            trace_mode: TraceMode::Dynamic,
            scheduler: SchedulerConfig::default(),
        }
    }

    pub fn selection(&self) -> SelectionPolicy {
        SelectionPolicy {
            kind: self.kind,
            k: self.k,
            epsilon: self.epsilon,
            preferred_duration: self.preferred_duration,
            penalty_exponent: self.penalty_exponent,
        }
    }
}

/// Window sizes for `sweep-window` when none are given on the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default = "default_outdir")]
    pub outdir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_target")]
    pub target_accuracy: f64,
    /// Extra accuracies to report; the target is always included.
    #[serde(default)]
    pub milestones: Vec<f64>,
    /// Policy the report's speedups are measured against; defaults to the
    /// first listed policy.
    #[serde(default)]
    pub baseline: Option<String>,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_warmup")]
    pub warmup_rounds: usize,
    #[serde(default = "default_true")]
    pub stop_at_target: bool,
    #[serde(default)]
    pub budget: Budget,
    #[serde(default)]
    pub population: PopulationSpec,
    #[serde(default)]
    pub traces: TraceSource,
    #[serde(default)]
    pub device: DeviceSpec,
    #[serde(default)]
    pub training: TrainParams,
    #[serde(default)]
    pub aggregator: AggregatorConfig,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub policies: Vec<PolicyEntry>,
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    /// Parses TOML text; relative trace directories resolve against `base`.
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| map_toml_error(text, &e))?;
        if let (TraceSource::Directory { path, .. }, Some(base)) = (&mut cfg.traces, base) {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let text = preset_source(name).ok_or_else(|| {
            ConfigError::validation("preset", format!("no preset named `{name}`"))
        })?;
        Self::from_toml(text, None)
    }

    /// Policies actually run, in listed order.
    pub fn policy(&self, name: &str) -> Option<&PolicyEntry> {
        self.policies.iter().find(|p| p.name == name)
    }

    pub fn baseline_name(&self) -> &str {
        self.baseline
            .as_deref()
            .unwrap_or_else(|| self.policies[0].name.as_str())
    }

    /// Target plus extra milestones, ascending and deduplicated.
    pub fn milestone_list(&self) -> Vec<f64> {
        let mut m = self.milestones.clone();
        m.push(self.target_accuracy);
        m.sort_by(f64::total_cmp);
        m.dedup();
        m
    }

    pub fn run_config(&self, policy: &PolicyEntry, seed: u64) -> RunConfig {
        RunConfig {
            seed,
            policy: policy.selection(),
            scheduler: policy.scheduler,
            training: self.training,
            aggregator: self.aggregator,
            stall_timeout_s: self.device.stall_timeout_s,
            warmup_rounds: self.warmup_rounds,
            eval_every: self.eval_every,
            max_rounds: self.budget.max_rounds,
            max_sim_hours: self.budget.max_sim_hours,
            target_accuracy: self.target_accuracy,
            milestones: self.milestone_list(),
            stop_at_target: self.stop_at_target,
        }
    }

    pub fn environment(&self, mode: TraceMode, seed: u64) -> Result<Environment, EngineError> {
        Environment::build(&self.population, &self.traces, mode, &self.device, seed)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn v(field: impl Into<String>, reason: impl ToString) -> ConfigError {
            ConfigError::validation(field, reason)
        }
        if self.policies.is_empty() {
            return Err(v("policies", "at least one policy is required"));
        }
        if self.seeds.is_empty() {
            return Err(v("seeds", "at least one seed is required"));
        }
        if !(self.target_accuracy > 0.0 && self.target_accuracy < 1.0) {
            return Err(v("target_accuracy", format!("{} is outside (0, 1)", self.target_accuracy)));
        }
        if let Some(m) = self.milestones.iter().find(|m| !(**m > 0.0 && **m < 1.0)) {
            return Err(v("milestones", format!("{m} is outside (0, 1)")));
        }
        if self.eval_every == 0 {
            return Err(v("eval_every", "must be >= 1"));
        }
        if !(self.budget.max_sim_hours > 0.0) {
            return Err(v("budget.max_sim_hours", "must be positive"));
        }
        if let Some(s) = self.sweep.sizes.iter().find(|s| **s == 0) {
            return Err(v("sweep.sizes", format!("window size {s} must be >= 1")));
        }
        self.population.validate().map_err(|e| v("population", e))?;
        self.device.validate().map_err(|e| v("device", e))?;
        self.training.validate().map_err(|e| v("training", e))?;
        self.aggregator.validate().map_err(|e| v("aggregator", e))?;
        if let TraceSource::Directory { path, .. } = &self.traces {
            if path.as_os_str().is_empty() {
                return Err(v("traces.path", "must not be empty"));
            }
        }
        for (i, p) in self.policies.iter().enumerate() {
            let field = |f: &str| format!("policies[{i}].{f}");
            if p.name.is_empty() || !p.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_".contains(c)) {
                return Err(v(field("name"), format!("`{}` must be non-empty [A-Za-z0-9_-]", p.name)));
            }
            if self.policies[..i].iter().any(|q| q.name == p.name) {
                return Err(v(field("name"), format!("duplicate policy name `{}`", p.name)));
            }
            p.selection()
                .validate(self.population.n_clients)
                .map_err(|e| v(field("selection"), e))?;
            p.scheduler.validate().map_err(|e| v(field("scheduler"), e))?;
            if p.preferred_duration.is_none() && self.warmup_rounds == 0 {
                return Err(v(
                    field("preferred_duration"),
                    "required when warmup_rounds = 0",
                ));
            }
        }
        if let Some(b) = &self.baseline {
            if self.policy(b).is_none() {
                return Err(v("baseline", format!("no policy named `{b}`")));
            }
        }
        Ok(())
    }
}

/// Loads a config file, or a preset when `path` names one and no such file
/// exists.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    if !path.exists() {
        if let Some(name) = path.to_str() {
            if preset_source(name).is_some() {
                return ExperimentConfig::preset(name);
            }
        }
    }
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    ExperimentConfig::from_toml(&text, path.parent())
}

fn map_toml_error(text: &str, e: &toml::de::Error) -> ConfigError {
    let message = e.message().to_string();
    if let Some(rest) = message.strip_prefix("unknown field `") {
        if let Some(end) = rest.find('`') {
            return ConfigError::UnknownKey(rest[..end].to_string());
        }
    }
    let location = match e.span() {
        Some(span) => {
            let before = &text[..span.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
            format!("line {line}, column {col}")
        }
        None => "unknown".to_string(),
    };
    ConfigError::ParseError { location, message }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "[population]\nn_clients = 50\n[[policies]]\nname = \"g\"\nkind = \"utility-greedy\"\n",
            None,
        )
        .unwrap();
        assert_eq!(cfg.population.n_clients, 50);
        assert_eq!(cfg.population.dim, PopulationSpec::default().dim);
        assert_eq!(cfg.seeds, vec![1]);
        assert_eq!(cfg.eval_every, 10);
        assert_eq!(cfg.policies[0].k, 20);
        assert_eq!(cfg.policies[0].epsilon, 0.1);
        assert_eq!(cfg.policies[0].scheduler, SchedulerConfig::default());
        assert_eq!(cfg.device, DeviceSpec::default());
        assert_eq!(cfg.training, TrainParams::default());
        assert_eq!(cfg.aggregator, AggregatorConfig::default());
        assert_eq!(cfg.baseline_name(), "g");
    }

    #[test]
    fn target_out_of_range() {
        let err = ExperimentConfig::from_toml(
            "target_accuracy = 1.5\n[[policies]]\nname = \"r\"\nkind = \"random\"\n",
            None,
        )
        .unwrap_err();
        assert!(matches!(err, ConfigError::ValidationError { ref field, .. } if field == "target_accuracy"));
    }

    #[test]
    fn misspelled_key() {
        let err = ExperimentConfig::from_toml("[[polcy]]\nname = \"r\"\n", None).unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey("polcy".into()));
        let err = ExperimentConfig::from_toml(
            "[[policies]]\nname = \"r\"\nkind = \"random\"\n[policies.scheduler]\nth_hgh = 0.9\n",
            None,
        )
        .unwrap_err();
        assert_eq!(err, ConfigError::UnknownKey("th_hgh".into()));
    }

    #[test]
    fn syntax_error_has_location() {
        let err = ExperimentConfig::from_toml("seeds = [1,\n", None).unwrap_err();
        assert!(matches!(err, ConfigError::ParseError { .. }), "{err:?}");
    }

    #[test]
    fn no_policies() {
        let err = ExperimentConfig::from_toml("seeds = [1]\n", None).unwrap_err();
        assert!(matches!(err, ConfigError::ValidationError { ref field, .. } if field == "policies"));
    }

    #[test]
    fn presets_parse() {
        for (name, _) in PRESETS {
            let cfg = ExperimentConfig::preset(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(!cfg.policies.is_empty());
        }
    }
}
