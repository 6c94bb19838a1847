//! Layered settings: defaults, then a TOML file, then `KGRID_*` environment
//! variables, then `key=value` overrides from the command line.
//!
//! The file is flat: every key lives at the top level. Unknown keys are
//! errors at every layer.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordinator::CoordinatorConfig;
use crate::harness::{
    BenchConfig, ContextMode, ContextPolicy, TrajectoryConfig, WhitespaceTokenCounter, DEFAULT_THRESHOLDS,
};
use crate::signals::batch::FilterOrder;
use crate::signals::{Estimator, MrsConfig, PrsConfig, PrsMode, RewardConfig, SignalsConfig};

pub const ENV_PREFIX: &str = "KGRID_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("{origin}: unknown key {key:?}")]
    UnknownKey { origin: String, key: String },
    #[error("invalid value for {key}: {message}")]
    Invalid { key: &'static str, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub bind: String,
    pub coordinator_url: String,
    pub max_attempts: u32,
    pub deadline_s: f64,
    pub liveness_timeout_s: f64,
    pub sweep_interval_s: f64,
    pub state_dir: String,

    pub worker_id: String,
    pub backend: String,
    pub sandbox: String,
    pub wall_limit_s: f64,
    pub poll_interval_ms: u64,
    pub heartbeat_interval_s: f64,

    pub speedup_clip: f64,
    pub pr_enabled: bool,
    pub gamma: f64,
    pub estimator: Estimator,

    pub mrs_enabled: bool,
    pub mrs_band_low: f64,
    pub mrs_band_high: f64,
    pub mrs_token_veto: f64,
    pub prs_enabled: bool,
    pub prs_tau: f64,
    pub prs_softness: f64,
    pub prs_mode: PrsMode,
    pub filter_order: FilterOrder,

    pub context_mode: ContextMode,
    pub window: usize,
    pub max_context_tokens: usize,
    pub token_factor: f64,
    pub max_turns: usize,
    pub train_rollouts: usize,
    pub eval_rollouts: usize,
    pub parallel: usize,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        let coord = CoordinatorConfig::default();
        let mrs = MrsConfig::default();
        let prs = PrsConfig::default();
        let ctx = ContextPolicy::default();
        let reward = RewardConfig::default();
        Self {
            bind: "127.0.0.1:8470".into(),
            coordinator_url: "http://127.0.0.1:8470".into(),
            max_attempts: coord.max_attempts,
            deadline_s: coord.default_deadline_s,
            liveness_timeout_s: coord.liveness_timeout_s,
            sweep_interval_s: 1.0,
            state_dir: String::new(),
            worker_id: String::new(),
            backend: crate::eval::SIM_BACKEND.into(),
            sandbox: "process".into(),
            wall_limit_s: 600.0,
            poll_interval_ms: 250,
            heartbeat_interval_s: 5.0,
            speedup_clip: reward.speedup_clip,
            pr_enabled: reward.pr_enabled,
            gamma: 1.0,
            estimator: Estimator::Trloo,
            mrs_enabled: true,
            mrs_band_low: mrs.band_low,
            mrs_band_high: mrs.band_high,
            mrs_token_veto: mrs.token_veto,
            prs_enabled: true,
            prs_tau: prs.tau,
            prs_softness: prs.softness,
            prs_mode: prs.mode,
            filter_order: FilterOrder::MrsThenPrs,
            context_mode: ctx.mode,
            window: ctx.window,
            max_context_tokens: ctx.max_context_tokens,
            token_factor: WhitespaceTokenCounter::default().factor,
            max_turns: 3,
            train_rollouts: 16,
            eval_rollouts: 8,
            parallel: 8,
            seed: 0,
        }
    }
}

/// Commented config file holding every default.
pub const DEFAULT_TEMPLATE: &str = r#"# kgrid configuration. Every key is optional.

# Coordinator
bind = "127.0.0.1:8470"
coordinator_url = "http://127.0.0.1:8470"
max_attempts = 3                # dispatches after the first before a task fails
deadline_s = 300.0              # per-task deadline unless the submitter sets one
liveness_timeout_s = 30.0       # a worker silent this long is dead
sweep_interval_s = 1.0
state_dir = ""                  # empty keeps state in memory only

# Worker
worker_id = ""                  # empty derives one from host and pid
backend = "sim"
sandbox = "process"             # process | thread
wall_limit_s = 600.0
poll_interval_ms = 250
heartbeat_interval_s = 5.0

# Rewards and returns
speedup_clip = 3.0
pr_enabled = false              # add the profiling ratio to the reward
gamma = 1.0
estimator = "trloo"             # trloo | grpo

# Sample filters
mrs_enabled = true
mrs_band_low = 0.999
mrs_band_high = 1.001
mrs_token_veto = 0.0001
prs_enabled = true
prs_tau = 0.3
prs_softness = 0.1
prs_mode = "soft"               # soft | hard
filter_order = "mrs_then_prs"   # mrs_then_prs | prs_then_mrs

# Harness
context_mode = "ctxmgmt"        # ctxmgmt | vanilla
window = 4
max_context_tokens = 32768
token_factor = 1.3
max_turns = 3
train_rollouts = 16
eval_rollouts = 8
parallel = 8
seed = 0
"#;

fn defaults_table() -> toml::Table {
    toml::Table::try_from(Config::default()).expect("defaults serialize")
}

fn merge(into: &mut toml::Table, layer: toml::Table, origin: &str) -> Result<(), ConfigError> {
    let known = defaults_table();
    for (k, v) in layer {
        if !known.contains_key(&k) {
            return Err(ConfigError::UnknownKey {
                origin: origin.to_string(),
                key: k,
            });
        }
        into.insert(k, v);
    }
    Ok(())
}

/// Interprets a raw override string using the type of the key's default:
/// string keys take the text as is, everything else parses as a TOML value.
fn coerce(key: &str, raw: &str, origin: &str) -> Result<toml::Value, ConfigError> {
    let known = defaults_table();
    let Some(default) = known.get(key) else {
        return Err(ConfigError::UnknownKey {
            origin: origin.to_string(),
            key: key.to_string(),
        });
    };
    if default.is_str() {
        return Ok(toml::Value::String(raw.to_string()));
    }
    let doc: toml::Table = format!("v = {raw}")
        .parse()
        .map_err(|e: toml::de::Error| ConfigError::Parse {
            origin: format!("{origin} {key}"),
            message: e.message().to_string(),
        })?;
    Ok(doc["v"].clone())
}

impl Config {
    /// Resolves all layers. `env` is usually `std::env::vars()`; variables
    /// without the prefix are ignored.
    pub fn load(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &[(String, String)],
    ) -> Result<Self, ConfigError> {
        let mut table = defaults_table();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
                path: path.display().to_string(),
                source,
            })?;
            let layer: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse {
                origin: path.display().to_string(),
                message: e.to_string(),
            })?;
            merge(&mut table, layer, &path.display().to_string())?;
        }
        let mut env: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_ascii_lowercase(), v)))
            .collect();
        env.sort();
        for (key, raw) in env {
            let origin = format!("environment {ENV_PREFIX}{}", key.to_ascii_uppercase());
            let v = coerce(&key, &raw, &origin)?;
            table.insert(key, v);
        }
        for (key, raw) in overrides {
            let v = coerce(key, raw, "override")?;
            table.insert(key.clone(), v);
        }
        let config: Config = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse {
            origin: "resolved configuration".into(),
            message: e.message().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn parse_override(arg: &str) -> Result<(String, String), ConfigError> {
        match arg.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
            _ => Err(ConfigError::Parse {
                origin: "override".into(),
                message: format!("expected key=value, got {arg:?}"),
            }),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn check(ok: bool, key: &'static str, message: &str) -> Result<(), ConfigError> {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::Invalid {
                    key,
                    message: message.to_string(),
                })
            }
        }
        let positive = |x: f64| x.is_finite() && x > 0.0;
        check(self.max_attempts >= 1, "max_attempts", "must be at least 1")?;
        check(positive(self.deadline_s), "deadline_s", "must be positive")?;
        check(
            positive(self.liveness_timeout_s),
            "liveness_timeout_s",
            "must be positive",
        )?;
        check(positive(self.sweep_interval_s), "sweep_interval_s", "must be positive")?;
        check(positive(self.wall_limit_s), "wall_limit_s", "must be positive")?;
        check(
            positive(self.heartbeat_interval_s),
            "heartbeat_interval_s",
            "must be positive",
        )?;
        check(
            matches!(self.sandbox.as_str(), "process" | "thread"),
            "sandbox",
            "expected process or thread",
        )?;
        check(positive(self.speedup_clip), "speedup_clip", "must be positive")?;
        check((0.0..=1.0).contains(&self.gamma), "gamma", "must lie in [0, 1]")?;
        check(
            self.mrs_band_low.is_finite() && self.mrs_band_high.is_finite() && self.mrs_band_low <= self.mrs_band_high,
            "mrs_band_low",
            "band must be finite with low <= high",
        )?;
        check(
            self.mrs_token_veto > 0.0 && self.mrs_token_veto <= 1.0,
            "mrs_token_veto",
            "must lie in (0, 1]",
        )?;
        check(self.prs_tau.is_finite(), "prs_tau", "must be finite")?;
        check(
            self.prs_softness.is_finite() && self.prs_softness >= 0.0,
            "prs_softness",
            "must be non-negative",
        )?;
        check(self.window >= 1, "window", "must be at least 1")?;
        check(self.max_context_tokens >= 1, "max_context_tokens", "must be at least 1")?;
        check(positive(self.token_factor), "token_factor", "must be positive")?;
        check(self.max_turns >= 1, "max_turns", "must be at least 1")?;
        check(self.train_rollouts >= 1, "train_rollouts", "must be at least 1")?;
        check(self.eval_rollouts >= 1, "eval_rollouts", "must be at least 1")?;
        check(self.parallel >= 1, "parallel", "must be at least 1")?;
        Ok(())
    }

    pub fn coordinator(&self) -> CoordinatorConfig {
        CoordinatorConfig {
            max_attempts: self.max_attempts,
            default_deadline_s: self.deadline_s,
            liveness_timeout_s: self.liveness_timeout_s,
            ..CoordinatorConfig::default()
        }
    }

    pub fn reward(&self) -> RewardConfig {
        RewardConfig {
            speedup_clip: self.speedup_clip,
            pr_enabled: self.pr_enabled,
        }
    }

    pub fn signals(&self) -> SignalsConfig {
        SignalsConfig {
            gamma: self.gamma,
            estimator: self.estimator,
            mrs_enabled: self.mrs_enabled,
            mrs: MrsConfig {
                band_low: self.mrs_band_low,
                band_high: self.mrs_band_high,
                token_veto: self.mrs_token_veto,
            },
            prs_enabled: self.prs_enabled,
            prs: PrsConfig {
                tau: self.prs_tau,
                softness: self.prs_softness,
                mode: self.prs_mode,
            },
            order: self.filter_order,
            seed: self.seed,
            max_turns: 0,
        }
    }

    pub fn context(&self) -> ContextPolicy {
        ContextPolicy {
            mode: self.context_mode,
            window: self.window,
            max_context_tokens: self.max_context_tokens,
        }
    }

    pub fn token_counter(&self) -> WhitespaceTokenCounter {
        WhitespaceTokenCounter {
            factor: self.token_factor,
        }
    }

    /// Benchmark settings with the eval-shaped rollout count.
    pub fn bench(&self) -> BenchConfig {
        BenchConfig {
            rollouts: self.eval_rollouts,
            max_turns: self.max_turns,
            context: self.context(),
            reward: self.reward(),
            seed: self.seed,
            parallel: self.parallel,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
        }
    }

    pub fn trajectory(&self) -> TrajectoryConfig {
        TrajectoryConfig {
            max_turns: self.max_turns,
            context: self.context(),
            reward: self.reward(),
            deadline_s: None,
            ..TrajectoryConfig::default()
        }
    }

    pub fn poll_interval(&self) -> Duration {
        Duration::from_millis(self.poll_interval_ms)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env() -> Vec<(String, String)> {
        Vec::new()
    }

    #[test]
    fn template_matches_defaults() {
        let parsed: Config = toml::from_str(DEFAULT_TEMPLATE).unwrap();
        assert_eq!(parsed, Config::default());
        // and every key is spelled out
        let t: toml::Table = DEFAULT_TEMPLATE.parse().unwrap();
        assert_eq!(t.len(), defaults_table().len());
    }

    #[test]
    fn defaults_are_the_published_constants() {
        let c = Config::default();
        assert_eq!(c.speedup_clip, 3.0);
        assert_eq!(c.gamma, 1.0);
        assert_eq!((c.prs_tau, c.prs_softness), (0.3, 0.1));
        assert_eq!(
            (c.mrs_band_low, c.mrs_band_high, c.mrs_token_veto),
            (0.999, 1.001, 1e-4)
        );
        assert_eq!((c.window, c.max_turns), (4, 3));
        assert_eq!((c.train_rollouts, c.eval_rollouts), (16, 8));
    }

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kgrid.toml");
        std::fs::write(&path, "window = 6\ngamma = 0.5\nworker_id = \"file\"\n").unwrap();
        let env = vec![
            ("KGRID_WINDOW".to_string(), "7".to_string()),
            ("KGRID_WORKER_ID".to_string(), "42".to_string()),
            ("PATH".to_string(), "/bin".to_string()),
        ];
        let c = Config::load(Some(&path), env, &[("gamma".into(), "0".into())]).unwrap();
        assert_eq!(c.window, 7);
        assert_eq!(c.worker_id, "42");
        assert_eq!(c.gamma, 0.0);
    }

    #[test]
    fn unknown_keys_rejected_everywhere() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kgrid.toml");
        std::fs::write(&path, "windw = 6\n").unwrap();
        assert!(matches!(
            Config::load(Some(&path), no_env(), &[]),
            Err(ConfigError::UnknownKey { .. })
        ));
        let env = vec![("KGRID_NOPE".to_string(), "1".to_string())];
        assert!(matches!(
            Config::load(None, env, &[]),
            Err(ConfigError::UnknownKey { .. })
        ));
        assert!(Config::load(None, no_env(), &[("nope".into(), "1".into())]).is_err());
    }

    #[test]
    fn enum_and_range_validation() {
        let c = Config::load(None, no_env(), &[("estimator".into(), "grpo".into())]).unwrap();
        assert_eq!(c.estimator, Estimator::Grpo);
        assert!(Config::load(None, no_env(), &[("estimator".into(), "ppo".into())]).is_err());
        let err = Config::load(None, no_env(), &[("gamma".into(), "1.5".into())]).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { key: "gamma", .. }));
    }

    #[test]
    fn roundtrips_through_toml() {
        let c = Config::default();
        assert_eq!(toml::from_str::<Config>(&c.to_toml()).unwrap(), c);
    }
}
