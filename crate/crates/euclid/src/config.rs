//! Flat run configuration: desk-scale defaults, `key = value` config files,
//! and single-key overrides shared by the CLI's `--set` flag.
//!
//! Every knob lives in one struct so a run is fully described by
//! (config, seed), which is what the determinism contract quantifies over.

use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("bad value `{value}` for key `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },

    #[error("malformed config line {line}: `{text}` (expected key = value)")]
    MalformedLine { line: usize, text: String },

    #[error("cannot read config file: {0}")]
    Io(#[from] std::io::Error),
}

pub type ConfigResult<T> = Result<T, ConfigError>;

/// Complete run configuration with desk-scale defaults. The reference
/// configuration from the source experiments uses larger values (2M PT
/// steps, hidden 512, planner population 512); the defaults here are sized
/// for minutes-scale CPU runs.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    /// Run seed; every random draw in a run derives from it.
    pub seed: u64,

    // Environment.
    pub env: String,
    pub task: String,
    pub action_repeat: usize,

    // Model shapes.
    pub latent_dim: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub linear_dynamics: bool,

    // Loss.
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub gamma: f64,
    pub rollout_horizon: usize,
    pub step_weight_decay: f64,

    // Optimization.
    pub batch_size: usize,
    pub pt_lr: f64,
    pub ft_lr: f64,
    pub intrinsic_lr: f64,
    pub target_period: u64,
    pub target_blend: f64,
    pub updates_per_step: usize,

    // Schedule.
    pub pt_steps: u64,
    pub ft_steps: u64,
    pub seed_steps: u64,
    pub buffer_capacity: usize,

    // Ensemble.
    pub mcl_enabled: bool,
    pub alpha: f64,
    pub sigma_explore: f64,
    /// 0 selects the automatic schedule pt_steps / num_heads.
    pub snapshot_interval: u64,

    // Intrinsic exploration.
    pub explorer: String,
    pub apt_k: usize,
    pub skill_dim: usize,
    pub skill_resample: u64,
    pub disagreement_members: usize,

    // Planner.
    pub plan_iterations: usize,
    pub plan_horizon: usize,
    pub plan_population: usize,
    pub plan_elites: usize,
    pub plan_policy_fraction: f64,
    pub plan_temperature: f64,
    pub plan_sigma_min: f64,
    pub plan_init_sigma: f64,
    pub plan_jitter: f64,

    // Fine-tuning weight reuse.
    pub reuse_encoder: bool,
    pub reuse_dynamics: bool,
    pub reuse_reward: bool,
    pub reuse_critic: bool,
    pub reuse_actor: bool,

    // Logging and evaluation.
    pub metrics_every: u64,
    pub log_wall_time: bool,
    pub eval_episodes: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            env: "pointmass".into(),
            task: "reach_ne".into(),
            action_repeat: 1,
            latent_dim: 16,
            hidden: 128,
            num_heads: 4,
            linear_dynamics: false,
            c1: 0.5,
            c2: 2.0,
            c3: 0.1,
            gamma: 0.99,
            rollout_horizon: 5,
            step_weight_decay: 1.0,
            batch_size: 256,
            pt_lr: 1e-4,
            ft_lr: 1e-3,
            intrinsic_lr: 1e-3,
            target_period: 2,
            target_blend: 0.01,
            updates_per_step: 1,
            pt_steps: 20_000,
            ft_steps: 10_000,
            seed_steps: 4_000,
            buffer_capacity: 100_000,
            mcl_enabled: true,
            alpha: 0.1,
            sigma_explore: 0.2,
            snapshot_interval: 0,
            explorer: "disagreement".into(),
            apt_k: 12,
            skill_dim: 16,
            skill_resample: 50,
            disagreement_members: 5,
            plan_iterations: 6,
            plan_horizon: 5,
            plan_population: 128,
            plan_elites: 8,
            plan_policy_fraction: 0.05,
            plan_temperature: 0.5,
            plan_sigma_min: 0.05,
            plan_init_sigma: 0.5,
            plan_jitter: 0.05,
            reuse_encoder: true,
            reuse_dynamics: true,
            // Pre-training never sees task reward, so the reward head and
            // critic carry exploration-shaped estimates. Starting them fresh
            // avoids planning against stale values early in fine-tuning.
            reuse_reward: false,
            reuse_critic: false,
            reuse_actor: true,
            metrics_every: 500,
            log_wall_time: false,
            eval_episodes: 5,
        }
    }
}

macro_rules! config_keys {
    ($($key:ident : $parser:ident),+ $(,)?) => {
        impl Config {
            /// Apply one `key = value` override.
            pub fn apply(&mut self, key: &str, value: &str) -> ConfigResult<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = $parser(key, value)?;
                        Ok(())
                    })+
                    _ => Err(ConfigError::UnknownKey(key.to_string())),
                }
            }

            /// Render every key in file syntax, one per line.
            pub fn render(&self) -> String {
                let mut out = String::new();
                $(let _ = writeln!(out, "{} = {}", stringify!($key), self.$key);)+
                out
            }
        }
    };
}

fn parse_string(_key: &str, value: &str) -> ConfigResult<String> {
    Ok(value.to_string())
}

fn parse_bool(key: &str, value: &str) -> ConfigResult<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            reason: "expected true/false".into(),
        }),
    }
}

fn parse_f64(key: &str, value: &str) -> ConfigResult<f64> {
    value.parse().map_err(|e: std::num::ParseFloatError| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_usize(key: &str, value: &str) -> ConfigResult<usize> {
    value.parse().map_err(|e: std::num::ParseIntError| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_u64(key: &str, value: &str) -> ConfigResult<u64> {
    value.parse().map_err(|e: std::num::ParseIntError| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

config_keys! {
    seed: parse_u64,
    env: parse_string,
    task: parse_string,
    action_repeat: parse_usize,
    latent_dim: parse_usize,
    hidden: parse_usize,
    num_heads: parse_usize,
    linear_dynamics: parse_bool,
    c1: parse_f64,
    c2: parse_f64,
    c3: parse_f64,
    gamma: parse_f64,
    rollout_horizon: parse_usize,
    step_weight_decay: parse_f64,
    batch_size: parse_usize,
    pt_lr: parse_f64,
    ft_lr: parse_f64,
    intrinsic_lr: parse_f64,
    target_period: parse_u64,
    target_blend: parse_f64,
    updates_per_step: parse_usize,
    pt_steps: parse_u64,
    ft_steps: parse_u64,
    seed_steps: parse_u64,
    buffer_capacity: parse_usize,
    mcl_enabled: parse_bool,
    alpha: parse_f64,
    sigma_explore: parse_f64,
    snapshot_interval: parse_u64,
    explorer: parse_string,
    apt_k: parse_usize,
    skill_dim: parse_usize,
    skill_resample: parse_u64,
    disagreement_members: parse_usize,
    plan_iterations: parse_usize,
    plan_horizon: parse_usize,
    plan_population: parse_usize,
    plan_elites: parse_usize,
    plan_policy_fraction: parse_f64,
    plan_temperature: parse_f64,
    plan_sigma_min: parse_f64,
    plan_init_sigma: parse_f64,
    plan_jitter: parse_f64,
    reuse_encoder: parse_bool,
    reuse_dynamics: parse_bool,
    reuse_reward: parse_bool,
    reuse_critic: parse_bool,
    reuse_actor: parse_bool,
    metrics_every: parse_u64,
    log_wall_time: parse_bool,
    eval_episodes: parse_usize,
}

impl Config {
    /// Parse a config file: `key = value` lines, `#` comments, blank lines.
    pub fn from_file(path: &Path) -> ConfigResult<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config = Config::default();
        config.apply_text(&text)?;
        Ok(config)
    }

    pub fn apply_text(&mut self, text: &str) -> ConfigResult<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::MalformedLine { line: i + 1, text: raw.to_string() });
            };
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Heads actually trained: disabling the ensemble machinery collapses
    /// to a single head.
    pub fn effective_num_heads(&self) -> usize {
        if self.mcl_enabled {
            self.num_heads
        } else {
            1
        }
    }

    /// Diversity strength actually applied.
    pub fn effective_alpha(&self) -> f64 {
        if self.mcl_enabled {
            self.alpha
        } else {
            0.0
        }
    }

    /// Snapshot interval with the automatic pt_steps / num_heads schedule.
    pub fn effective_snapshot_interval(&self) -> u64 {
        if self.snapshot_interval > 0 {
            return self.snapshot_interval;
        }
        (self.pt_steps / self.effective_num_heads() as u64).max(1)
    }

    pub fn planner(&self) -> crate::planner::PlannerConfig {
        crate::planner::PlannerConfig {
            iterations: self.plan_iterations,
            horizon: self.plan_horizon,
            population: self.plan_population,
            elites: self.plan_elites,
            policy_fraction: self.plan_policy_fraction,
            temperature: self.plan_temperature,
            gamma: self.gamma,
            sigma_min: self.plan_sigma_min,
            init_sigma: self.plan_init_sigma,
            policy_jitter: self.plan_jitter,
        }
    }

    pub fn loss_weights(&self) -> crate::model::LossWeights {
        crate::model::LossWeights {
            c1: self.c1,
            c2: self.c2,
            c3: self.c3,
            gamma: self.gamma,
            rollout_horizon: self.rollout_horizon,
            step_weight_decay: self.step_weight_decay,
        }
    }
}
