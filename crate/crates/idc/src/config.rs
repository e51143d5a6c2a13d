//! Run configuration. Loadable from a TOML file; every field has a default
//! so partial files work. Defaults reproduce the standard setup: 50 m
//! junction, 3.75 m lanes, two-phase signal, dense traffic.

use crate::dynamics::{ActionBounds, VehicleParams};
use crate::map::IntersectionMap;
use crate::pathgen::PathConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse config file: {0}")]
    Parse(#[from] toml::de::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SignalConfig {
    /// Green duration for the north-south phase [s].
    pub ns_green: f64,
    /// Green duration for the east-west phase [s].
    pub ew_green: f64,
}

impl Default for SignalConfig {
    fn default() -> Self {
        SignalConfig { ns_green: 30.0, ew_green: 30.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrafficConfig {
    /// Demand per entrance lane [veh/h].
    pub flow: f64,
    /// Cruise speed of straight-going scripted vehicles [m/s].
    pub cruise_straight: f64,
    /// Cruise speed of turning scripted vehicles [m/s].
    pub cruise_turn: f64,
    /// Relative cruise-speed jitter drawn per vehicle.
    pub jitter: f64,
    /// Traffic pre-roll before the episode starts [s].
    pub warmup: f64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        TrafficConfig {
            flow: 800.0,
            cruise_straight: 7.0,
            cruise_turn: 5.0,
            jitter: 0.1,
            warmup: 40.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Prediction horizon T (steps).
    pub horizon: usize,
    /// States per gradient batch.
    pub batch: usize,
    /// Total training iterations.
    pub total_iters: usize,
    /// Policy learning rate, linearly decayed start -> end.
    pub actor_lr_start: f64,
    pub actor_lr_end: f64,
    /// Value learning rate, linearly decayed start -> end.
    pub critic_lr_start: f64,
    pub critic_lr_end: f64,
    /// Penalty amplifier c.
    pub penalty_amplifier: f64,
    /// Iterations between penalty amplifications.
    pub penalty_interval: usize,
    /// Replay buffer capacity.
    pub buffer_capacity: usize,
    /// Environment steps collected per training iteration.
    pub steps_per_iter: usize,
    /// Environment steps collected before the first update.
    pub warmup_steps: usize,
    /// Exploration noise std as a fraction of each action range.
    pub explore_std: f64,
    /// Iterations between evaluations of the training losses.
    pub eval_every: usize,
    /// Maximum episode length during sampling (steps).
    pub episode_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            horizon: 25,
            batch: 1024,
            total_iters: 200_000,
            actor_lr_start: 3e-4,
            actor_lr_end: 1e-5,
            critic_lr_start: 8e-4,
            critic_lr_end: 1e-5,
            penalty_amplifier: 1.1,
            penalty_interval: 10_000,
            buffer_capacity: 500_000,
            steps_per_iter: 4,
            warmup_steps: 2_000,
            explore_std: 0.05,
            eval_every: 100,
            episode_cap: 2_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ShieldConfig {
    /// Number of predicted steps that must stay feasible.
    pub n_ss: usize,
    /// Sequential-linearization iterations before falling back to a grid.
    pub max_linearizations: usize,
    /// Coarse fallback grid resolution per action dimension.
    pub grid: usize,
    /// Zoom-refinement rounds of the fallback grid.
    pub refine_rounds: usize,
}

impl Default for ShieldConfig {
    fn default() -> Self {
        ShieldConfig { n_ss: 5, max_linearizations: 5, grid: 41, refine_rounds: 3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    /// Initial penalty factor of the shooting solver.
    pub rho_init: f64,
    /// Per-loop penalty multiplier.
    pub rho_mult: f64,
    /// Maximum penalty loops.
    pub max_loops: usize,
    /// Gradient steps per penalty loop.
    pub steps_per_loop: usize,
    /// Feasibility tolerance on constraint violation.
    pub feas_tol: f64,
    /// Stop when the gradient norm falls below this.
    pub grad_tol: f64,
    /// Stop when a line-searched step improves less than this.
    pub step_tol: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            rho_init: 10.0,
            rho_mult: 10.0,
            max_loops: 6,
            steps_per_loop: 400,
            feas_tol: 1e-3,
            grad_tol: 1e-5,
            step_tol: 1e-8,
        }
    }
}

/// Top-level configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub map: IntersectionMap,
    pub signal: SignalConfig,
    pub traffic: TrafficConfig,
    pub paths: PathConfig,
    pub vehicle: VehicleParams,
    pub bounds: ActionBounds,
    pub train: TrainConfig,
    pub shield: ShieldConfig,
    pub mpc: MpcConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }
}
