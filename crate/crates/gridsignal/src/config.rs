//! Run configuration: a single TOML file of key = value sections with every
//! tunable constant overridable. Missing keys fall back to the paper-scale
//! defaults; `desk.cfg` ships scaled-down horizons and iteration counts.

use crate::demand::SyntheticParams;
use crate::eval::EvalParams;
use crate::obs::{ObsParams, RewardWeights};
use crate::sim::SimParams;
use crate::train::{AdvantageMode, CreditMode, OptimizerKind, TrainerParams};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Shared run-level knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunParams {
    pub seed: u64,
    pub gamma: f64,
    pub optimizer: OptimizerKind,
    /// Second-moment decay for the adaptive optimizer.
    pub adam_beta2: f64,
    pub advantage: AdvantageMode,
    pub credit: CreditMode,
    /// Entropy-bonus coefficient for phase-policy updates.
    pub entropy_bonus: f64,
    /// 0 disables the clipped reuse epoch; a positive value (e.g. 0.2)
    /// enables it at that clip.
    pub ppo_clip: f64,
    /// Checkpoint every N iterations (0 = final only).
    pub checkpoint_interval: usize,
}

impl Default for RunParams {
    fn default() -> Self {
        RunParams {
            seed: 1,
            gamma: 0.99,
            optimizer: OptimizerKind::Sgd,
            adam_beta2: 0.999,
            advantage: AdvantageMode::Batch,
            credit: CreditMode::Instant,
            entropy_bonus: 0.0,
            ppo_clip: 0.0,
            checkpoint_interval: 0,
        }
    }
}

/// Policy architectures (hidden layer widths).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyParams {
    pub tl_hidden: Vec<usize>,
    pub wce_hidden: Vec<usize>,
}

impl Default for PolicyParams {
    fn default() -> Self {
        PolicyParams {
            tl_hidden: vec![64, 64],
            wce_hidden: vec![64],
        }
    }
}

/// The three training stages. Each section falls back to its own
/// paper-scale defaults when omitted.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSections {
    #[serde(default = "default_baseline_params")]
    pub baseline: TrainerParams,
    #[serde(default = "default_wce_params")]
    pub wce: TrainerParams,
    #[serde(default = "default_drmarl_params")]
    pub drmarl: TrainerParams,
}

fn default_baseline_params() -> TrainerParams {
    TrainerParams {
        horizon: 900,
        rollouts_per_iter: 10,
        iterations: 3000,
        learning_rate: 0.002,
        batch_size: 4096,
        window: 600,
        warmup: 0,
        buffer_capacity: 0,
    }
}

fn default_wce_params() -> TrainerParams {
    TrainerParams {
        horizon: 9600,
        rollouts_per_iter: 8,
        iterations: 50,
        learning_rate: 0.01,
        batch_size: 64,
        window: 600,
        warmup: 300,
        buffer_capacity: 0,
    }
}

fn default_drmarl_params() -> TrainerParams {
    TrainerParams {
        horizon: 9600,
        rollouts_per_iter: 2,
        iterations: 400,
        learning_rate: 0.001,
        batch_size: 4096,
        window: 600,
        warmup: 300,
        buffer_capacity: 0,
    }
}

impl Default for TrainSections {
    fn default() -> Self {
        TrainSections {
            baseline: default_baseline_params(),
            wce: default_wce_params(),
            drmarl: default_drmarl_params(),
        }
    }
}

/// Full configuration tree. Defaults reproduce the paper-scale protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub sim: SimParams,
    pub obs: ObsParams,
    pub reward: RewardWeights,
    pub demand: SyntheticParams,
    pub policy: PolicyParams,
    pub run: RunParams,
    pub train: TrainSections,
    pub eval: EvalParams,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            sim: SimParams::default(),
            obs: ObsParams::default(),
            reward: RewardWeights::default(),
            demand: SyntheticParams::default(),
            policy: PolicyParams::default(),
            run: RunParams::default(),
            train: TrainSections::default(),
            eval: EvalParams::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let content = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: Config = toml::from_str(&content).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |p: &TrainerParams, windowed: bool, name: &str| {
            p.validate(windowed)
                .map_err(|e| ConfigError::Invalid(format!("train.{name}: {e}")))
        };
        check(&self.train.baseline, false, "baseline")?;
        check(&self.train.wce, true, "wce")?;
        check(&self.train.drmarl, true, "drmarl")?;
        if self.run.gamma <= 0.0 || self.run.gamma > 1.0 {
            return Err(ConfigError::Invalid(format!(
                "run.gamma must be in (0, 1], got {}",
                self.run.gamma
            )));
        }
        if self.eval.rollouts == 0 || self.eval.horizon == 0 {
            return Err(ConfigError::Invalid(
                "eval.rollouts and eval.horizon must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Apply a horizon/iteration scale factor to the three training stages
    /// (windowed horizons round up to whole windows).
    pub fn scaled(&self, factor: f64) -> Config {
        let mut out = self.clone();
        out.train.baseline = self.train.baseline.scaled(factor, false);
        out.train.wce = self.train.wce.scaled(factor, true);
        out.train.drmarl = self.train.drmarl.scaled(factor, true);
        out
    }

    /// Training context for a stage, honoring run-level knobs.
    pub fn train_context(&self, seed: u64) -> crate::train::TrainContext {
        crate::train::TrainContext {
            seed,
            gamma: self.run.gamma,
            reward_weights: self.reward,
            obs_params: self.obs.clone(),
            sim_params: self.sim.clone(),
            optimizer: self.run.optimizer,
            adam_beta2: self.run.adam_beta2,
            advantage: self.run.advantage,
            credit: self.run.credit,
            entropy_bonus: self.run.entropy_bonus,
            ppo_clip: (self.run.ppo_clip > 0.0).then_some(self.run.ppo_clip),
        }
    }

    pub fn eval_context(&self) -> crate::eval::EvalContext {
        crate::eval::EvalContext {
            sim_params: self.sim.clone(),
            obs_params: self.obs.clone(),
            reward_weights: self.reward,
        }
    }
}
