//! Run configuration: plain-text TOML with sections, strict about unknown
//! keys, defaults matching the reference operating point.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::Task;
use crate::net::model::ModelConfig;
use crate::sampler::SamplerConfig;
use crate::schedule::{NoiseSchedule, ScheduleError, ThetaSchedule};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("invalid config value: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub theta: f64,
    /// Optional piecewise-linear rate table overriding the constant rate.
    pub theta_table: Option<Vec<[f64; 2]>>,
    pub lambda: f64,
    pub gamma: f64,
    pub t_end: f64,
    pub n_train_steps: u32,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            theta: 2.0,
            theta_table: None,
            lambda: 1.0,
            gamma: 1e7,
            t_end: 1.0,
            n_train_steps: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub horizon: usize,
    pub action_dim: usize,
    pub state_dim: usize,
    pub obs_steps: usize,
    pub token_dim: usize,
    pub state_hidden: usize,
    pub point_hidden: [usize; 2],
    pub denoiser_hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub tau: f64,
    pub detach_obs_in_db: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            horizon: m.horizon,
            action_dim: m.action_dim,
            state_dim: m.state_dim,
            obs_steps: m.obs_steps,
            token_dim: m.token_dim,
            state_hidden: m.state_hidden,
            point_hidden: m.point_hidden,
            denoiser_hidden: m.denoiser_hidden,
            time_embed_dim: m.time_embed_dim,
            tau: m.tau,
            detach_obs_in_db: m.detach_obs_in_db,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Alignment-loss weight α.
    pub alpha: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Evaluate on fresh seeds every this many epochs (0 disables).
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 1e-4,
            weight_decay: 1e-6,
            alpha: 0.3,
            epochs: 300,
            seed: 0,
            eval_every: 20,
            eval_episodes: 20,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    /// Number of reverse steps M (denoiser evaluations per inference).
    pub n_steps: usize,
    pub noise_multiplier: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            n_steps: 10,
            noise_multiplier: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    /// Point budget after farthest point sampling.
    pub n_points: usize,
    /// Raw points sampled before downsampling.
    pub n_points_raw: usize,
    pub episode_cap: u32,
    /// Executable prefix T_a of each predicted chunk.
    pub action_steps: usize,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            n_points: 512,
            n_points_raw: 1024,
            episode_cap: 100,
            action_steps: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: Task,
    pub schedule: ScheduleSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub sampler: SamplerSection,
    pub env: EnvSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: Task::Reach,
            schedule: ScheduleSection::default(),
            model: ModelSection::default(),
            training: TrainingSection::default(),
            sampler: SamplerSection::default(),
            env: EnvSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: RunConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Re-validates every owning module's range constraints.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.noise_schedule()?;
        let model = self.model_config();
        model
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.sampler_config()
            .resolve_grid(self.schedule.t_end)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let t = &self.training;
        if t.batch_size == 0 || t.epochs == 0 || t.eval_episodes == 0 {
            return Err(ConfigError::Invalid(
                "batch_size, epochs and eval_episodes must be positive".into(),
            ));
        }
        if !(t.learning_rate > 0.0) || t.weight_decay < 0.0 {
            return Err(ConfigError::Invalid(
                "learning_rate must be positive and weight_decay nonnegative".into(),
            ));
        }
        if !(t.alpha >= 0.0) || !t.alpha.is_finite() {
            return Err(ConfigError::Invalid("alpha must be finite and >= 0".into()));
        }
        let e = &self.env;
        if e.n_points == 0 || e.n_points_raw < e.n_points {
            return Err(ConfigError::Invalid(
                "need n_points_raw >= n_points >= 1".into(),
            ));
        }
        if e.episode_cap == 0 || e.action_steps == 0 || e.action_steps > self.model.horizon {
            return Err(ConfigError::Invalid(
                "need 1 <= action_steps <= horizon and a positive episode cap".into(),
            ));
        }
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule, ScheduleError> {
        let s = &self.schedule;
        let theta = match &s.theta_table {
            Some(knots) => {
                ThetaSchedule::Tabulated(knots.iter().map(|&[z, v]| (z, v)).collect())
            }
            None => ThetaSchedule::Constant(s.theta),
        };
        NoiseSchedule::new(theta, s.lambda, s.gamma, s.t_end, s.n_train_steps)
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            horizon: m.horizon,
            action_dim: m.action_dim,
            state_dim: m.state_dim,
            obs_steps: m.obs_steps,
            n_points: self.env.n_points,
            token_dim: m.token_dim,
            state_hidden: m.state_hidden,
            point_hidden: m.point_hidden,
            denoiser_hidden: m.denoiser_hidden.clone(),
            time_embed_dim: m.time_embed_dim,
            tau: m.tau,
            detach_obs_in_db: m.detach_obs_in_db,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            n_steps: self.sampler.n_steps,
            time_grid: None,
            noise_multiplier: self.sampler.noise_multiplier,
            stochastic_last_step: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = "task = \"reach\"\n[training]\nbatch_size = 8\nbogus_key = 1\n";
        let err = toml::from_str::<RunConfig>(text).unwrap_err();
        assert!(err.to_string().contains("bogus_key"));
    }

    #[test]
    fn bad_ranges_rejected() {
        let mut cfg = RunConfig::default();
        cfg.schedule.lambda = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.env.action_steps = 100;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.training.alpha = -0.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn roundtrip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn tabulated_schedule_accepted() {
        let text = "task = \"push\"\n[schedule]\ntheta_table = [[0.0, 1.0], [1.0, 3.0]]\n";
        let cfg: RunConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        let s = cfg.noise_schedule().unwrap();
        assert!((s.theta_bar(0.0, 1.0).unwrap() - 2.0).abs() < 1e-6);
    }
}
