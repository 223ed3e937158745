//! Training loop, evaluation rollouts and the metrics stream.
//!
//! Batches are drawn uniformly over (episode, step) pairs; each sample pairs
//! the observation at a step with the next `horizon` expert actions (the last
//! action repeats past the episode end). Evaluation replays the policy in
//! the environment with receding-horizon execution on fresh seeds and
//! reports the success rate.

use std::io::Write;
use std::time::Instant;

use ndarray::Array2;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::RunConfig;
use crate::envs::dataset::{Dataset, DatasetError};
use crate::envs::{env_step, render_point_cloud, reset, EnvError, Task};
use crate::net::AdamW;
use crate::policy::{train_step, Observation, Policy, PolicyError, PriorMode, TrainBatch};
use crate::sampler::SamplerConfig;
use crate::schedule::{NoiseSchedule, ScheduleError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("metrics stream: {0}")]
    Metrics(#[from] std::io::Error),
    #[error("dataset is empty; cannot train")]
    EmptyDataset,
}

/// One machine-readable record per epoch, appended to a line-delimited log.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_db: f64,
    pub l_align: f64,
    pub l_total: f64,
    pub eval_success_rate: Option<f64>,
    pub wall_time: f64,
}

/// Training summary: per-epoch records plus the protocol metric (mean of the
/// five highest evaluation success rates).
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub top5_mean_success: Option<f64>,
}

/// Uniform (episode, step) sample turned into one training pair.
fn assemble_sample(ds: &Dataset, policy: &Policy, episode: usize, step: usize) -> (Observation, Array2<f64>) {
    let m = &policy.model;
    let range = ds.episode_range(episode);
    let row = range.start + step;
    let last = range.end - 1;

    let mut hist = Array2::zeros((m.obs_steps, m.state_dim));
    for k in 0..m.obs_steps {
        // oldest first; clamp history before the episode start
        let offset = (m.obs_steps - 1 - k) as isize;
        let src = ((row as isize - offset).max(range.start as isize)) as usize;
        for j in 0..m.state_dim {
            hist[(k, j)] = ds.states[(src, j)];
        }
    }
    let cloud = Array2::from_shape_vec(
        (m.n_points, 3),
        ds.clouds.row(row).iter().copied().collect(),
    )
    .expect("cloud row length");

    let mut chunk = Array2::zeros((m.horizon, m.action_dim));
    for h in 0..m.horizon {
        let src = (row + h).min(last);
        let mut a = [0.0; 2];
        for j in 0..m.action_dim {
            a[j] = ds.actions[(src, j)];
        }
        policy.norm.normalize_action(&mut a[..m.action_dim]);
        for j in 0..m.action_dim {
            chunk[(h, j)] = a[j];
        }
    }
    (
        Observation {
            state_history: hist,
            point_cloud: cloud,
        },
        chunk,
    )
}

fn draw_batch(ds: &Dataset, policy: &Policy, size: usize, rng: &mut ChaCha8Rng) -> TrainBatch {
    let mut observations = Vec::with_capacity(size);
    let mut actions = Vec::with_capacity(size);
    for _ in 0..size {
        let episode = rng.random_range(0..ds.n_episodes());
        let len = ds.episode_range(episode).len();
        let step = rng.random_range(0..len);
        let (obs, chunk) = assemble_sample(ds, policy, episode, step);
        observations.push(obs);
        actions.push(chunk);
    }
    TrainBatch {
        observations,
        actions,
    }
}

/// Success rate of the policy over `n_episodes` fresh seeds.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    policy: &Policy,
    task: Task,
    schedule: &NoiseSchedule,
    sampler_cfg: &SamplerConfig,
    prior: PriorMode,
    n_episodes: usize,
    base_seed: u64,
    episode_cap: u32,
    n_points_raw: usize,
) -> Result<f64, TrainError> {
    let mut successes = 0usize;
    for ep in 0..n_episodes {
        let seed = base_seed.wrapping_add(ep as u64);
        if run_episode(
            policy,
            task,
            schedule,
            sampler_cfg,
            prior,
            seed,
            episode_cap,
            n_points_raw,
        )? {
            successes += 1;
        }
    }
    Ok(successes as f64 / n_episodes as f64)
}

#[allow(clippy::too_many_arguments)]
fn run_episode(
    policy: &Policy,
    task: Task,
    schedule: &NoiseSchedule,
    sampler_cfg: &SamplerConfig,
    prior: PriorMode,
    seed: u64,
    episode_cap: u32,
    n_points_raw: usize,
) -> Result<bool, TrainError> {
    let m = &policy.model;
    let mut state = reset(task, seed);
    let mut history: Vec<[f64; 2]> = vec![state.agent_pos; m.obs_steps];
    let mut steps = 0u32;
    let mut replan = 0u64;
    while steps < episode_cap {
        let cloud_seed = seed ^ (u64::from(steps).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let cloud = render_point_cloud(&state, n_points_raw, m.n_points, cloud_seed)?;
        let mut hist = Array2::zeros((m.obs_steps, m.state_dim));
        for (k, pos) in history.iter().enumerate() {
            hist[(k, 0)] = pos[0];
            hist[(k, 1)] = pos[1];
        }
        let obs = Observation {
            state_history: hist,
            point_cloud: cloud,
        };
        let infer_seed = seed
            .wrapping_mul(0x100_0000_01B3)
            .wrapping_add(replan);
        let actions = match prior {
            PriorMode::Observation => {
                policy.infer_actions(&obs, schedule, sampler_cfg, infer_seed)?
            }
            PriorMode::Noise => {
                policy.infer_actions_noise_prior(schedule, sampler_cfg, infer_seed)?
            }
        };
        replan += 1;
        for row in actions.rows() {
            let (next, success) = env_step(task, &state, [row[0], row[1]]);
            state = next;
            history.remove(0);
            history.push(state.agent_pos);
            steps += 1;
            if success {
                return Ok(true);
            }
            if steps >= episode_cap {
                return Ok(false);
            }
        }
    }
    Ok(false)
}

/// Full training run. Emits one record per epoch to `metrics` (when given)
/// and returns the records plus the top-5 evaluation summary.
pub fn train(
    config: &RunConfig,
    dataset: &Dataset,
    prior: PriorMode,
    mut metrics: Option<&mut dyn Write>,
) -> Result<(Policy, TrainOutcome), TrainError> {
    if dataset.n_episodes() == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let schedule = config.noise_schedule()?;
    let sampler_cfg = config.sampler_config();
    let model = config.model_config();
    let tcfg = &config.training;
    let mut policy = Policy::init(
        model,
        dataset.manifest.normalization.clone(),
        config.env.action_steps,
        tcfg.seed,
    );
    let mut opt = AdamW::new(tcfg.learning_rate, tcfg.weight_decay);
    let steps_per_epoch = (dataset.manifest.total_steps / tcfg.batch_size).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x7261_696E);
    let start = Instant::now();
    let mut records = Vec::with_capacity(tcfg.epochs);
    let mut evals = Vec::new();

    for epoch in 0..tcfg.epochs {
        let mut sums = (0.0, 0.0, 0.0);
        for step in 0..steps_per_epoch {
            let batch = draw_batch(dataset, &policy, tcfg.batch_size, &mut rng);
            let step_seed = tcfg
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add((epoch * steps_per_epoch + step) as u64);
            let losses = train_step(
                &mut policy,
                &mut opt,
                &batch,
                &schedule,
                tcfg.alpha,
                prior,
                step_seed,
            )?;
            sums.0 += losses.l_db;
            sums.1 += losses.l_align;
            sums.2 += losses.l_total;
        }
        let inv = 1.0 / steps_per_epoch as f64;
        let eval_success_rate = if tcfg.eval_every > 0 && (epoch + 1) % tcfg.eval_every == 0 {
            let rate = evaluate(
                &policy,
                config.task,
                &schedule,
                &sampler_cfg,
                prior,
                tcfg.eval_episodes,
                tcfg.seed ^ 0x0E7A_1000 ^ ((epoch as u64) << 20),
                config.env.episode_cap,
                config.env.n_points_raw,
            )?;
            evals.push(rate);
            Some(rate)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            l_db: sums.0 * inv,
            l_align: sums.1 * inv,
            l_total: sums.2 * inv,
            eval_success_rate,
            wall_time: start.elapsed().as_secs_f64(),
        };
        if let Some(w) = metrics.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record).map_err(std::io::Error::other)?;
            writeln!(w)?;
        }
        records.push(record);
    }

    let top5_mean_success = if evals.is_empty() {
        None
    } else {
        let mut sorted = evals.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite rates"));
        let k = sorted.len().min(5);
        Some(sorted[..k].iter().sum::<f64>() / k as f64)
    };
    Ok((
        policy,
        TrainOutcome {
            records,
            top5_mean_success,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::dataset::generate_dataset;

    fn small_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.env.n_points = 16;
        cfg.env.n_points_raw = 64;
        cfg.model.state_hidden = 8;
        cfg.model.point_hidden = [8, 8];
        cfg.model.denoiser_hidden = vec![16];
        cfg.model.token_dim = 4;
        cfg.training.batch_size = 16;
        cfg.training.epochs = 2;
        cfg.training.eval_every = 0;
        cfg
    }

    #[test]
    fn chunk_assembly_pads_with_last_action() {
        let ds = generate_dataset(Task::Reach, 2, 3, 16, 64).unwrap();
        let cfg = small_config();
        let policy = Policy::init(
            cfg.model_config(),
            ds.manifest.normalization.clone(),
            4,
            0,
        );
        let len = ds.episode_range(0).len();
        let (_, chunk) = assemble_sample(&ds, &policy, 0, len - 1);
        // every row equals the final action of the episode
        for h in 1..chunk.nrows() {
            assert_eq!(chunk.row(h), chunk.row(0));
        }
        // history at step 0 repeats the first state
        let (obs, _) = assemble_sample(&ds, &policy, 0, 0);
        assert_eq!(obs.state_history.row(0), obs.state_history.row(1));
    }

    #[test]
    fn train_smoke_loss_finite_and_decreasing_trend() {
        let ds = generate_dataset(Task::Reach, 4, 7, 16, 64).unwrap();
        let mut cfg = small_config();
        cfg.training.epochs = 8;
        let (_, outcome) = train(&cfg, &ds, PriorMode::Observation, None).unwrap();
        assert_eq!(outcome.records.len(), 8);
        assert!(outcome.records.iter().all(|r| r.l_total.is_finite()));
        let first = outcome.records.first().unwrap().l_db;
        let last = outcome.records.last().unwrap().l_db;
        assert!(last < first, "no downward trend: {first} -> {last}");
    }

    #[test]
    fn metrics_stream_matches_records() {
        let ds = generate_dataset(Task::Reach, 2, 9, 16, 64).unwrap();
        let cfg = small_config();
        let mut buf = Vec::new();
        let (_, outcome) = train(&cfg, &ds, PriorMode::Observation, Some(&mut buf)).unwrap();
        let lines: Vec<EpochRecord> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), outcome.records.len());
        for (a, b) in lines.iter().zip(&outcome.records) {
            assert_eq!(a.epoch, b.epoch);
            assert_eq!(a.l_total, b.l_total);
        }
    }

    #[test]
    fn evaluation_runs_with_fresh_policy() {
        let cfg = small_config();
        let ds = generate_dataset(Task::Reach, 1, 5, 16, 64).unwrap();
        let policy = Policy::init(
            cfg.model_config(),
            ds.manifest.normalization.clone(),
            cfg.env.action_steps,
            1,
        );
        let schedule = cfg.noise_schedule().unwrap();
        let rate = evaluate(
            &policy,
            Task::Reach,
            &schedule,
            &cfg.sampler_config(),
            PriorMode::Observation,
            3,
            77,
            40,
            cfg.env.n_points_raw,
        )
        .unwrap();
        assert!((0.0..=1.0).contains(&rate));
    }
}
