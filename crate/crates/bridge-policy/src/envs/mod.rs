//! Desk-scale synthetic imitation tasks with scripted experts and synthetic
//! point clouds.
//!
//! Two planar tasks on the workspace box [-1, 1]²:
//!
//! - **Reach**: the agent moves at most `MAX_STEP` per step toward a goal;
//!   success when the agent is within `SUCCESS_RADIUS` of it.
//! - **Push**: an object is carried along with the agent whenever the two are
//!   in contact (distance < `CONTACT_RADIUS`); success when the object
//!   reaches the goal.
//!
//! Start/goal layouts are sampled inside sub-boxes sized so the scripted
//! experts finish within the episode cap from every layout.

pub mod dataset;
pub mod fps;

use ndarray::Array2;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use fps::farthest_point_sample;

/// Displacement per unit action component.
pub const MAX_STEP: f64 = 0.05;
/// Agent-object distance that couples their motion in Push.
pub const CONTACT_RADIUS: f64 = 0.08;
/// Distance to goal that counts as success.
pub const SUCCESS_RADIUS: f64 = 0.05;
/// Episode cap.
pub const EPISODE_CAP: u32 = 100;
/// Marker disc radius used by the synthetic depth sensor.
pub const DISC_RADIUS: f64 = 0.06;
/// Height noise of the synthetic depth sensor.
pub const HEIGHT_SIGMA: f64 = 0.01;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unknown task {0:?}; expected \"reach\" or \"push\"")]
    UnknownTask(String),
    #[error("raw point budget {n_raw} below output budget {n_out}")]
    RawBudget { n_raw: usize, n_out: usize },
    #[error(transparent)]
    Fps(#[from] fps::FpsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Reach,
    Push,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Reach => "reach",
            Task::Push => "push",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reach" => Ok(Task::Reach),
            "push" => Ok(Task::Push),
            other => Err(EnvError::UnknownTask(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyEnvState {
    pub agent_pos: [f64; 2],
    pub object_pos: [f64; 2],
    pub goal_pos: [f64; 2],
    pub step_count: u32,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn clamp_box(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(-1.0, 1.0), p[1].clamp(-1.0, 1.0)]
}

fn uniform_in(rng: &mut ChaCha8Rng, half: f64) -> [f64; 2] {
    [
        rng.random_range(-half..half),
        rng.random_range(-half..half),
    ]
}

/// Fresh episode layout. Reach samples agent and goal in [-0.8, 0.8]² at
/// least 0.5 apart; Push keeps object and goal inside [-0.6, 0.6]² so the
/// expert's approach-then-carry path fits the episode cap.
pub fn reset(task: Task, seed: u64) -> ToyEnvState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match task {
        Task::Reach => loop {
            let agent = uniform_in(&mut rng, 0.8);
            let goal = uniform_in(&mut rng, 0.8);
            if dist(agent, goal) >= 0.5 {
                return ToyEnvState {
                    agent_pos: agent,
                    object_pos: agent,
                    goal_pos: goal,
                    step_count: 0,
                };
            }
        },
        Task::Push => loop {
            let agent = uniform_in(&mut rng, 0.8);
            let object = uniform_in(&mut rng, 0.6);
            let goal = uniform_in(&mut rng, 0.6);
            if dist(object, goal) >= 0.5 && dist(agent, object) >= 0.2 {
                return ToyEnvState {
                    agent_pos: agent,
                    object_pos: object,
                    goal_pos: goal,
                    step_count: 0,
                };
            }
        },
    }
}

/// One transition. Actions are clipped to [-1, 1]²; positions stay inside
/// the workspace box. Returns the new state and the success flag.
pub fn env_step(task: Task, state: &ToyEnvState, action: [f64; 2]) -> (ToyEnvState, bool) {
    let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
    let in_contact = dist(state.agent_pos, state.object_pos) < CONTACT_RADIUS;
    let new_agent = clamp_box([
        state.agent_pos[0] + MAX_STEP * a[0],
        state.agent_pos[1] + MAX_STEP * a[1],
    ]);
    // actual displacement after clamping, so carried objects keep their offset
    let delta = [
        new_agent[0] - state.agent_pos[0],
        new_agent[1] - state.agent_pos[1],
    ];
    let new_object = match task {
        Task::Reach => new_agent,
        Task::Push => {
            if in_contact {
                clamp_box([
                    state.object_pos[0] + delta[0],
                    state.object_pos[1] + delta[1],
                ])
            } else {
                state.object_pos
            }
        }
    };
    let next = ToyEnvState {
        agent_pos: new_agent,
        object_pos: new_object,
        goal_pos: state.goal_pos,
        step_count: state.step_count + 1,
    };
    let success = match task {
        Task::Reach => dist(next.agent_pos, next.goal_pos) < SUCCESS_RADIUS,
        Task::Push => dist(next.object_pos, next.goal_pos) < SUCCESS_RADIUS,
    };
    (next, success)
}

fn toward(from: [f64; 2], to: [f64; 2]) -> [f64; 2] {
    let d = [to[0] - from[0], to[1] - from[1]];
    let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if norm <= f64::EPSILON {
        return [0.0, 0.0];
    }
    // full speed until the last fraction of a step, then land exactly
    let scale = (norm / MAX_STEP).min(1.0) / norm;
    [d[0] * scale, d[1] * scale]
}

/// Deterministic expert. Reach: head straight for the goal. Push: move to a
/// point just behind the object on the object-goal line, then carry the
/// object toward the goal.
pub fn scripted_expert(task: Task, state: &ToyEnvState) -> [f64; 2] {
    match task {
        Task::Reach => toward(state.agent_pos, state.goal_pos),
        Task::Push => {
            if dist(state.object_pos, state.goal_pos) < SUCCESS_RADIUS {
                return [0.0, 0.0];
            }
            if dist(state.agent_pos, state.object_pos) < CONTACT_RADIUS {
                // carrying: the object tracks the agent displacement exactly
                let d = [
                    state.goal_pos[0] - state.object_pos[0],
                    state.goal_pos[1] - state.object_pos[1],
                ];
                let norm = (d[0] * d[0] + d[1] * d[1]).sqrt();
                let scale = (norm / MAX_STEP).min(1.0) / norm;
                [d[0] * scale, d[1] * scale]
            } else {
                let to_goal = [
                    state.goal_pos[0] - state.object_pos[0],
                    state.goal_pos[1] - state.object_pos[1],
                ];
                let norm = (to_goal[0] * to_goal[0] + to_goal[1] * to_goal[1]).sqrt();
                let behind = [
                    state.object_pos[0] - 0.05 * to_goal[0] / norm,
                    state.object_pos[1] - 0.05 * to_goal[1] / norm,
                ];
                toward(state.agent_pos, behind)
            }
        }
    }
}

/// Synthetic depth sensor: sample `n_raw` points on the object and goal
/// marker discs (z = 0 plane plus small height noise), then keep `n_out` of
/// them by farthest point sampling.
pub fn render_point_cloud(
    state: &ToyEnvState,
    n_raw: usize,
    n_out: usize,
    rng_seed: u64,
) -> Result<Array2<f64>, EnvError> {
    if n_raw < n_out {
        return Err(EnvError::RawBudget { n_raw, n_out });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut raw = Array2::zeros((n_raw, 3));
    let half = n_raw / 2;
    for i in 0..n_raw {
        let center = if i < half {
            state.object_pos
        } else {
            state.goal_pos
        };
        let r = DISC_RADIUS * rng.random_range(0.0f64..1.0).sqrt();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let z: f64 = StandardNormal.sample(&mut rng);
        raw[(i, 0)] = center[0] + r * phi.cos();
        raw[(i, 1)] = center[1] + r * phi.sin();
        raw[(i, 2)] = (HEIGHT_SIGMA * z).clamp(-3.0 * HEIGHT_SIGMA, 3.0 * HEIGHT_SIGMA);
    }
    let keep = farthest_point_sample(&raw, n_out, 0)?;
    let mut out = Array2::zeros((n_out, 3));
    for (row, &idx) in keep.iter().enumerate() {
        out.row_mut(row).assign(&raw.row(idx));
    }
    Ok(out)
}

/// One expert episode: per-step states, clouds and actions plus the outcome.
#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub task: Task,
    pub seed: u64,
    pub success: bool,
    /// Agent state (D_s = 2) at each decision point.
    pub states: Vec<[f64; 2]>,
    /// Point cloud observed at each decision point.
    pub clouds: Vec<Array2<f64>>,
    /// Expert action taken at each decision point.
    pub actions: Vec<[f64; 2]>,
}

/// Roll the scripted expert from a seeded reset until success or the cap.
pub fn rollout_expert(
    task: Task,
    seed: u64,
    n_raw: usize,
    n_points: usize,
    record_clouds: bool,
) -> Result<EpisodeRecord, EnvError> {
    let mut state = reset(task, seed);
    let mut rec = EpisodeRecord {
        task,
        seed,
        success: false,
        states: Vec::new(),
        clouds: Vec::new(),
        actions: Vec::new(),
    };
    for step in 0..EPISODE_CAP {
        let action = scripted_expert(task, &state);
        rec.states.push(state.agent_pos);
        if record_clouds {
            let cloud_seed = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(u64::from(step));
            rec.clouds
                .push(render_point_cloud(&state, n_raw, n_points, cloud_seed)?);
        }
        rec.actions.push(action);
        let (next, success) = env_step(task, &state, action);
        state = next;
        if success {
            rec.success = true;
            break;
        }
    }
    Ok(rec)
}
