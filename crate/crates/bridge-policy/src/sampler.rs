//! Closed-form reverse sampler and the M-step inference loop, plus the
//! Gaussian-noise-prior baseline used for A/B comparisons.
//!
//! One reverse step from time `s` down to `t` is the affine update
//!
//! ```text
//! a_t = coeff_state · a_s + coeff_obs · a_T + coeff_pred · a_θ(a_s, a_T, s) + δ · ε
//! ```
//!
//! with every scalar delegated to [`NoiseSchedule::solver_coeffs`], so there
//! is exactly one implementation of the coefficient algebra. The chain starts
//! at the observation latent `a_T` and walks a strictly decreasing time grid
//! ending at 0; the final step draws no noise, so a perfect data prediction is
//! returned exactly.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::schedule::{NoiseSchedule, ScheduleError};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("state shapes disagree: {0}")]
    ShapeMismatch(String),
    #[error("time grid invalid: {0}")]
    BadGrid(String),
    #[error("stochastic_last_step = true is not allowed; the final step must be noise-free")]
    StochasticLastStep,
    #[error("noise multiplier must be finite and nonnegative, got {0}")]
    BadNoiseMultiplier(f64),
    #[error("denoiser returned a non-finite value at step {step} (s = {s})")]
    NonFiniteDenoiser { step: usize, s: f64 },
}

/// Data-prediction model boundary: maps a noisy state, the terminal
/// observation latent and a time to a clean-action estimate.
pub trait Denoiser {
    fn predict(&self, state: &Array2<f64>, terminal: &Array2<f64>, t: f64) -> Array2<f64>;
}

impl<F> Denoiser for F
where
    F: Fn(&Array2<f64>, &Array2<f64>, f64) -> Array2<f64>,
{
    fn predict(&self, state: &Array2<f64>, terminal: &Array2<f64>, t: f64) -> Array2<f64> {
        self(state, terminal, t)
    }
}

/// Counts how often an inner denoiser is queried; used by NFE checks.
pub struct CountingDenoiser<'a, D: ?Sized> {
    inner: &'a D,
    calls: std::cell::Cell<usize>,
}

impl<'a, D: Denoiser + ?Sized> CountingDenoiser<'a, D> {
    pub fn new(inner: &'a D) -> Self {
        Self {
            inner,
            calls: std::cell::Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<D: Denoiser + ?Sized> Denoiser for CountingDenoiser<'_, D> {
    fn predict(&self, state: &Array2<f64>, terminal: &Array2<f64>, t: f64) -> Array2<f64> {
        self.calls.set(self.calls.get() + 1);
        self.inner.predict(state, terminal, t)
    }
}

/// Reverse-time grid and noise settings for one sampling run.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    /// Number of reverse steps M (= number of denoiser evaluations).
    pub n_steps: usize,
    /// Optional custom grid t_0 = T > t_1 > ... > t_M = 0; uniform if absent.
    pub time_grid: Option<Vec<f64>>,
    /// Scales the injected noise; 1.0 uses the printed δ as is.
    pub noise_multiplier: f64,
    /// Kept for completeness; must stay `false` (final step is deterministic).
    pub stochastic_last_step: bool,
}

impl SamplerConfig {
    pub fn new(n_steps: usize) -> Self {
        Self {
            n_steps,
            time_grid: None,
            noise_multiplier: 1.0,
            stochastic_last_step: false,
        }
    }

    /// Resolved decreasing grid from T down to 0 with M+1 points.
    pub fn resolve_grid(&self, t_end: f64) -> Result<Vec<f64>, SamplerError> {
        if self.stochastic_last_step {
            return Err(SamplerError::StochasticLastStep);
        }
        if !self.noise_multiplier.is_finite() || self.noise_multiplier < 0.0 {
            return Err(SamplerError::BadNoiseMultiplier(self.noise_multiplier));
        }
        if self.n_steps == 0 {
            return Err(SamplerError::BadGrid("need at least one step".into()));
        }
        match &self.time_grid {
            None => {
                let m = self.n_steps;
                Ok((0..=m)
                    .map(|i| t_end * (m - i) as f64 / m as f64)
                    .collect())
            }
            Some(grid) => {
                if grid.len() != self.n_steps + 1 {
                    return Err(SamplerError::BadGrid(format!(
                        "grid has {} points, expected M+1 = {}",
                        grid.len(),
                        self.n_steps + 1
                    )));
                }
                if grid[0] != t_end || *grid.last().unwrap() != 0.0 {
                    return Err(SamplerError::BadGrid(format!(
                        "grid must run from T = {t_end} to 0, got [{}, {}]",
                        grid[0],
                        grid.last().unwrap()
                    )));
                }
                if grid.windows(2).any(|w| w[1] >= w[0]) {
                    return Err(SamplerError::BadGrid("grid must strictly decrease".into()));
                }
                Ok(grid.clone())
            }
        }
    }
}

fn check_same_shape(
    a: &Array2<f64>,
    b: &Array2<f64>,
    what: &str,
) -> Result<(), SamplerError> {
    if a.shape() != b.shape() {
        return Err(SamplerError::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// One reverse update from `s` down to `t`.
///
/// `eps` is a standard-normal array or `None` for the deterministic update.
/// `t = s` is the degenerate identity (used by tests only) and returns `a_s`.
pub fn reverse_step(
    a_s: &Array2<f64>,
    terminal: &Array2<f64>,
    a_pred: &Array2<f64>,
    schedule: &NoiseSchedule,
    s: f64,
    t: f64,
    eps: Option<&Array2<f64>>,
) -> Result<Array2<f64>, SamplerError> {
    check_same_shape(a_s, terminal, "state vs terminal")?;
    check_same_shape(a_s, a_pred, "state vs prediction")?;
    if let Some(e) = eps {
        check_same_shape(a_s, e, "state vs noise")?;
    }
    if t == s {
        return Ok(a_s.clone());
    }
    let c = schedule.solver_coeffs(s, t)?;
    let delta = c.delta_sq.sqrt();
    let mut out = a_s * c.coeff_state + terminal * c.coeff_obs + a_pred * c.coeff_pred;
    if let Some(e) = eps {
        out += &(e * delta);
    }
    Ok(out)
}

/// Full reverse chain: states at every grid time, `trace[0] = a_T`.
pub struct ChainTrace {
    pub times: Vec<f64>,
    pub states: Vec<Array2<f64>>,
}

impl ChainTrace {
    pub fn final_state(&self) -> &Array2<f64> {
        self.states.last().expect("chain has at least the start state")
    }
}

fn run_chain<D: Denoiser + ?Sized>(
    start: Array2<f64>,
    terminal: &Array2<f64>,
    denoiser: &D,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ChainTrace, SamplerError> {
    let grid = config.resolve_grid(schedule.t_end())?;
    let m = config.n_steps;
    let mut state = start;
    let mut times = vec![grid[0]];
    let mut states = vec![state.clone()];
    for i in 1..=m {
        let s = grid[i - 1];
        let t = grid[i];
        let pred = denoiser.predict(&state, terminal, s);
        if pred.iter().any(|v| !v.is_finite()) {
            return Err(SamplerError::NonFiniteDenoiser { step: i, s });
        }
        let eps = if i < m {
            let mut e = Array2::zeros(state.raw_dim());
            for v in e.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = z * config.noise_multiplier;
            }
            Some(e)
        } else {
            None
        };
        state = reverse_step(&state, terminal, &pred, schedule, s, t, eps.as_ref())?;
        times.push(t);
        states.push(state.clone());
    }
    Ok(ChainTrace { times, states })
}

/// Iterates the reverse solver from `a_T = z_obs` down the time grid; the
/// final step uses no noise. Returns the full trace for inspection.
pub fn sample_chain_trace<D: Denoiser + ?Sized>(
    terminal: &Array2<f64>,
    denoiser: &D,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    rng_seed: u64,
) -> Result<ChainTrace, SamplerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    run_chain(
        terminal.clone(),
        terminal,
        denoiser,
        schedule,
        config,
        &mut rng,
    )
}

/// As [`sample_chain_trace`], returning only the final action chunk.
pub fn sample_chain<D: Denoiser + ?Sized>(
    terminal: &Array2<f64>,
    denoiser: &D,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    rng_seed: u64,
) -> Result<Array2<f64>, SamplerError> {
    Ok(sample_chain_trace(terminal, denoiser, schedule, config, rng_seed)?
        .states
        .pop()
        .expect("chain is nonempty"))
}

/// Baseline for A/B comparisons: the identical loop, but initialized at
/// `a_T ~ N(0, λ² I)` which is also fed to the solver and the denoiser as the
/// conditioning endpoint. Mirrors a policy whose prior carries no
/// observation information.
pub fn sample_noise_prior_baseline<D: Denoiser + ?Sized>(
    shape: (usize, usize),
    denoiser: &D,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    rng_seed: u64,
) -> Result<Array2<f64>, SamplerError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let lambda = schedule.lambda();
    let mut terminal = Array2::zeros(shape);
    for v in terminal.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v = lambda * z;
    }
    let trace = run_chain(
        terminal.clone(),
        &terminal,
        denoiser,
        schedule,
        config,
        &mut rng,
    )?;
    Ok(trace.states.last().expect("chain is nonempty").clone())
}
