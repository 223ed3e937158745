//! The forward process: SOC-controlled SDE simulation (the ground-truth
//! oracle), its closed-form Gaussian marginals, and training-time sampling of
//! intermediate states.
//!
//! The controlled forward SDE pulls the state toward the terminal point with
//! a time-dependent rate
//!
//! ```text
//! da_t = β_t (a_T − a_t) dt + g_t dw_t,
//! β_t  = θ_t + g_t² e^{−2θ̄_{t:T}} / (γ⁻¹ + σ̄²_{t:T})
//! ```
//!
//! Because the drift is linear, the marginal given both endpoints is Gaussian
//! with moments obtained by variation of constants. Writing
//! `h(t) = γ⁻¹ + σ̄²_{t:T}`,
//!
//! ```text
//! ∫₀ᵗ β_u du = θ̄_t + ln(h(0)/h(t))
//! mean(t)    = w₀(t) a₀ + (1 − w₀(t)) a_T,   w₀(t) = e^{−θ̄_t} h(t)/h(0)
//! var(t)     = σ̄²_t h(t)/h(0)
//! ```
//!
//! The Euler-Maruyama simulator below is the independent check of these
//! moments; `verify` runs the comparison and the acceptance suite pins it at
//! three Monte-Carlo standard errors.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::schedule::{NoiseSchedule, ScheduleError};

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("endpoint shapes differ: a0 is {a0:?}, a_terminal is {terminal:?}")]
    ShapeMismatch { a0: Vec<usize>, terminal: Vec<usize> },
    #[error("endpoints contain non-finite entries")]
    NonFinite,
    #[error("time {t} outside [0, {t_end}]")]
    TimeDomain { t: f64, t_end: f64 },
    #[error("dt = {dt} too coarse; require dt <= 1e-3 * T = {limit}")]
    CoarseStep { dt: f64, limit: f64 },
    #[error(
        "stiff drift: max |beta|*dt = {product:.4} > 0.1 for (gamma={gamma}, dt={dt}); \
         reduce dt or gamma"
    )]
    StiffDrift { gamma: f64, dt: f64, product: f64 },
    #[error("time {t} is not on the discrete training grid (n = {n})")]
    OffGrid { t: f64, n: u32 },
}

/// The two pinned endpoints of the bridge: the clean action chunk at t = 0
/// and the fused observation latent at t = T, equal in shape.
#[derive(Debug, Clone)]
pub struct BridgeEndpoints {
    a0: Array2<f64>,
    terminal: Array2<f64>,
}

impl BridgeEndpoints {
    pub fn new(a0: Array2<f64>, terminal: Array2<f64>) -> Result<Self, BridgeError> {
        if a0.shape() != terminal.shape() {
            return Err(BridgeError::ShapeMismatch {
                a0: a0.shape().to_vec(),
                terminal: terminal.shape().to_vec(),
            });
        }
        if a0.iter().chain(terminal.iter()).any(|v| !v.is_finite()) {
            return Err(BridgeError::NonFinite);
        }
        Ok(Self { a0, terminal })
    }

    /// Scalar endpoints, kept 1x1 so every operation stays shape-generic.
    pub fn scalar(a0: f64, terminal: f64) -> Self {
        Self::new(
            Array2::from_elem((1, 1), a0),
            Array2::from_elem((1, 1), terminal),
        )
        .expect("scalar endpoints are finite")
    }

    pub fn a0(&self) -> &Array2<f64> {
        &self.a0
    }

    pub fn terminal(&self) -> &Array2<f64> {
        &self.terminal
    }
}

/// Closed-form Gaussian marginal of the bridge at one time: a mean with the
/// endpoint shape and one isotropic variance.
#[derive(Debug, Clone)]
pub struct MarginalMoments {
    pub mean: Array2<f64>,
    pub variance: f64,
}

/// One simulated path: states recorded at `times[k] = k*dt` including t = 0.
#[derive(Debug, Clone)]
pub struct EmPath {
    pub times: Vec<f64>,
    pub states: Vec<Array2<f64>>,
}

/// Drift pull rate β_t and per-step noise scale on a uniform grid, shared by
/// every path of a simulation run.
struct EmGrid {
    dt: f64,
    beta: Vec<f64>,
    noise_scale: Vec<f64>,
}

fn em_grid(schedule: &NoiseSchedule, dt: f64) -> Result<EmGrid, BridgeError> {
    let t_end = schedule.t_end();
    let limit = 1e-3 * t_end;
    if !(dt > 0.0) || dt > limit {
        return Err(BridgeError::CoarseStep { dt, limit });
    }
    let n_steps = (t_end / dt).round() as usize;
    let gamma = schedule.gamma();
    let mut beta = Vec::with_capacity(n_steps);
    let mut noise_scale = Vec::with_capacity(n_steps);
    let mut max_product = 0.0f64;
    for k in 0..n_steps {
        let t = k as f64 * dt;
        let pull = schedule.theta_at(t)
            + schedule.g_sq(t) * (-2.0 * schedule.theta_bar(t, t_end)?).exp()
                / (1.0 / gamma + schedule.sigma_bar_sq(t, t_end)?);
        max_product = max_product.max(pull.abs() * dt);
        beta.push(pull);
        noise_scale.push((schedule.g_sq(t) * dt).sqrt());
    }
    if max_product > 0.1 {
        return Err(BridgeError::StiffDrift {
            gamma,
            dt,
            product: max_product,
        });
    }
    Ok(EmGrid {
        dt,
        beta,
        noise_scale,
    })
}

/// Euler-Maruyama simulation of the controlled forward SDE from a₀.
///
/// This path simulator is the ground-truth oracle for the closed-form claims;
/// it shares no algebra with [`marginal_moments`] beyond the schedule itself.
pub fn em_simulate_forward(
    endpoints: &BridgeEndpoints,
    schedule: &NoiseSchedule,
    dt: f64,
    rng_seed: u64,
) -> Result<EmPath, BridgeError> {
    let grid = em_grid(schedule, dt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut state = endpoints.a0.clone();
    let mut times = Vec::with_capacity(grid.beta.len() + 1);
    let mut states = Vec::with_capacity(grid.beta.len() + 1);
    times.push(0.0);
    states.push(state.clone());
    for k in 0..grid.beta.len() {
        let drift = grid.beta[k] * grid.dt;
        ndarray::Zip::from(&mut state)
            .and(&endpoints.terminal)
            .for_each(|a, &term| {
                let eps: f64 = StandardNormal.sample(&mut rng);
                *a += drift * (term - *a) + grid.noise_scale[k] * eps;
            });
        times.push((k + 1) as f64 * grid.dt);
        states.push(state.clone());
    }
    Ok(EmPath { times, states })
}

/// Monte-Carlo estimate of a scalar-state moment with its standard error.
#[derive(Debug, Clone, Copy)]
pub struct MomentEstimate {
    pub time: f64,
    pub mean: f64,
    pub variance: f64,
    pub se_mean: f64,
    pub se_variance: f64,
}

/// Empirical moments of many independent scalar EM paths at the requested
/// times. Paths use per-path seed streams, so the result is identical no
/// matter how the work is scheduled across threads.
pub fn em_scalar_moments(
    a0: f64,
    terminal: f64,
    schedule: &NoiseSchedule,
    dt: f64,
    n_paths: usize,
    record_times: &[f64],
    rng_seed: u64,
) -> Result<Vec<MomentEstimate>, BridgeError> {
    let grid = em_grid(schedule, dt)?;
    let n_steps = grid.beta.len();
    // Map each requested time to the first grid index reaching it.
    let record_idx: Vec<usize> = record_times
        .iter()
        .map(|&rt| ((rt / grid.dt).round() as usize).min(n_steps))
        .collect();

    let samples: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|path| {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            rng.set_stream(path as u64 + 1);
            let mut a = a0;
            let mut out = vec![0.0; record_times.len()];
            for (slot, &idx) in out.iter_mut().zip(&record_idx) {
                if idx == 0 {
                    *slot = a;
                }
            }
            for k in 0..n_steps {
                let eps: f64 = StandardNormal.sample(&mut rng);
                a += grid.beta[k] * grid.dt * (terminal - a) + grid.noise_scale[k] * eps;
                for (slot, &idx) in out.iter_mut().zip(&record_idx) {
                    if idx == k + 1 {
                        *slot = a;
                    }
                }
            }
            out
        })
        .collect();

    let n = n_paths as f64;
    let estimates = record_times
        .iter()
        .enumerate()
        .map(|(j, &rt)| {
            let vals: Vec<f64> = samples.iter().map(|row| row[j]).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let m2 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
            let m4 = vals.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
            let variance = m2 / (n - 1.0);
            let se_mean = (variance / n).sqrt();
            // distribution-free standard error of the sample variance
            let se_variance = ((m4 - variance * variance * (n - 3.0) / (n - 1.0)) / n)
                .max(0.0)
                .sqrt();
            MomentEstimate {
                time: rt,
                mean,
                variance,
                se_mean,
                se_variance,
            }
        })
        .collect();
    Ok(estimates)
}

/// Closed-form marginal moments of the bridge at time `t` given both
/// endpoints; see the module header for the derivation.
pub fn marginal_moments(
    endpoints: &BridgeEndpoints,
    schedule: &NoiseSchedule,
    t: f64,
) -> Result<MarginalMoments, BridgeError> {
    let t_end = schedule.t_end();
    if !(0.0..=t_end).contains(&t) {
        return Err(BridgeError::TimeDomain { t, t_end });
    }
    let inv_gamma = 1.0 / schedule.gamma();
    let h_t = inv_gamma + schedule.sigma_bar_sq(t, t_end)?;
    let h_0 = inv_gamma + schedule.sigma_bar_sq(0.0, t_end)?;
    let w0 = (-schedule.theta_bar(0.0, t)?).exp() * h_t / h_0;
    let variance = schedule.sigma_bar_sq(0.0, t)? * h_t / h_0;
    let mean = &endpoints.a0 * w0 + &endpoints.terminal * (1.0 - w0);
    Ok(MarginalMoments { mean, variance })
}

/// Weight of a₀ in the marginal mean; exposed for the scaling diagnostics.
pub fn a0_weight(schedule: &NoiseSchedule, t: f64) -> Result<f64, BridgeError> {
    let t_end = schedule.t_end();
    if !(0.0..=t_end).contains(&t) {
        return Err(BridgeError::TimeDomain { t, t_end });
    }
    let inv_gamma = 1.0 / schedule.gamma();
    let h_t = inv_gamma + schedule.sigma_bar_sq(t, t_end)?;
    let h_0 = inv_gamma + schedule.sigma_bar_sq(0.0, t_end)?;
    Ok((-schedule.theta_bar(0.0, t)?).exp() * h_t / h_0)
}

/// One Gaussian draw from the closed-form marginal at a training-grid time.
///
/// `mean + sqrt(variance) * eps` with eps standard normal per entry; a fixed
/// seed gives a bit-identical draw.
pub fn sample_q(
    endpoints: &BridgeEndpoints,
    schedule: &NoiseSchedule,
    t: f64,
    rng_seed: u64,
) -> Result<Array2<f64>, BridgeError> {
    let n = schedule.n_train_steps();
    let pos = t * f64::from(n) / schedule.t_end();
    if (pos - pos.round()).abs() > 1e-9 {
        return Err(BridgeError::OffGrid { t, n });
    }
    let moments = marginal_moments(endpoints, schedule, t)?;
    let sd = moments.variance.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = moments.mean;
    for v in out.iter_mut() {
        let eps: f64 = StandardNormal.sample(&mut rng);
        *v += sd * eps;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn sched() -> NoiseSchedule {
        NoiseSchedule::constant(2.0, 0.5, 100.0).unwrap()
    }

    #[test]
    fn endpoints_reject_shape_mismatch_and_nan() {
        let a = Array2::zeros((2, 3));
        let b = Array2::zeros((3, 2));
        assert!(BridgeEndpoints::new(a.clone(), b).is_err());
        let mut c = Array2::zeros((2, 3));
        c[(0, 0)] = f64::NAN;
        assert!(BridgeEndpoints::new(a, c).is_err());
    }

    #[test]
    fn marginal_at_zero_is_a0() {
        let ep = BridgeEndpoints::scalar(0.3, 1.7);
        let m = marginal_moments(&ep, &sched(), 0.0).unwrap();
        assert_abs_diff_eq!(m.mean[(0, 0)], 0.3);
        assert_abs_diff_eq!(m.variance, 0.0);
    }

    #[test]
    fn marginal_pins_terminal_in_large_gamma_limit() {
        let s = NoiseSchedule::constant(2.0, 0.5, 1e12).unwrap();
        let ep = BridgeEndpoints::scalar(0.0, 1.0);
        let m = marginal_moments(&ep, &s, 1.0).unwrap();
        assert_abs_diff_eq!(m.mean[(0, 0)], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(m.variance, 0.0, epsilon = 1e-10);
    }

    #[test]
    fn marginal_frozen_values() {
        // 50-digit evaluation of the variation-of-constants moments at
        // theta=2, lambda=0.5, gamma=100, a0=0, aT=1.
        let ep = BridgeEndpoints::scalar(0.0, 1.0);
        let cases = [
            (0.25, 0.41215259277770922425, 0.15316226212510346047),
            (0.5, 0.67425600007379196997, 0.19140736876779302529),
            (0.75, 0.85321262256833565347, 0.15627567351624578561),
            (1.0, 0.99470148361322038098, 0.0096084896517698206402),
        ];
        for (t, mean, var) in cases {
            let m = marginal_moments(&ep, &sched(), t).unwrap();
            assert_relative_eq!(m.mean[(0, 0)], mean, max_relative = 1e-12);
            assert_relative_eq!(m.variance, var, max_relative = 1e-12);
        }
    }

    #[test]
    fn endpoint_interpolation_weights() {
        let s = sched();
        assert_abs_diff_eq!(a0_weight(&s, 0.0).unwrap(), 1.0, epsilon = 1e-12);
        // At t = T the a0 weight is e^{-theta_bar_T} * gamma^{-1} / (sigma^2_T + gamma^{-1}).
        let expected = (-2.0f64).exp() * 0.01 / (s.sigma_bar_sq(0.0, 1.0).unwrap() + 0.01);
        assert_abs_diff_eq!(a0_weight(&s, 1.0).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn terminal_residual_scales_inversely_with_gamma() {
        // |mean(T) - aT| = e^{-theta_bar_T} gamma^{-1} / (sigma^2_T + gamma^{-1});
        // log-log slope vs gamma must be -1 +- 0.05 when gamma^{-1} << sigma^2_T.
        let mut pts = Vec::new();
        for gamma in [1e2, 1e3, 1e4] {
            let s = NoiseSchedule::constant(2.0, 0.5, gamma).unwrap();
            let ep = BridgeEndpoints::scalar(0.0, 1.0);
            let m = marginal_moments(&ep, &s, 1.0).unwrap();
            pts.push((gamma.ln(), (1.0 - m.mean[(0, 0)]).abs().ln()));
        }
        let slope_lo = (pts[1].1 - pts[0].1) / (pts[1].0 - pts[0].0);
        let slope_hi = (pts[2].1 - pts[1].1) / (pts[2].0 - pts[1].0);
        assert!((slope_lo + 1.0).abs() < 0.05, "slope {slope_lo}");
        assert!((slope_hi + 1.0).abs() < 0.05, "slope {slope_hi}");
    }

    #[test]
    fn em_zero_diffusion_limit_tracks_ode() {
        // lambda -> 0 removes the noise; the path must end within 1e-4 of the
        // deterministic ODE solution (closed-form mean with the same gamma).
        let s = NoiseSchedule::constant(2.0, 1e-8, 100.0).unwrap();
        let ep = BridgeEndpoints::scalar(0.0, 1.0);
        let path = em_simulate_forward(&ep, &s, 1e-4, 11).unwrap();
        let m = marginal_moments(&ep, &s, 1.0).unwrap();
        let end = path.states.last().unwrap()[(0, 0)];
        assert_abs_diff_eq!(end, m.mean[(0, 0)], epsilon = 1e-4);
    }

    #[test]
    fn em_fixed_point_when_endpoints_coincide() {
        let s = NoiseSchedule::constant(2.0, 1e-8, 100.0).unwrap();
        let ep = BridgeEndpoints::scalar(0.42, 0.42);
        let path = em_simulate_forward(&ep, &s, 1e-4, 5).unwrap();
        for st in &path.states {
            assert_abs_diff_eq!(st[(0, 0)], 0.42, epsilon = 1e-6);
        }
    }

    #[test]
    fn em_rejects_stiff_configuration() {
        // gamma = 1e4 at dt = 1e-4 pushes |beta|*dt past 0.1 near t = T.
        let s = NoiseSchedule::constant(2.0, 0.5, 1e4).unwrap();
        let ep = BridgeEndpoints::scalar(0.0, 1.0);
        let err = em_simulate_forward(&ep, &s, 1e-4, 0).unwrap_err();
        match err {
            BridgeError::StiffDrift { gamma, dt, .. } => {
                assert_eq!(gamma, 1e4);
                assert_eq!(dt, 1e-4);
            }
            other => panic!("expected StiffDrift, got {other}"),
        }
        assert!(em_simulate_forward(&ep, &sched(), 2e-3, 0).is_err());
    }

    #[test]
    fn em_moments_match_closed_form_quick() {
        // Smoke version of the acceptance criterion: fewer paths, 3 SE gate.
        let s = sched();
        let times = [0.25, 0.5, 0.75, 1.0];
        let est = em_scalar_moments(0.0, 1.0, &s, 1e-4, 4000, &times, 20260712).unwrap();
        let ep = BridgeEndpoints::scalar(0.0, 1.0);
        for e in est {
            let m = marginal_moments(&ep, &s, e.time).unwrap();
            assert!(
                (e.mean - m.mean[(0, 0)]).abs() <= 3.0 * e.se_mean,
                "mean at t={}: em={} closed={} se={}",
                e.time,
                e.mean,
                m.mean[(0, 0)],
                e.se_mean
            );
            assert!(
                (e.variance - m.variance).abs() <= 3.0 * e.se_variance,
                "variance at t={}: em={} closed={} se={}",
                e.time,
                e.variance,
                m.variance,
                e.se_variance
            );
        }
    }

    #[test]
    fn em_scalar_moments_deterministic() {
        let s = sched();
        let a = em_scalar_moments(0.0, 1.0, &s, 1e-3 * 0.9, 64, &[0.5], 7).unwrap();
        let b = em_scalar_moments(0.0, 1.0, &s, 1e-3 * 0.9, 64, &[0.5], 7).unwrap();
        assert_eq!(a[0].mean.to_bits(), b[0].mean.to_bits());
        assert_eq!(a[0].variance.to_bits(), b[0].variance.to_bits());
    }

    #[test]
    fn sample_q_exact_at_zero_and_deterministic() {
        let ep = BridgeEndpoints::scalar(0.37, 1.0);
        let s = sched();
        let x = sample_q(&ep, &s, 0.0, 99).unwrap();
        assert_abs_diff_eq!(x[(0, 0)], 0.37);
        let a = sample_q(&ep, &s, 0.5, 123).unwrap();
        let b = sample_q(&ep, &s, 0.5, 123).unwrap();
        assert_eq!(a[(0, 0)].to_bits(), b[(0, 0)].to_bits());
        assert!(sample_q(&ep, &s, 0.503, 1).is_err());
    }

    #[test]
    fn sample_q_empirical_moments_match() {
        let ep = BridgeEndpoints::scalar(0.0, 1.0);
        let s = sched();
        let n = 10_000;
        let vals: Vec<f64> = (0..n)
            .map(|i| sample_q(&ep, &s, 0.5, 1000 + i as u64).unwrap()[(0, 0)])
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let m = marginal_moments(&ep, &s, 0.5).unwrap();
        let se_mean = (m.variance / n as f64).sqrt();
        let se_var = m.variance * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((mean - m.mean[(0, 0)]).abs() <= 3.0 * se_mean);
        assert!((var - m.variance).abs() <= 3.0 * se_var);
    }
}
