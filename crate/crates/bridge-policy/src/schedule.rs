//! Noise schedule for the generalized Ornstein-Uhlenbeck bridge and every
//! scalar coefficient of the closed-form reverse solver.
//!
//! The forward process is a mean-reverting SDE with rate `θ_t` and diffusion
//! `g_t` tied by `g_t² = 2 λ² θ_t`, so `λ²` is the steady variance level.
//! Everything downstream is a function of the integrated rate
//!
//! ```text
//! θ̄_{s:t} = ∫_s^t θ_z dz,          σ̄²_{s:t} = λ² (1 − e^{−2 θ̄_{s:t}})
//! ```
//!
//! and of the solver notation
//!
//! ```text
//! ρ_t     = e^{θ̄_t} (1 − e^{−2 θ̄_t})
//! κ_{t,γ} = e^{θ̄_{t:T}} ((γλ²)⁻¹ + 1 − e^{−2 θ̄_{t:T}})
//! κ_t     = e^{θ̄_{t:T}} (1 − e^{−2 θ̄_{t:T}})            (γ → ∞ limit of κ_{t,γ})
//! c₁ = (γλ²)⁻¹ e^{2θ̄_T},  c₂ = e^{2θ̄_T} − 1
//! D = 2c₁c₂/(c₁+c₂)³,  E = c₂²/(c₁+c₂)²,  F = c₁²/(c₁+c₂)²
//! ```
//!
//! Every `1 − e^x` is evaluated through `exp_m1` so the coefficients stay
//! accurate when the exponent is small (adjacent solver steps, t near s).

use thiserror::Error;

/// Default terminal time.
pub const DEFAULT_T_END: f64 = 1.0;
/// Default size of the discrete training grid `t_i = i·T/n`.
pub const DEFAULT_TRAIN_STEPS: u32 = 100;

/// Errors from schedule construction and coefficient evaluation.
#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("invalid schedule parameter {name}: {value} ({reason})")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("time pair out of domain: require 0 <= s <= t <= {t_end}, got s={s}, t={t}")]
    TimeDomain { s: f64, t: f64, t_end: f64 },
    #[error("reverse step requires 0 <= t < s <= {t_end}, got s={s}, t={t}")]
    ReverseOrder { s: f64, t: f64, t_end: f64 },
    #[error("tabulated schedule must cover [0, T] with increasing knots and nonnegative values")]
    BadTable,
    #[error("schedule has zero mean-reversion mass on [0, {s}]; rho_s vanishes")]
    DegenerateRho { s: f64 },
    #[error(
        "(delta^d)^2 = {value} is below -1e-12 at (s={s}, t={t}); coefficient evaluation is inconsistent"
    )]
    NegativeDeltaSq { value: f64, s: f64, t: f64 },
}

/// Mean-reversion rate as a function of time.
#[derive(Debug, Clone)]
pub enum ThetaSchedule {
    /// θ_t ≡ θ; all integrals are closed form.
    Constant(f64),
    /// Piecewise-linear θ(z) through `(time, value)` knots covering [0, T];
    /// integrated by composite trapezoid with at least 1024 panels per unit time.
    Tabulated(Vec<(f64, f64)>),
}

impl ThetaSchedule {
    fn validate(&self, t_end: f64) -> Result<(), ScheduleError> {
        match self {
            ThetaSchedule::Constant(v) => {
                if !v.is_finite() || *v < 0.0 {
                    return Err(ScheduleError::InvalidParameter {
                        name: "theta",
                        value: *v,
                        reason: "must be finite and nonnegative",
                    });
                }
            }
            ThetaSchedule::Tabulated(knots) => {
                if knots.len() < 2
                    || knots[0].0 > 0.0
                    || knots[knots.len() - 1].0 < t_end
                    || knots.windows(2).any(|w| w[1].0 <= w[0].0)
                    || knots.iter().any(|&(z, v)| !z.is_finite() || !v.is_finite() || v < 0.0)
                {
                    return Err(ScheduleError::BadTable);
                }
            }
        }
        Ok(())
    }
}

/// The (θ_t, λ, γ, T) bundle plus the discrete training grid size.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    theta: ThetaSchedule,
    lambda: f64,
    gamma: f64,
    t_end: f64,
    n_train_steps: u32,
}

/// All scalar coefficients of one reverse solver step from `s` down to `t`.
///
/// `coeff_state + coeff_obs + coeff_pred = 1` holds as algebra: the update is
/// an affine combination of the current state, the terminal observation and
/// the data prediction, plus `delta_sq.sqrt()` times a standard normal draw.
#[derive(Debug, Clone, Copy)]
pub struct SolverCoeffs {
    /// ρ_t at the destination time.
    pub rho_t: f64,
    /// κ_{t,γ} at the destination time.
    pub kappa_t_gamma: f64,
    /// κ_t (γ→∞ limit) at the destination time.
    pub kappa_t: f64,
    /// c₁ = (γλ²)⁻¹ e^{2θ̄_T}.
    pub c1: f64,
    /// c₂ = e^{2θ̄_T} − 1.
    pub c2: f64,
    /// D = 2c₁c₂/(c₁+c₂)³.
    pub d: f64,
    /// E = c₂²/(c₁+c₂)².
    pub e: f64,
    /// F = c₁²/(c₁+c₂)².
    pub f: f64,
    /// Multiplier of the current state a_s.
    pub coeff_state: f64,
    /// Multiplier of the terminal state a_T.
    pub coeff_obs: f64,
    /// Multiplier of the data prediction a_θ(a_s, a_T, s).
    pub coeff_pred: f64,
    /// Squared noise scale (δ^d_{s:t})² of the step; nonnegative.
    pub delta_sq: f64,
}

impl NoiseSchedule {
    pub fn new(
        theta: ThetaSchedule,
        lambda: f64,
        gamma: f64,
        t_end: f64,
        n_train_steps: u32,
    ) -> Result<Self, ScheduleError> {
        if !lambda.is_finite() || lambda <= 0.0 {
            return Err(ScheduleError::InvalidParameter {
                name: "lambda",
                value: lambda,
                reason: "must be finite and positive",
            });
        }
        if !gamma.is_finite() || gamma <= 0.0 {
            return Err(ScheduleError::InvalidParameter {
                name: "gamma",
                value: gamma,
                reason: "must be finite and positive",
            });
        }
        if !t_end.is_finite() || t_end <= 0.0 {
            return Err(ScheduleError::InvalidParameter {
                name: "t_end",
                value: t_end,
                reason: "must be finite and positive",
            });
        }
        if n_train_steps == 0 {
            return Err(ScheduleError::InvalidParameter {
                name: "n_train_steps",
                value: 0.0,
                reason: "must be at least 1",
            });
        }
        theta.validate(t_end)?;
        Ok(Self {
            theta,
            lambda,
            gamma,
            t_end,
            n_train_steps,
        })
    }

    /// Constant-rate schedule with T = 1 and a 100-step training grid.
    pub fn constant(theta: f64, lambda: f64, gamma: f64) -> Result<Self, ScheduleError> {
        Self::new(
            ThetaSchedule::Constant(theta),
            lambda,
            gamma,
            DEFAULT_T_END,
            DEFAULT_TRAIN_STEPS,
        )
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_train_steps(&self) -> u32 {
        self.n_train_steps
    }

    /// Time of grid index `i` on the discrete training grid, `t_i = i·T/n`.
    pub fn train_time(&self, i: u32) -> f64 {
        self.t_end * f64::from(i) / f64::from(self.n_train_steps)
    }

    /// θ_t at a single time.
    pub fn theta_at(&self, t: f64) -> f64 {
        match &self.theta {
            ThetaSchedule::Constant(v) => *v,
            ThetaSchedule::Tabulated(knots) => {
                let i = match knots.binary_search_by(|&(z, _)| {
                    z.partial_cmp(&t).expect("finite knot times")
                }) {
                    Ok(i) => return knots[i].1,
                    Err(i) => i,
                };
                if i == 0 {
                    return knots[0].1;
                }
                if i == knots.len() {
                    return knots[knots.len() - 1].1;
                }
                let (z0, v0) = knots[i - 1];
                let (z1, v1) = knots[i];
                v0 + (v1 - v0) * (t - z0) / (z1 - z0)
            }
        }
    }

    /// Diffusion squared, `g_t² = 2 λ² θ_t`.
    pub fn g_sq(&self, t: f64) -> f64 {
        2.0 * self.lambda * self.lambda * self.theta_at(t)
    }

    fn check_ordered(&self, s: f64, t: f64) -> Result<(), ScheduleError> {
        if !(0.0..=self.t_end).contains(&s) || !(0.0..=self.t_end).contains(&t) || s > t {
            return Err(ScheduleError::TimeDomain {
                s,
                t,
                t_end: self.t_end,
            });
        }
        Ok(())
    }

    /// Integrated rate `θ̄_{s:t} = ∫_s^t θ_z dz` for `0 ≤ s ≤ t ≤ T`.
    ///
    /// Exact for a constant rate; composite trapezoid with ≥1024 panels per
    /// unit time for a tabulated one.
    pub fn theta_bar(&self, s: f64, t: f64) -> Result<f64, ScheduleError> {
        self.check_ordered(s, t)?;
        match &self.theta {
            ThetaSchedule::Constant(v) => Ok(v * (t - s)),
            ThetaSchedule::Tabulated(_) => {
                if s == t {
                    return Ok(0.0);
                }
                let n = (((t - s) * 1024.0).ceil() as usize).max(1);
                let h = (t - s) / n as f64;
                let mut acc = 0.5 * (self.theta_at(s) + self.theta_at(t));
                for k in 1..n {
                    acc += self.theta_at(s + h * k as f64);
                }
                Ok(acc * h)
            }
        }
    }

    /// `σ̄²_{s:t} = λ² (1 − e^{−2 θ̄_{s:t}})`; lies in `[0, λ²)`.
    pub fn sigma_bar_sq(&self, s: f64, t: f64) -> Result<f64, ScheduleError> {
        let tb = self.theta_bar(s, t)?;
        Ok(self.lambda * self.lambda * (-f64::exp_m1(-2.0 * tb)))
    }

    /// ρ_t = e^{θ̄_t} (1 − e^{−2θ̄_t}); vanishes exactly at t = 0.
    pub fn rho(&self, t: f64) -> Result<f64, ScheduleError> {
        let tb = self.theta_bar(0.0, t)?;
        Ok(tb.exp() * (-f64::exp_m1(-2.0 * tb)))
    }

    /// κ_{t,γ} = e^{θ̄_{t:T}} ((γλ²)⁻¹ + 1 − e^{−2θ̄_{t:T}}); equals (γλ²)⁻¹ at t = T.
    pub fn kappa_gamma(&self, t: f64) -> Result<f64, ScheduleError> {
        let tb = self.theta_bar(t, self.t_end)?;
        let inv_gl2 = 1.0 / (self.gamma * self.lambda * self.lambda);
        Ok(tb.exp() * (inv_gl2 - f64::exp_m1(-2.0 * tb)))
    }

    /// κ_t = e^{θ̄_{t:T}} (1 − e^{−2θ̄_{t:T}}), the γ→∞ limit of κ_{t,γ}.
    pub fn kappa(&self, t: f64) -> Result<f64, ScheduleError> {
        let tb = self.theta_bar(t, self.t_end)?;
        Ok(tb.exp() * (-f64::exp_m1(-2.0 * tb)))
    }

    /// All coefficients of one reverse step from `s` down to `t`, `0 ≤ t < s ≤ T`.
    ///
    /// At t = 0 the state and observation coefficients vanish (ρ_0 = 0), the
    /// prediction coefficient is exactly 1 and δ² = 0; no division by ρ_t
    /// occurs in any returned quantity.
    pub fn solver_coeffs(&self, s: f64, t: f64) -> Result<SolverCoeffs, ScheduleError> {
        if !(0.0..=self.t_end).contains(&s) || !(0.0..=self.t_end).contains(&t) || t >= s {
            return Err(ScheduleError::ReverseOrder {
                s,
                t,
                t_end: self.t_end,
            });
        }

        let tb_t = self.theta_bar(0.0, t)?;
        let tb_s = self.theta_bar(0.0, s)?;
        let tb_total = self.theta_bar(0.0, self.t_end)?;

        let rho_t = tb_t.exp() * (-f64::exp_m1(-2.0 * tb_t));
        let rho_s = tb_s.exp() * (-f64::exp_m1(-2.0 * tb_s));
        if rho_s == 0.0 {
            return Err(ScheduleError::DegenerateRho { s });
        }

        let inv_gl2 = 1.0 / (self.gamma * self.lambda * self.lambda);
        let kg = |tb_rem: f64| tb_rem.exp() * (inv_gl2 - f64::exp_m1(-2.0 * tb_rem));
        let ki = |tb_rem: f64| tb_rem.exp() * (-f64::exp_m1(-2.0 * tb_rem));

        let kappa_t_gamma = kg(tb_total - tb_t);
        let kappa_s_gamma = kg(tb_total - tb_s);
        let kappa_0_gamma = kg(tb_total);
        let kappa_t = ki(tb_total - tb_t);
        let kappa_s = ki(tb_total - tb_s);

        let c1 = inv_gl2 * (2.0 * tb_total).exp();
        let c2 = f64::exp_m1(2.0 * tb_total);
        let csum = c1 + c2;
        let d = 2.0 * c1 * c2 / (csum * csum * csum);
        let e = c2 * c2 / (csum * csum);
        let f = c1 * c1 / (csum * csum);

        // Affine coefficients of (a_s, a_T, a_pred). rho_t appears only in
        // numerators, so t = 0 is exact: (0, 0, 1).
        let ratio_state = kappa_t_gamma * kappa_s * rho_t / (kappa_s_gamma * kappa_t * rho_s);
        let pred_full = kappa_t_gamma / kappa_0_gamma;
        let pred_cross = kappa_t_gamma * rho_t * kappa_s / (kappa_0_gamma * kappa_t * rho_s);
        let coeff_state = ratio_state;
        let coeff_obs = 1.0 - ratio_state + pred_cross - pred_full;
        let coeff_pred = pred_full - pred_cross;

        let delta_sq_raw = if rho_t == 0.0 {
            // ρ_t² log ρ_t → 0: the bracket diverges only logarithmically.
            0.0
        } else {
            let pref = self.lambda * self.lambda * kappa_t_gamma * kappa_t_gamma * rho_t * rho_t
                / (kappa_t * kappa_t);
            let e2s = (2.0 * tb_s).exp();
            let e2t = (2.0 * tb_t).exp();
            let e_term =
                (e2t * f64::exp_m1(2.0 * (tb_s - tb_t))) / (f64::exp_m1(2.0 * tb_t) * f64::exp_m1(2.0 * tb_s));
            debug_assert!(e2s >= e2t);
            let d_term = (kappa_s_gamma * rho_t / (kappa_t_gamma * rho_s)).ln();
            let f_term = (-tb_total - tb_t).exp() / kappa_t_gamma
                - (-tb_total - tb_s).exp() / kappa_s_gamma;
            pref * (e * e_term + d * d_term - f * f_term)
        };
        let delta_sq = if delta_sq_raw >= 0.0 {
            delta_sq_raw
        } else if delta_sq_raw >= -1e-12 {
            0.0
        } else {
            return Err(ScheduleError::NegativeDeltaSq {
                value: delta_sq_raw,
                s,
                t,
            });
        };

        Ok(SolverCoeffs {
            rho_t,
            kappa_t_gamma,
            kappa_t,
            c1,
            c2,
            d,
            e,
            f,
            coeff_state,
            coeff_obs,
            coeff_pred,
            delta_sq,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;

    fn sched(theta: f64, lambda: f64, gamma: f64) -> NoiseSchedule {
        NoiseSchedule::constant(theta, lambda, gamma).unwrap()
    }

    #[test]
    fn theta_bar_constant_rate() {
        let s = sched(2.0, 1.0, 100.0);
        assert_abs_diff_eq!(s.theta_bar(0.0, 1.0).unwrap(), 2.0);
        let s = sched(std::f64::consts::LN_2, 1.0, 100.0);
        assert_abs_diff_eq!(s.theta_bar(0.0, 1.0).unwrap(), std::f64::consts::LN_2);
    }

    #[test]
    fn theta_bar_tabulated_linear_ramp() {
        // theta_z = z on [0, 1]; the analytic integral over [0, 1] is 1/2.
        let s = NoiseSchedule::new(
            ThetaSchedule::Tabulated(vec![(0.0, 0.0), (1.0, 1.0)]),
            1.0,
            100.0,
            1.0,
            100,
        )
        .unwrap();
        assert_abs_diff_eq!(s.theta_bar(0.0, 1.0).unwrap(), 0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(s.theta_bar(0.25, 0.75).unwrap(), 0.25, epsilon = 1e-6);
    }

    #[test]
    fn theta_bar_rejects_bad_domain() {
        let s = sched(2.0, 1.0, 100.0);
        assert!(s.theta_bar(0.5, 0.4).is_err());
        assert!(s.theta_bar(0.0, 1.5).is_err());
        assert!(s.theta_bar(-0.1, 0.5).is_err());
    }

    #[test]
    fn sigma_bar_sq_examples() {
        let s = sched(std::f64::consts::LN_2, 1.0, 100.0);
        assert_abs_diff_eq!(s.sigma_bar_sq(0.3, 0.3).unwrap(), 0.0);
        // 1 - e^{-2 ln 2} = 1 - 1/4
        assert_relative_eq!(s.sigma_bar_sq(0.0, 1.0).unwrap(), 0.75, max_relative = 1e-15);
        let s = sched(2.0, 0.5, 100.0);
        // frozen 50-digit value of 0.25 (1 - e^{-4})
        assert_relative_eq!(
            s.sigma_bar_sq(0.0, 1.0).unwrap(),
            0.24542109027781645493,
            max_relative = 1e-14
        );
    }

    #[test]
    fn solver_coeffs_t_zero_is_pure_prediction() {
        for (theta, lambda, gamma) in [(0.5, 0.2, 1e2), (2.0, 0.5, 1e2), (5.0, 1.0, 1e7)] {
            let s = sched(theta, lambda, gamma);
            let c = s.solver_coeffs(0.37, 0.0).unwrap();
            assert_eq!(c.rho_t, 0.0);
            assert_eq!(c.coeff_state, 0.0);
            assert_eq!(c.coeff_obs, 0.0);
            assert_eq!(c.coeff_pred, 1.0);
            assert_eq!(c.delta_sq, 0.0);
        }
    }

    #[test]
    fn kappa_gamma_terminal_value() {
        let s = sched(2.0, 0.5, 100.0);
        let expected = 1.0 / (100.0 * 0.25);
        assert_relative_eq!(s.kappa_gamma(1.0).unwrap(), expected, max_relative = 1e-15);
    }

    #[test]
    fn kappa_gamma_approaches_kappa_for_large_gamma() {
        let s = sched(2.0, 0.5, 1e16);
        for t in [0.0, 0.25, 0.5, 0.75] {
            let kg = s.kappa_gamma(t).unwrap();
            let ki = s.kappa(t).unwrap();
            assert_relative_eq!(kg, ki, max_relative = 1e-8);
        }
    }

    #[test]
    fn kappa_gamma_decreasing_in_gamma() {
        for t in [0.0, 0.3, 0.6, 0.9] {
            let lo = sched(2.0, 0.5, 1e2).kappa_gamma(t).unwrap();
            let hi = sched(2.0, 0.5, 1e4).kappa_gamma(t).unwrap();
            assert!(lo > hi, "kappa_gamma must decrease in gamma at t={t}");
        }
    }

    #[test]
    fn solver_coeffs_frozen_oracle_values() {
        // 50-digit arbitrary-precision evaluation of the printed formulas at
        // theta=2, lambda=0.5, gamma=100, T=1, (s,t)=(0.5,0.25).
        let s = sched(2.0, 0.5, 100.0);
        let c = s.solver_coeffs(0.5, 0.25).unwrap();
        assert_relative_eq!(c.rho_t, 1.0421906109874947232, max_relative = 1e-12);
        assert_relative_eq!(c.kappa_t_gamma, 4.4378264730031575866, max_relative = 1e-12);
        assert_relative_eq!(c.kappa_t, 4.2585589101896349937, max_relative = 1e-12);
        assert_relative_eq!(c.c1, 2.1839260013257695631, max_relative = 1e-12);
        assert_relative_eq!(c.c2, 53.598150033144239078, max_relative = 1e-12);
        assert_relative_eq!(c.d, 0.0013487569473771087725, max_relative = 1e-12);
        assert_relative_eq!(c.e, 0.9232307338816772911, max_relative = 1e-12);
        assert_relative_eq!(c.f, 0.0015328035277131630661, max_relative = 1e-12);
        assert_relative_eq!(c.coeff_state, 0.44164435021252284992, max_relative = 1e-10);
        assert_relative_eq!(c.coeff_obs, 0.11437123974822461092, max_relative = 1e-10);
        assert_relative_eq!(c.coeff_pred, 0.44398441003925253916, max_relative = 1e-10);
        assert_relative_eq!(c.delta_sq, 0.11527163306211134421, max_relative = 1e-10);
    }

    #[test]
    fn solver_coeffs_rejects_forward_order() {
        let s = sched(2.0, 0.5, 100.0);
        assert!(s.solver_coeffs(0.25, 0.5).is_err());
        assert!(s.solver_coeffs(0.5, 0.5).is_err());
    }

    #[test]
    fn e_f_identities_exact() {
        for (theta, lambda, gamma) in [(0.5, 0.2, 1e2), (2.0, 1.0, 1e4), (5.0, 0.5, 1e7)] {
            let s = sched(theta, lambda, gamma);
            let c = s.solver_coeffs(0.6, 0.3).unwrap();
            let csum = c.c1 + c.c2;
            assert_abs_diff_eq!(c.e * csum * csum, c.c2 * c.c2, epsilon = 1e-12 * c.c2 * c.c2);
            assert_abs_diff_eq!(c.f * csum * csum, c.c1 * c.c1, epsilon = 1e-12 * c.c1 * c.c1);
            assert_abs_diff_eq!(
                c.e + c.f + 2.0 * c.c1 * c.c2 / (csum * csum),
                1.0,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn rejects_invalid_parameters() {
        assert!(NoiseSchedule::constant(-1.0, 1.0, 100.0).is_err());
        assert!(NoiseSchedule::constant(2.0, 0.0, 100.0).is_err());
        assert!(NoiseSchedule::constant(2.0, 1.0, -5.0).is_err());
        assert!(NoiseSchedule::new(ThetaSchedule::Constant(2.0), 1.0, 1.0, 0.0, 100).is_err());
        assert!(NoiseSchedule::new(ThetaSchedule::Constant(2.0), 1.0, 1.0, 1.0, 0).is_err());
        assert!(NoiseSchedule::new(
            ThetaSchedule::Tabulated(vec![(0.2, 1.0), (1.0, 1.0)]),
            1.0,
            1.0,
            1.0,
            100
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn theta_bar_additive(theta in 0.1f64..5.0, a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0) {
            let mut ts = [a, b, c];
            ts.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let s = sched(theta, 1.0, 100.0);
            let whole = s.theta_bar(ts[0], ts[2]).unwrap();
            let parts = s.theta_bar(ts[0], ts[1]).unwrap() + s.theta_bar(ts[1], ts[2]).unwrap();
            prop_assert!((whole - parts).abs() <= 1e-12);
        }

        #[test]
        fn sigma_bar_sq_monotone_and_bounded(theta in 0.1f64..5.0, lambda in 0.1f64..2.0, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let s = sched(theta, lambda, 100.0);
            let v_lo = s.sigma_bar_sq(0.0, lo).unwrap();
            let v_hi = s.sigma_bar_sq(0.0, hi).unwrap();
            prop_assert!(v_lo <= v_hi + 1e-15);
            prop_assert!((0.0..lambda * lambda).contains(&v_hi));
        }

        #[test]
        fn affine_combination_sums_to_one(
            theta in 0.2f64..5.0,
            lambda in 0.1f64..2.0,
            log_gamma in 1.0f64..7.0,
            s_time in 0.02f64..1.0,
            frac in 0.0f64..0.99,
        ) {
            let sch = sched(theta, lambda, 10f64.powf(log_gamma));
            let t_time = s_time * frac;
            let c = sch.solver_coeffs(s_time, t_time).unwrap();
            prop_assert!((c.coeff_state + c.coeff_obs + c.coeff_pred - 1.0).abs() <= 1e-10);
            prop_assert!(c.delta_sq >= 0.0);
        }
    }
}
