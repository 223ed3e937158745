//! Oracle suites behind the `verify` subcommand: every closed-form claim is
//! checked against an independent reference (Euler-Maruyama simulation,
//! 256-bit arbitrary-precision evaluation, finite differences, brute-force
//! search) and reported as one record per check.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use astro_float::{BigFloat, Consts, RoundingMode};
use ndarray::{array, Array2};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bridge::{em_scalar_moments, marginal_moments, sample_q, BridgeEndpoints};
use crate::envs::fps::{farthest_point_sample, farthest_point_sample_bruteforce};
use crate::net::model::{denoiser_forward, encoder_forward, ModelConfig, ModelParams, ParamNodes};
use crate::net::{check_gradients, loss_align, time_embedding, Graph, NodeId};
use crate::sampler::{reverse_step, sample_chain, sample_chain_trace, SamplerConfig};
use crate::schedule::NoiseSchedule;

/// One oracle check: name, expected vs observed, tolerance, verdict.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CheckRecord {
    pub suite: &'static str,
    pub name: String,
    pub expected: String,
    pub observed: String,
    pub tolerance: String,
    pub pass: bool,
}

impl CheckRecord {
    fn gauge(
        suite: &'static str,
        name: impl Into<String>,
        expected: f64,
        observed: f64,
        tol: f64,
    ) -> Self {
        Self {
            suite,
            name: name.into(),
            expected: format!("{expected:.12e}"),
            observed: format!("{observed:.12e}"),
            tolerance: format!("{tol:.1e}"),
            pass: (expected - observed).abs() <= tol,
        }
    }

    fn bound(
        suite: &'static str,
        name: impl Into<String>,
        observed: f64,
        tol: f64,
    ) -> Self {
        Self {
            suite,
            name: name.into(),
            expected: format!("<= {tol:.1e}"),
            observed: format!("{observed:.3e}"),
            tolerance: format!("{tol:.1e}"),
            pass: observed <= tol,
        }
    }
}

/// All suite names accepted by `verify --suite`.
pub const SUITE_NAMES: &[&str] = &[
    "schedule",
    "bridge-oracle",
    "sampler-degenerate",
    "sampler-coeffs",
    "sampler-chain",
    "net-grad",
    "clip",
    "fps",
];

/// Runs the selected suite (or all of them) and collects the records.
pub fn run_suites(filter: Option<&str>) -> Result<Vec<CheckRecord>, String> {
    let wanted = |name: &str| filter.is_none_or(|f| f == name);
    if let Some(f) = filter {
        if !SUITE_NAMES.contains(&f) {
            return Err(format!(
                "unknown suite {f:?}; expected one of {SUITE_NAMES:?}"
            ));
        }
    }
    let mut out = Vec::new();
    if wanted("schedule") {
        out.extend(suite_schedule());
    }
    if wanted("bridge-oracle") {
        out.extend(suite_bridge_oracle(20_000));
    }
    if wanted("sampler-degenerate") {
        out.extend(suite_sampler_degenerate());
    }
    if wanted("sampler-coeffs") {
        out.extend(suite_sampler_coeffs(1000, 424242));
    }
    if wanted("sampler-chain") {
        out.extend(suite_sampler_chain());
    }
    if wanted("net-grad") {
        out.extend(suite_net_grad());
    }
    if wanted("clip") {
        out.extend(suite_clip());
    }
    if wanted("fps") {
        out.extend(suite_fps());
    }
    Ok(out)
}

/// Plain-text table of the records.
pub fn format_table(records: &[CheckRecord]) -> String {
    let mut s = String::new();
    let name_w = records
        .iter()
        .map(|r| r.suite.len() + r.name.len() + 1)
        .max()
        .unwrap_or(10)
        .max(10);
    let _ = writeln!(
        s,
        "{:<name_w$}  {:>22}  {:>22}  {:>9}  {}",
        "check", "expected", "observed", "tol", "result"
    );
    for r in records {
        let _ = writeln!(
            s,
            "{:<name_w$}  {:>22}  {:>22}  {:>9}  {}",
            format!("{}/{}", r.suite, r.name),
            r.expected,
            r.observed,
            r.tolerance,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    let failed = records.iter().filter(|r| !r.pass).count();
    let _ = writeln!(s, "{} checks, {} failed", records.len(), failed);
    s
}

// ---------------------------------------------------------------- schedule

fn suite_schedule() -> Vec<CheckRecord> {
    let mut out = Vec::new();
    let sch = NoiseSchedule::constant(2.0, 0.5, 100.0).expect("valid schedule");
    let c = sch.solver_coeffs(0.5, 0.25).expect("valid step");
    // 50-digit reference values for theta=2, lambda=0.5, gamma=100, T=1
    for (name, want, got) in [
        ("rho_t(0.25)", 1.0421906109874947232, c.rho_t),
        ("kappa_gamma(0.25)", 4.4378264730031575866, c.kappa_t_gamma),
        ("kappa(0.25)", 4.2585589101896349937, c.kappa_t),
        ("c1", 2.1839260013257695631, c.c1),
        ("c2", 53.598150033144239078, c.c2),
        ("D", 0.0013487569473771087725, c.d),
        ("E", 0.9232307338816772911, c.e),
        ("F", 0.0015328035277131630661, c.f),
    ] {
        out.push(CheckRecord::bound(
            "schedule",
            name,
            rel_err(got, want),
            1e-12,
        ));
    }
    let csum = c.c1 + c.c2;
    out.push(CheckRecord::gauge(
        "schedule",
        "E+F+2c1c2/(c1+c2)^2",
        1.0,
        c.e + c.f + 2.0 * c.c1 * c.c2 / (csum * csum),
        1e-12,
    ));
    let large = NoiseSchedule::constant(2.0, 0.5, 1e16).expect("valid schedule");
    out.push(CheckRecord::bound(
        "schedule",
        "kappa_gamma -> kappa as gamma -> inf",
        rel_err(
            large.kappa_gamma(0.3).expect("in range"),
            large.kappa(0.3).expect("in range"),
        ),
        1e-8,
    ));
    let tab = NoiseSchedule::new(
        crate::schedule::ThetaSchedule::Tabulated(vec![(0.0, 0.0), (1.0, 1.0)]),
        1.0,
        100.0,
        1.0,
        100,
    )
    .expect("valid table");
    out.push(CheckRecord::gauge(
        "schedule",
        "trapezoid ramp integral",
        0.5,
        tab.theta_bar(0.0, 1.0).expect("in range"),
        1e-6,
    ));
    out
}

// ------------------------------------------------------------ bridge oracle

fn suite_bridge_oracle(n_paths: usize) -> Vec<CheckRecord> {
    let mut out = Vec::new();
    let sch = NoiseSchedule::constant(2.0, 0.5, 100.0).expect("valid schedule");
    let ep = BridgeEndpoints::scalar(0.0, 1.0);
    let times = [0.25, 0.5, 0.75, 1.0];
    let started = std::time::Instant::now();
    let est = em_scalar_moments(0.0, 1.0, &sch, 1e-4, n_paths, &times, 20_260_712)
        .expect("non-stiff configuration");
    let elapsed = started.elapsed().as_secs_f64();
    for e in est {
        let m = marginal_moments(&ep, &sch, e.time).expect("in range");
        out.push(CheckRecord::gauge(
            "bridge-oracle",
            format!("mean(t={}) em vs closed", e.time),
            e.mean,
            m.mean[(0, 0)],
            3.0 * e.se_mean,
        ));
        out.push(CheckRecord::gauge(
            "bridge-oracle",
            format!("variance(t={}) em vs closed", e.time),
            e.variance,
            m.variance,
            3.0 * e.se_variance,
        ));
    }
    out.push(CheckRecord::bound(
        "bridge-oracle",
        format!("runtime of {n_paths} paths (s)"),
        elapsed,
        60.0,
    ));
    // terminal-penalty scaling: log-log slope of |mean(T) - aT| vs gamma
    let mut pts = Vec::new();
    for gamma in [1e2, 1e3, 1e4] {
        let s = NoiseSchedule::constant(2.0, 0.5, gamma).expect("valid schedule");
        let m = marginal_moments(&ep, &s, 1.0).expect("in range");
        pts.push((gamma.ln(), (1.0 - m.mean[(0, 0)]).abs().ln()));
    }
    for w in pts.windows(2) {
        let slope = (w[1].1 - w[0].1) / (w[1].0 - w[0].0);
        out.push(CheckRecord::gauge(
            "bridge-oracle",
            format!("terminal residual slope near gamma=e^{:.1}", w[0].0),
            -1.0,
            slope,
            0.05,
        ));
    }
    out
}

// ------------------------------------------------------ sampler degenerate

fn suite_sampler_degenerate() -> Vec<CheckRecord> {
    let mut worst_same = 0.0f64;
    let mut worst_zero = 0.0f64;
    let mut grid = Vec::new();
    for theta in [0.5, 1.0, 2.0, 3.5, 5.0] {
        for lambda in [0.2, 0.5, 1.0, 1.5] {
            for gamma in [1e2, 1e3, 1e4, 1e6, 1e7] {
                grid.push((theta, lambda, gamma));
            }
        }
    }
    let a_s = array![[0.7, -0.4]];
    let term = array![[1.0, 0.3]];
    let pred = array![[0.2, -0.9]];
    for &(theta, lambda, gamma) in &grid {
        let sch = NoiseSchedule::constant(theta, lambda, gamma).expect("valid schedule");
        let same = reverse_step(&a_s, &term, &pred, &sch, 0.5, 0.5, None).expect("degenerate");
        for (a, b) in same.iter().zip(a_s.iter()) {
            worst_same = worst_same.max((a - b).abs());
        }
        let zero = reverse_step(&a_s, &term, &pred, &sch, 0.5, 0.0, None).expect("t=0 step");
        for (a, b) in zero.iter().zip(pred.iter()) {
            worst_zero = worst_zero.max((a - b).abs());
        }
    }
    vec![
        CheckRecord::bound(
            "sampler-degenerate",
            format!("t=s identity over {} configs", grid.len()),
            worst_same,
            1e-12,
        ),
        CheckRecord::bound(
            "sampler-degenerate",
            format!("t=0 pure prediction over {} configs", grid.len()),
            worst_zero,
            1e-12,
        ),
    ]
}

// --------------------------------------------------- arbitrary-precision

/// 256-bit evaluation context for the printed coefficient formulas.
struct BigCtx {
    p: usize,
    rm: RoundingMode,
    cc: Consts,
}

impl BigCtx {
    fn new() -> Self {
        Self {
            p: 256,
            rm: RoundingMode::ToEven,
            cc: Consts::new().expect("constants cache"),
        }
    }

    fn f(&self, x: f64) -> BigFloat {
        BigFloat::from_f64(x, self.p)
    }

    fn exp(&mut self, x: &BigFloat) -> BigFloat {
        x.exp(self.p, self.rm, &mut self.cc)
    }

    fn ln(&mut self, x: &BigFloat) -> BigFloat {
        x.ln(self.p, self.rm, &mut self.cc)
    }
}

struct BigStepCoeffs {
    coeff_state: BigFloat,
    coeff_obs: BigFloat,
    coeff_pred: BigFloat,
    delta_sq: BigFloat,
}

/// The printed update-rule coefficients evaluated in 256-bit arithmetic for
/// a constant rate; an independent route sharing no code with the f64 path.
fn big_step_coeffs(
    ctx: &mut BigCtx,
    theta: f64,
    lambda: f64,
    gamma: f64,
    t_end: f64,
    s: f64,
    t: f64,
) -> BigStepCoeffs {
    let p = ctx.p;
    let rm = ctx.rm;
    let one = ctx.f(1.0);
    let th = ctx.f(theta);
    let la = ctx.f(lambda);
    let ga = ctx.f(gamma);
    let inv_gl2 = one.div(&ga.mul(&la.mul(&la, p, rm), p, rm), p, rm);

    let minus_two = ctx.f(-2.0);
    let tb = |ctx: &mut BigCtx, a: f64, b: f64| {
        let d = ctx.f(b - a);
        th.mul(&d, p, rm)
    };
    let rho = |ctx: &mut BigCtx, u: f64| {
        let tbu = tb(ctx, 0.0, u);
        let e_pos = ctx.exp(&tbu);
        let neg2 = tbu.mul(&minus_two, p, rm);
        let e_neg2 = ctx.exp(&neg2);
        e_pos.mul(&one.sub(&e_neg2, p, rm), p, rm)
    };
    let kap_g = |ctx: &mut BigCtx, u: f64| {
        let tbu = tb(ctx, u, t_end);
        let e_pos = ctx.exp(&tbu);
        let neg2 = tbu.mul(&minus_two, p, rm);
        let e_neg2 = ctx.exp(&neg2);
        e_pos.mul(&inv_gl2.add(&one.sub(&e_neg2, p, rm), p, rm), p, rm)
    };
    let kap = |ctx: &mut BigCtx, u: f64| {
        let tbu = tb(ctx, u, t_end);
        let e_pos = ctx.exp(&tbu);
        let neg2 = tbu.mul(&minus_two, p, rm);
        let e_neg2 = ctx.exp(&neg2);
        e_pos.mul(&one.sub(&e_neg2, p, rm), p, rm)
    };

    let rho_t = rho(ctx, t);
    let rho_s = rho(ctx, s);
    let kg_t = kap_g(ctx, t);
    let kg_s = kap_g(ctx, s);
    let kg_0 = kap_g(ctx, 0.0);
    let k_t = kap(ctx, t);
    let k_s = kap(ctx, s);

    let ratio = kg_t
        .mul(&k_s, p, rm)
        .mul(&rho_t, p, rm)
        .div(&kg_s.mul(&k_t, p, rm).mul(&rho_s, p, rm), p, rm);
    let pred_full = kg_t.div(&kg_0, p, rm);
    let pred_cross = kg_t
        .mul(&rho_t, p, rm)
        .mul(&k_s, p, rm)
        .div(&kg_0.mul(&k_t, p, rm).mul(&rho_s, p, rm), p, rm);
    let coeff_state = ratio.clone();
    let coeff_obs = one
        .sub(&ratio, p, rm)
        .add(&pred_cross, p, rm)
        .sub(&pred_full, p, rm);
    let coeff_pred = pred_full.sub(&pred_cross, p, rm);

    // c1, c2, D, E, F and the printed (delta^d)^2
    let two = ctx.f(2.0);
    let tb_total = tb(ctx, 0.0, t_end);
    let arg = tb_total.mul(&two, p, rm);
    let e2total = ctx.exp(&arg);
    let c1 = inv_gl2.mul(&e2total, p, rm);
    let c2 = e2total.sub(&one, p, rm);
    let csum = c1.add(&c2, p, rm);
    let csum2 = csum.mul(&csum, p, rm);
    let csum3 = csum2.mul(&csum, p, rm);
    let big_d = ctx
        .f(2.0)
        .mul(&c1, p, rm)
        .mul(&c2, p, rm)
        .div(&csum3, p, rm);
    let big_e = c2.mul(&c2, p, rm).div(&csum2, p, rm);
    let big_f = c1.mul(&c1, p, rm).div(&csum2, p, rm);

    let tb_t = tb(ctx, 0.0, t);
    let tb_s = tb(ctx, 0.0, s);
    let arg_t = tb_t.mul(&two, p, rm);
    let e2t = ctx.exp(&arg_t);
    let arg_s = tb_s.mul(&two, p, rm);
    let e2s = ctx.exp(&arg_s);
    let e_term = e2s.sub(&e2t, p, rm).div(
        &e2t.sub(&one, p, rm).mul(&e2s.sub(&one, p, rm), p, rm),
        p,
        rm,
    );
    let log_arg = kg_s
        .mul(&rho_t, p, rm)
        .div(&kg_t.mul(&rho_s, p, rm), p, rm);
    let d_term = ctx.ln(&log_arg);
    let f_term = {
        let arg_t = tb_total.add(&tb_t, p, rm).neg();
        let num_t = ctx.exp(&arg_t);
        let arg_s = tb_total.add(&tb_s, p, rm).neg();
        let num_s = ctx.exp(&arg_s);
        num_t.div(&kg_t, p, rm).sub(&num_s.div(&kg_s, p, rm), p, rm)
    };
    let pref = la
        .mul(&la, p, rm)
        .mul(&kg_t.mul(&kg_t, p, rm), p, rm)
        .mul(&rho_t.mul(&rho_t, p, rm), p, rm)
        .div(&k_t.mul(&k_t, p, rm), p, rm);
    let bracket = big_e
        .mul(&e_term, p, rm)
        .add(&big_d.mul(&d_term, p, rm), p, rm)
        .sub(&big_f.mul(&f_term, p, rm), p, rm);
    let delta_sq = pref.mul(&bracket, p, rm);

    BigStepCoeffs {
        coeff_state,
        coeff_obs,
        coeff_pred,
        delta_sq,
    }
}

fn big_to_f64(x: &BigFloat) -> f64 {
    format!("{x}").parse().unwrap_or(f64::NAN)
}

fn big_rel_err(got: f64, want: &BigFloat, ctx: &BigCtx) -> f64 {
    let p = ctx.p;
    let rm = ctx.rm;
    let diff = ctx.f(got).sub(want, p, rm).abs();
    let denom_f = big_to_f64(&want.abs());
    let denom = ctx.f(denom_f.max(1e-30));
    big_to_f64(&diff.div(&denom, p, rm))
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-30)
}

fn suite_sampler_coeffs(n_tuples: usize, seed: u64) -> Vec<CheckRecord> {
    let mut ctx = BigCtx::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [0.0f64; 4]; // state, obs, pred, delta_sq
    let mut min_delta = f64::INFINITY;
    for _ in 0..n_tuples {
        let theta = rng.random_range(0.3..5.0);
        let lambda = rng.random_range(0.1..2.0);
        let gamma = 10f64.powf(rng.random_range(1.5..7.5));
        let s = rng.random_range(0.05..1.0);
        let t = s * rng.random_range(0.01..0.99);
        let sch = NoiseSchedule::constant(theta, lambda, gamma).expect("valid schedule");
        let c = sch.solver_coeffs(s, t).expect("valid step");
        let big = big_step_coeffs(&mut ctx, theta, lambda, gamma, 1.0, s, t);
        worst[0] = worst[0].max(big_rel_err(c.coeff_state, &big.coeff_state, &ctx));
        worst[1] = worst[1].max(big_rel_err(c.coeff_obs, &big.coeff_obs, &ctx));
        worst[2] = worst[2].max(big_rel_err(c.coeff_pred, &big.coeff_pred, &ctx));
        worst[3] = worst[3].max(big_rel_err(c.delta_sq, &big.delta_sq, &ctx));
        min_delta = min_delta.min(big_to_f64(&big.delta_sq).min(c.delta_sq));
    }
    vec![
        CheckRecord::bound(
            "sampler-coeffs",
            format!("state coeff rel err over {n_tuples} tuples"),
            worst[0],
            1e-10,
        ),
        CheckRecord::bound(
            "sampler-coeffs",
            format!("terminal coeff rel err over {n_tuples} tuples"),
            worst[1],
            1e-10,
        ),
        CheckRecord::bound(
            "sampler-coeffs",
            format!("prediction coeff rel err over {n_tuples} tuples"),
            worst[2],
            1e-10,
        ),
        CheckRecord::bound(
            "sampler-coeffs",
            format!("delta^2 rel err over {n_tuples} tuples"),
            worst[3],
            1e-10,
        ),
        CheckRecord {
            suite: "sampler-coeffs",
            name: "min delta^2 over tuples".into(),
            expected: ">= -1e-12".into(),
            observed: format!("{min_delta:.3e}"),
            tolerance: "1e-12".into(),
            pass: min_delta >= -1e-12,
        },
    ]
}

// ------------------------------------------------------------ sampler chain

fn suite_sampler_chain() -> Vec<CheckRecord> {
    let mut out = Vec::new();
    let sch = NoiseSchedule::constant(2.0, 0.5, 100.0).expect("valid schedule");

    // perfect denoiser: the chain returns the target exactly
    let target = array![[0.31, -0.62], [0.05, 0.99]];
    let tgt = target.clone();
    let perfect = move |_: &Array2<f64>, _: &Array2<f64>, _: f64| tgt.clone();
    let terminal = array![[1.0, 0.4], [-0.2, 0.8]];
    let mut worst = 0.0f64;
    for m in [1usize, 5, 10] {
        let got = sample_chain(&terminal, &perfect, &sch, &SamplerConfig::new(m), 7 + m as u64)
            .expect("chain");
        for (a, b) in got.iter().zip(target.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    out.push(CheckRecord::bound(
        "sampler-chain",
        "perfect-denoiser recovery, M in {1,5,10}",
        worst,
        1e-9,
    ));

    // zero denoiser against the 50-digit recursion
    let zero = |_: &Array2<f64>, _: &Array2<f64>, _: f64| array![[0.0]];
    let cfg = SamplerConfig {
        noise_multiplier: 0.0,
        ..SamplerConfig::new(10)
    };
    let trace = sample_chain_trace(&array![[1.0]], &zero, &sch, &cfg, 0).expect("chain");
    let frozen = [
        1.0,
        0.94018927203539604066,
        0.88327664593464223362,
        0.82167950179175163161,
        0.75292572993002748495,
        0.67425600007379196997,
        0.5825130197357575009,
        0.47401482098350604159,
        0.34440699013809489217,
        0.18848790986373728067,
        0.0,
    ];
    let mut worst = 0.0f64;
    for (state, want) in trace.states.iter().zip(frozen) {
        let err = if want == 0.0 {
            state[(0, 0)].abs()
        } else {
            rel_err(state[(0, 0)], want)
        };
        worst = worst.max(err);
    }
    out.push(CheckRecord::bound(
        "sampler-chain",
        "zero-denoiser trajectory vs 50-digit recursion",
        worst,
        1e-10,
    ));

    // one stochastic reverse step preserves the closed-form marginal
    for (gamma, s_time, t_time) in [(1e7, 1.0, 0.9), (1e7, 0.5, 0.25), (1e2, 0.5, 0.25)] {
        let sch = NoiseSchedule::constant(2.0, 0.5, gamma).expect("valid schedule");
        let ep = BridgeEndpoints::scalar(0.0, 1.0);
        let a0 = array![[0.0]];
        let term = array![[1.0]];
        let n = 20_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(314_159);
        let mut mean = 0.0;
        let mut msq = 0.0;
        for i in 0..n {
            let a_s = sample_q(&ep, &sch, s_time, 90_000 + i as u64).expect("grid time");
            let z: f64 = StandardNormal.sample(&mut rng);
            let eps = array![[z]];
            let a_t = reverse_step(&a_s, &term, &a0, &sch, s_time, t_time, Some(&eps))
                .expect("reverse step");
            mean += a_t[(0, 0)];
            msq += a_t[(0, 0)] * a_t[(0, 0)];
        }
        let nf = n as f64;
        mean /= nf;
        let var = (msq - nf * mean * mean) / (nf - 1.0);
        let m = marginal_moments(&ep, &sch, t_time).expect("in range");
        out.push(CheckRecord::gauge(
            "sampler-chain",
            format!("marginal mean after step {s_time}->{t_time}, gamma={gamma:.0e}"),
            m.mean[(0, 0)],
            mean,
            3.0 * (m.variance / nf).sqrt(),
        ));
        out.push(CheckRecord::gauge(
            "sampler-chain",
            format!("marginal variance after step {s_time}->{t_time}, gamma={gamma:.0e}"),
            m.variance,
            var,
            3.0 * m.variance * (2.0 / (nf - 1.0)).sqrt(),
        ));
    }
    out
}

// ----------------------------------------------------------------- net-grad

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn grad_record(name: &str, inputs: &BTreeMap<String, Array2<f64>>, build: impl Fn(&mut Graph, &BTreeMap<String, NodeId>) -> Result<NodeId, crate::net::NetError>) -> CheckRecord {
    match check_gradients(inputs, 1e-5, build) {
        Ok(report) => CheckRecord::bound(
            "net-grad",
            format!("{name} ({} entries)", report.n_checked),
            report.max_rel_err,
            1e-5,
        ),
        Err(e) => CheckRecord {
            suite: "net-grad",
            name: name.into(),
            expected: "gradient check".into(),
            observed: format!("error: {e}"),
            tolerance: "1e-5".into(),
            pass: false,
        },
    }
}

fn suite_net_grad() -> Vec<CheckRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(1009);
    let mut out = Vec::new();

    let target = randn(&mut rng, 4, 3);
    let ins: BTreeMap<String, Array2<f64>> = [
        ("x".to_string(), randn(&mut rng, 4, 5)),
        ("w".to_string(), randn(&mut rng, 5, 3)),
        ("b".to_string(), randn(&mut rng, 1, 3)),
    ]
    .into();
    out.push(grad_record("linear", &ins, |g, ids| {
        let y = g.linear(ids["x"], ids["w"], ids["b"])?;
        g.l1_loss(y, target.clone())
    }));

    let target = randn(&mut rng, 3, 6);
    let ins: BTreeMap<String, Array2<f64>> = [
        ("x".to_string(), randn(&mut rng, 3, 6)),
        ("g".to_string(), randn(&mut rng, 1, 6)),
        ("b".to_string(), randn(&mut rng, 1, 6)),
    ]
    .into();
    out.push(grad_record("layer_norm", &ins, |g, ids| {
        let y = g.layer_norm(ids["x"], ids["g"], ids["b"], 1e-10)?;
        g.l1_loss(y, target.clone())
    }));

    let target = randn(&mut rng, 6, 2);
    let ins: BTreeMap<String, Array2<f64>> = [
        ("q".to_string(), randn(&mut rng, 6, 4)),
        ("v".to_string(), randn(&mut rng, 6, 2)),
    ]
    .into();
    out.push(grad_record("cross_attention", &ins, |g, ids| {
        let y = g.cross_attention_fuse(ids["q"], ids["v"], 3)?;
        g.l1_loss(y, target.clone())
    }));

    let target = randn(&mut rng, 4, 4);
    let ins: BTreeMap<String, Array2<f64>> =
        [("pred".to_string(), randn(&mut rng, 4, 4))].into();
    out.push(grad_record("l1_loss", &ins, |g, ids| {
        g.l1_loss(ids["pred"], target.clone())
    }));

    let ins: BTreeMap<String, Array2<f64>> = [
        ("x".to_string(), randn(&mut rng, 5, 7)),
        ("y".to_string(), randn(&mut rng, 5, 7)),
    ]
    .into();
    out.push(grad_record("clip_loss", &ins, |g, ids| {
        g.clip_align_loss(ids["x"], ids["y"], 0.07)
    }));

    // full composite: encoders + fusion + denoiser + both losses
    let cfg = ModelConfig {
        horizon: 2,
        action_dim: 2,
        state_dim: 2,
        obs_steps: 2,
        n_points: 4,
        token_dim: 3,
        state_hidden: 5,
        point_hidden: [4, 4],
        denoiser_hidden: vec![6],
        time_embed_dim: 4,
        tau: 0.07,
        detach_obs_in_db: false,
    };
    let params = ModelParams::init(&cfg, 31);
    let batch = 3usize;
    let mut inputs: BTreeMap<String, Array2<f64>> = params.tensors.clone().into_iter().collect();
    inputs.insert("in.state".into(), randn(&mut rng, batch, 4));
    inputs.insert("in.points".into(), randn(&mut rng, batch * cfg.n_points, 3));
    let a_t = randn(&mut rng, batch, cfg.chunk_len());
    let a0 = randn(&mut rng, batch, cfg.chunk_len());
    let emb = time_embedding(0.42, cfg.time_embed_dim);
    let temb = Array2::from_shape_fn((batch, cfg.time_embed_dim), |(_, j)| emb[j]);
    let cfg2 = cfg.clone();
    out.push(grad_record("full_model_composite", &inputs, move |g, ids| {
        let nodes = ParamNodes::from_ids(
            ids.iter()
                .filter(|(k, _)| !k.starts_with("in."))
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
        );
        let z_obs = encoder_via_nodes(g, &nodes, &cfg2, ids["in.state"], ids["in.points"])?;
        let a_t_node = g.constant(a_t.clone());
        let temb_node = g.constant(temb.clone());
        let pred = denoiser_forward(g, &nodes, &cfg2, a_t_node, z_obs, temb_node)?;
        let l_db = g.l1_loss(pred, a0.clone())?;
        let a0_node = g.constant(a0.clone());
        let l_align = g.clip_align_loss(a0_node, z_obs, cfg2.tau)?;
        g.axpy_scalar(l_db, l_align, 0.3)
    }));
    out
}

// The encoder builder takes raw arrays; for the composite gradient check the
// state and cloud must be graph inputs instead, so rebuild the same stack on
// the given nodes.
fn encoder_via_nodes(
    g: &mut Graph,
    nodes: &ParamNodes,
    cfg: &ModelConfig,
    state_in: NodeId,
    points_in: NodeId,
) -> Result<NodeId, crate::net::NetError> {
    let batch = g.value(state_in).nrows();
    let s0 = g.linear(state_in, nodes.get("phi1.l0.w"), nodes.get("phi1.l0.b"))?;
    let s1 = g.layer_norm(s0, nodes.get("phi1.ln.g"), nodes.get("phi1.ln.b"), 1e-10)?;
    let s2 = g.silu(s1);
    let s3 = g.linear(s2, nodes.get("phi1.l1.w"), nodes.get("phi1.l1.b"))?;
    let s_tokens = g.reshape(s3, batch * cfg.horizon, cfg.token_dim)?;
    let c0 = g.linear(points_in, nodes.get("phi2.l0.w"), nodes.get("phi2.l0.b"))?;
    let c1 = g.layer_norm(c0, nodes.get("phi2.ln0.g"), nodes.get("phi2.ln0.b"), 1e-10)?;
    let c2 = g.silu(c1);
    let c3 = g.linear(c2, nodes.get("phi2.l1.w"), nodes.get("phi2.l1.b"))?;
    let c4 = g.layer_norm(c3, nodes.get("phi2.ln1.g"), nodes.get("phi2.ln1.b"), 1e-10)?;
    let c5 = g.silu(c4);
    let pooled = g.segment_max(c5, cfg.n_points)?;
    let projected = g.linear(pooled, nodes.get("phi2.proj.w"), nodes.get("phi2.proj.b"))?;
    let pc_tokens = g.reshape(projected, batch * cfg.horizon, cfg.action_dim)?;
    let fused = g.cross_attention_fuse(s_tokens, pc_tokens, cfg.horizon)?;
    g.reshape(fused, batch, cfg.chunk_len())
}

// --------------------------------------------------------------------- clip

fn suite_clip() -> Vec<CheckRecord> {
    let mut out = Vec::new();
    let x = array![[1.0, 0.0, 0.0]];
    let y = array![[0.5, 0.5, 0.0]];
    out.push(CheckRecord::gauge(
        "clip",
        "n=1 batch is exactly zero",
        0.0,
        loss_align(&x, &y, 0.07).expect("valid batch"),
        0.0,
    ));
    let x = array![[1.0, 0.0], [0.0, 1.0]];
    out.push(CheckRecord::gauge(
        "clip",
        "n=2 orthogonal pair, tau=1",
        0.6265233750364456681,
        loss_align(&x, &x, 1.0).expect("valid batch"),
        1e-9,
    ));
    // pairwise IEEE addition is commutative, so swapping a two-element batch
    // is bit-exact; larger cycles reorder accumulations and get a float tol
    let x = array![[0.3, -1.0, 0.2], [1.1, 0.4, -0.6]];
    let y = array![[0.9, 0.1, -0.3], [0.2, -0.7, 1.0]];
    let pick2 = |m: &Array2<f64>| {
        ndarray::stack(ndarray::Axis(0), &[m.row(1), m.row(0)]).expect("stack")
    };
    let base = loss_align(&x, &y, 0.07).expect("valid batch");
    let swapped = loss_align(&pick2(&x), &pick2(&y), 0.07).expect("valid batch");
    out.push(CheckRecord::gauge(
        "clip",
        "joint swap invariance (exact)",
        base,
        swapped,
        0.0,
    ));
    let x = array![[0.3, -1.0, 0.2], [1.1, 0.4, -0.6], [-0.2, 0.8, 0.5]];
    let y = array![[0.9, 0.1, -0.3], [0.2, -0.7, 1.0], [0.4, 0.4, 0.4]];
    let perm = [2usize, 0, 1];
    let pick = |m: &Array2<f64>| {
        let rows: Vec<_> = perm.iter().map(|&i| m.row(i)).collect();
        ndarray::stack(ndarray::Axis(0), &rows).expect("stack")
    };
    let base3 = loss_align(&x, &y, 0.07).expect("valid batch");
    let permuted = loss_align(&pick(&x), &pick(&y), 0.07).expect("valid batch");
    out.push(CheckRecord::gauge(
        "clip",
        "joint 3-cycle invariance",
        base3,
        permuted,
        1e-12,
    ));
    out
}

// ---------------------------------------------------------------------- fps

fn suite_fps() -> Vec<CheckRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut mismatches = 0usize;
    let cases = 200;
    for _ in 0..cases {
        let m = rng.random_range(1usize..=64);
        let k = rng.random_range(1usize..=m);
        let start = rng.random_range(0usize..m);
        let pts = Array2::from_shape_fn((m, 3), |_| rng.random_range(-1.0..1.0));
        let fast = farthest_point_sample(&pts, k, start).expect("valid args");
        let slow = farthest_point_sample_bruteforce(&pts, k, start).expect("valid args");
        if fast != slow {
            mismatches += 1;
        }
    }
    vec![CheckRecord {
        suite: "fps",
        name: format!("greedy equals brute force on {cases} instances"),
        expected: "0 mismatches".into(),
        observed: format!("{mismatches} mismatches"),
        tolerance: "exact".into(),
        pass: mismatches == 0,
    }]
}
