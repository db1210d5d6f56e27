//! Large-`D` order-parameter flows and their integration in `alpha = episodes / D`.
//!
//! Every right-hand side here averages the one-episode update over Gaussian
//! inputs with `gamma = 1`. The unconstrained flows act on `(R, Q)`; the
//! spherical flow holds `Q` fixed and moves `rho` alone.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{binomial_pmf, binomial_tail, expected_reward, prob_pow, EpisodeSpec, OrderState, RewardProtocol};
use crate::sched::ScheduleSpec;
use crate::trajectory::{fmt_float, Trajectory, TrajectoryRow};

/// Reference dimension used to convert `alpha` into an episode count.
pub const D_REF: f64 = 900.0;

/// How far `|rho|` may overshoot 1 inside an integration step before the
/// step is treated as failed.
const RHO_SLACK: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flow {
    pub dr: f64,
    pub dq: f64,
}

fn check_length(t: usize) -> Result<()> {
    if t == 0 {
        return Err(Error::Domain("episode length T must be >= 1".into()));
    }
    Ok(())
}

fn p_of(rho: f64) -> f64 {
    1.0 - rho.acos() / PI
}

fn all_correct_raw(rho: f64, q: f64, t: usize, eta1: f64, eta2: f64) -> Flow {
    let p = p_of(rho);
    let pt1 = prob_pow(p, t - 1);
    let pt = prob_pow(p, t);
    let tf = t as f64;
    let s = eta1 + eta2;
    let lin = (2.0 * q / PI).sqrt();
    Flow {
        dr: s / (2.0 * PI).sqrt() * (1.0 + rho) * pt1 - eta2 * rho * (2.0 / PI).sqrt(),
        dq: s * lin * (1.0 + rho) * pt1 - 2.0 * eta2 * lin
            + (eta1 * eta1 - eta2 * eta2) * pt / tf
            + eta2 * eta2 / tf,
    }
}

fn n_or_more_raw(rho: f64, q: f64, t: usize, n: usize, eta1: f64) -> Flow {
    let p = p_of(rho);
    // a: P(at least n-1 of the other T-1 correct); b: at least n of them
    let a: f64 = (n..=t).map(|i| binomial_pmf(t - 1, i - 1, p)).sum();
    let b: f64 = (n..t).map(|i| binomial_pmf(t - 1, i, p)).sum();
    Flow {
        dr: eta1 / (2.0 * PI).sqrt() * ((1.0 + rho) * a - (1.0 - rho) * b),
        dq: eta1 * (2.0 * q / PI).sqrt() * ((1.0 + rho) * a + (1.0 - rho) * b)
            + eta1 * eta1 / t as f64 * binomial_tail(t, n, p),
    }
}

fn breadcrumb_raw(rho: f64, q: f64, t: usize, eta1: f64, beta: f64) -> Flow {
    let p = p_of(rho);
    let pt1 = prob_pow(p, t - 1);
    let pt = prob_pow(p, t);
    let tf = t as f64;
    let head = (1.0 + rho) * (eta1 * pt1 + beta);
    Flow {
        dr: (head + beta * (tf - 1.0) * rho * p) / (2.0 * PI).sqrt(),
        dq: (2.0 * q / PI).sqrt() * (head + beta * (tf - 1.0) * p)
            + (eta1 * eta1 + (tf + 1.0) * eta1 * beta) * pt / tf
            + beta * beta * (tf + 1.0) * (0.5 + (tf - 1.0) * p / 3.0) * p / tf,
    }
}

fn spherical_raw(rho: f64, q: f64, t: usize, eta1: f64, eta2: f64) -> f64 {
    let p = p_of(rho);
    let tf = t as f64;
    let sq = q.sqrt();
    (eta1 + eta2) / (2.0 * PI * q).sqrt()
        * prob_pow(p, t - 1)
        * (1.0 - rho * rho - (eta1 - eta2) / tf * (PI / 2.0).sqrt() * (rho / sq) * p)
        - eta2 * eta2 / (2.0 * tf) * (rho / q)
}

fn chain_raw(rho: f64, q: f64, f: Flow) -> f64 {
    let sq = q.sqrt();
    f.dr / sq - rho / (2.0 * q) * f.dq
}

/// Unconstrained flow for all-or-nothing reward with penalty.
pub fn rhs_all_correct(state: &OrderState, t: usize, eta1: f64, eta2: f64) -> Result<Flow> {
    let rho = state.rho()?;
    check_length(t)?;
    Ok(all_correct_raw(rho, state.q, t, eta1, eta2))
}

/// Unconstrained flow when `n` or more correct decisions earn `eta1`.
pub fn rhs_n_or_more(state: &OrderState, t: usize, n: usize, eta1: f64) -> Result<Flow> {
    let rho = state.rho()?;
    check_length(t)?;
    if n == 0 || n > t {
        return Err(Error::Domain(format!("need 1 <= n <= T = {t}, got n = {n}")));
    }
    Ok(n_or_more_raw(rho, state.q, t, n, eta1))
}

/// Unconstrained flow with a per-decision reward `beta` on top of `eta1`.
pub fn rhs_breadcrumb(state: &OrderState, t: usize, eta1: f64, beta: f64) -> Result<Flow> {
    let rho = state.rho()?;
    check_length(t)?;
    if !(beta >= 0.0) {
        return Err(Error::Domain(format!("beta must be >= 0, got {beta}")));
    }
    Ok(breadcrumb_raw(rho, state.q, t, eta1, beta))
}

/// Flow of `rho` with `|w|` held fixed, all-or-nothing reward with penalty.
pub fn rhs_spherical(rho: f64, q: f64, t: usize, eta1: f64, eta2: f64) -> Result<f64> {
    let rho = OrderState::from_rho(rho, q)?.rho()?;
    check_length(t)?;
    Ok(spherical_raw(rho, q, t, eta1, eta2))
}

/// The penalty-free spherical flow written as a drift term and a
/// finite-rate correction.
pub fn rhs_spherical_reward_only(rho: f64, q: f64, t: usize, eta: f64) -> Result<f64> {
    let rho = OrderState::from_rho(rho, q)?.rho()?;
    check_length(t)?;
    let p = p_of(rho);
    Ok(eta / (2.0 * PI * q).sqrt() * (1.0 - rho * rho) * prob_pow(p, t - 1)
        - eta * eta / (2.0 * t as f64 * q) * rho * prob_pow(p, t))
}

/// `d rho / d alpha` implied by `(dR, dQ)` at `state`.
pub fn chain_rule_rho(state: &OrderState, dr: f64, dq: f64) -> Result<f64> {
    if !(state.q > 0.0) || !state.q.is_finite() {
        return Err(Error::InvalidState(format!("Q must be positive, got {}", state.q)));
    }
    let sq = state.q.sqrt();
    Ok(dr / sq - state.r / (2.0 * state.q * sq) * dq)
}

fn check_closed_form(spec: &EpisodeSpec, protocol: &RewardProtocol) -> Result<()> {
    if spec.gamma != 1.0 {
        return Err(Error::validation(
            "spec.gamma",
            "the order-parameter flows are only available for gamma = 1",
        ));
    }
    if let RewardProtocol::Subtask { .. } = protocol {
        return Err(Error::NoClosedForm("subtask"));
    }
    Ok(())
}

fn rhs_raw(rho: f64, q: f64, t: usize, protocol: &RewardProtocol) -> Flow {
    match *protocol {
        RewardProtocol::AllCorrect { eta1, eta2 } => all_correct_raw(rho, q, t, eta1, eta2),
        RewardProtocol::NOrMore { n, eta1 } => n_or_more_raw(rho, q, t, n, eta1),
        RewardProtocol::Breadcrumb { eta1, beta } => breadcrumb_raw(rho, q, t, eta1, beta),
        RewardProtocol::Subtask { .. } => unreachable!("rejected by check_closed_form"),
    }
}

fn drho_raw(rho: f64, q: f64, t: usize, protocol: &RewardProtocol) -> f64 {
    match *protocol {
        RewardProtocol::AllCorrect { eta1, eta2 } => spherical_raw(rho, q, t, eta1, eta2),
        _ => chain_raw(rho, q, rhs_raw(rho, q, t, protocol)),
    }
}

/// Unconstrained flow for any protocol with a closed form.
pub fn rhs(state: &OrderState, spec: &EpisodeSpec, protocol: &RewardProtocol) -> Result<Flow> {
    check_closed_form(spec, protocol)?;
    spec.validate()?;
    protocol.validate(spec)?;
    let rho = state.rho()?;
    Ok(rhs_raw(rho, state.q, spec.length, protocol))
}

/// Spherical `d rho / d alpha` for any protocol with a closed form.
pub fn drho(rho: f64, q: f64, spec: &EpisodeSpec, protocol: &RewardProtocol) -> Result<f64> {
    check_closed_form(spec, protocol)?;
    spec.validate()?;
    protocol.validate(spec)?;
    let rho = OrderState::from_rho(rho, q)?.rho()?;
    Ok(drho_raw(rho, q, spec.length, protocol))
}

fn default_step() -> f64 {
    0.1
}

fn default_abs_tol() -> f64 {
    1e-9
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Integrator {
    /// Classical fourth-order Runge-Kutta with a fixed step.
    Rk4 {
        #[serde(default = "default_step")]
        step: f64,
    },
    /// Dormand-Prince 5(4) with error control.
    Adaptive {
        #[serde(default = "default_abs_tol")]
        abs_tol: f64,
        #[serde(default)]
        rel_tol: f64,
    },
}

impl Default for Integrator {
    fn default() -> Self {
        Integrator::Rk4 { step: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    #[default]
    Log,
    Linear,
}

fn default_points() -> usize {
    200
}

/// Output grid. Always contains `0` and `alpha_max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(default)]
    pub spacing: Spacing,
    #[serde(default = "default_points")]
    pub points: usize,
    /// First positive point of a log grid; defaults to `alpha_max * 1e-4`.
    #[serde(default)]
    pub alpha_min: Option<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            spacing: Spacing::Log,
            points: default_points(),
            alpha_min: None,
        }
    }
}

impl GridSpec {
    pub fn linear(points: usize) -> Self {
        GridSpec {
            spacing: Spacing::Linear,
            points,
            alpha_min: None,
        }
    }

    pub fn alphas(&self, alpha_max: f64) -> Result<Vec<f64>> {
        if self.points < 2 {
            return Err(Error::validation("grid.points", "need at least 2 points"));
        }
        let n = self.points;
        let mut out = Vec::with_capacity(n);
        match self.spacing {
            Spacing::Linear => {
                for i in 0..n {
                    out.push(alpha_max * i as f64 / (n - 1) as f64);
                }
            }
            Spacing::Log => {
                let lo = self.alpha_min.unwrap_or(alpha_max * 1e-4);
                if !(lo > 0.0 && lo < alpha_max) {
                    return Err(Error::validation(
                        "grid.alpha_min",
                        "must lie in (0, alpha_max)",
                    ));
                }
                out.push(0.0);
                if n == 2 {
                    out.push(alpha_max);
                } else {
                    let (a, b) = (lo.ln(), alpha_max.ln());
                    for i in 0..n - 1 {
                        out.push((a + (b - a) * i as f64 / (n - 2) as f64).exp());
                    }
                }
            }
        }
        *out.last_mut().expect("n >= 2") = alpha_max;
        Ok(out)
    }
}

fn one() -> f64 {
    1.0
}

fn d_ref() -> f64 {
    D_REF
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitState {
    #[serde(default, alias = "R0")]
    pub r0: f64,
    #[serde(default = "one", alias = "Q0")]
    pub q0: f64,
}

impl Default for InitState {
    fn default() -> Self {
        InitState { r0: 0.0, q0: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdeConfig {
    pub spec: EpisodeSpec,
    pub protocol: RewardProtocol,
    #[serde(default)]
    pub init: InitState,
    pub alpha_max: f64,
    /// Re-evaluated from the live state at the start of every step. The
    /// schedule's `eta` multiplies the protocol's rates.
    #[serde(default)]
    pub schedule: Option<ScheduleSpec>,
    #[serde(default)]
    pub integrator: Integrator,
    #[serde(default)]
    pub spherical: bool,
    #[serde(default)]
    pub grid: GridSpec,
    /// Episodes per unit `alpha` in the `t` column.
    #[serde(default = "d_ref")]
    pub time_scale: f64,
}

impl OdeConfig {
    pub fn new(spec: EpisodeSpec, protocol: RewardProtocol, alpha_max: f64) -> Self {
        OdeConfig {
            spec,
            protocol,
            init: InitState::default(),
            alpha_max,
            schedule: None,
            integrator: Integrator::default(),
            spherical: false,
            grid: GridSpec::default(),
            time_scale: D_REF,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_max > 0.0) || !self.alpha_max.is_finite() {
            return Err(Error::validation("alpha_max", "must be positive and finite"));
        }
        self.spec.validate()?;
        check_closed_form(&self.spec, &self.protocol)?;
        self.protocol.validate(&self.spec)?;
        if !(self.init.q0 > 0.0) || !self.init.q0.is_finite() {
            return Err(Error::validation("init.q0", "must be positive"));
        }
        if OrderState::new(self.init.r0, self.init.q0).is_err() {
            return Err(Error::validation("init.r0", "|R0| must not exceed sqrt(Q0)"));
        }
        match self.integrator {
            Integrator::Rk4 { step } => {
                if !(step > 0.0) || !step.is_finite() {
                    return Err(Error::validation("integrator.step", "must be positive"));
                }
            }
            Integrator::Adaptive { abs_tol, rel_tol } => {
                if !(abs_tol > 0.0) || !(rel_tol >= 0.0) {
                    return Err(Error::validation(
                        "integrator.abs_tol",
                        "tolerances must be positive",
                    ));
                }
            }
        }
        if let Some(s) = &self.schedule {
            s.validate()?;
            if !matches!(self.protocol, RewardProtocol::AllCorrect { .. }) {
                return Err(Error::validation(
                    "schedule",
                    "schedules are only defined for the all_correct protocol",
                ));
            }
        }
        if !(self.time_scale > 0.0) {
            return Err(Error::validation("time_scale", "must be positive"));
        }
        self.grid.alphas(self.alpha_max)?;
        Ok(())
    }
}

/// `(alpha, T, eta)` in force at a logged point, with the state it was
/// computed from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTraceRow {
    pub alpha: f64,
    pub length: usize,
    pub eta: f64,
    pub rho: f64,
    pub q: f64,
}

pub const TRACE_HEADER: &str = "alpha,T_opt,eta_opt,rho,Q";

pub fn trace_to_csv(rows: &[ScheduleTraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt_float(r.alpha),
            r.length,
            fmt_float(r.eta),
            fmt_float(r.rho),
            fmt_float(r.q)
        ));
    }
    out
}

type State = [f64; 2];

/// Integration problem: `y = (R, Q)` unconstrained, `y = (rho, Q)` spherical.
struct Problem<'a> {
    cfg: &'a OdeConfig,
}

impl Problem<'_> {
    fn initial(&self) -> State {
        let i = self.cfg.init;
        if self.cfg.spherical {
            [i.r0 / i.q0.sqrt(), i.q0]
        } else {
            [i.r0, i.q0]
        }
    }

    fn rho_q(&self, y: &State, alpha: f64) -> Result<(f64, f64)> {
        let q = y[1];
        if !(q > 0.0) || !q.is_finite() || !y[0].is_finite() {
            return Err(Error::IntegrationFailure {
                alpha,
                reason: format!("state left the domain: R or rho = {}, Q = {q}", y[0]),
            });
        }
        let rho = if self.cfg.spherical { y[0] } else { y[0] / q.sqrt() };
        if rho.abs() > 1.0 + RHO_SLACK {
            return Err(Error::IntegrationFailure {
                alpha,
                reason: format!("|rho| = {} exceeds 1", rho.abs()),
            });
        }
        Ok((rho.clamp(-1.0, 1.0), q))
    }

    fn setting(&self, alpha: f64, y: &State) -> Result<(usize, f64, RewardProtocol)> {
        let base = self.cfg.spec.length;
        match &self.cfg.schedule {
            None => Ok((base, 1.0, self.cfg.protocol)),
            Some(s) => {
                let (rho, q) = self.rho_q(y, alpha)?;
                let set = s.resolve(alpha, rho, q, base)?;
                let protocol = match self.cfg.protocol {
                    RewardProtocol::AllCorrect { eta1, eta2 } => RewardProtocol::AllCorrect {
                        eta1: set.eta * eta1,
                        eta2: set.eta * eta2,
                    },
                    other => other,
                };
                Ok((set.length, set.eta, protocol))
            }
        }
    }

    fn deriv(&self, alpha: f64, y: &State, t: usize, protocol: &RewardProtocol) -> Result<State> {
        let (rho, q) = self.rho_q(y, alpha)?;
        let out = if self.cfg.spherical {
            [drho_raw(rho, q, t, protocol), 0.0]
        } else {
            let f = rhs_raw(rho, q, t, protocol);
            [f.dr, f.dq]
        };
        if !out[0].is_finite() || !out[1].is_finite() {
            return Err(Error::IntegrationFailure {
                alpha,
                reason: "non-finite derivative".into(),
            });
        }
        Ok(out)
    }

    fn row(&self, alpha: f64, y: &State, t: usize) -> Result<TrajectoryRow> {
        let (rho, q) = self.rho_q(y, alpha)?;
        let spec = EpisodeSpec {
            length: t,
            gamma: self.cfg.spec.gamma,
        };
        Ok(TrajectoryRow {
            alpha,
            t: alpha * self.cfg.time_scale,
            r: rho * q.sqrt(),
            q,
            rho,
            eps_g: rho.acos() / PI,
            expected_reward: expected_reward(&self.cfg.protocol, &spec, rho)?,
            empirical_reward: None,
        })
    }
}

fn axpy(y: &State, h: f64, k: &[(f64, &State)]) -> State {
    let mut out = *y;
    for (c, v) in k {
        out[0] += h * c * v[0];
        out[1] += h * c * v[1];
    }
    out
}

fn rk4_step(p: &Problem, alpha: f64, y: &State, h: f64, t: usize, pr: &RewardProtocol) -> Result<State> {
    let k1 = p.deriv(alpha, y, t, pr)?;
    let k2 = p.deriv(alpha, &axpy(y, h, &[(0.5, &k1)]), t, pr)?;
    let k3 = p.deriv(alpha, &axpy(y, h, &[(0.5, &k2)]), t, pr)?;
    let k4 = p.deriv(alpha, &axpy(y, h, &[(1.0, &k3)]), t, pr)?;
    Ok(axpy(y, h, &[(1.0 / 6.0, &k1), (1.0 / 3.0, &k2), (1.0 / 3.0, &k3), (1.0 / 6.0, &k4)]))
}

/// One Dormand-Prince step: fifth-order solution and the error estimate.
fn dp_step(
    p: &Problem,
    alpha: f64,
    y: &State,
    h: f64,
    t: usize,
    pr: &RewardProtocol,
) -> Result<(State, State)> {
    let k1 = p.deriv(alpha, y, t, pr)?;
    let k2 = p.deriv(alpha, &axpy(y, h, &[(1.0 / 5.0, &k1)]), t, pr)?;
    let k3 = p.deriv(alpha, &axpy(y, h, &[(3.0 / 40.0, &k1), (9.0 / 40.0, &k2)]), t, pr)?;
    let k4 = p.deriv(
        alpha,
        &axpy(y, h, &[(44.0 / 45.0, &k1), (-56.0 / 15.0, &k2), (32.0 / 9.0, &k3)]),
        t,
        pr,
    )?;
    let k5 = p.deriv(
        alpha,
        &axpy(
            y,
            h,
            &[
                (19372.0 / 6561.0, &k1),
                (-25360.0 / 2187.0, &k2),
                (64448.0 / 6561.0, &k3),
                (-212.0 / 729.0, &k4),
            ],
        ),
        t,
        pr,
    )?;
    let k6 = p.deriv(
        alpha,
        &axpy(
            y,
            h,
            &[
                (9017.0 / 3168.0, &k1),
                (-355.0 / 33.0, &k2),
                (46732.0 / 5247.0, &k3),
                (49.0 / 176.0, &k4),
                (-5103.0 / 18656.0, &k5),
            ],
        ),
        t,
        pr,
    )?;
    let y5 = axpy(
        y,
        h,
        &[
            (35.0 / 384.0, &k1),
            (500.0 / 1113.0, &k3),
            (125.0 / 192.0, &k4),
            (-2187.0 / 6784.0, &k5),
            (11.0 / 84.0, &k6),
        ],
    );
    let k7 = p.deriv(alpha, &y5, t, pr)?;
    let e = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];
    let ks = [&k1, &k2, &k3, &k4, &k5, &k6, &k7];
    let mut err = [0.0; 2];
    for (c, k) in e.iter().zip(ks) {
        err[0] += h * c * k[0];
        err[1] += h * c * k[1];
    }
    Ok((y5, err))
}

const MAX_STEPS: u64 = 200_000_000;

/// Adaptive stepper state shared by grid integration and event search.
struct Adaptive {
    abs_tol: f64,
    rel_tol: f64,
    h: f64,
    steps: u64,
}

impl Adaptive {
    fn new(abs_tol: f64, rel_tol: f64, alpha_max: f64) -> Self {
        Adaptive {
            abs_tol,
            rel_tol,
            h: (alpha_max * 1e-6).clamp(1e-8, 1e-2),
            steps: 0,
        }
    }

    /// Advances by one accepted step, never past `limit`. Returns the new
    /// `(alpha, y)`.
    fn advance(&mut self, p: &Problem, alpha: f64, y: &State, limit: f64) -> Result<(f64, State)> {
        let (t, _, pr) = p.setting(alpha, y)?;
        let mut h = self.h;
        loop {
            let clipped = h >= limit - alpha;
            let step = if clipped { limit - alpha } else { h };
            self.steps += 1;
            if self.steps > MAX_STEPS {
                return Err(Error::IntegrationFailure {
                    alpha,
                    reason: "step budget exhausted".into(),
                });
            }
            let factor;
            match dp_step(p, alpha, y, step, t, &pr) {
                Ok((y5, err)) => {
                    let mut worst: f64 = 0.0;
                    for i in 0..2 {
                        let scale = self.abs_tol + self.rel_tol * y[i].abs().max(y5[i].abs());
                        worst = worst.max(err[i].abs() / scale);
                    }
                    if worst <= 1.0 && p.rho_q(&y5, alpha + step).is_ok() {
                        let grow = if worst == 0.0 { 5.0 } else { (0.9 * worst.powf(-0.2)).clamp(0.2, 5.0) };
                        if !clipped || step * grow > self.h {
                            self.h = step * grow;
                        }
                        let next = if clipped { limit } else { alpha + step };
                        return Ok((next, y5));
                    }
                    factor = if worst.is_finite() { (0.9 * worst.powf(-0.2)).clamp(0.1, 0.9) } else { 0.1 };
                }
                Err(Error::IntegrationFailure { .. }) => factor = 0.1,
                Err(e) => return Err(e),
            }
            h = step * factor;
            if h < 1e-14 * alpha.abs().max(1.0) {
                return Err(Error::IntegrationFailure {
                    alpha,
                    reason: "step size underflow".into(),
                });
            }
        }
    }
}

fn run(cfg: &OdeConfig) -> Result<(Trajectory, Vec<ScheduleTraceRow>)> {
    cfg.validate()?;
    let p = Problem { cfg };
    let grid = cfg.grid.alphas(cfg.alpha_max)?;
    let mut y = p.initial();
    let mut alpha = 0.0;
    let mut rows = Vec::with_capacity(grid.len());
    let mut trace = Vec::with_capacity(grid.len());
    let mut log = |alpha: f64, y: &State, rows: &mut Vec<TrajectoryRow>| -> Result<()> {
        let (t, eta, _) = p.setting(alpha, y)?;
        let row = p.row(alpha, y, t)?;
        trace.push(ScheduleTraceRow {
            alpha,
            length: t,
            eta,
            rho: row.rho,
            q: row.q,
        });
        rows.push(row);
        Ok(())
    };
    log(alpha, &y, &mut rows)?;
    let mut adaptive = match cfg.integrator {
        Integrator::Adaptive { abs_tol, rel_tol } => Some(Adaptive::new(abs_tol, rel_tol, cfg.alpha_max)),
        Integrator::Rk4 { .. } => None,
    };
    for &target in &grid[1..] {
        while alpha < target {
            match (&mut adaptive, cfg.integrator) {
                (Some(a), _) => {
                    let (na, ny) = a.advance(&p, alpha, &y, target)?;
                    alpha = na;
                    y = ny;
                }
                (None, Integrator::Rk4 { step }) => {
                    let remaining = target - alpha;
                    let last = remaining <= step * (1.0 + 1e-9);
                    let h = if last { remaining } else { step };
                    let (t, _, pr) = p.setting(alpha, &y)?;
                    y = rk4_step(&p, alpha, &y, h, t, &pr)?;
                    alpha = if last { target } else { alpha + h };
                }
                (None, Integrator::Adaptive { .. }) => unreachable!(),
            }
        }
        log(target, &y, &mut rows)?;
    }
    Ok((Trajectory { rows }, trace))
}

/// Integrates `cfg` and samples the solution on its output grid.
pub fn integrate(cfg: &OdeConfig) -> Result<Trajectory> {
    Ok(run(cfg)?.0)
}

/// As [`integrate`], also returning the `(T, eta)` in force at each grid point.
pub fn integrate_traced(cfg: &OdeConfig) -> Result<(Trajectory, Vec<ScheduleTraceRow>)> {
    run(cfg)
}

/// Outcome of a first-passage search on the spherical flow.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Passage {
    /// First `alpha` with `rho >= target`, if reached by `alpha_max`.
    pub alpha: Option<f64>,
    /// `rho` at the end of the search.
    pub rho: f64,
}

/// Integrates the spherical flow of `cfg` from its initial state with the
/// adaptive stepper until `rho` first reaches `target` or `alpha_max` passes.
/// The crossing is located on the cubic Hermite interpolant of the step.
pub fn spherical_first_passage(cfg: &OdeConfig, target: f64, abs_tol: f64) -> Result<Passage> {
    let mut cfg = cfg.clone();
    cfg.spherical = true;
    cfg.validate()?;
    let p = Problem { cfg: &cfg };
    let mut y = p.initial();
    if y[0] >= target {
        return Ok(Passage {
            alpha: Some(0.0),
            rho: y[0],
        });
    }
    let mut stepper = Adaptive::new(abs_tol, 0.0, cfg.alpha_max);
    let mut alpha = 0.0;
    while alpha < cfg.alpha_max {
        let (na, ny) = stepper.advance(&p, alpha, &y, cfg.alpha_max)?;
        if ny[0] >= target {
            let (t, _, pr) = p.setting(alpha, &y)?;
            let f0 = p.deriv(alpha, &y, t, &pr)?[0];
            let f1 = p.deriv(na, &ny, t, &pr)?[0];
            let h = na - alpha;
            let (y0, y1) = (y[0], ny[0]);
            let hermite = |s: f64| {
                let s2 = s * s;
                let s3 = s2 * s;
                (2.0 * s3 - 3.0 * s2 + 1.0) * y0
                    + (s3 - 2.0 * s2 + s) * h * f0
                    + (-2.0 * s3 + 3.0 * s2) * y1
                    + (s3 - s2) * h * f1
            };
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if hermite(mid) >= target {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Ok(Passage {
                alpha: Some(alpha + hi * h),
                rho: target,
            });
        }
        alpha = na;
        y = ny;
    }
    Ok(Passage {
        alpha: None,
        rho: y[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn st(rho: f64, q: f64) -> OrderState {
        OrderState::from_rho(rho, q).unwrap()
    }

    #[test]
    fn all_correct_hand_values() {
        let f = rhs_all_correct(&st(0.0, 1.0), 1, 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(f.dr, 1.0 / (2.0 * PI).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(f.dq, (2.0 / PI).sqrt() + 0.5, epsilon = 1e-15);
        let f = rhs_all_correct(&st(1.0, 1.0), 5, 0.7, 0.0).unwrap();
        assert_abs_diff_eq!(f.dr, 2.0 * 0.7 / (2.0 * PI).sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(f.dq, 2.0 * 0.7 * (2.0 / PI).sqrt() + 0.49 / 5.0, epsilon = 1e-15);
        let z = rhs_all_correct(&st(0.3, 2.0), 4, 0.0, 0.0).unwrap();
        assert_eq!((z.dr, z.dq), (0.0, 0.0));
        assert!(matches!(
            rhs_all_correct(&OrderState { r: 0.0, q: 0.0, s: 1.0 }, 1, 1.0, 0.0),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn spherical_hand_values() {
        let v = rhs_spherical(0.0, 1.0, 13, 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(v, 0.5f64.powi(12) / (2.0 * PI).sqrt(), epsilon = 1e-18);
        assert!((v - 9.74e-5).abs() < 1e-7);
        let v = rhs_spherical(1.0, 1.5, 6, 0.8, 0.0).unwrap();
        assert_abs_diff_eq!(v, -0.64 / (2.0 * 6.0 * 1.5), epsilon = 1e-15);
    }

    #[test]
    fn breadcrumb_hand_value() {
        let f = rhs_breadcrumb(&st(0.0, 1.0), 9, 0.0, 0.2).unwrap();
        assert_abs_diff_eq!(f.dr, 0.2 / (2.0 * PI).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn n_or_more_limits() {
        // rho -> 1: only the i = T term survives
        let a = rhs_n_or_more(&st(1.0, 1.3), 6, 3, 1.0).unwrap();
        let b = rhs_all_correct(&st(1.0, 1.3), 6, 1.0, 0.0).unwrap();
        assert_abs_diff_eq!(a.dr, b.dr, epsilon = 1e-14);
        assert_abs_diff_eq!(a.dq, b.dq, epsilon = 1e-14);
        assert!(matches!(rhs_n_or_more(&st(0.0, 1.0), 3, 4, 1.0), Err(Error::Domain(_))));
        let f = rhs_n_or_more(&st(0.0, 1.0), 3, 2, 1.0).unwrap();
        assert!(f.dr.is_finite() && f.dq.is_finite() && f.dr > 0.0);
    }

    #[test]
    fn chain_rule_cases() {
        assert_eq!(chain_rule_rho(&st(0.4, 1.0), 0.0, 0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(chain_rule_rho(&st(0.0, 4.0), 0.3, 9.0).unwrap(), 0.15, epsilon = 1e-15);
        assert!(chain_rule_rho(&OrderState { r: 0.0, q: -1.0, s: 1.0 }, 1.0, 1.0).is_err());
    }

    #[test]
    fn subtask_and_discount_are_rejected() {
        let spec = EpisodeSpec::new(4);
        let sub = RewardProtocol::Subtask { t0: 2, r_sub: 0.1, eta1: 1.0 };
        assert!(matches!(rhs(&st(0.0, 1.0), &spec, &sub), Err(Error::NoClosedForm(_))));
        let disc = EpisodeSpec { length: 4, gamma: 0.9 };
        let p = RewardProtocol::AllCorrect { eta1: 1.0, eta2: 0.0 };
        let err = rhs(&st(0.0, 1.0), &disc, &p).unwrap_err();
        assert!(err.to_string().contains("spec.gamma"));
    }

    #[test]
    fn reductions_on_rho_grid() {
        for i in 0..100 {
            let rho = -0.99 + 1.98 * i as f64 / 99.0;
            for &(q, t, eta) in &[(1.0, 13, 1.0), (0.5, 4, 2.3), (2.0, 1, 0.4)] {
                let s = st(rho, q);
                let base = rhs_all_correct(&s, t, eta, 0.0).unwrap();
                let n = rhs_n_or_more(&s, t, t, eta).unwrap();
                let b = rhs_breadcrumb(&s, t, eta, 0.0).unwrap();
                for f in [n, b] {
                    assert!((f.dr - base.dr).abs() <= 1e-12);
                    assert!((f.dq - base.dq).abs() <= 1e-12);
                }
                let sph = rhs_spherical(rho, q, t, eta, 0.0).unwrap();
                let two = rhs_spherical_reward_only(rho, q, t, eta).unwrap();
                assert!((sph - two).abs() <= 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn spherical_is_chain_rule_of_unconstrained(
            rho in -0.999f64..0.999, q in 0.1f64..5.0, t in 1usize..20, e1 in 0.0f64..3.0, e2 in 0.0f64..3.0
        ) {
            let s = st(rho, q);
            let f = rhs_all_correct(&s, t, e1, e2).unwrap();
            let via_chain = chain_rule_rho(&s, f.dr, f.dq).unwrap();
            let direct = rhs_spherical(rho, q, t, e1, e2).unwrap();
            prop_assert!((via_chain - direct).abs() < 1e-12 * (1.0 + direct.abs()));
        }

        #[test]
        fn rho_never_leaves_unit_interval(
            q in 0.1f64..5.0, t in 1usize..20, e1 in 0.0f64..3.0, e2 in 0.0f64..3.0, beta in 0.0f64..0.5, n in 1usize..20
        ) {
            let spec = EpisodeSpec::new(t);
            let protocols = [
                RewardProtocol::AllCorrect { eta1: e1, eta2: e2 },
                RewardProtocol::NOrMore { n: n.min(t), eta1: e1 },
                RewardProtocol::Breadcrumb { eta1: e1, beta },
            ];
            for p in protocols {
                prop_assert!(drho(1.0, q, &spec, &p).unwrap() <= 1e-15);
            }
        }
    }

    fn fig1(step: f64) -> OdeConfig {
        let mut cfg = OdeConfig::new(
            EpisodeSpec::new(12),
            RewardProtocol::AllCorrect { eta1: 1.0, eta2: 0.0 },
            8000.0,
        );
        cfg.integrator = Integrator::Rk4 { step };
        cfg.grid = GridSpec::linear(81);
        cfg
    }

    #[test]
    fn fig1_configuration_learns() {
        let tr = integrate(&fig1(0.1)).unwrap();
        assert!(tr.rows.windows(2).all(|w| w[1].q >= w[0].q));
        let last = tr.last().unwrap();
        assert!(last.eps_g < 0.05, "eps_g = {}", last.eps_g);
        assert_eq!(last.alpha, 8000.0);
        assert_eq!(tr.rows[0].t, 0.0);
        assert_eq!(last.t, 8000.0 * D_REF);
    }

    #[test]
    fn step_halving_contract() {
        let a = integrate(&fig1(0.1)).unwrap();
        let b = integrate(&fig1(0.05)).unwrap();
        let (ra, rb) = (a.last().unwrap(), b.last().unwrap());
        assert!(((ra.r - rb.r) / rb.r).abs() < 1e-8);
        assert!(((ra.q - rb.q) / rb.q).abs() < 1e-8);
    }

    #[test]
    fn adaptive_matches_rk4() {
        let mut cfg = fig1(0.05);
        let a = integrate(&cfg).unwrap();
        cfg.integrator = Integrator::Adaptive { abs_tol: 1e-10, rel_tol: 1e-10 };
        let b = integrate(&cfg).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.alpha, y.alpha);
            assert!((x.rho - y.rho).abs() < 1e-6, "{} vs {}", x.rho, y.rho);
        }
    }

    #[test]
    fn zero_rates_are_constant() {
        let mut cfg = OdeConfig::new(EpisodeSpec::new(3), RewardProtocol::AllCorrect { eta1: 0.0, eta2: 0.0 }, 10.0);
        cfg.init = InitState { r0: 0.2, q0: 1.5 };
        for spherical in [false, true] {
            cfg.spherical = spherical;
            let tr = integrate(&cfg).unwrap();
            assert!(tr.rows.iter().all(|r| (r.r - 0.2).abs() < 1e-15 && r.q == 1.5));
        }
    }

    #[test]
    fn log_grid_contains_endpoints() {
        let g = GridSpec::default().alphas(50.0).unwrap();
        assert_eq!(g.len(), 200);
        assert_eq!(g[0], 0.0);
        assert_eq!(*g.last().unwrap(), 50.0);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert!(GridSpec::linear(1).alphas(1.0).is_err());
    }

    #[test]
    fn first_passage_hits_target() {
        let mut cfg = OdeConfig::new(EpisodeSpec::new(3), RewardProtocol::AllCorrect { eta1: 1.0, eta2: 0.0 }, 1e4);
        cfg.spherical = true;
        let hit = spherical_first_passage(&cfg, 0.5, 1e-10).unwrap();
        let alpha = hit.alpha.unwrap();
        cfg.alpha_max = alpha;
        cfg.grid = GridSpec::linear(2);
        cfg.integrator = Integrator::Adaptive { abs_tol: 1e-12, rel_tol: 0.0 };
        let tr = integrate(&cfg).unwrap();
        assert_abs_diff_eq!(tr.last().unwrap().rho, 0.5, epsilon = 1e-7);
        let miss = spherical_first_passage(&cfg, 0.9999, 1e-10).unwrap();
        assert!(miss.alpha.is_none());
    }
}
