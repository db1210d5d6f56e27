//! Macroscopic state of a perceptron learner and the closed-form scalar
//! functions every engine shares.
//!
//! The student and teacher are summarised by the overlaps
//! `R = w.w*/D`, `Q = w.w/D` and `S = w*.w*/D`. The teacher is normalised so
//! that `S = 1`; every quantity below depends on the state only through the
//! normalised overlap `rho = R / sqrt(Q)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};

/// Drift allowed on `|rho|` beyond 1 before it is treated as a bug.
pub const RHO_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderState {
    /// Teacher-student overlap.
    pub r: f64,
    /// Student self-overlap.
    pub q: f64,
    /// Teacher self-overlap, frozen at 1.
    #[serde(default = "one")]
    pub s: f64,
}

fn one() -> f64 {
    1.0
}

impl OrderState {
    pub fn new(r: f64, q: f64) -> Result<Self> {
        let state = OrderState { r, q, s: 1.0 };
        state.rho()?;
        Ok(state)
    }

    /// State with the given normalised overlap and self-overlap.
    pub fn from_rho(rho: f64, q: f64) -> Result<Self> {
        if !(q > 0.0) || !q.is_finite() {
            return Err(Error::InvalidState(format!("Q must be positive, got {q}")));
        }
        let rho = clamp_rho(rho)?;
        Ok(OrderState {
            r: rho * q.sqrt(),
            q,
            s: 1.0,
        })
    }

    pub fn rho(&self) -> Result<f64> {
        rho(self)
    }

    pub fn eps_g(&self) -> Result<f64> {
        generalisation_error(self.rho()?)
    }

    pub fn p_correct(&self) -> Result<f64> {
        p_correct(self.rho()?)
    }
}

/// Normalised overlap `R / sqrt(Q)`, clamped to `[-1, 1]` within [`RHO_TOL`].
pub fn rho(state: &OrderState) -> Result<f64> {
    if !(state.q > 0.0) || !state.q.is_finite() {
        return Err(Error::InvalidState(format!(
            "Q must be positive, got {}",
            state.q
        )));
    }
    if !state.r.is_finite() {
        return Err(Error::InvalidState(format!("R is not finite: {}", state.r)));
    }
    let raw = state.r / state.q.sqrt();
    clamp_rho(raw).map_err(|_| {
        Error::InvalidState(format!(
            "|R| exceeds sqrt(Q): R = {}, Q = {}",
            state.r, state.q
        ))
    })
}

/// Accepts `rho` in `[-1 - RHO_TOL, 1 + RHO_TOL]` and clamps it into `[-1, 1]`.
pub fn clamp_rho(rho: f64) -> Result<f64> {
    if !rho.is_finite() || rho.abs() > 1.0 + RHO_TOL {
        return Err(Error::Domain(format!("rho = {rho} is outside [-1, 1]")));
    }
    Ok(rho.clamp(-1.0, 1.0))
}

/// Probability that student and teacher disagree on a Gaussian input.
pub fn generalisation_error(rho: f64) -> Result<f64> {
    Ok(clamp_rho(rho)?.acos() / PI)
}

/// Probability of a single correct decision, `1 - eps_g`.
pub fn p_correct(rho: f64) -> Result<f64> {
    Ok(1.0 - generalisation_error(rho)?)
}

/// `base^k` for a probability `base`, evaluated as `exp(k ln base)`.
///
/// `base == 0` is an exact branch so that `0^0 = 1` and `0^k = 0`.
pub fn prob_pow(base: f64, k: usize) -> f64 {
    if k == 0 {
        1.0
    } else if base <= 0.0 {
        0.0
    } else {
        (k as f64 * base.ln()).exp()
    }
}

/// `C(n, k) p^k (1-p)^(n-k)`, computed in log space.
pub fn binomial_pmf(n: usize, k: usize, p: f64) -> f64 {
    if k > n {
        return 0.0;
    }
    if p <= 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    if p >= 1.0 {
        return if k == n { 1.0 } else { 0.0 };
    }
    let ln = ln_binomial(n as u64, k as u64) + k as f64 * p.ln() + (n - k) as f64 * (-p).ln_1p();
    ln.exp()
}

/// `P(X >= k)` for `X ~ Binomial(n, p)`.
pub fn binomial_tail(n: usize, k: usize, p: f64) -> f64 {
    (k..=n).map(|i| binomial_pmf(n, i, p)).sum()
}

/// Episode length and discount.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    #[serde(rename = "T", alias = "length")]
    pub length: usize,
    #[serde(default = "one")]
    pub gamma: f64,
}

impl EpisodeSpec {
    pub fn new(length: usize) -> Self {
        EpisodeSpec { length, gamma: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::validation("spec.T", "episode length must be >= 1"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::validation(
                "spec.gamma",
                format!("discount must lie in (0, 1], got {}", self.gamma),
            ));
        }
        Ok(())
    }
}

/// Reward condition together with the effective learning rates.
///
/// Rates are learning rate times reward magnitude, so `eta1 = eta * r1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardProtocol {
    /// Reward `eta1` when every decision is correct, penalty `eta2` otherwise.
    AllCorrect {
        eta1: f64,
        #[serde(default)]
        eta2: f64,
    },
    /// Reward `eta1` when at least `n` of the `T` decisions are correct.
    NOrMore { n: usize, eta1: f64 },
    /// `eta1` for a perfect episode plus `beta` for every correct decision.
    Breadcrumb { eta1: f64, beta: f64 },
    /// `r_sub` for surviving the first `t0` decisions plus `eta1` for all `T`.
    Subtask { t0: usize, r_sub: f64, eta1: f64 },
}

impl RewardProtocol {
    pub fn name(&self) -> &'static str {
        match self {
            RewardProtocol::AllCorrect { .. } => "all_correct",
            RewardProtocol::NOrMore { .. } => "n_or_more",
            RewardProtocol::Breadcrumb { .. } => "breadcrumb",
            RewardProtocol::Subtask { .. } => "subtask",
        }
    }

    /// Checks rates and integer parameters against the episode length.
    pub fn validate(&self, spec: &EpisodeSpec) -> Result<()> {
        fn rate(field: &str, v: f64) -> Result<()> {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::validation(
                    field,
                    format!("rate must be finite and non-negative, got {v}"),
                ));
            }
            Ok(())
        }
        let t = spec.length;
        match *self {
            RewardProtocol::AllCorrect { eta1, eta2 } => {
                rate("protocol.eta1", eta1)?;
                rate("protocol.eta2", eta2)?;
            }
            RewardProtocol::NOrMore { n, eta1 } => {
                rate("protocol.eta1", eta1)?;
                if n == 0 || n > t {
                    return Err(Error::validation(
                        "protocol.n",
                        format!("need 1 <= n <= T = {t}, got {n}"),
                    ));
                }
            }
            RewardProtocol::Breadcrumb { eta1, beta } => {
                rate("protocol.eta1", eta1)?;
                rate("protocol.beta", beta)?;
            }
            RewardProtocol::Subtask { t0, r_sub, eta1 } => {
                rate("protocol.eta1", eta1)?;
                rate("protocol.r_sub", r_sub)?;
                if t0 == 0 || t0 >= t {
                    return Err(Error::validation(
                        "protocol.t0",
                        format!("need 1 <= t0 < T = {t}, got {t0}"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// True when every rate is zero, so no update can ever happen.
    pub fn is_silent(&self) -> bool {
        match *self {
            RewardProtocol::AllCorrect { eta1, eta2 } => eta1 == 0.0 && eta2 == 0.0,
            RewardProtocol::NOrMore { eta1, .. } => eta1 == 0.0,
            RewardProtocol::Breadcrumb { eta1, beta } => eta1 == 0.0 && beta == 0.0,
            RewardProtocol::Subtask { r_sub, eta1, .. } => r_sub == 0.0 && eta1 == 0.0,
        }
    }
}

/// Expected undiscounted return of one episode for a student at overlap `rho`,
/// assuming independent per-step correctness with probability `P`.
pub fn expected_reward(protocol: &RewardProtocol, spec: &EpisodeSpec, rho: f64) -> Result<f64> {
    let p = p_correct(rho)?;
    let t = spec.length;
    let all = prob_pow(p, t);
    Ok(match *protocol {
        RewardProtocol::AllCorrect { eta1, eta2 } => eta1 * all - eta2 * (1.0 - all),
        RewardProtocol::NOrMore { n, eta1 } => eta1 * binomial_tail(t, n, p),
        RewardProtocol::Breadcrumb { eta1, beta } => eta1 * all + beta * t as f64 * p,
        RewardProtocol::Subtask { t0, r_sub, eta1 } => eta1 * all + r_sub * prob_pow(p, t0),
    })
}
