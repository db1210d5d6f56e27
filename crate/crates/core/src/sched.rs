//! Greedy hyper-parameter schedules.
//!
//! The closed forms pick, at the current `(rho, Q)`, the episode length or the
//! learning rate that maximises the instantaneous growth of `rho` for the
//! reward-only spherical flow. Both diverge as `rho -> 0`; below `rho_floor`
//! they fall back to `T = 1` and `eta = eta_max`.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::p_correct;
use crate::ode::{integrate_traced, OdeConfig, ScheduleTraceRow};
use crate::trajectory::Trajectory;

pub const DEFAULT_RHO_FLOOR: f64 = 1e-3;

fn default_rho_floor() -> f64 {
    DEFAULT_RHO_FLOOR
}

fn default_t_min() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabulatedPoint {
    pub alpha: f64,
    #[serde(rename = "T")]
    pub length: usize,
    pub eta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ScheduleMode {
    ConstantT {
        #[serde(rename = "T")]
        length: usize,
    },
    ConstantEta {
        eta: f64,
    },
    OptimalT {
        eta: f64,
        #[serde(default = "default_t_min")]
        t_min: usize,
        t_max: usize,
    },
    OptimalEta {
        #[serde(rename = "T")]
        length: usize,
        eta_max: f64,
    },
    /// Piecewise-constant `(T, eta)`; each point applies from its `alpha` on.
    Tabulated { points: Vec<TabulatedPoint> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    #[serde(flatten)]
    pub mode: ScheduleMode,
    #[serde(default = "default_rho_floor")]
    pub rho_floor: f64,
}

/// Episode length and learning-rate multiplier in force for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Setting {
    pub length: usize,
    pub eta: f64,
}

impl ScheduleSpec {
    pub fn new(mode: ScheduleMode) -> Self {
        ScheduleSpec {
            mode,
            rho_floor: DEFAULT_RHO_FLOOR,
        }
    }

    pub fn label(&self) -> String {
        match &self.mode {
            ScheduleMode::ConstantT { length } => format!("constant_T{length}"),
            ScheduleMode::ConstantEta { eta } => format!("constant_eta{eta}"),
            ScheduleMode::OptimalT { eta, .. } => format!("optimal_T_eta{eta}"),
            ScheduleMode::OptimalEta { length, .. } => format!("optimal_eta_T{length}"),
            ScheduleMode::Tabulated { .. } => "tabulated".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::validation(field, format!("must be positive, got {v}")))
            }
        };
        if !(self.rho_floor >= 0.0 && self.rho_floor < 1.0) {
            return Err(Error::validation("schedule.rho_floor", "must lie in [0, 1)"));
        }
        match &self.mode {
            ScheduleMode::ConstantT { length } => {
                if *length == 0 {
                    return Err(Error::validation("schedule.T", "must be >= 1"));
                }
            }
            ScheduleMode::ConstantEta { eta } => positive("schedule.eta", *eta)?,
            ScheduleMode::OptimalT { eta, t_min, t_max } => {
                positive("schedule.eta", *eta)?;
                if *t_min == 0 || t_max < t_min {
                    return Err(Error::validation(
                        "schedule.t_max",
                        "need 1 <= t_min <= t_max",
                    ));
                }
            }
            ScheduleMode::OptimalEta { length, eta_max } => {
                if *length == 0 {
                    return Err(Error::validation("schedule.T", "must be >= 1"));
                }
                positive("schedule.eta_max", *eta_max)?;
            }
            ScheduleMode::Tabulated { points } => {
                if points.is_empty() {
                    return Err(Error::validation("schedule.points", "needs at least one point"));
                }
                if points.windows(2).any(|w| w[1].alpha <= w[0].alpha) {
                    return Err(Error::validation(
                        "schedule.points",
                        "alpha must be strictly increasing",
                    ));
                }
                for (i, p) in points.iter().enumerate() {
                    if p.length == 0 {
                        return Err(Error::validation(format!("schedule.points[{i}].T"), "must be >= 1"));
                    }
                    positive(&format!("schedule.points[{i}].eta"), p.eta)?;
                }
            }
        }
        Ok(())
    }

    /// Setting at time `alpha` and state `(rho, q)`; `base_length` is used
    /// by modes that leave `T` alone.
    pub fn resolve(&self, alpha: f64, rho: f64, q: f64, base_length: usize) -> Result<Setting> {
        Ok(match &self.mode {
            ScheduleMode::ConstantT { length } => Setting {
                length: *length,
                eta: 1.0,
            },
            ScheduleMode::ConstantEta { eta } => Setting {
                length: base_length,
                eta: *eta,
            },
            ScheduleMode::OptimalT { eta, t_min, t_max } => Setting {
                length: optimal_t(rho, q, *eta, *t_max, self.rho_floor)?.max(*t_min),
                eta: *eta,
            },
            ScheduleMode::OptimalEta { length, eta_max } => Setting {
                length: *length,
                eta: optimal_eta(rho, q, *length, *eta_max, self.rho_floor)?,
            },
            ScheduleMode::Tabulated { points } => {
                let idx = points.partition_point(|p| p.alpha <= alpha);
                let p = points[idx.saturating_sub(1)];
                Setting {
                    length: p.length,
                    eta: p.eta,
                }
            }
        })
    }
}

fn check_args(rho: f64, q: f64) -> Result<()> {
    if !(q > 0.0) || !q.is_finite() {
        return Err(Error::Domain(format!("Q must be positive, got {q}")));
    }
    if !rho.is_finite() || rho.abs() > 1.0 {
        return Err(Error::Domain(format!("rho = {rho} is outside [-1, 1]")));
    }
    Ok(())
}

/// Unrounded maximiser over real `T` of the reward-only spherical flow.
/// Only meaningful for `0 < rho < 1`.
pub fn optimal_t_continuous(rho: f64, q: f64, eta: f64) -> Result<f64> {
    check_args(rho, q)?;
    if !(eta > 0.0) {
        return Err(Error::Domain(format!("eta must be positive, got {eta}")));
    }
    let p = p_correct(rho)?;
    let one_m = 1.0 - rho * rho;
    let root_q = (2.0 * q).sqrt();
    let scale = PI.sqrt() / 2.0 * eta * rho * p / (one_m * root_q);
    let inner = 1.0 - root_q / (eta * rho) * 4.0 * one_m / (PI.sqrt() * p * p.ln());
    Ok(scale * (1.0 + inner.sqrt()))
}

/// Greedy episode length at fixed `eta`, floored and clamped to `[1, t_max]`.
pub fn optimal_t(rho: f64, q: f64, eta: f64, t_max: usize, rho_floor: f64) -> Result<usize> {
    check_args(rho, q)?;
    let t_max = t_max.max(1);
    if rho <= rho_floor {
        return Ok(1);
    }
    if rho >= 1.0 - 1e-12 {
        return Ok(t_max);
    }
    let t = optimal_t_continuous(rho, q, eta)?.floor();
    if !t.is_finite() || t >= t_max as f64 {
        return Ok(t_max);
    }
    Ok((t as usize).clamp(1, t_max))
}

/// Unclamped greedy learning rate at fixed `T`.
pub fn optimal_eta_raw(rho: f64, q: f64, length: usize) -> Result<f64> {
    check_args(rho, q)?;
    let p = p_correct(rho)?;
    Ok((q / (2.0 * PI)).sqrt() * length as f64 * (1.0 - rho * rho) / (rho * p))
}

/// Greedy learning rate at fixed `T`, capped at `eta_max`.
pub fn optimal_eta(rho: f64, q: f64, length: usize, eta_max: f64, rho_floor: f64) -> Result<f64> {
    check_args(rho, q)?;
    if length == 0 {
        return Err(Error::Domain("T must be >= 1".into()));
    }
    if rho <= rho_floor {
        return Ok(eta_max);
    }
    Ok(optimal_eta_raw(rho, q, length)?.min(eta_max))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleRun {
    pub schedule: ScheduleSpec,
    pub trajectory: Trajectory,
    pub trace: Vec<ScheduleTraceRow>,
}

/// Integrates `base` once per schedule on the base grid.
pub fn run_schedule_comparison(base: &OdeConfig, schedules: &[ScheduleSpec]) -> Result<Vec<ScheduleRun>> {
    schedules
        .par_iter()
        .map(|s| {
            let mut cfg = base.clone();
            cfg.schedule = Some(s.clone());
            let (trajectory, trace) = integrate_traced(&cfg)?;
            Ok(ScheduleRun {
                schedule: s.clone(),
                trajectory,
                trace,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn spot_values() {
        assert_eq!(optimal_t(0.9, 1.0, 1.0, 1000, DEFAULT_RHO_FLOOR).unwrap(), 8);
        let t = optimal_t_continuous(0.9, 1.0, 1.0).unwrap();
        assert!((t - 8.81).abs() < 0.01, "{t}");
        let eta = optimal_eta(0.5, 1.0, 8, 100.0, DEFAULT_RHO_FLOOR).unwrap();
        assert_abs_diff_eq!(eta, 7.181, epsilon = 1e-3);
        let eta4 = optimal_eta(0.5, 4.0, 8, 100.0, DEFAULT_RHO_FLOOR).unwrap();
        assert_abs_diff_eq!(eta4, 2.0 * eta, epsilon = 1e-12);
    }

    #[test]
    fn fallbacks_and_caps() {
        assert_eq!(optimal_t(0.0011, 1.0, 1.0, 50, 1e-3).unwrap(), 1);
        assert_eq!(optimal_t(0.0005, 1.0, 1.0, 50, 1e-3).unwrap(), 1);
        assert_eq!(optimal_t(1.0, 1.0, 1.0, 50, 1e-3).unwrap(), 50);
        assert_eq!(optimal_eta(0.0, 1.0, 8, 3.0, 1e-3).unwrap(), 3.0);
        assert!(optimal_eta(0.999999, 1.0, 8, 3.0, 1e-3).unwrap() < 0.01);
        assert!(optimal_t(0.5, 0.0, 1.0, 5, 1e-3).is_err());
    }

    #[test]
    fn optimal_t_is_monotone() {
        let mut last = 0;
        for i in 1..2000 {
            let rho = i as f64 / 2000.0;
            let t = optimal_t(rho, 1.0, 1.0, 1_000_000, DEFAULT_RHO_FLOOR).unwrap();
            assert!(t >= last, "rho {rho}: {t} < {last}");
            last = t;
        }
        assert!(last > 100);
    }

    #[test]
    fn tabulated_lookup() {
        let s = ScheduleSpec::new(ScheduleMode::Tabulated {
            points: vec![
                TabulatedPoint { alpha: 0.0, length: 2, eta: 1.0 },
                TabulatedPoint { alpha: 5.0, length: 4, eta: 0.5 },
            ],
        });
        s.validate().unwrap();
        assert_eq!(s.resolve(4.9, 0.1, 1.0, 9).unwrap(), Setting { length: 2, eta: 1.0 });
        assert_eq!(s.resolve(5.0, 0.1, 1.0, 9).unwrap(), Setting { length: 4, eta: 0.5 });
        let bad = ScheduleSpec::new(ScheduleMode::Tabulated {
            points: vec![
                TabulatedPoint { alpha: 1.0, length: 2, eta: 1.0 },
                TabulatedPoint { alpha: 1.0, length: 4, eta: 0.5 },
            ],
        });
        assert!(bad.validate().is_err());
    }

    #[test]
    fn schedule_serde_shape() {
        let s: ScheduleSpec = toml::from_str("mode = \"optimal_t\"\neta = 1.0\nt_max = 40\n").unwrap();
        assert_eq!(
            s.mode,
            ScheduleMode::OptimalT { eta: 1.0, t_min: 1, t_max: 40 }
        );
        assert_eq!(s.rho_floor, DEFAULT_RHO_FLOOR);
    }
}
