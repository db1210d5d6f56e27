//! Time series of order parameters shared by the simulator and the ODE engine.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "alpha,t,R,Q,rho,eps_g,expected_reward,empirical_reward";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    /// Episodes divided by input dimension.
    pub alpha: f64,
    /// Episode count.
    pub t: f64,
    pub r: f64,
    pub q: f64,
    pub rho: f64,
    pub eps_g: f64,
    pub expected_reward: f64,
    /// Trailing-window mean of realised returns; simulation only.
    pub empirical_reward: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
}

/// Shortest decimal that still round-trips: 17 significant digits.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&TrajectoryRow> {
        self.rows.last()
    }

    pub fn alpha_range(&self) -> Option<(f64, f64)> {
        Some((self.rows.first()?.alpha, self.rows.last()?.alpha))
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::with_capacity(self.rows.len() * 200);
        out.push_str(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            let emp = row.empirical_reward.map(fmt_float).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                fmt_float(row.alpha),
                fmt_float(row.t),
                fmt_float(row.r),
                fmt_float(row.q),
                fmt_float(row.rho),
                fmt_float(row.eps_g),
                fmt_float(row.expected_reward),
                emp
            );
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_csv_string().as_bytes())?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty trajectory CSV".into()))??;
        if header.trim() != CSV_HEADER {
            return Err(Error::Parse(format!("unexpected header `{header}`")));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 8 {
                return Err(Error::Parse(format!(
                    "line {}: expected 8 fields, got {}",
                    i + 2,
                    fields.len()
                )));
            }
            let num = |k: usize| -> Result<f64> {
                fields[k]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: field {k}: {e}", i + 2)))
            };
            let emp = if fields[7].trim().is_empty() {
                None
            } else {
                Some(num(7)?)
            };
            rows.push(TrajectoryRow {
                alpha: num(0)?,
                t: num(1)?,
                r: num(2)?,
                q: num(3)?,
                rho: num(4)?,
                eps_g: num(5)?,
                expected_reward: num(6)?,
                empirical_reward: emp,
            });
        }
        Ok(Trajectory { rows })
    }

    /// Linear interpolation of every column at `alpha`; `None` outside the
    /// covered range.
    pub fn interpolate(&self, alpha: f64) -> Option<TrajectoryRow> {
        let (lo, hi) = self.alpha_range()?;
        if alpha < lo || alpha > hi {
            return None;
        }
        let idx = self.rows.partition_point(|r| r.alpha < alpha);
        if idx < self.rows.len() && self.rows[idx].alpha == alpha {
            return Some(self.rows[idx]);
        }
        let a = &self.rows[idx - 1];
        let b = &self.rows[idx];
        let w = (alpha - a.alpha) / (b.alpha - a.alpha);
        let lerp = |x: f64, y: f64| x + w * (y - x);
        Some(TrajectoryRow {
            alpha,
            t: lerp(a.t, b.t),
            r: lerp(a.r, b.r),
            q: lerp(a.q, b.q),
            rho: lerp(a.rho, b.rho),
            eps_g: lerp(a.eps_g, b.eps_g),
            expected_reward: lerp(a.expected_reward, b.expected_reward),
            empirical_reward: match (a.empirical_reward, b.empirical_reward) {
                (Some(x), Some(y)) => Some(lerp(x, y)),
                _ => None,
            },
        })
    }

    /// Column-wise mean of trajectories recorded on the same grid, in the
    /// order given.
    pub fn mean(trajectories: &[Trajectory]) -> Result<Trajectory> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::Degenerate("no trajectories to average".into()))?;
        let n = trajectories.len() as f64;
        for tr in trajectories {
            if tr.len() != first.len()
                || tr.rows.iter().zip(&first.rows).any(|(a, b)| a.alpha != b.alpha)
            {
                return Err(Error::Degenerate(
                    "trajectories are not on a common grid".into(),
                ));
            }
        }
        let rows = (0..first.len())
            .map(|i| {
                let mut acc = TrajectoryRow {
                    alpha: first.rows[i].alpha,
                    t: first.rows[i].t,
                    r: 0.0,
                    q: 0.0,
                    rho: 0.0,
                    eps_g: 0.0,
                    expected_reward: 0.0,
                    empirical_reward: Some(0.0),
                };
                for tr in trajectories {
                    let row = &tr.rows[i];
                    acc.r += row.r / n;
                    acc.q += row.q / n;
                    acc.rho += row.rho / n;
                    acc.eps_g += row.eps_g / n;
                    acc.expected_reward += row.expected_reward / n;
                    acc.empirical_reward = match (acc.empirical_reward, row.empirical_reward) {
                        (Some(s), Some(v)) => Some(s + v / n),
                        _ => None,
                    };
                }
                acc
            })
            .collect();
        Ok(Trajectory { rows })
    }
}
