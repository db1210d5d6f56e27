//! Fixed points of the spherical `rho` flow under all-or-nothing reward with
//! penalty, the phase diagram they induce, unconstrained flow fields and
//! convergence times.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EpisodeSpec, OrderState, RewardProtocol};
use crate::ode::{
    chain_rule_rho, integrate, rhs_all_correct, rhs_spherical, spherical_first_passage, GridSpec,
    InitState, Integrator, OdeConfig, D_REF,
};
use crate::trajectory::fmt_float;

/// Uniform scan resolution on `(-1 + SCAN_EDGE, 1 - SCAN_EDGE)`.
pub const SCAN_POINTS: usize = 10_000;
pub const SCAN_EDGE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Stable,
    Unstable,
}

impl Stability {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stability::Stable => "stable",
            Stability::Unstable => "unstable",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub rho: f64,
    pub stability: Stability,
    /// `|d rho / d alpha|` at `rho`.
    pub residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseLabel {
    Easy,
    HybridHard,
}

impl PhaseLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            PhaseLabel::Easy => "easy",
            PhaseLabel::HybridHard => "hybrid_hard",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPointSet {
    /// Sorted by `rho`.
    pub points: Vec<FixedPoint>,
    pub length: usize,
    pub eta1: f64,
    pub eta2: f64,
    pub q: f64,
}

impl FixedPointSet {
    pub fn label(&self) -> PhaseLabel {
        if self.points.len() == 3 {
            PhaseLabel::HybridHard
        } else {
            PhaseLabel::Easy
        }
    }

    pub fn stable(&self) -> impl Iterator<Item = &FixedPoint> {
        self.points.iter().filter(|p| p.stability == Stability::Stable)
    }

    /// Stable point the flow reaches from `rho0`: the nearest one in the
    /// direction the flow initially moves.
    pub fn reachable_from(&self, rho0: f64) -> Result<f64> {
        let f0 = rhs_spherical(rho0, self.q, self.length, self.eta1, self.eta2)?;
        let hit = if f0 > 0.0 {
            self.points.iter().find(|p| p.rho > rho0)
        } else if f0 < 0.0 {
            self.points.iter().rev().find(|p| p.rho < rho0)
        } else {
            self.points
                .iter()
                .min_by(|a, b| (a.rho - rho0).abs().total_cmp(&(b.rho - rho0).abs()))
        };
        match hit {
            Some(p) if p.stability == Stability::Stable => Ok(p.rho),
            Some(p) if f0 == 0.0 => Ok(p.rho),
            _ => Err(Error::Degenerate(format!(
                "no stable fixed point reachable from rho = {rho0}"
            ))),
        }
    }
}

fn bisect(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let pos_a = f(a) > 0.0;
    loop {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        if (f(mid) > 0.0) == pos_a {
            a = mid;
        } else {
            b = mid;
        }
    }
    if f(a).abs() <= f(b).abs() {
        a
    } else {
        b
    }
}

/// Minimiser of `g` on `[a, b]` by golden-section search.
fn golden_min(g: &impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut gc, mut gd) = (g(c), g(d));
    for _ in 0..200 {
        if (b - a) <= 1e-15 * (1.0 + a.abs()) {
            break;
        }
        if gc < gd {
            b = d;
            d = c;
            gd = gc;
            c = b - inv_phi * (b - a);
            gc = g(c);
        } else {
            a = c;
            c = d;
            gc = gd;
            d = a + inv_phi * (b - a);
            gd = g(d);
        }
    }
    0.5 * (a + b)
}

/// All sign changes of `f` on the scan interval, refined to machine
/// precision. Discrete local extrema that stay on one side of zero are
/// refined too, which exposes root pairs closer together than the grid.
fn scan_roots(f: impl Fn(f64) -> f64, n: usize) -> Vec<(f64, Stability)> {
    let lo = -1.0 + SCAN_EDGE;
    let hi = 1.0 - SCAN_EDGE;
    let xs: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let fs: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
    let stability = |a: f64| {
        if f(a) > 0.0 {
            Stability::Stable
        } else {
            Stability::Unstable
        }
    };
    let mut roots = Vec::new();
    for i in 0..n - 1 {
        if (fs[i] > 0.0) != (fs[i + 1] > 0.0) {
            roots.push((bisect(&f, xs[i], xs[i + 1]), stability(xs[i])));
            continue;
        }
        if i == 0 {
            continue;
        }
        let same = (fs[i - 1] > 0.0) == (fs[i] > 0.0);
        if same && fs[i].abs() < fs[i - 1].abs() && fs[i].abs() <= fs[i + 1].abs() {
            let s = if fs[i] > 0.0 { 1.0 } else { -1.0 };
            let g = |x: f64| s * f(x);
            let m = golden_min(&g, xs[i - 1], xs[i + 1]);
            if g(m) <= 0.0 {
                roots.push((bisect(&f, xs[i - 1], m), stability(xs[i - 1])));
                roots.push((bisect(&f, m, xs[i + 1]), stability(m)));
            }
        }
    }
    roots.sort_by(|a, b| a.0.total_cmp(&b.0));
    roots
}

fn check_rates(eta1: f64, eta2: f64, q: f64) -> Result<()> {
    if !(eta1 >= 0.0 && eta2 >= 0.0) || !eta1.is_finite() || !eta2.is_finite() {
        return Err(Error::Domain(format!(
            "rates must be finite and non-negative, got eta1 = {eta1}, eta2 = {eta2}"
        )));
    }
    if eta1 == 0.0 && eta2 == 0.0 {
        return Err(Error::Degenerate(
            "with both rates zero every rho is a fixed point".into(),
        ));
    }
    if !(q > 0.0) || !q.is_finite() {
        return Err(Error::InvalidState(format!("Q must be positive, got {q}")));
    }
    Ok(())
}

pub fn find_fixed_points(length: usize, eta1: f64, eta2: f64, q: f64) -> Result<FixedPointSet> {
    find_fixed_points_with(length, eta1, eta2, q, SCAN_POINTS)
}

/// As [`find_fixed_points`] with a custom scan resolution.
pub fn find_fixed_points_with(
    length: usize,
    eta1: f64,
    eta2: f64,
    q: f64,
    scan_points: usize,
) -> Result<FixedPointSet> {
    check_rates(eta1, eta2, q)?;
    rhs_spherical(0.0, q, length, eta1, eta2)?;
    if scan_points < 3 {
        return Err(Error::Domain("scan needs at least 3 points".into()));
    }
    let f = |rho: f64| rhs_spherical(rho, q, length, eta1, eta2).unwrap_or(f64::NAN);
    let roots = scan_roots(f, scan_points);
    if roots.len() > 3 {
        return Err(Error::TooManyFixedPoints { count: roots.len() });
    }
    if roots.is_empty() {
        return Err(Error::Degenerate(format!(
            "no interior fixed point for T = {length}, eta1 = {eta1}, eta2 = {eta2}"
        )));
    }
    let points = roots
        .into_iter()
        .map(|(rho, stability)| FixedPoint {
            rho,
            stability,
            residual: f(rho).abs(),
        })
        .collect();
    Ok(FixedPointSet {
        points,
        length,
        eta1,
        eta2,
        q,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseCell {
    pub eta1: f64,
    pub eta2: f64,
    pub label: PhaseLabel,
    /// Stable point reached from `rho = 0`.
    pub rho_from_zero: Option<f64>,
}

/// One cell per `(eta1, eta2)` pair, `eta1` outermost.
pub fn phase_map(length: usize, q: f64, eta1_grid: &[f64], eta2_grid: &[f64]) -> Result<Vec<PhaseCell>> {
    phase_map_with(length, q, eta1_grid, eta2_grid, SCAN_POINTS)
}

pub fn phase_map_with(
    length: usize,
    q: f64,
    eta1_grid: &[f64],
    eta2_grid: &[f64],
    scan_points: usize,
) -> Result<Vec<PhaseCell>> {
    let cells: Vec<(f64, f64)> = eta1_grid
        .iter()
        .flat_map(|&a| eta2_grid.iter().map(move |&b| (a, b)))
        .collect();
    cells
        .par_iter()
        .map(|&(eta1, eta2)| {
            let set = find_fixed_points_with(length, eta1, eta2, q, scan_points)?;
            Ok(PhaseCell {
                eta1,
                eta2,
                label: set.label(),
                rho_from_zero: set.reachable_from(0.0).ok(),
            })
        })
        .collect()
}

/// Share of cells labelled hybrid-hard.
pub fn hybrid_fraction(cells: &[PhaseCell]) -> f64 {
    if cells.is_empty() {
        return 0.0;
    }
    cells.iter().filter(|c| c.label == PhaseLabel::HybridHard).count() as f64 / cells.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowNode {
    pub rho: f64,
    pub q: f64,
    pub drho: f64,
    pub dq: f64,
}

/// Unconstrained flow projected onto `(rho, Q)`, `rho` outermost.
pub fn flow_field(length: usize, eta1: f64, eta2: f64, rho_grid: &[f64], q_grid: &[f64]) -> Result<Vec<FlowNode>> {
    let mut out = Vec::with_capacity(rho_grid.len() * q_grid.len());
    for &rho in rho_grid {
        for &q in q_grid {
            let state = OrderState::from_rho(rho, q)?;
            let f = rhs_all_correct(&state, length, eta1, eta2)?;
            out.push(FlowNode {
                rho,
                q,
                drho: chain_rule_rho(&state, f.dr, f.dq)?,
                dq: f.dq,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowOutcome {
    pub eta1: f64,
    pub eta2: f64,
    pub rho: f64,
    pub q: f64,
    pub eps_g: f64,
    /// Final generalisation error below the success threshold.
    pub aligned: bool,
}

/// Integrates the unconstrained flow from `(rho, Q) = (0, 1)` to `alpha_max`.
pub fn flow_outcome(length: usize, eta1: f64, eta2: f64, alpha_max: f64, eps_threshold: f64) -> Result<FlowOutcome> {
    let mut cfg = OdeConfig::new(
        EpisodeSpec::new(length),
        RewardProtocol::AllCorrect { eta1, eta2 },
        alpha_max,
    );
    cfg.init = InitState { r0: 0.0, q0: 1.0 };
    cfg.grid = GridSpec::linear(2);
    cfg.integrator = Integrator::Adaptive {
        abs_tol: 1e-9,
        rel_tol: 1e-9,
    };
    let tr = integrate(&cfg)?;
    let last = tr.last().expect("grid has two points");
    Ok(FlowOutcome {
        eta1,
        eta2,
        rho: last.rho,
        q: last.q,
        eps_g: last.eps_g,
        aligned: last.eps_g < eps_threshold,
    })
}

/// Success map over `(eta1, eta2)` for the unconstrained flow.
pub fn success_map(
    length: usize,
    eta1_grid: &[f64],
    eta2_grid: &[f64],
    alpha_max: f64,
    eps_threshold: f64,
) -> Result<Vec<FlowOutcome>> {
    let cells: Vec<(f64, f64)> = eta1_grid
        .iter()
        .flat_map(|&a| eta2_grid.iter().map(move |&b| (a, b)))
        .collect();
    cells
        .par_iter()
        .map(|&(a, b)| flow_outcome(length, a, b, alpha_max, eps_threshold))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTime {
    pub eta2: f64,
    /// Episodes at the reference dimension.
    pub t: f64,
    pub alpha: f64,
    pub rho_star: f64,
}

pub const DEFAULT_CONVERGENCE_ALPHA_MAX: f64 = 1e7;

/// Time for the spherical flow started at `rho0` to reach
/// `fraction * rho*`, where `rho*` is the stable point it is heading for.
pub fn convergence_time(
    length: usize,
    eta1: f64,
    eta2: f64,
    q: f64,
    rho0: f64,
    fraction: f64,
) -> Result<ConvergenceTime> {
    convergence_time_with(length, eta1, eta2, q, rho0, fraction, DEFAULT_CONVERGENCE_ALPHA_MAX)
}

pub fn convergence_time_with(
    length: usize,
    eta1: f64,
    eta2: f64,
    q: f64,
    rho0: f64,
    fraction: f64,
    alpha_max: f64,
) -> Result<ConvergenceTime> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Domain(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let set = find_fixed_points(length, eta1, eta2, q)?;
    let rho_star = set.reachable_from(rho0)?;
    let target = fraction * rho_star;
    let mut cfg = OdeConfig::new(
        EpisodeSpec::new(length),
        RewardProtocol::AllCorrect { eta1, eta2 },
        alpha_max,
    );
    cfg.spherical = true;
    cfg.init = InitState {
        r0: rho0 * q.sqrt(),
        q0: q,
    };
    let hit = spherical_first_passage(&cfg, target, 1e-12)?;
    match hit.alpha {
        Some(alpha) => Ok(ConvergenceTime {
            eta2,
            t: alpha * D_REF,
            alpha,
            rho_star,
        }),
        None => Err(Error::Timeout {
            target,
            alpha_max,
            rho_reached: hit.rho,
        }),
    }
}

fn root_count(length: usize, eta1: f64, eta2: f64, q: f64) -> Result<usize> {
    Ok(find_fixed_points(length, eta1, eta2, q)?.points.len())
}

/// Bracket `[lo, hi]` of width at most `tol` around the smallest penalty at
/// which the flow gains a second stable point.
pub fn critical_penalty_bracket(length: usize, eta1: f64, q: f64, tol: f64, eta2_max: f64) -> Result<(f64, f64)> {
    if !(eta1 > 0.0) {
        return Err(Error::Domain(format!("eta1 must be positive, got {eta1}")));
    }
    if !(tol > 0.0) {
        return Err(Error::Domain("tol must be positive".into()));
    }
    const COARSE: usize = 400;
    let mut prev = 0.0;
    for k in 1..=COARSE {
        let eta2 = eta2_max * k as f64 / COARSE as f64;
        if root_count(length, eta1, eta2, q)? >= 3 {
            let (mut lo, mut hi) = (prev, eta2);
            while hi - lo > tol {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if root_count(length, eta1, mid, q)? >= 3 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Ok((lo, hi));
        }
        prev = eta2;
    }
    Err(Error::TransitionNotFound { eta2_max })
}

/// Penalty at the onset of the hybrid-hard phase, searched on `[0, 2 eta1]`.
pub fn critical_penalty(length: usize, eta1: f64, q: f64, tol: f64) -> Result<f64> {
    let (lo, hi) = critical_penalty_bracket(length, eta1, q, tol, 2.0 * eta1)?;
    Ok(0.5 * (lo + hi))
}

pub const FIXED_POINTS_HEADER: &str = "eta1,eta2,T,rho_fix,stability";
pub const PHASE_MAP_HEADER: &str = "eta1,eta2,label";
pub const FLOW_FIELD_HEADER: &str = "rho,Q,drho,dQ";
pub const CONVERGENCE_HEADER: &str = "eta2,t,rho_star";

pub fn fixed_points_csv(sets: &[FixedPointSet]) -> String {
    let mut out = format!("{FIXED_POINTS_HEADER}\n");
    for s in sets {
        for p in &s.points {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                fmt_float(s.eta1),
                fmt_float(s.eta2),
                s.length,
                fmt_float(p.rho),
                p.stability.as_str()
            ));
        }
    }
    out
}

pub fn phase_map_csv(cells: &[PhaseCell]) -> String {
    let mut out = format!("{PHASE_MAP_HEADER}\n");
    for c in cells {
        out.push_str(&format!("{},{},{}\n", fmt_float(c.eta1), fmt_float(c.eta2), c.label.as_str()));
    }
    out
}

pub fn flow_field_csv(nodes: &[FlowNode]) -> String {
    let mut out = format!("{FLOW_FIELD_HEADER}\n");
    for n in nodes {
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt_float(n.rho),
            fmt_float(n.q),
            fmt_float(n.drho),
            fmt_float(n.dq)
        ));
    }
    out
}

pub fn convergence_csv(rows: &[ConvergenceTime]) -> String {
    let mut out = format!("{CONVERGENCE_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", fmt_float(r.eta2), fmt_float(r.t), fmt_float(r.rho_star)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_only_has_single_stable_point() {
        let set = find_fixed_points(13, 1.0, 0.0, 1.0).unwrap();
        assert_eq!(set.points.len(), 1);
        let p = set.points[0];
        assert_eq!(p.stability, Stability::Stable);
        assert!((p.rho - 0.957).abs() < 0.005, "{}", p.rho);
        assert!(p.residual < 1e-9);
        assert_eq!(set.label(), PhaseLabel::Easy);
    }

    #[test]
    fn strong_penalty_has_low_stable_point() {
        let set = find_fixed_points(13, 1.0, 1.0, 1.0).unwrap();
        let low = set.reachable_from(0.0).unwrap();
        assert!(low < 0.5, "{low}");
        for p in &set.points {
            assert!(p.residual < 1e-9);
        }
    }

    #[test]
    fn three_roots_alternate() {
        let set = find_fixed_points(13, 1.0, 0.5, 1.0).unwrap();
        assert_eq!(set.points.len(), 3);
        let kinds: Vec<_> = set.points.iter().map(|p| p.stability).collect();
        assert_eq!(kinds, [Stability::Stable, Stability::Unstable, Stability::Stable]);
        assert_eq!(set.label(), PhaseLabel::HybridHard);
        assert!(set.reachable_from(0.0).unwrap() < set.points[1].rho);
        assert!(set.reachable_from(0.99).unwrap() > set.points[1].rho);
    }

    #[test]
    fn zero_rates_are_degenerate() {
        assert!(matches!(find_fixed_points(13, 0.0, 0.0, 1.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn critical_penalty_cases() {
        let (lo, hi) = critical_penalty_bracket(13, 1.0, 1.0, 1e-6, 2.0).unwrap();
        assert!(hi - lo <= 1e-6);
        assert!(lo > 0.0 && hi < 1.0);
        assert!((lo - 0.2477574).abs() < 1e-5, "{lo}");
        assert!(matches!(
            critical_penalty(2, 1.0, 1.0, 1e-6),
            Err(Error::TransitionNotFound { .. })
        ));
    }

    #[test]
    fn near_fold_pair_is_resolved_on_a_coarse_scan() {
        let (_, hi) = critical_penalty_bracket(13, 1.0, 1.0, 1e-10, 2.0).unwrap();
        let set = find_fixed_points_with(13, 1.0, hi + 1e-9, 1.0, 200).unwrap();
        assert_eq!(set.points.len(), 3);
    }

    #[test]
    fn zero_rate_flow_field() {
        let nodes = flow_field(8, 0.0, 0.0, &[0.0, 0.5], &[1.0, 2.0]).unwrap();
        assert!(nodes.iter().all(|n| n.drho == 0.0 && n.dq == 0.0));
    }

    #[test]
    fn convergence_time_baseline() {
        let c = convergence_time(13, 1.0, 0.0, 1.0, 0.0, 0.99).unwrap();
        assert!(c.t.is_finite() && c.t > 0.0);
        assert!((c.t - 1.38e6).abs() / 1.38e6 < 0.05, "{}", c.t);
        let err = convergence_time_with(13, 1.0, 0.0, 1.0, 0.0, 0.99, 10.0).unwrap_err();
        assert!(matches!(err, Error::Timeout { .. }));
    }

    #[test]
    fn csv_headers() {
        assert!(phase_map_csv(&[]).starts_with("eta1,eta2,label\n"));
        assert!(convergence_csv(&[]).starts_with("eta2,t,rho_star\n"));
        let set = find_fixed_points(13, 1.0, 0.5, 1.0).unwrap();
        assert_eq!(fixed_points_csv(&[set]).lines().count(), 4);
    }
}
