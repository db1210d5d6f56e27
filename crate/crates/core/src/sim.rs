//! Finite-dimension Monte Carlo engine.
//!
//! A student perceptron `w` plays episodes of `T` binary decisions against a
//! fixed teacher `w*` with `|w*|^2 = D`. After every episode the student takes
//! the policy-gradient step
//!
//! ```text
//! w <- w + 1/(T sqrt(D)) * sum_t y_t x_t G_t,     G_t = sum_{t' >= t} gamma^(t'-t) R_t'
//! ```
//!
//! where the per-step rewards `R_t` already carry the learning rate
//! (`eta1 = eta * r1`, `eta2 = eta * r2`).
//!
//! Three input samplers are available. `Gaussian` draws every `x_t` in full.
//! `HalfGaussian` first draws a hidden state `s_t = +-1` and restricts `x_t` to
//! the matching half-space of the teacher. `Projected` draws only the two
//! coordinates of `x_t` in `span{w*, w}` and, when an update happens, the
//! orthogonal part of `sum_t c_t x_t` as a single Gaussian vector of variance
//! `sum_t c_t^2`; the weight process has the same law as with `Gaussian`
//! at a fraction of the cost.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{expected_reward, generalisation_error, EpisodeSpec, OrderState, RewardProtocol};
use crate::rng::{stream, StreamRng, INIT_STREAM};
use crate::trajectory::{Trajectory, TrajectoryRow};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// `y = sgn(w.x / sqrt(D))`.
    #[default]
    Deterministic,
    /// `P(y = +1) = 1 / (1 + exp(-w.x / sqrt(D)))`.
    Logistic,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSampling {
    #[default]
    Gaussian,
    HalfGaussian,
    Projected,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    #[serde(default = "one")]
    pub q0: f64,
    #[serde(default)]
    pub rho0: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec { q0: 1.0, rho0: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(rename = "D", alias = "dim")]
    pub dim: usize,
    pub spec: EpisodeSpec,
    pub protocol: RewardProtocol,
    pub n_episodes: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub init: InitSpec,
    /// Episode stride between logged rows; defaults to `D`.
    #[serde(default)]
    pub record_every: Option<u64>,
    #[serde(default)]
    pub spherical: bool,
    #[serde(default)]
    pub policy: Policy,
    #[serde(default)]
    pub sampling: InputSampling,
}

impl SimConfig {
    pub fn new(dim: usize, spec: EpisodeSpec, protocol: RewardProtocol, n_episodes: u64) -> Self {
        SimConfig {
            dim,
            spec,
            protocol,
            n_episodes,
            seed: 0,
            init: InitSpec::default(),
            record_every: None,
            spherical: false,
            policy: Policy::Deterministic,
            sampling: InputSampling::Gaussian,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::validation("D", "input dimension must be >= 2"));
        }
        if self.n_episodes == 0 {
            return Err(Error::validation("n_episodes", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.init.rho0) {
            return Err(Error::validation("init.rho0", "must lie in [0, 1]"));
        }
        if !(self.init.q0 > 0.0) || !self.init.q0.is_finite() {
            return Err(Error::validation("init.q0", "must be positive"));
        }
        if self.record_every == Some(0) {
            return Err(Error::validation("record_every", "must be >= 1"));
        }
        if self.spherical && (self.init.q0 - 1.0).abs() > 1e-12 {
            return Err(Error::validation(
                "init.q0",
                "spherical runs keep |w| = sqrt(D), so q0 must be 1",
            ));
        }
        self.spec.validate()?;
        self.protocol.validate(&self.spec)
    }

    pub fn record_stride(&self) -> u64 {
        self.record_every.unwrap_or(self.dim as u64).max(1)
    }

    /// Trailing window used for the logged empirical reward.
    pub fn reward_window(&self) -> usize {
        self.dim.max(1000)
    }
}

/// Summary of one episode's decisions and rewards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub n_correct: usize,
    /// Undiscounted sum of the per-step rewards.
    pub total_reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// The weight increment `dw`.
    pub update: Vec<f64>,
    pub outcome: EpisodeOutcome,
}

/// Per-step rewards for the decision pattern `correct`.
pub fn step_rewards(protocol: &RewardProtocol, correct: &[bool], rewards: &mut [f64]) {
    let t = correct.len();
    debug_assert_eq!(rewards.len(), t);
    rewards.iter_mut().for_each(|r| *r = 0.0);
    if t == 0 {
        return;
    }
    let n_correct = correct.iter().filter(|&&c| c).count();
    let all = n_correct == t;
    match *protocol {
        RewardProtocol::AllCorrect { eta1, eta2 } => {
            rewards[t - 1] = if all { eta1 } else { -eta2 };
        }
        RewardProtocol::NOrMore { n, eta1 } => {
            if n_correct >= n {
                rewards[t - 1] = eta1;
            }
        }
        RewardProtocol::Breadcrumb { eta1, beta } => {
            for (r, &c) in rewards.iter_mut().zip(correct) {
                if c {
                    *r = beta;
                }
            }
            if all {
                rewards[t - 1] += eta1;
            }
        }
        RewardProtocol::Subtask { t0, r_sub, eta1 } => {
            if t0 >= 1 && t0 <= t && correct[..t0].iter().all(|&c| c) {
                rewards[t0 - 1] += r_sub;
            }
            if all {
                rewards[t - 1] += eta1;
            }
        }
    }
}

/// `G_t = sum_{t' >= t} gamma^(t'-t) R_t'`.
pub fn discounted_returns(rewards: &[f64], gamma: f64, returns: &mut [f64]) {
    let mut acc = 0.0;
    for (g, &r) in returns.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *g = acc;
    }
}

fn sgn(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn fill_normal<R: Rng>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}

fn act<R: Rng>(policy: Policy, field: f64, rng: &mut R) -> f64 {
    match policy {
        Policy::Deterministic => sgn(field),
        Policy::Logistic => {
            if rng.random::<f64>() < sigmoid(field) {
                1.0
            } else {
                -1.0
            }
        }
    }
}

/// Teacher on the sphere of radius `sqrt(D)` and a student with overlaps
/// exactly `(rho0 sqrt(q0), q0)`. The third vector is a unit direction
/// orthogonal to the teacher, used when the student is parallel to it.
fn init_pair(dim: usize, q0: f64, rho0: f64, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = stream(seed, INIT_STREAM);
    let sqrt_d = (dim as f64).sqrt();
    let mut teacher = vec![0.0; dim];
    fill_normal(&mut rng, &mut teacher);
    let norm = dot(&teacher, &teacher).sqrt();
    teacher.iter_mut().for_each(|v| *v *= sqrt_d / norm);

    let mut ortho = vec![0.0; dim];
    fill_normal(&mut rng, &mut ortho);
    let proj = dot(&ortho, &teacher) / dim as f64;
    for (o, t) in ortho.iter_mut().zip(&teacher) {
        *o -= proj * t;
    }
    let norm = dot(&ortho, &ortho).sqrt();
    ortho.iter_mut().for_each(|v| *v /= norm);

    let a = q0.sqrt() * rho0;
    let b = q0.sqrt() * (1.0 - rho0 * rho0).max(0.0).sqrt() * sqrt_d;
    let student = teacher
        .iter()
        .zip(&ortho)
        .map(|(t, o)| a * t + b * o)
        .collect();
    (teacher, student, ortho)
}

/// Reusable scratch space for rollouts.
struct Scratch {
    t: usize,
    dim: usize,
    x: Vec<f64>,
    nu: Vec<f64>,
    xi: Vec<f64>,
    y: Vec<f64>,
    correct: Vec<bool>,
    rewards: Vec<f64>,
    returns: Vec<f64>,
    update: Vec<f64>,
    z: Vec<f64>,
}

impl Scratch {
    fn new(t: usize, dim: usize, store_inputs: bool) -> Self {
        Scratch {
            t,
            dim,
            x: if store_inputs { vec![0.0; t * dim] } else { Vec::new() },
            nu: vec![0.0; t],
            xi: vec![0.0; t],
            y: vec![0.0; t],
            correct: vec![false; t],
            rewards: vec![0.0; t],
            returns: vec![0.0; t],
            update: vec![0.0; dim],
            z: if store_inputs { Vec::new() } else { vec![0.0; dim] },
        }
    }

    /// Applies the reward rule to the stored decisions; returns whether any
    /// coefficient `c_t = y_t G_t` is non-zero.
    fn settle(&mut self, protocol: &RewardProtocol, gamma: f64) -> (EpisodeOutcome, bool) {
        step_rewards(protocol, &self.correct, &mut self.rewards);
        discounted_returns(&self.rewards, gamma, &mut self.returns);
        let outcome = EpisodeOutcome {
            n_correct: self.correct.iter().filter(|&&c| c).count(),
            total_reward: self.rewards.iter().sum(),
        };
        (outcome, self.returns.iter().any(|&g| g != 0.0))
    }

    /// Full-input rollout. Leaves `dw` in `self.update` when the second
    /// return value is true.
    #[allow(clippy::too_many_arguments)]
    fn rollout_full<R: Rng>(
        &mut self,
        weights: &[f64],
        teacher: &[f64],
        protocol: &RewardProtocol,
        gamma: f64,
        policy: Policy,
        half_gaussian: bool,
        rng: &mut R,
    ) -> (EpisodeOutcome, bool) {
        let sqrt_d = (self.dim as f64).sqrt();
        for step in 0..self.t {
            let x = &mut self.x[step * self.dim..(step + 1) * self.dim];
            fill_normal(rng, x);
            let mut nu = dot(teacher, x) / sqrt_d;
            if half_gaussian {
                let state = if rng.random::<bool>() { 1.0 } else { -1.0 };
                if sgn(nu) != state {
                    // reflect through the teacher's hyperplane
                    let k = 2.0 * nu / sqrt_d;
                    for (xi, ti) in x.iter_mut().zip(teacher) {
                        *xi -= k * ti;
                    }
                    nu = -nu;
                }
            }
            let lambda = dot(weights, x) / sqrt_d;
            let y = act(policy, lambda, rng);
            self.nu[step] = nu;
            self.y[step] = y;
            self.correct[step] = y == sgn(nu);
        }
        let (outcome, active) = self.settle(protocol, gamma);
        if active {
            let scale = 1.0 / (self.t as f64 * sqrt_d);
            self.update.iter_mut().for_each(|u| *u = 0.0);
            for step in 0..self.t {
                let c = self.y[step] * self.returns[step] * scale;
                if c == 0.0 {
                    continue;
                }
                let x = &self.x[step * self.dim..(step + 1) * self.dim];
                for (u, xi) in self.update.iter_mut().zip(x) {
                    *u += c * xi;
                }
            }
        }
        (outcome, active)
    }
}

/// Plays one episode with fully sampled Gaussian inputs and returns the
/// weight increment it produces.
pub fn run_episode<R: Rng>(
    weights: &[f64],
    teacher: &[f64],
    spec: &EpisodeSpec,
    protocol: &RewardProtocol,
    policy: Policy,
    rng: &mut R,
) -> Result<Episode> {
    if weights.len() != teacher.len() {
        return Err(Error::Degenerate(format!(
            "student has {} components, teacher {}",
            weights.len(),
            teacher.len()
        )));
    }
    spec.validate()?;
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite { episode: 0 });
    }
    let mut scratch = Scratch::new(spec.length, weights.len(), true);
    let (outcome, active) =
        scratch.rollout_full(weights, teacher, protocol, spec.gamma, policy, false, rng);
    if !active {
        scratch.update.iter_mut().for_each(|u| *u = 0.0);
    }
    Ok(Episode {
        update: scratch.update,
        outcome,
    })
}

/// A running finite-dimension learner.
pub struct Simulation {
    config: SimConfig,
    teacher: Vec<f64>,
    e1: Vec<f64>,
    e2: Vec<f64>,
    fallback: Vec<f64>,
    weights: Vec<f64>,
    r: f64,
    q: f64,
    episode: u64,
    scratch: Scratch,
    window: VecDeque<f64>,
    window_sum: f64,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self> {
        config.validate()?;
        let dim = config.dim;
        let (teacher, weights, fallback) =
            init_pair(dim, config.init.q0, config.init.rho0, config.seed);
        let sqrt_d = (dim as f64).sqrt();
        let e1 = teacher.iter().map(|t| t / sqrt_d).collect();
        let projected = config.sampling == InputSampling::Projected;
        let scratch = Scratch::new(config.spec.length, dim, !projected);
        let mut sim = Simulation {
            teacher,
            e1,
            e2: vec![0.0; dim],
            fallback,
            weights,
            r: 0.0,
            q: 0.0,
            episode: 0,
            scratch,
            window: VecDeque::with_capacity(config.reward_window()),
            window_sum: 0.0,
            config,
        };
        sim.refresh()?;
        Ok(sim)
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn teacher(&self) -> &[f64] {
        &self.teacher
    }

    pub fn episodes_done(&self) -> u64 {
        self.episode
    }

    /// Overlaps measured from the current weight vectors.
    pub fn state(&self) -> OrderState {
        OrderState {
            r: self.r,
            q: self.q,
            s: 1.0,
        }
    }

    fn refresh(&mut self) -> Result<()> {
        let d = self.config.dim as f64;
        self.r = dot(&self.weights, &self.teacher) / d;
        self.q = dot(&self.weights, &self.weights) / d;
        if !self.r.is_finite() || !self.q.is_finite() {
            return Err(Error::NonFinite {
                episode: self.episode,
            });
        }
        if self.config.sampling == InputSampling::Projected {
            let along = dot(&self.weights, &self.e1);
            let mut norm2 = 0.0;
            for ((e, w), u) in self.e2.iter_mut().zip(&self.weights).zip(&self.e1) {
                *e = w - along * u;
                norm2 += *e * *e;
            }
            let norm = norm2.sqrt();
            if norm > 1e-12 * (d * self.q).sqrt() {
                self.e2.iter_mut().for_each(|e| *e /= norm);
            } else {
                self.e2.copy_from_slice(&self.fallback);
            }
        }
        Ok(())
    }

    fn rollout_projected(&mut self, rng: &mut StreamRng) -> (EpisodeOutcome, bool) {
        let s = &mut self.scratch;
        let sigma = (self.q - self.r * self.r).max(0.0).sqrt();
        for step in 0..s.t {
            let nu: f64 = StandardNormal.sample(rng);
            let xi: f64 = StandardNormal.sample(rng);
            let lambda = self.r * nu + sigma * xi;
            let y = act(self.config.policy, lambda, rng);
            s.nu[step] = nu;
            s.xi[step] = xi;
            s.y[step] = y;
            s.correct[step] = y == sgn(nu);
        }
        let (outcome, active) = s.settle(&self.config.protocol, self.config.spec.gamma);
        if active {
            let (mut a, mut b, mut c2) = (0.0, 0.0, 0.0);
            for step in 0..s.t {
                let c = s.y[step] * s.returns[step];
                a += c * s.nu[step];
                b += c * s.xi[step];
                c2 += c * c;
            }
            fill_normal(rng, &mut s.z);
            let z1 = dot(&s.z, &self.e1);
            let z2 = dot(&s.z, &self.e2);
            let cn = c2.sqrt();
            let scale = 1.0 / (s.t as f64 * (s.dim as f64).sqrt());
            let k1 = (a - cn * z1) * scale;
            let k2 = (b - cn * z2) * scale;
            let kz = cn * scale;
            for (((u, z), e1), e2) in s.update.iter_mut().zip(&s.z).zip(&self.e1).zip(&self.e2) {
                *u = k1 * e1 + k2 * e2 + kz * z;
            }
        }
        (outcome, active)
    }

    /// Plays one episode and applies its update.
    pub fn step(&mut self) -> Result<EpisodeOutcome> {
        let mut rng = stream(self.config.seed, self.episode + 1);
        let (outcome, active) = match self.config.sampling {
            InputSampling::Projected => self.rollout_projected(&mut rng),
            sampling => self.scratch.rollout_full(
                &self.weights,
                &self.teacher,
                &self.config.protocol,
                self.config.spec.gamma,
                self.config.policy,
                sampling == InputSampling::HalfGaussian,
                &mut rng,
            ),
        };
        self.episode += 1;
        if active {
            for (w, u) in self.weights.iter_mut().zip(&self.scratch.update) {
                *w += u;
            }
            if self.config.spherical {
                let norm = dot(&self.weights, &self.weights).sqrt();
                let target = (self.config.dim as f64).sqrt();
                if !(norm > 0.0) || !norm.is_finite() {
                    return Err(Error::NonFinite {
                        episode: self.episode,
                    });
                }
                self.weights.iter_mut().for_each(|w| *w *= target / norm);
            }
            self.refresh()?;
        }
        let window = self.config.reward_window();
        self.window.push_back(outcome.total_reward);
        self.window_sum += outcome.total_reward;
        if self.window.len() > window {
            if let Some(old) = self.window.pop_front() {
                self.window_sum -= old;
            }
        }
        Ok(outcome)
    }

    pub fn row(&self) -> Result<TrajectoryRow> {
        let state = self.state();
        let rho = state.rho()?;
        let empirical_reward = if self.window.is_empty() {
            None
        } else {
            Some(self.window.iter().sum::<f64>() / self.window.len() as f64)
        };
        Ok(TrajectoryRow {
            alpha: self.episode as f64 / self.config.dim as f64,
            t: self.episode as f64,
            r: state.r,
            q: state.q,
            rho,
            eps_g: generalisation_error(rho)?,
            expected_reward: expected_reward(&self.config.protocol, &self.config.spec, rho)?,
            empirical_reward,
        })
    }

    /// Runs to `n_episodes`, logging every `record_every` episodes and at the end.
    pub fn run(mut self) -> Result<Trajectory> {
        let stride = self.config.record_stride();
        let total = self.config.n_episodes;
        let mut rows = vec![self.row()?];
        while self.episode < total {
            self.step()?;
            if self.episode % stride == 0 || self.episode == total {
                rows.push(self.row()?);
            }
        }
        Ok(Trajectory { rows })
    }
}

/// One seeded run.
pub fn simulate(config: &SimConfig) -> Result<Trajectory> {
    Simulation::new(config.clone())?.run()
}

/// Independent runs for each seed, returned in seed order.
pub fn simulate_ensemble(config: &SimConfig, seeds: &[u64]) -> Result<Vec<Trajectory>> {
    config.validate()?;
    seeds
        .par_iter()
        .map(|&seed| {
            let mut c = config.clone();
            c.seed = seed;
            simulate(&c)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleSampling {
    /// Two in-span coordinates per step plus a chi-square draw for the
    /// orthogonal part of `|dw|^2`; exact at finite `D`.
    #[default]
    Reduced,
    Gaussian,
    HalfGaussian,
}

/// Monte Carlo estimate of the mean one-episode change of `(D dR, D dQ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimate {
    pub n: u64,
    pub mean_dr: f64,
    pub mean_dq: f64,
    /// Sample variances and covariance of the per-episode values.
    pub var_dr: f64,
    pub var_dq: f64,
    pub cov: f64,
}

impl OracleEstimate {
    pub fn se_dr(&self) -> f64 {
        (self.var_dr / self.n as f64).sqrt()
    }

    pub fn se_dq(&self) -> f64 {
        (self.var_dq / self.n as f64).sqrt()
    }

    /// Mean and standard error of `a * D dR + b * D dQ`.
    pub fn linear(&self, a: f64, b: f64) -> (f64, f64) {
        let mean = a * self.mean_dr + b * self.mean_dq;
        let var = a * a * self.var_dr + b * b * self.var_dq + 2.0 * a * b * self.cov;
        (mean, (var.max(0.0) / self.n as f64).sqrt())
    }
}

#[derive(Clone, Copy, Default)]
struct Moments {
    n: u64,
    sr: f64,
    sq: f64,
    srr: f64,
    sqq: f64,
    srq: f64,
}

impl Moments {
    fn push(&mut self, dr: f64, dq: f64) {
        self.n += 1;
        self.sr += dr;
        self.sq += dq;
        self.srr += dr * dr;
        self.sqq += dq * dq;
        self.srq += dr * dq;
    }

    fn merge(mut self, o: &Moments) -> Self {
        self.n += o.n;
        self.sr += o.sr;
        self.sq += o.sq;
        self.srr += o.srr;
        self.sqq += o.sqq;
        self.srq += o.srq;
        self
    }

    fn estimate(&self) -> OracleEstimate {
        let n = self.n as f64;
        let mr = self.sr / n;
        let mq = self.sq / n;
        let bessel = n / (n - 1.0).max(1.0);
        OracleEstimate {
            n: self.n,
            mean_dr: mr,
            mean_dq: mq,
            var_dr: ((self.srr / n - mr * mr) * bessel).max(0.0),
            var_dq: ((self.sqq / n - mq * mq) * bessel).max(0.0),
            cov: (self.srq / n - mr * mq) * bessel,
        }
    }
}

const ORACLE_BLOCK: u64 = 1000;

fn blocks(n_samples: u64) -> Vec<(u64, u64)> {
    let count = n_samples.div_ceil(ORACLE_BLOCK);
    (0..count)
        .map(|b| {
            let start = b * ORACLE_BLOCK;
            (b, (n_samples - start).min(ORACLE_BLOCK))
        })
        .collect()
}

/// Mean one-episode change of `(D dR, D dQ)` at a fixed state, with no
/// update applied between samples. `dQ` includes the `|dw|^2` term.
pub fn expected_update_oracle(
    state: &OrderState,
    spec: &EpisodeSpec,
    protocol: &RewardProtocol,
    dim: usize,
    n_samples: u64,
    seed: u64,
) -> Result<OracleEstimate> {
    expected_update_oracle_with(state, spec, protocol, dim, n_samples, seed, OracleSampling::Reduced)
}

pub fn expected_update_oracle_with(
    state: &OrderState,
    spec: &EpisodeSpec,
    protocol: &RewardProtocol,
    dim: usize,
    n_samples: u64,
    seed: u64,
    sampling: OracleSampling,
) -> Result<OracleEstimate> {
    let rho = state.rho()?;
    spec.validate()?;
    protocol.validate(spec)?;
    if n_samples < 1000 {
        return Err(Error::validation("n_samples", "need at least 1000 samples"));
    }
    if dim < 2 {
        return Err(Error::validation("D", "input dimension must be >= 2"));
    }
    let moments: Vec<Moments> = match sampling {
        OracleSampling::Reduced => {
            let q = state.q;
            let r = rho * q.sqrt();
            let sigma = (q - r * r).max(0.0).sqrt();
            blocks(n_samples)
                .into_par_iter()
                .map(|(b, count)| reduced_block(r, sigma, spec, protocol, dim, seed, b, count))
                .collect()
        }
        OracleSampling::Gaussian | OracleSampling::HalfGaussian => {
            let (teacher, weights, _) = init_pair(dim, state.q, rho, seed);
            let half = sampling == OracleSampling::HalfGaussian;
            blocks(n_samples)
                .into_par_iter()
                .map(|(b, count)| {
                    full_block(&weights, &teacher, spec, protocol, half, seed, b, count)
                })
                .collect()
        }
    };
    let total = moments
        .iter()
        .fold(Moments::default(), |acc, m| acc.merge(m));
    Ok(total.estimate())
}

#[allow(clippy::too_many_arguments)]
fn reduced_block(
    r: f64,
    sigma: f64,
    spec: &EpisodeSpec,
    protocol: &RewardProtocol,
    dim: usize,
    seed: u64,
    block: u64,
    count: u64,
) -> Moments {
    let mut rng = stream(seed, block + 1);
    let t = spec.length;
    let tf = t as f64;
    let chi = (dim > 2).then(|| ChiSquared::new((dim - 2) as f64).expect("dof > 0"));
    let mut scratch = Scratch::new(t, 2, false);
    let mut m = Moments::default();
    let mut lambda = vec![0.0; t];
    for _ in 0..count {
        for step in 0..t {
            let nu: f64 = StandardNormal.sample(&mut rng);
            let xi: f64 = StandardNormal.sample(&mut rng);
            let l = r * nu + sigma * xi;
            let y = sgn(l);
            scratch.nu[step] = nu;
            scratch.xi[step] = xi;
            scratch.y[step] = y;
            scratch.correct[step] = y == sgn(nu);
            lambda[step] = l;
        }
        let (_, active) = scratch.settle(protocol, spec.gamma);
        if !active {
            m.push(0.0, 0.0);
            continue;
        }
        let (mut a, mut b, mut c2, mut lin) = (0.0, 0.0, 0.0, 0.0);
        for step in 0..t {
            let c = scratch.y[step] * scratch.returns[step];
            a += c * scratch.nu[step];
            b += c * scratch.xi[step];
            c2 += c * c;
            lin += c * lambda[step];
        }
        let perp = chi.as_ref().map_or(0.0, |d| d.sample(&mut rng));
        let dr = a / tf;
        let dq = 2.0 * lin / tf + (a * a + b * b + c2 * perp) / (tf * tf * dim as f64);
        m.push(dr, dq);
    }
    m
}

#[allow(clippy::too_many_arguments)]
fn full_block(
    weights: &[f64],
    teacher: &[f64],
    spec: &EpisodeSpec,
    protocol: &RewardProtocol,
    half: bool,
    seed: u64,
    block: u64,
    count: u64,
) -> Moments {
    let mut rng = stream(seed, block + 1);
    let mut scratch = Scratch::new(spec.length, weights.len(), true);
    let mut m = Moments::default();
    for _ in 0..count {
        let (_, active) = scratch.rollout_full(
            weights,
            teacher,
            protocol,
            spec.gamma,
            Policy::Deterministic,
            half,
            &mut rng,
        );
        if !active {
            m.push(0.0, 0.0);
            continue;
        }
        let du = &scratch.update;
        let dr = dot(du, teacher);
        let dq = 2.0 * dot(du, weights) + dot(du, du);
        m.push(dr, dq);
    }
    m
}

/// Mean update directions under logistic sampling: exact REINFORCE
/// (`(1 - sigma(y lambda)) y x G`) against the plain `y x G` step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticReport {
    pub n_samples: u64,
    /// Cosine similarity of the two mean update vectors; `None` when either
    /// mean is exactly zero.
    pub cosine: Option<f64>,
    pub norm_reinforce: f64,
    pub norm_plain: f64,
}

pub fn logistic_policy_check(
    state: &OrderState,
    spec: &EpisodeSpec,
    protocol: &RewardProtocol,
    dim: usize,
    n_samples: u64,
    seed: u64,
) -> Result<LogisticReport> {
    let rho = state.rho()?;
    if state.q > 1.0 {
        return Err(Error::Domain(format!(
            "the comparison needs small fields (Q <= 1), got Q = {}",
            state.q
        )));
    }
    spec.validate()?;
    protocol.validate(spec)?;
    let (teacher, weights, _) = init_pair(dim, state.q, rho, seed);
    let sqrt_d = (dim as f64).sqrt();
    let t = spec.length;
    let sums: Vec<(Vec<f64>, Vec<f64>)> = blocks(n_samples)
        .into_par_iter()
        .map(|(b, count)| {
            let mut rng = stream(seed, b + 1);
            let mut scratch = Scratch::new(t, dim, true);
            let mut lambda = vec![0.0; t];
            let mut exact = vec![0.0; dim];
            let mut plain = vec![0.0; dim];
            for _ in 0..count {
                for step in 0..t {
                    let x = &mut scratch.x[step * dim..(step + 1) * dim];
                    fill_normal(&mut rng, x);
                    let nu = dot(&teacher, x) / sqrt_d;
                    let l = dot(&weights, x) / sqrt_d;
                    let y = act(Policy::Logistic, l, &mut rng);
                    scratch.nu[step] = nu;
                    scratch.y[step] = y;
                    scratch.correct[step] = y == sgn(nu);
                    lambda[step] = l;
                }
                let (_, active) = scratch.settle(protocol, spec.gamma);
                if !active {
                    continue;
                }
                for step in 0..t {
                    let y = scratch.y[step];
                    let c = y * scratch.returns[step];
                    if c == 0.0 {
                        continue;
                    }
                    let g = 1.0 - sigmoid(y * lambda[step]);
                    let x = &scratch.x[step * dim..(step + 1) * dim];
                    for ((e, p), xi) in exact.iter_mut().zip(plain.iter_mut()).zip(x) {
                        *e += g * c * xi;
                        *p += c * xi;
                    }
                }
            }
            (exact, plain)
        })
        .collect();
    let mut exact = vec![0.0; dim];
    let mut plain = vec![0.0; dim];
    for (e, p) in &sums {
        exact.iter_mut().zip(e).for_each(|(a, b)| *a += b);
        plain.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    let scale = 1.0 / (n_samples as f64 * t as f64 * sqrt_d);
    exact.iter_mut().for_each(|v| *v *= scale);
    plain.iter_mut().for_each(|v| *v *= scale);
    let ne = dot(&exact, &exact).sqrt();
    let np = dot(&plain, &plain).sqrt();
    let cosine = (ne > 0.0 && np > 0.0).then(|| dot(&exact, &plain) / (ne * np));
    Ok(LogisticReport {
        n_samples,
        cosine,
        norm_reinforce: ne,
        norm_plain: np,
    })
}
