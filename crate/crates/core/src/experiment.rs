//! Declarative experiment runner behind the `rlp` binary.
//!
//! A config file holds one `[experiment]` table naming a `kind` and carrying
//! a sub-table of the same name with the kind's parameters:
//!
//! ```toml
//! [experiment]
//! kind = "ode"
//!
//! [experiment.ode]
//! alpha_max = 100.0
//! spec = { T = 12 }
//! protocol = { kind = "all_correct", eta1 = 1.0 }
//! ```
//!
//! Every run writes its CSV artifacts plus a `manifest.json` with the
//! resolved config and a SHA-256 checksum of each artifact.

use std::fmt;
use std::fs;
use std::marker::PhantomData;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::value::{MapAccessDeserializer, SeqAccessDeserializer};
use serde::de::{DeserializeOwned, MapAccess, SeqAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{EpisodeSpec, OrderState, RewardProtocol};
use crate::ode::{integrate_traced, rhs, trace_to_csv, GridSpec, InitState, OdeConfig};
use crate::phase::{
    convergence_csv, convergence_time_with, critical_penalty_bracket, find_fixed_points, fixed_points_csv,
    flow_field, flow_field_csv, flow_outcome, hybrid_fraction, phase_map, phase_map_csv, success_map, FixedPointSet,
    DEFAULT_CONVERGENCE_ALPHA_MAX,
};
use crate::sched::{run_schedule_comparison, ScheduleMode, ScheduleSpec};
use crate::sim::{expected_update_oracle_with, simulate_ensemble, OracleSampling, SimConfig};
use crate::trajectory::{fmt_float, Trajectory, TrajectoryRow};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Simulate,
    Ode,
    Compare,
    Schedule,
    Phase,
    Flow,
    Convergence,
    Oracle,
}

impl Kind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Kind::Simulate => "simulate",
            Kind::Ode => "ode",
            Kind::Compare => "compare",
            Kind::Schedule => "schedule",
            Kind::Phase => "phase",
            Kind::Flow => "flow",
            Kind::Convergence => "convergence",
            Kind::Oracle => "oracle",
        }
    }
}

/// A list of values given either explicitly or as an evenly spaced range
/// (`log = true` spaces them geometrically).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Axis {
    Values(Vec<f64>),
    Range {
        start: f64,
        stop: f64,
        num: usize,
        #[serde(default)]
        log: bool,
    },
}

impl Axis {
    pub fn values(&self, field: &str) -> Result<Vec<f64>> {
        let v = match self {
            Axis::Values(v) => v.clone(),
            Axis::Range { start, stop, num, log } => {
                if *num == 0 {
                    return Err(Error::validation(field, "num must be >= 1"));
                }
                if *log && !(*start > 0.0 && *stop > 0.0) {
                    return Err(Error::validation(field, "log ranges need positive endpoints"));
                }
                (0..*num)
                    .map(|i| {
                        let f = if *num == 1 { 0.0 } else { i as f64 / (*num - 1) as f64 };
                        if *log {
                            (start.ln() + f * (stop.ln() - start.ln())).exp()
                        } else {
                            start + f * (stop - start)
                        }
                    })
                    .collect()
            }
        };
        if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::validation(field, "needs at least one finite value"));
        }
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub sim: SimConfig,
    /// Defaults to the simulation's protocol, spec and initial overlaps on a
    /// log grid up to the simulated `alpha`.
    #[serde(default)]
    pub ode: Option<OdeConfig>,
}

impl CompareConfig {
    pub fn ode_config(&self) -> OdeConfig {
        self.ode.clone().unwrap_or_else(|| {
            let s = &self.sim;
            let mut cfg = OdeConfig::new(s.spec, s.protocol, s.n_episodes as f64 / s.dim as f64);
            cfg.init = InitState {
                r0: s.init.rho0 * s.init.q0.sqrt(),
                q0: s.init.q0,
            };
            cfg.spherical = s.spherical;
            cfg.time_scale = s.dim as f64;
            cfg
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleExperiment {
    pub base: OdeConfig,
    pub schedules: Vec<ScheduleSpec>,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseExperiment {
    #[serde(rename = "T")]
    pub length: usize,
    #[serde(default = "one")]
    pub q: f64,
    pub eta1: Axis,
    pub eta2: Axis,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuccessMapSpec {
    pub eta1: Axis,
    pub eta2: Axis,
    #[serde(default = "default_success_alpha")]
    pub alpha_max: f64,
    #[serde(default = "default_eps_threshold")]
    pub eps_threshold: f64,
}

fn default_success_alpha() -> f64 {
    1e4
}

fn default_eps_threshold() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowExperiment {
    #[serde(rename = "T")]
    pub length: usize,
    pub eta1: f64,
    pub eta2: f64,
    pub rho: Axis,
    pub q: Axis,
    /// Length of the reference trajectory from `(rho, Q) = (0, 1)`.
    #[serde(default = "default_success_alpha")]
    pub alpha_max: f64,
    #[serde(default)]
    pub success: Option<SuccessMapSpec>,
}

fn default_fraction() -> f64 {
    0.99
}

fn default_conv_alpha() -> f64 {
    DEFAULT_CONVERGENCE_ALPHA_MAX
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceExperiment {
    #[serde(rename = "T")]
    pub length: usize,
    pub eta1: f64,
    #[serde(default = "one")]
    pub q: f64,
    #[serde(default)]
    pub rho0: f64,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    /// Penalties to evaluate directly.
    #[serde(default)]
    pub eta2: Option<Axis>,
    /// Distances below the critical penalty; each yields `eta2 = eta_crit - delta`.
    #[serde(default)]
    pub below_critical: Option<Axis>,
    #[serde(default = "default_crit_tol")]
    pub critical_tol: f64,
    #[serde(default = "default_conv_alpha")]
    pub alpha_max: f64,
}

fn default_crit_tol() -> f64 {
    1e-12
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatePoint {
    pub rho: f64,
    #[serde(default = "one")]
    pub q: f64,
}

fn default_oracle_samples() -> u64 {
    1_000_000
}

fn default_oracle_dim() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleExperiment {
    pub spec: EpisodeSpec,
    pub protocol: RewardProtocol,
    #[serde(rename = "D", alias = "dim", default = "default_oracle_dim")]
    pub dim: usize,
    #[serde(default = "default_oracle_samples")]
    pub n_samples: u64,
    pub states: Vec<StatePoint>,
    #[serde(default)]
    pub sampling: OracleSampling,
}

/// A kind block given once (`[experiment.ode]`) or as an array of tables
/// (`[[experiment.ode]]`). Array entries write into `run<i>/` subdirectories.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Blocks<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> Blocks<T> {
    pub fn items(&self) -> Vec<&T> {
        match self {
            Blocks::One(t) => vec![t],
            Blocks::Many(v) => v.iter().collect(),
        }
    }

    pub fn is_many(&self) -> bool {
        matches!(self, Blocks::Many(_))
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for Blocks<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V<T>(PhantomData<T>);
        impl<'de, T: Deserialize<'de>> Visitor<'de> for V<T> {
            type Value = Blocks<T>;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a table or an array of tables")
            }

            fn visit_map<A: MapAccess<'de>>(self, map: A) -> std::result::Result<Self::Value, A::Error> {
                T::deserialize(MapAccessDeserializer::new(map)).map(Blocks::One)
            }

            fn visit_seq<A: SeqAccess<'de>>(self, seq: A) -> std::result::Result<Self::Value, A::Error> {
                Vec::<T>::deserialize(SeqAccessDeserializer::new(seq)).map(Blocks::Many)
            }
        }
        d.deserialize_any(V(PhantomData))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub kind: Kind,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<Blocks<SimConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ode: Option<Blocks<OdeConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<Blocks<CompareConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Blocks<ScheduleExperiment>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Blocks<PhaseExperiment>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<Blocks<FlowExperiment>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence: Option<Blocks<ConvergenceExperiment>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<Blocks<OracleExperiment>>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
}

fn prefixed(prefix: &str, e: Error) -> Error {
    match e {
        Error::Validation { field, reason } => Error::Validation {
            field: format!("{prefix}.{field}"),
            reason,
        },
        other => other,
    }
}

/// Behaviour shared by every kind block. Validation field paths are relative
/// to the block.
trait Block {
    fn check(&self) -> Result<()>;
    fn execute(&self, seeds: &[u64], w: &mut Writer) -> Result<serde_json::Value>;
}

fn check_blocks<T: Block>(kind: Kind, blocks: &Blocks<T>) -> Result<()> {
    for (i, b) in blocks.items().into_iter().enumerate() {
        let p = if blocks.is_many() {
            format!("experiment.{}[{i}]", kind.as_str())
        } else {
            format!("experiment.{}", kind.as_str())
        };
        b.check().map_err(|e| prefixed(&p, e))?;
    }
    Ok(())
}

fn run_blocks<T: Block>(blocks: &Blocks<T>, seeds: &[u64], w: &mut Writer) -> Result<serde_json::Value> {
    match blocks {
        Blocks::One(b) => b.execute(seeds, w),
        Blocks::Many(v) => {
            let mut out = Vec::with_capacity(v.len());
            for (i, b) in v.iter().enumerate() {
                w.prefix = format!("run{i}/");
                fs::create_dir_all(w.dir.join(&w.prefix))?;
                out.push(b.execute(seeds, w)?);
            }
            w.prefix.clear();
            Ok(serde_json::Value::Array(out))
        }
    }
}

/// Deserializes TOML, or JSON when the text starts with `{`.
pub fn parse_text<T: DeserializeOwned>(text: &str) -> Result<T> {
    if text.trim_start().starts_with('{') {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    } else {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

impl ExperimentConfig {
    /// Parses and validates a config.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = parse_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        let present: Vec<&str> = [
            ("simulate", e.simulate.is_some()),
            ("ode", e.ode.is_some()),
            ("compare", e.compare.is_some()),
            ("schedule", e.schedule.is_some()),
            ("phase", e.phase.is_some()),
            ("flow", e.flow.is_some()),
            ("convergence", e.convergence.is_some()),
            ("oracle", e.oracle.is_some()),
        ]
        .into_iter()
        .filter_map(|(n, p)| p.then_some(n))
        .collect();
        let kind = e.kind.as_str();
        if present != [kind] {
            return Err(Error::validation(
                format!("experiment.{kind}"),
                format!("expected exactly one block `[experiment.{kind}]`, found {present:?}"),
            ));
        }
        if e.seeds.is_empty() {
            return Err(Error::validation("experiment.seeds", "needs at least one seed"));
        }
        if matches!(&e.simulate, Some(Blocks::Many(v)) if v.is_empty())
            || matches!(&e.compare, Some(Blocks::Many(v)) if v.is_empty())
        {
            return Err(Error::validation(format!("experiment.{kind}"), "needs at least one entry"));
        }
        match e.kind {
            Kind::Simulate => check_blocks(e.kind, e.simulate.as_ref().expect("present")),
            Kind::Ode => check_blocks(e.kind, e.ode.as_ref().expect("present")),
            Kind::Compare => check_blocks(e.kind, e.compare.as_ref().expect("present")),
            Kind::Schedule => check_blocks(e.kind, e.schedule.as_ref().expect("present")),
            Kind::Phase => check_blocks(e.kind, e.phase.as_ref().expect("present")),
            Kind::Flow => check_blocks(e.kind, e.flow.as_ref().expect("present")),
            Kind::Convergence => check_blocks(e.kind, e.convergence.as_ref().expect("present")),
            Kind::Oracle => check_blocks(e.kind, e.oracle.as_ref().expect("present")),
        }
    }
}

impl Block for SimConfig {
    fn check(&self) -> Result<()> {
        self.validate()
    }

    fn execute(&self, seeds: &[u64], w: &mut Writer) -> Result<serde_json::Value> {
        let trs = simulate_ensemble(self, seeds)?;
        let mean = write_ensemble(w, seeds, &trs)?;
        Ok(json!({ "protocol": self.protocol, "T": self.spec.length, "final_mean": mean.last().map(row_json) }))
    }
}

impl Block for OdeConfig {
    fn check(&self) -> Result<()> {
        self.validate()
    }

    fn execute(&self, _seeds: &[u64], w: &mut Writer) -> Result<serde_json::Value> {
        let (tr, trace) = integrate_traced(self)?;
        w.put("trajectory_ode.csv", tr.to_csv_string())?;
        if self.schedule.is_some() {
            w.put("schedule_trace.csv", trace_to_csv(&trace))?;
        }
        Ok(json!({ "protocol": self.protocol, "T": self.spec.length, "final": tr.last().map(row_json) }))
    }
}

impl Block for CompareConfig {
    fn check(&self) -> Result<()> {
        self.sim.validate().map_err(|e| prefixed("sim", e))?;
        self.ode_config().validate().map_err(|e| prefixed("ode", e))
    }

    fn execute(&self, seeds: &[u64], w: &mut Writer) -> Result<serde_json::Value> {
        let trs = simulate_ensemble(&self.sim, seeds)?;
        write_ensemble(w, seeds, &trs)?;
        let (ode, _) = integrate_traced(&self.ode_config())?;
        w.put("trajectory_ode.csv", ode.to_csv_string())?;
        let report = compare(&trs, &ode)?;
        w.put("deviation.csv", report.to_csv())?;
        Ok(json!({ "protocol": self.sim.protocol, "T": self.sim.spec.length, "deviation": report }))
    }
}

impl Block for ScheduleExperiment {
    fn check(&self) -> Result<()> {
        self.base.validate().map_err(|e| prefixed("base", e))?;
        if self.schedules.is_empty() {
            return Err(Error::validation("schedules", "needs at least one schedule"));
        }
        for (i, sc) in self.schedules.iter().enumerate() {
            let mut cfg = self.base.clone();
            cfg.schedule = Some(sc.clone());
            cfg.validate().map_err(|e| prefixed(&format!("schedules[{i}]"), e))?;
        }
        Ok(())
    }

    fn execute(&self, _seeds: &[u64], w: &mut Writer) -> Result<serde_json::Value> {
        let runs = run_schedule_comparison(&self.base, &self.schedules)?;
        let mut main_trace = None;
        let mut used: Vec<String> = Vec::new();
        for run in &runs {
            let mut label = file_label(&run.schedule.label());
            if used.contains(&label) {
                label = format!("{label}_{}", used.len());
            }
            used.push(label.clone());
            w.put(&format!("trajectory_{label}.csv"), run.trajectory.to_csv_string())?;
            w.put(&format!("schedule_trace_{label}.csv"), trace_to_csv(&run.trace))?;
            let optimal = matches!(
                run.schedule.mode,
                ScheduleMode::OptimalT { .. } | ScheduleMode::OptimalEta { .. }
            );
            if main_trace.is_none() && optimal {
                main_trace = Some(&run.trace);
            }
        }
        w.put("schedule_trace.csv", trace_to_csv(main_trace.unwrap_or(&runs[0].trace)))?;
        let finals: Vec<_> = runs
            .iter()
            .zip(&used)
            .map(|(r, label)| json!({ "schedule": label, "final_rho": r.trajectory.last().map(|x| x.rho) }))
            .collect();
        Ok(json!({ "runs": finals }))
    }
}

impl Block for PhaseExperiment {
    fn check(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::validation("T", "must be >= 1"));
        }
        if !(self.q > 0.0) {
            return Err(Error::validation("q", "must be positive"));
        }
        for (name, axis) in [("eta1", &self.eta1), ("eta2", &self.eta2)] {
            if axis.values(name)?.iter().any(|&v| v < 0.0) {
                return Err(Error::validation(name, "rates must be non-negative"));
            }
        }
        Ok(())
    }

    fn execute(&self, _seeds: &[u64], w: &mut Writer) -> Result<serde_json::Value> {
        let cells = phase_map(self.length, self.q, &self.eta1.values("eta1")?, &self.eta2.values("eta2")?)?;
        w.put("phase_map.csv", phase_map_csv(&cells))?;
        let sets: Vec<FixedPointSet> = cells
            .iter()
            .map(|c| find_fixed_points(self.length, c.eta1, c.eta2, self.q))
            .collect::<Result<_>>()?;
        w.put("fixed_points.csv", fixed_points_csv(&sets))?;
        Ok(json!({ "T": self.length, "cells": cells.len(), "hybrid_hard_fraction": hybrid_fraction(&cells) }))
    }
}

impl Block for FlowExperiment {
    fn check(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::validation("T", "must be >= 1"));
        }
        if self.rho.values("rho")?.iter().any(|r| r.abs() > 1.0) {
            return Err(Error::validation("rho", "values must lie in [-1, 1]"));
        }
        if self.q.values("q")?.iter().any(|&v| v <= 0.0) {
            return Err(Error::validation("q", "values must be positive"));
        }
        if !(self.alpha_max > 0.0) {
            return Err(Error::validation("alpha_max", "must be positive"));
        }
        if let Some(s) = &self.success {
            s.eta1.values("success.eta1")?;
            s.eta2.values("success.eta2")?;
        }
        Ok(())
    }

    fn execute(&self, _seeds: &[u64], w: &mut Writer) -> Result<serde_json::Value> {
        let nodes = flow_field(self.length, self.eta1, self.eta2, &self.rho.values("rho")?, &self.q.values("q")?)?;
        w.put("flow_field.csv", flow_field_csv(&nodes))?;
        let mut ode = OdeConfig::new(
            EpisodeSpec::new(self.length),
            RewardProtocol::AllCorrect {
                eta1: self.eta1,
                eta2: self.eta2,
            },
            self.alpha_max,
        );
        ode.grid = GridSpec::default();
        let (tr, _) = integrate_traced(&ode)?;
        w.put("trajectory_ode.csv", tr.to_csv_string())?;
        let outcome = flow_outcome(self.length, self.eta1, self.eta2, self.alpha_max, default_eps_threshold())?;
        if let Some(s) = &self.success {
            let cells = success_map(
                self.length,
                &s.eta1.values("success.eta1")?,
                &s.eta2.values("success.eta2")?,
                s.alpha_max,
                s.eps_threshold,
            )?;
            let mut csv = String::from(SUCCESS_MAP_HEADER);
            csv.push('\n');
            for c in &cells {
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    fmt_float(c.eta1),
                    fmt_float(c.eta2),
                    fmt_float(c.rho),
                    fmt_float(c.q),
                    c.aligned
                ));
            }
            w.put("success_map.csv", csv)?;
        }
        Ok(serde_json::to_value(outcome).expect("plain data"))
    }
}

pub const SUCCESS_MAP_HEADER: &str = "eta1,eta2,rho,Q,aligned";

impl Block for ConvergenceExperiment {
    fn check(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::validation("T", "must be >= 1"));
        }
        if self.eta2.is_none() == self.below_critical.is_none() {
            return Err(Error::validation("eta2", "give exactly one of `eta2` and `below_critical`"));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::validation("fraction", "must lie in (0, 1]"));
        }
        if !(self.eta1 > 0.0) {
            return Err(Error::validation("eta1", "must be positive"));
        }
        if !(self.q > 0.0) {
            return Err(Error::validation("q", "must be positive"));
        }
        Ok(())
    }

    fn execute(&self, _seeds: &[u64], w: &mut Writer) -> Result<serde_json::Value> {
        let mut summary = serde_json::Map::new();
        summary.insert("T".into(), json!(self.length));
        let eta2s: Vec<f64> = match (&self.eta2, &self.below_critical) {
            (Some(a), _) => a.values("eta2")?,
            (None, Some(d)) => {
                let (lo, hi) = critical_penalty_bracket(self.length, self.eta1, self.q, self.critical_tol, 2.0 * self.eta1)?;
                summary.insert("eta_crit".into(), json!(lo));
                summary.insert("eta_crit_bracket".into(), json!([lo, hi]));
                d.values("below_critical")?.into_iter().map(|delta| lo - delta).collect()
            }
            (None, None) => unreachable!("checked"),
        };
        let rows = eta2s
            .iter()
            .map(|&eta2| convergence_time_with(self.length, self.eta1, eta2, self.q, self.rho0, self.fraction, self.alpha_max))
            .collect::<Result<Vec<_>>>()?;
        w.put("convergence.csv", convergence_csv(&rows))?;
        summary.insert("points".into(), json!(rows.len()));
        Ok(serde_json::Value::Object(summary))
    }
}

pub const ORACLE_HEADER: &str = "rho,Q,mean_dR,se_dR,ode_dR,mean_dQ,se_dQ,ode_dQ";

impl Block for OracleExperiment {
    fn check(&self) -> Result<()> {
        self.spec.validate()?;
        self.protocol.validate(&self.spec)?;
        if self.n_samples < 1000 {
            return Err(Error::validation("n_samples", "need at least 1000"));
        }
        if self.dim < 2 {
            return Err(Error::validation("D", "must be >= 2"));
        }
        if self.states.is_empty() {
            return Err(Error::validation("states", "needs at least one state"));
        }
        for (i, s) in self.states.iter().enumerate() {
            if OrderState::from_rho(s.rho, s.q).is_err() {
                return Err(Error::validation(format!("states[{i}]"), "need |rho| <= 1 and q > 0"));
            }
        }
        Ok(())
    }

    fn execute(&self, seeds: &[u64], w: &mut Writer) -> Result<serde_json::Value> {
        let seed = seeds[0];
        let mut csv = format!("{ORACLE_HEADER}\n");
        let mut worst: f64 = 0.0;
        for (i, s) in self.states.iter().enumerate() {
            let state = OrderState::from_rho(s.rho, s.q)?;
            let est = expected_update_oracle_with(
                &state,
                &self.spec,
                &self.protocol,
                self.dim,
                self.n_samples,
                seed.wrapping_add(i as u64),
                self.sampling,
            )?;
            let theory = match rhs(&state, &self.spec, &self.protocol) {
                Ok(f) => Some(f),
                Err(Error::NoClosedForm(_)) => None,
                Err(err) => return Err(err),
            };
            if let Some(f) = theory {
                worst = worst
                    .max(((est.mean_dr - f.dr) / est.se_dr()).abs())
                    .max(((est.mean_dq - f.dq) / est.se_dq()).abs());
            }
            let opt = |v: Option<f64>| v.map(fmt_float).unwrap_or_default();
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                fmt_float(s.rho),
                fmt_float(s.q),
                fmt_float(est.mean_dr),
                fmt_float(est.se_dr()),
                opt(theory.map(|f| f.dr)),
                fmt_float(est.mean_dq),
                fmt_float(est.se_dq()),
                opt(theory.map(|f| f.dq))
            ));
        }
        w.put("oracle.csv", csv)?;
        Ok(json!({ "max_abs_z": worst }))
    }
}

/// Gap between two curves on the same grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub sup: f64,
    pub mean_abs: f64,
    pub alpha_at_sup: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub points: usize,
    pub rho: Deviation,
    pub q: Deviation,
    pub expected_reward: Deviation,
}

pub const DEVIATION_HEADER: &str = "metric,sup,mean_abs,alpha_at_sup";

impl DeviationReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{DEVIATION_HEADER}\n");
        for (name, d) in [("rho", self.rho), ("Q", self.q), ("expected_reward", self.expected_reward)] {
            out.push_str(&format!(
                "{name},{},{},{}\n",
                fmt_float(d.sup),
                fmt_float(d.mean_abs),
                fmt_float(d.alpha_at_sup)
            ));
        }
        out
    }
}

/// Seed-averages `sims`, interpolates the average onto every `ode` grid
/// point inside its range and measures `|sim - ode|`.
pub fn compare(sims: &[Trajectory], ode: &Trajectory) -> Result<DeviationReport> {
    let mean = Trajectory::mean(sims)?;
    let mut acc = [(0.0f64, 0.0f64, 0.0f64); 3];
    let mut points = 0usize;
    for row in &ode.rows {
        let Some(s) = mean.interpolate(row.alpha) else { continue };
        points += 1;
        for (k, gap) in [
            (s.rho - row.rho).abs(),
            (s.q - row.q).abs(),
            (s.expected_reward - row.expected_reward).abs(),
        ]
        .into_iter()
        .enumerate()
        {
            acc[k].1 += gap;
            if points == 1 || gap > acc[k].0 {
                acc[k].0 = gap;
                acc[k].2 = row.alpha;
            }
        }
    }
    if points == 0 {
        return Err(Error::DisjointRanges);
    }
    let dev = |k: usize| Deviation {
        sup: acc[k].0,
        mean_abs: acc[k].1 / points as f64,
        alpha_at_sup: acc[k].2,
    };
    Ok(DeviationReport {
        points,
        rho: dev(0),
        q: dev(1),
        expected_reward: dev(2),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub kind: Kind,
    pub config: ExperimentConfig,
    pub artifacts: Vec<Artifact>,
    pub summary: serde_json::Value,
    pub wall_clock_seconds: f64,
    pub threads: usize,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Overrides applied on top of a loaded config.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub output_dir: Option<PathBuf>,
    pub seed_offset: u64,
}

pub struct RunReport {
    pub output_dir: PathBuf,
    pub manifest: Manifest,
}

struct Writer {
    dir: PathBuf,
    prefix: String,
    artifacts: Vec<Artifact>,
}

impl Writer {
    fn put(&mut self, name: &str, content: String) -> Result<()> {
        let file = format!("{}{name}", self.prefix);
        let bytes = content.into_bytes();
        fs::write(self.dir.join(&file), &bytes)?;
        self.artifacts.push(Artifact {
            file,
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }
}

fn row_json(r: &TrajectoryRow) -> serde_json::Value {
    json!({ "alpha": r.alpha, "rho": r.rho, "Q": r.q, "expected_reward": r.expected_reward })
}

fn write_ensemble(w: &mut Writer, seeds: &[u64], trajectories: &[Trajectory]) -> Result<Trajectory> {
    for (seed, tr) in seeds.iter().zip(trajectories) {
        w.put(&format!("trajectory_seed{seed}.csv"), tr.to_csv_string())?;
    }
    let mean = Trajectory::mean(trajectories)?;
    w.put("trajectory_mean.csv", mean.to_csv_string())?;
    Ok(mean)
}

fn file_label(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect()
}

fn execute(cfg: &ExperimentConfig, w: &mut Writer) -> Result<serde_json::Value> {
    let e = &cfg.experiment;
    let seeds = &e.seeds;
    match e.kind {
        Kind::Simulate => run_blocks(e.simulate.as_ref().expect("validated"), seeds, w),
        Kind::Ode => run_blocks(e.ode.as_ref().expect("validated"), seeds, w),
        Kind::Compare => run_blocks(e.compare.as_ref().expect("validated"), seeds, w),
        Kind::Schedule => run_blocks(e.schedule.as_ref().expect("validated"), seeds, w),
        Kind::Phase => run_blocks(e.phase.as_ref().expect("validated"), seeds, w),
        Kind::Flow => run_blocks(e.flow.as_ref().expect("validated"), seeds, w),
        Kind::Convergence => run_blocks(e.convergence.as_ref().expect("validated"), seeds, w),
        Kind::Oracle => run_blocks(e.oracle.as_ref().expect("validated"), seeds, w),
    }
}

/// Runs an already parsed config, writing artifacts and `manifest.json`
/// into the resolved output directory.
pub fn run_config(mut cfg: ExperimentConfig, default_dir: PathBuf, opts: &RunOptions) -> Result<RunReport> {
    let start = Instant::now();
    for s in cfg.experiment.seeds.iter_mut() {
        *s = s.wrapping_add(opts.seed_offset);
    }
    let dir = opts
        .output_dir
        .clone()
        .or_else(|| cfg.experiment.output_dir.clone())
        .unwrap_or(default_dir);
    cfg.experiment.output_dir = Some(dir.clone());
    cfg.validate()?;
    fs::create_dir_all(&dir)?;
    let mut w = Writer {
        dir: dir.clone(),
        prefix: String::new(),
        artifacts: Vec::new(),
    };
    let summary = execute(&cfg, &mut w)?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        kind: cfg.experiment.kind,
        config: cfg,
        artifacts: w.artifacts,
        summary,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        threads: rayon::current_num_threads(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(dir.join("manifest.json"), text + "\n")?;
    Ok(RunReport {
        output_dir: dir,
        manifest,
    })
}

/// Loads `path` and runs it. Without an explicit output directory the
/// artifacts go to `out/<config stem>`.
pub fn run(path: &Path, opts: &RunOptions) -> Result<RunReport> {
    let cfg = ExperimentConfig::load(path)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("experiment");
    run_config(cfg, PathBuf::from("out").join(stem), opts)
}

/// Process exit status for an error: 2 for rejected input, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Validation { .. } | Error::Parse(_) => 2,
        _ => 1,
    }
}
