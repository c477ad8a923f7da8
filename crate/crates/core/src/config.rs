//! Scenario configuration: TOML text with sections `factory`, `radio`,
//! `net`, `slices`, `flows`, `policies` and `experiment`.
//!
//! Parsing rejects unknown keys. [`ScenarioConfig::validate`] then checks the
//! cross-field invariants and reports every problem it finds as a
//! [`Diagnostic`] naming the offending `section.key`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factory::{Factory, Point};
use crate::locate::LocateExperiment;
use crate::monitor::{MonitorExperiment, RegionRef};
use crate::net::{Cell, DeviceSpec, NetSettings, NetworkSpec, SliceSpec, TrafficFlow};
use crate::offload::{OffloadExperiment, OffloadPolicyConfig, PredictorSettings};
use crate::radio::fusion::FusionExperiment;
use crate::radio::PropagationParams;
use crate::slicing::{SlicingExperiment, SlicingParams};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    /// Dotted location, e.g. `factory.agv.speed`.
    pub path: String,
    pub message: String,
}

impl Diagnostic {
    fn new(path: &str, message: impl Into<String>) -> Self {
        Diagnostic {
            path: path.to_string(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadioSection {
    /// Parameters for every cell that does not set its own.
    pub propagation: PropagationParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    pub id: String,
    pub position: Point,
    pub total_prbs: u32,
    #[serde(default)]
    pub prb_bandwidth_hz: Option<f64>,
    #[serde(default)]
    pub params: Option<PropagationParams>,
    #[serde(default)]
    pub static_allocation: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    #[serde(default)]
    pub settings: NetSettings,
    pub cells: Vec<CellConfig>,
    #[serde(default)]
    pub devices: Vec<DeviceSpec>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoliciesSection {
    #[serde(default)]
    pub offload: Option<OffloadPolicyConfig>,
    #[serde(default)]
    pub predictors: PredictorSettings,
    #[serde(default)]
    pub slicing: Option<SlicingParams>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default)]
    pub offload: Option<OffloadExperiment>,
    #[serde(default)]
    pub slicing: Option<SlicingExperiment>,
    #[serde(default)]
    pub locate: Option<LocateExperiment>,
    #[serde(default)]
    pub monitor: Option<MonitorExperiment>,
    #[serde(default)]
    pub fusion: Option<FusionExperiment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub master_seed: u64,
    /// Seconds of simulated time for commands without their own run length.
    pub run_length: f64,
    pub factory: Factory,
    pub radio: RadioSection,
    pub net: NetSection,
    #[serde(default)]
    pub slices: Vec<SliceSpec>,
    #[serde(default)]
    pub flows: Vec<TrafficFlow>,
    #[serde(default)]
    pub policies: PoliciesSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
}

/// 1-based line and column of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

impl ScenarioConfig {
    /// Parses without semantic validation.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
            Error::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        })
    }

    /// Reads, parses and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::parse(&text)?;
        let diags = cfg.validate();
        if diags.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Validation(diags))
        }
    }

    pub fn cells(&self) -> Vec<Cell> {
        self.net
            .cells
            .iter()
            .map(|c| Cell {
                id: c.id.clone(),
                position: c.position,
                total_prbs: c.total_prbs,
                prb_bandwidth_hz: c.prb_bandwidth_hz.unwrap_or(crate::net::DEFAULT_PRB_BANDWIDTH_HZ),
                params: c.params.unwrap_or(self.radio.propagation),
                static_allocation: c.static_allocation.clone(),
            })
            .collect()
    }

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            settings: self.net.settings.clone(),
            cells: self.cells(),
            slices: self.slices.clone(),
            devices: self.net.devices.clone(),
            flows: self.flows.clone(),
        }
    }

    /// Every invariant violation found; empty when the scenario is valid.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut d = Vec::new();
        if !(self.run_length > 0.0) || !self.run_length.is_finite() {
            d.push(Diagnostic::new("run_length", "must be a positive number of seconds"));
        }
        self.validate_factory(&mut d);
        validate_propagation("radio.propagation", &self.radio.propagation, &mut d);
        self.validate_net(&mut d);
        self.validate_flows(&mut d);
        self.validate_policies(&mut d);
        d
    }

    fn validate_factory(&self, d: &mut Vec<Diagnostic>) {
        let f = &self.factory;
        let b = f.layout.bounds;
        if !(b.min.x < b.max.x && b.min.y < b.max.y) {
            d.push(Diagnostic::new("factory.layout.bounds", "min must lie strictly below max"));
        }
        for (i, w) in f.layout.walls.iter().enumerate() {
            if !b.contains(w.a) || !b.contains(w.b) {
                d.push(Diagnostic::new("factory.layout.walls", format!("wall {i} leaves the bounds")));
            }
            if !(w.penetration_loss >= 0.0) {
                d.push(Diagnostic::new(
                    "factory.layout.walls.penetration_loss",
                    format!("wall {i} has negative loss"),
                ));
            }
        }
        if !(f.cycle.length > 0.0) || !f.cycle.length.is_finite() {
            d.push(Diagnostic::new("factory.cycle.length", "must be positive"));
        }
        if f.cycle.phases == 0 {
            d.push(Diagnostic::new("factory.cycle.phases", "must be at least 1"));
        }
        if !(f.mode_jitter >= 0.0) {
            d.push(Diagnostic::new("factory.mode_jitter", "must be non-negative"));
        }
        let mut ids = BTreeSet::new();
        for m in &f.machines {
            if !ids.insert(m.id.as_str()) {
                d.push(Diagnostic::new("factory.machine.id", format!("duplicate machine `{}`", m.id)));
            }
            if m.modes.is_empty() {
                d.push(Diagnostic::new("factory.machine.modes", format!("machine `{}` has no modes", m.id)));
            }
            for mode in &m.modes {
                if !(mode.duration > 0.0) {
                    d.push(Diagnostic::new(
                        "factory.machine.modes.duration",
                        format!("machine `{}` mode `{}` must last > 0 s", m.id, mode.name),
                    ));
                }
            }
            if m.schedule.is_empty() {
                d.push(Diagnostic::new("factory.machine.schedule", format!("machine `{}` has an empty schedule", m.id)));
            } else if let Some(&bad) = m.schedule.iter().find(|&&i| i >= m.modes.len()) {
                d.push(Diagnostic::new(
                    "factory.machine.schedule",
                    format!("machine `{}` schedules unknown mode index {bad}", m.id),
                ));
            } else if f.cycle.length > 0.0 && m.modes.iter().all(|x| x.duration > 0.0) {
                let ratio = f.cycle.length / m.cycle_length();
                if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
                    d.push(Diagnostic::new(
                        "factory.machine.schedule",
                        format!(
                            "machine `{}` cycle {} s does not divide the production cycle {} s",
                            m.id,
                            m.cycle_length(),
                            f.cycle.length
                        ),
                    ));
                }
            }
            if !b.contains(m.position) {
                d.push(Diagnostic::new("factory.machine.position", format!("machine `{}` is outside the bounds", m.id)));
            }
        }
        let mut agv_ids = BTreeSet::new();
        for a in &f.agvs {
            if !agv_ids.insert(a.id.as_str()) {
                d.push(Diagnostic::new("factory.agv.id", format!("duplicate AGV `{}`", a.id)));
            }
            if !(a.speed > 0.0) || !a.speed.is_finite() {
                d.push(Diagnostic::new(
                    "factory.agv.speed",
                    format!("AGV `{}` speed {} must be positive and finite", a.id, a.speed),
                ));
            }
            if a.waypoints.is_empty() {
                d.push(Diagnostic::new("factory.agv.waypoints", format!("AGV `{}` has no waypoints", a.id)));
            }
            if a.waypoints.windows(2).any(|w| w[0] == w[1]) {
                d.push(Diagnostic::new(
                    "factory.agv.waypoints",
                    format!("AGV `{}` repeats a waypoint consecutively", a.id),
                ));
            }
            if a.waypoints.iter().any(|p| !b.contains(*p)) {
                d.push(Diagnostic::new("factory.agv.waypoints", format!("AGV `{}` leaves the bounds", a.id)));
            }
            if let Some([s, e]) = a.active_window {
                if !(s >= 0.0 && s < e) {
                    d.push(Diagnostic::new("factory.agv.active_window", format!("AGV `{}` window must satisfy 0 ≤ start < stop", a.id)));
                }
            }
        }
    }

    fn validate_net(&self, d: &mut Vec<Diagnostic>) {
        let s = &self.net.settings;
        if !(s.slot_ms > 0.0) {
            d.push(Diagnostic::new("net.slot_ms", "must be positive"));
        }
        if !(s.rem_cell_size > 0.0) {
            d.push(Diagnostic::new("net.rem_cell_size", "must be positive"));
        }
        if !(s.spectral_cap > 0.0) {
            d.push(Diagnostic::new("net.spectral_cap", "must be positive"));
        }
        if !(s.attach_hysteresis_db >= 0.0) {
            d.push(Diagnostic::new("net.attach_hysteresis_db", "must be non-negative"));
        }
        if self.net.cells.is_empty() {
            d.push(Diagnostic::new("net.cells", "at least one cell is required"));
        }
        let bounds = self.factory.layout.bounds;
        let mut ids = BTreeSet::new();
        for c in &self.net.cells {
            if !ids.insert(c.id.as_str()) {
                d.push(Diagnostic::new("net.cells.id", format!("duplicate cell `{}`", c.id)));
            }
            if c.total_prbs == 0 {
                d.push(Diagnostic::new("net.cells.total_prbs", format!("cell `{}` has no PRBs", c.id)));
            }
            if let Some(bw) = c.prb_bandwidth_hz {
                if !(bw > 0.0) {
                    d.push(Diagnostic::new("net.cells.prb_bandwidth_hz", format!("cell `{}` must be positive", c.id)));
                }
            }
            if !bounds.contains(c.position) {
                d.push(Diagnostic::new("net.cells.position", format!("cell `{}` is outside the bounds", c.id)));
            }
            if let Some(p) = &c.params {
                validate_propagation(&format!("net.cells.{}.params", c.id), p, d);
            }
            if !c.static_allocation.is_empty() {
                if c.static_allocation.len() != self.slices.len() {
                    d.push(Diagnostic::new(
                        "net.cells.static_allocation",
                        format!(
                            "cell `{}` lists {} shares for {} slices",
                            c.id,
                            c.static_allocation.len(),
                            self.slices.len()
                        ),
                    ));
                }
                let sum: u32 = c.static_allocation.iter().sum();
                if sum > c.total_prbs {
                    d.push(Diagnostic::new(
                        "net.cells.static_allocation",
                        format!("cell `{}` allocates {sum} PRBs of {}", c.id, c.total_prbs),
                    ));
                }
            }
        }
        let mut slice_ids = BTreeSet::new();
        for sl in &self.slices {
            if !slice_ids.insert(sl.id.as_str()) {
                d.push(Diagnostic::new("slices.id", format!("duplicate slice `{}`", sl.id)));
            }
            if !(sl.latency_bound_ms > 0.0) {
                d.push(Diagnostic::new("slices.latency_bound_ms", format!("slice `{}` must be positive", sl.id)));
            }
            if !(sl.throughput_floor_bps >= 0.0) {
                d.push(Diagnostic::new("slices.throughput_floor_bps", format!("slice `{}` must be non-negative", sl.id)));
            }
            if !(sl.weight > 0.0) {
                d.push(Diagnostic::new("slices.weight", format!("slice `{}` must be positive", sl.id)));
            }
            if sl.queue_cap_bytes == 0 {
                d.push(Diagnostic::new("slices.queue_cap_bytes", format!("slice `{}` must be positive", sl.id)));
            }
        }
        let mut dev_ids = BTreeSet::new();
        for dev in &self.net.devices {
            if !dev_ids.insert(dev.id.as_str()) {
                d.push(Diagnostic::new("net.devices.id", format!("duplicate device `{}`", dev.id)));
            }
            match (&dev.agv, dev.position) {
                (Some(agv), _) => {
                    if self.factory.agv(agv).is_none() {
                        d.push(Diagnostic::new("net.devices.agv", format!("device `{}` rides unknown AGV `{agv}`", dev.id)));
                    }
                }
                (None, Some(p)) => {
                    if !bounds.contains(p) {
                        d.push(Diagnostic::new("net.devices.position", format!("device `{}` is outside the bounds", dev.id)));
                    }
                }
                (None, None) => d.push(Diagnostic::new(
                    "net.devices.position",
                    format!("device `{}` needs a position or an AGV", dev.id),
                )),
            }
        }
    }

    fn validate_flows(&self, d: &mut Vec<Diagnostic>) {
        for (i, f) in self.flows.iter().enumerate() {
            let at = |key: &str| format!("flows.{key}");
            if !self.net.devices.iter().any(|x| x.id == f.device_id) {
                d.push(Diagnostic::new(&at("device_id"), format!("flow {i} names unknown device `{}`", f.device_id)));
            }
            if !self.slices.iter().any(|s| s.id == f.slice_id) {
                d.push(Diagnostic::new(&at("slice_id"), format!("flow {i} names unknown slice `{}`", f.slice_id)));
            }
            if !(f.period_ms > 0.0) {
                d.push(Diagnostic::new(&at("period_ms"), format!("flow {i} period must be positive")));
            }
            if f.payload_bytes == 0 {
                d.push(Diagnostic::new(&at("payload_bytes"), format!("flow {i} payload must be positive")));
            }
            if !(f.jitter_sigma_ms >= 0.0) {
                d.push(Diagnostic::new(&at("jitter_sigma_ms"), format!("flow {i} jitter must be non-negative")));
            }
            if let Some(shape) = f.pareto_shape {
                if !(shape > 1.0) {
                    d.push(Diagnostic::new(&at("pareto_shape"), format!("flow {i} shape must exceed 1")));
                }
            }
            match (&f.gate_machine, f.gate_mode) {
                (Some(m), Some(mode)) => match self.factory.machine(m) {
                    None => d.push(Diagnostic::new(&at("gate_machine"), format!("flow {i} gates on unknown machine `{m}`"))),
                    Some(machine) if mode >= machine.modes.len() => d.push(Diagnostic::new(
                        &at("gate_mode"),
                        format!("flow {i} gates on mode {mode}, machine `{m}` has {}", machine.modes.len()),
                    )),
                    Some(_) => {}
                },
                (None, None) => {}
                _ => d.push(Diagnostic::new(&at("gate_machine"), format!("flow {i} must set both gate_machine and gate_mode"))),
            }
        }
    }

    fn validate_policies(&self, d: &mut Vec<Diagnostic>) {
        if let Some(cfg) = &self.policies.offload {
            if let Err(e) = cfg.validate() {
                d.push(Diagnostic::new("policies.offload", e.to_string()));
            }
        }
        let p = &self.policies.predictors;
        if p.k == 0 {
            d.push(Diagnostic::new("policies.predictors.k", "must be at least 1"));
        }
        if p.forest.trees == 0 {
            d.push(Diagnostic::new("policies.predictors.forest.trees", "must be at least 1"));
        }
        if !(p.z >= 0.0) {
            d.push(Diagnostic::new("policies.predictors.z", "must be non-negative"));
        }
        if let Some(sp) = &self.policies.slicing {
            if let Err(e) = sp.validate() {
                d.push(Diagnostic::new("policies.slicing", e.to_string()));
            }
            if self.net.cells.len() != 1 {
                d.push(Diagnostic::new("net.cells", "slicing needs exactly one cell"));
            } else if self.net.cells[0].total_prbs % sp.granularity.max(1) != 0 {
                d.push(Diagnostic::new("policies.slicing.granularity", "must divide the cell's total_prbs"));
            }
            if self.slices.is_empty() {
                d.push(Diagnostic::new("slices", "slicing needs at least one slice"));
            }
        }
        if let Some(exp) = &self.experiment.slicing {
            if self.policies.slicing.is_none() {
                d.push(Diagnostic::new("policies.slicing", "required by experiment.slicing"));
            }
            if exp.target_demand_scale.len() != self.slices.len() {
                d.push(Diagnostic::new("experiment.slicing.target_demand_scale", "needs one factor per slice"));
            }
            if exp.target_demand_scale.iter().any(|&f| !(f > 0.0)) {
                d.push(Diagnostic::new("experiment.slicing.target_demand_scale", "factors must be positive"));
            }
            if exp.eval_windows == 0 {
                d.push(Diagnostic::new("experiment.slicing.eval_windows", "must be at least 1"));
            }
            if !(exp.convergence_fraction > 0.0 && exp.convergence_fraction <= 1.0) {
                d.push(Diagnostic::new("experiment.slicing.convergence_fraction", "must lie in (0, 1]"));
            }
        }
        if let Some(exp) = &self.experiment.locate {
            if self.net.cells.len() < 3 {
                d.push(Diagnostic::new("net.cells", "positioning needs at least three transmitters"));
            }
            if exp.stride == 0 {
                d.push(Diagnostic::new("experiment.locate.stride", "must be at least 1"));
            }
            if exp.k_values.iter().any(|&k| k == 0) {
                d.push(Diagnostic::new("experiment.locate.k_values", "k must be at least 1"));
            }
            if exp.methods().is_empty() {
                d.push(Diagnostic::new("experiment.locate", "no positioning methods selected"));
            }
            if exp.queries == 0 {
                d.push(Diagnostic::new("experiment.locate.queries", "must be at least 1"));
            }
            if !(exp.noise_sigma >= 0.0) {
                d.push(Diagnostic::new("experiment.locate.noise_sigma", "must be non-negative"));
            }
            if let Some(c) = exp.cell_size {
                if !(c > 0.0) {
                    d.push(Diagnostic::new("experiment.locate.cell_size", "must be positive"));
                }
            }
        }
        if let Some(exp) = &self.experiment.fusion {
            if let Err(e) = exp.validate() {
                d.push(Diagnostic::new("experiment.fusion", e));
            }
            if !self.net.cells.iter().any(|c| c.id == exp.transmitter) {
                d.push(Diagnostic::new("experiment.fusion.transmitter", format!("unknown cell `{}`", exp.transmitter)));
            }
        }
        if let Some(exp) = &self.experiment.monitor {
            if exp.monitored.is_empty() {
                d.push(Diagnostic::new("experiment.monitor.monitored", "needs at least one region"));
            }
            let mut check = |path: &str, r: &RegionRef| {
                if !self.net.cells.iter().any(|c| c.id == r.cell) {
                    d.push(Diagnostic::new(path, format!("unknown cell `{}`", r.cell)));
                }
                if !self.slices.iter().any(|s| s.id == r.slice) {
                    d.push(Diagnostic::new(path, format!("unknown slice `{}`", r.slice)));
                }
            };
            for r in &exp.monitored {
                check("experiment.monitor.monitored", r);
            }
            check("experiment.monitor.hidden", &exp.hidden);
            let ratio = exp.bin_ms / self.net.settings.slot_ms;
            if !(ratio >= 1.0) || (ratio - ratio.round()).abs() > 1e-9 {
                d.push(Diagnostic::new("experiment.monitor.bin_ms", "must be a whole number of slots"));
            }
            if exp.window_bins == 0 || exp.k == 0 {
                d.push(Diagnostic::new("experiment.monitor", "window_bins and k must be at least 1"));
            }
            if exp.train_cycles == 0 || exp.eval_cycles == 0 {
                d.push(Diagnostic::new("experiment.monitor", "train_cycles and eval_cycles must be at least 1"));
            }
        }
        if let Some(exp) = &self.experiment.offload {
            if self.policies.offload.is_none() {
                d.push(Diagnostic::new("policies.offload", "required by experiment.offload"));
            }
            if !self.net.devices.iter().any(|x| x.id == exp.device) {
                d.push(Diagnostic::new("experiment.offload.device", format!("unknown device `{}`", exp.device)));
            }
            if exp.eval_cycles == 0 {
                d.push(Diagnostic::new("experiment.offload.eval_cycles", "must be at least 1"));
            }
            if exp.train_cycles == 0 {
                d.push(Diagnostic::new("experiment.offload.train_cycles", "must be at least 1"));
            }
            if !(exp.report_interval > 0.0) {
                d.push(Diagnostic::new("experiment.offload.report_interval", "must be positive"));
            }
            if !(exp.decision_epoch >= exp.report_interval) {
                d.push(Diagnostic::new("experiment.offload.decision_epoch", "must be at least one report interval"));
            }
            if let Some(h) = exp.horizon {
                if !(h > 0.0) {
                    d.push(Diagnostic::new("experiment.offload.horizon", "must be positive"));
                }
            }
        }
    }
}

fn validate_propagation(path: &str, p: &PropagationParams, d: &mut Vec<Diagnostic>) {
    if !(p.exponent > 0.0) {
        d.push(Diagnostic::new(&format!("{path}.exponent"), "must be positive"));
    }
    if !(p.d0 > 0.0) {
        d.push(Diagnostic::new(&format!("{path}.d0"), "must be positive"));
    }
    if !(p.d_min >= 0.0) {
        d.push(Diagnostic::new(&format!("{path}.d_min"), "must be non-negative"));
    }
    if !(p.shadowing_sigma >= 0.0) {
        d.push(Diagnostic::new(&format!("{path}.shadowing_sigma"), "must be non-negative"));
    }
    if !(p.fast_fading_sigma >= 0.0) {
        d.push(Diagnostic::new(&format!("{path}.fast_fading_sigma"), "must be non-negative"));
    }
    if !(p.decorrelation_distance > 0.0) {
        d.push(Diagnostic::new(&format!("{path}.decorrelation_distance"), "must be positive"));
    }
}
