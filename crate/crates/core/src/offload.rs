//! Edge-offloading orchestration.
//!
//! A device's compute task lives either locally or on the edge cloud, and
//! moving it takes time in both directions. [`OffloadSession`] is the
//! placement state machine; [`decide`] turns a throughput prediction into a
//! placement action with a two-threshold hysteresis rule; the experiment
//! driver replays a simulated uplink trace through the session for each
//! policy and scores time offloaded, re-placements and failures.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factory::{Factory, Point};
use crate::net::{Network, NetworkSpec};
use crate::output::{fmt_f64, CsvTable};
use crate::predict::{
    ar_fit, forest_fit, knn_fit, predict_oracle, predict_reactive, ArModel, FeatureScales,
    ForestModel, ForestParams, KnnModel, Prediction, Predictor, PredictorQuery, ThroughputTrace,
    TrainingSet,
};
use crate::sim::{rng_stream, streams, Kernel};

const COMPLETE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffloadPolicyConfig {
    /// bit/s; Local → offload when the conservative prediction reaches it.
    pub threshold_up: f64,
    /// bit/s; Edge → onboard when the conservative prediction drops below it.
    pub threshold_down: f64,
    /// Seconds to move the task device → edge.
    pub t_offload: f64,
    /// Seconds to move the task edge → device.
    pub t_onboard: f64,
    /// Seconds of continuous violation tolerated before a failure.
    pub fail_grace: f64,
    /// bit/s the offloaded task needs.
    pub required_throughput: f64,
}

impl OffloadPolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("t_offload", self.t_offload),
            ("t_onboard", self.t_onboard),
            ("fail_grace", self.fail_grace),
            ("required_throughput", self.required_throughput),
            ("threshold_down", self.threshold_down),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be finite and non-negative")));
            }
        }
        if !(self.threshold_down <= self.threshold_up) {
            return Err(Error::InvalidArgument(format!(
                "threshold_down {} exceeds threshold_up {}",
                self.threshold_down, self.threshold_up
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlacementState {
    Local,
    /// Seconds of transfer left.
    TransferringToEdge(f64),
    Edge,
    TransferringToDevice(f64),
}

impl PlacementState {
    pub fn kind(&self) -> StateKind {
        match self {
            PlacementState::Local => StateKind::Local,
            PlacementState::TransferringToEdge(_) => StateKind::TransferringToEdge,
            PlacementState::Edge => StateKind::Edge,
            PlacementState::TransferringToDevice(_) => StateKind::TransferringToDevice,
        }
    }

    pub fn is_stable(&self) -> bool {
        matches!(self, PlacementState::Local | PlacementState::Edge)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StateKind {
    Local,
    TransferringToEdge,
    Edge,
    TransferringToDevice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Stay,
    StartOffload,
    StartOnboard,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SessionEvent {
    Enter { t: f64, state: StateKind },
    Failure { t: f64 },
}

impl SessionEvent {
    pub fn time(&self) -> f64 {
        match *self {
            SessionEvent::Enter { t, .. } | SessionEvent::Failure { t } => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffloadSession {
    pub device_id: String,
    pub state: PlacementState,
    /// Seconds of continuous throughput violation.
    pub deficit_clock: f64,
    pub clock: f64,
    pub event_log: Vec<SessionEvent>,
}

impl OffloadSession {
    /// A session starting `Local` at time `t0`.
    pub fn new(device_id: &str, t0: f64) -> Self {
        OffloadSession {
            device_id: device_id.to_string(),
            state: PlacementState::Local,
            deficit_clock: 0.0,
            clock: t0,
            event_log: vec![SessionEvent::Enter {
                t: t0,
                state: StateKind::Local,
            }],
        }
    }

    fn enter(&mut self, t: f64, state: PlacementState) {
        self.state = state;
        self.event_log.push(SessionEvent::Enter { t, state: state.kind() });
    }

    /// Starts the transfer chosen by [`decide`]. Zero-length transfers
    /// complete immediately.
    pub fn apply(&mut self, action: Action, cfg: &OffloadPolicyConfig) -> Result<()> {
        if action == Action::Stay {
            return Ok(());
        }
        let t = self.clock;
        match (self.state, action) {
            (PlacementState::Local, Action::StartOffload) => {
                self.enter(t, PlacementState::TransferringToEdge(cfg.t_offload));
                if cfg.t_offload <= COMPLETE_EPS {
                    self.enter(t, PlacementState::Edge);
                }
            }
            (PlacementState::Edge, Action::StartOnboard) => {
                self.deficit_clock = 0.0;
                self.enter(t, PlacementState::TransferringToDevice(cfg.t_onboard));
                if cfg.t_onboard <= COMPLETE_EPS {
                    self.enter(t, PlacementState::Local);
                }
            }
            (state, action) => {
                return Err(Error::InvalidArgument(format!(
                    "action {action:?} is not valid in state {:?}",
                    state.kind()
                )))
            }
        }
        Ok(())
    }

    /// Advances by `dt` seconds during which the uplink delivered `measured_ul`.
    pub fn step(&mut self, measured_ul: f64, dt: f64, cfg: &OffloadPolicyConfig) {
        let t0 = self.clock;
        self.clock += dt;
        let exposed = matches!(
            self.state,
            PlacementState::TransferringToEdge(_) | PlacementState::Edge
        );
        if exposed && measured_ul < cfg.required_throughput {
            self.deficit_clock += dt;
        } else {
            self.deficit_clock = 0.0;
        }
        if exposed && self.deficit_clock > cfg.fail_grace + COMPLETE_EPS {
            self.deficit_clock = 0.0;
            self.event_log.push(SessionEvent::Failure { t: self.clock });
            self.enter(self.clock, PlacementState::Local);
            return;
        }
        match self.state {
            PlacementState::TransferringToEdge(rem) => {
                if rem - dt <= COMPLETE_EPS {
                    self.enter(t0 + rem, PlacementState::Edge);
                } else {
                    self.state = PlacementState::TransferringToEdge(rem - dt);
                }
            }
            PlacementState::TransferringToDevice(rem) => {
                if rem - dt <= COMPLETE_EPS {
                    self.enter(t0 + rem, PlacementState::Local);
                } else {
                    self.state = PlacementState::TransferringToDevice(rem - dt);
                }
            }
            PlacementState::Local | PlacementState::Edge => {}
        }
    }
}

/// Placement rule on the conservative estimate `mean − margin`.
pub fn decide(session: &OffloadSession, prediction: &Prediction, cfg: &OffloadPolicyConfig) -> Result<Action> {
    let lower = prediction.lower();
    match session.state {
        PlacementState::Local if lower >= cfg.threshold_up => Ok(Action::StartOffload),
        PlacementState::Edge if lower < cfg.threshold_down => Ok(Action::StartOnboard),
        PlacementState::Local | PlacementState::Edge => Ok(Action::Stay),
        PlacementState::TransferringToEdge(_) | PlacementState::TransferringToDevice(_) => Err(
            Error::TransferInProgress,
        ),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OffloadMetrics {
    pub offload_time_pct: f64,
    pub local_time_pct: f64,
    pub transfer_time_pct: f64,
    pub replacements: u32,
    pub failures: u32,
}

/// Scores a time-ordered session log over `[log start, log start + run_length]`.
pub fn offload_metrics(event_log: &[SessionEvent], run_length: f64) -> Result<OffloadMetrics> {
    if !(run_length > 0.0) {
        return Err(Error::InvalidArgument("run_length must be positive".into()));
    }
    for (i, w) in event_log.windows(2).enumerate() {
        if w[1].time() < w[0].time() {
            return Err(Error::UnorderedLog(i + 1));
        }
    }
    let Some(first) = event_log.first() else {
        return Ok(OffloadMetrics {
            local_time_pct: 100.0,
            ..OffloadMetrics::default()
        });
    };
    let start = first.time();
    let end = start + run_length;
    let mut time = [0.0f64; 4];
    let mut current = StateKind::Local;
    let mut since = start;
    let mut m = OffloadMetrics::default();
    let slot = |k: StateKind| match k {
        StateKind::Local => 0,
        StateKind::Edge => 1,
        StateKind::TransferringToEdge | StateKind::TransferringToDevice => 2,
    };
    for ev in event_log {
        match *ev {
            SessionEvent::Failure { .. } => m.failures += 1,
            SessionEvent::Enter { t, state } => {
                let t = t.min(end);
                time[slot(current)] += t - since;
                since = t;
                current = state;
                if matches!(state, StateKind::TransferringToEdge | StateKind::TransferringToDevice) {
                    m.replacements += 1;
                }
            }
        }
    }
    time[slot(current)] += end - since;
    m.local_time_pct = 100.0 * time[0] / run_length;
    m.offload_time_pct = 100.0 * time[1] / run_length;
    m.transfer_time_pct = 100.0 * time[2] / run_length;
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Oracle,
    Reactive,
    Knn,
    Forest,
    Ar,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Oracle,
        PolicyKind::Reactive,
        PolicyKind::Knn,
        PolicyKind::Forest,
        PolicyKind::Ar,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Oracle => "oracle",
            PolicyKind::Reactive => "reactive",
            PolicyKind::Knn => "knn",
            PolicyKind::Forest => "forest",
            PolicyKind::Ar => "ar",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown offload policy `{s}`")))
    }
}

/// Predictor hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorSettings {
    pub k: usize,
    pub z: f64,
    pub scales: FeatureScales,
    pub forest: ForestParams,
    pub ar_order: usize,
}

impl Default for PredictorSettings {
    fn default() -> Self {
        PredictorSettings {
            k: 12,
            z: 1.0,
            scales: FeatureScales::default(),
            forest: ForestParams::default(),
            ar_order: 4,
        }
    }
}

/// Timing of an offloading experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffloadExperiment {
    /// Device whose uplink carries the offloaded task.
    pub device: String,
    /// Production cycles used to collect training data.
    pub train_cycles: u32,
    /// Production cycles scored.
    pub eval_cycles: u32,
    /// Seconds per aggregated QoS report.
    #[serde(default = "default_report_interval")]
    pub report_interval: f64,
    /// Seconds between placement decisions.
    #[serde(default = "default_epoch")]
    pub decision_epoch: f64,
    /// Prediction horizon; defaults to `t_offload + 2`.
    #[serde(default)]
    pub horizon: Option<f64>,
    /// Per-slot samples kept as recent history in queries.
    #[serde(default = "default_history")]
    pub history: usize,
}

fn default_report_interval() -> f64 {
    0.1
}

fn default_epoch() -> f64 {
    1.0
}

fn default_history() -> usize {
    50
}

impl OffloadExperiment {
    pub fn horizon(&self, cfg: &OffloadPolicyConfig) -> f64 {
        self.horizon.unwrap_or(cfg.t_offload + 2.0)
    }
}

/// Uplink of the offloading device over one simulated run.
#[derive(Debug, Clone, PartialEq)]
pub struct OffloadTrace {
    pub slot_seconds: f64,
    /// Per-slot uplink throughput, bit/s.
    pub slots: Vec<f64>,
    /// Report-level throughput (mean over `report_interval`).
    pub reports: ThroughputTrace,
    /// Device position at the start of each report.
    pub positions: Vec<Point>,
    /// Production phase at the start of each report.
    pub phases: Vec<u32>,
    pub cycle_phases: u32,
    /// Reports before this index form the training period.
    pub eval_start: usize,
    /// Number of scored reports.
    pub eval_reports: usize,
    pub slots_per_report: usize,
}

impl OffloadTrace {
    pub fn eval_start_time(&self) -> f64 {
        self.reports.start + self.eval_start as f64 * self.reports.interval
    }

    pub fn eval_length(&self) -> f64 {
        self.eval_reports as f64 * self.reports.interval
    }

    /// Report-level table of the scored period.
    pub fn to_table(&self) -> CsvTable {
        let mut t = CsvTable::new("offload-trace v1", &["t", "x", "y", "phase", "ul_throughput_bps"]);
        for i in 0..self.reports.values.len() {
            t.push(vec![
                fmt_f64(self.reports.start + i as f64 * self.reports.interval),
                fmt_f64(self.positions[i].x),
                fmt_f64(self.positions[i].y),
                self.phases[i].to_string(),
                fmt_f64(self.reports.values[i]),
            ]);
        }
        t
    }
}

fn whole_multiple(x: f64, unit: f64, what: &str) -> Result<usize> {
    let n = (x / unit).round();
    if n < 1.0 || (n * unit - x).abs() > 1e-9 * x.abs().max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "{what} {x} is not a whole multiple of {unit}"
        )));
    }
    Ok(n as usize)
}

/// Simulates the network long enough for training, scoring and the final
/// horizon, recording the device's uplink.
pub fn simulate_offload_trace(
    factory: &Factory,
    spec: &NetworkSpec,
    exp: &OffloadExperiment,
    cfg: &OffloadPolicyConfig,
    seed: u64,
) -> Result<OffloadTrace> {
    let device_idx = spec
        .devices
        .iter()
        .position(|d| d.id == exp.device)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown offload device `{}`", exp.device)))?;
    let slot_s = spec.settings.slot_ms / 1000.0;
    let per_report = whole_multiple(exp.report_interval, slot_s, "report_interval")?;
    whole_multiple(exp.decision_epoch, exp.report_interval, "decision_epoch")?;
    let horizon = exp.horizon(cfg);
    if !(horizon > 0.0) {
        return Err(Error::InvalidArgument("horizon must be positive".into()));
    }
    let cycle_reports = whole_multiple(factory.cycle.length, exp.report_interval, "cycle length")?;
    let eval_start = exp.train_cycles as usize * cycle_reports;
    let eval_reports = exp.eval_cycles as usize * cycle_reports;
    if eval_reports == 0 {
        return Err(Error::InvalidArgument("eval_cycles must be at least 1".into()));
    }
    let tail = (horizon / exp.report_interval).ceil() as usize + 1;
    let total_reports = eval_start + eval_reports + tail;

    let mut net = Network::new(factory, spec.clone(), seed)?;
    let alloc = net.static_allocations();
    let mut slots = Vec::with_capacity(total_reports * per_report);
    let mut reports = Vec::with_capacity(total_reports);
    let mut positions = Vec::with_capacity(total_reports);
    let mut phases = Vec::with_capacity(total_reports);
    for r in 0..total_reports {
        let t = r as f64 * exp.report_interval;
        positions.push(net.device_position(device_idx, t));
        phases.push(factory.cycle.phase_at(t));
        let mut sum = 0.0;
        for _ in 0..per_report {
            let slot = net.step(&alloc)?;
            let bps: f64 = slot
                .samples()
                .filter(|s| s.device_id == exp.device)
                .map(|s| s.ul_throughput)
                .sum();
            slots.push(bps);
            sum += bps;
        }
        reports.push(sum / per_report as f64);
    }
    Ok(OffloadTrace {
        slot_seconds: slot_s,
        slots,
        reports: ThroughputTrace {
            start: 0.0,
            interval: exp.report_interval,
            values: reports,
        },
        positions,
        phases,
        cycle_phases: factory.cycle.phases,
        eval_start,
        eval_reports,
        slots_per_report: per_report,
    })
}

/// Training points from the training period: every report whose horizon
/// ends before scoring starts.
pub fn offload_training_set(trace: &OffloadTrace, horizon: f64) -> Result<TrainingSet> {
    let mut set = TrainingSet::new(trace.cycle_phases);
    let n_h = ((horizon / trace.reports.interval).round() as usize).max(1);
    for i in 0..trace.eval_start.saturating_sub(n_h - 1) {
        let t = trace.reports.start + i as f64 * trace.reports.interval;
        set.push(trace.positions[i], trace.phases[i], trace.reports.min_over(t, horizon)?)?;
    }
    Ok(set)
}

enum Model {
    Oracle,
    Reactive,
    Fitted(Box<dyn Predictor>),
}

fn build_model(
    policy: PolicyKind,
    trace: &OffloadTrace,
    horizon: f64,
    settings: &PredictorSettings,
    seed: u64,
) -> Result<Model> {
    Ok(match policy {
        PolicyKind::Oracle => Model::Oracle,
        PolicyKind::Reactive => Model::Reactive,
        PolicyKind::Knn => {
            let train = offload_training_set(trace, horizon)?;
            let m: KnnModel = knn_fit(&train, settings.k, settings.scales, settings.z)?;
            Model::Fitted(Box::new(m))
        }
        PolicyKind::Forest => {
            let train = offload_training_set(trace, horizon)?;
            let mut rng = rng_stream(seed, streams::BAGGING);
            let params = ForestParams {
                z: settings.z,
                ..settings.forest
            };
            let m: ForestModel = forest_fit(&train, &params, &mut rng)?;
            Model::Fitted(Box::new(m))
        }
        PolicyKind::Ar => {
            let train_slots = &trace.slots[..trace.eval_start * trace.slots_per_report];
            let m: ArModel = ar_fit(train_slots, settings.ar_order)?
                .with_z(settings.z)
                .with_step(trace.slot_seconds);
            Model::Fitted(Box::new(m))
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffloadRun {
    pub policy: PolicyKind,
    pub metrics: OffloadMetrics,
    pub session: OffloadSession,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tick {
    Report(usize),
    Decide,
}

/// Replays the scored period of `trace` under one policy. Report and
/// decision events run on the event kernel; at equal times a report is
/// applied before the decision that follows it.
pub fn run_offload_policy(
    trace: &OffloadTrace,
    policy: PolicyKind,
    cfg: &OffloadPolicyConfig,
    exp: &OffloadExperiment,
    settings: &PredictorSettings,
    seed: u64,
) -> Result<OffloadRun> {
    cfg.validate()?;
    let horizon = exp.horizon(cfg);
    let model = build_model(policy, trace, horizon, settings, seed)?;
    let per_epoch = whole_multiple(exp.decision_epoch, trace.reports.interval, "decision_epoch")?;
    let dt = trace.reports.interval;
    let origin = trace.eval_start_time();

    let mut kernel: Kernel<Tick> = Kernel::new();
    kernel.schedule(0.0, Tick::Decide)?;
    for i in 0..trace.eval_reports {
        let t_end = (i + 1) as f64 * dt;
        kernel.schedule(t_end, Tick::Report(i))?;
        if (i + 1) % per_epoch == 0 && i + 1 < trace.eval_reports {
            kernel.schedule(t_end, Tick::Decide)?;
        }
    }
    let mut session = OffloadSession::new(&exp.device, 0.0);
    let mut report_idx = trace.eval_start;
    let mut failure: Option<Error> = None;
    kernel.run_until(trace.eval_length(), |_, ev| {
        if failure.is_some() {
            return;
        }
        match ev.payload {
            Tick::Report(i) => {
                report_idx = trace.eval_start + i + 1;
                session.step(trace.reports.values[trace.eval_start + i], dt, cfg);
            }
            Tick::Decide => {
                if !session.state.is_stable() {
                    return;
                }
                let t_abs = origin + ev.time;
                let outcome = query_model(&model, trace, report_idx, t_abs, horizon, exp.history)
                    .and_then(|p| decide(&session, &p, cfg))
                    .and_then(|a| session.apply(a, cfg));
                if let Err(e) = outcome {
                    failure = Some(e);
                }
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let metrics = offload_metrics(&session.event_log, trace.eval_length())?;
    Ok(OffloadRun {
        policy,
        metrics,
        session,
    })
}

fn query_model(
    model: &Model,
    trace: &OffloadTrace,
    report_idx: usize,
    t_abs: f64,
    horizon: f64,
    history: usize,
) -> Result<Prediction> {
    let slot_end = report_idx * trace.slots_per_report;
    let recent = trace.slots[slot_end.saturating_sub(history)..slot_end].to_vec();
    let query = PredictorQuery {
        position: trace.positions[report_idx],
        cycle_phase: trace.phases[report_idx],
        recent,
        horizon,
    };
    match model {
        Model::Oracle => predict_oracle(&trace.reports, t_abs, horizon),
        Model::Reactive => predict_reactive(&query),
        Model::Fitted(m) => m.predict(&query),
    }
}

/// Simulates one seed and scores every requested policy on it.
pub fn run_offload_experiment(
    factory: &Factory,
    spec: &NetworkSpec,
    policies: &[PolicyKind],
    cfg: &OffloadPolicyConfig,
    exp: &OffloadExperiment,
    settings: &PredictorSettings,
    seed: u64,
) -> Result<(Vec<OffloadRun>, OffloadTrace)> {
    let trace = simulate_offload_trace(factory, spec, exp, cfg, seed)?;
    let runs = policies
        .iter()
        .map(|&p| run_offload_policy(&trace, p, cfg, exp, settings, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok((runs, trace))
}

pub fn metrics_table(rows: &[(u64, OffloadRun)]) -> CsvTable {
    let mut t = CsvTable::new(
        "offload-metrics v1",
        &[
            "policy",
            "seed",
            "offload_time_pct",
            "replacements",
            "failures",
            "local_time_pct",
            "transfer_time_pct",
        ],
    );
    for (seed, run) in rows {
        let m = &run.metrics;
        t.push(vec![
            run.policy.to_string(),
            seed.to_string(),
            fmt_f64(m.offload_time_pct),
            m.replacements.to_string(),
            m.failures.to_string(),
            fmt_f64(m.local_time_pct),
            fmt_f64(m.transfer_time_pct),
        ]);
    }
    t
}
