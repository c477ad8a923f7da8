//! Inter-slice PRB allocation on one cell: action enumeration, the window
//! reward, tabular Q-learning with or without production status, warm-start
//! transfer and the per-slice reliability metric.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factory::{status_feature_vector, Factory, StatusEncoding};
use crate::flatfile::FlatFile;
use crate::net::{generate_offered_load, Network, NetworkSpec, SliceSlotReport, SliceSpec};
use crate::output::{fmt_f64, CsvTable};
use crate::sim::{rng_stream, streams, RngStream};

/// Demand quantization thresholds as fractions of each slice's peak load.
pub const DEMAND_THRESHOLDS: [f64; 3] = [0.25, 0.5, 0.75];
pub const DEMAND_LEVELS: u32 = DEMAND_THRESHOLDS.len() as u32 + 1;

/// All ways to split `total_prbs` into `n_slices` multiples of `g`, in
/// lexicographic order.
pub fn enumerate_actions(total_prbs: u32, n_slices: usize, g: u32) -> Result<Vec<Vec<u32>>> {
    if g == 0 {
        return Err(Error::InvalidArgument("granularity must be positive".into()));
    }
    if total_prbs % g != 0 {
        return Err(Error::Granularity { g, total: total_prbs });
    }
    if n_slices == 0 {
        return Err(Error::InvalidArgument("at least one slice is required".into()));
    }
    fn fill(left: u32, slot: usize, cur: &mut Vec<u32>, g: u32, out: &mut Vec<Vec<u32>>) {
        if slot + 1 == cur.len() {
            cur[slot] = left * g;
            out.push(cur.clone());
            return;
        }
        for u in 0..=left {
            cur[slot] = u * g;
            fill(left - u, slot + 1, cur, g, out);
        }
    }
    let mut out = Vec::new();
    fill(total_prbs / g, 0, &mut vec![0; n_slices], g, &mut out);
    Ok(out)
}

/// Binomial coefficient `C(n, k)`.
pub fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

/// QoS of one slice over one decision window.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WindowQoS {
    pub arrived_bytes: u64,
    pub served_bytes: u64,
    /// Bytes that could have left the queue within the window: the backlog
    /// at its start plus arrivals before its last slot.
    pub deliverable_bytes: u64,
    pub completed_packets: u64,
    pub latency_sum_ms: f64,
    pub duration_s: f64,
    pub non_empty: bool,
}

impl WindowQoS {
    /// Aggregates consecutive slot reports of one slice.
    pub fn from_slots(slots: &[SliceSlotReport], slot_ms: f64) -> Self {
        let mut w = WindowQoS {
            duration_s: slots.len() as f64 * slot_ms / 1000.0,
            ..Default::default()
        };
        if let Some(first) = slots.first() {
            w.deliverable_bytes = first.queue_before;
        }
        for (i, s) in slots.iter().enumerate() {
            w.arrived_bytes += s.arrived_bytes;
            w.served_bytes += s.served_bytes;
            w.completed_packets += s.completed_packets;
            w.latency_sum_ms += s.latency_sum_ms;
            if i + 1 < slots.len() {
                w.deliverable_bytes += s.arrived_bytes - s.dropped_bytes;
            }
            w.non_empty |= s.arrived_packets > 0 || s.queue_before > 0 || s.completed_packets > 0;
        }
        w
    }

    pub fn throughput_bps(&self) -> f64 {
        if self.duration_s > 0.0 {
            self.served_bytes as f64 * 8.0 / self.duration_s
        } else {
            0.0
        }
    }

    /// Mean latency of packets completed in the window. A window that had
    /// traffic to send but completed nothing has unbounded latency; one
    /// without traffic has none.
    pub fn mean_latency_ms(&self) -> Option<f64> {
        if self.completed_packets > 0 {
            Some(self.latency_sum_ms / self.completed_packets as f64)
        } else if self.deliverable_bytes > 0 {
            Some(f64::INFINITY)
        } else {
            None
        }
    }

    /// Latency within bound and throughput at the floor, where a slice that
    /// was served everything it could have been also meets the floor.
    pub fn meets(&self, spec: &SliceSpec) -> bool {
        let latency_ok = self.mean_latency_ms().map_or(true, |l| l <= spec.latency_bound_ms);
        let throughput_ok = self.throughput_bps() >= spec.throughput_floor_bps
            || self.served_bytes >= self.deliverable_bytes;
        latency_ok && throughput_ok
    }
}

/// Fraction of non-empty windows meeting the slice requirements.
pub fn reliability(log: &[WindowQoS], spec: &SliceSpec) -> Result<f64> {
    let (mut total, mut ok) = (0usize, 0usize);
    for w in log.iter().filter(|w| w.non_empty) {
        total += 1;
        if w.meets(spec) {
            ok += 1;
        }
    }
    if total == 0 {
        return Err(Error::NoWindows);
    }
    Ok(ok as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardParams {
    pub lambda: f64,
    pub prb_bandwidth_hz: f64,
    /// Reference spectral efficiency in bit/s/Hz.
    pub spectral_efficiency: f64,
}

/// `efficiency − λ·violations` for one window.
pub fn reward(qos: &[WindowQoS], action: &[u32], specs: &[SliceSpec], p: &RewardParams) -> f64 {
    let duration = qos.first().map_or(0.0, |q| q.duration_s);
    let prbs: u32 = action.iter().sum();
    let capacity = f64::from(prbs) * p.prb_bandwidth_hz * p.spectral_efficiency * duration;
    let served: f64 = qos.iter().map(|q| q.served_bytes as f64 * 8.0).sum();
    let efficiency = if capacity > 0.0 {
        (served / capacity).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let violations = qos
        .iter()
        .zip(specs)
        .filter(|(q, s)| q.non_empty && !q.meets(s))
        .count();
    efficiency - p.lambda * violations as f64
}

pub const DEFAULT_MAX_KEYS: usize = 1_000_000;

/// Tabular action values. Unseen pairs read as 0.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub n_actions: usize,
    pub max_keys: usize,
    values: BTreeMap<Vec<u32>, Vec<f64>>,
    visits: BTreeMap<Vec<u32>, Vec<u64>>,
}

impl QTable {
    pub fn new(n_actions: usize) -> Self {
        QTable {
            n_actions,
            max_keys: DEFAULT_MAX_KEYS,
            values: BTreeMap::new(),
            visits: BTreeMap::new(),
        }
    }

    pub fn with_max_keys(mut self, max_keys: usize) -> Self {
        self.max_keys = max_keys;
        self
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, s: &[u32], a: usize) -> f64 {
        self.values.get(s).map_or(0.0, |v| v[a])
    }

    pub fn visits(&self, s: &[u32], a: usize) -> u64 {
        self.visits.get(s).map_or(0, |v| v[a])
    }

    /// Greedy action; ties go to the lowest index.
    pub fn best_action(&self, s: &[u32]) -> usize {
        match self.values.get(s) {
            None => 0,
            Some(v) => {
                let mut best = 0;
                for (i, &x) in v.iter().enumerate() {
                    if x > v[best] {
                        best = i;
                    }
                }
                best
            }
        }
    }

    pub fn max_value(&self, s: &[u32]) -> f64 {
        self.values
            .get(s)
            .map_or(0.0, |v| v.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }

    fn entry(&mut self, s: &[u32]) -> Result<(&mut Vec<f64>, &mut Vec<u64>)> {
        if !self.values.contains_key(s) {
            if self.values.len() >= self.max_keys {
                return Err(Error::StateSpaceOverflow(self.max_keys));
            }
            self.values.insert(s.to_vec(), vec![0.0; self.n_actions]);
            self.visits.insert(s.to_vec(), vec![0; self.n_actions]);
        }
        let v = self.values.get_mut(s).expect("inserted above");
        let c = self.visits.get_mut(s).expect("inserted above");
        Ok((v, c))
    }

    pub fn keys(&self) -> impl Iterator<Item = &Vec<u32>> {
        self.values.keys()
    }

    pub fn save(&self) -> FlatFile {
        let key_len = self.values.keys().next().map_or(0, |k| k.len());
        let mut f = FlatFile::new("qtable");
        f.scalar("n_actions", self.n_actions as f64)
            .scalar("key_len", key_len as f64)
            .array("keys", self.values.keys().flatten().map(|&k| f64::from(k)).collect())
            .array("values", self.values.values().flatten().copied().collect())
            .array("visits", self.visits.values().flatten().map(|&c| c as f64).collect());
        f
    }

    pub fn load(file: &FlatFile) -> Result<Self> {
        file.expect_kind("qtable")?;
        let n_actions = file.get_scalar("n_actions")? as usize;
        let key_len = file.get_scalar("key_len")? as usize;
        let (keys, values, visits) = (file.get_array("keys")?, file.get_array("values")?, file.get_array("visits")?);
        let rows = if key_len == 0 { 0 } else { keys.len() / key_len };
        if n_actions == 0 || rows * key_len != keys.len() || values.len() != rows * n_actions || visits.len() != values.len() {
            return Err(Error::ModelFormat("qtable arrays have inconsistent lengths".into()));
        }
        let mut q = QTable::new(n_actions);
        for r in 0..rows {
            let key: Vec<u32> = keys[r * key_len..(r + 1) * key_len].iter().map(|&k| k as u32).collect();
            let span = r * n_actions..(r + 1) * n_actions;
            q.values.insert(key.clone(), values[span.clone()].to_vec());
            q.visits.insert(key, visits[span].iter().map(|&c| c as u64).collect());
        }
        Ok(q)
    }
}

/// One Q-learning step. `s_next = None` marks a terminal transition.
pub fn q_update(
    q: &mut QTable,
    s: &[u32],
    a: usize,
    r: f64,
    s_next: Option<&[u32]>,
    alpha: f64,
    gamma: f64,
) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside (0, 1]")));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} outside [0, 1)")));
    }
    if a >= q.n_actions {
        return Err(Error::InvalidArgument(format!("action {a} of {}", q.n_actions)));
    }
    let future = s_next.map_or(0.0, |n| q.max_value(n));
    let (values, visits) = q.entry(s)?;
    values[a] += alpha * (r + gamma * future - values[a]);
    visits[a] += 1;
    Ok(())
}

/// Learning and environment settings (`[policies.slicing]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlicingParams {
    pub granularity: u32,
    pub window_ms: f64,
    pub lambda: f64,
    pub episodes: usize,
    pub windows_per_episode: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Episodes over which ε decays linearly to `epsilon_end`.
    pub epsilon_decay_episodes: usize,
    /// Windows the greedy policy runs, on a copy of the network, after each
    /// episode to trace its progress.
    pub greedy_eval_windows: usize,
    pub max_keys: usize,
}

impl Default for SlicingParams {
    fn default() -> Self {
        SlicingParams {
            granularity: 4,
            window_ms: 100.0,
            lambda: 4.0,
            episodes: 400,
            windows_per_episode: 40,
            alpha: 0.3,
            gamma: 0.5,
            epsilon_start: 1.0,
            epsilon_end: 0.02,
            epsilon_decay_episodes: 250,
            greedy_eval_windows: 20,
            max_keys: DEFAULT_MAX_KEYS,
        }
    }
}

impl SlicingParams {
    pub fn epsilon(&self, episode: usize) -> f64 {
        if self.epsilon_decay_episodes == 0 || episode >= self.epsilon_decay_episodes {
            return self.epsilon_end;
        }
        let f = episode as f64 / self.epsilon_decay_episodes as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * f
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidArgument("alpha must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument("gamma must lie in [0, 1)".into()));
        }
        for (name, e) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.granularity == 0 || self.windows_per_episode == 0 || !(self.window_ms > 0.0) {
            return Err(Error::InvalidArgument(
                "granularity, windows_per_episode and window_ms must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// What must agree between two environments for a Q-table to carry over.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvSignature {
    pub n_actions: usize,
    pub total_prbs: u32,
    pub granularity: u32,
    pub n_slices: usize,
    pub demand_levels: u32,
    pub status_len: usize,
}

/// Result of one decision window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowOutcome {
    pub action: usize,
    pub reward: f64,
    /// Indexed like the slices.
    pub qos: Vec<WindowQoS>,
    pub cycle_phase: u32,
}

/// The slotted network of one cell seen through decision windows.
#[derive(Clone)]
pub struct SlicingEnv<'f> {
    factory: &'f Factory,
    net: Network<'f>,
    actions: Vec<Vec<u32>>,
    peaks: Vec<f64>,
    last_load: Vec<u64>,
    slots_per_window: usize,
    encoding: StatusEncoding,
    reward: RewardParams,
    granularity: u32,
}

impl<'f> SlicingEnv<'f> {
    pub fn new(factory: &'f Factory, spec: NetworkSpec, params: &SlicingParams, seed: u64) -> Result<Self> {
        params.validate()?;
        if spec.cells.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "slicing needs exactly one cell, got {}",
                spec.cells.len()
            )));
        }
        let cell = &spec.cells[0];
        let actions = enumerate_actions(cell.total_prbs, spec.slices.len(), params.granularity)?;
        let slot_ms = spec.settings.slot_ms;
        let ratio = params.window_ms / slot_ms;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "window {} ms is not a whole number of {slot_ms} ms slots",
                params.window_ms
            )));
        }
        let slots_per_window = ratio.round() as usize;
        let reward = RewardParams {
            lambda: params.lambda,
            prb_bandwidth_hz: cell.prb_bandwidth_hz,
            spectral_efficiency: spec.settings.spectral_cap,
        };
        let peaks = peak_window_loads(factory, &spec, slots_per_window, seed)?;
        let n = spec.slices.len();
        let net = Network::new(factory, spec, seed)?;
        Ok(SlicingEnv {
            factory,
            net,
            actions,
            peaks,
            last_load: vec![0; n],
            slots_per_window,
            encoding: factory.status_encoding(),
            reward,
            granularity: params.granularity,
        })
    }

    pub fn actions(&self) -> &[Vec<u32>] {
        &self.actions
    }

    pub fn slices(&self) -> &[SliceSpec] {
        &self.net.spec().slices
    }

    pub fn peaks(&self) -> &[f64] {
        &self.peaks
    }

    pub fn time(&self) -> f64 {
        self.net.time()
    }

    pub fn signature(&self) -> EnvSignature {
        EnvSignature {
            n_actions: self.actions.len(),
            total_prbs: self.net.spec().cells[0].total_prbs,
            granularity: self.granularity,
            n_slices: self.slices().len(),
            demand_levels: DEMAND_LEVELS,
            status_len: self.encoding.len(),
        }
    }

    /// Demand level of each slice in the last window, optionally followed by
    /// the production-status features at the start of the next one.
    pub fn observe(&self, use_status: bool) -> Result<Vec<u32>> {
        let mut key: Vec<u32> = self
            .last_load
            .iter()
            .zip(&self.peaks)
            .map(|(&load, &peak)| demand_level(load as f64, peak))
            .collect();
        if use_status {
            let status = self.factory.production_status(self.net.time());
            key.extend(
                status_feature_vector(&status, &self.encoding)?
                    .into_iter()
                    .map(|v| v as u32),
            );
        }
        Ok(key)
    }

    pub fn step(&mut self, action: usize) -> Result<WindowOutcome> {
        let alloc = self
            .actions
            .get(action)
            .ok_or_else(|| Error::InvalidArgument(format!("action {action} of {}", self.actions.len())))?
            .clone();
        let phase = self.factory.cycle.phase_at(self.net.time());
        let n = self.slices().len();
        let mut per_slice: Vec<Vec<SliceSlotReport>> = vec![Vec::with_capacity(self.slots_per_window); n];
        let allocations = vec![alloc.clone()];
        for _ in 0..self.slots_per_window {
            let slot = self.net.step(&allocations)?;
            let totals = slot.slice_totals();
            for (i, s) in self.net.spec().slices.iter().enumerate() {
                per_slice[i].push(totals.get(&s.id).cloned().unwrap_or_default());
            }
        }
        let slot_ms = self.net.slot_ms();
        let qos: Vec<WindowQoS> = per_slice.iter().map(|s| WindowQoS::from_slots(s, slot_ms)).collect();
        self.last_load = qos.iter().map(|q| q.arrived_bytes).collect();
        let r = reward(&qos, &alloc, self.slices(), &self.reward);
        Ok(WindowOutcome {
            action,
            reward: r,
            qos,
            cycle_phase: phase,
        })
    }
}

pub fn demand_level(load: f64, peak: f64) -> u32 {
    if !(peak > 0.0) {
        return 0;
    }
    DEMAND_THRESHOLDS.iter().filter(|&&t| load >= t * peak).count() as u32
}

/// Largest offered bytes per slice in any window of one production cycle.
fn peak_window_loads(factory: &Factory, spec: &NetworkSpec, slots_per_window: usize, seed: u64) -> Result<Vec<f64>> {
    let slot_ms = spec.settings.slot_ms;
    let traffic = rng_stream(seed, streams::TRAFFIC);
    let window_ms = slot_ms * slots_per_window as f64;
    let windows = (factory.cycle.length * 1000.0 / window_ms).ceil().max(1.0) as usize;
    let mut peaks = vec![0.0f64; spec.slices.len()];
    for w in 0..windows {
        let mut load = vec![0u64; spec.slices.len()];
        for k in 0..slots_per_window {
            let start = (w * slots_per_window + k) as f64 * slot_ms;
            let status = factory.production_status(start / 1000.0);
            for a in generate_offered_load(&spec.flows, &status, start, slot_ms, &traffic)? {
                if let Some(i) = spec.slices.iter().position(|s| s.id == a.slice_id) {
                    load[i] += a.bytes;
                }
            }
        }
        for (p, l) in peaks.iter_mut().zip(load) {
            *p = p.max(l as f64);
        }
    }
    Ok(peaks)
}

fn epsilon_greedy(q: &QTable, s: &[u32], eps: f64, rng: &mut RngStream) -> usize {
    if eps > 0.0 && rng.uniform() < eps {
        ((rng.uniform() * q.n_actions as f64) as usize).min(q.n_actions - 1)
    } else {
        q.best_action(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub q: QTable,
    /// Mean window reward per episode under the exploring policy.
    pub curve: Vec<f64>,
    /// Mean window reward of the greedy policy after each episode.
    pub greedy_curve: Vec<f64>,
}

/// ε-greedy Q-learning from `init` (zero table when `None`). The network
/// keeps running across episodes; an episode is a fixed number of windows.
pub fn train(
    env: &mut SlicingEnv<'_>,
    use_status: bool,
    params: &SlicingParams,
    init: Option<QTable>,
    seed: u64,
) -> Result<TrainOutcome> {
    params.validate()?;
    let n_actions = env.actions().len();
    let mut q = init.unwrap_or_else(|| QTable::new(n_actions));
    if q.n_actions != n_actions {
        return Err(Error::IncompatibleEncoding(format!(
            "table has {} actions, environment {n_actions}",
            q.n_actions
        )));
    }
    q.max_keys = params.max_keys;
    let mut rng = rng_stream(seed, streams::EXPLORATION);
    let mut curve = Vec::with_capacity(params.episodes);
    let mut greedy_curve = Vec::with_capacity(params.episodes);
    let mut s = env.observe(use_status)?;
    for ep in 0..params.episodes {
        let eps = params.epsilon(ep);
        let mut total = 0.0;
        for _ in 0..params.windows_per_episode {
            let a = epsilon_greedy(&q, &s, eps, &mut rng);
            let out = env.step(a)?;
            let next = env.observe(use_status)?;
            q_update(&mut q, &s, a, out.reward, Some(&next), params.alpha, params.gamma)?;
            total += out.reward;
            s = next;
        }
        curve.push(total / params.windows_per_episode as f64);
        if params.greedy_eval_windows > 0 {
            let probe = run_greedy(&mut env.clone(), &q, use_status, params.greedy_eval_windows)?;
            greedy_curve.push(probe.iter().map(|w| w.reward).sum::<f64>() / probe.len() as f64);
        }
    }
    Ok(TrainOutcome { q, curve, greedy_curve })
}

/// Runs the greedy policy of `q` for `windows` windows without learning.
pub fn run_greedy(env: &mut SlicingEnv<'_>, q: &QTable, use_status: bool, windows: usize) -> Result<Vec<WindowOutcome>> {
    let mut out = Vec::with_capacity(windows);
    for _ in 0..windows {
        let s = env.observe(use_status)?;
        out.push(env.step(q.best_action(&s))?);
    }
    Ok(out)
}

/// Exhaustive per-window best action, applied in sequence from the current
/// state of `env`. Returns the chosen actions and their total reward.
pub fn brute_force_windows(env: &SlicingEnv<'_>, windows: usize) -> Result<(Vec<usize>, f64)> {
    let mut real = env.clone();
    let mut chosen = Vec::with_capacity(windows);
    let mut total = 0.0;
    for _ in 0..windows {
        let mut best: Option<(usize, f64)> = None;
        for a in 0..real.actions().len() {
            let r = real.clone().step(a)?.reward;
            if best.map_or(true, |(_, b)| r > b) {
                best = Some((a, r));
            }
        }
        let (a, r) = best.expect("at least one action");
        real.step(a)?;
        chosen.push(a);
        total += r;
    }
    Ok((chosen, total))
}

/// Copies values for keys the target can observe; visit counts restart.
pub fn transfer_init(source: &QTable, source_sig: &EnvSignature, target_sig: &EnvSignature) -> Result<QTable> {
    if source_sig != target_sig {
        return Err(Error::IncompatibleEncoding(format!(
            "source {source_sig:?} vs target {target_sig:?}"
        )));
    }
    let mut q = QTable::new(target_sig.n_actions);
    q.max_keys = source.max_keys;
    for (k, v) in &source.values {
        q.values.insert(k.clone(), v.clone());
        q.visits.insert(k.clone(), vec![0; v.len()]);
    }
    Ok(q)
}

/// First episode at which the trailing mean over `smooth` episodes reaches
/// `baseline + fraction · (target − baseline)`.
pub fn episodes_to_fraction(curve: &[f64], baseline: f64, target: f64, fraction: f64, smooth: usize) -> Option<usize> {
    let level = baseline + fraction * (target - baseline);
    let w = smooth.max(1);
    (0..curve.len()).find(|&i| {
        let lo = (i + 1).saturating_sub(w);
        let m = curve[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64;
        m >= level
    })
}

/// Returns `spec` with every flow of slice `i` scaled by `scale[i]`.
pub fn scale_demand(spec: &NetworkSpec, scale: &[f64]) -> Result<NetworkSpec> {
    if scale.len() != spec.slices.len() {
        return Err(Error::InvalidArgument(format!(
            "{} demand scales for {} slices",
            scale.len(),
            spec.slices.len()
        )));
    }
    let mut out = spec.clone();
    for f in &mut out.flows {
        if let Some(i) = spec.slices.iter().position(|s| s.id == f.slice_id) {
            f.payload_bytes = (f.payload_bytes as f64 * scale[i]).round().max(1.0) as u64;
        }
    }
    Ok(out)
}

/// Experiment settings (`[experiment.slicing]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlicingExperiment {
    /// Greedy evaluation length after training.
    pub eval_windows: usize,
    /// Per-slice demand multipliers of the transfer target.
    pub target_demand_scale: Vec<f64>,
    pub convergence_fraction: f64,
    pub convergence_smoothing: usize,
}

impl Default for SlicingExperiment {
    fn default() -> Self {
        SlicingExperiment {
            eval_windows: 400,
            target_demand_scale: vec![1.2, 1.0, 0.8],
            convergence_fraction: 0.9,
            convergence_smoothing: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlicingRun {
    pub seed: u64,
    pub use_status: bool,
    pub curve: Vec<f64>,
    pub eval_reward: f64,
    /// Indexed like the slices.
    pub reliability: Vec<f64>,
    pub q: QTable,
}

/// Trains one agent and scores its greedy policy on a fresh network.
pub fn run_slicing(
    factory: &Factory,
    spec: &NetworkSpec,
    params: &SlicingParams,
    exp: &SlicingExperiment,
    use_status: bool,
    seed: u64,
) -> Result<SlicingRun> {
    let mut env = SlicingEnv::new(factory, spec.clone(), params, seed)?;
    let trained = train(&mut env, use_status, params, None, seed)?;
    let mut eval = SlicingEnv::new(factory, spec.clone(), params, seed)?;
    let windows = run_greedy(&mut eval, &trained.q, use_status, exp.eval_windows)?;
    let eval_reward = windows.iter().map(|w| w.reward).sum::<f64>() / windows.len().max(1) as f64;
    let reliability = (0..spec.slices.len())
        .map(|i| {
            let log: Vec<WindowQoS> = windows.iter().map(|w| w.qos[i].clone()).collect();
            reliability(&log, &spec.slices[i])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SlicingRun {
        seed,
        use_status,
        curve: trained.curve,
        eval_reward,
        reliability,
        q: trained.q,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferRun {
    pub seed: u64,
    pub cold_curve: Vec<f64>,
    pub warm_curve: Vec<f64>,
    pub cold_episodes: Option<usize>,
    pub warm_episodes: Option<usize>,
}

/// Trains on the source scenario, then learns the demand-scaled target both
/// from scratch and from the transferred table. Convergence is read off the
/// greedy curves against the cold start's: from its first episode to 90% of
/// the way to its final-tenth mean.
pub fn run_transfer(
    factory: &Factory,
    spec: &NetworkSpec,
    params: &SlicingParams,
    exp: &SlicingExperiment,
    seed: u64,
) -> Result<TransferRun> {
    let mut source = SlicingEnv::new(factory, spec.clone(), params, seed)?;
    let src = train(&mut source, true, params, None, seed)?;
    let target_spec = scale_demand(spec, &exp.target_demand_scale)?;
    let mut cold_env = SlicingEnv::new(factory, target_spec.clone(), params, seed)?;
    let cold = train(&mut cold_env, true, params, None, seed)?;
    let mut warm_env = SlicingEnv::new(factory, target_spec, params, seed)?;
    let init = transfer_init(&src.q, &source.signature(), &warm_env.signature())?;
    let warm = train(&mut warm_env, true, params, Some(init), seed)?;
    let (cold_c, warm_c) = (&cold.greedy_curve, &warm.greedy_curve);
    if cold_c.is_empty() {
        return Err(Error::InvalidArgument("transfer needs greedy_eval_windows > 0".into()));
    }
    let tail = (cold_c.len() / 10).max(1);
    let asymptote = cold_c[cold_c.len() - tail..].iter().sum::<f64>() / tail as f64;
    let baseline = cold_c[0];
    let measure = |c: &[f64]| {
        episodes_to_fraction(c, baseline, asymptote, exp.convergence_fraction, exp.convergence_smoothing)
    };
    Ok(TransferRun {
        seed,
        cold_episodes: measure(cold_c),
        warm_episodes: measure(warm_c),
        cold_curve: cold.greedy_curve,
        warm_curve: warm.greedy_curve,
    })
}

pub fn reliability_table(runs: &[SlicingRun], slices: &[SliceSpec]) -> CsvTable {
    let mut t = CsvTable::new(
        "slicing-reliability v1",
        &["seed", "production_status", "slice", "reliability", "eval_reward"],
    );
    for r in runs {
        for (i, s) in slices.iter().enumerate() {
            t.push(vec![
                r.seed.to_string(),
                r.use_status.to_string(),
                s.id.clone(),
                fmt_f64(r.reliability[i]),
                fmt_f64(r.eval_reward),
            ]);
        }
    }
    t
}

pub fn curve_table(runs: &[SlicingRun]) -> CsvTable {
    let mut t = CsvTable::new("slicing-curve v1", &["seed", "production_status", "episode", "mean_reward"]);
    for r in runs {
        for (e, v) in r.curve.iter().enumerate() {
            t.push(vec![r.seed.to_string(), r.use_status.to_string(), e.to_string(), fmt_f64(*v)]);
        }
    }
    t
}

pub fn transfer_table(runs: &[TransferRun]) -> CsvTable {
    let mut t = CsvTable::new(
        "slicing-transfer v1",
        &["seed", "start", "episode", "mean_reward", "episodes_to_converge"],
    );
    let fmt_opt = |x: Option<usize>| x.map_or_else(|| "NA".to_string(), |v| v.to_string());
    for r in runs {
        for (name, curve, conv) in [("cold", &r.cold_curve, r.cold_episodes), ("warm", &r.warm_curve, r.warm_episodes)] {
            for (e, v) in curve.iter().enumerate() {
                t.push(vec![r.seed.to_string(), name.into(), e.to_string(), fmt_f64(*v), fmt_opt(conv)]);
            }
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(latency: f64, floor: f64) -> SliceSpec {
        SliceSpec {
            id: "s".into(),
            latency_bound_ms: latency,
            throughput_floor_bps: floor,
            weight: 1.0,
            queue_cap_bytes: u64::MAX,
        }
    }

    fn window(served: u64, deliverable: u64, latency: f64) -> WindowQoS {
        WindowQoS {
            arrived_bytes: deliverable,
            served_bytes: served,
            deliverable_bytes: deliverable,
            completed_packets: 1,
            latency_sum_ms: latency,
            duration_s: 0.1,
            non_empty: true,
        }
    }

    #[test]
    fn small_enumeration() {
        assert_eq!(enumerate_actions(2, 2, 1).unwrap(), vec![vec![0, 2], vec![1, 1], vec![2, 0]]);
        assert_eq!(enumerate_actions(12, 3, 4).unwrap().len(), 10);
        assert_eq!(enumerate_actions(7, 1, 1).unwrap(), vec![vec![7]]);
        assert!(matches!(enumerate_actions(10, 2, 4), Err(Error::Granularity { g: 4, total: 10 })));
    }

    #[test]
    fn reward_examples() {
        let p = RewardParams {
            lambda: 1.0,
            prb_bandwidth_hz: 1000.0,
            spectral_efficiency: 1.0,
        };
        let s = [spec(10.0, 0.0)];
        let idle = WindowQoS {
            duration_s: 0.1,
            ..Default::default()
        };
        assert_eq!(reward(&[idle], &[10], &s, &p), 0.0);
        // 10 PRBs · 1 kHz · 1 bit/s/Hz · 0.1 s = 1000 bits = 125 bytes
        assert_eq!(reward(&[window(125, 125, 1.0)], &[10], &s, &p), 1.0);
        let late = WindowQoS {
            latency_sum_ms: 50.0,
            ..window(0, 0, 0.0)
        };
        assert_eq!(reward(&[late], &[10], &s, &p), -1.0);
    }

    #[test]
    fn q_update_examples() {
        let mut q = QTable::new(2);
        q_update(&mut q, &[0], 1, 3.5, None, 1.0, 0.0).unwrap();
        assert_eq!(q.get(&[0], 1), 3.5);
        let mut q = QTable::new(1);
        q_update(&mut q, &[0], 0, 4.0, None, 1.0, 0.0).unwrap();
        q_update(&mut q, &[0], 0, 0.0, None, 0.5, 0.0).unwrap();
        assert_eq!(q.get(&[0], 0), 2.0);
        for _ in 0..200 {
            q_update(&mut q, &[0], 0, 7.0, None, 0.3, 0.9).unwrap();
        }
        assert!((q.get(&[0], 0) - 7.0).abs() < 1e-9);
        assert_eq!(q.visits(&[0], 0), 202);
        assert!(q_update(&mut q, &[0], 0, 0.0, None, 0.0, 0.0).is_err());
        assert!(q_update(&mut q, &[0], 0, 0.0, None, 0.5, 1.0).is_err());
    }

    #[test]
    fn bootstrap_uses_max_of_next_state() {
        let mut q = QTable::new(3);
        q_update(&mut q, &[1], 2, 10.0, None, 1.0, 0.0).unwrap();
        q_update(&mut q, &[0], 0, 1.0, Some(&[1]), 1.0, 0.5).unwrap();
        assert_eq!(q.get(&[0], 0), 6.0);
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        let mut q = QTable::new(4);
        assert_eq!(q.best_action(&[9]), 0);
        q_update(&mut q, &[9], 1, 2.0, None, 1.0, 0.0).unwrap();
        q_update(&mut q, &[9], 3, 2.0, None, 1.0, 0.0).unwrap();
        assert_eq!(q.best_action(&[9]), 1);
    }

    #[test]
    fn key_guard() {
        let mut q = QTable::new(1).with_max_keys(2);
        q_update(&mut q, &[0], 0, 1.0, None, 1.0, 0.0).unwrap();
        q_update(&mut q, &[1], 0, 1.0, None, 1.0, 0.0).unwrap();
        assert!(matches!(
            q_update(&mut q, &[2], 0, 1.0, None, 1.0, 0.0),
            Err(Error::StateSpaceOverflow(2))
        ));
    }

    #[test]
    fn qtable_roundtrip() {
        let mut q = QTable::new(3);
        q_update(&mut q, &[1, 2, 0], 2, -4.25, None, 1.0, 0.0).unwrap();
        q_update(&mut q, &[0, 0, 3], 0, 0.125, None, 0.5, 0.0).unwrap();
        let back = QTable::load(&FlatFile::parse(&q.save().render()).unwrap()).unwrap();
        assert_eq!(back, q);
    }

    #[test]
    fn reliability_examples() {
        let s = spec(20.0, 1e6);
        let good = window(20_000, 20_000, 5.0);
        let bad = window(100, 20_000, 5.0);
        assert_eq!(reliability(&[good.clone(), good.clone()], &s).unwrap(), 1.0);
        assert_eq!(reliability(&[good.clone(), bad.clone(), good, bad.clone()], &s).unwrap(), 0.5);
        assert_eq!(reliability(&[bad], &spec(f64::INFINITY, 0.0)).unwrap(), 1.0);
        assert!(matches!(reliability(&[WindowQoS::default()], &s), Err(Error::NoWindows)));
    }

    #[test]
    fn starved_slice_violates_latency() {
        let starved = WindowQoS {
            completed_packets: 0,
            latency_sum_ms: 0.0,
            ..window(0, 5000, 0.0)
        };
        assert!(!starved.meets(&spec(20.0, 0.0)));
        assert!(starved.meets(&spec(f64::INFINITY, 0.0)));
    }

    #[test]
    fn floor_is_capped_by_what_could_be_served() {
        let s = spec(20.0, 1e9);
        assert!(window(500, 500, 1.0).meets(&s));
        assert!(!window(499, 500, 1.0).meets(&s));
    }

    #[test]
    fn window_aggregation_excludes_last_slot_arrivals() {
        let slot = |arrived, served, before| SliceSlotReport {
            arrived_bytes: arrived,
            served_bytes: served,
            queue_before: before,
            arrived_packets: u64::from(arrived > 0),
            ..Default::default()
        };
        let w = WindowQoS::from_slots(&[slot(100, 40, 40), slot(100, 100, 100), slot(70, 100, 100)], 10.0);
        assert_eq!(w.arrived_bytes, 270);
        assert_eq!(w.served_bytes, 240);
        assert_eq!(w.deliverable_bytes, 240);
        assert!((w.duration_s - 0.03).abs() < 1e-15);
    }

    #[test]
    fn demand_levels() {
        assert_eq!(demand_level(0.0, 100.0), 0);
        assert_eq!(demand_level(25.0, 100.0), 1);
        assert_eq!(demand_level(74.9, 100.0), 2);
        assert_eq!(demand_level(100.0, 100.0), 3);
        assert_eq!(demand_level(5.0, 0.0), 0);
    }

    #[test]
    fn convergence_episode() {
        let curve = [-4.0, -2.0, -1.0, 0.0, 0.0];
        assert_eq!(episodes_to_fraction(&curve, -4.0, 0.0, 0.9, 1), Some(3));
        assert_eq!(episodes_to_fraction(&curve, -4.0, 0.0, 0.5, 1), Some(1));
        assert_eq!(episodes_to_fraction(&curve, -4.0, 1.0, 1.0, 1), None);
    }

    #[test]
    fn transfer_copies_values_and_resets_visits() {
        let sig = EnvSignature {
            n_actions: 2,
            total_prbs: 4,
            granularity: 2,
            n_slices: 1,
            demand_levels: 4,
            status_len: 3,
        };
        let mut q = QTable::new(2);
        q_update(&mut q, &[1], 1, 5.0, None, 1.0, 0.0).unwrap();
        let t = transfer_init(&q, &sig, &sig).unwrap();
        assert_eq!(t.get(&[1], 1), 5.0);
        assert_eq!(t.visits(&[1], 1), 0);
        let empty = transfer_init(&QTable::new(2), &sig, &sig).unwrap();
        assert_eq!(empty, QTable::new(2));
        let other = EnvSignature { granularity: 1, ..sig.clone() };
        assert!(matches!(transfer_init(&q, &sig, &other), Err(Error::IncompatibleEncoding(_))));
    }

    #[test]
    fn epsilon_schedule() {
        let p = SlicingParams {
            epsilon_start: 1.0,
            epsilon_end: 0.0,
            epsilon_decay_episodes: 4,
            ..Default::default()
        };
        assert_eq!(p.epsilon(0), 1.0);
        assert_eq!(p.epsilon(2), 0.5);
        assert_eq!(p.epsilon(4), 0.0);
        assert_eq!(p.epsilon(100), 0.0);
    }

    proptest! {
        #[test]
        fn actions_are_full_distinct_and_counted(units in 0u32..9, n in 1usize..5, g in 1u32..5) {
            let total = units * g;
            let acts = enumerate_actions(total, n, g).unwrap();
            prop_assert_eq!(acts.len() as u64, binomial(u64::from(units) + n as u64 - 1, n as u64 - 1));
            for a in &acts {
                prop_assert_eq!(a.iter().sum::<u32>(), total);
                prop_assert!(a.iter().all(|x| x % g == 0));
            }
            prop_assert!(acts.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn q_values_stay_finite(rs in proptest::collection::vec(-10.0f64..10.0, 1..50), alpha in 0.01f64..1.0, gamma in 0.0f64..0.99) {
            let mut q = QTable::new(2);
            for (i, r) in rs.iter().enumerate() {
                let s = [(i % 3) as u32];
                let n = [((i + 1) % 3) as u32];
                q_update(&mut q, &s, i % 2, *r, Some(&n), alpha, gamma).unwrap();
            }
            for k in q.keys() {
                for a in 0..2 {
                    prop_assert!(q.get(k, a).is_finite());
                    prop_assert!(q.get(k, a).abs() <= 10.0 / (1.0 - gamma) + 1e-9);
                }
            }
        }
    }
}
