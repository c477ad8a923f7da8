//! Slotted uplink radio-access model.
//!
//! Every slot the network draws channel states for all devices, generates
//! the traffic offered by active flows, and lets each cell serve its slices
//! with the PRBs allocated to them. Inside a slice the devices share airtime
//! by processor sharing. Packets that arrive during a slot are served from
//! the next slot on, so queue state is always integral and byte accounting
//! is exact.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factory::{agv_position, Factory, Point, ProductionStatus};
use crate::output::{fmt_f64, CsvTable};
use crate::radio::{build_model_rem, sample_rss, MeanRss, PropagationParams, RadioEnvironmentMap, ShadowingProcess, Transmitter};
use crate::sim::{hash_label, rng_stream, streams, RngStream};

pub const DEFAULT_SLOT_MS: f64 = 10.0;
pub const DEFAULT_PRB_BANDWIDTH_HZ: f64 = 360e3;
pub const DEFAULT_SPECTRAL_CAP: f64 = 7.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub id: String,
    pub position: Point,
    pub total_prbs: u32,
    #[serde(default = "default_prb_bandwidth")]
    pub prb_bandwidth_hz: f64,
    pub params: PropagationParams,
    /// PRBs per slice (in slice order) used when no policy decides.
    #[serde(default)]
    pub static_allocation: Vec<u32>,
}

fn default_prb_bandwidth() -> f64 {
    DEFAULT_PRB_BANDWIDTH_HZ
}

impl Cell {
    pub fn bandwidth_hz(&self) -> f64 {
        f64::from(self.total_prbs) * self.prb_bandwidth_hz
    }

    pub fn transmitter(&self) -> Transmitter {
        Transmitter {
            id: self.id.clone(),
            position: self.position,
            params: self.params,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceSpec {
    pub id: String,
    pub latency_bound_ms: f64,
    pub throughput_floor_bps: f64,
    #[serde(default = "one")]
    pub weight: f64,
    /// Tail-drop limit per device queue, bytes.
    #[serde(default = "default_queue_cap")]
    pub queue_cap_bytes: u64,
}

fn one() -> f64 {
    1.0
}

fn default_queue_cap() -> u64 {
    1_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficFlow {
    pub device_id: String,
    pub slice_id: String,
    pub period_ms: f64,
    /// Bytes per emission; the Pareto scale when `pareto_shape` is set.
    pub payload_bytes: u64,
    #[serde(default)]
    pub jitter_sigma_ms: f64,
    #[serde(default)]
    pub offset_ms: f64,
    /// Machine id and mode index; the flow emits only in that mode.
    #[serde(default)]
    pub gate_machine: Option<String>,
    #[serde(default)]
    pub gate_mode: Option<usize>,
    /// Heavy-tail burst payloads.
    #[serde(default)]
    pub pareto_shape: Option<f64>,
}

impl TrafficFlow {
    pub fn periodic(device: &str, slice: &str, period_ms: f64, payload_bytes: u64) -> Self {
        TrafficFlow {
            device_id: device.into(),
            slice_id: slice.into(),
            period_ms,
            payload_bytes,
            jitter_sigma_ms: 0.0,
            offset_ms: 0.0,
            gate_machine: None,
            gate_mode: None,
            pareto_shape: None,
        }
    }

    pub fn gated(mut self, machine: &str, mode: usize) -> Self {
        self.gate_machine = Some(machine.into());
        self.gate_mode = Some(mode);
        self
    }

    fn is_active(&self, status: &ProductionStatus) -> bool {
        match (&self.gate_machine, self.gate_mode) {
            (Some(m), Some(mode)) => status.machine_modes.get(m) == Some(&mode),
            _ => true,
        }
    }

    fn key(&self, index: usize) -> u64 {
        hash_label(&format!("{}|{}|{}", self.device_id, self.slice_id, index))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arrival {
    pub device_id: String,
    pub slice_id: String,
    pub arrival_ms: f64,
    pub bytes: u64,
}

/// Offered traffic in `[start_ms, start_ms + len_ms)`. Emission `k` of a flow
/// is nominally at `offset + k * period`; its jitter and payload are keyed
/// draws, so any slot can be generated independently of the others.
pub fn generate_offered_load(
    flows: &[TrafficFlow],
    status: &ProductionStatus,
    start_ms: f64,
    len_ms: f64,
    rng: &RngStream,
) -> Result<Vec<Arrival>> {
    if !(len_ms > 0.0) {
        return Err(Error::InvalidArgument(format!("slot length {len_ms} must be positive")));
    }
    let end_ms = start_ms + len_ms;
    let mut out = Vec::new();
    for (fi, flow) in flows.iter().enumerate() {
        if !flow.is_active(status) {
            continue;
        }
        let key = flow.key(fi);
        let spread = 4.0 * flow.jitter_sigma_ms;
        let lo = ((start_ms - flow.offset_ms - spread) / flow.period_ms).floor().max(0.0) as u64;
        let hi = ((end_ms - flow.offset_ms + spread) / flow.period_ms).ceil().max(0.0) as u64;
        for k in lo..=hi {
            let nominal = flow.offset_ms + k as f64 * flow.period_ms;
            let jitter = if flow.jitter_sigma_ms > 0.0 {
                (flow.jitter_sigma_ms * rng.keyed_normal(key, k)).clamp(-spread, spread)
            } else {
                0.0
            };
            let t = (nominal + jitter).max(0.0);
            if t < start_ms || t >= end_ms {
                continue;
            }
            let bytes = match flow.pareto_shape {
                Some(shape) => {
                    let (_, u) = rng.keyed_uniform_pair(key ^ 0x5bd1_e995, k);
                    let draw = flow.payload_bytes as f64 * (1.0 - u).powf(-1.0 / shape);
                    draw.min(1e9).round().max(1.0) as u64
                }
                None => flow.payload_bytes,
            };
            out.push(Arrival {
                device_id: flow.device_id.clone(),
                slice_id: flow.slice_id.clone(),
                arrival_ms: t,
                bytes,
            });
        }
    }
    out.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms));
    Ok(out)
}

pub fn bytes_by_device_slice(arrivals: &[Arrival]) -> BTreeMap<(String, String), u64> {
    let mut m = BTreeMap::new();
    for a in arrivals {
        *m.entry((a.device_id.clone(), a.slice_id.clone())).or_insert(0) += a.bytes;
    }
    m
}

pub fn sinr_db(serving_dbm: f64, interferers_dbm: &[f64], noise_dbm: f64) -> f64 {
    let mw = |dbm: f64| 10f64.powf(dbm / 10.0);
    let denom = mw(noise_dbm) + interferers_dbm.iter().map(|&i| mw(i)).sum::<f64>();
    10.0 * (mw(serving_dbm) / denom).log10()
}

/// SINR at `pos` with RSS drawn from each cell's map (serving first).
pub fn sinr(
    pos: Point,
    serving: (&dyn MeanRss, &PropagationParams),
    others: &[(&dyn MeanRss, &PropagationParams)],
    shadowing: &mut [ShadowingProcess],
    rng: &mut RngStream,
) -> Result<f64> {
    let s = sample_rss(serving.0, pos, &mut shadowing[0], rng, serving.1)?;
    let mut interf = Vec::with_capacity(others.len());
    for (i, (src, p)) in others.iter().enumerate() {
        interf.push(sample_rss(*src, pos, &mut shadowing[i + 1], rng, p)?);
    }
    Ok(sinr_db(s, &interf, serving.1.noise_floor))
}

pub fn rate_from_sinr(sinr_db: f64, bandwidth_hz: f64, cap_spectral_efficiency: f64) -> f64 {
    if bandwidth_hz <= 0.0 {
        return 0.0;
    }
    let se = (1.0 + 10f64.powf(sinr_db / 10.0)).log2();
    bandwidth_hz * se.min(cap_spectral_efficiency)
}

#[derive(Debug, Clone, PartialEq)]
struct QueuedPacket {
    arrival_ms: f64,
    remaining: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeviceQueue {
    packets: VecDeque<QueuedPacket>,
    bytes: u64,
}

impl DeviceQueue {
    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    pub fn packets(&self) -> usize {
        self.packets.len()
    }
}

/// FIFO queues keyed by (device, slice).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueueSet {
    queues: BTreeMap<(String, String), DeviceQueue>,
}

impl QueueSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, device: &str, slice: &str) {
        self.queues
            .entry((device.to_string(), slice.to_string()))
            .or_default();
    }

    pub fn get(&self, device: &str, slice: &str) -> Option<&DeviceQueue> {
        self.queues.get(&(device.to_string(), slice.to_string()))
    }

    pub fn slice_bytes(&self, slice: &str) -> u64 {
        self.queues
            .iter()
            .filter(|((_, s), _)| s == slice)
            .map(|(_, q)| q.bytes)
            .sum()
    }
}

/// Per-device channel quality for one slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelState {
    pub sinr_db: f64,
    pub position: Point,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QoSSample {
    pub t: f64,
    pub device_id: String,
    pub slice_id: String,
    pub position: Point,
    pub ul_throughput: f64,
    pub latency_ms: f64,
    pub loss_ratio: f64,
    pub serving_cell: String,
}

/// Byte and packet accounting of one slice in one slot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SliceSlotReport {
    pub arrived_bytes: u64,
    pub served_bytes: u64,
    pub dropped_bytes: u64,
    pub queue_before: u64,
    pub queue_after: u64,
    pub arrived_packets: u64,
    pub dropped_packets: u64,
    pub completed_packets: u64,
    pub latency_sum_ms: f64,
    pub capacity_bits: f64,
}

impl SliceSlotReport {
    pub fn conserves_bytes(&self) -> bool {
        self.arrived_bytes + self.queue_before
            == self.served_bytes + self.dropped_bytes + self.queue_after
    }

    pub fn absorb(&mut self, other: &SliceSlotReport) {
        self.arrived_bytes += other.arrived_bytes;
        self.served_bytes += other.served_bytes;
        self.dropped_bytes += other.dropped_bytes;
        self.queue_before += other.queue_before;
        self.queue_after += other.queue_after;
        self.arrived_packets += other.arrived_packets;
        self.dropped_packets += other.dropped_packets;
        self.completed_packets += other.completed_packets;
        self.latency_sum_ms += other.latency_sum_ms;
        self.capacity_bits += other.capacity_bits;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SlotOutcome {
    pub samples: Vec<QoSSample>,
    pub slices: BTreeMap<String, SliceSlotReport>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServeParams {
    pub slot_start_ms: f64,
    pub slot_ms: f64,
    pub spectral_cap: f64,
}

struct Sharer<'a> {
    key: (String, String),
    rate_bytes_per_ms: f64,
    queue: &'a mut DeviceQueue,
}

/// Processor sharing of `slot_ms` airtime among backlogged devices. Returns,
/// per sharer, the served bytes and the latency of every packet finished
/// this slot. Times inside the slot are kept relative to its start so equal
/// slots in different cycles yield bit-identical latencies.
fn processor_share(sharers: &mut [Sharer<'_>], start_ms: f64, slot_ms: f64) -> Vec<(u64, Vec<f64>)> {
    let n = sharers.len();
    let mut airtime = vec![0.0f64; n];
    let mut need: Vec<f64> = sharers
        .iter()
        .map(|s| {
            if s.rate_bytes_per_ms > 0.0 {
                s.queue.bytes as f64 / s.rate_bytes_per_ms
            } else {
                f64::INFINITY
            }
        })
        .collect();
    // Byte offsets reached at each phase boundary, with the time they are reached.
    let mut breakpoints: Vec<Vec<(f64, f64)>> = vec![vec![(0.0, 0.0)]; n];
    let mut clock = 0.0;
    let end = slot_ms;
    let mut active: Vec<usize> = (0..n)
        .filter(|&i| sharers[i].queue.bytes > 0 && sharers[i].rate_bytes_per_ms > 0.0)
        .collect();
    while !active.is_empty() && clock < end {
        let m = active.len() as f64;
        let min_need = active.iter().map(|&i| need[i]).fold(f64::INFINITY, f64::min);
        let span = (min_need * m).min(end - clock);
        let each = span / m;
        clock += span;
        for &i in &active {
            airtime[i] += each;
            need[i] -= each;
            let bytes = airtime[i] * sharers[i].rate_bytes_per_ms;
            breakpoints[i].push((bytes, clock));
        }
        active.retain(|&i| need[i] > 1e-12);
    }
    let mut result = Vec::with_capacity(n);
    for (i, sharer) in sharers.iter_mut().enumerate() {
        let served = ((airtime[i] * sharer.rate_bytes_per_ms) + 1e-9)
            .floor()
            .min(sharer.queue.bytes as f64) as u64;
        let served = if need[i] <= 1e-12 { sharer.queue.bytes } else { served };
        let bps = &breakpoints[i];
        let time_at = |offset: f64| -> f64 {
            for w in bps.windows(2) {
                let (b0, t0) = w[0];
                let (b1, t1) = w[1];
                if offset <= b1 + 1e-9 {
                    if b1 <= b0 {
                        return t1;
                    }
                    return t0 + (offset - b0).max(0.0) / (b1 - b0) * (t1 - t0);
                }
            }
            bps.last().map(|b| b.1).unwrap_or(0.0)
        };
        let mut left = served;
        let mut offset = 0u64;
        let mut completions = Vec::new();
        while left > 0 {
            let front = sharer.queue.packets.front_mut().expect("bytes imply packets");
            let take = front.remaining.min(left);
            front.remaining -= take;
            left -= take;
            offset += take;
            if front.remaining == 0 {
                let done = time_at(offset as f64);
                completions.push((start_ms - front.arrival_ms) + done);
                sharer.queue.packets.pop_front();
            }
        }
        sharer.queue.bytes -= served;
        result.push((served, completions));
    }
    result
}

/// Serves one cell for one slot, then enqueues the slot's arrivals.
///
/// `allocations` is indexed like `slices`. Devices without a channel entry
/// are not attached to this cell and are left untouched.
pub fn serve_slot(
    cell: &Cell,
    slices: &[SliceSpec],
    allocations: &[u32],
    queues: &mut QueueSet,
    channels: &BTreeMap<String, ChannelState>,
    arrivals: &[Arrival],
    params: ServeParams,
) -> Result<SlotOutcome> {
    let total: u32 = allocations.iter().sum();
    if total > cell.total_prbs {
        return Err(Error::OverAllocation {
            allocated: total,
            available: cell.total_prbs,
        });
    }
    if allocations.len() != slices.len() {
        return Err(Error::InvalidArgument(format!(
            "{} allocations for {} slices",
            allocations.len(),
            slices.len()
        )));
    }
    for a in arrivals {
        if channels.contains_key(&a.device_id) {
            queues.register(&a.device_id, &a.slice_id);
        }
    }
    let mut outcome = SlotOutcome::default();
    for (slice, &prbs) in slices.iter().zip(allocations) {
        let bandwidth = f64::from(prbs) * cell.prb_bandwidth_hz;
        let mut report = SliceSlotReport::default();
        let mut sharers: Vec<Sharer<'_>> = queues
            .queues
            .iter_mut()
            .filter(|((d, s), _)| s == &slice.id && channels.contains_key(d))
            .map(|(key, queue)| {
                let ch = channels[&key.0];
                let bits_per_s = rate_from_sinr(ch.sinr_db, bandwidth, params.spectral_cap);
                Sharer {
                    key: key.clone(),
                    rate_bytes_per_ms: bits_per_s / 8.0 / 1000.0,
                    queue,
                }
            })
            .collect();
        report.capacity_bits = sharers
            .iter()
            .map(|s| s.rate_bytes_per_ms * 8.0 * params.slot_ms)
            .fold(0.0, f64::max);
        report.queue_before = sharers.iter().map(|s| s.queue.bytes).sum();
        let served = processor_share(&mut sharers, params.slot_start_ms, params.slot_ms);
        let slot_end = params.slot_start_ms + params.slot_ms;
        for (sharer, (bytes, latencies)) in sharers.iter_mut().zip(served) {
            let (device, slice_id) = &sharer.key;
            let mut arrived_packets = 0u64;
            let mut dropped_packets = 0u64;
            for a in arrivals
                .iter()
                .filter(|a| &a.device_id == device && &a.slice_id == slice_id)
            {
                arrived_packets += 1;
                report.arrived_bytes += a.bytes;
                if sharer.queue.bytes + a.bytes > slice.queue_cap_bytes {
                    dropped_packets += 1;
                    report.dropped_bytes += a.bytes;
                } else {
                    sharer.queue.bytes += a.bytes;
                    sharer.queue.packets.push_back(QueuedPacket {
                        arrival_ms: a.arrival_ms,
                        remaining: a.bytes,
                    });
                }
            }
            report.served_bytes += bytes;
            report.arrived_packets += arrived_packets;
            report.dropped_packets += dropped_packets;
            report.completed_packets += latencies.len() as u64;
            report.latency_sum_ms += latencies.iter().sum::<f64>();
            let ch = channels[device];
            outcome.samples.push(QoSSample {
                t: slot_end / 1000.0,
                device_id: device.clone(),
                slice_id: slice_id.clone(),
                position: ch.position,
                ul_throughput: bytes as f64 * 8.0 / (params.slot_ms / 1000.0),
                latency_ms: if latencies.is_empty() {
                    0.0
                } else {
                    latencies.iter().sum::<f64>() / latencies.len() as f64
                },
                loss_ratio: if arrived_packets == 0 {
                    0.0
                } else {
                    dropped_packets as f64 / arrived_packets as f64
                },
                serving_cell: cell.id.clone(),
            });
        }
        report.queue_after = sharers.iter().map(|s| s.queue.bytes).sum();
        outcome.slices.insert(slice.id.clone(), report);
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub id: String,
    /// Fixed position; ignored when `agv` is set.
    #[serde(default)]
    pub position: Option<Point>,
    /// Id of the AGV carrying this device.
    #[serde(default)]
    pub agv: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSettings {
    #[serde(default = "default_slot_ms")]
    pub slot_ms: f64,
    #[serde(default = "default_hysteresis")]
    pub attach_hysteresis_db: f64,
    #[serde(default = "default_rem_cell")]
    pub rem_cell_size: f64,
    #[serde(default = "default_cap")]
    pub spectral_cap: f64,
    /// Other cells' signals count as interference.
    #[serde(default = "yes")]
    pub interference: bool,
}

fn default_slot_ms() -> f64 {
    DEFAULT_SLOT_MS
}

fn default_hysteresis() -> f64 {
    3.0
}

fn default_rem_cell() -> f64 {
    1.0
}

fn default_cap() -> f64 {
    DEFAULT_SPECTRAL_CAP
}

fn yes() -> bool {
    true
}

impl Default for NetSettings {
    fn default() -> Self {
        NetSettings {
            slot_ms: DEFAULT_SLOT_MS,
            attach_hysteresis_db: 3.0,
            rem_cell_size: 1.0,
            spectral_cap: DEFAULT_SPECTRAL_CAP,
            interference: true,
        }
    }
}

/// Full network description: cells, slices, devices and their flows.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub settings: NetSettings,
    pub cells: Vec<Cell>,
    pub slices: Vec<SliceSpec>,
    pub devices: Vec<DeviceSpec>,
    pub flows: Vec<TrafficFlow>,
}

#[derive(Clone)]
struct DeviceState {
    serving: Option<usize>,
    shadowing: Vec<ShadowingProcess>,
    rng: RngStream,
}

/// A running slotted network bound to a factory. Cloning snapshots the
/// full state, so a clone continues exactly like the original.
#[derive(Clone)]
pub struct Network<'f> {
    factory: &'f Factory,
    spec: NetworkSpec,
    rems: Vec<RadioEnvironmentMap>,
    devices: Vec<DeviceState>,
    queues: QueueSet,
    traffic: RngStream,
    slot_index: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSlot {
    pub t_start: f64,
    pub status: ProductionStatus,
    pub channels: BTreeMap<String, (usize, ChannelState)>,
    pub arrivals: Vec<Arrival>,
    /// Indexed like `cells`.
    pub cells: Vec<SlotOutcome>,
}

impl NetworkSlot {
    pub fn samples(&self) -> impl Iterator<Item = &QoSSample> {
        self.cells.iter().flat_map(|c| c.samples.iter())
    }

    /// Slice reports summed over cells.
    pub fn slice_totals(&self) -> BTreeMap<String, SliceSlotReport> {
        let mut out: BTreeMap<String, SliceSlotReport> = BTreeMap::new();
        for c in &self.cells {
            for (id, r) in &c.slices {
                out.entry(id.clone()).or_default().absorb(r);
            }
        }
        out
    }
}

impl<'f> Network<'f> {
    pub fn new(factory: &'f Factory, spec: NetworkSpec, seed: u64) -> Result<Self> {
        let rems = spec
            .cells
            .iter()
            .map(|c| build_model_rem(&factory.layout, &c.transmitter(), spec.settings.rem_cell_size))
            .collect::<Result<Vec<_>>>()?;
        let shadow_root = rng_stream(seed, streams::SHADOWING);
        let devices = spec
            .devices
            .iter()
            .map(|d| DeviceState {
                serving: None,
                shadowing: vec![ShadowingProcess::new(); spec.cells.len()],
                rng: shadow_root.substream(&d.id),
            })
            .collect();
        let mut queues = QueueSet::new();
        for f in &spec.flows {
            queues.register(&f.device_id, &f.slice_id);
        }
        Ok(Network {
            factory,
            rems,
            devices,
            queues,
            traffic: rng_stream(seed, streams::TRAFFIC),
            slot_index: 0,
            spec,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn rems(&self) -> &[RadioEnvironmentMap] {
        &self.rems
    }

    pub fn queues(&self) -> &QueueSet {
        &self.queues
    }

    pub fn slot_ms(&self) -> f64 {
        self.spec.settings.slot_ms
    }

    pub fn time(&self) -> f64 {
        self.slot_index as f64 * self.slot_ms() / 1000.0
    }

    pub fn device_position(&self, idx: usize, t: f64) -> Point {
        let d = &self.spec.devices[idx];
        match &d.agv {
            Some(agv) => self
                .factory
                .agv(agv)
                .map(|a| agv_position(a, t))
                .unwrap_or_default(),
            None => d.position.unwrap_or_default(),
        }
    }

    pub fn static_allocations(&self) -> Vec<Vec<u32>> {
        self.spec
            .cells
            .iter()
            .map(|c| {
                if c.static_allocation.len() == self.spec.slices.len() {
                    c.static_allocation.clone()
                } else {
                    even_split(c.total_prbs, self.spec.slices.len())
                }
            })
            .collect()
    }

    /// Offered load of the next slot without advancing the network.
    pub fn peek_arrivals(&self) -> Result<Vec<Arrival>> {
        let slot_ms = self.slot_ms();
        let start_ms = self.slot_index as f64 * slot_ms;
        let status = self.factory.production_status(start_ms / 1000.0);
        generate_offered_load(&self.spec.flows, &status, start_ms, slot_ms, &self.traffic)
    }

    pub fn step(&mut self, allocations: &[Vec<u32>]) -> Result<NetworkSlot> {
        let slot_ms = self.slot_ms();
        let start_ms = self.slot_index as f64 * slot_ms;
        let t = start_ms / 1000.0;
        let status = self.factory.production_status(t);
        let ncell = self.spec.cells.len();
        let mut channels = BTreeMap::new();
        for idx in 0..self.devices.len() {
            let pos = self.device_position(idx, t);
            let means: Vec<f64> = self
                .rems
                .iter()
                .map(|r| r.interpolate(self.factory.layout.bounds.clamp(pos)))
                .collect::<Result<_>>()?;
            let state = &mut self.devices[idx];
            let best = (0..ncell)
                .max_by(|&a, &b| means[a].total_cmp(&means[b]).then(b.cmp(&a)))
                .ok_or_else(|| Error::InvalidArgument("network has no cells".into()))?;
            let serving = match state.serving {
                Some(cur) if means[best] <= means[cur] + self.spec.settings.attach_hysteresis_db => cur,
                _ => best,
            };
            state.serving = Some(serving);
            let mut rss = Vec::with_capacity(ncell);
            for (c, rem) in self.rems.iter().enumerate() {
                let p = &self.spec.cells[c].params;
                let clamped = self.factory.layout.bounds.clamp(pos);
                rss.push(sample_rss(rem, clamped, &mut state.shadowing[c], &mut state.rng, p)?);
            }
            let interferers: Vec<f64> = if self.spec.settings.interference {
                (0..ncell).filter(|&c| c != serving).map(|c| rss[c]).collect()
            } else {
                Vec::new()
            };
            let s = sinr_db(rss[serving], &interferers, self.spec.cells[serving].params.noise_floor);
            channels.insert(
                self.spec.devices[idx].id.clone(),
                (serving, ChannelState { sinr_db: s, position: pos }),
            );
        }
        let arrivals =
            generate_offered_load(&self.spec.flows, &status, start_ms, slot_ms, &self.traffic)?;
        let mut cells = Vec::with_capacity(ncell);
        for (c, cell) in self.spec.cells.iter().enumerate() {
            let attached: BTreeMap<String, ChannelState> = channels
                .iter()
                .filter(|(_, (s, _))| *s == c)
                .map(|(d, (_, ch))| (d.clone(), *ch))
                .collect();
            let mine: Vec<Arrival> = arrivals
                .iter()
                .filter(|a| attached.contains_key(&a.device_id))
                .cloned()
                .collect();
            let alloc = allocations
                .get(c)
                .ok_or_else(|| Error::InvalidArgument(format!("no allocation for cell {}", cell.id)))?;
            cells.push(serve_slot(
                cell,
                &self.spec.slices,
                alloc,
                &mut self.queues,
                &attached,
                &mine,
                ServeParams {
                    slot_start_ms: start_ms,
                    slot_ms,
                    spectral_cap: self.spec.settings.spectral_cap,
                },
            )?);
        }
        self.slot_index += 1;
        Ok(NetworkSlot {
            t_start: t,
            status,
            channels,
            arrivals,
            cells,
        })
    }
}

pub fn even_split(total: u32, n: usize) -> Vec<u32> {
    if n == 0 {
        return Vec::new();
    }
    let base = total / n as u32;
    let extra = total as usize % n;
    (0..n).map(|i| base + u32::from(i < extra)).collect()
}

pub fn qos_trace_table(samples: &[QoSSample]) -> CsvTable {
    let mut t = CsvTable::new(
        "qos-trace v1",
        &[
            "t",
            "device_id",
            "x",
            "y",
            "slice_id",
            "ul_throughput_bps",
            "latency_ms",
            "loss_ratio",
            "serving_cell",
        ],
    );
    for s in samples {
        t.push(vec![
            fmt_f64(s.t),
            s.device_id.clone(),
            fmt_f64(s.position.x),
            fmt_f64(s.position.y),
            s.slice_id.clone(),
            fmt_f64(s.ul_throughput),
            fmt_f64(s.latency_ms),
            fmt_f64(s.loss_ratio),
            s.serving_cell.clone(),
        ]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factory::{FactoryLayout, Machine, MachineMode, ProductionCycle, Rect};
    use std::collections::BTreeSet;

    fn status_with(modes: &[(&str, usize)]) -> ProductionStatus {
        ProductionStatus {
            cycle_phase: 0,
            machine_modes: modes.iter().map(|(m, i)| (m.to_string(), *i)).collect(),
            active_agvs: BTreeSet::new(),
        }
    }

    fn cell(prbs: u32) -> Cell {
        Cell {
            id: "c0".into(),
            position: Point::new(0.0, 0.0),
            total_prbs: prbs,
            prb_bandwidth_hz: DEFAULT_PRB_BANDWIDTH_HZ,
            params: PropagationParams::default(),
            static_allocation: vec![],
        }
    }

    fn slice(id: &str) -> SliceSpec {
        SliceSpec {
            id: id.into(),
            latency_bound_ms: 20.0,
            throughput_floor_bps: 0.0,
            weight: 1.0,
            queue_cap_bytes: 1_000_000,
        }
    }

    fn channel(sinr: f64) -> ChannelState {
        ChannelState {
            sinr_db: sinr,
            position: Point::new(1.0, 1.0),
        }
    }

    fn params(start: f64) -> ServeParams {
        ServeParams {
            slot_start_ms: start,
            slot_ms: 10.0,
            spectral_cap: DEFAULT_SPECTRAL_CAP,
        }
    }

    #[test]
    fn sinr_definitions() {
        assert!((sinr_db(-70.0, &[], -100.0) - 30.0).abs() < 1e-9);
        assert!(sinr_db(-70.0, &[-70.0], -200.0).abs() < 1e-9);
        let base = sinr_db(-70.0, &[-90.0], -100.0);
        assert!(sinr_db(-70.0, &[-90.0, -95.0], -100.0) < base);
    }

    #[test]
    fn rate_reference_values() {
        assert!((rate_from_sinr(0.0, 1.0, 7.4) - 1.0).abs() < 1e-12);
        assert_eq!(rate_from_sinr(10.0, 0.0, 7.4), 0.0);
        assert!((rate_from_sinr(40.0, 1.0, 7.4) - 7.4).abs() < 1e-12);
        let uncapped = rate_from_sinr(40.0, 1.0, f64::INFINITY);
        assert!((uncapped - 13.2879).abs() < 1e-4);
    }

    #[test]
    fn gated_flow_is_silent_in_other_modes() {
        let flows = vec![TrafficFlow::periodic("d", "s", 10.0, 100).gated("press", 0)];
        let rng = rng_stream(1, "traffic");
        let active = status_with(&[("press", 1)]);
        assert!(generate_offered_load(&flows, &active, 0.0, 100.0, &rng).unwrap().is_empty());
        let idle = status_with(&[("press", 0)]);
        assert_eq!(generate_offered_load(&flows, &idle, 0.0, 100.0, &rng).unwrap().len(), 10);
    }

    #[test]
    fn periodic_flow_counts() {
        let flows = vec![TrafficFlow::periodic("d", "s", 10.0, 100)];
        let rng = rng_stream(1, "traffic");
        let st = status_with(&[]);
        let a = generate_offered_load(&flows, &st, 0.0, 100.0, &rng).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(bytes_by_device_slice(&a)[&("d".to_string(), "s".to_string())], 1000);
        // Slots tile time without double counting.
        let parts: usize = (0..10)
            .map(|i| generate_offered_load(&flows, &st, i as f64 * 10.0, 10.0, &rng).unwrap().len())
            .sum();
        assert_eq!(parts, 10);
    }

    #[test]
    fn jittered_arrivals_are_counted_once() {
        let mut f = TrafficFlow::periodic("d", "s", 20.0, 10);
        f.jitter_sigma_ms = 6.0;
        f.offset_ms = 30.0;
        let rng = rng_stream(3, "traffic");
        let st = status_with(&[]);
        let whole = generate_offered_load(&[f.clone()], &st, 0.0, 2000.0, &rng).unwrap().len();
        let sliced: usize = (0..200)
            .map(|i| generate_offered_load(&[f.clone()], &st, i as f64 * 10.0, 10.0, &rng).unwrap().len())
            .sum();
        assert_eq!(whole, sliced);
    }

    #[test]
    fn over_allocation_rejected() {
        let mut q = QueueSet::new();
        let err = serve_slot(&cell(10), &[slice("a")], &[11], &mut q, &BTreeMap::new(), &[], params(0.0));
        assert!(matches!(err, Err(Error::OverAllocation { .. })));
    }

    #[test]
    fn idle_slot_produces_zero_samples() {
        let mut q = QueueSet::new();
        q.register("d", "a");
        let ch: BTreeMap<_, _> = [("d".to_string(), channel(20.0))].into();
        let out = serve_slot(&cell(10), &[slice("a")], &[10], &mut q, &ch, &[], params(0.0)).unwrap();
        assert_eq!(out.samples.len(), 1);
        assert_eq!(out.samples[0].ul_throughput, 0.0);
        assert_eq!(out.samples[0].loss_ratio, 0.0);
        assert_eq!(out.samples[0].latency_ms, 0.0);
    }

    #[test]
    fn zero_allocation_accumulates_arrivals() {
        let mut q = QueueSet::new();
        let ch: BTreeMap<_, _> = [("d".to_string(), channel(20.0))].into();
        let arrivals: Vec<Arrival> = (0..3)
            .map(|i| Arrival {
                device_id: "d".into(),
                slice_id: "a".into(),
                arrival_ms: i as f64,
                bytes: 500,
            })
            .collect();
        let out = serve_slot(&cell(10), &[slice("a")], &[0], &mut q, &ch, &arrivals, params(0.0)).unwrap();
        let r = &out.slices["a"];
        assert_eq!(r.queue_after - r.queue_before, 1500);
        assert!(r.conserves_bytes());
    }

    #[test]
    fn matched_capacity_drains_each_slot() {
        // Hand simulation: one device whose per-slot capacity equals the
        // bytes offered per slot. Arrivals of slot j are fully served in j+1
        // and complete at the end of that slot: latency <= slot + transmission.
        let c = cell(1);
        let se = (1.0 + 10f64.powf(1.0)).log2();
        let bytes_per_slot = (c.prb_bandwidth_hz * se * 0.010 / 8.0).floor() as u64;
        let mut q = QueueSet::new();
        let ch: BTreeMap<_, _> = [("d".to_string(), channel(10.0))].into();
        let arrival = |slot: u32| Arrival {
            device_id: "d".into(),
            slice_id: "a".into(),
            arrival_ms: slot as f64 * 10.0,
            bytes: bytes_per_slot,
        };
        serve_slot(&c, &[slice("a")], &[1], &mut q, &ch, &[arrival(0)], params(0.0)).unwrap();
        assert_eq!(q.slice_bytes("a"), bytes_per_slot);
        for slot in 1..5 {
            let out = serve_slot(&c, &[slice("a")], &[1], &mut q, &ch, &[arrival(slot)], params(slot as f64 * 10.0)).unwrap();
            let s = &out.samples[0];
            assert!(s.latency_ms <= 10.0 + 10.0 + 1e-9, "latency {}", s.latency_ms);
            assert!(s.latency_ms >= 10.0);
            assert_eq!(out.slices["a"].served_bytes, bytes_per_slot);
            // Only the new arrival remains.
            assert_eq!(q.slice_bytes("a"), bytes_per_slot);
        }
    }

    #[test]
    fn small_packet_latency_is_wait_plus_transmission() {
        let c = cell(10);
        let mut q = QueueSet::new();
        let ch: BTreeMap<_, _> = [("d".to_string(), channel(20.0))].into();
        let a = Arrival {
            device_id: "d".into(),
            slice_id: "a".into(),
            arrival_ms: 4.0,
            bytes: 100,
        };
        serve_slot(&c, &[slice("a")], &[10], &mut q, &ch, &[a], params(0.0)).unwrap();
        let out = serve_slot(&c, &[slice("a")], &[10], &mut q, &ch, &[], params(10.0)).unwrap();
        let rate = rate_from_sinr(20.0, 10.0 * 360e3, 7.4) / 8.0 / 1000.0;
        let expected = 6.0 + 100.0 / rate;
        assert!((out.samples[0].latency_ms - expected).abs() < 1e-9);
    }

    #[test]
    fn tail_drop_counts_loss() {
        let c = cell(10);
        let mut s = slice("a");
        s.queue_cap_bytes = 1000;
        let mut q = QueueSet::new();
        let ch: BTreeMap<_, _> = [("d".to_string(), channel(20.0))].into();
        let arrivals: Vec<Arrival> = (0..4)
            .map(|i| Arrival {
                device_id: "d".into(),
                slice_id: "a".into(),
                arrival_ms: i as f64,
                bytes: 400,
            })
            .collect();
        let out = serve_slot(&c, &[s], &[0], &mut q, &ch, &arrivals, params(0.0)).unwrap();
        assert_eq!(out.samples[0].loss_ratio, 0.5);
        assert_eq!(out.slices["a"].dropped_bytes, 800);
        assert!(out.slices["a"].conserves_bytes());
    }

    #[test]
    fn processor_sharing_splits_airtime() {
        let c = cell(10);
        let mut q = QueueSet::new();
        let ch: BTreeMap<_, _> = [
            ("d1".to_string(), channel(20.0)),
            ("d2".to_string(), channel(20.0)),
        ]
        .into();
        let big = |d: &str| Arrival {
            device_id: d.into(),
            slice_id: "a".into(),
            arrival_ms: 0.0,
            bytes: 10_000_000,
        };
        serve_slot(&c, &[slice("a")], &[10], &mut q, &ch, &[big("d1"), big("d2")], params(0.0)).unwrap();
        let mut s = slice("a");
        s.queue_cap_bytes = u64::MAX;
        let out = serve_slot(&c, &[s], &[10], &mut q, &ch, &[], params(10.0)).unwrap();
        let cap = rate_from_sinr(20.0, 10.0 * 360e3, 7.4);
        let total: f64 = out.samples.iter().map(|s| s.ul_throughput).sum();
        assert!(total <= cap + 1e-6);
        assert!((out.samples[0].ul_throughput - out.samples[1].ul_throughput).abs() < 1000.0);
    }

    fn small_factory() -> Factory {
        Factory {
            layout: FactoryLayout::open(Rect::new(Point::new(0.0, 0.0), Point::new(20.0, 10.0))),
            cycle: ProductionCycle { length: 1.0, phases: 4 },
            machines: vec![Machine {
                id: "press".into(),
                position: Point::new(5.0, 5.0),
                modes: vec![
                    MachineMode { name: "idle".into(), duration: 0.5, traffic_profile: None },
                    MachineMode { name: "active".into(), duration: 0.5, traffic_profile: None },
                ],
                schedule: vec![0, 1],
            }],
            agvs: vec![],
            mode_jitter: 0.0,
            jitter_seed: 0,
        }
    }

    fn small_network() -> NetworkSpec {
        NetworkSpec {
            settings: NetSettings::default(),
            cells: vec![Cell {
                static_allocation: vec![4, 6],
                ..cell(10)
            }],
            slices: vec![slice("ctl"), slice("video")],
            devices: vec![DeviceSpec {
                id: "press".into(),
                position: Some(Point::new(5.0, 5.0)),
                agv: None,
            }],
            flows: vec![
                TrafficFlow::periodic("press", "ctl", 10.0, 200),
                TrafficFlow::periodic("press", "video", 20.0, 20_000).gated("press", 1),
            ],
        }
    }

    #[test]
    fn network_conserves_bytes_and_is_periodic() {
        let f = small_factory();
        let mut net = Network::new(&f, small_network(), 1).unwrap();
        let alloc = net.static_allocations();
        let mut per_cycle = Vec::new();
        for _cycle in 0..3 {
            let mut trace = Vec::new();
            for _ in 0..100 {
                let slot = net.step(&alloc).unwrap();
                for r in slot.slice_totals().values() {
                    assert!(r.conserves_bytes());
                }
                trace.extend(slot.samples().map(|s| (s.ul_throughput, s.latency_ms, s.loss_ratio)));
            }
            per_cycle.push(trace);
        }
        assert_eq!(per_cycle[1], per_cycle[2]);
    }
}
