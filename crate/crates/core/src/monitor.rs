//! Cross-region traffic monitoring: Gramian angular field encoding of load
//! series and k-NN estimation of an unmonitored region's load from the
//! encodings of monitored ones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factory::Factory;
use crate::net::{Network, NetworkSpec};
use crate::output::{fmt_f64, CsvTable};

/// Load per window of one region, in bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSeries {
    pub region_id: String,
    pub values: Vec<f64>,
    pub window_s: f64,
}

/// Affine map onto [-1, 1]. A constant series maps to zeros.
pub fn rescale_unit(series: &[f64]) -> Vec<f64> {
    let (lo, hi) = series
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if !(hi > lo) {
        return vec![0.0; series.len()];
    }
    series
        .iter()
        .map(|&x| (2.0 * (x - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0))
        .collect()
}

/// Row-major symmetric n×n matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GafMatrix {
    pub n: usize,
    pub values: Vec<f64>,
}

impl GafMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn frobenius_distance(&self, other: &GafMatrix) -> Result<f64> {
        if self.n != other.n {
            return Err(Error::InvalidArgument(format!(
                "GAF sizes differ: {} vs {}",
                self.n, other.n
            )));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn to_table(&self, schema_note: &str) -> CsvTable {
        let mut t = CsvTable::new(&format!("gaf v1 {schema_note}"), &["i", "j", "value"]);
        for i in 0..self.n {
            for j in 0..self.n {
                t.push(vec![i.to_string(), j.to_string(), fmt_f64(self.get(i, j))]);
            }
        }
        t
    }
}

/// Summation field of a series already in [-1, 1]:
/// `G[i][j] = cos(phi_i + phi_j)` with `phi = acos(x)`.
pub fn gaf_from_unit(unit: &[f64]) -> Result<GafMatrix> {
    if unit.is_empty() {
        return Err(Error::EmptySamples("GAF of an empty series".into()));
    }
    let phi: Vec<f64> = unit.iter().map(|x| x.clamp(-1.0, 1.0).acos()).collect();
    let n = phi.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let g = (phi[i] + phi[j]).cos();
            values[i * n + j] = g;
            values[j * n + i] = g;
        }
    }
    Ok(GafMatrix { n, values })
}

pub fn gaf_encode(series: &[f64]) -> Result<GafMatrix> {
    gaf_from_unit(&rescale_unit(series))
}

/// One training pair: the encoded windows of every monitored region and the
/// hidden region's load over the same window.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitorSample {
    pub encodings: Vec<GafMatrix>,
    pub label: f64,
}

fn window_distance(a: &[GafMatrix], b: &[GafMatrix]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "{} monitored regions vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x.frobenius_distance(y)?.powi(2);
    }
    Ok(s.sqrt())
}

/// Mean label of the `k` history windows closest to `query`, with Frobenius
/// distances combined over regions; ties go to the earlier window.
pub fn estimate_remote_region(history: &[MonitorSample], query: &[GafMatrix], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > history.len() {
        return Err(Error::KTooLarge {
            k,
            available: history.len(),
        });
    }
    let mut scored = history
        .iter()
        .enumerate()
        .map(|(i, h)| Ok((window_distance(&h.encodings, query)?, i)))
        .collect::<Result<Vec<(f64, usize)>>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored[..k].iter().map(|&(_, i)| history[i].label).sum::<f64>() / k as f64)
}

/// A slice's traffic in one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionRef {
    pub cell: String,
    pub slice: String,
}

impl RegionRef {
    pub fn id(&self) -> String {
        format!("{}/{}", self.cell, self.slice)
    }
}

/// Settings of `[experiment.monitor]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorExperiment {
    pub monitored: Vec<RegionRef>,
    pub hidden: RegionRef,
    /// Aggregation bin of the load series (ms); a whole number of slots.
    #[serde(default = "default_bin_ms")]
    pub bin_ms: f64,
    /// Bins per encoded window.
    #[serde(default = "default_window_bins")]
    pub window_bins: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_train_cycles")]
    pub train_cycles: usize,
    #[serde(default = "default_eval_cycles")]
    pub eval_cycles: usize,
}

fn default_bin_ms() -> f64 {
    100.0
}

fn default_window_bins() -> usize {
    16
}

fn default_k() -> usize {
    5
}

fn default_train_cycles() -> usize {
    6
}

fn default_eval_cycles() -> usize {
    3
}

/// Arrived bytes per bin for each region, simulated under the cells' static
/// allocations.
pub fn region_series(
    factory: &Factory,
    spec: &NetworkSpec,
    regions: &[RegionRef],
    bin_ms: f64,
    duration_s: f64,
    seed: u64,
) -> Result<Vec<TrafficSeries>> {
    let mut net = Network::new(factory, spec.clone(), seed)?;
    let slot_ms = net.slot_ms();
    let ratio = bin_ms / slot_ms;
    if !(ratio >= 1.0) || (ratio - ratio.round()).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "bin of {bin_ms} ms is not a whole number of {slot_ms} ms slots"
        )));
    }
    let slots_per_bin = ratio.round() as usize;
    let idx = regions
        .iter()
        .map(|r| {
            spec.cells
                .iter()
                .position(|c| c.id == r.cell)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown cell `{}`", r.cell)))
        })
        .collect::<Result<Vec<usize>>>()?;
    let n_bins = ((duration_s * 1000.0 / bin_ms) + 1e-9).floor() as usize;
    let alloc = net.static_allocations();
    let mut out: Vec<TrafficSeries> = regions
        .iter()
        .map(|r| TrafficSeries {
            region_id: r.id(),
            values: Vec::with_capacity(n_bins),
            window_s: bin_ms / 1000.0,
        })
        .collect();
    for _ in 0..n_bins {
        let mut acc = vec![0u64; regions.len()];
        for _ in 0..slots_per_bin {
            let slot = net.step(&alloc)?;
            for (a, (r, &ci)) in acc.iter_mut().zip(regions.iter().zip(&idx)) {
                *a += slot.cells[ci].slices.get(&r.slice).map_or(0, |s| s.arrived_bytes);
            }
        }
        for (s, a) in out.iter_mut().zip(acc) {
            s.values.push(a as f64);
        }
    }
    Ok(out)
}

/// One sample per start index, each spanning `len` bins.
fn windows(
    monitored: &[TrafficSeries],
    hidden: &TrafficSeries,
    starts: impl Iterator<Item = usize>,
    len: usize,
) -> Result<Vec<MonitorSample>> {
    starts
        .map(|s| {
            let encodings = monitored
                .iter()
                .map(|m| gaf_encode(&m.values[s..s + len]))
                .collect::<Result<Vec<_>>>()?;
            let label = hidden.values[s..s + len].iter().sum::<f64>() / len as f64;
            Ok(MonitorSample { encodings, label })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorEstimate {
    pub window_start_s: f64,
    pub truth: f64,
    pub estimate: f64,
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorRun {
    pub seed: u64,
    pub estimates: Vec<MonitorEstimate>,
    pub mae: f64,
    pub baseline_mae: f64,
}

/// Trains on every window of the first `train_cycles` cycles, then estimates
/// the hidden region's mean load per bin on non-overlapping windows of the
/// following `eval_cycles`. The baseline predicts the training label mean.
pub fn run_monitor(factory: &Factory, spec: &NetworkSpec, exp: &MonitorExperiment, seed: u64) -> Result<MonitorRun> {
    let mut regions = exp.monitored.clone();
    regions.push(exp.hidden.clone());
    let cycle = factory.cycle.length;
    let total = (exp.train_cycles + exp.eval_cycles) as f64 * cycle;
    let mut series = region_series(factory, spec, &regions, exp.bin_ms, total, seed)?;
    let hidden = series.pop().expect("hidden region present");
    let bins_per_cycle = (cycle * 1000.0 / exp.bin_ms).round() as usize;
    let train_bins = exp.train_cycles * bins_per_cycle;
    let n = hidden.values.len();
    let w = exp.window_bins;
    if w == 0 || train_bins < w || n < train_bins + w {
        return Err(Error::InvalidArgument(format!(
            "window of {w} bins does not fit {train_bins} training and {} evaluation bins",
            n.saturating_sub(train_bins)
        )));
    }
    let history = windows(&series, &hidden, 0..=train_bins - w, w)?;
    let baseline = history.iter().map(|h| h.label).sum::<f64>() / history.len() as f64;
    let eval = windows(&series, &hidden, (train_bins..=n - w).step_by(w), w)?;
    let mut estimates = Vec::with_capacity(eval.len());
    for (i, q) in eval.iter().enumerate() {
        let est = estimate_remote_region(&history, &q.encodings, exp.k)?;
        estimates.push(MonitorEstimate {
            window_start_s: (train_bins + i * w) as f64 * exp.bin_ms / 1000.0,
            truth: q.label,
            estimate: est,
            baseline,
        });
    }
    let m = estimates.len() as f64;
    let mae = estimates.iter().map(|e| (e.estimate - e.truth).abs()).sum::<f64>() / m;
    let baseline_mae = estimates.iter().map(|e| (e.baseline - e.truth).abs()).sum::<f64>() / m;
    Ok(MonitorRun {
        seed,
        estimates,
        mae,
        baseline_mae,
    })
}

pub fn estimates_table(runs: &[MonitorRun]) -> CsvTable {
    let mut t = CsvTable::new(
        "monitor-estimates v1",
        &["seed", "window_start_s", "truth_bytes", "estimate_bytes", "baseline_bytes"],
    );
    for r in runs {
        for e in &r.estimates {
            t.push(vec![
                r.seed.to_string(),
                fmt_f64(e.window_start_s),
                fmt_f64(e.truth),
                fmt_f64(e.estimate),
                fmt_f64(e.baseline),
            ]);
        }
    }
    t
}

pub fn summary_table(runs: &[MonitorRun]) -> CsvTable {
    let mut t = CsvTable::new("monitor-summary v1", &["seed", "windows", "mae_bytes", "baseline_mae_bytes"]);
    for r in runs {
        t.push(vec![
            r.seed.to_string(),
            r.estimates.len().to_string(),
            fmt_f64(r.mae),
            fmt_f64(r.baseline_mae),
        ]);
    }
    t
}
