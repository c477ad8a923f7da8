//! Experiment orchestration: per-command pipelines over a seed list, output
//! files, the run manifest, and cross-file comparison of metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::locate;
use crate::monitor::{self, gaf_encode};
use crate::offload::{self, PolicyKind};
use crate::output::{fmt_f64, parse_csv, write_text, CsvTable};
use crate::radio::fusion;
use crate::slicing;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Offload,
    Slicing,
    Locate,
    Monitor,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Offload => "offload",
            Command::Slicing => "slicing",
            Command::Locate => "locate",
            Command::Monitor => "monitor",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offload" => Ok(Command::Offload),
            "slicing" => Ok(Command::Slicing),
            "locate" => Ok(Command::Locate),
            "monitor" => Ok(Command::Monitor),
            _ => Err(Error::InvalidArgument(format!("unknown command `{s}`"))),
        }
    }
}

/// Slicing variants selectable with `--policies`.
pub const SLICING_VARIANTS: [&str; 3] = ["no-status", "status", "transfer"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    pub seeds: Vec<u64>,
    /// Command-specific selection; every variant when empty.
    pub policies: Vec<String>,
    /// Overrides the configured training episodes.
    pub episodes: Option<usize>,
    /// Worker threads; one per available core when zero.
    pub threads: usize,
}

/// `count` consecutive seeds starting at `first`.
pub fn seed_list(first: u64, count: u64) -> Vec<u64> {
    (0..count.max(1)).map(|i| first + i).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub command: String,
    pub scenario: String,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub policies: Vec<String>,
    pub episodes: Option<usize>,
    pub status: String,
    pub error: Option<String>,
    pub files: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Applies `f` to every item on a pool of scoped threads; results keep the
/// input order.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = if threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        threads
    }
    .min(items.len())
    .max(1);
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every item mapped"))
        .collect()
}

struct Outputs {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl Outputs {
    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        write_text(&self.dir.join(name), text)?;
        self.files.push(FileEntry {
            name: name.to_string(),
            bytes: text.len() as u64,
            sha256: sha256_hex(text.as_bytes()),
        });
        Ok(())
    }

    fn table(&mut self, name: &str, t: &CsvTable) -> Result<()> {
        self.write(name, &t.render())
    }
}

fn collect<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

fn selected<'a>(policies: &'a [String], all: &[&'a str]) -> Result<Vec<&'a str>> {
    if policies.is_empty() {
        return Ok(all.to_vec());
    }
    for p in policies {
        if !all.contains(&p.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "unknown variant `{p}`; expected one of {}",
                all.join(", ")
            )));
        }
    }
    Ok(policies.iter().map(String::as_str).collect())
}

fn missing(section: &str) -> Error {
    Error::Config(format!("scenario has no `{section}` section"))
}

fn run_offload(cfg: &ScenarioConfig, opts: &RunOptions, out: &mut Outputs) -> Result<()> {
    let policy_cfg = cfg.policies.offload.as_ref().ok_or_else(|| missing("policies.offload"))?;
    let exp = cfg.experiment.offload.as_ref().ok_or_else(|| missing("experiment.offload"))?;
    let policies = if opts.policies.is_empty() {
        PolicyKind::ALL.to_vec()
    } else {
        opts.policies.iter().map(|p| p.parse()).collect::<Result<Vec<PolicyKind>>>()?
    };
    let spec = cfg.network_spec();
    let per_seed = collect(parallel_map(&opts.seeds, opts.threads, |&seed| {
        offload::run_offload_experiment(&cfg.factory, &spec, &policies, policy_cfg, exp, &cfg.policies.predictors, seed)
            .map(|(runs, _)| runs.into_iter().map(|r| (seed, r)).collect::<Vec<_>>())
    }))?;
    let rows: Vec<_> = per_seed.into_iter().flatten().collect();
    out.table("offload_metrics.csv", &offload::metrics_table(&rows))
}

fn run_slicing(cfg: &ScenarioConfig, opts: &RunOptions, out: &mut Outputs) -> Result<()> {
    let mut params = cfg.policies.slicing.clone().ok_or_else(|| missing("policies.slicing"))?;
    if let Some(e) = opts.episodes {
        params.episodes = e;
        params.epsilon_decay_episodes = params.epsilon_decay_episodes.min(e);
    }
    params.validate()?;
    let exp = cfg.experiment.slicing.clone().unwrap_or_default();
    let variants = selected(&opts.policies, &SLICING_VARIANTS)?;
    let spec = cfg.network_spec();
    let mut jobs: Vec<(u64, bool)> = Vec::new();
    for &seed in &opts.seeds {
        for (name, status) in [("no-status", false), ("status", true)] {
            if variants.contains(&name) {
                jobs.push((seed, status));
            }
        }
    }
    let runs = collect(parallel_map(&jobs, opts.threads, |&(seed, status)| {
        slicing::run_slicing(&cfg.factory, &spec, &params, &exp, status, seed)
    }))?;
    if !runs.is_empty() {
        out.table("slicing_reliability.csv", &slicing::reliability_table(&runs, &spec.slices))?;
        out.table("slicing_curve.csv", &slicing::curve_table(&runs))?;
    }
    if variants.contains(&"transfer") {
        let transfers = collect(parallel_map(&opts.seeds, opts.threads, |&seed| {
            slicing::run_transfer(&cfg.factory, &spec, &params, &exp, seed)
        }))?;
        out.table("slicing_transfer.csv", &slicing::transfer_table(&transfers))?;
    }
    Ok(())
}

fn run_locate(cfg: &ScenarioConfig, opts: &RunOptions, out: &mut Outputs) -> Result<()> {
    let mut exp = cfg.experiment.locate.clone().ok_or_else(|| missing("experiment.locate"))?;
    if !opts.policies.is_empty() {
        let mut k_values = Vec::new();
        let mut tri = false;
        for p in &opts.policies {
            if p == "trilateration" {
                tri = true;
            } else if let Some(k) = p.strip_prefix("knn-k").and_then(|k| k.parse().ok()) {
                k_values.push(k);
            } else {
                return Err(Error::InvalidArgument(format!(
                    "unknown positioning method `{p}`; expected knn-k<K> or trilateration"
                )));
            }
        }
        exp.k_values = k_values;
        exp.trilateration = tri;
    }
    let cell_size = exp.cell_size.unwrap_or(cfg.net.settings.rem_cell_size);
    let transmitters: Vec<_> = cfg.cells().iter().map(|c| c.transmitter()).collect();
    let results = collect(parallel_map(&opts.seeds, opts.threads, |&seed| {
        locate::evaluate_positioning(&cfg.factory.layout, &transmitters, &exp, cell_size, seed)
    }))?;
    let mut errors = locate::error_table(opts.seeds[0], &results[0]);
    let mut summary_rows = Vec::new();
    for (&seed, r) in opts.seeds.iter().zip(&results) {
        if seed != opts.seeds[0] {
            errors.extend(locate::error_table(seed, r))?;
        }
        summary_rows.extend(r.iter().cloned().map(|m| (seed, m)));
    }
    out.table("positioning_errors.csv", &errors)?;
    out.table("positioning_summary.csv", &locate::summary_table(&summary_rows))?;
    if let Some(fexp) = &cfg.experiment.fusion {
        let cells = cfg.cells();
        let fcell = fexp.cell_size.unwrap_or(cfg.net.settings.rem_cell_size);
        let runs = collect(parallel_map(&opts.seeds, opts.threads, |&seed| {
            fusion::run_fusion(&cfg.factory.layout, &cells, fexp, fcell, seed)
        }))?;
        out.table("rem_fusion.csv", &fusion::summary_table(&runs))?;
        out.write("rem_fused.csv", &runs[0].fused.to_csv())?;
    }
    Ok(())
}

fn run_monitor(cfg: &ScenarioConfig, opts: &RunOptions, out: &mut Outputs) -> Result<()> {
    let exp = cfg.experiment.monitor.clone().ok_or_else(|| missing("experiment.monitor"))?;
    let spec = cfg.network_spec();
    let runs = collect(parallel_map(&opts.seeds, opts.threads, |&seed| {
        monitor::run_monitor(&cfg.factory, &spec, &exp, seed)
    }))?;
    out.table("monitor_estimates.csv", &monitor::estimates_table(&runs))?;
    out.table("monitor_summary.csv", &monitor::summary_table(&runs))?;
    // One encoded window per monitored region, for visual inspection.
    let cycle_s = cfg.factory.cycle.length;
    let series = monitor::region_series(&cfg.factory, &spec, &exp.monitored, exp.bin_ms, cycle_s, opts.seeds[0])?;
    let mut gaf = CsvTable::new("monitor-gaf v1", &["region", "i", "j", "value"]);
    for s in &series {
        let w = exp.window_bins.min(s.values.len());
        let g = gaf_encode(&s.values[..w])?;
        for i in 0..g.n {
            for j in 0..g.n {
                gaf.push(vec![s.region_id.clone(), i.to_string(), j.to_string(), fmt_f64(g.get(i, j))]);
            }
        }
    }
    out.table("monitor_gaf.csv", &gaf)
}

/// Runs `command` for every seed, writes its outputs under `out_dir`, and
/// always finishes with a manifest, including when the pipeline fails.
pub fn run(
    cfg: &ScenarioConfig,
    config_text: &str,
    command: Command,
    opts: &RunOptions,
    out_dir: &Path,
) -> Result<RunManifest> {
    let mut out = Outputs {
        dir: out_dir.to_path_buf(),
        files: Vec::new(),
    };
    let result = if opts.seeds.is_empty() {
        Err(Error::InvalidArgument("no seeds to run".into()))
    } else {
        match command {
            Command::Offload => run_offload(cfg, opts, &mut out),
            Command::Slicing => run_slicing(cfg, opts, &mut out),
            Command::Locate => run_locate(cfg, opts, &mut out),
            Command::Monitor => run_monitor(cfg, opts, &mut out),
        }
    };
    let manifest = RunManifest {
        artifact_version: ARTIFACT_VERSION.to_string(),
        command: command.to_string(),
        scenario: cfg.name.clone(),
        config_sha256: sha256_hex(config_text.as_bytes()),
        seeds: opts.seeds.clone(),
        policies: opts.policies.clone(),
        episodes: opts.episodes,
        status: if result.is_ok() { "ok" } else { "error" }.to_string(),
        error: result.as_ref().err().map(|e| e.to_string()),
        files: out.files.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_text(&out_dir.join(MANIFEST_FILE), &json)?;
    result.map(|()| manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stat {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        if n == 0 {
            return Stat {
                n,
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Stat { n, mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub group: String,
    pub metrics: BTreeMap<String, Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub schema: Option<String>,
    pub group_by: Vec<String>,
    pub groups: Vec<GroupSummary>,
}

/// Groups the rows of CSV texts that share one schema by the values of
/// `group_by`, summarizing every other numeric column except `seed`.
pub fn compare(texts: &[String], group_by: &[String]) -> Result<Comparison> {
    let mut parsed = texts.iter().map(|t| parse_csv(t)).collect::<Result<Vec<_>>>()?;
    let first = parsed
        .first()
        .ok_or_else(|| Error::InvalidArgument("no metrics files to compare".into()))?
        .clone();
    for p in &parsed[1..] {
        if p.columns != first.columns || p.schema != first.schema {
            return Err(Error::SchemaMismatch(format!(
                "`{}` vs `{}`",
                p.schema.clone().unwrap_or_default(),
                first.schema.clone().unwrap_or_default()
            )));
        }
    }
    let col = |name: &str| {
        first
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::SchemaMismatch(format!("no column `{name}`")))
    };
    let keys = group_by.iter().map(|g| col(g)).collect::<Result<Vec<_>>>()?;
    let rows: Vec<Vec<String>> = parsed.iter_mut().flat_map(|p| std::mem::take(&mut p.rows)).collect();
    let value_cols: Vec<usize> = (0..first.columns.len())
        .filter(|i| !keys.contains(i) && first.columns[*i] != "seed")
        .filter(|&i| rows.iter().any(|r| r[i].parse::<f64>().is_ok()))
        .collect();
    let mut grouped: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for r in &rows {
        let g = keys.iter().map(|&k| r[k].as_str()).collect::<Vec<_>>().join("/");
        let entry = grouped.entry(g).or_default();
        for &c in &value_cols {
            let values = entry.entry(first.columns[c].clone()).or_default();
            if let Ok(v) = r[c].parse::<f64>() {
                values.push(v);
            }
        }
    }
    Ok(Comparison {
        schema: first.schema,
        group_by: group_by.to_vec(),
        groups: grouped
            .into_iter()
            .map(|(group, m)| GroupSummary {
                group,
                metrics: m.into_iter().map(|(k, v)| (k, Stat::of(&v))).collect(),
            })
            .collect(),
    })
}

impl Comparison {
    /// Plain-text table: one row per group, `mean ± std` per metric.
    pub fn render(&self) -> String {
        let metrics: Vec<&String> = self.groups.first().map(|g| g.metrics.keys().collect()).unwrap_or_default();
        let mut header = vec![self.group_by.join("/")];
        header.extend(metrics.iter().map(|m| m.to_string()));
        let mut lines = vec![header];
        for g in &self.groups {
            let mut row = vec![g.group.clone()];
            for m in &metrics {
                row.push(g.metrics.get(*m).map_or_else(
                    || "-".to_string(),
                    |s| format!("{} ± {}", fmt_f64(s.mean), fmt_f64(s.std)),
                ));
            }
            lines.push(row);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for l in &lines {
            let cells: Vec<String> = l.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv(rows: &[(&str, u64, f64)]) -> String {
        let mut t = CsvTable::new("m v1", &["policy", "seed", "x"]);
        for (p, s, x) in rows {
            t.push(vec![p.to_string(), s.to_string(), fmt_f64(*x)]);
        }
        t.render()
    }

    #[test]
    fn compare_single_and_pair() {
        let c = compare(&[csv(&[("a", 1, 7.0)])], &["policy".into()]).unwrap();
        assert_eq!(c.groups[0].metrics["x"], Stat { n: 1, mean: 7.0, std: 0.0 });
        let c = compare(&[csv(&[("a", 1, 10.0)]), csv(&[("a", 2, 20.0)])], &["policy".into()]).unwrap();
        let s = &c.groups[0].metrics["x"];
        assert_eq!((s.mean, s.std), (15.0, 5.0));
    }

    #[test]
    fn compare_orders_groups_and_rejects_mixed_schemas() {
        let c = compare(&[csv(&[("b", 1, 1.0), ("a", 1, 2.0)])], &["policy".into()]).unwrap();
        let names: Vec<_> = c.groups.iter().map(|g| g.group.as_str()).collect();
        assert_eq!(names, ["a", "b"]);
        let other = CsvTable::new("n v1", &["policy", "seed", "x"]).render();
        assert!(matches!(
            compare(&[csv(&[("a", 1, 1.0)]), other], &["policy".into()]),
            Err(Error::SchemaMismatch(_))
        ));
        assert!(compare(&[csv(&[("a", 1, 1.0)])], &["nope".into()]).is_err());
    }

    #[test]
    fn parallel_map_keeps_order() {
        let xs: Vec<u64> = (0..50).collect();
        assert_eq!(parallel_map(&xs, 4, |x| x * 2), xs.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn seeds() {
        assert_eq!(seed_list(5, 3), vec![5, 6, 7]);
        assert_eq!(seed_list(5, 0), vec![5]);
    }
}
