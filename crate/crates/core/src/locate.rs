//! Indoor positioning from per-transmitter RSS: fingerprint k-NN over radio
//! environment maps and least-squares trilateration on inverted path loss.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factory::{FactoryLayout, Point, Rect};
use crate::output::{fmt_f64, CsvTable};
use crate::radio::{build_model_rem, MeanRss, ModelRss, PropagationParams, RadioEnvironmentMap, Transmitter};
use crate::sim::{rng_stream, streams};

/// Reference positions with the RSS vector seen there, one component per
/// transmitter in `transmitters` order.
#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintDb {
    pub transmitters: Vec<String>,
    pub positions: Vec<Point>,
    pub vectors: Vec<Vec<f64>>,
}

impl FingerprintDb {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// One entry per `stride`-th grid center in both axes.
pub fn build_fingerprint_db(rems: &[RadioEnvironmentMap], stride: usize) -> Result<FingerprintDb> {
    let first = rems
        .first()
        .ok_or_else(|| Error::InvalidArgument("fingerprint database needs at least one map".into()))?;
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    if let Some(bad) = rems.iter().find(|r| !r.grid.congruent(&first.grid)) {
        return Err(Error::GridMismatch(format!(
            "map for `{}` is not congruent with `{}`",
            bad.transmitter_id, first.transmitter_id
        )));
    }
    let g = first.grid;
    let mut db = FingerprintDb {
        transmitters: rems.iter().map(|r| r.transmitter_id.clone()).collect(),
        positions: Vec::new(),
        vectors: Vec::new(),
    };
    for iy in (0..g.ny).step_by(stride) {
        for ix in (0..g.nx).step_by(stride) {
            db.positions.push(g.center(ix, iy));
            db.vectors.push(rems.iter().map(|r| r.value(ix, iy)).collect());
        }
    }
    Ok(db)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Knn(usize),
    Trilateration,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Knn(k) => write!(f, "knn-k{k}"),
            Method::Trilateration => write!(f, "trilateration"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionEstimate {
    pub position: Point,
    pub method: Method,
}

fn db_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Inverse-distance-weighted centroid of the `k` entries closest in dB
/// space. Equal distances are ordered by entry index; an exact match
/// returns that entry's position.
pub fn fingerprint_knn(db: &FingerprintDb, observed: &[f64], k: usize) -> Result<PositionEstimate> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > db.len() {
        return Err(Error::KTooLarge { k, available: db.len() });
    }
    if observed.len() != db.transmitters.len() {
        return Err(Error::InvalidArgument(format!(
            "observed vector has {} values for {} transmitters",
            observed.len(),
            db.transmitters.len()
        )));
    }
    let mut scored: Vec<(f64, usize)> = db
        .vectors
        .iter()
        .enumerate()
        .map(|(i, v)| (db_distance(v, observed), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    let method = Method::Knn(k);
    if scored[0].0 == 0.0 {
        return Ok(PositionEstimate {
            position: db.positions[scored[0].1],
            method,
        });
    }
    let (mut wx, mut wy, mut wsum) = (0.0, 0.0, 0.0);
    for &(d, i) in &scored {
        let w = 1.0 / d;
        wx += w * db.positions[i].x;
        wy += w * db.positions[i].y;
        wsum += w;
    }
    Ok(PositionEstimate {
        position: Point::new(wx / wsum, wy / wsum),
        method,
    })
}

/// Inverts the log-distance law, clamped to `[d_min, max_distance]`.
pub fn rss_to_distance(rss: f64, p: &PropagationParams, max_distance: f64) -> f64 {
    let d = p.d0 * 10f64.powf((p.tx_power - rss - p.pl0) / (10.0 * p.exponent));
    d.max(p.d_min).min(max_distance)
}

/// Linear least squares after subtracting the first anchor's circle
/// equation from the others; the result is clamped to `bounds`.
pub fn trilaterate(anchors: &[Point], distances: &[f64], bounds: &Rect) -> Result<PositionEstimate> {
    if anchors.len() != distances.len() {
        return Err(Error::InvalidArgument(format!(
            "{} anchors with {} distances",
            anchors.len(),
            distances.len()
        )));
    }
    if anchors.len() < 3 {
        return Err(Error::CollinearAnchors);
    }
    let (p0, d0) = (anchors[0], distances[0]);
    let (mut a11, mut a12, mut a22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (p, &d) in anchors.iter().zip(distances).skip(1) {
        let ax = 2.0 * (p.x - p0.x);
        let ay = 2.0 * (p.y - p0.y);
        let rhs = d0 * d0 - d * d + p.x * p.x - p0.x * p0.x + p.y * p.y - p0.y * p0.y;
        a11 += ax * ax;
        a12 += ax * ay;
        a22 += ay * ay;
        b1 += ax * rhs;
        b2 += ay * rhs;
    }
    let det = a11 * a22 - a12 * a12;
    if det.abs() <= 1e-9 * (a11 * a22).max(f64::MIN_POSITIVE) {
        return Err(Error::CollinearAnchors);
    }
    let x = (a22 * b1 - a12 * b2) / det;
    let y = (a11 * b2 - a12 * b1) / det;
    Ok(PositionEstimate {
        position: bounds.clamp(Point::new(x, y)),
        method: Method::Trilateration,
    })
}

/// Settings of `[experiment.locate]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocateExperiment {
    pub stride: usize,
    pub k_values: Vec<usize>,
    pub trilateration: bool,
    pub queries: usize,
    /// i.i.d. Gaussian noise added to each observed RSS (dB).
    pub noise_sigma: f64,
    /// Map cell size; the network's REM cell size when unset.
    pub cell_size: Option<f64>,
}

impl Default for LocateExperiment {
    fn default() -> Self {
        LocateExperiment {
            stride: 1,
            k_values: vec![1, 4, 8],
            trilateration: true,
            queries: 500,
            noise_sigma: 2.0,
            cell_size: None,
        }
    }
}

impl LocateExperiment {
    pub fn methods(&self) -> Vec<Method> {
        let mut m: Vec<Method> = self.k_values.iter().map(|&k| Method::Knn(k)).collect();
        if self.trilateration {
            m.push(Method::Trilateration);
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositioningSample {
    pub query: usize,
    pub truth: Point,
    pub estimate: Point,
    pub error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSummary {
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
}

/// Linear-interpolated quantile of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn summarize(errors: &[f64]) -> ErrorSummary {
    ErrorSummary {
        mean: errors.iter().sum::<f64>() / errors.len().max(1) as f64,
        median: quantile(errors, 0.5),
        p90: quantile(errors, 0.9),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub method: Method,
    pub samples: Vec<PositioningSample>,
    pub summary: ErrorSummary,
}

/// Queries uniform over the floor; each observes the true model RSS of every
/// transmitter plus Gaussian noise and is located by every method.
pub fn evaluate_positioning(
    layout: &FactoryLayout,
    transmitters: &[Transmitter],
    exp: &LocateExperiment,
    cell_size: f64,
    seed: u64,
) -> Result<Vec<MethodResult>> {
    let methods = exp.methods();
    if methods.is_empty() {
        return Err(Error::InvalidArgument("no positioning methods selected".into()));
    }
    let rems = transmitters
        .iter()
        .map(|t| build_model_rem(layout, t, cell_size))
        .collect::<Result<Vec<_>>>()?;
    let db = build_fingerprint_db(&rems, exp.stride)?;
    let anchors: Vec<Point> = transmitters.iter().map(|t| t.position).collect();
    let diag = layout.bounds.diagonal();
    let b = layout.bounds;
    let mut queries = rng_stream(seed, streams::QUERIES);
    let mut noise = rng_stream(seed, streams::MEASUREMENT);
    let mut results: Vec<MethodResult> = methods
        .iter()
        .map(|&m| MethodResult {
            method: m,
            samples: Vec::with_capacity(exp.queries),
            summary: summarize(&[]),
        })
        .collect();
    for q in 0..exp.queries {
        let truth = Point::new(
            b.min.x + queries.uniform() * b.width(),
            b.min.y + queries.uniform() * b.height(),
        );
        let observed = transmitters
            .iter()
            .map(|t| {
                let mean = ModelRss { layout, transmitter: t }.mean_rss(truth)?;
                Ok(mean + exp.noise_sigma * noise.normal())
            })
            .collect::<Result<Vec<f64>>>()?;
        for r in &mut results {
            let est = match r.method {
                Method::Knn(k) => fingerprint_knn(&db, &observed, k)?,
                Method::Trilateration => {
                    let d: Vec<f64> = observed
                        .iter()
                        .zip(transmitters)
                        .map(|(&rss, t)| rss_to_distance(rss, &t.params, diag))
                        .collect();
                    trilaterate(&anchors, &d, &b)?
                }
            };
            let position = b.clamp(est.position);
            r.samples.push(PositioningSample {
                query: q,
                truth,
                estimate: position,
                error: truth.distance(position),
            });
        }
    }
    for r in &mut results {
        let e: Vec<f64> = r.samples.iter().map(|s| s.error).collect();
        r.summary = summarize(&e);
    }
    Ok(results)
}

pub fn error_table(seed: u64, results: &[MethodResult]) -> CsvTable {
    let mut t = CsvTable::new(
        "positioning-errors v1",
        &["seed", "method", "query", "true_x", "true_y", "est_x", "est_y", "error_m"],
    );
    for r in results {
        for s in &r.samples {
            t.push(vec![
                seed.to_string(),
                r.method.to_string(),
                s.query.to_string(),
                fmt_f64(s.truth.x),
                fmt_f64(s.truth.y),
                fmt_f64(s.estimate.x),
                fmt_f64(s.estimate.y),
                fmt_f64(s.error),
            ]);
        }
    }
    t
}

pub fn summary_table(rows: &[(u64, MethodResult)]) -> CsvTable {
    let mut t = CsvTable::new(
        "positioning-summary v1",
        &["seed", "method", "mean_error_m", "median_error_m", "p90_error_m"],
    );
    for (seed, r) in rows {
        t.push(vec![
            seed.to_string(),
            r.method.to_string(),
            fmt_f64(r.summary.mean),
            fmt_f64(r.summary.median),
            fmt_f64(r.summary.p90),
        ]);
    }
    t
}
