//! Map-quality experiment: a synthetic ground truth that the propagation
//! model only partly captures, noisy probe measurements, and held-out RMSE
//! of the model, measured and fused maps.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use super::{build_measured_rem, build_model_rem, fuse_rem, rmse, MeanRss, ModelRss, RadioEnvironmentMap, RssSample};
use crate::error::{Error, Result};
use crate::factory::{FactoryLayout, Point, Wall};
use crate::net::Cell;
use crate::output::{fmt_f64, CsvTable};
use crate::sim::{rng_stream, streams, RngStream};

/// Settings of `[experiment.fusion]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionExperiment {
    /// Cell whose map is estimated.
    pub transmitter: String,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    /// Measurement noise per probe (dB).
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    /// Static spatially correlated deviation of the truth from the model.
    #[serde(default = "default_field_sigma")]
    pub field_sigma: f64,
    #[serde(default = "default_field_corr")]
    pub field_correlation_m: f64,
    /// Obstacles present in the truth but absent from the model.
    #[serde(default)]
    pub unmodeled_walls: Vec<Wall>,
    /// Path-loss exponent of the truth; the model's when unset.
    #[serde(default)]
    pub true_exponent: Option<f64>,
    #[serde(default = "default_idw_power")]
    pub idw_power: f64,
    /// Candidate kernel bandwidths (m); chosen by k-fold cross-validation on
    /// the training probes.
    #[serde(default = "default_bandwidths")]
    pub bandwidths: Vec<f64>,
    #[serde(default = "default_folds")]
    pub cv_folds: usize,
    /// Map cell size; the network's REM cell size when unset.
    #[serde(default)]
    pub cell_size: Option<f64>,
}

fn default_probes() -> usize {
    300
}
fn default_holdout() -> f64 {
    0.3
}
fn default_noise() -> f64 {
    1.0
}
fn default_field_sigma() -> f64 {
    3.0
}
fn default_field_corr() -> f64 {
    6.0
}
fn default_idw_power() -> f64 {
    2.0
}
fn default_bandwidths() -> Vec<f64> {
    vec![0.0, 0.5, 1.0, 2.0, 3.0, 5.0, 8.0, f64::INFINITY]
}
fn default_folds() -> usize {
    5
}

impl FusionExperiment {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.probes < 4 {
            return Err("probes must be at least 4".into());
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err("holdout_fraction must lie in (0, 1)".into());
        }
        if !(self.noise_sigma >= 0.0 && self.field_sigma >= 0.0) {
            return Err("noise_sigma and field_sigma must be non-negative".into());
        }
        if !(self.field_correlation_m > 0.0) {
            return Err("field_correlation_m must be positive".into());
        }
        if self.bandwidths.is_empty() || self.bandwidths.iter().any(|b| !(*b >= 0.0)) {
            return Err("bandwidths must be a non-empty list of non-negative values".into());
        }
        if self.cv_folds < 2 {
            return Err("cv_folds must be at least 2".into());
        }
        Ok(())
    }
}

const FIELD_TERMS: usize = 64;

/// Stationary Gaussian random field with squared-exponential covariance,
/// approximated by random Fourier features.
#[derive(Debug, Clone)]
pub struct CorrelatedField {
    sigma: f64,
    terms: Vec<(f64, f64, f64)>,
}

impl CorrelatedField {
    pub fn new(sigma: f64, correlation_m: f64, rng: &mut RngStream) -> Self {
        let terms = (0..FIELD_TERMS)
            .map(|_| {
                let wx = rng.normal() / correlation_m;
                let wy = rng.normal() / correlation_m;
                (wx, wy, rng.uniform() * TAU)
            })
            .collect();
        CorrelatedField { sigma, terms }
    }

    pub fn at(&self, p: Point) -> f64 {
        let s: f64 = self.terms.iter().map(|&(wx, wy, b)| (wx * p.x + wy * p.y + b).cos()).sum();
        self.sigma * (2.0 / FIELD_TERMS as f64).sqrt() * s
    }
}

/// True mean RSS: the model with extra walls and exponent, plus the field.
pub struct TruthRss<'a> {
    layout: FactoryLayout,
    transmitter: super::Transmitter,
    field: &'a CorrelatedField,
}

impl MeanRss for TruthRss<'_> {
    fn mean_rss(&self, pos: Point) -> Result<f64> {
        let base = ModelRss {
            layout: &self.layout,
            transmitter: &self.transmitter,
        }
        .mean_rss(pos)?;
        Ok(base + self.field.at(pos))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionRun {
    pub seed: u64,
    pub bandwidth: f64,
    pub rmse_model: f64,
    pub rmse_measured: f64,
    pub rmse_fused: f64,
    pub fused: RadioEnvironmentMap,
}

fn holdout_rmse(map: &RadioEnvironmentMap, probes: &[RssSample]) -> Result<f64> {
    let errs = probes
        .iter()
        .map(|p| Ok(map.interpolate(p.position)? - p.rss))
        .collect::<Result<Vec<f64>>>()?;
    Ok(rmse(errs))
}

fn fused_map(
    model: &RadioEnvironmentMap,
    train: &[RssSample],
    layout: &FactoryLayout,
    cell_size: f64,
    exp: &FusionExperiment,
    bandwidth: f64,
) -> Result<RadioEnvironmentMap> {
    let measured = build_measured_rem(train, &model.transmitter_id, layout, cell_size, exp.idw_power)?;
    fuse_rem(model, &measured, train, bandwidth)
}

/// Cross-validated bandwidth; ties keep the earlier candidate.
fn select_bandwidth(
    model: &RadioEnvironmentMap,
    train: &[RssSample],
    layout: &FactoryLayout,
    cell_size: f64,
    exp: &FusionExperiment,
) -> Result<f64> {
    let folds = exp.cv_folds.min(train.len());
    let mut best = (f64::INFINITY, exp.bandwidths[0]);
    for &bw in &exp.bandwidths {
        let mut sq = 0.0;
        for f in 0..folds {
            let (fit, val): (Vec<_>, Vec<_>) = train.iter().enumerate().partition(|(i, _)| i % folds != f);
            let fit: Vec<RssSample> = fit.into_iter().map(|(_, s)| s.clone()).collect();
            let val: Vec<RssSample> = val.into_iter().map(|(_, s)| s.clone()).collect();
            let map = fused_map(model, &fit, layout, cell_size, exp, bw)?;
            sq += holdout_rmse(&map, &val)?.powi(2) * val.len() as f64;
        }
        let score = (sq / train.len() as f64).sqrt();
        if score < best.0 {
            best = (score, bw);
        }
    }
    Ok(best.1)
}

pub fn run_fusion(layout: &FactoryLayout, cells: &[Cell], exp: &FusionExperiment, cell_size: f64, seed: u64) -> Result<FusionRun> {
    let cell = cells
        .iter()
        .find(|c| c.id == exp.transmitter)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown transmitter `{}`", exp.transmitter)))?;
    let tx = cell.transmitter();
    let model = build_model_rem(layout, &tx, cell_size)?;

    let mut true_layout = layout.clone();
    true_layout.walls.extend(exp.unmodeled_walls.iter().cloned());
    let mut true_tx = tx.clone();
    if let Some(n) = exp.true_exponent {
        true_tx.params.exponent = n;
    }
    let field = CorrelatedField::new(exp.field_sigma, exp.field_correlation_m, &mut rng_stream(seed, streams::SHADOWING));
    let truth = TruthRss {
        layout: true_layout,
        transmitter: true_tx,
        field: &field,
    };

    let mut pos_rng = rng_stream(seed, streams::QUERIES);
    let mut noise = rng_stream(seed, streams::MEASUREMENT);
    let b = layout.bounds;
    let probes = (0..exp.probes)
        .map(|_| {
            let p = Point::new(b.min.x + pos_rng.uniform() * b.width(), b.min.y + pos_rng.uniform() * b.height());
            Ok(RssSample {
                position: p,
                transmitter_id: tx.id.clone(),
                rss: truth.mean_rss(p)? + exp.noise_sigma * noise.normal(),
                t: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n_test = ((exp.probes as f64 * exp.holdout_fraction).round() as usize).clamp(1, exp.probes - 1);
    let (train, test) = probes.split_at(exp.probes - n_test);

    let measured = build_measured_rem(train, &tx.id, layout, cell_size, exp.idw_power)?;
    let bandwidth = select_bandwidth(&model, train, layout, cell_size, exp)?;
    let fused = fuse_rem(&model, &measured, train, bandwidth)?;
    Ok(FusionRun {
        seed,
        bandwidth,
        rmse_model: holdout_rmse(&model, test)?,
        rmse_measured: holdout_rmse(&measured, test)?,
        rmse_fused: holdout_rmse(&fused, test)?,
        fused,
    })
}

pub fn summary_table(runs: &[FusionRun]) -> CsvTable {
    let mut t = CsvTable::new(
        "rem-fusion v1",
        &["seed", "bandwidth_m", "rmse_model_db", "rmse_measured_db", "rmse_fused_db"],
    );
    for r in runs {
        t.push(vec![
            r.seed.to_string(),
            fmt_f64(r.bandwidth),
            fmt_f64(r.rmse_model),
            fmt_f64(r.rmse_measured),
            fmt_f64(r.rmse_fused),
        ]);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_has_configured_spread_and_correlation() {
        let f = CorrelatedField::new(3.0, 5.0, &mut rng_stream(9, streams::SHADOWING));
        let mut pts = rng_stream(1, streams::QUERIES);
        // Average over many far-apart locations: variance close to sigma^2.
        let vals: Vec<f64> = (0..4000)
            .map(|_| f.at(Point::new(pts.uniform() * 5000.0, pts.uniform() * 5000.0)))
            .collect();
        let var = vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64;
        assert!((var.sqrt() - 3.0).abs() < 0.6, "std {}", var.sqrt());
        let a = f.at(Point::new(10.0, 10.0));
        let b = f.at(Point::new(10.05, 10.0));
        assert!((a - b).abs() < 0.2);
    }

    #[test]
    fn zero_sigma_field_vanishes() {
        let f = CorrelatedField::new(0.0, 5.0, &mut rng_stream(2, streams::SHADOWING));
        assert_eq!(f.at(Point::new(3.0, 4.0)), 0.0);
    }
}
