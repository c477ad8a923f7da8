//! Uplink-throughput predictors for offloading decisions.
//!
//! Every predictor answers the same question: what is the minimum uplink
//! throughput over the next `horizon` seconds, and how uncertain is that
//! estimate? The uncertainty is an empirical spread (`margin`), which the
//! offloading policy subtracts from the mean.

mod ar;
mod forest;
mod knn;

pub use ar::{ar_fit, ar_predict, ArModel};
pub use forest::{forest_fit, forest_predict, ForestModel, ForestParams};
pub use knn::{knn_fit, knn_predict, phase_distance, FeatureScales, KnnModel};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factory::Point;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorQuery {
    pub position: Point,
    pub cycle_phase: u32,
    /// Most recent uplink throughput observations (bit/s), oldest first.
    pub recent: Vec<f64>,
    /// Seconds.
    pub horizon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Predicted minimum throughput over the horizon, bit/s.
    pub mean_min_throughput: f64,
    /// Non-negative uncertainty, bit/s.
    pub margin: f64,
    pub horizon: f64,
}

impl Prediction {
    pub fn exact(value: f64, horizon: f64) -> Self {
        Prediction {
            mean_min_throughput: value,
            margin: 0.0,
            horizon,
        }
    }

    /// Conservative estimate used by the offloading policy.
    pub fn lower(&self) -> f64 {
        self.mean_min_throughput - self.margin
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingPoint {
    pub position: Point,
    pub phase: u32,
    /// Realized minimum throughput over the following horizon.
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingSet {
    /// Phase count P, needed for the cyclic phase distance.
    pub phases: u32,
    pub points: Vec<TrainingPoint>,
}

impl TrainingSet {
    pub fn new(phases: u32) -> Self {
        TrainingSet {
            phases,
            points: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, position: Point, phase: u32, label: f64) -> Result<()> {
        if !(label >= 0.0) {
            return Err(Error::InvalidArgument(format!("label {label} must be non-negative")));
        }
        self.points.push(TrainingPoint {
            position,
            phase,
            label,
        });
        Ok(())
    }
}

/// Regularly sampled throughput: sample `i` covers
/// `[start + i*interval, start + (i+1)*interval)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputTrace {
    pub start: f64,
    pub interval: f64,
    pub values: Vec<f64>,
}

impl ThroughputTrace {
    pub fn index_at(&self, t: f64) -> usize {
        ((t - self.start) / self.interval).round().max(0.0) as usize
    }

    /// Index range of the samples in `[t, t + horizon)`; at least one sample.
    pub fn window(&self, t: f64, horizon: f64) -> Result<std::ops::Range<usize>> {
        let i0 = self.index_at(t);
        let n = ((horizon / self.interval).round() as usize).max(1);
        if t < self.start - 1e-9 || i0 + n > self.values.len() {
            return Err(Error::InsufficientCoverage {
                from: t,
                to: t + horizon,
            });
        }
        Ok(i0..i0 + n)
    }

    pub fn min_over(&self, t: f64, horizon: f64) -> Result<f64> {
        let w = self.window(t, horizon)?;
        Ok(self.values[w].iter().copied().fold(f64::INFINITY, f64::min))
    }
}

/// Last observed value, no margin.
pub fn predict_reactive(query: &PredictorQuery) -> Result<Prediction> {
    let last = *query.recent.last().ok_or(Error::EmptyHistory)?;
    Ok(Prediction::exact(last, query.horizon))
}

/// Exact minimum of the realized future.
pub fn predict_oracle(future: &ThroughputTrace, t: f64, horizon: f64) -> Result<Prediction> {
    Ok(Prediction::exact(future.min_over(t, horizon)?, horizon))
}

/// Common interface of the fitted, context-based predictors.
pub trait Predictor {
    fn predict(&self, query: &PredictorQuery) -> Result<Prediction>;
}

impl Predictor for KnnModel {
    fn predict(&self, query: &PredictorQuery) -> Result<Prediction> {
        knn_predict(self, query)
    }
}

impl Predictor for ForestModel {
    fn predict(&self, query: &PredictorQuery) -> Result<Prediction> {
        forest_predict(self, query)
    }
}

impl Predictor for ArModel {
    fn predict(&self, query: &PredictorQuery) -> Result<Prediction> {
        let steps = ((query.horizon / self.step_seconds).round() as usize).max(1);
        ar_predict(self, &query.recent, steps).map(|p| Prediction {
            horizon: query.horizon,
            ..p
        })
    }
}

pub(crate) fn mean_std(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.max(0.0).sqrt())
}

/// Rolling mean-absolute-error alarm. The predictor is flagged stale once
/// the mean error over a full window exceeds `factor` times the training
/// residual spread.
#[derive(Debug, Clone)]
pub struct DriftMonitor {
    window: usize,
    threshold: f64,
    errors: std::collections::VecDeque<f64>,
    sum: f64,
    stale: bool,
}

impl DriftMonitor {
    pub fn new(window: usize, training_residual_std: f64, factor: f64) -> Self {
        DriftMonitor {
            window: window.max(1),
            threshold: factor * training_residual_std,
            errors: std::collections::VecDeque::new(),
            sum: 0.0,
            stale: false,
        }
    }

    pub fn observe(&mut self, predicted: f64, realized: f64) -> bool {
        let e = (predicted - realized).abs();
        self.errors.push_back(e);
        self.sum += e;
        if self.errors.len() > self.window {
            self.sum -= self.errors.pop_front().unwrap_or(0.0);
        }
        if self.errors.len() == self.window && self.sum / self.window as f64 > self.threshold {
            self.stale = true;
        }
        self.stale
    }

    pub fn is_stale(&self) -> bool {
        self.stale
    }

    pub fn reset(&mut self) {
        self.errors.clear();
        self.sum = 0.0;
        self.stale = false;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn query(recent: Vec<f64>, horizon: f64) -> PredictorQuery {
        PredictorQuery {
            position: Point::new(0.0, 0.0),
            cycle_phase: 0,
            recent,
            horizon,
        }
    }

    #[test]
    fn reactive_is_last_value() {
        let p = predict_reactive(&query(vec![10e6, 50e6], 3.0)).unwrap();
        assert_eq!(p.mean_min_throughput, 50e6);
        assert_eq!(p.margin, 0.0);
        let q = predict_reactive(&query(vec![10e6, 50e6], 30.0)).unwrap();
        assert_eq!(q.mean_min_throughput, p.mean_min_throughput);
        assert!(matches!(predict_reactive(&query(vec![], 1.0)), Err(Error::EmptyHistory)));
    }

    #[test]
    fn oracle_is_window_minimum() {
        let trace = ThroughputTrace {
            start: 0.0,
            interval: 1.0,
            values: vec![40.0, 30.0, 50.0, 5.0],
        };
        assert_eq!(predict_oracle(&trace, 0.0, 3.0).unwrap().mean_min_throughput, 30.0);
        assert_eq!(predict_oracle(&trace, 2.0, 1.0).unwrap().mean_min_throughput, 50.0);
        assert!(matches!(
            predict_oracle(&trace, 2.0, 3.0),
            Err(Error::InsufficientCoverage { .. })
        ));
    }

    #[test]
    fn drift_alarm_trips_on_sustained_error() {
        let mut d = DriftMonitor::new(5, 1.0, 2.0);
        for _ in 0..10 {
            assert!(!d.observe(10.0, 11.0));
        }
        for _ in 0..5 {
            d.observe(10.0, 14.0);
        }
        assert!(d.is_stale());
        d.reset();
        assert!(!d.is_stale());
    }
}
