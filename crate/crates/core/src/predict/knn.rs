use serde::{Deserialize, Serialize};

use super::{mean_std, Prediction, PredictorQuery, TrainingPoint, TrainingSet};
use crate::error::{Error, Result};
use crate::factory::Point;
use crate::flatfile::FlatFile;

/// Multipliers applied to each feature before the Euclidean distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureScales {
    pub xy: f64,
    pub phase: f64,
}

impl Default for FeatureScales {
    fn default() -> Self {
        FeatureScales { xy: 0.1, phase: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    pub k: usize,
    pub z: f64,
    pub scales: FeatureScales,
    pub phases: u32,
    points: Vec<TrainingPoint>,
}

pub fn knn_fit(train: &TrainingSet, k: usize, scales: FeatureScales, z: f64) -> Result<KnnModel> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if k > train.len() {
        return Err(Error::KTooLarge {
            k,
            available: train.len(),
        });
    }
    if train.phases == 0 {
        return Err(Error::InvalidArgument("training set has zero phases".into()));
    }
    Ok(KnnModel {
        k,
        z,
        scales,
        phases: train.phases,
        points: train.points.clone(),
    })
}

/// Cyclic distance between two phases of a `p`-phase cycle.
pub fn phase_distance(a: u32, b: u32, p: u32) -> u32 {
    let d = a.abs_diff(b) % p;
    d.min(p - d)
}

impl KnnModel {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn distance(&self, position: Point, phase: u32, tp: &TrainingPoint) -> f64 {
        let dx = (position.x - tp.position.x) * self.scales.xy;
        let dy = (position.y - tp.position.y) * self.scales.xy;
        let dp = phase_distance(phase, tp.phase, self.phases) as f64 * self.scales.phase;
        (dx * dx + dy * dy + dp * dp).sqrt()
    }

    /// Training indices of the k nearest points, nearest first. Equal
    /// distances are ordered by training index.
    pub fn neighbors(&self, position: Point, phase: u32) -> Vec<usize> {
        let mut scored: Vec<(f64, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, tp)| (self.distance(position, phase, tp), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if self.k < scored.len() {
            scored.select_nth_unstable_by(self.k - 1, cmp);
            scored.truncate(self.k);
        }
        scored.sort_by(cmp);
        scored.into_iter().map(|(_, i)| i).collect()
    }

    pub fn save(&self) -> FlatFile {
        let mut f = FlatFile::new("knn");
        f.scalar("k", self.k as f64)
            .scalar("z", self.z)
            .scalar("scale_xy", self.scales.xy)
            .scalar("scale_phase", self.scales.phase)
            .scalar("phases", self.phases as f64)
            .array("x", self.points.iter().map(|p| p.position.x).collect())
            .array("y", self.points.iter().map(|p| p.position.y).collect())
            .array("phase", self.points.iter().map(|p| p.phase as f64).collect())
            .array("label", self.points.iter().map(|p| p.label).collect());
        f
    }

    pub fn load(file: &FlatFile) -> Result<Self> {
        file.expect_kind("knn")?;
        let (x, y) = (file.get_array("x")?, file.get_array("y")?);
        let (phase, label) = (file.get_array("phase")?, file.get_array("label")?);
        if y.len() != x.len() || phase.len() != x.len() || label.len() != x.len() {
            return Err(Error::ModelFormat("knn arrays differ in length".into()));
        }
        let mut train = TrainingSet::new(file.get_scalar("phases")? as u32);
        for i in 0..x.len() {
            train.push(Point::new(x[i], y[i]), phase[i] as u32, label[i])?;
        }
        let scales = FeatureScales {
            xy: file.get_scalar("scale_xy")?,
            phase: file.get_scalar("scale_phase")?,
        };
        knn_fit(&train, file.get_scalar("k")? as usize, scales, file.get_scalar("z")?)
    }
}

pub fn knn_predict(model: &KnnModel, query: &PredictorQuery) -> Result<Prediction> {
    let labels = model
        .neighbors(query.position, query.cycle_phase)
        .into_iter()
        .map(|i| model.points[i].label);
    let (mean, std) = mean_std(labels);
    Ok(Prediction {
        mean_min_throughput: mean,
        margin: model.z.abs() * std,
        horizon: query.horizon,
    })
}
