use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{mean_std, Prediction, PredictorQuery, TrainingSet};
use crate::error::{Error, Result};
use crate::flatfile::FlatFile;
use crate::sim::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestParams {
    pub trees: usize,
    /// `None` grows until leaves are pure or unsplittable.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub z: f64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            trees: 50,
            max_depth: Some(8),
            min_leaf: 2,
            z: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn eval(&self, f: &[f64; 3]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if f[feature] <= threshold { left } else { right },
            }
        }
    }
}

/// Bagged regression trees over `(x, y, phase)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub z: f64,
    trees: Vec<Tree>,
}

fn features(x: f64, y: f64, phase: u32) -> [f64; 3] {
    [x, y, phase as f64]
}

struct Builder<'a> {
    feats: &'a [[f64; 3]],
    labels: &'a [f64],
    max_depth: usize,
    min_leaf: usize,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn grow(&mut self, idx: &mut [usize], depth: usize) -> usize {
        let id = self.nodes.len();
        let n = idx.len() as f64;
        let mean = idx.iter().map(|&i| self.labels[i]).sum::<f64>() / n;
        self.nodes.push(Node::Leaf(mean));
        if depth >= self.max_depth || idx.len() < 2 * self.min_leaf.max(1) {
            return id;
        }
        let Some((feature, threshold)) = self.best_split(idx) else {
            return id;
        };
        idx.sort_by(|&a, &b| {
            self.feats[a][feature]
                .total_cmp(&self.feats[b][feature])
                .then(a.cmp(&b))
        });
        let cut = idx.partition_point(|&i| self.feats[i][feature] <= threshold);
        let (l, r) = idx.split_at_mut(cut);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    /// Threshold minimizing the summed squared error of both children.
    /// Returns `None` when no split reduces it.
    fn best_split(&self, idx: &[usize]) -> Option<(usize, f64)> {
        let n = idx.len();
        let total: f64 = idx.iter().map(|&i| self.labels[i]).sum();
        let total_sq: f64 = idx.iter().map(|&i| self.labels[i] * self.labels[i]).sum();
        let parent_sse = total_sq - total * total / n as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order = idx.to_vec();
        for feature in 0..3 {
            order.sort_by(|&a, &b| {
                self.feats[a][feature]
                    .total_cmp(&self.feats[b][feature])
                    .then(a.cmp(&b))
            });
            let (mut s, mut sq) = (0.0, 0.0);
            for pos in 0..n - 1 {
                let y = self.labels[order[pos]];
                s += y;
                sq += y * y;
                let (v, next) = (self.feats[order[pos]][feature], self.feats[order[pos + 1]][feature]);
                let nl = pos + 1;
                let nr = n - nl;
                if v == next || nl < self.min_leaf || nr < self.min_leaf {
                    continue;
                }
                let sse = (sq - s * s / nl as f64)
                    + ((total_sq - sq) - (total - s) * (total - s) / nr as f64);
                if best.map_or(true, |b| sse < b.0) {
                    best = Some((sse, feature, 0.5 * (v + next)));
                }
            }
        }
        let tol = 1e-12 * (1.0 + parent_sse.abs());
        best.filter(|b| b.0 < parent_sse - tol)
            .map(|(_, f, t)| (f, t))
    }
}

/// Fits `params.trees` trees. With more than one tree each is grown on a
/// bootstrap resample drawn from `rng`; a single tree sees the full set.
pub fn forest_fit(train: &TrainingSet, params: &ForestParams, rng: &mut RngStream) -> Result<ForestModel> {
    if train.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "forest needs at least 2 training points, got {}",
            train.len()
        )));
    }
    if params.trees == 0 {
        return Err(Error::InvalidArgument("forest needs at least one tree".into()));
    }
    let feats: Vec<[f64; 3]> = train
        .points
        .iter()
        .map(|p| features(p.position.x, p.position.y, p.phase))
        .collect();
    let labels: Vec<f64> = train.points.iter().map(|p| p.label).collect();
    if feats.iter().all(|f| *f == feats[0]) {
        let mean = labels.iter().sum::<f64>() / labels.len() as f64;
        return Ok(ForestModel {
            z: params.z,
            trees: vec![Tree {
                nodes: vec![Node::Leaf(mean)],
            }],
        });
    }
    let n = train.len();
    let mut trees = Vec::with_capacity(params.trees);
    for _ in 0..params.trees {
        let mut idx: Vec<usize> = if params.trees == 1 {
            (0..n).collect()
        } else {
            (0..n).map(|_| rng.gen_range(0..n)).collect()
        };
        let mut b = Builder {
            feats: &feats,
            labels: &labels,
            max_depth: params.max_depth.unwrap_or(usize::MAX),
            min_leaf: params.min_leaf.max(1),
            nodes: Vec::new(),
        };
        b.grow(&mut idx, 0);
        trees.push(Tree { nodes: b.nodes });
    }
    Ok(ForestModel { z: params.z, trees })
}

pub fn forest_predict(model: &ForestModel, query: &PredictorQuery) -> Result<Prediction> {
    let f = features(query.position.x, query.position.y, query.cycle_phase);
    let (mean, std) = mean_std(model.trees.iter().map(|t| t.eval(&f)));
    Ok(Prediction {
        mean_min_throughput: mean,
        margin: model.z.abs() * std,
        horizon: query.horizon,
    })
}

impl ForestModel {
    pub fn tree_count(&self) -> usize {
        self.trees.len()
    }

    /// Nodes are stored as flat rows `(kind, feature, threshold, left, right, value)`
    /// with `kind` 0 for a leaf and 1 for a split.
    pub fn save(&self) -> FlatFile {
        let mut f = FlatFile::new("forest");
        f.scalar("z", self.z).scalar("trees", self.trees.len() as f64);
        for (t, tree) in self.trees.iter().enumerate() {
            let mut rows = Vec::with_capacity(tree.nodes.len() * 6);
            for node in &tree.nodes {
                match *node {
                    Node::Leaf(v) => rows.extend([0.0, 0.0, 0.0, 0.0, 0.0, v]),
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => rows.extend([1.0, feature as f64, threshold, left as f64, right as f64, 0.0]),
                }
            }
            f.array(&format!("tree{t}"), rows);
        }
        f
    }

    pub fn load(file: &FlatFile) -> Result<Self> {
        file.expect_kind("forest")?;
        let count = file.get_scalar("trees")? as usize;
        let mut trees = Vec::with_capacity(count);
        for t in 0..count {
            let rows = file.get_array(&format!("tree{t}"))?;
            if rows.is_empty() || rows.len() % 6 != 0 {
                return Err(Error::ModelFormat(format!("tree{t} has malformed node rows")));
            }
            let n = rows.len() / 6;
            let mut nodes = Vec::with_capacity(n);
            for r in rows.chunks(6) {
                nodes.push(if r[0] == 0.0 {
                    Node::Leaf(r[5])
                } else {
                    let (left, right) = (r[3] as usize, r[4] as usize);
                    if left >= n || right >= n || r[1] as usize > 2 {
                        return Err(Error::ModelFormat(format!("tree{t} references a missing node")));
                    }
                    Node::Split {
                        feature: r[1] as usize,
                        threshold: r[2],
                        left,
                        right,
                    }
                });
            }
            trees.push(Tree { nodes });
        }
        Ok(ForestModel {
            z: file.get_scalar("z")?,
            trees,
        })
    }
}
