use super::{mean_std, Prediction};
use crate::error::{Error, Result};
use crate::flatfile::FlatFile;

/// Autoregressive model `x_t − μ = Σ a_i · (x_{t−i} − μ)` fitted by least
/// squares on the demeaned series. An empty coefficient vector is the AR(0)
/// fallback predicting `mean`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArModel {
    pub coefficients: Vec<f64>,
    pub mean: f64,
    pub residual_std: f64,
    pub z: f64,
    /// Seconds between trace samples; converts a horizon into rollout steps.
    pub step_seconds: f64,
}

impl ArModel {
    pub fn order(&self) -> usize {
        self.coefficients.len()
    }

    pub fn with_z(mut self, z: f64) -> Self {
        self.z = z;
        self
    }

    pub fn with_step(mut self, step_seconds: f64) -> Self {
        self.step_seconds = step_seconds;
        self
    }

    pub fn save(&self) -> FlatFile {
        let mut f = FlatFile::new("ar");
        f.array("coefficients", self.coefficients.clone())
            .scalar("mean", self.mean)
            .scalar("residual_std", self.residual_std)
            .scalar("z", self.z)
            .scalar("step_seconds", self.step_seconds);
        f
    }

    pub fn load(file: &FlatFile) -> Result<Self> {
        file.expect_kind("ar")?;
        Ok(ArModel {
            coefficients: file.get_array("coefficients")?.to_vec(),
            mean: file.get_scalar("mean")?,
            residual_std: file.get_scalar("residual_std")?,
            z: file.get_scalar("z")?,
            step_seconds: file.get_scalar("step_seconds")?,
        })
    }
}

/// Solves `a · x = b` in place by Gaussian elimination with partial
/// pivoting. Returns `None` for a (numerically) singular matrix.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = (0..n).map(|i| a[i][i].abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        return None;
    }
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

pub fn ar_fit(trace: &[f64], p: usize) -> Result<ArModel> {
    if trace.len() <= p {
        return Err(Error::InvalidArgument(format!(
            "trace of length {} is too short for AR({p})",
            trace.len()
        )));
    }
    let (mean, std) = mean_std(trace.iter().copied());
    let fallback = ArModel {
        coefficients: Vec::new(),
        mean,
        residual_std: std,
        z: 1.0,
        step_seconds: 1.0,
    };
    if p == 0 {
        return Ok(fallback);
    }
    let c: Vec<f64> = trace.iter().map(|v| v - mean).collect();
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xty = vec![0.0; p];
    for t in p..trace.len() {
        for i in 0..p {
            let xi = c[t - 1 - i];
            xty[i] += xi * c[t];
            for j in 0..p {
                xtx[i][j] += xi * c[t - 1 - j];
            }
        }
    }
    let Some(coefficients) = solve(xtx, xty) else {
        return Ok(fallback);
    };
    let residuals = (p..trace.len()).map(|t| {
        let fit: f64 = (0..p).map(|i| coefficients[i] * c[t - 1 - i]).sum();
        c[t] - fit
    });
    let (_, residual_std) = mean_std(residuals);
    Ok(ArModel {
        coefficients,
        mean,
        residual_std,
        ..fallback
    })
}

/// Rolls the model forward `steps` samples from `recent` (oldest first).
pub fn ar_predict(model: &ArModel, recent: &[f64], steps: usize) -> Result<Prediction> {
    let p = model.order();
    let horizon = steps as f64 * model.step_seconds;
    let margin = model.z.abs() * model.residual_std;
    if p == 0 {
        return Ok(Prediction {
            mean_min_throughput: model.mean,
            margin,
            horizon,
        });
    }
    if recent.len() < p {
        return Err(if recent.is_empty() {
            Error::EmptyHistory
        } else {
            Error::InvalidArgument(format!("AR({p}) needs {p} recent values, got {}", recent.len()))
        });
    }
    let mut window: Vec<f64> = recent[recent.len() - p..].iter().map(|v| v - model.mean).collect();
    let mut lowest = f64::INFINITY;
    for _ in 0..steps.max(1) {
        let next: f64 = (0..p).map(|i| model.coefficients[i] * window[p - 1 - i]).sum();
        lowest = lowest.min(next + model.mean);
        window.remove(0);
        window.push(next);
    }
    Ok(Prediction {
        mean_min_throughput: lowest,
        margin,
        horizon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sinusoid_recovers_ar2_coefficients() {
        // Zero-mean over whole periods, so x_t = 2cos(w)·x_{t−1} − x_{t−2} holds exactly.
        let w = std::f64::consts::PI / 4.0;
        let trace: Vec<f64> = (0..64).map(|t| 10.0 + 3.0 * (w * t as f64).sin()).collect();
        let m = ar_fit(&trace, 2).unwrap();
        assert!((m.mean - 10.0).abs() < 1e-9);
        assert!((m.coefficients[0] - 2.0 * w.cos()).abs() < 1e-6);
        assert!((m.coefficients[1] + 1.0).abs() < 1e-6);
        assert!(m.residual_std < 1e-6);
        let r = ar_predict(&m, &trace[..2], 1).unwrap();
        assert!((r.mean_min_throughput - trace[2]).abs() < 1e-6);
    }

    #[test]
    fn long_rollout_settles_at_the_mean() {
        let m = ArModel {
            coefficients: vec![0.5],
            mean: 20.0,
            residual_std: 0.0,
            z: 1.0,
            step_seconds: 1.0,
        };
        let r = ar_predict(&m, &[60.0], 200).unwrap();
        assert!((r.mean_min_throughput - 20.0).abs() < 1e-9);
    }

    #[test]
    fn constant_series_predicts_constant() {
        for p in 0..4 {
            let m = ar_fit(&[42.0; 20], p).unwrap();
            let r = ar_predict(&m, &[42.0; 5], 7).unwrap();
            assert!((r.mean_min_throughput - 42.0).abs() < 1e-9, "p={p}");
            assert!(r.margin >= 0.0);
        }
    }

    #[test]
    fn singular_system_falls_back_to_mean() {
        let m = ar_fit(&[0.0, 0.0, 0.0, 0.0], 2).unwrap();
        assert_eq!(m.order(), 0);
        assert_eq!(m.mean, 0.0);
    }

    #[test]
    fn rollout_takes_minimum() {
        let m = ArModel {
            coefficients: vec![-0.5],
            mean: 0.0,
            residual_std: 2.0,
            z: 1.5,
            step_seconds: 0.1,
        };
        // 16 → −8 → 4 → −2
        let r = ar_predict(&m, &[1.0, 16.0], 3).unwrap();
        assert_eq!(r.mean_min_throughput, -8.0);
        assert_eq!(r.margin, 3.0);
        assert!((r.horizon - 0.3).abs() < 1e-12);
        assert!(matches!(ar_predict(&m, &[], 1), Err(Error::EmptyHistory)));
    }

    #[test]
    fn short_trace_rejected_and_roundtrip() {
        assert!(ar_fit(&[1.0, 2.0], 2).is_err());
        let m = ar_fit(&[1.0, 3.0, 2.0, 5.0, 4.0, 6.0], 2).unwrap().with_z(2.0);
        let back = ArModel::load(&FlatFile::parse(&m.save().render()).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
