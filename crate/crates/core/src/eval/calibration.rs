//! Quality-aware logistic calibration: a target log-odds that is linear in
//! the raw score and the log frame counts of both sides.

use crate::error::{Error, Result};
use crate::tensor::ops::sigmoid;

pub const MAX_ITERATIONS: usize = 200;
pub const GRAD_TOLERANCE: f64 = 1e-8;

/// Inputs of one trial to the calibration model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityFeatures {
    pub score: f64,
    pub log_frames_enroll: f64,
    pub log_frames_test: f64,
}

impl QualityFeatures {
    pub fn new(score: f64, frames_enroll: usize, frames_test: usize) -> Self {
        Self {
            score,
            log_frames_enroll: (frames_enroll.max(1) as f64).ln(),
            log_frames_test: (frames_test.max(1) as f64).ln(),
        }
    }

    fn row(&self) -> [f64; 4] {
        [
            1.0,
            self.score,
            self.log_frames_enroll,
            self.log_frames_test,
        ]
    }
}

/// Weights `[bias, score, ln T_enroll, ln T_test]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationModel {
    pub weights: [f64; 4],
    pub iterations: usize,
    pub converged: bool,
}

impl CalibrationModel {
    /// Calibrated log-odds.
    pub fn apply(&self, f: &QualityFeatures) -> f64 {
        self.weights.iter().zip(f.row()).map(|(w, x)| w * x).sum()
    }
}

fn log_likelihood(w: &[f64; 4], rows: &[[f64; 4]], labels: &[bool]) -> f64 {
    rows.iter()
        .zip(labels)
        .map(|(x, &y)| {
            let z: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            // y·z − log(1 + e^z), written to avoid overflow
            let softplus = if z > 0.0 {
                z + (-z).exp().ln_1p()
            } else {
                z.exp().ln_1p()
            };
            f64::from(u8::from(y)) * z - softplus
        })
        .sum::<f64>()
        / rows.len() as f64
}

/// Solves `a·x = b` for a small dense system by Gaussian elimination with
/// partial pivoting; `None` if numerically singular.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
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

/// Maximum-likelihood logistic regression by damped Newton iterations.
/// Quality features that are constant over the training pairs carry no
/// information and keep weight zero. Stops when the gradient's ∞-norm falls
/// below [`GRAD_TOLERANCE`] or after [`MAX_ITERATIONS`]. Hitting the cap, or
/// perfectly separable pairs, leaves `converged` false and logs a warning.
pub fn fit_calibration(features: &[QualityFeatures], labels: &[bool]) -> Result<CalibrationModel> {
    if features.len() != labels.len() {
        return Err(Error::shape(
            "fit_calibration",
            &[features.len()],
            &[labels.len()],
        ));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Invalid(
            "calibration needs both target and nontarget pairs".into(),
        ));
    }
    let rows: Vec<[f64; 4]> = features.iter().map(QualityFeatures::row).collect();
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("calibration features must be finite".into()));
    }
    let active: Vec<usize> = (0..4)
        .filter(|&j| j == 0 || rows.iter().any(|r| r[j] != rows[0][j]))
        .collect();
    let n = rows.len() as f64;
    let mut w = [0.0; 4];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_ITERATIONS {
        let mut grad = vec![0.0; active.len()];
        let mut hess = vec![vec![0.0; active.len()]; active.len()];
        for (x, &y) in rows.iter().zip(labels) {
            let z: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            let p = sigmoid(z);
            let r = f64::from(u8::from(y)) - p;
            let curv = p * (1.0 - p);
            for (a, &ja) in active.iter().enumerate() {
                grad[a] += r * x[ja] / n;
                for (b, &jb) in active.iter().enumerate() {
                    hess[a][b] += curv * x[ja] * x[jb] / n;
                }
            }
        }
        if grad.iter().all(|g| g.abs() < GRAD_TOLERANCE) {
            converged = true;
            break;
        }
        iterations += 1;
        let Some(step) = solve(hess, grad) else { break };
        let current = log_likelihood(&w, &rows, labels);
        let mut scale = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let mut cand = w;
            for (a, &j) in active.iter().enumerate() {
                cand[j] += scale * step[a];
            }
            if log_likelihood(&cand, &rows, labels) >= current {
                w = cand;
                improved = true;
                break;
            }
            scale *= 0.5;
        }
        if !improved {
            break;
        }
    }
    // With perfectly separated classes the likelihood has no maximum; the
    // gradient can still shrink below tolerance as the weights grow.
    let separated = rows.iter().zip(labels).all(|(x, &y)| {
        let z: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
        (z > 0.0) == y && z != 0.0
    });
    if separated {
        converged = false;
        log::warn!("calibration pairs are perfectly separable; the fitted weights are not a finite optimum");
    } else if !converged {
        log::warn!(
            "calibration stopped after {iterations} iterations without converging (scores may be separable)"
        );
    }
    Ok(CalibrationModel {
        weights: w,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_quality_keeps_zero_weights() {
        let feats: Vec<QualityFeatures> = [0.1, 0.5, 0.3, 0.9, 0.2, 0.7]
            .iter()
            .map(|&s| QualityFeatures::new(s, 100, 200))
            .collect();
        let labels = [false, true, false, true, true, false];
        let m = fit_calibration(&feats, &labels).unwrap();
        assert!(m.converged);
        assert_eq!(m.weights[2], 0.0);
        assert_eq!(m.weights[3], 0.0);
        assert!(m.weights[1] > 0.0);
    }

    #[test]
    fn separable_data_is_flagged() {
        let feats: Vec<QualityFeatures> = [0.1, 0.2, 0.8, 0.9]
            .iter()
            .map(|&s| QualityFeatures::new(s, 100, 100))
            .collect();
        let m = fit_calibration(&feats, &[false, false, true, true]).unwrap();
        assert!(!m.converged);
        assert!(m.weights[1] > 0.0);
    }

    #[test]
    fn needs_both_classes() {
        let feats = [QualityFeatures::new(0.1, 10, 10); 3];
        assert!(fit_calibration(&feats, &[true, true, true]).is_err());
    }
}
