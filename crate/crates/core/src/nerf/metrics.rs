//! Pose error metrics.

use serde::{Deserialize, Serialize};

use super::camera::{matmul3, transpose3, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    /// Euclidean distance between camera centers, scene units.
    pub te: f64,
    /// Angle of `R_gtᵀ·R_est`, degrees.
    pub re: f64,
}

pub fn pose_error(est: &Pose, gt: &Pose) -> PoseError {
    let te = (0..3)
        .map(|i| (est.translation[i] - gt.translation[i]).powi(2))
        .sum::<f64>()
        .sqrt();
    let m = matmul3(&transpose3(&gt.rotation), &est.rotation);
    let cos = ((m[0][0] + m[1][1] + m[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0);
    PoseError {
        te,
        re: cos.acos().to_degrees(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub te: f64,
    pub re: f64,
    pub re_at_5: f64,
    pub re_at_15: f64,
    pub re_at_30: f64,
}

/// Fraction of errors strictly below `beta` degrees.
pub fn re_at(errors: &[PoseError], beta: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().filter(|e| e.re < beta).count() as f64 / errors.len() as f64
}

/// Mean TE and RE over `(estimate, ground truth)` pairs, with RE@{5,15,30}.
pub fn pose_metrics(pairs: &[(Pose, Pose)]) -> PoseMetrics {
    let errors: Vec<PoseError> = pairs.iter().map(|(e, g)| pose_error(e, g)).collect();
    let n = errors.len().max(1) as f64;
    PoseMetrics {
        te: errors.iter().map(|e| e.te).sum::<f64>() / n,
        re: errors.iter().map(|e| e.re).sum::<f64>() / n,
        re_at_5: re_at(&errors, 5.0),
        re_at_15: re_at(&errors, 15.0),
        re_at_30: re_at(&errors, 30.0),
    }
}
