use nalgebra::{Matrix3, Rotation3, Vector3};

use super::{Result, SynthError};
use crate::event_io::StampedPose;

/// Largest timestamp gap accepted when pairing samples, seconds.
pub const MATCH_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignMode {
    Rigid,
    RigidScale,
}

/// `p_gt ≈ scale * rotation * p_est + translation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
    /// RMS position residual after alignment, meters.
    pub rms: f64,
    /// Matched `(estimate index, ground-truth index)` pairs.
    pub matches: Vec<(usize, usize)>,
}

impl Alignment {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }
}

/// Nearest ground-truth sample for every estimate within the tolerance.
/// Both sequences must be sorted by time.
pub fn match_timestamps(
    estimate: &[StampedPose],
    ground_truth: &[StampedPose],
) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, e) in estimate.iter().enumerate() {
        let j = ground_truth.partition_point(|g| g.t < e.t);
        let best = [j.wrapping_sub(1), j]
            .into_iter()
            .filter(|&k| k < ground_truth.len())
            .min_by(|&a, &b| {
                (ground_truth[a].t - e.t)
                    .abs()
                    .total_cmp(&(ground_truth[b].t - e.t).abs())
            });
        if let Some(k) = best {
            if (ground_truth[k].t - e.t).abs() <= MATCH_TOLERANCE {
                out.push((i, k));
            }
        }
    }
    out
}

/// Least-squares similarity (or rigid) alignment of estimated camera
/// positions onto ground truth. Poses are camera-to-world.
pub fn align_trajectories(
    estimate: &[StampedPose],
    ground_truth: &[StampedPose],
    mode: AlignMode,
) -> Result<Alignment> {
    let matches = match_timestamps(estimate, ground_truth);
    if matches.len() < 3 {
        return Err(SynthError::TooFewMatches(matches.len()));
    }
    let src: Vec<Vector3<f64>> = matches
        .iter()
        .map(|(i, _)| estimate[*i].pose.translation)
        .collect();
    let dst: Vec<Vector3<f64>> = matches
        .iter()
        .map(|(_, j)| ground_truth[*j].pose.translation)
        .collect();
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(&dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
        var_s += (s - mu_s).norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sign = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let r = u * sign * v_t;
    let scale = match mode {
        AlignMode::Rigid => 1.0,
        AlignMode::RigidScale => {
            if var_s <= f64::EPSILON {
                return Err(SynthError::DegenerateAlignment(
                    "estimate positions coincide".into(),
                ));
            }
            (svd.singular_values.component_mul(&sign.diagonal())).sum() / var_s
        }
    };
    let rotation = Rotation3::from_matrix_unchecked(r);
    let translation = mu_d - rotation * mu_s * scale;
    let mut a = Alignment {
        rotation,
        translation,
        scale,
        rms: 0.0,
        matches,
    };
    let sq: f64 = src
        .iter()
        .zip(&dst)
        .map(|(s, d)| (a.apply(s) - d).norm_squared())
        .sum();
    a.rms = (sq / n).sqrt();
    Ok(a)
}
