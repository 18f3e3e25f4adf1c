//! Motion-only pose estimation: iteratively reweighted, Levenberg-damped
//! Gauss-Newton on the reprojection error of map points.
//!
//! The pose is world-to-camera and increments are applied on the left,
//! `T <- exp(dxi) * T`.

use nalgebra::{Matrix2x6, Matrix3, Matrix6, SymmetricEigen, Vector2, Vector3, Vector6};
use thiserror::Error;

use crate::geometry::{hat, project, CameraIntrinsics, GeometryError, PoseSE3, Twist};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizerError {
    #[error("underdetermined pose: {valid} valid observations, at least {required} needed")]
    Underdetermined { valid: usize, required: usize },
    #[error("degenerate geometry: normal-matrix condition number {0:.3e}")]
    Degenerate(f64),
    #[error("non-finite value in the normal equations")]
    NonFinite,
}

/// A tracked pixel paired with its map point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub pixel: Vector2<f64>,
    /// World coordinates (m).
    pub point: Vector3<f64>,
    /// Prior weight, multiplied with the robust weight.
    pub weight: f64,
}

impl Observation {
    pub fn new(pixel: Vector2<f64>, point: Vector3<f64>) -> Self {
        Self {
            pixel,
            point,
            weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSettings {
    pub max_iterations: usize,
    /// Stop once `|dxi| < tolerance`.
    pub tolerance: f64,
    pub huber_delta: f64,
    pub initial_damping: f64,
    pub max_condition: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            tolerance: 1e-8,
            huber_delta: 1.5,
            initial_damping: 1e-4,
            max_condition: 1e12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerReport {
    pub iterations: usize,
    /// Robust cost (px^2) at the initial pose.
    pub initial_error: f64,
    pub final_error: f64,
    pub final_step_norm: f64,
    pub converged: bool,
    /// Cost after every accepted step, starting with the initial cost.
    pub error_history: Vec<f64>,
    /// Observations dropped because their point was behind the camera.
    pub excluded: usize,
}

pub const MIN_OBSERVATIONS: usize = 3;

/// `u - project(T * P)`.
pub fn reprojection_error(
    pose: &PoseSE3,
    obs: &Observation,
    k: &CameraIntrinsics,
) -> Result<Vector2<f64>, GeometryError> {
    Ok(obs.pixel - project(&pose.transform(&obs.point), k)?)
}

/// Derivative of [`reprojection_error`] with respect to a left increment.
pub fn reprojection_jacobian(
    pose: &PoseSE3,
    obs: &Observation,
    k: &CameraIntrinsics,
) -> Result<Matrix2x6<f64>, GeometryError> {
    let p = pose.transform(&obs.point);
    if p.z <= 0.0 {
        return Err(GeometryError::BehindCamera(p.z));
    }
    let inv_z = 1.0 / p.z;
    let inv_z2 = inv_z * inv_z;
    let d_proj = nalgebra::Matrix2x3::new(
        k.fx * inv_z,
        0.0,
        -k.fx * p.x * inv_z2,
        0.0,
        k.fy * inv_z,
        -k.fy * p.y * inv_z2,
    );
    // d(exp(d) p)/d(d) = [I, -hat(p)]
    let mut d_point = nalgebra::Matrix3x6::zeros();
    d_point
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&Matrix3::identity());
    d_point.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat(&p)));
    Ok(-(d_proj * d_point))
}

/// Huber weight: 1 inside `delta`, `delta / |e|` outside.
pub fn compute_weight(residual: &Vector2<f64>, delta: f64) -> f64 {
    let r = residual.norm();
    if r <= delta {
        1.0
    } else {
        delta / r
    }
}

/// Huber cost of one residual, equal to `|e|^2` on the inlier plateau.
fn robust_cost(r: f64, delta: f64) -> f64 {
    if r <= delta {
        r * r
    } else {
        2.0 * delta * r - delta * delta
    }
}

fn total_cost(
    pose: &PoseSE3,
    observations: &[Observation],
    k: &CameraIntrinsics,
    delta: f64,
) -> f64 {
    observations
        .iter()
        .map(|o| match reprojection_error(pose, o, k) {
            Ok(e) => o.weight * robust_cost(e.norm(), delta),
            // a point crossing behind the camera makes the step unacceptable
            Err(_) => f64::INFINITY,
        })
        .sum()
}

/// Minimizes the weighted reprojection error over the camera pose.
pub fn optimize_pose(
    initial: &PoseSE3,
    observations: &[Observation],
    k: &CameraIntrinsics,
    settings: &OptimizerSettings,
) -> Result<(PoseSE3, OptimizerReport), OptimizerError> {
    let valid: Vec<Observation> = observations
        .iter()
        .filter(|o| o.weight > 0.0 && initial.transform(&o.point).z > 0.0)
        .copied()
        .collect();
    let excluded = observations.len() - valid.len();
    if excluded > 0 {
        log::debug!("pose optimizer: {excluded} observation(s) behind the camera excluded");
    }
    if valid.len() < MIN_OBSERVATIONS {
        return Err(OptimizerError::Underdetermined {
            valid: valid.len(),
            required: MIN_OBSERVATIONS,
        });
    }

    let delta = settings.huber_delta;
    let mut pose = *initial;
    let mut cost = total_cost(&pose, &valid, k, delta);
    let mut lambda = settings.initial_damping;
    let mut report = OptimizerReport {
        iterations: 0,
        initial_error: cost,
        final_error: cost,
        final_step_norm: f64::INFINITY,
        converged: false,
        error_history: vec![cost],
        excluded,
    };

    while report.iterations < settings.max_iterations {
        report.iterations += 1;
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for o in &valid {
            let (Ok(e), Ok(j)) = (
                reprojection_error(&pose, o, k),
                reprojection_jacobian(&pose, o, k),
            ) else {
                continue;
            };
            let w = o.weight * compute_weight(&e, delta);
            h += j.transpose() * j * w;
            g += j.transpose() * e * w;
        }
        if !(h.iter().all(|v| v.is_finite()) && g.iter().all(|v| v.is_finite())) {
            return Err(OptimizerError::NonFinite);
        }
        let eig = SymmetricEigen::new(h).eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if condition > settings.max_condition {
            return Err(OptimizerError::Degenerate(condition));
        }

        let mut accepted = false;
        while lambda < 1e12 {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * h[(i, i)];
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-g))) else {
                lambda *= 10.0;
                continue;
            };
            report.final_step_norm = step.norm();
            if report.final_step_norm < settings.tolerance {
                report.converged = true;
                break;
            }
            let candidate = PoseSE3::exp(&Twist(step)) * pose;
            let candidate_cost = total_cost(&candidate, &valid, k, delta);
            if candidate_cost <= cost {
                pose = candidate;
                cost = candidate_cost;
                report.error_history.push(cost);
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                break;
            }
            lambda *= 10.0;
        }
        if report.converged || !accepted {
            // no descent direction left at any damping: a numerical minimum
            report.converged |= !accepted && lambda >= 1e12;
            break;
        }
    }
    report.final_error = cost;
    Ok((pose, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 64.0, 64.0, 128, 128).unwrap()
    }

    #[test]
    fn residual_examples() {
        let k = k();
        let id = PoseSE3::identity();
        let e = reprojection_error(
            &id,
            &Observation::new(Vector2::new(64.0, 64.0), Vector3::new(0.0, 0.0, 2.0)),
            &k,
        )
        .unwrap();
        assert_eq!(e, Vector2::zeros());
        let e = reprojection_error(
            &id,
            &Observation::new(Vector2::new(75.0, 44.0), Vector3::new(0.2, -0.4, 2.0)),
            &k,
        )
        .unwrap();
        assert_relative_eq!(e, Vector2::new(1.0, 0.0), epsilon = 1e-12);
        assert!(reprojection_error(
            &id,
            &Observation::new(Vector2::zeros(), Vector3::new(0.0, 0.0, -1.0)),
            &k
        )
        .is_err());
    }

    #[test]
    fn jacobian_on_axis() {
        let k = k();
        let z = 4.0;
        let obs = Observation::new(Vector2::new(64.0, 64.0), Vector3::new(0.0, 0.0, z));
        let j = reprojection_jacobian(&PoseSE3::identity(), &obs, &k).unwrap();
        assert_relative_eq!(j[(0, 0)], -k.fx / z, epsilon = 1e-15);
        assert_eq!(j[(0, 5)], 0.0);
        assert_eq!(j[(1, 5)], 0.0);
    }

    #[test]
    fn huber_weights() {
        let d = 1.5;
        assert_eq!(compute_weight(&Vector2::zeros(), d), 1.0);
        assert_relative_eq!(compute_weight(&Vector2::new(0.0, 2.0 * d), d), 0.5);
        let mut last = 1.0;
        for i in 0..=1000 {
            let w = compute_weight(&Vector2::new(i as f64 * 0.01 * d, 0.0), d);
            assert!(w <= last && w > 0.0);
            last = w;
        }
    }

    fn problem(rng: &mut ChaCha8Rng, n: usize) -> (PoseSE3, Vec<Observation>) {
        let truth = PoseSE3::exp(&Twist::new(
            Vector3::new(0.3, -0.2, 0.5),
            Vector3::new(0.05, 0.1, -0.08),
        ));
        let k = k();
        let inv = truth.inverse();
        let obs = (0..n)
            .map(|_| {
                let pc = Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(3.0..10.0),
                );
                Observation::new(project(&pc, &k).unwrap(), inv.transform(&pc))
            })
            .collect();
        (truth, obs)
    }

    #[test]
    fn already_optimal_converges_in_one_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (truth, obs) = problem(&mut rng, 50);
        let (est, rep) = optimize_pose(&truth, &obs, &k(), &OptimizerSettings::default()).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!(rep.converged);
        assert!(rep.final_error < 1e-12);
        assert!(est.rotation_distance(&truth) < 1e-12);
    }

    #[test]
    fn underdetermined_and_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (truth, obs) = problem(&mut rng, 2);
        assert!(matches!(
            optimize_pose(&truth, &obs, &k(), &OptimizerSettings::default()),
            Err(OptimizerError::Underdetermined { valid: 2, .. })
        ));
        // three copies of one observation leave the pose unconstrained
        let same = vec![obs[0]; 3];
        assert!(matches!(
            optimize_pose(&truth, &same, &k(), &OptimizerSettings::default()),
            Err(OptimizerError::Degenerate(_))
        ));
    }

    #[test]
    fn excludes_points_behind_camera() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (truth, mut obs) = problem(&mut rng, 20);
        let behind = truth.inverse().transform(&Vector3::new(0.0, 0.0, -3.0));
        obs.push(Observation::new(Vector2::new(64.0, 64.0), behind));
        let (_, rep) = optimize_pose(&truth, &obs, &k(), &OptimizerSettings::default()).unwrap();
        assert_eq!(rep.excluded, 1);
    }

    #[test]
    fn zero_gradient_at_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (truth, obs) = problem(&mut rng, 40);
        let k = k();
        let mut g = Vector6::zeros();
        for o in &obs {
            let e = reprojection_error(&truth, o, &k).unwrap();
            g += reprojection_jacobian(&truth, o, &k).unwrap().transpose() * e;
        }
        assert!(g.norm() < 1e-9);
    }

    #[test]
    fn gauge_consistency_from_two_starts() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (truth, obs) = problem(&mut rng, 50);
        let k = k();
        let s = OptimizerSettings::default();
        let a = PoseSE3::exp(&Twist::new(
            Vector3::new(0.05, 0.0, -0.05),
            Vector3::new(0.02, 0.0, 0.0),
        )) * truth;
        let b = PoseSE3::exp(&Twist::new(
            Vector3::new(-0.05, 0.05, 0.0),
            Vector3::new(0.0, -0.03, 0.01),
        )) * truth;
        let (ea, _) = optimize_pose(&a, &obs, &k, &s).unwrap();
        let (eb, _) = optimize_pose(&b, &obs, &k, &s).unwrap();
        assert!(ea.rotation_distance(&eb) < 1e-6);
        assert!(ea.translation_distance(&eb) < 1e-6);
    }

    #[test]
    fn outliers_are_downweighted() {
        let k = k();
        let s = OptimizerSettings {
            huber_delta: 1.5,
            ..Default::default()
        };
        let mut worst_clean: f64 = 0.0;
        let mut worst_dirty: f64 = 0.0;
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (truth, mut obs) = problem(&mut rng, 50);
            let noise = rand_distr::Normal::new(0.0, 0.5).unwrap();
            for o in obs.iter_mut() {
                o.pixel += Vector2::new(rng.sample(noise), rng.sample(noise));
            }
            let init = PoseSE3::exp(&Twist::new(
                Vector3::new(0.1, 0.0, 0.0),
                Vector3::new(0.0, 0.1, 0.0),
            )) * truth;
            let (clean, _) = optimize_pose(&init, &obs, &k, &s).unwrap();
            for o in obs.iter_mut().take(5) {
                let dir = rng.random_range(0.0..std::f64::consts::TAU);
                o.pixel += Vector2::new(dir.cos(), dir.sin()) * 50.0;
            }
            let (dirty, rep) = optimize_pose(&init, &obs, &k, &s).unwrap();
            assert!(rep.error_history.windows(2).all(|w| w[1] <= w[0]));
            worst_clean = worst_clean.max(clean.translation_distance(&truth));
            worst_dirty = worst_dirty.max(dirty.translation_distance(&truth));
        }
        assert!(
            worst_dirty <= 5.0 * worst_clean,
            "{worst_dirty} vs {worst_clean}"
        );
    }
}
