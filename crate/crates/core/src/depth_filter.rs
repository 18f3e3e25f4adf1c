//! Per-feature depth estimation under a Gaussian + uniform measurement
//! mixture. The posterior over (depth, inlier ratio) is kept in the
//! Gaussian x Beta family by moment matching after every measurement.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::geometry::{angle_between, CameraIntrinsics, PoseSE3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DepthFilterError {
    #[error("invalid depth range [{0}, {1}]")]
    InvalidRange(f64, f64),
    #[error("zero baseline between reference and current frame")]
    ZeroBaseline,
    #[error("bearing has no parallax against the baseline")]
    NoParallax,
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
}

/// Belief over one feature's depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthFilterState {
    pub d_mean: f64,
    pub d_var: f64,
    /// Beta pseudo-counts of the inlier probability.
    pub a: f64,
    pub b: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub birth_keyframe: u64,
    pub updates: u32,
    /// Times the mean left `[d_min, d_max]` and was clamped back.
    pub clamp_events: u32,
}

impl DepthFilterState {
    /// Mean of the Beta belief over the inlier probability.
    pub fn inlier_ratio(&self) -> f64 {
        self.a / (self.a + self.b)
    }

    pub fn std_dev(&self) -> f64 {
        self.d_var.sqrt()
    }

    pub fn range(&self) -> f64 {
        self.d_max - self.d_min
    }
}

/// Triangulated depth and its variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthMeasurement {
    pub d_tilde: f64,
    pub tau2: f64,
}

pub const PRIOR_PSEUDO_COUNT: f64 = 10.0;

/// Fresh filter with the moments of a uniform prior over the range.
pub fn init_filter(
    d_min: f64,
    d_max: f64,
    keyframe_id: u64,
) -> Result<DepthFilterState, DepthFilterError> {
    if !(d_min.is_finite() && d_max.is_finite() && d_min < d_max) {
        return Err(DepthFilterError::InvalidRange(d_min, d_max));
    }
    let half = 0.5 * (d_max - d_min);
    Ok(DepthFilterState {
        d_mean: 0.5 * (d_min + d_max),
        d_var: half * half / 3.0,
        a: PRIOR_PSEUDO_COUNT,
        b: PRIOR_PSEUDO_COUNT,
        d_min,
        d_max,
        birth_keyframe: keyframe_id,
        updates: 0,
        clamp_events: 0,
    })
}

/// Variance of a depth measurement caused by one pixel of disparity.
///
/// `t_ref_cur` maps current-frame coordinates into the reference frame (its
/// translation is the current camera centre seen from the reference).
/// `bearing` is the feature direction in the reference frame, `depth` its
/// z-depth there.
pub fn compute_tau2(
    t_ref_cur: &PoseSE3,
    bearing: &Vector3<f64>,
    depth: f64,
    k: &CameraIntrinsics,
) -> Result<f64, DepthFilterError> {
    if !(depth > 0.0) {
        return Err(DepthFilterError::NonPositiveDepth(depth));
    }
    let t = t_ref_cur.translation;
    let t_norm = t.norm();
    if t_norm < 1e-12 {
        return Err(DepthFilterError::ZeroBaseline);
    }
    let f = bearing.normalize();
    let range = depth * bearing.norm() / bearing.z;
    let a = f * range - t;
    let alpha = angle_between(&f, &t);
    let beta = angle_between(&a, &(-t));
    let pixel_angle = 2.0 * (0.5 / k.focal()).atan();
    let beta_plus = beta + pixel_angle;
    let gamma = std::f64::consts::PI - alpha - beta_plus;
    if alpha < 1e-9 || gamma <= 1e-9 {
        return Err(DepthFilterError::NoParallax);
    }
    let range_plus = t_norm * beta_plus.sin() / gamma.sin();
    let depth_plus = range_plus * bearing.z / bearing.norm();
    let tau = depth_plus - depth;
    Ok(tau * tau)
}

fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    (-0.5 * d * d / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Bayesian update with moment matching back to Gaussian x Beta.
///
/// Measurements whose likelihood underflows under both mixture components
/// leave the state untouched.
pub fn update(state: &DepthFilterState, m: &DepthMeasurement) -> DepthFilterState {
    let DepthFilterState {
        d_mean: mu,
        d_var: sigma2,
        a,
        b,
        d_min,
        d_max,
        ..
    } = *state;
    let x = m.d_tilde;
    if !(x.is_finite() && m.tau2 > 0.0 && m.tau2.is_finite()) {
        return *state;
    }
    let s2 = 1.0 / (1.0 / sigma2 + 1.0 / m.tau2);
    let mean = s2 * (mu / sigma2 + x / m.tau2);
    let uniform = if (d_min..=d_max).contains(&x) {
        1.0 / (d_max - d_min)
    } else {
        0.0
    };
    let mut c1 = a / (a + b) * normal_pdf(x, mu, sigma2 + m.tau2);
    let mut c2 = b / (a + b) * uniform;
    let norm = c1 + c2;
    if !(norm > 0.0 && norm.is_finite()) {
        return *state;
    }
    c1 /= norm;
    c2 /= norm;

    let f = c1 * (a + 1.0) / (a + b + 1.0) + c2 * a / (a + b + 1.0);
    let e = c1 * (a + 1.0) * (a + 2.0) / ((a + b + 1.0) * (a + b + 2.0))
        + c2 * a * (a + 1.0) / ((a + b + 1.0) * (a + b + 2.0));

    let mut new_mean = c1 * mean + c2 * mu;
    let new_var = (c1 * (s2 + mean * mean) + c2 * (sigma2 + mu * mu) - new_mean * new_mean)
        .max(f64::MIN_POSITIVE);
    let new_a = (e - f) / (f - e / f);
    let new_b = new_a * (1.0 - f) / f;

    let mut clamp_events = state.clamp_events;
    if !(d_min..=d_max).contains(&new_mean) {
        new_mean = new_mean.clamp(d_min, d_max);
        clamp_events += 1;
        log::debug!("depth filter mean clamped into [{d_min}, {d_max}]");
    }
    DepthFilterState {
        d_mean: new_mean,
        d_var: new_var,
        a: new_a.max(f64::MIN_POSITIVE),
        b: new_b.max(f64::MIN_POSITIVE),
        updates: state.updates + 1,
        clamp_events,
        ..*state
    }
}

/// `sqrt(var) < ratio * (d_max - d_min)`.
pub fn has_converged(state: &DepthFilterState, ratio_threshold: f64) -> bool {
    state.d_var.sqrt() < ratio_threshold * state.range()
}

/// Debug trace: `update,d_mean,d_var,a,b` per state.
pub fn write_filter_trace(path: &Path, states: &[DepthFilterState]) -> std::io::Result<()> {
    let mut out = String::from("update,d_mean,d_var,a,b\n");
    for s in states {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.updates, s.d_mean, s.d_var, s.a, s.b
        );
    }
    std::fs::write(path, out)
}
