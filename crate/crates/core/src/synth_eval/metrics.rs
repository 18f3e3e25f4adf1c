use std::fmt;
use std::fmt::Write as _;

use nalgebra::{Vector2, Vector3};

use super::{align_trajectories, AlignMode, Alignment, Result};
use crate::event_io::StampedPose;

/// Width of the finite-difference window for the ground-truth heading, s.
pub const HEADING_WINDOW: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSample {
    pub t: f64,
    /// `None` where the ground truth is stationary (no heading).
    pub longitudinal: Option<f64>,
    pub lateral: Option<f64>,
    pub planar: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub samples: Vec<ErrorSample>,
    /// Means of absolute errors, meters.
    pub mean_longitudinal: f64,
    pub mean_lateral: f64,
    pub mean_planar: f64,
    /// Ground-truth path length over the evaluated interval, meters.
    pub path_length: f64,
    /// Mean planar error over path length, percent.
    pub relative_error: f64,
    pub alignment: Alignment,
}

fn horizontal(v: &Vector3<f64>) -> Vector2<f64> {
    Vector2::new(v.x, v.y)
}

fn position_at(gt: &[StampedPose], t: f64) -> Vector3<f64> {
    let j = gt.partition_point(|g| g.t < t);
    if j == 0 {
        return gt[0].pose.translation;
    }
    if j >= gt.len() {
        return gt[gt.len() - 1].pose.translation;
    }
    let (a, b) = (&gt[j - 1], &gt[j]);
    let s = if b.t > a.t {
        (t - a.t) / (b.t - a.t)
    } else {
        0.0
    };
    a.pose.translation * (1.0 - s) + b.pose.translation * s
}

/// Errors of an estimate (camera-to-world poses) after aligning it onto the
/// ground truth with `mode`. Longitudinal and lateral are measured in the
/// horizontal ground-truth heading frame (world z is up).
pub fn compute_position_errors(
    estimate: &[StampedPose],
    ground_truth: &[StampedPose],
    mode: AlignMode,
) -> Result<ErrorReport> {
    let alignment = align_trajectories(estimate, ground_truth, mode)?;
    let (t_first, t_last) = (ground_truth[0].t, ground_truth[ground_truth.len() - 1].t);
    let half = 0.5 * HEADING_WINDOW;
    let mut samples = Vec::with_capacity(alignment.matches.len());
    for (i, j) in &alignment.matches {
        let g = &ground_truth[*j];
        let diff =
            horizontal(&(alignment.apply(&estimate[*i].pose.translation) - g.pose.translation));
        let (ta, tb) = ((g.t - half).max(t_first), (g.t + half).min(t_last));
        let vel = if tb > ta {
            horizontal(&(position_at(ground_truth, tb) - position_at(ground_truth, ta))) / (tb - ta)
        } else {
            Vector2::zeros()
        };
        let (longitudinal, lateral) = if vel.norm() > 1e-6 {
            let h = vel.normalize();
            let left = Vector2::new(-h.y, h.x);
            (Some(diff.dot(&h)), Some(diff.dot(&left)))
        } else {
            (None, None)
        };
        samples.push(ErrorSample {
            t: g.t,
            longitudinal,
            lateral,
            planar: diff.norm(),
        });
    }
    let mean_abs = |f: &dyn Fn(&ErrorSample) -> Option<f64>| {
        let v: Vec<f64> = samples.iter().filter_map(f).map(f64::abs).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let mean_longitudinal = mean_abs(&|s| s.longitudinal);
    let mean_lateral = mean_abs(&|s| s.lateral);
    let mean_planar = mean_abs(&|s| Some(s.planar));

    let first = alignment.matches.iter().map(|m| m.1).min().unwrap_or(0);
    let last = alignment.matches.iter().map(|m| m.1).max().unwrap_or(0);
    let path_length: f64 = ground_truth[first..=last]
        .windows(2)
        .map(|w| (w[1].pose.translation - w[0].pose.translation).norm())
        .sum();
    let relative_error = if path_length > 0.0 {
        100.0 * mean_planar / path_length
    } else {
        0.0
    };
    Ok(ErrorReport {
        samples,
        mean_longitudinal,
        mean_lateral,
        mean_planar,
        path_length,
        relative_error,
        alignment,
    })
}

impl ErrorReport {
    fn relative(&self, mean: f64) -> f64 {
        if self.path_length > 0.0 {
            100.0 * mean / self.path_length
        } else {
            0.0
        }
    }

    /// `t,longitudinal,lateral,planar`; undefined components left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,longitudinal,lateral,planar\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{:.6},{},{},{:.6}",
                s.t,
                opt(s.longitudinal),
                opt(s.lateral),
                s.planar
            );
        }
        out
    }

    /// Whitespace-separated error-vs-time series for plotting.
    pub fn to_plot_data(&self) -> String {
        let mut out = String::from("# t longitudinal lateral planar\n");
        let opt = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.6}"));
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{:.6} {} {} {:.6}",
                s.t,
                opt(s.longitudinal),
                opt(s.lateral),
                s.planar
            );
        }
        out
    }
}

impl fmt::Display for ErrorReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16}{:>14}{:>14}{:>14}",
            "", "Longitudinal", "Lateral", "Planar"
        )?;
        writeln!(
            f,
            "{:<16}{:>14}{:>14}{:>14}",
            "Average error",
            format!("{:.3} m", self.mean_longitudinal),
            format!("{:.3} m", self.mean_lateral),
            format!("{:.3} m", self.mean_planar)
        )?;
        writeln!(
            f,
            "{:<16}{:>14}{:>14}{:>14}",
            "Relative error",
            format!("{:.4}%", self.relative(self.mean_longitudinal)),
            format!("{:.4}%", self.relative(self.mean_lateral)),
            format!("{:.4}%", self.relative_error)
        )?;
        writeln!(
            f,
            "Path length {:.3} m, scale {:.6}, rms {:.6} m",
            self.path_length, self.alignment.scale, self.alignment.rms
        )
    }
}
