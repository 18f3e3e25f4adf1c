use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use super::{data_lines, expect_fields, format_significant, parse_field, read_to_string};
use super::{write_string, EventIoError, Result};
use crate::geometry::PoseSE3;

/// A pose with its timestamp (s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPose {
    pub t: f64,
    pub pose: PoseSE3,
}

impl StampedPose {
    pub fn new(t: f64, pose: PoseSE3) -> Self {
        Self { t, pose }
    }
}

/// `t tx ty tz qx qy qz qw` with `qw >= 0`.
pub fn format_trajectory_line(sp: &StampedPose) -> String {
    let mut q = sp.pose.quaternion().into_inner();
    if q.w < 0.0 {
        q = -q;
    }
    let tr = &sp.pose.translation;
    let fields = [tr.x, tr.y, tr.z, q.i, q.j, q.k, q.w]
        .iter()
        .map(|v| format_significant(*v, 9))
        .collect::<Vec<_>>()
        .join(" ");
    format!("{:.9} {fields}", sp.t)
}

/// Writes one line per pose. Timestamps must be strictly increasing.
pub fn write_trajectory(path: &Path, poses: &[StampedPose]) -> Result<()> {
    for w in poses.windows(2) {
        if w[1].t <= w[0].t {
            return Err(EventIoError::Precondition(format!(
                "trajectory timestamps must increase strictly ({} then {})",
                w[0].t, w[1].t
            )));
        }
    }
    let mut out = String::new();
    for sp in poses {
        out.push_str(&format_trajectory_line(sp));
        out.push('\n');
    }
    write_string(path, &out)
}

pub fn parse_trajectory(text: &str) -> Result<Vec<StampedPose>> {
    let mut poses = Vec::new();
    for (line, content) in data_lines(text) {
        let f = expect_fields(content, line, 8)?;
        let mut v = [0.0f64; 8];
        for (slot, token) in v.iter_mut().zip(&f) {
            *slot = parse_field(token, line, "number")?;
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        let norm = q.norm();
        if !(norm.is_finite() && (norm - 1.0).abs() < 1e-3) {
            return Err(EventIoError::Validation {
                line,
                message: format!("quaternion norm {norm} is not 1"),
            });
        }
        poses.push(StampedPose::new(
            v[0],
            PoseSE3::from_quaternion(
                UnitQuaternion::from_quaternion(q),
                Vector3::new(v[1], v[2], v[3]),
            ),
        ));
    }
    Ok(poses)
}

/// Reads a trajectory or ground-truth file.
pub fn load_trajectory(path: &Path) -> Result<Vec<StampedPose>> {
    parse_trajectory(&read_to_string(path)?)
}
