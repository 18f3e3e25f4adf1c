use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::Vector3;

use crate::geometry::PoseSE3;

#[derive(Debug, Clone, PartialEq)]
pub struct Keyframe {
    /// World-to-camera pose.
    pub pose: PoseSE3,
    pub features: BTreeSet<u64>,
}

/// Landmarks (keyed by the feature id that produced them) and keyframes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GlobalMap {
    pub points: BTreeMap<u64, Vector3<f64>>,
    pub keyframes: BTreeMap<u64, Keyframe>,
}

impl GlobalMap {
    /// Inserts a landmark once; later inserts under the same id are ignored so
    /// that promoted points never change.
    pub fn insert_point(&mut self, id: u64, p: Vector3<f64>) -> bool {
        if self.points.contains_key(&id) {
            return false;
        }
        self.points.insert(id, p);
        true
    }

    /// `id x y z` per landmark.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (id, p) in &self.points {
            let _ = writeln!(out, "{} {:.9} {:.9} {:.9}", id, p.x, p.y, p.z);
        }
        out
    }
}
