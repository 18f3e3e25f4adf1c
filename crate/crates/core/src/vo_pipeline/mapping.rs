//! Mapping lane: per-feature depth filters fed by queued frames.

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};

use super::{FrameQueue, GlobalMap, Keyframe, PendingFrame};
use crate::depth_filter::{
    compute_tau2, has_converged, init_filter, update, DepthFilterState, DepthMeasurement,
};
use crate::geometry::{angle_between, triangulate, CameraIntrinsics, PoseSE3};

/// Smallest rotation-compensated parallax, in pixels, accepted as a depth
/// measurement.
pub const MIN_PARALLAX_PX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappingSettings {
    pub intrinsics: CameraIntrinsics,
    pub depth_min: f64,
    pub depth_max: f64,
    pub convergence_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterEntry {
    pub state: DepthFilterState,
    /// World-to-camera pose of the birth keyframe.
    pub ref_pose: PoseSE3,
    /// Birth-keyframe bearing with unit z.
    pub bearing: Vector3<f64>,
    pub born_at: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MappingStats {
    pub frames: u64,
    pub updates: u64,
    pub promotions: u64,
    /// Filters dropped because their feature vanished from a later frame.
    pub stale: u64,
    /// Measurements skipped for degenerate geometry.
    pub skipped: u64,
}

/// Result of processing one queued frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepResult {
    pub updated: usize,
    pub promoted: Vec<(u64, Vector3<f64>)>,
}

#[derive(Debug, Clone)]
pub struct MappingLane {
    settings: MappingSettings,
    filters: BTreeMap<u64, FilterEntry>,
    stats: MappingStats,
    history: Vec<u64>,
}

impl MappingLane {
    pub fn new(settings: MappingSettings) -> Self {
        Self {
            settings,
            filters: BTreeMap::new(),
            stats: MappingStats::default(),
            history: Vec::new(),
        }
    }

    /// Frame indices in the order they were consumed.
    pub fn history(&self) -> &[u64] {
        &self.history
    }

    pub fn filters(&self) -> &BTreeMap<u64, FilterEntry> {
        &self.filters
    }

    pub fn stats(&self) -> MappingStats {
        self.stats
    }

    /// Seeds a filter directly (used for features adopted outside the queue).
    pub fn seed(&mut self, id: u64, pixel: &Vector2<f64>, ref_pose: PoseSE3, frame_index: u64) {
        let s = &self.settings;
        if let Ok(state) = init_filter(s.depth_min, s.depth_max, frame_index) {
            self.filters.insert(
                id,
                FilterEntry {
                    state,
                    ref_pose,
                    bearing: s.intrinsics.unproject(pixel),
                    born_at: frame_index,
                },
            );
        }
    }

    /// Updates every live filter with one frame. Does not touch the map;
    /// `known` reports ids that already have a landmark.
    pub fn process(&mut self, item: &PendingFrame, known: impl Fn(u64) -> bool) -> StepResult {
        self.stats.frames += 1;
        self.history.push(item.frame_index);
        for id in &item.new_features {
            if let Some(px) = item.observations.get(id) {
                if !known(*id) {
                    self.seed(*id, px, item.pose, item.frame_index);
                }
            }
        }
        let k = self.settings.intrinsics;
        let mut result = StepResult::default();
        let mut remove = Vec::new();
        for (id, f) in self.filters.iter_mut() {
            if known(*id) {
                remove.push(*id);
                continue;
            }
            let Some(px) = item.observations.get(id) else {
                self.stats.stale += 1;
                remove.push(*id);
                continue;
            };
            if f.born_at == item.frame_index {
                continue;
            }
            // Maps birth-keyframe coordinates into the current camera.
            let rel = item.pose * f.ref_pose.inverse();
            let x2 = epipolar_projection(&rel, &f.bearing, &k.unproject(px));
            let (lo, hi) = (f.state.d_min, f.state.d_max);
            // Near the epipole rays triangulate to noise. The gate uses the
            // parallax predicted at the current estimate so that it does not
            // select on the measurement noise.
            let predicted = rel.transform(&(f.bearing * f.state.d_mean));
            if angle_between(&(rel.rotation * f.bearing), &predicted) * k.focal() < MIN_PARALLAX_PX
            {
                self.stats.skipped += 1;
                continue;
            }
            let measurement = triangulate(&f.bearing, &x2, &rel.rotation, &rel.translation)
                .ok()
                // Depths outside the search range cannot be matches.
                .filter(|tri| tri.z1 > lo && tri.z1 < hi)
                .and_then(|tri| {
                    // The prior mean is uninformative before the first update.
                    let tau_depth = if f.state.updates == 0 {
                        tri.z1
                    } else {
                        f.state.d_mean
                    };
                    compute_tau2(&rel.inverse(), &f.bearing, tau_depth, &k)
                        .ok()
                        .map(|tau2| DepthMeasurement {
                            d_tilde: tri.z1,
                            tau2,
                        })
                });
            let Some(m) = measurement else {
                self.stats.skipped += 1;
                continue;
            };
            f.state = update(&f.state, &m);
            self.stats.updates += 1;
            result.updated += 1;
            let pinned = f.state.d_mean <= lo || f.state.d_mean >= hi;
            if !pinned && has_converged(&f.state, self.settings.convergence_ratio) {
                let p = f
                    .ref_pose
                    .inverse()
                    .transform(&(f.bearing * f.state.d_mean));
                result.promoted.push((*id, p));
                remove.push(*id);
            }
        }
        for id in remove {
            self.filters.remove(&id);
        }
        self.stats.promotions += result.promoted.len() as u64;
        result
    }

    /// Pops the oldest queued frame, processes it and publishes promotions.
    /// Returns `None` on an empty queue.
    pub fn depth_work_step(
        &mut self,
        queue: &mut FrameQueue,
        map: &mut GlobalMap,
    ) -> Option<StepResult> {
        let item = queue.pop()?;
        let r = self.process(&item, |id| map.points.contains_key(&id));
        publish(map, &item, &r);
        Some(r)
    }
}

/// Moves the normalized ray `x2` onto the epipolar plane of `x1` under
/// `rel`. Only the along-line component of the image noise carries depth
/// information; the perpendicular part merely skews the two rays, which
/// biases the closest-approach depth low at small parallax.
fn epipolar_projection(rel: &PoseSE3, x1: &Vector3<f64>, x2: &Vector3<f64>) -> Vector3<f64> {
    let n = rel.translation.cross(&(rel.rotation * x1));
    let norm = n.norm();
    if norm <= f64::EPSILON {
        return *x2;
    }
    let n = n / norm;
    let d = x2 - n * x2.dot(&n);
    if d.z <= f64::EPSILON {
        return *x2;
    }
    d / d.z
}

/// Applies one step's results to the map: promotions and the keyframe record.
pub(crate) fn publish(map: &mut GlobalMap, item: &PendingFrame, r: &StepResult) {
    for (id, p) in &r.promoted {
        map.insert_point(*id, *p);
    }
    if item.is_keyframe {
        map.keyframes.insert(
            item.frame_index,
            Keyframe {
                pose: item.pose,
                features: item.observations.keys().copied().collect(),
            },
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, Twist};

    fn settings() -> MappingSettings {
        MappingSettings {
            intrinsics: CameraIntrinsics::new(300.0, 300.0, 320.0, 240.0, 640, 480).unwrap(),
            depth_min: 0.5,
            depth_max: 50.0,
            convergence_ratio: 0.005,
        }
    }

    fn frame(i: u64, pose: PoseSE3, obs: &[(u64, Vector3<f64>)], new: bool) -> PendingFrame {
        let k = settings().intrinsics;
        PendingFrame {
            frame_index: i,
            t: i as f64 * 0.03,
            pose,
            observations: obs
                .iter()
                .map(|(id, p)| (*id, project(&pose.transform(p), &k).unwrap()))
                .collect(),
            is_keyframe: new,
            new_features: if new {
                obs.iter().map(|(id, _)| *id).collect()
            } else {
                vec![]
            },
        }
    }

    fn sideways(i: u64) -> PoseSE3 {
        // Camera centre moves 0.15 m along +x per frame.
        PoseSE3::exp(&Twist::new(
            Vector3::new(-0.15 * i as f64, 0.0, 0.0),
            Vector3::zeros(),
        ))
    }

    #[test]
    fn good_parallax_promotes_within_ten_steps() {
        let p = Vector3::new(0.3, -0.2, 6.0);
        let mut lane = MappingLane::new(settings());
        let mut queue = FrameQueue::new(64);
        let mut map = GlobalMap::default();
        queue.push(frame(0, sideways(0), &[(7, p)], true));
        lane.depth_work_step(&mut queue, &mut map);
        let mut promoted_at = None;
        for i in 1..=10 {
            queue.push(frame(i, sideways(i), &[(7, p)], false));
            let r = lane.depth_work_step(&mut queue, &mut map).unwrap();
            if !r.promoted.is_empty() {
                promoted_at = Some(i);
                break;
            }
        }
        let step = promoted_at.expect("not promoted within 10 updates");
        assert!((4..=10).contains(&step), "promoted at {step}");
        assert!((map.points[&7] - p).norm() < 0.05, "{}", map.points[&7]);
    }

    #[test]
    fn empty_queue_is_a_noop() {
        let mut lane = MappingLane::new(settings());
        assert!(lane
            .depth_work_step(&mut FrameQueue::new(4), &mut GlobalMap::default())
            .is_none());
    }

    #[test]
    fn zero_baseline_leaves_filter_untouched() {
        let p = Vector3::new(0.0, 0.0, 5.0);
        let mut lane = MappingLane::new(settings());
        lane.process(&frame(0, sideways(0), &[(1, p)], true), |_| false);
        let before = lane.filters()[&1].state;
        lane.process(&frame(1, sideways(0), &[(1, p)], false), |_| false);
        assert_eq!(lane.filters()[&1].state, before);
        assert_eq!(lane.stats().skipped, 1);
    }

    #[test]
    fn vanished_feature_is_stale() {
        let p = Vector3::new(0.0, 0.0, 5.0);
        let mut lane = MappingLane::new(settings());
        lane.process(&frame(0, sideways(0), &[(1, p)], true), |_| false);
        lane.process(&frame(1, sideways(1), &[], false), |_| false);
        assert!(lane.filters().is_empty());
        assert_eq!(lane.stats().stale, 1);
    }
}
