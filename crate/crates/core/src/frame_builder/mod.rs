//! Event frames: accumulation, motion correction, corner detection and
//! patch tracking.

mod em_flow;
mod frontend;
mod harris;
mod image;
mod lifetime;
mod tracker;

use std::collections::BTreeMap;

use nalgebra::{Matrix2, SymmetricEigen, Vector2};

use crate::event_io::Event;

pub use em_flow::{em_flow_correct, CorrectedFrame, EmSettings};
pub use frontend::{EventFrontend, FrontendSettings};
pub use harris::{detect_harris, harris_response, Corner, HARRIS_K};
pub use image::Image;
pub use lifetime::{
    compute_lifetime_stats, feature_lifetimes, stats_from_lifetimes, LifetimeStats,
};
pub use tracker::{track_features, LossReason, TrackOutcome, TrackerSettings};

/// Events of one half-open interval `[t0, t1)` and their count image.
#[derive(Debug, Clone, PartialEq)]
pub struct EventFrame {
    pub id: u64,
    pub t0: f64,
    pub t1: f64,
    pub events: Vec<Event>,
    pub accum: Image,
    pub is_keyframe: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feature {
    pub feature_id: u64,
    pub position: Vector2<f64>,
    pub birth_frame: u64,
    /// Frames tracked so far, including the birth frame.
    pub lifetime: u32,
    pub map_point: Option<u64>,
}

impl Feature {
    pub fn new(feature_id: u64, position: Vector2<f64>, birth_frame: u64) -> Self {
        Self {
            feature_id,
            position,
            birth_frame,
            lifetime: 1,
            map_point: None,
        }
    }
}

/// Per-feature image velocity in pixels per second.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlowEstimate {
    pub velocity: BTreeMap<u64, Vector2<f64>>,
    /// Features whose window held too few events for a flow estimate.
    pub unreliable: Vec<u64>,
}

impl FlowEstimate {
    pub fn get(&self, feature_id: u64) -> Vector2<f64> {
        self.velocity
            .get(&feature_id)
            .copied()
            .unwrap_or_else(Vector2::zeros)
    }
}

/// Builds the frame holding exactly the events with `t0 <= t < t0 + dt`.
/// `events` must be sorted by time.
pub fn accumulate_frame(
    events: &[Event],
    t0: f64,
    dt: f64,
    id: u64,
    width: usize,
    height: usize,
) -> EventFrame {
    assert!(dt > 0.0, "frame interval must be positive");
    let t1 = t0 + dt;
    let lo = events.partition_point(|e| e.t < t0);
    let hi = events.partition_point(|e| e.t < t1);
    let slice = &events[lo..hi.max(lo)];
    let mut accum = Image::new(width, height);
    for e in slice {
        if (e.x as usize) < width && (e.y as usize) < height {
            *accum.get_mut(e.x as usize, e.y as usize) += 1.0;
        }
    }
    EventFrame {
        id,
        t0,
        t1,
        events: slice.to_vec(),
        accum,
        is_keyframe: false,
    }
}

/// Smallest principal variance of a weighted point cloud: the spread across
/// the dominant structure, which shrinks as motion blur is removed.
pub fn spatial_variance(points: &[(Vector2<f64>, f64)]) -> f64 {
    let total: f64 = points.iter().map(|(_, w)| w).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mean = points.iter().map(|(p, w)| p * *w).sum::<Vector2<f64>>() / total;
    let mut cov = Matrix2::zeros();
    for (p, w) in points {
        let d = p - mean;
        cov += d * d.transpose() * *w;
    }
    cov /= total;
    SymmetricEigen::new(cov).eigenvalues.min().max(0.0)
}

/// Spatial variance of the raw (uncorrected) events of a frame.
pub fn frame_spatial_variance(frame: &EventFrame) -> f64 {
    let pts: Vec<_> = frame
        .events
        .iter()
        .map(|e| (Vector2::new(e.x as f64, e.y as f64), 1.0))
        .collect();
    spatial_variance(&pts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(t: f64, x: u16, y: u16) -> Event {
        Event::new(t, x, y, 1)
    }

    #[test]
    fn empty_interval_gives_zero_image() {
        let f = accumulate_frame(&[], 0.0, 0.03, 0, 8, 6);
        assert!(f.accum.data().iter().all(|v| *v == 0.0));
        assert!(f.events.is_empty());
    }

    #[test]
    fn counts_and_half_open_boundary() {
        let evs = [
            ev(0.00, 2, 3),
            ev(0.01, 2, 3),
            ev(0.02, 2, 3),
            ev(0.03, 2, 3),
        ];
        let f = accumulate_frame(&evs, 0.0, 0.03, 0, 8, 6);
        assert_eq!(f.accum.get(2, 3), 3.0);
        assert_eq!(f.events.len(), 3);
        let g = accumulate_frame(&evs, 0.03, 0.03, 1, 8, 6);
        assert_eq!(g.events.len(), 1);
    }

    #[test]
    fn line_has_zero_spatial_variance() {
        let pts: Vec<_> = (0..10)
            .map(|i| (Vector2::new(i as f64, 2.0 * i as f64), 1.0))
            .collect();
        assert!(spatial_variance(&pts) < 1e-12);
    }

    proptest! {
        #[test]
        fn frames_partition_the_stream(
            mut ts in proptest::collection::vec(0.0f64..1.0, 0..200),
            dt in 0.01f64..0.2,
        ) {
            ts.sort_by(f64::total_cmp);
            let evs: Vec<Event> = ts.iter().map(|t| ev(*t, 1, 1)).collect();
            let mut out = Vec::new();
            let mut k = 0u64;
            loop {
                let t0 = k as f64 * dt;
                if t0 > 1.0 { break; }
                out.extend(accumulate_frame(&evs, t0, dt, k, 4, 4).events);
                k += 1;
            }
            prop_assert_eq!(out, evs);
        }
    }
}
