//! Event stream -> feature tracks: accumulate, correct, track, refill.

use std::collections::BTreeMap;

use nalgebra::Vector2;

use super::{
    accumulate_frame, detect_harris, em_flow_correct, track_features, EmSettings, Feature,
    FlowEstimate, Image, TrackOutcome, TrackerSettings,
};
use crate::event_io::{Config, Event, TrackTable};

#[derive(Debug, Clone, PartialEq)]
pub struct FrontendSettings {
    pub width: usize,
    pub height: usize,
    pub frame_interval: f64,
    pub keyframe_period: u64,
    pub refill_threshold: usize,
    pub max_features: usize,
    pub min_feature_distance: f64,
    pub flow_window: usize,
    pub em: EmSettings,
    pub tracker: TrackerSettings,
}

impl FrontendSettings {
    pub fn from_config(c: &Config) -> Self {
        Self {
            width: c.width as usize,
            height: c.height as usize,
            frame_interval: c.frame_interval,
            keyframe_period: c.keyframe_period as u64,
            refill_threshold: c.refill_threshold,
            max_features: c.max_features,
            min_feature_distance: c.min_feature_distance,
            flow_window: c.flow_window as usize,
            em: EmSettings::default(),
            tracker: TrackerSettings {
                patch_size: c.patch_size,
                loss_ratio: c.track_loss_ratio,
                ..TrackerSettings::default()
            },
        }
    }
}

/// Stateful front end fed one frame interval at a time.
#[derive(Debug, Clone)]
pub struct EventFrontend {
    settings: FrontendSettings,
    features: Vec<Feature>,
    flow: FlowEstimate,
    prev: Option<Image>,
    next_id: u64,
    frames: u64,
}

impl EventFrontend {
    pub fn new(settings: FrontendSettings) -> Self {
        Self {
            settings,
            features: Vec::new(),
            flow: FlowEstimate::default(),
            prev: None,
            next_id: 0,
            frames: 0,
        }
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    /// Processes the next frame interval and returns the live feature
    /// positions at its start time.
    pub fn process(&mut self, events: &[Event], t0: f64) -> BTreeMap<u64, Vector2<f64>> {
        let s = &self.settings;
        let dt = s.frame_interval;
        let mut frame = accumulate_frame(events, t0, dt, self.frames, s.width, s.height);
        let keyframe = self.frames.is_multiple_of(s.keyframe_period.max(1))
            || self.features.len() < s.refill_threshold;
        frame.is_keyframe = keyframe;

        // Features are stored at the previous frame start; move them forward
        // with the last flow before looking for their events.
        let predicted: Vec<Feature> = self
            .features
            .iter()
            .map(|f| Feature {
                position: f.position + self.flow.get(f.feature_id) * dt,
                ..*f
            })
            .collect();
        let (corrected, flow) =
            em_flow_correct(&frame, &predicted, s.flow_window, &self.flow, &s.em);

        if let Some(prev) = &self.prev {
            let outcomes = track_features(
                prev,
                &self.features,
                &corrected.accum,
                &self.flow,
                dt,
                &s.tracker,
            );
            let mut survivors = Vec::with_capacity(self.features.len());
            for (f, (_, o)) in self.features.iter().zip(outcomes) {
                if let TrackOutcome::Tracked { position, .. } = o {
                    survivors.push(Feature {
                        position,
                        lifetime: f.lifetime + 1,
                        ..*f
                    });
                }
            }
            self.features = survivors;
        }
        self.flow = flow;

        if keyframe && self.features.len() < s.max_features {
            let d2 = s.min_feature_distance * s.min_feature_distance;
            for c in detect_harris(&corrected.accum, s.max_features, s.min_feature_distance) {
                if self.features.len() >= s.max_features {
                    break;
                }
                let p = Vector2::new(c.x as f64, c.y as f64);
                if self
                    .features
                    .iter()
                    .all(|f| (f.position - p).norm_squared() >= d2)
                {
                    self.features
                        .push(Feature::new(self.next_id, p, self.frames));
                    self.next_id += 1;
                }
            }
        }
        self.prev = Some(corrected.accum);
        self.frames += 1;
        self.features
            .iter()
            .map(|f| (f.feature_id, f.position))
            .collect()
    }

    /// Runs the whole (time-sorted) stream; frames start at the first event.
    pub fn run(events: &[Event], settings: FrontendSettings) -> TrackTable {
        let mut fe = EventFrontend::new(settings);
        let mut table = TrackTable::new();
        let Some(first) = events.first() else {
            return table;
        };
        let end = events.last().map_or(first.t, |e| e.t);
        let dt = fe.settings.frame_interval;
        let mut k = 0u64;
        loop {
            let t0 = first.t + k as f64 * dt;
            if t0 > end {
                break;
            }
            let obs = fe.process(events, t0);
            table.insert(k, obs);
            k += 1;
        }
        table
    }
}
