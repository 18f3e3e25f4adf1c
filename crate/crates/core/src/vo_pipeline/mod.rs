//! Monocular odometry over feature tracks: two-view bootstrap, per-frame
//! pose tracking against the landmark map, and depth-filter mapping fed
//! through a bounded FIFO, either interleaved or on a separate thread.

mod map;
mod mapping;
mod queue;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::depth_filter::compute_tau2;
use crate::event_io::{Config, StampedPose, TrackTable};
use crate::geometry::{
    angle_between, decompose_essential, eight_point, triangulate, CameraIntrinsics, PoseSE3, Twist,
};
use crate::pose_optimizer::{optimize_pose, Observation, OptimizerReport, OptimizerSettings};

/// Largest one-pixel depth uncertainty, relative to depth, of a point
/// triangulated directly at bootstrap.
pub const BOOTSTRAP_MAX_DEPTH_UNCERTAINTY: f64 = 0.1;

pub use map::{GlobalMap, Keyframe};
pub use mapping::{FilterEntry, MappingLane, MappingSettings, MappingStats, StepResult};
pub use queue::{FrameQueue, PendingFrame};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("invalid pipeline settings: {0}")]
    InvalidSettings(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    AwaitingFirstFrame,
    AwaitingSecondFrame,
    Tracking,
    /// Terminal.
    Lost,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::AwaitingFirstFrame => "awaiting-first-frame",
            Mode::AwaitingSecondFrame => "awaiting-second-frame",
            Mode::Tracking => "tracking",
            Mode::Lost => "lost",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecutionMode {
    /// One depth step after every tracked frame, on the calling thread.
    Deterministic,
    /// Depth work on a background thread.
    Concurrent,
}

/// Feature observations of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackedFrame {
    pub id: u64,
    pub t: f64,
    pub observations: BTreeMap<u64, Vector2<f64>>,
}

/// Frames from a track table, stamped `frame_id * frame_interval`.
pub fn frames_from_tracks(tracks: &TrackTable, frame_interval: f64) -> Vec<TrackedFrame> {
    tracks
        .iter()
        .map(|(id, obs)| TrackedFrame {
            id: *id,
            t: *id as f64 * frame_interval,
            observations: obs.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSettings {
    pub intrinsics: CameraIntrinsics,
    pub min_tracked_features: usize,
    pub keyframe_period: u64,
    pub refill_threshold: usize,
    pub max_features: usize,
    pub min_feature_distance: f64,
    /// Length given to the bootstrap translation; fixes the map scale.
    pub bootstrap_baseline: f64,
    /// Median pixel displacement required before bootstrapping.
    pub bootstrap_min_parallax: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub convergence_ratio: f64,
    pub queue_capacity: usize,
    pub optimizer: OptimizerSettings,
}

impl PipelineSettings {
    pub fn from_config(c: &Config) -> Self {
        Self {
            intrinsics: c.intrinsics(),
            min_tracked_features: c.min_tracked_features,
            keyframe_period: c.keyframe_period as u64,
            refill_threshold: c.refill_threshold,
            max_features: c.max_features,
            min_feature_distance: c.min_feature_distance,
            bootstrap_baseline: c.bootstrap_baseline,
            bootstrap_min_parallax: c.bootstrap_min_parallax,
            depth_min: c.depth_min,
            depth_max: c.depth_max,
            convergence_ratio: c.depth_convergence_ratio,
            queue_capacity: c.queue_capacity,
            optimizer: OptimizerSettings {
                max_iterations: c.gn_max_iterations,
                tolerance: c.gn_tolerance,
                huber_delta: c.huber_delta,
                ..OptimizerSettings::default()
            },
        }
    }

    fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidSettings(m.into()));
        if self.intrinsics.validate().is_err() {
            return bad("intrinsics");
        }
        if self.min_tracked_features < 8 {
            return bad("min_tracked_features must be at least 8");
        }
        if self.keyframe_period == 0 || self.queue_capacity == 0 {
            return bad("keyframe_period and queue_capacity must be positive");
        }
        if !(self.bootstrap_baseline > 0.0) {
            return bad("bootstrap_baseline must be positive");
        }
        if !(self.depth_min > 0.0 && self.depth_min < self.depth_max) {
            return bad("depth range");
        }
        Ok(())
    }

    fn mapping(&self) -> MappingSettings {
        MappingSettings {
            intrinsics: self.intrinsics,
            depth_min: self.depth_min,
            depth_max: self.depth_max,
            convergence_ratio: self.convergence_ratio,
        }
    }
}

/// Counters written to the run report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunReport {
    pub frames: u64,
    pub keyframes: u64,
    pub bootstrap_frame: Option<u64>,
    pub bootstrap_points: usize,
    pub held_frames: u64,
    pub promotions: u64,
    pub queue_drops: u64,
    pub stale_features: u64,
    pub skipped_measurements: u64,
    pub lost_at: Option<u64>,
    pub map_points: usize,
    /// `(frame id, new mode)` for every mode change.
    pub transitions: Vec<(u64, Mode)>,
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<u64>| v.map_or("none".to_string(), |x| x.to_string());
        writeln!(f, "frames {}", self.frames)?;
        writeln!(f, "keyframes {}", self.keyframes)?;
        writeln!(f, "bootstrap_frame {}", opt(self.bootstrap_frame))?;
        writeln!(f, "bootstrap_points {}", self.bootstrap_points)?;
        writeln!(f, "held_frames {}", self.held_frames)?;
        writeln!(f, "promotions {}", self.promotions)?;
        writeln!(f, "map_points {}", self.map_points)?;
        writeln!(f, "queue_drops {}", self.queue_drops)?;
        writeln!(f, "stale_features {}", self.stale_features)?;
        writeln!(f, "skipped_measurements {}", self.skipped_measurements)?;
        writeln!(f, "lost_at {}", opt(self.lost_at))
    }
}

/// What happened to one input frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutcome {
    pub mode: Mode,
    /// World-to-camera pose, when one was assigned.
    pub pose: Option<PoseSE3>,
    pub report: Option<OptimizerReport>,
    pub is_keyframe: bool,
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    /// World-to-camera poses in time order.
    pub trajectory: Vec<StampedPose>,
    pub map: GlobalMap,
    pub report: RunReport,
    /// Frame indices in the order the mapping lane consumed them.
    pub mapping_order: Vec<u64>,
}

impl RunOutput {
    /// Camera-to-world poses (camera centre and orientation in the world).
    pub fn camera_trajectory(&self) -> Vec<StampedPose> {
        self.trajectory
            .iter()
            .map(|s| StampedPose::new(s.t, s.pose.inverse()))
            .collect()
    }
}

struct QueueState {
    queue: FrameQueue,
    closed: bool,
}

type SharedQueue = Arc<(Mutex<QueueState>, Condvar)>;

enum Lane {
    Inline(MappingLane),
    Thread(JoinHandle<MappingLane>),
}

pub struct VoPipeline {
    settings: PipelineSettings,
    mode: Mode,
    pose: PoseSE3,
    frame_index: u64,
    reference: Option<TrackedFrame>,
    reference_index: u64,
    deferred: Vec<TrackedFrame>,
    /// Live features and their latest pixel.
    live: BTreeMap<u64, Vector2<f64>>,
    trajectory: Vec<StampedPose>,
    map: Arc<RwLock<GlobalMap>>,
    queue: SharedQueue,
    lane: Lane,
    report: RunReport,
}

impl VoPipeline {
    pub fn new(
        settings: PipelineSettings,
        execution: ExecutionMode,
    ) -> Result<Self, PipelineError> {
        settings.validate()?;
        let map = Arc::new(RwLock::new(GlobalMap::default()));
        let queue: SharedQueue = Arc::new((
            Mutex::new(QueueState {
                queue: FrameQueue::new(settings.queue_capacity),
                closed: false,
            }),
            Condvar::new(),
        ));
        let lane_state = MappingLane::new(settings.mapping());
        let lane = match execution {
            ExecutionMode::Deterministic => Lane::Inline(lane_state),
            ExecutionMode::Concurrent => {
                let (q, m) = (Arc::clone(&queue), Arc::clone(&map));
                Lane::Thread(std::thread::spawn(move || mapping_thread(lane_state, q, m)))
            }
        };
        Ok(Self {
            settings,
            mode: Mode::AwaitingFirstFrame,
            pose: PoseSE3::identity(),
            frame_index: 0,
            reference: None,
            reference_index: 0,
            deferred: Vec::new(),
            live: BTreeMap::new(),
            trajectory: Vec::new(),
            map,
            queue,
            lane,
            report: RunReport::default(),
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn pose(&self) -> PoseSE3 {
        self.pose
    }

    /// Snapshot of the current map.
    pub fn map(&self) -> GlobalMap {
        self.map.read().expect("map lock poisoned").clone()
    }

    pub fn queue_len(&self) -> usize {
        self.queue
            .0
            .lock()
            .expect("queue lock poisoned")
            .queue
            .len()
    }

    fn set_mode(&mut self, frame_id: u64, mode: Mode) {
        if self.mode != mode {
            log::info!("frame {frame_id}: {} -> {mode}", self.mode);
            self.mode = mode;
            self.report.transitions.push((frame_id, mode));
        }
    }

    /// Feeds one frame through the tracking lane.
    pub fn process(&mut self, frame: &TrackedFrame) -> FrameOutcome {
        let outcome = match self.mode {
            Mode::Lost => FrameOutcome {
                mode: Mode::Lost,
                pose: None,
                report: None,
                is_keyframe: false,
            },
            Mode::AwaitingFirstFrame => {
                self.reference = Some(frame.clone());
                self.reference_index = self.frame_index;
                self.set_mode(frame.id, Mode::AwaitingSecondFrame);
                FrameOutcome {
                    mode: self.mode,
                    pose: Some(PoseSE3::identity()),
                    report: None,
                    is_keyframe: true,
                }
            }
            Mode::AwaitingSecondFrame => self.try_bootstrap(frame),
            Mode::Tracking => self.track(frame),
        };
        self.report.frames += 1;
        self.frame_index += 1;
        outcome
    }

    fn deferred_outcome(&self) -> FrameOutcome {
        FrameOutcome {
            mode: self.mode,
            pose: None,
            report: None,
            is_keyframe: false,
        }
    }

    fn try_bootstrap(&mut self, frame: &TrackedFrame) -> FrameOutcome {
        let reference = self.reference.clone().expect("reference frame set");
        let k = self.settings.intrinsics;
        let common: Vec<u64> = reference
            .observations
            .keys()
            .filter(|id| frame.observations.contains_key(id))
            .copied()
            .collect();
        if common.len() < 8 {
            // Tracks only die from here on; restart from this frame.
            log::debug!(
                "frame {}: {} common tracks, re-anchoring bootstrap",
                frame.id,
                common.len()
            );
            self.reference = Some(frame.clone());
            self.reference_index = self.frame_index;
            self.deferred.clear();
            return self.deferred_outcome();
        }
        let mut disp: Vec<f64> = common
            .iter()
            .map(|id| (frame.observations[id] - reference.observations[id]).norm())
            .collect();
        disp.sort_by(f64::total_cmp);
        if disp[disp.len() / 2] < self.settings.bootstrap_min_parallax {
            self.deferred.push(frame.clone());
            return self.deferred_outcome();
        }
        let pairs: Vec<(Vector3<f64>, Vector3<f64>)> = common
            .iter()
            .map(|id| {
                (
                    k.unproject(&reference.observations[id]),
                    k.unproject(&frame.observations[id]),
                )
            })
            .collect();
        let relative = eight_point(&pairs).and_then(|e| decompose_essential(e.matrix(), &pairs));
        let Ok(relative) = relative else {
            log::debug!("frame {}: bootstrap geometry degenerate", frame.id);
            self.deferred.push(frame.clone());
            return self.deferred_outcome();
        };
        let t = relative.translation * self.settings.bootstrap_baseline;
        let back = PoseSE3::from_parts(relative.rotation, t).inverse();
        // Points near the epipole are left to the depth filters.
        let points: Vec<(u64, Vector3<f64>)> = common
            .iter()
            .zip(&pairs)
            .filter_map(|(id, (x1, x2))| {
                let parallax = angle_between(&(relative.rotation * x1), x2);
                if parallax * k.focal() * BOOTSTRAP_MAX_DEPTH_UNCERTAINTY < 1.0 {
                    return None;
                }
                let tri = triangulate(x1, x2, &relative.rotation, &t).ok()?;
                let tau = compute_tau2(&back, x1, tri.z1, &k).ok()?.sqrt();
                (tau <= BOOTSTRAP_MAX_DEPTH_UNCERTAINTY * tri.z1).then(|| (*id, x1 * tri.z1))
            })
            .collect();
        if points.len() < 8 {
            self.deferred.push(frame.clone());
            return self.deferred_outcome();
        }

        let pose1 = PoseSE3::from_parts(relative.rotation, t);
        {
            let mut map = self.map.write().expect("map lock poisoned");
            for (id, p) in &points {
                map.insert_point(*id, *p);
            }
        }
        self.report.bootstrap_frame = Some(frame.id);
        self.report.bootstrap_points = points.len();
        self.report.keyframes += 2;

        self.trajectory
            .push(StampedPose::new(reference.t, PoseSE3::identity()));
        let span = frame.t - reference.t;
        let log1 = pose1.log().unwrap_or_else(|_| Twist::zero());
        for d in std::mem::take(&mut self.deferred) {
            let s = if span > 0.0 {
                (d.t - reference.t) / span
            } else {
                0.0
            };
            let guess = PoseSE3::exp(&Twist(log1.0 * s));
            if let Some((pose, _)) = self.localize(&d, &guess) {
                self.trajectory.push(StampedPose::new(d.t, pose));
            }
        }
        self.trajectory.push(StampedPose::new(frame.t, pose1));
        self.pose = pose1;
        self.set_mode(frame.id, Mode::Tracking);

        // Reference keyframe for the mapping lane, then the bootstrap frame.
        self.push_pending(PendingFrame {
            frame_index: self.reference_index,
            t: reference.t,
            pose: PoseSE3::identity(),
            observations: reference.observations.clone(),
            is_keyframe: true,
            new_features: Vec::new(),
        });
        self.live = points
            .iter()
            .map(|(id, _)| (*id, frame.observations[id]))
            .collect();
        let new_features = self.adopt(frame);
        self.push_pending(PendingFrame {
            frame_index: self.frame_index,
            t: frame.t,
            pose: pose1,
            observations: self.live_observations(frame),
            is_keyframe: true,
            new_features,
        });
        FrameOutcome {
            mode: self.mode,
            pose: Some(pose1),
            report: None,
            is_keyframe: true,
        }
    }

    /// Map-bound observations of `frame`, skipping points nearer than the
    /// depth range under `pose`.
    fn bound_observations(
        &self,
        frame: &TrackedFrame,
        ids: impl Iterator<Item = u64>,
        pose: &PoseSE3,
    ) -> Vec<(u64, Observation)> {
        let map = self.map.read().expect("map lock poisoned");
        ids.filter_map(|id| {
            let p = map.points.get(&id)?;
            (pose.transform(p).z >= self.settings.depth_min)
                .then(|| (id, Observation::new(frame.observations[&id], *p)))
        })
        .collect()
    }

    /// Pose of `frame` against the map alone.
    fn localize(
        &self,
        frame: &TrackedFrame,
        guess: &PoseSE3,
    ) -> Option<(PoseSE3, OptimizerReport)> {
        let obs: Vec<Observation> = self
            .bound_observations(frame, frame.observations.keys().copied(), guess)
            .into_iter()
            .map(|(_, o)| o)
            .collect();
        if obs.len() < self.settings.min_tracked_features {
            return None;
        }
        optimize_pose(
            guess,
            &obs,
            &self.settings.intrinsics,
            &self.settings.optimizer,
        )
        .ok()
    }

    fn track(&mut self, frame: &TrackedFrame) -> FrameOutcome {
        self.live
            .retain(|id, _| frame.observations.contains_key(id));
        for (id, px) in self.live.iter_mut() {
            *px = frame.observations[id];
        }
        if self.live.is_empty() {
            log::warn!("frame {}: every tracked feature was lost", frame.id);
            return self.lose(frame.id);
        }
        let obs = self.bound_observations(frame, self.live.keys().copied(), &self.pose);
        let mut report = None;
        if obs.is_empty() {
            // No landmarks yet: keep the prediction and keep mapping.
            log::debug!("frame {}: no map-bound features, holding pose", frame.id);
            self.report.held_frames += 1;
        } else if obs.len() < self.settings.min_tracked_features {
            log::warn!("frame {}: only {} map-bound features", frame.id, obs.len());
            return self.lose(frame.id);
        } else {
            let obs: Vec<Observation> = obs.into_iter().map(|(_, o)| o).collect();
            match optimize_pose(
                &self.pose,
                &obs,
                &self.settings.intrinsics,
                &self.settings.optimizer,
            ) {
                Ok((pose, r)) => {
                    self.pose = pose;
                    report = Some(r);
                }
                Err(e) => {
                    log::warn!("frame {}: pose optimization failed: {e}", frame.id);
                    return self.lose(frame.id);
                }
            }
        }
        let is_keyframe = self
            .frame_index
            .is_multiple_of(self.settings.keyframe_period)
            || self.live.len() < self.settings.refill_threshold;
        let new_features = if is_keyframe {
            self.report.keyframes += 1;
            self.adopt(frame)
        } else {
            Vec::new()
        };
        self.push_pending(PendingFrame {
            frame_index: self.frame_index,
            t: frame.t,
            pose: self.pose,
            observations: self.live_observations(frame),
            is_keyframe,
            new_features,
        });
        self.trajectory.push(StampedPose::new(frame.t, self.pose));
        FrameOutcome {
            mode: self.mode,
            pose: Some(self.pose),
            report,
            is_keyframe,
        }
    }

    fn lose(&mut self, frame_id: u64) -> FrameOutcome {
        self.report.lost_at = Some(frame_id);
        self.set_mode(frame_id, Mode::Lost);
        FrameOutcome {
            mode: Mode::Lost,
            pose: None,
            report: None,
            is_keyframe: false,
        }
    }

    fn live_observations(&self, frame: &TrackedFrame) -> BTreeMap<u64, Vector2<f64>> {
        self.live
            .keys()
            .map(|id| (*id, frame.observations[id]))
            .collect()
    }

    /// Starts following untracked features of a keyframe that keep their
    /// distance from live ones; returns the adopted ids.
    fn adopt(&mut self, frame: &TrackedFrame) -> Vec<u64> {
        let d2 = self.settings.min_feature_distance.powi(2);
        let mut added = Vec::new();
        for (id, px) in &frame.observations {
            if self.live.len() >= self.settings.max_features {
                break;
            }
            if self.live.contains_key(id) {
                continue;
            }
            if self.live.values().all(|q| (q - px).norm_squared() >= d2) {
                self.live.insert(*id, *px);
                added.push(*id);
            }
        }
        added
    }

    fn push_pending(&mut self, item: PendingFrame) {
        let (lock, cv) = &*self.queue;
        {
            let mut q = lock.lock().expect("queue lock poisoned");
            q.queue.push(item);
        }
        cv.notify_one();
        if let Lane::Inline(lane) = &mut self.lane {
            let mut q = lock.lock().expect("queue lock poisoned");
            let mut map = self.map.write().expect("map lock poisoned");
            lane.depth_work_step(&mut q.queue, &mut map);
        }
    }

    /// Stops the mapping lane (draining what is queued) and returns results.
    pub fn finish(self) -> RunOutput {
        let (lock, cv) = &*self.queue;
        lock.lock().expect("queue lock poisoned").closed = true;
        cv.notify_all();
        let lane = match self.lane {
            Lane::Inline(mut lane) => {
                let mut q = lock.lock().expect("queue lock poisoned");
                let mut map = self.map.write().expect("map lock poisoned");
                while lane.depth_work_step(&mut q.queue, &mut map).is_some() {}
                lane
            }
            Lane::Thread(handle) => handle.join().expect("mapping thread panicked"),
        };
        let map = self.map.read().expect("map lock poisoned").clone();
        let stats = lane.stats();
        let mut report = self.report;
        report.promotions = stats.promotions;
        report.stale_features = stats.stale;
        report.skipped_measurements = stats.skipped;
        report.queue_drops = lock.lock().expect("queue lock poisoned").queue.dropped();
        report.map_points = map.points.len();
        let mut trajectory = self.trajectory;
        trajectory.sort_by(|a, b| a.t.total_cmp(&b.t));
        RunOutput {
            trajectory,
            map,
            report,
            mapping_order: lane.history().to_vec(),
        }
    }

    /// Runs every frame, stopping early once tracking is lost.
    pub fn run(
        settings: PipelineSettings,
        execution: ExecutionMode,
        frames: &[TrackedFrame],
    ) -> Result<RunOutput, PipelineError> {
        Self::run_paced(settings, execution, frames, None)
    }

    /// Like [`VoPipeline::run`], but with `speed = Some(s)` frame `k` is not
    /// processed before `(t_k - t_0) / s` seconds of wall time have passed,
    /// as if a camera were delivering the frames. Offline replay otherwise
    /// outruns a concurrent mapping lane; tracking itself never waits on it.
    pub fn run_paced(
        settings: PipelineSettings,
        execution: ExecutionMode,
        frames: &[TrackedFrame],
        speed: Option<f64>,
    ) -> Result<RunOutput, PipelineError> {
        if let Some(s) = speed {
            if !(s.is_finite() && s > 0.0) {
                return Err(PipelineError::InvalidSettings(format!(
                    "replay speed must be positive, got {s}"
                )));
            }
        }
        let mut p = VoPipeline::new(settings, execution)?;
        let start = Instant::now();
        let t0 = frames.first().map_or(0.0, |f| f.t);
        for f in frames {
            if let Some(s) = speed {
                let due = Duration::from_secs_f64(((f.t - t0) / s).max(0.0));
                if let Some(wait) = due.checked_sub(start.elapsed()) {
                    std::thread::sleep(wait);
                }
            }
            if p.process(f).mode == Mode::Lost {
                break;
            }
        }
        Ok(p.finish())
    }
}

fn mapping_thread(
    mut lane: MappingLane,
    queue: SharedQueue,
    map: Arc<RwLock<GlobalMap>>,
) -> MappingLane {
    let (lock, cv) = &*queue;
    loop {
        let item = {
            let mut q = lock.lock().expect("queue lock poisoned");
            loop {
                if let Some(item) = q.queue.pop() {
                    break Some(item);
                }
                if q.closed {
                    break None;
                }
                q = cv.wait(q).expect("queue lock poisoned");
            }
        };
        let Some(item) = item else {
            return lane;
        };
        let r = {
            let m = map.read().expect("map lock poisoned");
            lane.process(&item, |id| m.points.contains_key(&id))
        };
        // Promotions of one step become visible together.
        let mut m = map.write().expect("map lock poisoned");
        mapping::publish(&mut m, &item, &r);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(320.0, 320.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn settings() -> PipelineSettings {
        let mut c = Config::with_sensor(640, 480, 320.0, 320.0, 320.0, 240.0);
        c.bootstrap_baseline = 0.5;
        c.refill_threshold = 0;
        PipelineSettings::from_config(&c)
    }

    /// Points 4-8 m in front of the origin camera.
    fn cloud(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-2.5..2.5),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(4.0..8.0),
                )
            })
            .collect()
    }

    fn observe(id: u64, pose: &PoseSE3, points: &[(u64, Vector3<f64>)]) -> TrackedFrame {
        let k = intrinsics();
        let observations = points
            .iter()
            .filter_map(|(i, p)| project(&pose.transform(p), &k).ok().map(|px| (*i, px)))
            .collect();
        TrackedFrame {
            id,
            t: id as f64 * 0.03,
            observations,
        }
    }

    fn numbered(points: &[Vector3<f64>], first: u64) -> Vec<(u64, Vector3<f64>)> {
        points
            .iter()
            .enumerate()
            .map(|(i, p)| (first + i as u64, *p))
            .collect()
    }

    fn pose1() -> PoseSE3 {
        let r = Rotation3::from_euler_angles(0.01, -0.02, 0.005);
        PoseSE3::from_parts(r, Vector3::new(-0.5, 0.02, -0.05).normalize() * 0.5)
    }

    /// Bootstrapped pipeline plus the pose of frame 1 and the map points.
    fn bootstrapped(extra: usize) -> (VoPipeline, Vec<(u64, Vector3<f64>)>) {
        let pts = numbered(&cloud(40, 1), 0);
        let mut vo = VoPipeline::new(settings(), ExecutionMode::Deterministic).unwrap();
        vo.process(&observe(0, &PoseSE3::identity(), &pts));
        let mut f1 = observe(1, &pose1(), &pts);
        for i in 0..extra {
            let px = Vector2::new(40.0 + 30.0 * i as f64, 450.0);
            f1.observations.insert(1000 + i as u64, px);
        }
        assert_eq!(vo.process(&f1).mode, Mode::Tracking);
        (vo, pts)
    }

    #[test]
    fn bootstrap_recovers_two_view_geometry() {
        let (vo, pts) = bootstrapped(0);
        let truth = pose1();
        assert!(vo.pose().rotation_distance(&truth) < 1e-6);
        assert!(vo.pose().translation_distance(&truth) < 1e-6);
        let map = vo.map();
        assert_eq!(map.points.len(), 40);
        for (id, p) in &pts {
            assert!((map.points[id] - p).norm() < 1e-6, "point {id}");
        }
    }

    #[test]
    fn seven_tracks_defer_bootstrap() {
        let pts = numbered(&cloud(7, 2), 0);
        let mut vo = VoPipeline::new(settings(), ExecutionMode::Deterministic).unwrap();
        vo.process(&observe(0, &PoseSE3::identity(), &pts));
        let out = vo.process(&observe(1, &pose1(), &pts));
        assert_eq!(out.mode, Mode::AwaitingSecondFrame);
        assert_eq!(out.pose, None);
        assert!(vo.map().points.is_empty());
    }

    #[test]
    fn zero_motion_defers_bootstrap() {
        let pts = numbered(&cloud(40, 3), 0);
        let mut vo = VoPipeline::new(settings(), ExecutionMode::Deterministic).unwrap();
        vo.process(&observe(0, &PoseSE3::identity(), &pts));
        for id in 1..4 {
            let out = vo.process(&observe(id, &PoseSE3::identity(), &pts));
            assert_eq!(out.mode, Mode::AwaitingSecondFrame);
        }
        // Motion arriving later still bootstraps.
        assert_eq!(vo.process(&observe(4, &pose1(), &pts)).mode, Mode::Tracking);
    }

    #[test]
    fn unbound_features_hold_the_pose() {
        let (mut vo, _) = bootstrapped(10);
        let held = vo.pose();
        let f2 = TrackedFrame {
            id: 2,
            t: 0.06,
            observations: (0..10)
                .map(|i| (1000 + i, Vector2::new(41.0 + 30.0 * i as f64, 450.0)))
                .collect(),
        };
        let out = vo.process(&f2);
        assert_eq!(out.mode, Mode::Tracking);
        assert_eq!(out.pose, Some(held));
        assert!(out.report.is_none());
        let run = vo.finish();
        assert_eq!(run.report.held_frames, 1);
        assert_eq!(run.mapping_order.last(), Some(&2));
    }

    #[test]
    fn too_few_bound_features_lose_tracking() {
        let (mut vo, pts) = bootstrapped(10);
        let mut f2 = observe(2, &pose1(), &pts[..5]);
        f2.observations.insert(1000, Vector2::new(40.0, 450.0));
        assert_eq!(vo.process(&f2).mode, Mode::Lost);
        assert_eq!(vo.finish().report.lost_at, Some(2));
    }

    #[test]
    fn losing_every_track_is_terminal() {
        let (mut vo, pts) = bootstrapped(0);
        let empty = TrackedFrame {
            id: 2,
            t: 0.06,
            observations: BTreeMap::new(),
        };
        assert_eq!(vo.process(&empty).mode, Mode::Lost);
        // A well-observed frame does not revive a lost run.
        let out = vo.process(&observe(3, &pose1(), &pts));
        assert_eq!(out.mode, Mode::Lost);
        assert_eq!(out.pose, None);
        let run = vo.finish();
        assert_eq!(
            run.report.transitions,
            vec![
                (0, Mode::AwaitingSecondFrame),
                (1, Mode::Tracking),
                (2, Mode::Lost)
            ]
        );
    }

    /// Camera moving forward 0.1 m per frame through a wide cloud.
    fn forward_run(frames: u64) -> (Vec<TrackedFrame>, Vec<PoseSE3>) {
        let pts = numbered(&cloud(80, 4), 0);
        let poses: Vec<PoseSE3> = (0..frames)
            .map(|i| {
                let c = Vector3::new(0.02 * i as f64, 0.0, 0.1 * i as f64);
                PoseSE3::from_parts(Rotation3::identity(), -c)
            })
            .collect();
        let frames = poses
            .iter()
            .enumerate()
            .map(|(i, p)| observe(i as u64, p, &pts))
            .collect();
        (frames, poses)
    }

    #[test]
    fn periodic_keyframes() {
        let (frames, _) = forward_run(12);
        let mut vo = VoPipeline::new(settings(), ExecutionMode::Deterministic).unwrap();
        let keyframes: Vec<u64> = frames
            .iter()
            .filter_map(|f| {
                let out = vo.process(f);
                assert_ne!(out.mode, Mode::Lost);
                out.is_keyframe.then_some(f.id)
            })
            .collect();
        let boot = vo.finish().report.bootstrap_frame.unwrap();
        let periodic: Vec<u64> = keyframes.into_iter().filter(|i| *i > boot).collect();
        let expected: Vec<u64> = (boot + 1..12).filter(|i| i % 5 == 0).collect();
        assert_eq!(periodic, expected);
    }

    #[test]
    fn low_track_count_forces_keyframe() {
        let (mut vo, pts) = bootstrapped(0);
        vo.settings.refill_threshold = 20;
        let out = vo.process(&observe(2, &pose1(), &pts[..12]));
        assert_eq!(out.mode, Mode::Tracking);
        assert!(out.is_keyframe, "frame index 2 is not periodic");
    }

    #[test]
    fn keyframes_adopt_only_distant_features() {
        let (mut vo, pts) = bootstrapped(0);
        let mut f = observe(2, &pose1(), &pts);
        let near = f.observations[&0] + Vector2::new(3.0, 0.0);
        f.observations.insert(500, near);
        f.observations.insert(501, Vector2::new(5.0, 5.0));
        vo.frame_index = 5;
        assert!(vo.process(&f).is_keyframe);
        assert!(!vo.live.contains_key(&500));
        assert!(vo.live.contains_key(&501));
    }

    #[test]
    fn noiseless_replay_tracks_exact_poses() {
        let (frames, poses) = forward_run(20);
        let mut s = settings();
        s.bootstrap_baseline = 1.0;
        let mut vo = VoPipeline::new(s, ExecutionMode::Deterministic).unwrap();
        let mut checked = 0;
        let mut boot = None;
        for (i, f) in frames.iter().enumerate() {
            let before = vo.map().points.len();
            let out = vo.process(f);
            let (Mode::Tracking, Some(pose)) = (out.mode, out.pose) else {
                continue;
            };
            let b = *boot.get_or_insert(i);
            // Only bootstrap points, before any filtered point is used.
            if b != i && vo.map().points.len() != before {
                break;
            }
            if b != i && out.report.is_none() {
                continue;
            }
            let scale = poses[b].center().metric_distance(&poses[0].center());
            let truth = poses[i] * poses[0].inverse();
            let est = PoseSE3::from_parts(pose.rotation, pose.translation * scale);
            assert!(est.rotation_distance(&truth) < 1e-5, "frame {i}");
            assert!(est.translation_distance(&truth) < 1e-5, "frame {i}");
            checked += 1;
        }
        assert!(checked >= 5, "{checked}");
    }

    #[test]
    fn deterministic_runs_are_identical_and_fifo() {
        let (frames, _) = forward_run(30);
        let a = VoPipeline::run(settings(), ExecutionMode::Deterministic, &frames).unwrap();
        let b = VoPipeline::run(settings(), ExecutionMode::Deterministic, &frames).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.map.points, b.map.points);
        assert!(a.mapping_order.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(
            a.mapping_order.len(),
            a.trajectory.len() - a.report.bootstrap_frame.unwrap() as usize + 1
        );
    }

    #[test]
    fn concurrent_lane_consumes_in_order() {
        let (frames, _) = forward_run(30);
        let run = VoPipeline::run(settings(), ExecutionMode::Concurrent, &frames).unwrap();
        assert!(run.mapping_order.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(run.report.lost_at, None);
    }

    #[test]
    fn rejects_invalid_settings() {
        let mut s = settings();
        s.min_tracked_features = 7;
        assert!(VoPipeline::new(s, ExecutionMode::Deterministic).is_err());
    }

    #[test]
    fn paced_replay_follows_frame_timestamps() {
        let frames: Vec<TrackedFrame> = (0..4)
            .map(|i| TrackedFrame {
                id: i,
                t: 10.0 + 0.02 * i as f64,
                observations: BTreeMap::new(),
            })
            .collect();
        let start = std::time::Instant::now();
        VoPipeline::run_paced(settings(), ExecutionMode::Concurrent, &frames, Some(1.0)).unwrap();
        assert!(start.elapsed() >= Duration::from_millis(60));
        for bad in [0.0, -1.0, f64::NAN] {
            let r =
                VoPipeline::run_paced(settings(), ExecutionMode::Deterministic, &frames, Some(bad));
            assert!(r.is_err());
        }
    }
}
