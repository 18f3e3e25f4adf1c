use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Result, SynthError};
use crate::event_io::{
    write_event_stream, write_feature_tracks, write_trajectory, Config, Event, EventIoError,
    StampedPose, TrackTable,
};
use crate::geometry::{CameraIntrinsics, PoseSE3};

/// Parameters of a synthetic drive: a camera moving forward through a
/// corridor of landmarks, world z up.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub frames: usize,
    pub frame_interval: f64,
    /// Forward speed, m/s.
    pub speed: f64,
    /// Yaw rate applied between `turn_start` and `turn_end` (fractions of the run), rad/s.
    pub turn_rate: f64,
    pub turn_start: f64,
    pub turn_end: f64,
    pub landmarks: usize,
    /// Horizontal distance of landmarks from the path, m.
    pub lateral_min: f64,
    pub lateral_max: f64,
    /// Landmark height relative to the camera, m.
    pub height_min: f64,
    pub height_max: f64,
    /// Path extension beyond the last frame along which landmarks are placed, m.
    pub lookahead: f64,
    /// Track noise, px.
    pub noise_sigma: f64,
    /// Fraction of observations replaced by uniform random pixels.
    pub outlier_rate: f64,
    /// Per-frame probability of losing a track.
    pub loss_rate: f64,
    /// Untracked visible landmarks are re-detected every this many frames.
    pub redetect_period: usize,
    pub seed: u64,
    pub render_events: bool,
    /// Event samples per frame interval when rendering.
    pub event_substeps: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
            fx: 320.0,
            fy: 320.0,
            cx: 320.0,
            cy: 240.0,
            frames: 200,
            frame_interval: 0.03,
            speed: 3.0,
            turn_rate: 0.15,
            turn_start: 0.4,
            turn_end: 0.7,
            landmarks: 500,
            lateral_min: 2.0,
            lateral_max: 6.0,
            height_min: -1.5,
            height_max: 4.0,
            lookahead: 15.0,
            noise_sigma: 1.0,
            outlier_rate: 0.0,
            loss_rate: 0.05,
            redetect_period: 5,
            seed: 0,
            render_events: false,
            event_substeps: 8,
        }
    }
}

fn spec_value<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse::<T>()
        .map_err(|_| SynthError::InvalidSpec(format!("{key}: cannot parse `{raw}`")))
}

/// Parses `key = value` lines over [`SceneSpec::default`].
pub fn parse_scene_spec(text: &str) -> Result<SceneSpec> {
    let mut s = SceneSpec::default();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            SynthError::InvalidSpec(format!("line {}: expected `key = value`", i + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if !seen.insert(k.to_string()) {
            return Err(SynthError::InvalidSpec(format!(
                "line {}: duplicate key `{k}`",
                i + 1
            )));
        }
        match k {
            "width" => s.width = spec_value(k, v)?,
            "height" => s.height = spec_value(k, v)?,
            "fx" => s.fx = spec_value(k, v)?,
            "fy" => s.fy = spec_value(k, v)?,
            "cx" => s.cx = spec_value(k, v)?,
            "cy" => s.cy = spec_value(k, v)?,
            "frames" => s.frames = spec_value(k, v)?,
            "frame_interval" => s.frame_interval = spec_value(k, v)?,
            "speed" => s.speed = spec_value(k, v)?,
            "turn_rate" => s.turn_rate = spec_value(k, v)?,
            "turn_start" => s.turn_start = spec_value(k, v)?,
            "turn_end" => s.turn_end = spec_value(k, v)?,
            "landmarks" => s.landmarks = spec_value(k, v)?,
            "lateral_min" => s.lateral_min = spec_value(k, v)?,
            "lateral_max" => s.lateral_max = spec_value(k, v)?,
            "height_min" => s.height_min = spec_value(k, v)?,
            "height_max" => s.height_max = spec_value(k, v)?,
            "lookahead" => s.lookahead = spec_value(k, v)?,
            "noise_sigma" => s.noise_sigma = spec_value(k, v)?,
            "outlier_rate" => s.outlier_rate = spec_value(k, v)?,
            "loss_rate" => s.loss_rate = spec_value(k, v)?,
            "redetect_period" => s.redetect_period = spec_value(k, v)?,
            "seed" => s.seed = spec_value(k, v)?,
            "render_events" => s.render_events = spec_value(k, v)?,
            "event_substeps" => s.event_substeps = spec_value(k, v)?,
            _ => {
                return Err(SynthError::InvalidSpec(format!(
                    "line {}: unknown key `{k}`",
                    i + 1
                )))
            }
        }
    }
    s.validate()?;
    Ok(s)
}

impl SceneSpec {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
            .map_err(|e| SynthError::InvalidSpec(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics()?;
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        if self.frames < 2 {
            return bad("frames must be at least 2");
        }
        if !(self.frame_interval > 0.0) || !(self.speed > 0.0) {
            return bad("frame_interval and speed must be positive");
        }
        if !self.turn_rate.is_finite()
            || !(0.0..=1.0).contains(&self.turn_start)
            || !(self.turn_start..=1.0).contains(&self.turn_end)
        {
            return bad("turn window must satisfy 0 <= turn_start <= turn_end <= 1");
        }
        if self.landmarks == 0 {
            return bad("landmarks must be positive");
        }
        if self.lateral_max < self.lateral_min || self.height_max < self.height_min {
            return bad("landmark ranges are inverted");
        }
        if !(self.noise_sigma >= 0.0)
            || !(0.0..=1.0).contains(&self.loss_rate)
            || !(0.0..=1.0).contains(&self.outlier_rate)
        {
            return bad("noise_sigma, loss_rate or outlier_rate out of range");
        }
        if self.redetect_period == 0 || self.event_substeps == 0 {
            return bad("redetect_period and event_substeps must be positive");
        }
        if !(self.lookahead >= 0.0) {
            return bad("lookahead must be non-negative");
        }
        // Landmarks must keep clear of the path or the camera drives through them.
        if self.lateral_min < 0.5 {
            return Err(SynthError::CameraInsideCloud(self.lateral_min));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("width", self.width.to_string());
        kv("height", self.height.to_string());
        kv("fx", self.fx.to_string());
        kv("fy", self.fy.to_string());
        kv("cx", self.cx.to_string());
        kv("cy", self.cy.to_string());
        kv("frames", self.frames.to_string());
        kv("frame_interval", self.frame_interval.to_string());
        kv("speed", self.speed.to_string());
        kv("turn_rate", self.turn_rate.to_string());
        kv("turn_start", self.turn_start.to_string());
        kv("turn_end", self.turn_end.to_string());
        kv("landmarks", self.landmarks.to_string());
        kv("lateral_min", self.lateral_min.to_string());
        kv("lateral_max", self.lateral_max.to_string());
        kv("height_min", self.height_min.to_string());
        kv("height_max", self.height_max.to_string());
        kv("lookahead", self.lookahead.to_string());
        kv("noise_sigma", self.noise_sigma.to_string());
        kv("outlier_rate", self.outlier_rate.to_string());
        kv("loss_rate", self.loss_rate.to_string());
        kv("redetect_period", self.redetect_period.to_string());
        kv("seed", self.seed.to_string());
        kv("render_events", self.render_events.to_string());
        kv("event_substeps", self.event_substeps.to_string());
        s
    }

    /// Pipeline configuration matching the scene's sensor and cadence.
    pub fn pipeline_config(&self) -> Config {
        let mut c =
            Config::with_sensor(self.width, self.height, self.fx, self.fy, self.cx, self.cy);
        c.frame_interval = self.frame_interval;
        c.seed = self.seed;
        let reach = (self.lateral_max.powi(2)
            + self.height_min.abs().max(self.height_max.abs()).powi(2))
        .sqrt();
        c.depth_max = (self.lookahead + reach).max(c.depth_min + 1.0) * 1.5;
        c
    }
}

/// Generated ground truth. Poses are camera-to-world.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub intrinsics: CameraIntrinsics,
    pub landmarks: Vec<Vector3<f64>>,
    pub trajectory: Vec<StampedPose>,
    pub tracks: TrackTable,
    /// Feature id to landmark index.
    pub feature_landmark: BTreeMap<u64, usize>,
    pub events: Option<Vec<Event>>,
}

/// Camera axes in a yaw-only world frame: camera z forward along world x,
/// camera x right (world -y), camera y down (world -z).
fn camera_rotation(yaw: f64) -> Rotation3<f64> {
    let base = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    Rotation3::from_axis_angle(&Vector3::z_axis(), yaw) * Rotation3::from_matrix_unchecked(base)
}

/// Heading and position sampled at frame times, extended past the end.
fn path(spec: &SceneSpec, samples: usize) -> Vec<(f64, Vector3<f64>)> {
    const SUB: usize = 16;
    let duration = (spec.frames - 1) as f64 * spec.frame_interval;
    let (ta, tb) = (spec.turn_start * duration, spec.turn_end * duration);
    let h = spec.frame_interval / SUB as f64;
    let yaw_rate = |t: f64| {
        if t >= ta && t < tb {
            spec.turn_rate
        } else {
            0.0
        }
    };
    let mut out = Vec::with_capacity(samples);
    let (mut yaw, mut p) = (0.0f64, Vector3::zeros());
    let mut t = 0.0;
    for k in 0..samples {
        out.push((yaw, p));
        if k + 1 == samples {
            break;
        }
        for _ in 0..SUB {
            // Midpoint rule on the heading.
            let mid = yaw + 0.5 * h * yaw_rate(t);
            p += Vector3::new(mid.cos(), mid.sin(), 0.0) * (spec.speed * h);
            yaw += h * yaw_rate(t);
            t += h;
        }
    }
    out
}

fn project_world(k: &CameraIntrinsics, t_cw: &PoseSE3, p: &Vector3<f64>) -> Option<Vector2<f64>> {
    let c = t_cw.transform(p);
    if c.z < 0.5 {
        return None;
    }
    let px = k.bearing_to_pixel(&c);
    (px.x >= 1.0 && px.y >= 1.0 && px.x <= k.width as f64 - 2.0 && px.y <= k.height as f64 - 2.0)
        .then_some(px)
}

pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let k = spec.intrinsics()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let step = spec.speed * spec.frame_interval;
    let extra = (spec.lookahead / step).ceil() as usize;
    let samples = path(spec, spec.frames + extra);
    let trajectory: Vec<StampedPose> = samples[..spec.frames]
        .iter()
        .enumerate()
        .map(|(i, (yaw, p))| {
            StampedPose::new(
                i as f64 * spec.frame_interval,
                PoseSE3::from_parts(camera_rotation(*yaw), *p),
            )
        })
        .collect();
    let views: Vec<PoseSE3> = trajectory.iter().map(|s| s.pose.inverse()).collect();

    let mut landmarks = Vec::with_capacity(spec.landmarks);
    let mut attempts = 0usize;
    while landmarks.len() < spec.landmarks && attempts < spec.landmarks * 200 {
        attempts += 1;
        let s = rng.random_range(0.0..(samples.len() - 1) as f64);
        let i = s.floor() as usize;
        let f = s - i as f64;
        let (ya, pa) = samples[i];
        let (yb, pb) = samples[i + 1];
        let yaw = ya * (1.0 - f) + yb * f;
        let anchor = pa * (1.0 - f) + pb * f;
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let lateral = side * rng.random_range(spec.lateral_min..=spec.lateral_max);
        let height = rng.random_range(spec.height_min..=spec.height_max);
        let left = Vector3::new(-yaw.sin(), yaw.cos(), 0.0);
        let p = anchor + left * lateral + Vector3::new(0.0, 0.0, height);
        if views
            .iter()
            .filter(|v| project_world(&k, v, &p).is_some())
            .count()
            >= 2
        {
            landmarks.push(p);
        }
    }
    if landmarks.len() < spec.landmarks {
        return Err(SynthError::TooFewLandmarks {
            found: landmarks.len(),
            wanted: spec.landmarks,
        });
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    let mut tracks = TrackTable::new();
    let mut feature_landmark = BTreeMap::new();
    let mut active: BTreeMap<usize, u64> = BTreeMap::new();
    let mut next_id = 0u64;
    let mut clean: BTreeMap<u64, Vec<(usize, Vector2<f64>)>> = BTreeMap::new();
    for (f, view) in views.iter().enumerate() {
        let visible: BTreeMap<usize, Vector2<f64>> = landmarks
            .iter()
            .enumerate()
            .filter_map(|(i, p)| project_world(&k, view, p).map(|px| (i, px)))
            .collect();
        if f > 0 {
            let ids: Vec<usize> = active.keys().copied().collect();
            for l in ids {
                let lost = rng.random_bool(spec.loss_rate);
                if lost || !visible.contains_key(&l) {
                    active.remove(&l);
                }
            }
        }
        if f % spec.redetect_period == 0 {
            for l in visible.keys() {
                if !active.contains_key(l) {
                    active.insert(*l, next_id);
                    feature_landmark.insert(next_id, *l);
                    next_id += 1;
                }
            }
        }
        let row = tracks.entry(f as u64).or_default();
        for (l, id) in &active {
            let px = visible[l];
            clean.entry(*id).or_default().push((f, px));
            let obs = if spec.outlier_rate > 0.0 && rng.random_bool(spec.outlier_rate) {
                Vector2::new(
                    rng.random_range(0.0..(spec.width - 1) as f64),
                    rng.random_range(0.0..(spec.height - 1) as f64),
                )
            } else if spec.noise_sigma > 0.0 {
                let n = Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
                let q = px + n;
                Vector2::new(
                    q.x.clamp(0.0, (spec.width - 1) as f64),
                    q.y.clamp(0.0, (spec.height - 1) as f64),
                )
            } else {
                px
            };
            row.insert(*id, obs);
        }
    }
    let events = spec.render_events.then(|| render_events(spec, &clean));
    Ok(SyntheticScene {
        spec: spec.clone(),
        intrinsics: k,
        landmarks,
        trajectory,
        tracks,
        feature_landmark,
        events,
    })
}

/// Each tracked landmark is drawn as a small L-shaped corner; pixels it
/// enters fire positive events and pixels it leaves fire negative ones.
fn render_events(
    spec: &SceneSpec,
    clean: &BTreeMap<u64, Vec<(usize, Vector2<f64>)>>,
) -> Vec<Event> {
    const ARM: i64 = 3;
    let glyph = |c: Vector2<f64>| -> BTreeSet<(i64, i64)> {
        let (x0, y0) = (c.x.round() as i64, c.y.round() as i64);
        (0..=ARM)
            .map(|d| (x0 + d, y0))
            .chain((1..=ARM).map(|d| (x0, y0 + d)))
            .collect()
    };
    let inside =
        |(x, y): (i64, i64)| x >= 0 && y >= 0 && x < spec.width as i64 && y < spec.height as i64;
    let n = spec.event_substeps;
    let mut events = Vec::new();
    for samples in clean.values() {
        for w in samples.windows(2) {
            let ((fa, a), (fb, b)) = (w[0], w[1]);
            if fb != fa + 1 {
                continue;
            }
            let mut prev = glyph(a);
            for j in 1..=n {
                let s = j as f64 / n as f64;
                let cur = glyph(a * (1.0 - s) + b * s);
                let t = (fa as f64 + s) * spec.frame_interval;
                for &px in cur.difference(&prev).filter(|p| inside(**p)) {
                    events.push(Event::new(t, px.0 as u16, px.1 as u16, 1));
                }
                for &px in prev.difference(&cur).filter(|p| inside(**p)) {
                    events.push(Event::new(t, px.0 as u16, px.1 as u16, -1));
                }
                prev = cur;
            }
        }
    }
    events.sort_by(|a, b| {
        a.t.total_cmp(&b.t)
            .then(a.y.cmp(&b.y))
            .then(a.x.cmp(&b.x))
            .then(a.p.cmp(&b.p))
    });
    events
}

impl SyntheticScene {
    /// Writes `tracks.txt`, `groundtruth.txt`, `landmarks.txt`,
    /// `config.txt`, `scene.txt` and, if rendered, `events.txt`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|source| EventIoError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let put = |name: &str, text: String| -> Result<()> {
            let path = dir.join(name);
            std::fs::write(&path, text)
                .map_err(|source| SynthError::Io(EventIoError::Io { path, source }))
        };
        write_feature_tracks(&dir.join("tracks.txt"), &self.tracks)?;
        write_trajectory(&dir.join("groundtruth.txt"), &self.trajectory)?;
        let mut lm = String::from("# id x y z\n");
        for (i, p) in self.landmarks.iter().enumerate() {
            let _ = writeln!(lm, "{i} {:.9} {:.9} {:.9}", p.x, p.y, p.z);
        }
        put("landmarks.txt", lm)?;
        put("config.txt", self.spec.pipeline_config().to_text())?;
        put("scene.txt", self.spec.to_text())?;
        if let Some(events) = &self.events {
            write_event_stream(&dir.join("events.txt"), events)?;
        }
        Ok(())
    }

    /// Ground-truth world-to-camera pose of frame `i`.
    pub fn view(&self, i: usize) -> PoseSE3 {
        self.trajectory[i].pose.inverse()
    }

    /// Track survival against the random-loss process alone. Tracks that
    /// end by leaving the view or at the last frame are censored.
    pub fn censored_lifetime(&self) -> CensoredLifetime {
        let mut span: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
        for (f, row) in &self.tracks {
            for id in row.keys() {
                span.entry(*id).and_modify(|s| s.1 = *f).or_insert((*f, *f));
            }
        }
        let mut out = CensoredLifetime::default();
        for (id, (first, last)) in span {
            out.trials += last - first;
            let next = last as usize + 1;
            let p = &self.landmarks[self.feature_landmark[&id]];
            if next < self.trajectory.len()
                && project_world(&self.intrinsics, &self.view(next), p).is_some()
            {
                out.trials += 1;
                out.losses += 1;
            }
        }
        out
    }
}

/// Frame transitions observed under the loss process and how many ended a
/// track.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CensoredLifetime {
    pub trials: u64,
    pub losses: u64,
}

impl CensoredLifetime {
    /// Maximum-likelihood mean lifetime of the geometric loss process.
    pub fn mean(&self) -> Option<f64> {
        (self.losses > 0).then(|| self.trials as f64 / self.losses as f64)
    }
}
