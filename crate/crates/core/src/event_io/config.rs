use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{read_to_string, EventIoError, Result};
use crate::geometry::CameraIntrinsics;

/// Run parameters read from a flat `key = value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Event frame length (s).
    pub frame_interval: f64,
    /// A keyframe every this many frames.
    pub keyframe_period: u32,
    /// Force a keyframe when fewer live tracks remain.
    pub refill_threshold: usize,
    pub gn_max_iterations: usize,
    pub gn_tolerance: f64,
    /// Huber threshold (px).
    pub huber_delta: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    /// Converged when `sqrt(var) < ratio * (depth_max - depth_min)`.
    pub depth_convergence_ratio: f64,
    pub queue_capacity: usize,
    pub seed: u64,
    /// Map-bound features needed to optimize a pose; also the tracked
    /// feature count below which tracking is declared lost.
    pub min_tracked_features: usize,
    pub max_features: usize,
    pub min_feature_distance: f64,
    /// Half-size of the flow-estimation window (px).
    pub flow_window: u32,
    /// Length of the bootstrap translation (monocular scale).
    pub bootstrap_baseline: f64,
    /// Median feature displacement (px) required before bootstrapping.
    pub bootstrap_min_parallax: f64,
    pub patch_size: usize,
    pub track_loss_ratio: f64,
}

const REQUIRED: [&str; 6] = ["width", "height", "fx", "fy", "cx", "cy"];

impl Config {
    pub fn with_sensor(width: u32, height: u32, fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self {
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            frame_interval: 0.03,
            keyframe_period: 5,
            refill_threshold: 20,
            gn_max_iterations: 20,
            gn_tolerance: 1e-8,
            huber_delta: 1.5,
            depth_min: 0.5,
            depth_max: 50.0,
            depth_convergence_ratio: 0.005,
            queue_capacity: 64,
            seed: 0,
            min_tracked_features: 8,
            max_features: 300,
            min_feature_distance: 5.0,
            flow_window: 7,
            bootstrap_baseline: 1.0,
            bootstrap_min_parallax: 8.0,
            patch_size: 15,
            track_loss_ratio: 0.8,
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(key: &str, v: f64) -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(EventIoError::InvalidValue {
                    key: key.into(),
                    message: format!("must be positive, got {v}"),
                })
            }
        }
        positive("width", self.width as f64)?;
        positive("height", self.height as f64)?;
        positive("fx", self.fx)?;
        positive("fy", self.fy)?;
        positive("frame_interval", self.frame_interval)?;
        positive("keyframe_period", self.keyframe_period as f64)?;
        positive("gn_max_iterations", self.gn_max_iterations as f64)?;
        positive("gn_tolerance", self.gn_tolerance)?;
        positive("huber_delta", self.huber_delta)?;
        positive("depth_min", self.depth_min)?;
        positive("depth_max", self.depth_max)?;
        positive("depth_convergence_ratio", self.depth_convergence_ratio)?;
        positive("queue_capacity", self.queue_capacity as f64)?;
        positive("min_tracked_features", self.min_tracked_features as f64)?;
        positive("max_features", self.max_features as f64)?;
        positive("min_feature_distance", self.min_feature_distance)?;
        positive("flow_window", self.flow_window as f64)?;
        positive("bootstrap_baseline", self.bootstrap_baseline)?;
        positive("bootstrap_min_parallax", self.bootstrap_min_parallax)?;
        positive("patch_size", self.patch_size as f64)?;
        positive("track_loss_ratio", self.track_loss_ratio)?;
        if self.depth_min >= self.depth_max {
            return Err(EventIoError::InvalidValue {
                key: "depth_min".into(),
                message: format!(
                    "must be below depth_max ({} >= {})",
                    self.depth_min, self.depth_max
                ),
            });
        }
        self.intrinsics()
            .validate()
            .map_err(|e| EventIoError::InvalidValue {
                key: "cx".into(),
                message: e.to_string(),
            })
    }

    /// Serializes every key, suitable for [`parse_config`].
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
        kv("frame_interval", self.frame_interval.to_string());
        kv("keyframe_period", self.keyframe_period.to_string());
        kv("refill_threshold", self.refill_threshold.to_string());
        kv("gn_max_iterations", self.gn_max_iterations.to_string());
        kv("gn_tolerance", self.gn_tolerance.to_string());
        kv("huber_delta", self.huber_delta.to_string());
        kv("depth_min", self.depth_min.to_string());
        kv("depth_max", self.depth_max.to_string());
        kv(
            "depth_convergence_ratio",
            self.depth_convergence_ratio.to_string(),
        );
        kv("queue_capacity", self.queue_capacity.to_string());
        kv("seed", self.seed.to_string());
        kv(
            "min_tracked_features",
            self.min_tracked_features.to_string(),
        );
        kv("max_features", self.max_features.to_string());
        kv(
            "min_feature_distance",
            self.min_feature_distance.to_string(),
        );
        kv("flow_window", self.flow_window.to_string());
        kv("bootstrap_baseline", self.bootstrap_baseline.to_string());
        kv(
            "bootstrap_min_parallax",
            self.bootstrap_min_parallax.to_string(),
        );
        kv("patch_size", self.patch_size.to_string());
        kv("track_loss_ratio", self.track_loss_ratio.to_string());
        s
    }
}

fn value<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse::<T>().map_err(|_| EventIoError::InvalidValue {
        key: key.into(),
        message: format!("cannot parse `{raw}`"),
    })
}

/// Parses `key = value` lines; `#` starts a comment. The sensor size and
/// intrinsics are mandatory, everything else has a default.
pub fn parse_config(text: &str) -> Result<Config> {
    let mut entries = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(EventIoError::Parse {
                line: i + 1,
                message: format!("expected `key = value`, found `{line}`"),
            });
        };
        let k = k.trim().to_string();
        if entries
            .insert(k.clone(), (i + 1, v.trim().to_string()))
            .is_some()
        {
            return Err(EventIoError::Validation {
                line: i + 1,
                message: format!("duplicate key `{k}`"),
            });
        }
    }
    for key in REQUIRED {
        if !entries.contains_key(key) {
            return Err(EventIoError::MissingKey(key.into()));
        }
    }
    let get = |k: &str| entries[k].1.as_str();
    let mut c = Config::with_sensor(
        value("width", get("width"))?,
        value("height", get("height"))?,
        value("fx", get("fx"))?,
        value("fy", get("fy"))?,
        value("cx", get("cx"))?,
        value("cy", get("cy"))?,
    );
    for (key, (line, raw)) in &entries {
        let raw = raw.as_str();
        match key.as_str() {
            "width" | "height" | "fx" | "fy" | "cx" | "cy" => {}
            "frame_interval" => c.frame_interval = value(key, raw)?,
            "keyframe_period" => c.keyframe_period = value(key, raw)?,
            "refill_threshold" => c.refill_threshold = value(key, raw)?,
            "gn_max_iterations" => c.gn_max_iterations = value(key, raw)?,
            "gn_tolerance" => c.gn_tolerance = value(key, raw)?,
            "huber_delta" => c.huber_delta = value(key, raw)?,
            "depth_min" => c.depth_min = value(key, raw)?,
            "depth_max" => c.depth_max = value(key, raw)?,
            "depth_convergence_ratio" => c.depth_convergence_ratio = value(key, raw)?,
            "queue_capacity" => c.queue_capacity = value(key, raw)?,
            "seed" => c.seed = value(key, raw)?,
            "min_tracked_features" => c.min_tracked_features = value(key, raw)?,
            "max_features" => c.max_features = value(key, raw)?,
            "min_feature_distance" => c.min_feature_distance = value(key, raw)?,
            "flow_window" => c.flow_window = value(key, raw)?,
            "bootstrap_baseline" => c.bootstrap_baseline = value(key, raw)?,
            "bootstrap_min_parallax" => c.bootstrap_min_parallax = value(key, raw)?,
            "patch_size" => c.patch_size = value(key, raw)?,
            "track_loss_ratio" => c.track_loss_ratio = value(key, raw)?,
            _ => {
                return Err(EventIoError::Validation {
                    line: *line,
                    message: format!("unknown key `{key}`"),
                })
            }
        }
    }
    c.validate()?;
    Ok(c)
}

pub fn load_config(path: &Path) -> Result<Config> {
    parse_config(&read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "width = 640\nheight = 480\nfx = 300\nfy = 300\ncx = 320\ncy = 240\n";

    #[test]
    fn minimal_config_uses_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.width, 640);
        assert_eq!(c.frame_interval, 0.03);
        assert_eq!(c.keyframe_period, 5);
        assert_eq!(c.queue_capacity, 64);
    }

    #[test]
    fn comments_and_overrides() {
        let text = format!("# camera\n{MINIMAL}keyframe_period = 3 # every third\nseed=42\n");
        let c = parse_config(&text).unwrap();
        assert_eq!(c.keyframe_period, 3);
        assert_eq!(c.seed, 42);
    }

    #[test]
    fn missing_key_is_named() {
        let text = MINIMAL.replace("fy = 300\n", "");
        match parse_config(&text).unwrap_err() {
            EventIoError::MissingKey(k) => assert_eq!(k, "fy"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_values() {
        assert!(parse_config(&format!("{MINIMAL}depth_min = 9\ndepth_max = 1\n")).is_err());
        assert!(parse_config(&format!("{MINIMAL}huber_delta = -1\n")).is_err());
        assert!(parse_config(&format!("{MINIMAL}bogus = 1\n")).is_err());
        assert!(parse_config(&format!("{MINIMAL}seed\n")).is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = parse_config(MINIMAL).unwrap();
        c.gn_tolerance = 1e-10;
        c.depth_max = 80.0;
        assert_eq!(parse_config(&c.to_text()).unwrap(), c);
    }
}
