//! Synthetic ground truth, trajectory alignment and positional error metrics.

mod align;
mod metrics;
mod scene;

use thiserror::Error;

pub use align::{align_trajectories, match_timestamps, AlignMode, Alignment, MATCH_TOLERANCE};
pub use metrics::{compute_position_errors, ErrorReport, ErrorSample, HEADING_WINDOW};
pub use scene::{generate_scene, parse_scene_spec, CensoredLifetime, SceneSpec, SyntheticScene};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("scene spec places the camera inside the landmark cloud (lateral_min = {0} m)")]
    CameraInsideCloud(f64),
    #[error("only {found} of {wanted} landmarks could be placed in view")]
    TooFewLandmarks { found: usize, wanted: usize },
    #[error("only {0} timestamp matches (need at least 3)")]
    TooFewMatches(usize),
    #[error("alignment is degenerate: {0}")]
    DegenerateAlignment(String),
    #[error(transparent)]
    Io(#[from] crate::event_io::EventIoError),
}

pub type Result<T> = std::result::Result<T, SynthError>;
