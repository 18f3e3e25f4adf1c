//! Monocular event-camera visual odometry.
//!
//! Events are accumulated into motion-compensated frames, corners are
//! tracked across frames, camera poses are estimated against a landmark
//! map by robust Gauss-Newton, and landmarks come from per-feature
//! Bayesian depth filters fed through a FIFO of tracked frames.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod depth_filter;
pub mod event_io;
pub mod frame_builder;
pub mod geometry;
pub mod pose_optimizer;
pub mod synth_eval;
pub mod vo_pipeline;

use thiserror::Error;

pub use depth_filter::{DepthFilterError, DepthFilterState, DepthMeasurement};
pub use event_io::{Config, Event, EventIoError, EventStream, StampedPose, TrackTable};
pub use frame_builder::{EventFrame, Feature, LifetimeStats};
pub use geometry::{CameraIntrinsics, GeometryError, PoseSE3, Twist};
pub use pose_optimizer::{Observation, OptimizerError, OptimizerReport, OptimizerSettings};
pub use synth_eval::{ErrorReport, SceneSpec, SynthError, SyntheticScene};
pub use vo_pipeline::{
    ExecutionMode, GlobalMap, Mode, PipelineError, PipelineSettings, RunOutput, RunReport,
    TrackedFrame, VoPipeline,
};

/// Any error raised by the crate, tagged with the module it came from.
#[derive(Debug, Error)]
pub enum Error {
    #[error("event_io: {0}")]
    EventIo(#[from] EventIoError),
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("pose_optimizer: {0}")]
    PoseOptimizer(#[from] OptimizerError),
    #[error("depth_filter: {0}")]
    DepthFilter(#[from] DepthFilterError),
    #[error("vo_pipeline: {0}")]
    Pipeline(#[from] PipelineError),
    #[error("synth_eval: {0}")]
    SynthEval(#[from] SynthError),
}

pub type Result<T> = std::result::Result<T, Error>;
