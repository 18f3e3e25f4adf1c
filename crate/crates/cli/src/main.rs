//! `evo`: batch driver for the event-camera visual odometry pipeline.
//!
//! Exit codes: 0 success, 1 input or configuration error, 2 tracking lost.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use evo_core::event_io::{
    load_config, load_event_stream, load_feature_tracks, load_trajectory, write_feature_tracks,
    write_trajectory, EventIoError,
};
use evo_core::frame_builder::{compute_lifetime_stats, EventFrontend, FrontendSettings};
use evo_core::synth_eval::{compute_position_errors, generate_scene, parse_scene_spec, AlignMode};
use evo_core::vo_pipeline::{frames_from_tracks, ExecutionMode, PipelineSettings, VoPipeline};
use evo_core::{Error, Result};

const EXIT_INPUT: u8 = 1;
const EXIT_LOST: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "evo",
    version,
    about = "Monocular event-camera visual odometry"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the odometry pipeline on events or precomputed feature tracks.
    Run(RunArgs),
    /// Generate a synthetic scene from a scene spec file.
    Synth(SynthArgs),
    /// Compare an estimated trajectory with ground truth.
    Eval(EvalArgs),
    /// Feature lifetime statistics of a track file.
    TrackStats(TrackStatsArgs),
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["events", "tracks"]))]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Raw event stream, tracked by the event front end.
    #[arg(long)]
    events: Option<PathBuf>,
    /// Precomputed feature tracks, replayed directly.
    #[arg(long)]
    tracks: Option<PathBuf>,
    /// Camera-to-world ground truth; adds an error report to the output.
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run depth filtering inline instead of on a mapping thread.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    keyframe_period: Option<u32>,
    /// Seconds per frame.
    #[arg(long)]
    frame_interval: Option<f64>,
    /// Concurrent mode replays frames at this multiple of camera rate, so
    /// the mapping thread sees the timing a live camera would give it.
    #[arg(long, default_value_t = 1.0)]
    replay_speed: f64,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Scene spec (`key = value` lines).
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the scene file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Alignment {
    Rigid,
    RigidScale,
}

impl From<Alignment> for AlignMode {
    fn from(a: Alignment) -> Self {
        match a {
            Alignment::Rigid => AlignMode::Rigid,
            Alignment::RigidScale => AlignMode::RigidScale,
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Estimated camera-to-world trajectory.
    estimate: PathBuf,
    #[arg(long)]
    ground_truth: PathBuf,
    #[arg(long, value_enum, default_value = "rigid-scale")]
    mode: Alignment,
    /// Directory for `errors.csv` and `errors_plot.txt`; nothing is written without it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrackStatsArgs {
    tracks: PathBuf,
    /// Features tracked for fewer frames are ignored.
    #[arg(long, default_value_t = 1)]
    min_lifetime: u32,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EVO_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Synth(a) => cmd_synth(&a).map(|()| 0),
        Command::Eval(a) => cmd_eval(&a).map(|()| 0),
        Command::TrackStats(a) => cmd_track_stats(&a).map(|()| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_INPUT)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| {
        Error::from(EventIoError::Io {
            path: dir.to_path_buf(),
            source,
        })
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| {
        Error::from(EventIoError::Io {
            path: path.to_path_buf(),
            source,
        })
    })
}

fn cmd_run(a: &RunArgs) -> Result<u8> {
    let mut config = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(k) = a.keyframe_period {
        config.keyframe_period = k;
    }
    if let Some(dt) = a.frame_interval {
        config.frame_interval = dt;
    }
    config.validate()?;

    let (tracks, t0) = match (&a.events, &a.tracks) {
        (Some(path), None) => {
            let stream = load_event_stream(path, &config)?;
            if !stream.out_of_order.is_empty() {
                log::warn!("{} out-of-order events", stream.out_of_order.len());
            }
            let t0 = stream.events.first().map_or(0.0, |e| e.t);
            let tracks = EventFrontend::run(&stream.events, FrontendSettings::from_config(&config));
            (tracks, t0)
        }
        (None, Some(path)) => (load_feature_tracks(path)?, 0.0),
        _ => unreachable!("clap enforces exactly one input"),
    };
    let mut frames = frames_from_tracks(&tracks, config.frame_interval);
    for f in &mut frames {
        f.t += t0;
    }
    let ground_truth = a.ground_truth.as_deref().map(load_trajectory).transpose()?;

    let (execution, speed) = if a.deterministic {
        (ExecutionMode::Deterministic, None)
    } else {
        (ExecutionMode::Concurrent, Some(a.replay_speed))
    };
    log::info!("{} frames, {:?} mapping", frames.len(), execution);
    let settings = PipelineSettings::from_config(&config);
    let out = VoPipeline::run_paced(settings, execution, &frames, speed)?;
    let camera = out.camera_trajectory();

    create_dir(&a.out)?;
    if a.events.is_some() {
        write_feature_tracks(&a.out.join("tracks.txt"), &tracks)?;
    }
    write_trajectory(&a.out.join("trajectory.txt"), &camera)?;
    write_text(&a.out.join("map.txt"), &out.map.dump())?;
    let mut report = out.report.to_string();
    let _ = writeln!(report, "input_frames {}", frames.len());
    let _ = writeln!(report, "seed {}", config.seed);
    if let Some(gt) = &ground_truth {
        match compute_position_errors(&camera, gt, AlignMode::RigidScale) {
            Ok(errors) => {
                write_text(&a.out.join("errors.csv"), &errors.to_csv())?;
                let _ = writeln!(
                    report,
                    "relative_error_percent {:.4}",
                    errors.relative_error
                );
                print!("{errors}");
            }
            // A lost run may be too short to align; the run report still stands.
            Err(e) => log::warn!("evaluation skipped: {}", Error::from(e)),
        }
    }
    write_text(&a.out.join("report.txt"), &report)?;

    match out.report.lost_at {
        Some(frame) => {
            eprintln!("vo_pipeline: tracking lost at frame {frame}");
            Ok(EXIT_LOST)
        }
        None => {
            println!(
                "{} poses, {} map points",
                camera.len(),
                out.map.points.len()
            );
            Ok(0)
        }
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.spec).map_err(|source| {
        Error::from(EventIoError::Io {
            path: a.spec.clone(),
            source,
        })
    })?;
    let mut spec = parse_scene_spec(&text)?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let scene = generate_scene(&spec)?;
    scene.write(&a.out)?;
    let mut names: Vec<_> = std::fs::read_dir(&a.out)
        .map_err(|source| {
            Error::from(EventIoError::Io {
                path: a.out.clone(),
                source,
            })
        })?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name())
        .collect();
    names.sort();
    for name in names {
        let path = a.out.join(&name);
        let bytes = std::fs::read(&path)
            .map_err(|source| Error::from(EventIoError::Io { path, source }))?;
        let digest = Sha256::digest(&bytes);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        println!("{hex}  {}", name.to_string_lossy());
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let estimate = load_trajectory(&a.estimate)?;
    let gt = load_trajectory(&a.ground_truth)?;
    let report = compute_position_errors(&estimate, &gt, a.mode.into())?;
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_text(&dir.join("errors.csv"), &report.to_csv())?;
        write_text(&dir.join("errors_plot.txt"), &report.to_plot_data())?;
    }
    print!("{report}");
    Ok(())
}

fn cmd_track_stats(a: &TrackStatsArgs) -> Result<()> {
    let tracks = load_feature_tracks(&a.tracks)?;
    print!("{}", compute_lifetime_stats(&tracks, a.min_lifetime));
    Ok(())
}
