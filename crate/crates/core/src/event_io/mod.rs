//! Text file formats: event streams, feature tracks, trajectories and the
//! flat `key = value` configuration.
//!
//! All parsers are locale independent (decimal point only) and every
//! rejection carries the 1-based line number it was raised for.

mod config;
mod events;
mod tracks;
mod trajectory;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::{load_config, parse_config, Config};
pub use events::{load_event_stream, parse_event_stream, write_event_stream, Event, EventStream};
pub use tracks::{
    load_feature_tracks, parse_feature_tracks, write_feature_tracks, TrackRecord, TrackTable,
};
pub use trajectory::{
    format_trajectory_line, load_trajectory, parse_trajectory, write_trajectory, StampedPose,
};

#[derive(Debug, Error)]
pub enum EventIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: validation error: {message}")]
    Validation { line: usize, message: String },
    #[error("missing config key `{0}`")]
    MissingKey(String),
    #[error("config key `{key}`: {message}")]
    InvalidValue { key: String, message: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
}

pub type Result<T> = std::result::Result<T, EventIoError>;

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| EventIoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_string(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| EventIoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Non-empty, non-comment lines with their 1-based line numbers.
pub(crate) fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = raw.trim();
        (!line.is_empty() && !line.starts_with('#')).then_some((i + 1, line))
    })
}

pub(crate) fn parse_field<T: std::str::FromStr>(token: &str, line: usize, what: &str) -> Result<T> {
    token.parse::<T>().map_err(|_| EventIoError::Parse {
        line,
        message: format!("invalid {what} `{token}`"),
    })
}

pub(crate) fn expect_fields(line_text: &str, line: usize, n: usize) -> Result<Vec<&str>> {
    let fields: Vec<&str> = line_text.split_whitespace().collect();
    if fields.len() != n {
        return Err(EventIoError::Parse {
            line,
            message: format!("expected {n} fields, found {}", fields.len()),
        });
    }
    Ok(fields)
}

/// Formats with at most `digits` significant digits, trailing zeros
/// trimmed, so that exact zeros and ones print as `0` and `1`.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_finite() {
            "0".into()
        } else {
            format!("{x}")
        };
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..15).contains(&exp) {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        let s = if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        };
        if s == "-0" {
            "0".into()
        } else {
            s
        }
    } else {
        format!("{:.*e}", digits - 1, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_formatting() {
        assert_eq!(format_significant(0.0, 9), "0");
        assert_eq!(format_significant(-0.0, 9), "0");
        assert_eq!(format_significant(1.0, 9), "1");
        assert_eq!(format_significant(-2.5, 9), "-2.5");
        assert_eq!(format_significant(0.123456789123, 9), "0.123456789");
        assert_eq!(format_significant(123456.789123, 9), "123456.789");
        assert_eq!(format_significant(1.5e-9, 9), "1.50000000e-9");
    }
}
