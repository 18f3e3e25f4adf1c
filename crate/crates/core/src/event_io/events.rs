use std::fmt::Write as _;
use std::path::Path;

use super::{data_lines, expect_fields, parse_field, read_to_string, write_string, Config};
use super::{EventIoError, Result};

/// One brightness-change sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    /// Seconds from an arbitrary epoch.
    pub t: f64,
    pub x: u16,
    pub y: u16,
    /// `-1` or `+1`.
    pub p: i8,
}

impl Event {
    pub fn new(t: f64, x: u16, y: u16, p: i8) -> Self {
        Self { t, x, y, p }
    }
}

/// Parsed event file. Events keep file order; lines whose timestamp
/// decreases relative to the previous event are listed in `out_of_order`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub out_of_order: Vec<usize>,
}

pub fn parse_event_stream(text: &str, config: &Config) -> Result<EventStream> {
    let mut stream = EventStream::default();
    let mut last_t = f64::NEG_INFINITY;
    for (line, content) in data_lines(text) {
        let f = expect_fields(content, line, 4)?;
        let t: f64 = parse_field(f[0], line, "timestamp")?;
        if !t.is_finite() || t < 0.0 {
            return Err(EventIoError::Validation {
                line,
                message: format!("timestamp {t} must be finite and non-negative"),
            });
        }
        let x: u32 = parse_field(f[1], line, "x coordinate")?;
        let y: u32 = parse_field(f[2], line, "y coordinate")?;
        let p = match f[3] {
            "0" => -1,
            "1" => 1,
            other => {
                return Err(EventIoError::Parse {
                    line,
                    message: format!("polarity must be 0 or 1, found `{other}`"),
                })
            }
        };
        if x >= config.width || y >= config.height {
            return Err(EventIoError::Validation {
                line,
                message: format!(
                    "pixel ({x}, {y}) outside the {}x{} sensor",
                    config.width, config.height
                ),
            });
        }
        if t < last_t {
            stream.out_of_order.push(line);
        }
        last_t = t;
        stream.events.push(Event::new(t, x as u16, y as u16, p));
    }
    if !stream.out_of_order.is_empty() {
        log::warn!(
            "event stream: {} timestamp(s) out of order, first at line {}",
            stream.out_of_order.len(),
            stream.out_of_order[0]
        );
    }
    Ok(stream)
}

/// Reads an ASCII event file (`t x y p`, `p` in `{0, 1}`).
pub fn load_event_stream(path: &Path, config: &Config) -> Result<EventStream> {
    parse_event_stream(&read_to_string(path)?, config)
}

pub fn write_event_stream(path: &Path, events: &[Event]) -> Result<()> {
    let mut out = String::with_capacity(events.len() * 24);
    for e in events {
        let p = if e.p > 0 { 1 } else { 0 };
        let _ = writeln!(out, "{:.6} {} {} {}", e.t, e.x, e.y, p);
    }
    write_string(path, &out)
}
