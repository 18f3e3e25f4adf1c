use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector2;

use super::{data_lines, expect_fields, parse_field, read_to_string, write_string};
use super::{format_significant, EventIoError, Result};

/// One line of a feature-track file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackRecord {
    pub frame_id: u64,
    pub feature_id: u64,
    pub u: f64,
    pub v: f64,
}

/// `frame_id -> feature_id -> pixel`, both levels ordered.
pub type TrackTable = BTreeMap<u64, BTreeMap<u64, Vector2<f64>>>;

pub fn parse_feature_tracks(text: &str) -> Result<TrackTable> {
    let mut table = TrackTable::new();
    for (line, content) in data_lines(text) {
        let f = expect_fields(content, line, 4)?;
        let rec = TrackRecord {
            frame_id: parse_field(f[0], line, "frame id")?,
            feature_id: parse_field(f[1], line, "feature id")?,
            u: parse_field(f[2], line, "u coordinate")?,
            v: parse_field(f[3], line, "v coordinate")?,
        };
        if !(rec.u.is_finite() && rec.v.is_finite()) {
            return Err(EventIoError::Validation {
                line,
                message: "non-finite coordinate".into(),
            });
        }
        let frame = table.entry(rec.frame_id).or_default();
        if frame
            .insert(rec.feature_id, Vector2::new(rec.u, rec.v))
            .is_some()
        {
            return Err(EventIoError::Validation {
                line,
                message: format!(
                    "duplicate (frame {}, feature {})",
                    rec.frame_id, rec.feature_id
                ),
            });
        }
    }
    Ok(table)
}

/// Reads `frame_id feature_id u v` lines grouped by ascending frame.
pub fn load_feature_tracks(path: &Path) -> Result<TrackTable> {
    parse_feature_tracks(&read_to_string(path)?)
}

pub fn write_feature_tracks(path: &Path, tracks: &TrackTable) -> Result<()> {
    let mut out = String::new();
    for (frame, features) in tracks {
        for (id, p) in features {
            let _ = writeln!(
                out,
                "{frame} {id} {} {}",
                format_significant(p.x, 12),
                format_significant(p.y, 12)
            );
        }
    }
    write_string(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_by_frame() {
        let t = parse_feature_tracks("0 7 10.5 20.0\n1 7 11.5 20.0\n").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[&0][&7], Vector2::new(10.5, 20.0));
        assert_eq!(t[&1][&7], Vector2::new(11.5, 20.0));
    }

    #[test]
    fn rejects_duplicates_and_garbage() {
        assert!(matches!(
            parse_feature_tracks("0 7 1 1\n0 7 2 2\n"),
            Err(EventIoError::Validation { line: 2, .. })
        ));
        assert!(matches!(
            parse_feature_tracks("0 x 1 1\n"),
            Err(EventIoError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn toy_file_has_four_groups() {
        // 3 features over 4 frames, written out of order
        let text = "3 2 1 1\n0 1 1 1\n0 2 1 1\n1 1 1 1\n1 2 1 1\n2 2 1 1\n2 3 1 1\n3 3 1 1\n";
        let t = parse_feature_tracks(text).unwrap();
        assert_eq!(t.keys().copied().collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(t[&2].len(), 2);
    }

    #[test]
    fn write_read_round_trip() {
        let mut t = TrackTable::new();
        t.entry(4)
            .or_default()
            .insert(9, Vector2::new(1.25, 300.123456789));
        t.entry(5).or_default().insert(9, Vector2::new(2.0, 0.5));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tracks.txt");
        write_feature_tracks(&path, &t).unwrap();
        assert_eq!(load_feature_tracks(&path).unwrap(), t);
    }
}
