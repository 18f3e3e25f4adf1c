use std::collections::BTreeMap;
use std::fmt;

use crate::event_io::TrackTable;

/// Lifetime summary in the layout of the feature-lifetime table.
#[derive(Debug, Clone, PartialEq)]
pub struct LifetimeStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
    /// Lifetime in frames -> number of features.
    pub histogram: BTreeMap<u32, usize>,
    /// No feature met the minimum lifetime.
    pub empty: bool,
}

impl fmt::Display for LifetimeStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.empty {
            writeln!(f, "Average lifetime n/a")?;
            return writeln!(f, "Standard variance n/a");
        }
        writeln!(f, "Average lifetime {:.3} frames", self.mean)?;
        writeln!(f, "Standard variance {:.3} frames", self.std)
    }
}

/// Length of each feature's first run of consecutive frames.
pub fn feature_lifetimes(tracks: &TrackTable) -> BTreeMap<u64, u32> {
    let mut first: BTreeMap<u64, u64> = BTreeMap::new();
    for (frame, feats) in tracks {
        for id in feats.keys() {
            first.entry(*id).or_insert(*frame);
        }
    }
    first
        .into_iter()
        .map(|(id, start)| {
            let mut n = 0u32;
            while tracks
                .get(&(start + n as u64))
                .is_some_and(|f| f.contains_key(&id))
            {
                n += 1;
            }
            (id, n)
        })
        .collect()
}

pub fn stats_from_lifetimes(lifetimes: &[u32], min_lifetime: u32) -> LifetimeStats {
    let kept: Vec<u32> = lifetimes
        .iter()
        .copied()
        .filter(|l| *l >= min_lifetime)
        .collect();
    let mut histogram = BTreeMap::new();
    for l in &kept {
        *histogram.entry(*l).or_insert(0) += 1;
    }
    if kept.is_empty() {
        return LifetimeStats {
            mean: 0.0,
            std: 0.0,
            count: 0,
            histogram,
            empty: true,
        };
    }
    let n = kept.len() as f64;
    let mean = kept.iter().map(|l| *l as f64).sum::<f64>() / n;
    let var = kept.iter().map(|l| (*l as f64 - mean).powi(2)).sum::<f64>() / n;
    LifetimeStats {
        mean,
        std: var.sqrt(),
        count: kept.len(),
        histogram,
        empty: false,
    }
}

pub fn compute_lifetime_stats(tracks: &TrackTable, min_lifetime: u32) -> LifetimeStats {
    let l: Vec<u32> = feature_lifetimes(tracks).into_values().collect();
    stats_from_lifetimes(&l, min_lifetime)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector2;

    fn table(spans: &[(u64, u64, u64)]) -> TrackTable {
        let mut t = TrackTable::new();
        for (id, start, len) in spans {
            for f in *start..start + len {
                t.entry(f).or_default().insert(*id, Vector2::new(1.0, 2.0));
            }
        }
        t
    }

    #[test]
    fn toy_oracle() {
        let s = compute_lifetime_stats(&table(&[(0, 0, 3), (1, 2, 5), (2, 1, 10)]), 3);
        assert_eq!(s.mean, 6.0);
        assert!((s.std - (26.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((s.std - 2.9439).abs() < 1e-4);
        assert_eq!(s.histogram, BTreeMap::from([(3, 1), (5, 1), (10, 1)]));
    }

    #[test]
    fn all_filtered_is_flagged() {
        let s = stats_from_lifetimes(&[2, 2], 3);
        assert!(s.empty);
        assert!(s.to_string().contains("n/a"));
    }

    #[test]
    fn only_first_run_counts() {
        let mut t = table(&[(4, 0, 2)]);
        t.entry(5).or_default().insert(4, Vector2::zeros());
        assert_eq!(feature_lifetimes(&t)[&4], 2);
    }

    #[test]
    fn table_layout() {
        let s = stats_from_lifetimes(&[3, 5, 10], 3);
        assert_eq!(
            s.to_string(),
            "Average lifetime 6.000 frames\nStandard variance 2.944 frames\n"
        );
    }
}
