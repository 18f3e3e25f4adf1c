mod common;

use common::harris_oracle::{response, top};
use evo_core::frame_builder::{detect_harris, harris_response, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::new(32, 32);
    for _ in 0..4 {
        let (x0, y0) = (rng.random_range(2..26usize), rng.random_range(2..26usize));
        let (w, h) = (rng.random_range(3..8usize), rng.random_range(3..8usize));
        let v: f64 = rng.random_range(0.5..3.0);
        for y in y0..(y0 + h).min(32) {
            for x in x0..(x0 + w).min(32) {
                *img.get_mut(x, y) += v;
            }
        }
    }
    for _ in 0..30 {
        let (x, y) = (rng.random_range(0..32usize), rng.random_range(0..32usize));
        *img.get_mut(x, y) += rng.random_range(0.0..0.3);
    }
    img
}

#[test]
fn response_matches_brute_force() {
    for seed in 0..10 {
        let img = fixture(seed);
        let fast = harris_response(&img);
        let slow = response(&img);
        let scale = fast.max().abs().max(1e-12);
        for (y, row) in slow.iter().enumerate() {
            for (x, v) in row.iter().enumerate() {
                assert!(
                    (fast.get(x, y) - v).abs() <= 1e-9 * scale,
                    "seed {seed} ({x},{y})"
                );
            }
        }
    }
}

#[test]
fn top_five_ranking_matches() {
    for seed in 0..10 {
        let img = fixture(seed);
        let got: Vec<(usize, usize)> = detect_harris(&img, 5, 0.0)
            .iter()
            .map(|c| (c.x, c.y))
            .collect();
        assert_eq!(got, top(&response(&img), 5), "seed {seed}");
    }
}
