//! Inverse-compositional patch alignment between consecutive event frames:
//! translation on a coarse then a fine scale, then a full affine refinement.

use nalgebra::{Matrix2, SMatrix, SVector, Vector2};

use super::{Feature, FlowEstimate, Image};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerSettings {
    /// Odd side length of the square patch.
    pub patch_size: usize,
    pub max_iterations: usize,
    /// Lost when mean |residual| exceeds this fraction of mean |template|.
    pub loss_ratio: f64,
    pub fine_sigma: f64,
    pub coarse_sigma: f64,
    /// Stop once the patch centre moves less than this, px.
    pub tolerance: f64,
}

impl Default for TrackerSettings {
    fn default() -> Self {
        Self {
            patch_size: 15,
            max_iterations: 30,
            loss_ratio: 0.8,
            fine_sigma: 1.0,
            coarse_sigma: 3.0,
            tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossReason {
    OutOfBounds,
    Residual,
    /// Patch without texture, or a diverging solve.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrackOutcome {
    Tracked {
        position: Vector2<f64>,
        residual: f64,
    },
    Lost(LossReason),
}

/// Warp `u -> a * u + c` of patch offsets `u` into the current image.
#[derive(Debug, Clone, Copy)]
struct Warp {
    a: Matrix2<f64>,
    c: Vector2<f64>,
}

struct Template {
    offsets: Vec<Vector2<f64>>,
    values: Vec<f64>,
    grads: Vec<Vector2<f64>>,
}

fn template(img: &Image, centre: &Vector2<f64>, half: i64) -> Template {
    let mut t = Template {
        offsets: Vec::new(),
        values: Vec::new(),
        grads: Vec::new(),
    };
    for dy in -half..=half {
        for dx in -half..=half {
            let u = Vector2::new(dx as f64, dy as f64);
            let p = centre + u;
            t.offsets.push(u);
            t.values.push(img.sample(p.x, p.y));
            t.grads.push(Vector2::new(
                0.5 * (img.sample(p.x + 1.0, p.y) - img.sample(p.x - 1.0, p.y)),
                0.5 * (img.sample(p.x, p.y + 1.0) - img.sample(p.x, p.y - 1.0)),
            ));
        }
    }
    t
}

fn residuals(img: &Image, t: &Template, w: &Warp) -> Vec<f64> {
    t.offsets
        .iter()
        .zip(&t.values)
        .map(|(u, v)| {
            let p = w.a * u + w.c;
            img.sample(p.x, p.y) - v
        })
        .collect()
}

fn align_translation(img: &Image, t: &Template, mut w: Warp, s: &TrackerSettings) -> Option<Warp> {
    let h: Matrix2<f64> = t.grads.iter().map(|g| g * g.transpose()).sum();
    let h_inv = h.try_inverse()?;
    for _ in 0..s.max_iterations {
        let e = residuals(img, t, &w);
        let b: Vector2<f64> = t.grads.iter().zip(&e).map(|(g, e)| g * *e).sum();
        let d = h_inv * b;
        w.c -= w.a * d;
        if !w.c.iter().all(|v| v.is_finite()) {
            return None;
        }
        if d.norm() < s.tolerance {
            break;
        }
    }
    Some(w)
}

fn align_affine(img: &Image, t: &Template, mut w: Warp, s: &TrackerSettings) -> Option<Warp> {
    let sd: Vec<SVector<f64, 6>> = t
        .offsets
        .iter()
        .zip(&t.grads)
        .map(|(u, g)| SVector::from([g.x * u.x, g.x * u.y, g.y * u.x, g.y * u.y, g.x, g.y]))
        .collect();
    let h: SMatrix<f64, 6, 6> = sd.iter().map(|v| v * v.transpose()).sum();
    let chol = h.cholesky()?;
    for _ in 0..s.max_iterations {
        let e = residuals(img, t, &w);
        let b: SVector<f64, 6> = sd.iter().zip(&e).map(|(v, e)| v * *e).sum();
        let d = chol.solve(&b);
        let a_d = Matrix2::new(1.0 + d[0], d[1], d[2], 1.0 + d[3]);
        let a_d_inv = a_d.try_inverse()?;
        let a = w.a * a_d_inv;
        w.c -= a * Vector2::new(d[4], d[5]);
        w.a = a;
        if !(w.a.iter().chain(w.c.iter()).all(|v| v.is_finite())) {
            return None;
        }
        let half = (s.patch_size / 2) as f64;
        let step = Vector2::new(d[4], d[5]).norm() + half * d.fixed_rows::<4>(0).norm();
        if step < s.tolerance {
            break;
        }
    }
    Some(w)
}

/// Tracks each feature from `prev` into `cur`. Both images should be the
/// motion-corrected accumulations; they are smoothed internally. The
/// starting guess is the feature position advanced by `flow` over `dt`.
pub fn track_features(
    prev: &Image,
    features: &[Feature],
    cur: &Image,
    flow: &FlowEstimate,
    dt: f64,
    settings: &TrackerSettings,
) -> Vec<(u64, TrackOutcome)> {
    let (w, h) = (cur.width() as f64, cur.height() as f64);
    let inside = |p: &Vector2<f64>| p.x >= 0.0 && p.y >= 0.0 && p.x <= w - 1.0 && p.y <= h - 1.0;
    let prev_coarse = prev.gaussian_blur(settings.coarse_sigma);
    let cur_coarse = cur.gaussian_blur(settings.coarse_sigma);
    let prev_fine = prev.gaussian_blur(settings.fine_sigma);
    let cur_fine = cur.gaussian_blur(settings.fine_sigma);
    let half = (settings.patch_size / 2) as i64;

    features
        .iter()
        .map(|f| {
            let predicted = f.position + flow.get(f.feature_id) * dt;
            if !inside(&predicted) {
                return (f.feature_id, TrackOutcome::Lost(LossReason::OutOfBounds));
            }
            let init = Warp {
                a: Matrix2::identity(),
                c: predicted,
            };
            let tc = template(&prev_coarse, &f.position, half);
            let tf = template(&prev_fine, &f.position, half);
            let energy = tf.values.iter().map(|v| v.abs()).sum::<f64>() / tf.values.len() as f64;
            if energy <= 1e-12 {
                return (f.feature_id, TrackOutcome::Lost(LossReason::Degenerate));
            }
            let Some(trans) = align_translation(&cur_coarse, &tc, init, settings)
                .and_then(|w| align_translation(&cur_fine, &tf, w, settings))
            else {
                return (f.feature_id, TrackOutcome::Lost(LossReason::Degenerate));
            };
            // Fall back to the translation when the affine solve wanders off.
            let warp = match align_affine(&cur_fine, &tf, trans, settings) {
                Some(a)
                    if (a.a - Matrix2::identity()).norm() < 0.5
                        && a.a.determinant() > 0.0
                        && (a.c - trans.c).norm() < 2.0 =>
                {
                    a
                }
                _ => trans,
            };
            if !inside(&warp.c) {
                return (f.feature_id, TrackOutcome::Lost(LossReason::OutOfBounds));
            }
            let e = residuals(&cur_fine, &tf, &warp);
            let residual = e.iter().map(|v| v.abs()).sum::<f64>() / e.len() as f64;
            if residual > settings.loss_ratio * energy {
                return (f.feature_id, TrackOutcome::Lost(LossReason::Residual));
            }
            (
                f.feature_id,
                TrackOutcome::Tracked {
                    position: warp.c,
                    residual,
                },
            )
        })
        .collect()
}
