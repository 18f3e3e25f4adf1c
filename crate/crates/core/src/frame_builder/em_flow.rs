//! Per-feature constant-velocity flow by expectation maximization over
//! event pairs, and motion-compensated re-accumulation.

use nalgebra::{Matrix2, SymmetricEigen, Vector2};

use super::{spatial_variance, EventFrame, Feature, FlowEstimate, Image};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmSettings {
    /// Soft-assignment bandwidth in pixels.
    pub sigma: f64,
    pub max_iterations: usize,
    /// Convergence threshold on the change of displacement over one frame, px.
    pub tolerance: f64,
    pub min_events: usize,
}

impl Default for EmSettings {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            max_iterations: 50,
            tolerance: 1e-4,
            min_events: 5,
        }
    }
}

/// Motion-compensated frame: counts and the propagated event positions.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectedFrame {
    pub accum: Image,
    pub positions: Vec<Vector2<f64>>,
}

impl CorrectedFrame {
    pub fn spatial_variance(&self) -> f64 {
        let pts: Vec<_> = self.positions.iter().map(|p| (*p, 1.0)).collect();
        spatial_variance(&pts)
    }
}

struct WindowEvent {
    x: Vector2<f64>,
    dt: f64,
}

/// Eigenvalue ratio below which a window is treated as a straight edge.
const EDGE_RATIO: f64 = 0.15;

/// Unit normal of the window's events when they form a line, `None` when the
/// structure is two-dimensional.
fn edge_normal(events: &[WindowEvent]) -> Option<Vector2<f64>> {
    let n = events.len() as f64;
    let mean = events.iter().map(|e| e.x).sum::<Vector2<f64>>() / n;
    let cov = events
        .iter()
        .map(|e| (e.x - mean) * (e.x - mean).transpose())
        .sum::<Matrix2<f64>>()
        / n;
    let eig = SymmetricEigen::new(cov);
    let (lo, hi) = if eig.eigenvalues[0] <= eig.eigenvalues[1] {
        (0, 1)
    } else {
        (1, 0)
    };
    (eig.eigenvalues[lo] < EDGE_RATIO * eig.eigenvalues[hi])
        .then(|| eig.eigenvectors.column(lo).into_owned().normalize())
}

/// Minimum F statistic for event time being explained by event position.
const MIN_MOTION_F: f64 = 10.0;

/// F statistic of the least-squares fit `t ~ a + b . x`. A moving structure
/// fires pixels in spatial order; noise fires them in random order.
fn motion_f_statistic(events: &[WindowEvent]) -> f64 {
    let n = events.len() as f64;
    if events.len() <= 3 {
        return 0.0;
    }
    let mx = events.iter().map(|e| e.x).sum::<Vector2<f64>>() / n;
    let mt = events.iter().map(|e| e.dt).sum::<f64>() / n;
    let mut sxx = Matrix2::zeros();
    let mut sxt = Vector2::zeros();
    let mut stt = 0.0;
    for e in events {
        let dx = e.x - mx;
        let dt = e.dt - mt;
        sxx += dx * dx.transpose();
        sxt += dx * dt;
        stt += dt * dt;
    }
    if stt <= 0.0 {
        return 0.0;
    }
    let explained = match sxx.try_inverse() {
        Some(inv) => sxt.dot(&(inv * sxt)),
        None => {
            // Collinear positions: regress on the single spanned direction.
            let d = SymmetricEigen::new(sxx);
            let i = d.eigenvalues.imax();
            let u = d.eigenvectors.column(i);
            let lam = d.eigenvalues[i];
            if lam <= 0.0 {
                return 0.0;
            }
            u.dot(&sxt).powi(2) / lam
        }
    };
    let r2 = (explained / stt).clamp(0.0, 1.0);
    if r2 >= 1.0 {
        return f64::INFINITY;
    }
    (r2 / 2.0) / ((1.0 - r2) / (n - 3.0))
}

/// One EM run. `None` when the window carries no usable temporal spread or
/// no coherent motion.
///
/// Along a straight edge only the normal component of the flow is
/// observable; the tangential part is kept at its initial value.
fn estimate_window(
    events: &[WindowEvent],
    init: Vector2<f64>,
    span: f64,
    settings: &EmSettings,
) -> Option<Vector2<f64>> {
    if motion_f_statistic(events) < MIN_MOTION_F {
        return None;
    }
    let normal = edge_normal(events);
    let mut v = init;
    let mut weights = vec![0.0; events.len()];
    for k in 0..settings.max_iterations {
        let sigma = settings.sigma * (ANNEAL * ANNEAL_RATE.powi(k as i32)).max(1.0);
        let two_s2 = 2.0 * sigma * sigma;
        let cutoff2 = 9.0 * sigma * sigma;
        let annealing = sigma > settings.sigma;
        let prop: Vec<Vector2<f64>> = events.iter().map(|e| e.x - v * e.dt).collect();
        let mut num = Vector2::zeros();
        let mut den = 0.0;
        let mut mass = 0.0;
        for i in 0..events.len() {
            // E-step: soft assignment of event i to the other propagated events.
            for (j, w) in weights.iter_mut().enumerate() {
                let d2 = (prop[i] - prop[j]).norm_squared();
                *w = if i != j && d2 <= cutoff2 {
                    (-d2 / two_s2).exp()
                } else {
                    0.0
                };
            }
            for (j, &r) in weights.iter().enumerate() {
                if r == 0.0 {
                    continue;
                }
                let dt = events[i].dt - events[j].dt;
                num += (events[i].x - events[j].x) * (r * dt);
                den += r * dt * dt;
                mass += r;
            }
        }
        // M-step: closed-form least squares for a shared velocity.
        if mass <= 0.0 || den <= 1e-12 * mass * span * span {
            return None;
        }
        let full = num / den;
        let next = match normal {
            Some(n) => init - n * n.dot(&init) + n * n.dot(&full),
            None => full,
        };
        let change = (next - v).norm() * span;
        v = next;
        if !v.iter().all(|c| c.is_finite()) {
            return None;
        }
        if !annealing && change < settings.tolerance {
            break;
        }
    }
    Some(v)
}

const ANNEAL: f64 = 3.0;
const ANNEAL_RATE: f64 = 0.7;

/// Estimates a velocity per feature from the events near it and accumulates
/// every event displaced back to `frame.t0`. Events claimed by no feature are
/// accumulated in place. Features with fewer than `min_events` events, or
/// whose estimate is implausible, get zero flow and are flagged unreliable.
pub fn em_flow_correct(
    frame: &EventFrame,
    features: &[Feature],
    window: usize,
    flow_init: &FlowEstimate,
    settings: &EmSettings,
) -> (CorrectedFrame, FlowEstimate) {
    assert!(window >= 1, "window radius must be at least one pixel");
    let span = frame.t1 - frame.t0;
    let radius = window as f64;

    // Each event goes to the nearest feature whose window contains it.
    let mut owner: Vec<Option<usize>> = vec![None; frame.events.len()];
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); features.len()];
    for (ei, e) in frame.events.iter().enumerate() {
        let x = Vector2::new(e.x as f64, e.y as f64);
        let dt = e.t - frame.t0;
        let mut best: Option<(f64, usize)> = None;
        for (fi, f) in features.iter().enumerate() {
            let p = x - flow_init.get(f.feature_id) * dt;
            let d = p - f.position;
            if d.x.abs() <= radius && d.y.abs() <= radius {
                let n = d.norm_squared();
                if best.is_none_or(|(bn, _)| n < bn) {
                    best = Some((n, fi));
                }
            }
        }
        if let Some((_, fi)) = best {
            owner[ei] = Some(fi);
            members[fi].push(ei);
        }
    }

    let mut flow = FlowEstimate::default();
    for (fi, f) in features.iter().enumerate() {
        let idx = &members[fi];
        let init = flow_init.get(f.feature_id);
        let estimate = if idx.len() < settings.min_events {
            None
        } else {
            let evs: Vec<WindowEvent> = idx
                .iter()
                .map(|&ei| {
                    let e = &frame.events[ei];
                    WindowEvent {
                        x: Vector2::new(e.x as f64, e.y as f64),
                        dt: e.t - frame.t0,
                    }
                })
                .collect();
            estimate_window(&evs, init, span, settings).filter(|v| v.norm() * span <= radius)
        };
        match estimate {
            Some(v) => {
                flow.velocity.insert(f.feature_id, v);
            }
            None => {
                log::trace!("feature {}: flow unreliable", f.feature_id);
                flow.velocity.insert(f.feature_id, Vector2::zeros());
                flow.unreliable.push(f.feature_id);
            }
        }
    }

    let mut accum = Image::new(frame.accum.width(), frame.accum.height());
    let mut positions = Vec::with_capacity(frame.events.len());
    for (ei, e) in frame.events.iter().enumerate() {
        let x = Vector2::new(e.x as f64, e.y as f64);
        let p = match owner[ei] {
            Some(fi) => x - flow.get(features[fi].feature_id) * (e.t - frame.t0),
            None => x,
        };
        accum.splat(p.x, p.y, 1.0);
        positions.push(p);
    }
    (CorrectedFrame { accum, positions }, flow)
}
