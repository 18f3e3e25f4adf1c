//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

pub mod depth_oracle {
    use evo_core::depth_filter::{DepthFilterState, DepthMeasurement};

    /// Composite Simpson weights on `n` (odd) uniformly spaced nodes.
    fn simpson(lo: f64, hi: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
        assert!(n % 2 == 1 && n >= 3);
        let h = (hi - lo) / (n - 1) as f64;
        let nodes = (0..n).map(|i| lo + h * i as f64).collect();
        let weights = (0..n)
            .map(|i| {
                let c = if i == 0 || i == n - 1 {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                c * h / 3.0
            })
            .collect();
        (nodes, weights)
    }

    fn gauss(x: f64, mean: f64, var: f64) -> f64 {
        (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
    }

    /// Exact posterior over (d, rho) integrated on a 1e5-node depth grid times
    /// a Simpson Beta quadrature, then projected onto Gaussian x Beta.
    /// Returns (d_mean, d_var, a, b).
    pub fn posterior_moments(s: &DepthFilterState, m: &DepthMeasurement) -> (f64, f64, f64, f64) {
        let sigma = s.d_var.sqrt();
        let tau = m.tau2.sqrt();
        let lo = (s.d_mean - 12.0 * sigma).min(m.d_tilde - 12.0 * tau);
        let hi = (s.d_mean + 12.0 * sigma).max(m.d_tilde + 12.0 * tau);
        let (ds, wd) = simpson(lo, hi, 100_001);

        let (rs, wr) = simpson(0.0, 1.0, 4_001);
        let beta: Vec<f64> = rs
            .iter()
            .map(|r| r.powf(s.a - 1.0) * (1.0 - r).powf(s.b - 1.0))
            .collect();
        let beta_mass: f64 = beta.iter().zip(&wr).map(|(p, w)| p * w).sum();
        // E_prior[rho^k] for k = 0..3
        let rho_mom: Vec<f64> = (0..4)
            .map(|k| {
                rs.iter()
                    .zip(&beta)
                    .zip(&wr)
                    .map(|((r, p), w)| r.powi(k) * p * w)
                    .sum::<f64>()
                    / beta_mass
            })
            .collect();

        let u = if m.d_tilde >= s.d_min && m.d_tilde <= s.d_max {
            1.0 / (s.d_max - s.d_min)
        } else {
            0.0
        };
        // Depth integrals of prior * N(x | d, tau^2) (inlier) and prior (outlier).
        let mut gi = [0.0; 3];
        let mut go = [0.0; 3];
        for (d, w) in ds.iter().zip(&wd) {
            let prior = gauss(*d, s.d_mean, s.d_var) * w;
            let lik = gauss(m.d_tilde, *d, m.tau2);
            for k in 0..3 {
                gi[k] += d.powi(k as i32) * prior * lik;
                go[k] += d.powi(k as i32) * prior;
            }
        }
        // joint(d, rho) = prior(d) prior(rho) [rho N + (1 - rho) U]
        let z = rho_mom[1] * gi[0] + (rho_mom[0] - rho_mom[1]) * u * go[0];
        let mean = (rho_mom[1] * gi[1] + (rho_mom[0] - rho_mom[1]) * u * go[1]) / z;
        let second = (rho_mom[1] * gi[2] + (rho_mom[0] - rho_mom[1]) * u * go[2]) / z;
        // Central second moment computed directly to avoid cancellation.
        let mut central = [0.0; 2];
        for (d, w) in ds.iter().zip(&wd) {
            let prior = gauss(*d, s.d_mean, s.d_var) * w;
            let lik = gauss(m.d_tilde, *d, m.tau2);
            let c = (d - mean).powi(2) * prior;
            central[0] += c * lik;
            central[1] += c;
        }
        let var = (rho_mom[1] * central[0] + (rho_mom[0] - rho_mom[1]) * u * central[1]) / z;
        let _ = second;
        let e1 = (rho_mom[2] * gi[0] + (rho_mom[1] - rho_mom[2]) * u * go[0]) / z;
        let e2 = (rho_mom[3] * gi[0] + (rho_mom[2] - rho_mom[3]) * u * go[0]) / z;
        let a = e1 * (e1 - e2) / (e2 - e1 * e1);
        let b = a * (1.0 - e1) / e1;
        (mean, var, a, b)
    }
}

pub mod harris_oracle {
    use evo_core::frame_builder::{Image, HARRIS_K};

    /// Direct Harris response: explicit 3x3 Sobel sums and a full 2-D
    /// Gaussian window (σ = 1, radius 3) with replicated borders, no
    /// separable shortcuts.
    pub fn response(img: &Image) -> Vec<Vec<f64>> {
        let (w, h) = (img.width() as i64, img.height() as i64);
        let px = |x: i64, y: i64| img.get(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize);
        let sobel_x = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let sobel_y = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
        let grad = |x: i64, y: i64| {
            let (mut gx, mut gy) = (0.0, 0.0);
            for j in 0..3 {
                for i in 0..3 {
                    let v = px(x + i as i64 - 1, y + j as i64 - 1);
                    gx += sobel_x[j][i] * v;
                    gy += sobel_y[j][i] * v;
                }
            }
            (gx / 8.0, gy / 8.0)
        };
        let g: Vec<Vec<(f64, f64)>> = (0..h)
            .map(|y| (0..w).map(|x| grad(x, y)).collect())
            .collect();
        let gp = |x: i64, y: i64| g[y.clamp(0, h - 1) as usize][x.clamp(0, w - 1) as usize];
        let mut kernel = [[0.0; 7]; 7];
        let mut ksum = 0.0;
        for (j, row) in kernel.iter_mut().enumerate() {
            for (i, k) in row.iter_mut().enumerate() {
                let (dx, dy) = (i as f64 - 3.0, j as f64 - 3.0);
                *k = (-(dx * dx + dy * dy) / 2.0).exp();
                ksum += *k;
            }
        }
        (0..h)
            .map(|y| {
                (0..w)
                    .map(|x| {
                        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
                        #[allow(clippy::needless_range_loop)]
                        for j in 0..7 {
                            for i in 0..7 {
                                // Replicate-border window over the gradient
                                // products, matching a clamped convolution.
                                let (gx, gy) = gp(x + i as i64 - 3, y + j as i64 - 3);
                                let k = kernel[j][i] / ksum;
                                a += k * gx * gx;
                                b += k * gy * gy;
                                c += k * gx * gy;
                            }
                        }
                        a * b - c * c - HARRIS_K * (a + b) * (a + b)
                    })
                    .collect()
            })
            .collect()
    }

    /// Pixels of the `n` largest responses, ties broken row-major.
    pub fn top(resp: &[Vec<f64>], n: usize) -> Vec<(usize, usize)> {
        let mut all: Vec<(f64, usize, usize)> = resp
            .iter()
            .enumerate()
            .flat_map(|(y, row)| row.iter().enumerate().map(move |(x, v)| (*v, y, x)))
            .collect();
        all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        all.into_iter().take(n).map(|(_, y, x)| (x, y)).collect()
    }
}
