use super::image::gaussian_kernel;
use super::Image;

pub const HARRIS_K: f64 = 0.04;
const WINDOW_SIGMA: f64 = 1.0;
const QUALITY: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    pub x: usize,
    pub y: usize,
    pub response: f64,
}

/// `det(M) - k tr(M)^2` with 3x3 Sobel gradients and a σ = 1 Gaussian
/// window; borders are replicated.
pub fn harris_response(img: &Image) -> Image {
    let (w, h) = (img.width(), img.height());
    let mut ixx = Image::new(w, h);
    let mut iyy = Image::new(w, h);
    let mut ixy = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let p = |dx: isize, dy: isize| img.get_clamped(x as isize + dx, y as isize + dy);
            let gx =
                (p(1, -1) + 2.0 * p(1, 0) + p(1, 1) - p(-1, -1) - 2.0 * p(-1, 0) - p(-1, 1)) / 8.0;
            let gy =
                (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1) - p(-1, -1) - 2.0 * p(0, -1) - p(1, -1)) / 8.0;
            *ixx.get_mut(x, y) = gx * gx;
            *iyy.get_mut(x, y) = gy * gy;
            *ixy.get_mut(x, y) = gx * gy;
        }
    }
    let (sxx, syy, sxy) = (window(&ixx), window(&iyy), window(&ixy));
    Image::from_fn(w, h, |x, y| {
        let (a, b, c) = (sxx.get(x, y), syy.get(x, y), sxy.get(x, y));
        a * b - c * c - HARRIS_K * (a + b) * (a + b)
    })
}

fn window(img: &Image) -> Image {
    // Same taps as Image::gaussian_blur; kept explicit so the window radius is
    // tied to the detector rather than to the blur helper.
    debug_assert_eq!(gaussian_kernel(WINDOW_SIGMA).len(), 7);
    img.gaussian_blur(WINDOW_SIGMA)
}

/// Up to `max_features` corners, strongest first (ties row-major), keeping
/// only responses above 1% of the maximum and at least `min_distance` px
/// from every stronger kept corner.
pub fn detect_harris(img: &Image, max_features: usize, min_distance: f64) -> Vec<Corner> {
    let r = harris_response(img);
    let peak = r.max();
    if !(peak > 0.0) {
        return Vec::new();
    }
    let threshold = QUALITY * peak;
    let mut cands: Vec<Corner> = Vec::new();
    for y in 0..r.height() {
        for x in 0..r.width() {
            let v = r.get(x, y);
            if v > 0.0 && v >= threshold {
                cands.push(Corner { x, y, response: v });
            }
        }
    }
    cands.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.y.cmp(&b.y))
            .then(a.x.cmp(&b.x))
    });
    let d2 = min_distance * min_distance;
    let mut kept: Vec<Corner> = Vec::new();
    for c in cands {
        if kept.len() >= max_features {
            break;
        }
        let clear = kept.iter().all(|k| {
            let dx = k.x as f64 - c.x as f64;
            let dy = k.y as f64 - c.y as f64;
            dx * dx + dy * dy >= d2
        });
        if clear {
            kept.push(c);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_no_corners() {
        assert!(detect_harris(&Image::filled(32, 32, 4.0), 10, 5.0).is_empty());
    }

    #[test]
    fn quadrant_gives_single_apex() {
        let img = Image::from_fn(32, 32, |x, y| if x >= 16 && y >= 16 { 1.0 } else { 0.0 });
        let c = detect_harris(&img, 10, 5.0);
        assert_eq!(c.len(), 1, "{c:?}");
        assert!((c[0].x as f64 - 15.5).abs() <= 1.5 && (c[0].y as f64 - 15.5).abs() <= 1.5);
    }

    #[test]
    fn close_pair_is_suppressed() {
        // Two isolated dots 3 px apart, the left one brighter.
        let img = Image::from_fn(32, 32, |x, y| match (x, y) {
            (14, 16) => 2.0,
            (17, 16) => 1.0,
            _ => 0.0,
        });
        let near =
            |c: &Corner, x: f64| (c.x as f64 - x).abs() <= 1.0 && (c.y as f64 - 16.0).abs() <= 1.0;
        let free = detect_harris(&img, 10, 1.0);
        assert!(free.iter().any(|c| near(c, 17.0)));
        let kept = detect_harris(&img, 10, 5.0);
        assert!(near(&kept[0], 14.0), "{kept:?}");
        assert!(!kept.iter().any(|c| near(c, 17.0)), "{kept:?}");
    }

    #[test]
    fn order_is_deterministic() {
        let img = Image::from_fn(32, 32, |x, y| ((x * 7 + y * 13) % 5) as f64);
        assert_eq!(detect_harris(&img, 20, 3.0), detect_harris(&img, 20, 3.0));
    }
}
