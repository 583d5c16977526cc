//! Canny edge detection on image luminance.

use crate::camera::CameraImage;

/// Row-major boolean edge map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMap {
    pub width: usize,
    pub height: usize,
    pub edges: Vec<bool>,
}

impl EdgeMap {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.edges[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.edges.iter().filter(|&&e| e).count()
    }
}

const GAUSS_SIGMA: f64 = 1.4;

fn gaussian_kernel() -> [f32; 5] {
    let mut k = [0.0f64; 5];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - 2.0;
        *v = (-x * x / (2.0 * GAUSS_SIGMA * GAUSS_SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.map(|v| (v / sum) as f32)
}

#[inline]
fn at(buf: &[f32], w: usize, h: usize, x: i64, y: i64) -> f32 {
    let xc = x.clamp(0, w as i64 - 1) as usize;
    let yc = y.clamp(0, h as i64 - 1) as usize;
    buf[yc * w + xc]
}

/// Separable 5x5 Gaussian blur with replicated borders.
fn blur(gray: &[f32], w: usize, h: usize) -> Vec<f32> {
    let k = gaussian_kernel();
    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (0..5)
                .map(|i| k[i] * at(gray, w, h, x as i64 + i as i64 - 2, y as i64))
                .sum();
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (0..5)
                .map(|i| k[i] * at(&tmp, w, h, x as i64, y as i64 + i as i64 - 2))
                .sum();
        }
    }
    out
}

/// Full Canny pipeline: 5x5 Gaussian (sigma 1.4), Sobel gradients,
/// non-maximum suppression and hysteresis on the gradient magnitude.
///
/// Magnitudes are divided by 4 (the Sobel response to a unit step without
/// blur), so thresholds are in luminance units.
pub fn canny_edges(image: &CameraImage, low: f64, high: f64) -> EdgeMap {
    assert!(0.0 <= low && low <= high, "canny thresholds must satisfy 0 <= low <= high");
    let (w, h) = (image.width(), image.height());
    let smooth = blur(&image.luminance(), w, h);

    let mut mag = vec![0.0f32; w * h];
    let mut dir = vec![0u8; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let p = |dx: i64, dy: i64| at(&smooth, w, h, x + dx, y + dy);
            let gx = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
            let gy = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
            let o = y as usize * w + x as usize;
            mag[o] = gx.hypot(gy) / 4.0;
            // Quantize gradient direction into 0, 45, 90, 135 degrees.
            let angle = gy.atan2(gx).to_degrees().rem_euclid(180.0);
            dir[o] = if !(22.5..157.5).contains(&angle) {
                0
            } else if angle < 67.5 {
                1
            } else if angle < 112.5 {
                2
            } else {
                3
            };
        }
    }

    let mut thin = vec![0.0f32; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let o = y as usize * w + x as usize;
            let m = mag[o];
            if m <= 0.0 {
                continue;
            }
            let (dx, dy) = match dir[o] {
                0 => (1, 0),
                1 => (1, 1),
                2 => (0, 1),
                _ => (-1, 1),
            };
            let ahead = at(&mag, w, h, x + dx, y + dy);
            let behind = at(&mag, w, h, x - dx, y - dy);
            // Asymmetric comparison keeps plateaus one pixel wide.
            if m > behind && m >= ahead {
                thin[o] = m;
            }
        }
    }

    let (low, high) = (low as f32, high as f32);
    let mut edges = vec![false; w * h];
    let mut stack: Vec<usize> = Vec::new();
    for (o, &m) in thin.iter().enumerate() {
        if m >= high && m > 0.0 {
            edges[o] = true;
            stack.push(o);
        }
    }
    while let Some(o) = stack.pop() {
        let (x, y) = ((o % w) as i64, (o / w) as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (xx, yy) = (x + dx, y + dy);
                if xx < 0 || yy < 0 || xx >= w as i64 || yy >= h as i64 {
                    continue;
                }
                let q = yy as usize * w + xx as usize;
                if !edges[q] && thin[q] >= low && thin[q] > 0.0 {
                    edges[q] = true;
                    stack.push(q);
                }
            }
        }
    }
    EdgeMap {
        width: w,
        height: h,
        edges,
    }
}
