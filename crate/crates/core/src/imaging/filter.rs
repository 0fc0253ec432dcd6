use super::{BBox, Image};
use crate::error::{Error, Result};

/// Normalized 1-D Gaussian kernel of radius `⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Half-sample symmetric reflection: `-1 → 0`, `n → n-1`.
#[inline]
fn reflect(i: isize, n: isize) -> usize {
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_smooth(img: &Image, sigma: f64) -> Result<Image> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!(
            "gaussian sigma must be > 0, got {sigma}"
        )));
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (w, h) = (img.width as isize, img.height as isize);

    let mut tmp = Image::new(img.width, img.height);
    for y in 0..img.height {
        let row = &img.data[y * img.width..(y + 1) * img.width];
        for x in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * row[reflect(x + t as isize - r, w)];
            }
            tmp.data[y * img.width + x as usize] = acc;
        }
    }
    let mut out = Image::new(img.width, img.height);
    for y in 0..h {
        for x in 0..img.width {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                acc += kv * tmp.data[reflect(y + t as isize - r, h) * img.width + x];
            }
            out.data[y as usize * img.width + x] = acc;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub x: usize,
    pub y: usize,
    pub intensity: f64,
}

const NEIGHBORS: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

/// Local maxima over the 8-neighborhood.
///
/// Border pixels never qualify. A pixel strictly above all neighbors is a
/// maximum; an equal-valued 8-connected plateau whose surroundings are all
/// strictly lower, and which does not touch the border, contributes its
/// smallest `(y, x)` member. Results are sorted by intensity (descending,
/// ties by `(y, x)`) and truncated to `max_points`.
pub fn local_maxima(img: &Image, max_points: usize) -> Vec<Peak> {
    let (w, h) = (img.width, img.height);
    let mut peaks = Vec::new();
    if w < 3 || h < 3 || max_points == 0 {
        return peaks;
    }
    let mut visited = vec![false; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let v = img.get(x, y);
            let mut greater = false;
            let mut equal = false;
            for (dx, dy) in NEIGHBORS {
                let n = img.get((x as isize + dx) as usize, (y as isize + dy) as usize);
                if n > v {
                    greater = true;
                    break;
                }
                if n == v {
                    equal = true;
                }
            }
            if greater {
                continue;
            }
            if !equal {
                peaks.push(Peak { x, y, intensity: v });
                continue;
            }
            if visited[y * w + x] {
                continue;
            }
            if let Some((px, py)) = plateau_representative(img, x, y, &mut visited) {
                peaks.push(Peak {
                    x: px,
                    y: py,
                    intensity: v,
                });
            }
        }
    }
    peaks.sort_by(|a, b| {
        b.intensity
            .total_cmp(&a.intensity)
            .then(a.y.cmp(&b.y))
            .then(a.x.cmp(&b.x))
    });
    peaks.truncate(max_points);
    peaks
}

fn plateau_representative(
    img: &Image,
    x0: usize,
    y0: usize,
    visited: &mut [bool],
) -> Option<(usize, usize)> {
    let (w, h) = (img.width, img.height);
    let v = img.get(x0, y0);
    let mut stack = vec![(x0, y0)];
    visited[y0 * w + x0] = true;
    let mut valid = true;
    let mut best = (y0, x0);
    while let Some((x, y)) = stack.pop() {
        if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
            valid = false;
        }
        best = best.min((y, x));
        for (dx, dy) in NEIGHBORS {
            let nx = x as isize + dx;
            let ny = y as isize + dy;
            if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                continue;
            }
            let (nx, ny) = (nx as usize, ny as usize);
            let n = img.get(nx, ny);
            if n > v {
                valid = false;
            } else if n == v && !visited[ny * w + nx] {
                visited[ny * w + nx] = true;
                stack.push((nx, ny));
            }
        }
    }
    valid.then_some((best.1, best.0))
}

/// Bilinear resample of `bbox` onto a `canonical × canonical` grid
/// (pixel-center aligned). Intensities are not normalized.
pub fn resize_roi(img: &Image, bbox: &BBox, canonical: usize) -> Result<Image> {
    if bbox.w < 2.0 || bbox.h < 2.0 {
        return Err(Error::invalid(format!(
            "degenerate ROI {}x{}",
            bbox.w, bbox.h
        )));
    }
    if !bbox.inside(img.width as f64, img.height as f64) {
        return Err(Error::invalid(format!(
            "ROI ({}, {}, {}, {}) outside {}x{} image",
            bbox.x, bbox.y, bbox.w, bbox.h, img.width, img.height
        )));
    }
    if canonical == 0 {
        return Err(Error::invalid("canonical size must be positive"));
    }
    let sx = bbox.w / canonical as f64;
    let sy = bbox.h / canonical as f64;
    Ok(Image::from_fn(canonical, canonical, |u, v| {
        let x = bbox.x + (u as f64 + 0.5) * sx - 0.5;
        let y = bbox.y + (v as f64 + 0.5) * sy - 0.5;
        img.sample_bilinear(x, y)
    }))
}
