//! Synthetic cross-resolution scenes and the image primitives used for
//! scattering-point extraction.

mod filter;
pub mod pgm;
mod scene;

use serde::{Deserialize, Serialize};

pub use filter::{gaussian_kernel, gaussian_smooth, local_maxima, resize_roi, Peak};
pub use scene::{
    gen_scene, gen_scene_at, gen_scene_pair, render_constellation_patch, sample_layout,
    ConstellationKind, GenConfig, Layout, Scene, Target,
};

/// Row-major single-channel intensity grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, v: f64) -> Self {
        Self {
            width,
            height,
            data: vec![v; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn transpose(&self) -> Image {
        Image::from_fn(self.height, self.width, |x, y| self.get(y, x))
    }

    /// Bilinear sample at continuous pixel-center coordinates, clamped to the edges.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let xc = x.clamp(0.0, (self.width - 1) as f64);
        let yc = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = xc.floor() as usize;
        let y0 = yc.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = xc - x0 as f64;
        let fy = yc - y0 as f64;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bot = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// A generated scene image with its domain metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    pub image: Image,
    pub domain: Domain,
    /// Blur/downsample ratio relative to the high-resolution reference.
    pub resolution_factor: f64,
}

/// Axis-aligned box `(x, y, w, h)` in pixels; serialized as a 4-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        BBox {
            x: a[0],
            y: a[1],
            w: a[2],
            h: a[3],
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn centered(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let ix = (self.x + self.w).min(o.x + o.w) - self.x.max(o.x);
        let iy = (self.y + self.h).min(o.y + o.h) - self.y.max(o.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        inter / (self.area() + o.area() - inter)
    }

    /// Shifts (never shrinks, unless larger than the image) the box to lie inside `[0,w]×[0,h]`.
    pub fn clip_to(&self, width: f64, height: f64) -> BBox {
        let w = self.w.min(width);
        let h = self.h.min(height);
        BBox {
            x: self.x.clamp(0.0, width - w),
            y: self.y.clamp(0.0, height - h),
            w,
            h,
        }
    }

    pub fn inside(&self, width: f64, height: f64) -> bool {
        self.x >= 0.0
            && self.y >= 0.0
            && self.x + self.w <= width + 1e-9
            && self.y + self.h <= height + 1e-9
    }
}

/// Ground-truth boxes of one scene (single foreground class).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub boxes: Vec<BBox>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_basics() {
        let a = BBox::new(0., 0., 10., 10.);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(20., 0., 5., 5.)), 0.0);
        let b = BBox::new(5., 0., 10., 10.);
        assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn bbox_serializes_as_array() {
        let s = serde_json::to_string(&BBox::new(1., 2., 3., 4.)).unwrap();
        assert_eq!(s, "[1.0,2.0,3.0,4.0]");
    }
}
