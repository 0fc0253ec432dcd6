//! Scatterer-seeded region proposals standing in for a learned RPN.

use rand::Rng as _;

use super::ProposalConfig;
use crate::error::Result;
use crate::imaging::{gaussian_smooth, local_maxima, BBox, Image};
use crate::rng::Rng;

/// Fixed-size boxes centered on the brightest maxima of the smoothed image,
/// plus uniform random boxes, clipped and deduplicated in that order.
pub fn propose(img: &Image, cfg: &ProposalConfig, rng: &mut Rng) -> Result<Vec<BBox>> {
    let (w, h) = (img.width as f64, img.height as f64);
    let s = cfg.box_size.min(w).min(h);
    let smooth = gaussian_smooth(img, cfg.smooth_sigma)?;
    let mut candidates: Vec<BBox> = local_maxima(&smooth, cfg.peaks)
        .iter()
        .map(|p| BBox::centered(p.x as f64 + 0.5, p.y as f64 + 0.5, s, s).clip_to(w, h))
        .collect();
    for _ in 0..cfg.random_boxes {
        let x = rng.random_range(0.0..=w - s);
        let y = rng.random_range(0.0..=h - s);
        candidates.push(BBox::new(x, y, s, s));
    }
    let mut kept: Vec<BBox> = Vec::with_capacity(candidates.len());
    for c in candidates {
        if c.w >= 2.0 && c.h >= 2.0 && kept.iter().all(|k| k.iou(&c) <= cfg.dedup_iou) {
            kept.push(c);
        }
    }
    Ok(kept)
}
