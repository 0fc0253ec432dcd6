//! Patch-embedding encoder with detection and evidential heads.
//!
//! The image is cut into 8×8 cells; each cell is embedded by
//! `tanh(x·W1 + b1)·W2 + b2`. An ROI feature is the mean of the cell
//! features the box overlaps, weighted by overlap area.

use std::f64::consts::LN_2;

use rand::Rng as _;

use crate::diffcore::{Binding, Graph, NodeId, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::imaging::{BBox, Image};
use crate::rng::Rng;

pub const CELL: usize = 8;
pub const PATCH_DIM: usize = CELL * CELL;
pub const BG_CLASS: usize = 0;
pub const FG_CLASS: usize = 1;
pub const CLASSES: usize = 2;

pub const ENC_PREFIX: &str = "enc";
pub const DET_PREFIX: &str = "det";
pub const EVI_PREFIX: &str = "evi";

/// `[cells, 64]` matrix of cell pixels as `ln(1 + v) - ln 2`, zero at the unit
/// clutter floor. Cells are in row-major grid order.
pub fn patch_matrix(img: &Image) -> Result<Tensor> {
    if img.width % CELL != 0 || img.height % CELL != 0 || img.width == 0 || img.height == 0 {
        return Err(Error::invalid(format!(
            "image {}x{} is not a positive multiple of {CELL}",
            img.width, img.height
        )));
    }
    let (gw, gh) = (img.width / CELL, img.height / CELL);
    let mut data = Vec::with_capacity(gw * gh * PATCH_DIM);
    for cy in 0..gh {
        for cx in 0..gw {
            for py in 0..CELL {
                for px in 0..CELL {
                    data.push(img.get(cx * CELL + px, cy * CELL + py).max(0.0).ln_1p() - LN_2);
                }
            }
        }
    }
    Tensor::matrix(gw * gh, PATCH_DIM, data)
}

/// Grid cells (row-major indices) whose area overlaps `b`, with the overlap area.
pub fn overlapping_cells(b: &BBox, width: usize, height: usize) -> Vec<(usize, f64)> {
    let (gw, gh) = (width / CELL, height / CELL);
    let c = CELL as f64;
    let mut cells = Vec::new();
    for cy in 0..gh {
        let (y0, y1) = (cy as f64 * c, (cy + 1) as f64 * c);
        let oy = (b.y + b.h).min(y1) - b.y.max(y0);
        if oy <= 0.0 {
            continue;
        }
        for cx in 0..gw {
            let (x0, x1) = (cx as f64 * c, (cx + 1) as f64 * c);
            let ox = (b.x + b.w).min(x1) - b.x.max(x0);
            if ox > 0.0 {
                cells.push((cy * gw + cx, ox * oy));
            }
        }
    }
    cells
}

/// `[n, cells]` pooling matrix; row `i` averages the cells under `boxes[i]`
/// weighted by their overlap area.
pub fn pool_matrix(boxes: &[BBox], width: usize, height: usize) -> Result<Tensor> {
    let cells = (width / CELL) * (height / CELL);
    let mut data = vec![0.0; boxes.len() * cells];
    for (i, b) in boxes.iter().enumerate() {
        let hit = overlapping_cells(b, width, height);
        let total: f64 = hit.iter().map(|h| h.1).sum();
        if hit.is_empty() {
            return Err(Error::invalid(format!("box {:?} covers no grid cell", b)));
        }
        for &(c, a) in &hit {
            data[i * cells + c] = a / total;
        }
    }
    Tensor::matrix(boxes.len(), cells, data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detector {
    pub feature_dim: usize,
}

fn uniform(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let a = (1.0 / rows as f64).sqrt();
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-a..a)).collect(),
    )
    .unwrap()
}

impl Detector {
    pub fn new(feature_dim: usize) -> Self {
        Self { feature_dim }
    }

    pub fn init(&self, params: &mut ParamSet, rng: &mut Rng) {
        let d = self.feature_dim;
        params.insert("enc.w1", uniform(PATCH_DIM, d, rng));
        params.insert("enc.b1", Tensor::zeros(&[d]));
        params.insert("enc.w2", uniform(d, d, rng));
        params.insert("enc.b2", Tensor::zeros(&[d]));
        params.insert("det.w", uniform(d, CLASSES, rng));
        params.insert("det.b", Tensor::zeros(&[CLASSES]));
        params.insert("evi.w", uniform(d, CLASSES, rng));
        params.insert("evi.b", Tensor::zeros(&[CLASSES]));
    }

    /// Cell feature grid `[cells, d]`.
    pub fn grid(&self, g: &mut Graph, b: &Binding, patches: NodeId) -> Result<NodeId> {
        let h = g.matmul(patches, b.id("enc.w1"))?;
        let h = g.add_row(h, b.id("enc.b1"))?;
        let h = g.tanh(h);
        let f = g.matmul(h, b.id("enc.w2"))?;
        g.add_row(f, b.id("enc.b2"))
    }

    /// Detection logits `[n, 2]` from ROI features `[n, d]`.
    pub fn det_logits(&self, g: &mut Graph, b: &Binding, roi: NodeId) -> Result<NodeId> {
        let z = g.matmul(roi, b.id("det.w"))?;
        g.add_row(z, b.id("det.b"))
    }

    /// Non-negative evidence `[n, 2]` from ROI features.
    pub fn evidence(&self, g: &mut Graph, b: &Binding, roi: NodeId) -> Result<NodeId> {
        let z = g.matmul(roi, b.id("evi.w"))?;
        let z = g.add_row(z, b.id("evi.b"))?;
        Ok(g.softplus(z))
    }
}

/// Mean cross-entropy of `log_softmax(logits)` against class labels.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (n, c) = match g.value(logits).shape() {
        [n, c] => (*n, *c),
        s => {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits must be [n, C], got {s:?}"),
            ))
        }
    };
    if n == 0 {
        return Err(Error::Empty("proposal batch"));
    }
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{n} rows but {} labels", labels.len()),
        ));
    }
    let mut onehot = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::invalid(format!("label {y} out of range")));
        }
        onehot[i * c + y] = 1.0;
    }
    let onehot = g.constant(Tensor::matrix(n, c, onehot)?);
    let lp = g.log_softmax(logits)?;
    let picked = g.mul(lp, onehot)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / n as f64))
}
