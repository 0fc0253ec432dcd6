//! Scattering point sets and the Earth Mover's Distance between them.

mod exact;
mod sinkhorn;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{gaussian_smooth, local_maxima, Image};

pub use exact::{emd_exact, EXACT_MAX_POINTS};
pub use sinkhorn::{
    default_epsilon, emd_sinkhorn, SinkhornOutput, SINKHORN_MAX_ITERS, SINKHORN_TOL,
};

/// Side length of canonical ROI patches.
pub const CANONICAL: usize = 64;
/// Smoothing applied before maxima detection.
pub const EXTRACT_SIGMA: f64 = 1.0;
/// Scatterers retained per ROI.
pub const MAX_POINTS: usize = 10;

/// Weighted 2-D scattering point cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterSet {
    pub points: Vec<[f64; 2]>,
    pub intensities: Vec<f64>,
    pub weights: Vec<f64>,
}

impl ScatterSet {
    /// Builds a set with weights `a_n / Σ a`.
    pub fn new(points: Vec<[f64; 2]>, intensities: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("scatter set"));
        }
        if points.len() != intensities.len() {
            return Err(Error::invalid("points and intensities differ in length"));
        }
        if intensities.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
            return Err(Error::invalid(
                "intensities must be finite and non-negative",
            ));
        }
        let total: f64 = intensities.iter().sum();
        if !(total > 0.0) {
            return Err(Error::invalid("scatter set has zero total intensity"));
        }
        let weights = intensities.iter().map(|a| a / total).collect();
        Ok(Self {
            points,
            intensities,
            weights,
        })
    }

    /// Explicit weights (normalized to sum 1); intensities set equal to the weights.
    pub fn with_weights(points: Vec<[f64; 2]>, weights: Vec<f64>) -> Result<Self> {
        Self::new(points, weights)
    }

    pub fn uniform(points: Vec<[f64; 2]>) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![1.0; n])
    }

    pub fn singleton(x: f64, y: f64, intensity: f64) -> Self {
        Self {
            points: vec![[x, y]],
            intensities: vec![intensity],
            weights: vec![1.0],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn scaled(&self, s: f64) -> ScatterSet {
        ScatterSet {
            points: self.points.iter().map(|p| [p[0] * s, p[1] * s]).collect(),
            intensities: self.intensities.clone(),
            weights: self.weights.clone(),
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> ScatterSet {
        ScatterSet {
            points: self.points.iter().map(|p| [p[0] + dx, p[1] + dy]).collect(),
            intensities: self.intensities.clone(),
            weights: self.weights.clone(),
        }
    }
}

/// Non-negative flows `f[n][m]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub rows: usize,
    pub cols: usize,
    pub flows: Vec<f64>,
}

impl TransportPlan {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.flows[i * self.cols + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.flows[i * self.cols..(i + 1) * self.cols].iter().sum())
            .collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self.get(i, j)).sum())
            .collect()
    }

    pub fn total(&self) -> f64 {
        self.flows.iter().sum()
    }

    /// `Σ f·c / Σ f` for a cost matrix in the same layout.
    pub fn normalized_cost(&self, cost: &[f64]) -> f64 {
        let total = self.total();
        let c: f64 = self.flows.iter().zip(cost).map(|(f, c)| f * c).sum();
        if total > 0.0 {
            c / total
        } else {
            0.0
        }
    }
}

/// Euclidean ground costs, row-major `|P| × |Q|`.
pub fn cost_matrix(p: &ScatterSet, q: &ScatterSet) -> Vec<f64> {
    let mut c = Vec::with_capacity(p.len() * q.len());
    for a in &p.points {
        for b in &q.points {
            c.push(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
        }
    }
    c
}

/// Smooth, keep the strongest maxima, normalize their intensities into weights.
///
/// Patches without any maximum map to a singleton at the intensity centroid
/// (the patch center when the patch is all zero).
pub fn extract_scatter_set(patch: &Image) -> Result<ScatterSet> {
    if patch.width != CANONICAL || patch.height != CANONICAL {
        return Err(Error::invalid(format!(
            "expected a {CANONICAL}x{CANONICAL} patch, got {}x{}",
            patch.width, patch.height
        )));
    }
    extract_scatter_set_with(patch, EXTRACT_SIGMA, MAX_POINTS)
}

pub fn extract_scatter_set_with(
    patch: &Image,
    sigma: f64,
    max_points: usize,
) -> Result<ScatterSet> {
    let smooth = gaussian_smooth(patch, sigma)?;
    let peaks = local_maxima(&smooth, max_points);
    if peaks.is_empty() {
        return Ok(centroid_singleton(patch));
    }
    let points = peaks.iter().map(|p| [p.x as f64, p.y as f64]).collect();
    let intensities = peaks.iter().map(|p| p.intensity).collect();
    ScatterSet::new(points, intensities).or_else(|_| Ok(centroid_singleton(patch)))
}

fn centroid_singleton(patch: &Image) -> ScatterSet {
    let total = patch.sum();
    if !(total > 0.0) {
        return ScatterSet::singleton(
            (patch.width as f64 - 1.0) / 2.0,
            (patch.height as f64 - 1.0) / 2.0,
            0.0,
        );
    }
    let (mut cx, mut cy) = (0.0, 0.0);
    for y in 0..patch.height {
        for x in 0..patch.width {
            let v = patch.get(x, y);
            cx += v * x as f64;
            cy += v * y as f64;
        }
    }
    ScatterSet::singleton(cx / total, cy / total, total / patch.data.len() as f64)
}

/// EMD between two scatter sets: exact when both fit the exact solver,
/// entropic otherwise.
pub fn scatter_distance(p: &ScatterSet, q: &ScatterSet) -> Result<f64> {
    if p.len().max(q.len()) <= EXACT_MAX_POINTS {
        Ok(emd_exact(p, q)?.0)
    } else {
        let eps = default_epsilon(p, q);
        if eps == 0.0 {
            // every pair of points coincides
            return Ok(0.0);
        }
        Ok(emd_sinkhorn(p, q, eps, SINKHORN_MAX_ITERS, SINKHORN_TOL)?.distance)
    }
}

/// Scattering structure distance between two canonical ROI patches.
pub fn d_st(a: &Image, b: &Image) -> Result<f64> {
    let p = extract_scatter_set(a)?;
    let q = extract_scatter_set(b)?;
    scatter_distance(&p, &q)
}

/// Full symmetric pairwise distance matrix.
pub fn distance_matrix(sets: &[ScatterSet]) -> Result<Vec<Vec<f64>>> {
    let n = sets.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = scatter_distance(&sets[i], &sets[j])?;
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    Ok(d)
}
