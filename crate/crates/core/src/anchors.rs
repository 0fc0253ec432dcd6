//! Structure anchors: k-medoids over scattering-structure distances, and the
//! margin-clamped softmax similarity of an instance to each anchor.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scatter::ScatterSet;

/// Default similarity margin.
pub const DEFAULT_DELTA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    /// Medoid indices into the distance matrix, in selection order.
    pub medoids: Vec<usize>,
    /// Nearest medoid position (index into `medoids`) for every point.
    pub assignment: Vec<usize>,
    /// `Σ_i min_j d(i, medoid_j)`.
    pub objective: f64,
}

fn validate(dist: &[Vec<f64>]) -> Result<()> {
    let n = dist.len();
    for (i, row) in dist.iter().enumerate() {
        if row.len() != n {
            return Err(Error::invalid("distance matrix is not square"));
        }
        if row[i].abs() > 1e-9 {
            return Err(Error::invalid(format!("non-zero diagonal at {i}")));
        }
        for j in 0..i {
            if (row[j] - dist[j][i]).abs() > 1e-9 * (1.0 + row[j].abs()) {
                return Err(Error::invalid(format!(
                    "distance matrix asymmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

pub fn objective(dist: &[Vec<f64>], medoids: &[usize]) -> f64 {
    dist.iter()
        .map(|row| {
            medoids
                .iter()
                .map(|&m| row[m])
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

fn assign(dist: &[Vec<f64>], medoids: &[usize]) -> Vec<usize> {
    dist.iter()
        .map(|row| {
            let mut best = 0;
            for (k, &m) in medoids.iter().enumerate() {
                if row[m] < row[medoids[best]] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Steepest-descent PAM swap phase; returns once no swap improves the objective.
pub fn pam_swap(dist: &[Vec<f64>], mut medoids: Vec<usize>) -> Vec<usize> {
    let n = dist.len();
    let mut current = objective(dist, &medoids);
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for slot in 0..medoids.len() {
            for o in 0..n {
                if medoids.contains(&o) {
                    continue;
                }
                let old = medoids[slot];
                medoids[slot] = o;
                let cand = objective(dist, &medoids);
                medoids[slot] = old;
                let bound = best.map_or(current, |b| b.2);
                if cand < bound - 1e-12 * (1.0 + current.abs()) {
                    best = Some((slot, o, cand));
                }
            }
        }
        match best {
            Some((slot, o, cand)) => {
                medoids[slot] = o;
                current = cand;
            }
            None => return medoids,
        }
    }
}

/// PAM k-medoids: random first medoid, max-min seeding, then swaps.
pub fn kmedoids(dist: &[Vec<f64>], k: usize, rng: &mut Rng) -> Result<Clustering> {
    validate(dist)?;
    let n = dist.len();
    if k == 0 {
        return Err(Error::invalid("need at least one medoid"));
    }
    if k > n {
        return Err(Error::invalid(format!(
            "{k} medoids requested for {n} instances"
        )));
    }
    let mut medoids = vec![rng.random_range(0..n)];
    while medoids.len() < k {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for i in 0..n {
            if medoids.contains(&i) {
                continue;
            }
            let d = medoids
                .iter()
                .map(|&m| dist[i][m])
                .fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        medoids.push(best.1);
    }
    let medoids = pam_swap(dist, medoids);
    Ok(Clustering {
        assignment: assign(dist, &medoids),
        objective: objective(dist, &medoids),
        medoids,
    })
}

/// Medoid scatter sets drawn from the source instance pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureAnchorSet {
    pub n_a: usize,
    pub medoid_ids: Vec<String>,
    pub medoid_point_sets: Vec<ScatterSet>,
}

impl StructureAnchorSet {
    pub fn from_clustering(ids: &[String], sets: &[ScatterSet], c: &Clustering) -> Self {
        Self {
            n_a: c.medoids.len(),
            medoid_ids: c.medoids.iter().map(|&m| ids[m].clone()).collect(),
            medoid_point_sets: c.medoids.iter().map(|&m| sets[m].clone()).collect(),
        }
    }

    pub fn anchors(&self) -> &[ScatterSet] {
        &self.medoid_point_sets
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityRow {
    /// Clamped similarities, one per anchor.
    pub sim: Vec<f64>,
    /// Softmax before clamping (sums to 1).
    pub raw: Vec<f64>,
    pub delta: f64,
}

/// `max(softmax(−d)_j, δ)` per anchor, without renormalizing.
pub fn structural_similarity(d_row: &[f64], delta: f64) -> Result<SimilarityRow> {
    let n = d_row.len();
    if n == 0 {
        return Err(Error::Empty("anchor distances"));
    }
    if !(delta >= 0.0) || delta > 1.0 / n as f64 + 1e-15 {
        return Err(Error::invalid(format!("delta {delta} outside [0, 1/{n}]")));
    }
    if d_row.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
        return Err(Error::invalid(
            "anchor distances must be finite and non-negative",
        ));
    }
    let m = d_row.iter().cloned().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = d_row.iter().map(|d| (-(d - m)).exp()).collect();
    let z: f64 = e.iter().sum();
    let raw: Vec<f64> = e.iter().map(|v| v / z).collect();
    let sim = raw.iter().map(|v| v.max(delta)).collect();
    Ok(SimilarityRow { sim, raw, delta })
}
