//! Reliable structural adjacency alignment: a FIFO bank of source instances,
//! r-nearest neighbor sets for target instances, reliability and consistency
//! factors, and the gated alignment loss.

use std::cell::RefCell;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::scatter::{scatter_distance, ScatterSet};

pub const DEFAULT_CAPACITY: usize = 512;
pub const GAMMA_EPS: f64 = 1e-6;
pub const DEFAULT_MARGIN: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    /// Unit-normalized feature used for ranking.
    pub feature: Vec<f64>,
    /// Feature as produced by the encoder, used for alignment.
    pub raw: Vec<f64>,
    pub points: ScatterSet,
    pub u: f64,
    pub p: f64,
    /// Insertion counter, unique over the life of the bank.
    #[serde(default)]
    pub serial: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureBank {
    pub capacity: usize,
    pub entries: Vec<BankEntry>,
    pub cursor: usize,
    #[serde(default)]
    pub next_serial: u64,
    /// Scatter distances between live entries, keyed by serial pair.
    #[serde(skip)]
    cache: RefCell<HashMap<(u64, u64), f64>>,
}

impl PartialEq for FeatureBank {
    fn eq(&self, other: &Self) -> bool {
        self.capacity == other.capacity
            && self.entries == other.entries
            && self.cursor == other.cursor
            && self.next_serial == other.next_serial
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        vec![0.0; v.len()]
    }
}

impl FeatureBank {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("bank capacity must be positive"));
        }
        Ok(Self {
            capacity,
            entries: Vec::new(),
            cursor: 0,
            next_serial: 0,
            cache: RefCell::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Ring-buffer insert; overwrites the oldest entry once full.
    pub fn push(&mut self, raw: Vec<f64>, points: ScatterSet, u: f64, p: f64) {
        let entry = BankEntry {
            feature: normalized(&raw),
            raw,
            points,
            u,
            p,
            serial: self.next_serial,
        };
        self.next_serial += 1;
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
        } else {
            self.entries[self.cursor] = entry;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        let cache = self.cache.get_mut();
        if cache.len() > 16 * self.capacity {
            let oldest = self.next_serial - self.entries.len() as u64;
            cache.retain(|k, _| k.0 >= oldest);
        }
    }

    /// Memoized scatter distance between entries `a` and `b`.
    pub fn distance(&self, a: usize, b: usize) -> Result<f64> {
        let (ea, eb) = (&self.entries[a], &self.entries[b]);
        let key = (ea.serial.min(eb.serial), ea.serial.max(eb.serial));
        if let Some(&d) = self.cache.borrow().get(&key) {
            return Ok(d);
        }
        let d = scatter_distance(&ea.points, &eb.points)?;
        self.cache.borrow_mut().insert(key, d);
        Ok(d)
    }

    /// Indices of the `r` entries most cosine-similar to `f`; ties by index.
    pub fn adjacency(&self, f: &[f64], r: usize) -> Result<Vec<usize>> {
        if r == 0 {
            return Err(Error::invalid("r must be positive"));
        }
        if self.entries.len() < r {
            return Err(Error::invalid(format!(
                "bank holds {} entries, need {r}",
                self.entries.len()
            )));
        }
        let q = normalized(f);
        let mut scored: Vec<(f64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.feature.iter().zip(&q).map(|(a, b)| a * b).sum(), i))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(scored.into_iter().take(r).map(|(_, i)| i).collect())
    }
}

/// `η̂ = p·exp(−u/k)`.
pub fn reliable_factor(p: f64, u: f64, k: f64) -> Result<f64> {
    if !(k > 0.0) {
        return Err(Error::invalid(format!("k must be > 0, got {k}")));
    }
    Ok(p * (-u / k).exp())
}

/// `log(1 + max|v_a − v_b| / (min|v_a − v_b| + ε))` over distinct index pairs;
/// zero when there is no pair.
pub fn spread_factor(values: &[f64], eps: f64) -> f64 {
    let mut max = f64::NEG_INFINITY;
    let mut min = f64::INFINITY;
    for a in 0..values.len() {
        for b in a + 1..values.len() {
            let d = (values[a] - values[b]).abs();
            max = max.max(d);
            min = min.min(d);
        }
    }
    if max == f64::NEG_INFINITY {
        return 0.0;
    }
    (1.0 + max / (min + eps)).ln()
}

/// `(γ̂_ST, γ̂_u)` for an adjacency set whose members (target first, then
/// neighbors) have the given scatter sets and uncertainties.
pub fn secure_factors(points: &[&ScatterSet], u: &[f64], eps: f64) -> Result<(f64, f64)> {
    if points.len() != u.len() {
        return Err(Error::invalid("one uncertainty per member required"));
    }
    if points.len() < 2 {
        return Err(Error::invalid("adjacency set needs at least two members"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("epsilon must be > 0"));
    }
    let mut d = Vec::with_capacity(points.len() * (points.len() - 1) / 2);
    for a in 0..points.len() {
        for b in a + 1..points.len() {
            d.push(scatter_distance(points[a], points[b])?);
        }
    }
    Ok((spread_factor(&d, eps), spread_factor(u, eps)))
}

/// One target instance for alignment.
#[derive(Debug, Clone)]
pub struct TargetInstance<'a> {
    pub feature: &'a [f64],
    pub points: &'a ScatterSet,
    pub u: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencySet {
    /// Bank indices of the r neighbors.
    pub neighbors: Vec<usize>,
    pub eta: f64,
    pub gamma_st: f64,
    pub gamma_u: f64,
    pub min_neighbor_p: f64,
}

impl AdjacencySet {
    pub fn is_foreground(&self) -> bool {
        self.min_neighbor_p >= 0.5
    }
}

/// Same factors as [`secure_factors`], with neighbor-pair distances served
/// from the bank's cache.
pub fn build_adjacency(
    t: &TargetInstance,
    bank: &FeatureBank,
    r: usize,
    k: f64,
) -> Result<AdjacencySet> {
    let neighbors = bank.adjacency(t.feature, r)?;
    let mut us = vec![t.u];
    let mut d = Vec::with_capacity((r + 1) * r / 2);
    for (a, &n) in neighbors.iter().enumerate() {
        us.push(bank.entries[n].u);
        d.push(scatter_distance(t.points, &bank.entries[n].points)?);
        for &m in &neighbors[a + 1..] {
            d.push(bank.distance(n, m)?);
        }
    }
    let (gamma_st, gamma_u) = (spread_factor(&d, GAMMA_EPS), spread_factor(&us, GAMMA_EPS));
    let min_neighbor_p = neighbors
        .iter()
        .map(|&n| bank.entries[n].p)
        .fold(f64::INFINITY, f64::min);
    Ok(AdjacencySet {
        eta: reliable_factor(t.p, t.u, k)?,
        neighbors,
        gamma_st,
        gamma_u,
        min_neighbor_p,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    /// Keep sets whose factors are `≤ μ + λ_se·σ` on both axes.
    Secure { lambda_se: f64 },
    /// Every set is treated as secure.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Partition {
    pub secure: Vec<usize>,
    pub foreground: Vec<usize>,
    pub background: Vec<usize>,
    pub threshold_st: f64,
    pub threshold_u: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mu = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

/// Splits a batch of adjacency sets into the secure subset and its
/// foreground/background halves.
pub fn secure_partition(sets: &[AdjacencySet], gate: Gate) -> Partition {
    if sets.is_empty() {
        return Partition::default();
    }
    let (secure, threshold_st, threshold_u) = match gate {
        Gate::Disabled => ((0..sets.len()).collect(), f64::INFINITY, f64::INFINITY),
        Gate::Secure { lambda_se } => {
            let st: Vec<f64> = sets.iter().map(|s| s.gamma_st).collect();
            let u: Vec<f64> = sets.iter().map(|s| s.gamma_u).collect();
            let (ms, ss) = mean_std(&st);
            let (mu, su) = mean_std(&u);
            let ts = ms + lambda_se * ss;
            let tu = mu + lambda_se * su;
            let keep: Vec<usize> = sets
                .iter()
                .enumerate()
                .filter(|(_, s)| s.gamma_st <= ts && s.gamma_u <= tu)
                .map(|(i, _)| i)
                .collect();
            (keep, ts, tu)
        }
    };
    let (foreground, background): (Vec<usize>, Vec<usize>) =
        secure.iter().partition(|&&i| sets[i].is_foreground());
    Partition {
        secure,
        foreground,
        background,
        threshold_st,
        threshold_u,
    }
}

fn selector(rows: &[usize], n: usize) -> Result<Tensor> {
    let mut data = vec![0.0; rows.len() * n];
    for (k, &i) in rows.iter().enumerate() {
        data[k * n + i] = 1.0;
    }
    Tensor::matrix(rows.len(), n, data)
}

/// `[1, n]` row averaging the selected rows.
fn mean_selector(rows: &[usize], n: usize) -> Result<Tensor> {
    let mut data = vec![0.0; n];
    for &i in rows {
        data[i] += 1.0 / rows.len() as f64;
    }
    Tensor::matrix(1, n, data)
}

/// Alignment loss over target features `[n, d]` (row `i` belongs to `sets[i]`).
/// Bank features enter as constants.
pub fn l_rsaa(
    g: &mut Graph,
    features: NodeId,
    sets: &[AdjacencySet],
    partition: &Partition,
    bank: &FeatureBank,
    margin: f64,
) -> Result<NodeId> {
    let (n, d) = match g.value(features).shape() {
        [n, d] => (*n, *d),
        s => {
            return Err(Error::shape(
                "l_rsaa",
                format!("features must be [n, d], got {s:?}"),
            ))
        }
    };
    if sets.len() != n {
        return Err(Error::shape(
            "l_rsaa",
            format!("{n} features but {} adjacency sets", sets.len()),
        ));
    }
    if !(margin >= 0.0) {
        return Err(Error::invalid("margin must be non-negative"));
    }
    if partition.secure.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }

    let mut rows = Vec::new();
    let mut neighbor = Vec::new();
    let mut eta = Vec::new();
    for &i in &partition.secure {
        for &j in &sets[i].neighbors {
            rows.push(i);
            neighbor.extend_from_slice(&bank.entries[j].raw);
            eta.push(sets[i].eta);
        }
    }
    if neighbor.len() != rows.len() * d {
        return Err(Error::shape(
            "l_rsaa",
            "bank feature width differs from target features",
        ));
    }
    let m = rows.len();
    let sel = g.constant(selector(&rows, n)?);
    let picked = g.matmul(sel, features)?;
    let nb = g.constant(Tensor::matrix(m, d, neighbor)?);
    let diff = g.sub(picked, nb)?;
    let diff = g.abs(diff);
    let ones = g.constant(Tensor::full(&[d, 1], 1.0));
    let per_pair = g.matmul(diff, ones)?;
    let eta = g.constant(Tensor::matrix(m, 1, eta)?);
    let weighted = g.mul(per_pair, eta)?;
    let term1 = g.sum(weighted);
    let mut loss = g.scale(term1, 1.0 / partition.secure.len() as f64);

    if !partition.foreground.is_empty() && !partition.background.is_empty() {
        let fg = g.constant(mean_selector(&partition.foreground, n)?);
        let bg = g.constant(mean_selector(&partition.background, n)?);
        let f_fg = g.matmul(fg, features)?;
        let f_bg = g.matmul(bg, features)?;
        let sep = g.l1_distance(f_fg, f_bg)?;
        let hinge = g.neg(sep);
        let hinge = g.add_scalar(hinge, margin);
        let hinge = g.max_const(hinge, 0.0);
        loss = g.add(loss, hinge)?;
    }
    Ok(loss)
}
