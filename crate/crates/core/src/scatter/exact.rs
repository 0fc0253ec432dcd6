//! Exact discrete transport by the transportation simplex (MODI).
//!
//! The basis is a spanning tree of the bipartite row/column graph with
//! `N + M − 1` cells, seeded by the least-cost rule. Each pivot prices
//! non-basic cells with dual potentials and pushes flow around the unique
//! cycle closed by the entering cell.

use super::{cost_matrix, ScatterSet, TransportPlan};
use crate::error::{Error, Result};

/// Largest set size accepted by [`emd_exact`].
pub const EXACT_MAX_POINTS: usize = 16;

const MAX_PIVOTS: usize = 10_000;

/// Optimal transport distance `Σ f·c / Σ f` and the optimal plan.
pub fn emd_exact(p: &ScatterSet, q: &ScatterSet) -> Result<(f64, TransportPlan)> {
    let (n, m) = (p.len(), q.len());
    if n == 0 || m == 0 {
        return Err(Error::Empty("scatter set"));
    }
    if n.max(m) > EXACT_MAX_POINTS {
        return Err(Error::OracleScale {
            n,
            m,
            max: EXACT_MAX_POINTS,
        });
    }
    let cost = cost_matrix(p, q);
    let flows = transport_simplex(&p.weights, &q.weights, &cost, n, m);
    let plan = TransportPlan {
        rows: n,
        cols: m,
        flows,
    };
    Ok((plan.normalized_cost(&cost), plan))
}

const MAX_NODES: usize = 2 * EXACT_MAX_POINTS;

/// Spanning-tree basis over row nodes `0..n` and column nodes `n..n+m`.
struct Basis {
    n: usize,
    m: usize,
    cells: Vec<(usize, usize)>,
    /// Per node: parent node and the basic cell joining them, rooted at row 0.
    parent: [(usize, usize); MAX_NODES],
    depth: [usize; MAX_NODES],
    u: [f64; EXACT_MAX_POINTS],
    v: [f64; EXACT_MAX_POINTS],
}

impl Basis {
    fn new(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            cells: Vec::with_capacity(n + m - 1),
            parent: [(usize::MAX, usize::MAX); MAX_NODES],
            depth: [0; MAX_NODES],
            u: [0.0; EXACT_MAX_POINTS],
            v: [0.0; EXACT_MAX_POINTS],
        }
    }

    /// Roots the tree at row 0 and sets the dual potentials `u_r + v_c = cost`
    /// on every basic cell.
    fn root(&mut self, cost: &[f64]) {
        let (n, m) = (self.n, self.m);
        let mut seen = [false; MAX_NODES];
        let mut queue = [0usize; MAX_NODES];
        let (mut head, mut tail) = (0, 1);
        seen[0] = true;
        self.u[0] = 0.0;
        self.depth[0] = 0;
        while head < tail {
            let x = queue[head];
            head += 1;
            for (k, &(r, c)) in self.cells.iter().enumerate() {
                let y = if x == r {
                    n + c
                } else if x == n + c {
                    r
                } else {
                    continue;
                };
                if seen[y] {
                    continue;
                }
                seen[y] = true;
                self.parent[y] = (x, k);
                self.depth[y] = self.depth[x] + 1;
                if y >= n {
                    self.v[y - n] = cost[r * m + c] - self.u[r];
                } else {
                    self.u[y] = cost[r * m + c] - self.v[c];
                }
                queue[tail] = y;
                tail += 1;
            }
        }
    }

    /// Basic cells on the tree path from row node `i` to column `j`, in order.
    fn path(&self, i: usize, j: usize, out: &mut Vec<usize>) {
        out.clear();
        let mut tail = [0usize; MAX_NODES];
        let mut nt = 0;
        let (mut a, mut b) = (i, self.n + j);
        while self.depth[a] > self.depth[b] {
            out.push(self.parent[a].1);
            a = self.parent[a].0;
        }
        while self.depth[b] > self.depth[a] {
            tail[nt] = self.parent[b].1;
            nt += 1;
            b = self.parent[b].0;
        }
        while a != b {
            out.push(self.parent[a].1);
            a = self.parent[a].0;
            tail[nt] = self.parent[b].1;
            nt += 1;
            b = self.parent[b].0;
        }
        out.extend(tail[..nt].iter().rev());
    }
}

fn transport_simplex(a: &[f64], b: &[f64], cost: &[f64], n: usize, m: usize) -> Vec<f64> {
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    let mut supply: Vec<f64> = a.to_vec();
    let mut demand: Vec<f64> = b.iter().map(|x| x * sa / sb).collect();

    let mut flow = vec![0.0; n * m];
    let mut basic = vec![false; n * m];
    let mut basis = Basis::new(n, m);
    // least-cost initial basis: take the cheapest open cell, close its row or
    // column (never both, so the basis stays a spanning tree)
    let mut row_open = [false; EXACT_MAX_POINTS];
    let mut col_open = [false; EXACT_MAX_POINTS];
    row_open[..n].fill(true);
    col_open[..m].fill(true);
    let (mut rows_left, mut cols_left) = (n, m);
    while basis.cells.len() < n + m - 1 {
        let mut best = (usize::MAX, usize::MAX, f64::INFINITY);
        for r in (0..n).filter(|&r| row_open[r]) {
            for c in (0..m).filter(|&c| col_open[c]) {
                if cost[r * m + c] < best.2 {
                    best = (r, c, cost[r * m + c]);
                }
            }
        }
        let (i, j, _) = best;
        let f = supply[i].min(demand[j]).max(0.0);
        flow[i * m + j] = f;
        basic[i * m + j] = true;
        basis.cells.push((i, j));
        supply[i] -= f;
        demand[j] -= f;
        if cols_left == 1 || (rows_left > 1 && supply[i] <= demand[j]) {
            row_open[i] = false;
            rows_left -= 1;
        } else {
            col_open[j] = false;
            cols_left -= 1;
        }
    }

    let scale = cost.iter().cloned().fold(0.0, f64::max).max(1.0);
    let tol = 1e-12 * scale;
    let mut degenerate_run = 0usize;
    let mut path = Vec::with_capacity(MAX_NODES);
    for _ in 0..MAX_PIVOTS {
        basis.root(cost);
        let (u, v) = (&basis.u, &basis.v);
        let bland = degenerate_run > 2 * (n + m);
        let mut entering: Option<(usize, usize, f64)> = None;
        'scan: for r in 0..n {
            for c in 0..m {
                if basic[r * m + c] {
                    continue;
                }
                let red = cost[r * m + c] - u[r] - v[c];
                if red < -tol {
                    match entering {
                        Some((_, _, best)) if red >= best => {}
                        _ => entering = Some((r, c, red)),
                    }
                    if bland {
                        break 'scan;
                    }
                }
            }
        }
        let Some((er, ec, _)) = entering else { break };
        basis.path(er, ec, &mut path);
        // path alternates −, +, −, … starting next to row `er`
        let mut theta = f64::INFINITY;
        let mut leave = usize::MAX;
        for &k in path.iter().step_by(2) {
            let (r, c) = basis.cells[k];
            let f = flow[r * m + c];
            if f < theta {
                theta = f;
                leave = k;
            }
        }
        let theta = theta.max(0.0);
        for (pos, &k) in path.iter().enumerate() {
            let (r, c) = basis.cells[k];
            let cell = &mut flow[r * m + c];
            if pos % 2 == 0 {
                *cell = (*cell - theta).max(0.0);
            } else {
                *cell += theta;
            }
        }
        flow[er * m + ec] = theta;
        let (lr, lc) = basis.cells[leave];
        basic[lr * m + lc] = false;
        flow[lr * m + lc] = 0.0;
        basic[er * m + ec] = true;
        basis.cells[leave] = (er, ec);
        degenerate_run = if theta == 0.0 { degenerate_run + 1 } else { 0 };
    }
    flow
}
