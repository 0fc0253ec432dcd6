//! Dirichlet evidential statistics and the evidential training loss.
//!
//! Evidence `e ≥ 0` parameterizes `Dir(p | α)` with `α = e + 1`. The loss is
//! the expected cross-entropy under the Dirichlet plus a KL term that pulls
//! the non-target concentrations toward the flat Dirichlet.

use serde::{Deserialize, Serialize};

use crate::diffcore::special::{digamma, lgamma};
use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidentialOutput {
    pub evidence: Vec<f64>,
    pub alpha: Vec<f64>,
    pub strength: f64,
    pub belief: Vec<f64>,
    pub uncertainty: f64,
    pub probability: Vec<f64>,
}

pub fn dirichlet_stats(evidence: &[f64], classes: usize) -> Result<EvidentialOutput> {
    if evidence.len() != classes || classes == 0 {
        return Err(Error::invalid(format!(
            "expected {classes} evidence values, got {}",
            evidence.len()
        )));
    }
    if evidence.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
        return Err(Error::invalid("evidence must be finite and non-negative"));
    }
    let alpha: Vec<f64> = evidence.iter().map(|e| e + 1.0).collect();
    let strength: f64 = alpha.iter().sum();
    Ok(EvidentialOutput {
        evidence: evidence.to_vec(),
        belief: evidence.iter().map(|e| e / strength).collect(),
        uncertainty: classes as f64 / strength,
        probability: alpha.iter().map(|a| a / strength).collect(),
        alpha,
        strength,
    })
}

/// `ψ(S) − ψ(α_y)`: expected negative log-likelihood of label `y` under `Dir(α)`.
pub fn evi_nll(alpha: &[f64], label: usize) -> f64 {
    let s: f64 = alpha.iter().sum();
    digamma(s) - digamma(alpha[label])
}

/// `α̇ = y + (1 − y)·α`: the true-class concentration replaced by 1.
pub fn alpha_dot(alpha: &[f64], label: usize) -> Vec<f64> {
    alpha
        .iter()
        .enumerate()
        .map(|(c, &a)| if c == label { 1.0 } else { a })
        .collect()
}

/// `KL(Dir(α̇) ‖ Dir(1, …, 1))` in closed form.
pub fn kl_to_uniform(alpha_dot: &[f64]) -> f64 {
    let c = alpha_dot.len() as f64;
    let s: f64 = alpha_dot.iter().sum();
    let psi_s = digamma(s);
    lgamma(s) - alpha_dot.iter().map(|&a| lgamma(a)).sum::<f64>() - lgamma(c)
        + alpha_dot
            .iter()
            .map(|&a| (a - 1.0) * (digamma(a) - psi_s))
            .sum::<f64>()
}

/// Batch loss: mean over instances of `nll + kl_weight · kl`.
pub fn l_evi(batch: &[(Vec<f64>, usize)], classes: usize, kl_weight: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("evidential batch"));
    }
    let mut total = 0.0;
    for (e, y) in batch {
        let out = dirichlet_stats(e, classes)?;
        if *y >= classes {
            return Err(Error::invalid(format!("label {y} out of range")));
        }
        total += evi_nll(&out.alpha, *y) + kl_weight * kl_to_uniform(&alpha_dot(&out.alpha, *y));
    }
    Ok(total / batch.len() as f64)
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid(format!("label {y} out of range")));
        }
        data[i * classes + y] = 1.0;
    }
    Tensor::matrix(labels.len(), classes, data)
}

/// Differentiable batch loss over an `[n, C]` evidence node.
pub fn l_evi_graph(
    g: &mut Graph,
    evidence: NodeId,
    labels: &[usize],
    kl_weight: f64,
) -> Result<NodeId> {
    let (n, c) = match g.value(evidence).shape() {
        [n, c] => (*n, *c),
        s => {
            return Err(Error::shape(
                "l_evi",
                format!("evidence must be [n, C], got {s:?}"),
            ))
        }
    };
    if n == 0 {
        return Err(Error::Empty("evidential batch"));
    }
    if labels.len() != n {
        return Err(Error::shape(
            "l_evi",
            format!("{n} rows but {} labels", labels.len()),
        ));
    }
    let y = one_hot(labels, c)?;
    let not_y = y.map(|v| 1.0 - v);
    let y = g.constant(y);
    let not_y = g.constant(not_y);
    let col_ones = g.constant(Tensor::full(&[c, 1], 1.0));
    let row_ones = g.constant(Tensor::full(&[1, c], 1.0));

    let alpha = g.add_scalar(evidence, 1.0);
    let s = g.matmul(alpha, col_ones)?;
    let psi_s = g.digamma(s);
    let psi_s = g.matmul(psi_s, row_ones)?;
    let psi_a = g.digamma(alpha);
    let diff = g.sub(psi_s, psi_a)?;
    let nll = g.mul(diff, y)?;
    let nll = g.sum(nll);

    let kept = g.mul(alpha, not_y)?;
    let ad = g.add(kept, y)?;
    let sd = g.matmul(ad, col_ones)?;
    let lg_s = g.lgamma(sd);
    let lg_s = g.sum(lg_s);
    let lg_a = g.lgamma(ad);
    let lg_a = g.sum(lg_a);
    let psi_ad = g.digamma(ad);
    let psi_sd = g.digamma(sd);
    let psi_sd = g.matmul(psi_sd, row_ones)?;
    let dpsi = g.sub(psi_ad, psi_sd)?;
    let ad_m1 = g.add_scalar(ad, -1.0);
    let cross = g.mul(ad_m1, dpsi)?;
    let cross = g.sum(cross);
    let kl = g.sub(lg_s, lg_a)?;
    let kl = g.add(kl, cross)?;
    let kl = g.add_scalar(kl, -(n as f64) * lgamma(c as f64));

    let kl = g.scale(kl, kl_weight);
    let total = g.add(nll, kl)?;
    Ok(g.scale(total, 1.0 / n as f64))
}
