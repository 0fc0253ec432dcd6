//! Structure-induced hierarchical feature adaptation: one domain
//! discriminator per structure anchor, fed similarity-scaled instance
//! features, plus an image-level discriminator over grid cells.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::diffcore::{Binding, Graph, NodeId, ParamSet, Sgd, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DISC_HIDDEN: usize = 32;

/// Domain label convention: target = 1, source = 0.
pub const TARGET_LABEL: f64 = 1.0;
pub const SOURCE_LABEL: f64 = 0.0;

/// Parameter-name prefix of the `i`-th instance discriminator.
pub fn ins_prefix(i: usize) -> String {
    format!("ins{i}")
}

pub const IMG_PREFIX: &str = "img";

/// Two-layer perceptron `sigmoid(tanh(x·W1 + b1)·W2 + b2)`; parameters live in a
/// shared [`ParamSet`] under `prefix`.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub prefix: String,
}

impl Discriminator {
    pub fn new(prefix: impl Into<String>) -> Self {
        Self {
            prefix: prefix.into(),
        }
    }

    fn name(&self, p: &str) -> String {
        format!("{}.{p}", self.prefix)
    }

    /// Uniform weights in `±scale/sqrt(fan_in)`, zero biases.
    pub fn init(&self, params: &mut ParamSet, input_dim: usize, scale: f64, rng: &mut Rng) {
        let a1 = (1.0 / input_dim as f64).sqrt() * scale;
        let a2 = (1.0 / DISC_HIDDEN as f64).sqrt() * scale;
        let w1 = (0..input_dim * DISC_HIDDEN)
            .map(|_| rng.random_range(-a1..a1))
            .collect();
        let w2 = (0..DISC_HIDDEN)
            .map(|_| rng.random_range(-a2..a2))
            .collect();
        params.insert(
            self.name("w1"),
            Tensor::matrix(input_dim, DISC_HIDDEN, w1).unwrap(),
        );
        params.insert(self.name("b1"), Tensor::zeros(&[DISC_HIDDEN]));
        params.insert(self.name("w2"), Tensor::matrix(DISC_HIDDEN, 1, w2).unwrap());
        params.insert(self.name("b2"), Tensor::zeros(&[1]));
    }

    /// Pre-sigmoid logits `[n, 1]`.
    pub fn logits(&self, g: &mut Graph, b: &Binding, x: NodeId) -> Result<NodeId> {
        let h = g.matmul(x, b.id(&self.name("w1")))?;
        let h = g.add_row(h, b.id(&self.name("b1")))?;
        let h = g.tanh(h);
        let z = g.matmul(h, b.id(&self.name("w2")))?;
        g.add_row(z, b.id(&self.name("b2")))
    }

    /// Output probabilities `[n, 1]`.
    pub fn forward(&self, g: &mut Graph, b: &Binding, x: NodeId) -> Result<NodeId> {
        let z = self.logits(g, b, x)?;
        Ok(g.sigmoid(z))
    }
}

/// Sum over rows of `−[y log σ(z) + (1−y) log(1−σ(z))]`, written with softplus.
fn bce_sum(g: &mut Graph, logits: NodeId, labels: &[f64]) -> Result<NodeId> {
    let n = labels.len();
    let y = g.constant(Tensor::matrix(n, 1, labels.to_vec())?);
    let not_y = g.constant(Tensor::matrix(
        n,
        1,
        labels.iter().map(|v| 1.0 - v).collect(),
    )?);
    let neg = g.neg(logits);
    let pos_term = g.softplus(neg);
    let pos_term = g.mul(pos_term, y)?;
    let neg_term = g.softplus(logits);
    let neg_term = g.mul(neg_term, not_y)?;
    let both = g.add(pos_term, neg_term)?;
    Ok(g.sum(both))
}

/// Instance batch for the per-anchor discriminators.
#[derive(Debug, Clone)]
pub struct DomainBatch {
    /// Domain label per instance (1 target, 0 source).
    pub labels: Vec<f64>,
    /// `sims[j][i]` = similarity of instance `j` to anchor `i`.
    pub sims: Vec<Vec<f64>>,
}

/// `(1/n_a) Σ_i mean_j BCE(D_i(sim_ij · f_j), y_j)` for features `[n, d]`.
pub fn l_ins(
    g: &mut Graph,
    b: &Binding,
    features: NodeId,
    batch: &DomainBatch,
    discs: &[Discriminator],
) -> Result<NodeId> {
    let (n, d) = match g.value(features).shape() {
        [n, d] => (*n, *d),
        s => {
            return Err(Error::shape(
                "l_ins",
                format!("features must be [n, d], got {s:?}"),
            ))
        }
    };
    if n == 0 {
        return Err(Error::Empty("instance batch"));
    }
    if discs.is_empty() {
        return Err(Error::invalid("need at least one instance discriminator"));
    }
    if batch.labels.len() != n || batch.sims.len() != n {
        return Err(Error::shape(
            "l_ins",
            format!(
                "{n} features, {} labels, {} sim rows",
                batch.labels.len(),
                batch.sims.len()
            ),
        ));
    }
    if batch.sims.iter().any(|r| r.len() != discs.len()) {
        return Err(Error::shape(
            "l_ins",
            "similarity rows must have one entry per discriminator",
        ));
    }
    let mut total: Option<NodeId> = None;
    for (i, disc) in discs.iter().enumerate() {
        let mut scale = Vec::with_capacity(n * d);
        for row in &batch.sims {
            scale.extend(std::iter::repeat_n(row[i], d));
        }
        let scale = g.constant(Tensor::matrix(n, d, scale)?);
        let x = g.mul(features, scale)?;
        let z = disc.logits(g, b, x)?;
        let s = bce_sum(g, z, &batch.labels)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = total.expect("at least one discriminator");
    Ok(g.scale(total, 1.0 / (n as f64 * discs.len() as f64)))
}

/// Mean per-cell BCE of the image discriminator over every grid
/// (`[cells, d]` nodes) with its domain label.
pub fn l_img(
    g: &mut Graph,
    b: &Binding,
    grids: &[(NodeId, f64)],
    disc: &Discriminator,
) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    let mut cells = 0usize;
    for &(grid, y) in grids {
        let n = g.value(grid).shape()[0];
        if n == 0 {
            continue;
        }
        cells += n;
        let z = disc.logits(g, b, grid)?;
        let s = bce_sum(g, z, &vec![y; n])?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = total.ok_or(Error::Empty("image grid"))?;
    Ok(g.scale(total, 1.0 / cells as f64))
}

/// Outcome of one adversarial update.
#[derive(Debug, Clone, Copy)]
pub struct ShfaStepResult {
    pub loss: f64,
}

fn loss_and_grads(
    params: &ParamSet,
    prefixes: &[&str],
    scale: f64,
    build: &impl Fn(&mut Graph, &Binding) -> Result<NodeId>,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let binding = params.bind(&mut g);
    let loss = build(&mut g, &binding)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("adaptation loss".into()));
    }
    let grads = g.backward(loss)?;
    let grads: BTreeMap<String, Tensor> = binding
        .grads(&grads, prefixes)
        .into_iter()
        .map(|(k, t)| (k, t.map(|v| v * scale)))
        .collect();
    if grads.values().any(|t| !t.all_finite()) {
        return Err(Error::NonFinite("adaptation gradient".into()));
    }
    Ok((value, grads))
}

/// Two-phase adversarial update: the discriminators step down the gradient of
/// `λ·L`, then the loss is rebuilt and the encoder steps up it. The reported
/// loss is the one seen by the discriminators. An error in the second phase
/// leaves the discriminator step applied.
pub fn shfa_step(
    params: &mut ParamSet,
    disc_opt: &mut Sgd,
    enc_opt: &mut Sgd,
    lr: f64,
    lambda: f64,
    disc_prefixes: &[&str],
    enc_prefixes: &[&str],
    build: impl Fn(&mut Graph, &Binding) -> Result<NodeId>,
) -> Result<ShfaStepResult> {
    let (value, dg) = loss_and_grads(params, disc_prefixes, lambda, &build)?;
    disc_opt.step(params, &dg, lr)?;
    let (_, eg) = loss_and_grads(params, enc_prefixes, -lambda, &build)?;
    enc_opt.step(params, &eg, lr)?;
    Ok(ShfaStepResult { loss: value })
}
