use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensors. Ordered so iteration is deterministic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Registers every tensor as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        let ids = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), g.param(v.clone())))
            .collect();
        Binding { ids }
    }

    /// Registers every tensor as a constant (frozen) leaf of `g`.
    pub fn bind_frozen(&self, g: &mut Graph) -> Binding {
        let ids = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), g.constant(v.clone())))
            .collect();
        Binding { ids }
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }
}

/// Mapping from parameter names to the graph nodes created for them.
#[derive(Debug, Clone, Default)]
pub struct Binding {
    ids: BTreeMap<String, NodeId>,
}

impl Binding {
    pub fn id(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn merge(mut self, other: Binding) -> Binding {
        self.ids.extend(other.ids);
        self
    }

    /// Collects gradients for every bound name whose name starts with one of `prefixes`.
    pub fn grads(&self, grads: &Gradients, prefixes: &[&str]) -> BTreeMap<String, Tensor> {
        self.ids
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, &id)| (k.clone(), grads.get(id)))
            .collect()
    }
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sgd {
    momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!(
                "momentum must be in [0,1), got {momentum}"
            )));
        }
        Ok(Self {
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    /// Applies one update. If any gradient is non-finite nothing is modified.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::invalid(format!("unknown param {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("{name}: {:?} vs {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        for (name, g) in grads {
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let p = params.get_mut(name).expect("checked above");
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}
