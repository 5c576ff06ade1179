//! Named parameter storage and initialisers.

use std::ops::Index;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Element> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Element> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replace every tensor, checking names and shapes.
    pub fn assign(&mut self, named: &[(String, Tensor<F>)]) -> Result<()> {
        if named.len() != self.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameter tensors, got {}",
                self.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let id = self.find(name).ok_or_else(|| {
                Error::InvalidInput(format!("unknown parameter `{name}`"))
            })?;
            if self.tensors[id.0].shape() != t.shape() {
                return Err(Error::shape(
                    "ParamStore::assign",
                    format!(
                        "`{name}`: stored {:?}, given {:?}",
                        self.tensors[id.0].shape(),
                        t.shape()
                    ),
                ));
            }
        }
        for (name, t) in named {
            let id = self.find(name).expect("checked above");
            self.tensors[id.0] = t.clone().with_requires_grad(false);
        }
        Ok(())
    }

    /// Record every parameter on `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph<F>, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| graph.leaf(t.clone().with_requires_grad(trainable)))
                .collect(),
        )
    }
}

/// Graph handles for a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Handles in [`ParamStore`] order, e.g. leaves recorded by hand.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Normal(0, std²) truncated to ±2 std by rejection.
pub fn truncated_normal<F: Element>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<F> {
    let n = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            data.push(F::from_f64_lossy(z * std));
        }
    }
    Tensor::new(shape.to_vec(), data).expect("sized from shape")
}

/// He-normal initialisation for ReLU layers with the given fan-in.
pub fn he_normal<F: Element>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<F> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            F::from_f64_lossy(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("sized from shape")
}
