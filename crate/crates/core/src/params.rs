//! Named parameter tensors and their binding into a [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};

/// An ordered collection of named tensors. Order is insertion order and is
/// what [`ParamStore::bind`] and checkpoints use.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

/// Graph handles for every tensor of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn new(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn get(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize> {
        let name = name.into();
        if self.position(&name).is_some() {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        self.entries.push((name, tensor));
        Ok(self.entries.len() - 1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|(_, t)| t.data().iter().all(|v| v.is_finite()))
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.entries
            .iter_mut()
            .for_each(|(_, t)| t.set_requires_grad(flag));
    }

    /// Records every tensor as a leaf of `g`. With `trainable == false` the
    /// leaves are constants and receive no gradient.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable && !t.requires_grad() {
                    g.leaf(&t.clone().requiring_grad())
                } else if !trainable && t.requires_grad() {
                    let mut c = t.clone();
                    c.set_requires_grad(false);
                    g.leaf(&c)
                } else {
                    g.leaf(t)
                }
            })
            .collect();
        Bound { vars }
    }

    /// Adds the gradients found for `bound` into each tensor's grad buffer.
    pub fn accumulate(&mut self, grads: &Gradients, bound: &Bound) -> Result<()> {
        if bound.vars.len() != self.entries.len() {
            return Err(Error::invalid(format!(
                "binding has {} vars for {} parameters",
                bound.vars.len(),
                self.entries.len()
            )));
        }
        for ((_, t), v) in self.entries.iter_mut().zip(&bound.vars) {
            if let Some(gr) = grads.get(*v) {
                t.accumulate_grad(gr)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    /// Moves every entry of `other` into `self`.
    pub fn extend(&mut self, other: ParamStore) -> Result<()> {
        for (n, t) in other.entries {
            self.insert(n, t)?;
        }
        Ok(())
    }

    /// Entries whose name starts with `prefix`, in order.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .cloned()
                .collect(),
        }
    }
}

pub(crate) fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std is positive");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
        .expect("normal samples are finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_and_accumulate_round_trip() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![1.0, 2.0]).unwrap())
            .unwrap();
        s.insert("c", Tensor::vector(vec![3.0, 4.0]).unwrap())
            .unwrap();
        assert!(s.insert("w", Tensor::scalar(0.0)).is_err());

        let mut g = Graph::new();
        let b = s.bind(&mut g, true);
        let p = g.mul(b.get(0), b.get(1)).unwrap();
        let m = g.reduce_mean(p).unwrap();
        let grads = g.backward(m).unwrap();
        s.accumulate(&grads, &b).unwrap();
        assert_eq!(s.get("w").unwrap().grad().unwrap(), &[1.5, 2.0]);
        assert_eq!(s.get("c").unwrap().grad().unwrap(), &[0.5, 1.0]);

        let mut g = Graph::new();
        let b = s.bind(&mut g, false);
        assert!(!g.requires_grad(b.get(0)));
    }
}
