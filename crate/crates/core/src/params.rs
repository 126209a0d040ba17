//! Named parameter tensors that persist across training iterations.
//!
//! A [`ParamSet`] lives outside any graph; each iteration it is bound
//! into a fresh [`Graph`] as leaves, and gradients are collected back
//! out after the reverse sweep.

use crate::autodiff::{Graph, Var};
use crate::error::{CoreError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct ParamSet<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(CoreError::InvalidArgument(format!(
                "duplicate parameter name {name}"
            )));
        }
        self.entries.push((name, t));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor<T> {
        &self.entries[i].1
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.entries[i].1
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    /// Total scalar count across all parameters.
    pub fn count_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Insert every parameter into `graph` as a leaf. With
    /// `trainable = false` the leaves receive no gradients, which also
    /// skips their share of the backward work.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| graph.leaf(t.clone(), trainable))
            .collect();
        Binding { vars }
    }

    /// Exact equality of names, shapes, and bit-level data, for
    /// resume-equivalence checks.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|((na, ta), (nb, tb))| {
                na == nb
                    && ta.shape() == tb.shape()
                    && ta
                        .data()
                        .iter()
                        .zip(tb.data())
                        .all(|(a, b)| a.to_f64().unwrap().to_bits() == b.to_f64().unwrap().to_bits())
            })
    }
}

/// Graph leaves corresponding to a bound [`ParamSet`], in entry order.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients per parameter after backward; `None` for parameters the
    /// sweep never reached.
    pub fn grads<T: Scalar>(&self, graph: &Graph<T>) -> Vec<Option<Vec<T>>> {
        self.vars
            .iter()
            .map(|&v| graph.grad(v).map(|g| g.to_vec()))
            .collect()
    }
}
