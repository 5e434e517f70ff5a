//! Named parameter storage and its binding onto a tape.

use std::collections::HashMap;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{name_hash, stream, stream_rng};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    FanIn(usize),
}

/// Ordered name -> tensor map. Registration order is the checkpoint order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter drawn from its own init stream, keyed by name so
    /// adding or removing unrelated parameters never shifts its values.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![T::from_f64(0.0); n],
            Init::Ones => vec![T::from_f64(1.0); n],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let mut rng = stream_rng(seed, stream::INIT, name_hash(name));
                (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect()
            }
        };
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Replace a tensor keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(Error::Shape(format!(
                "set {}: shape {:?} vs {:?}",
                self.names[id.0],
                value.shape(),
                self.tensors[id.0].shape()
            )));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        self.set(id, value)
    }

    pub(crate) fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    /// Add `U(-scale, scale)` noise to every parameter whose name matches
    /// `filter`, drawn per name so the result is independent of order.
    pub fn perturb(&mut self, seed: u64, scale: f64, filter: impl Fn(&str) -> bool) {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if !filter(name) {
                continue;
            }
            let mut rng = stream_rng(seed, stream::TEST, name_hash(name));
            for v in t.data_mut() {
                *v = T::from_f64(v.to_f64() + rng.random_range(-scale..scale));
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Put every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect() }
    }
}

/// Tape handles of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wrap handles that were placed on the tape in registration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_keyed_by_name() {
        let mut a = ParamStore::<f32>::new();
        a.add("x", &[4], Init::FanIn(4), 7).unwrap();
        let mut b = ParamStore::<f32>::new();
        b.add("other", &[9], Init::FanIn(9), 7).unwrap();
        b.add("x", &[4], Init::FanIn(4), 7).unwrap();
        assert_eq!(a.by_name("x"), b.by_name("x"));
        assert!(a.by_name("x").unwrap().data().iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut a = ParamStore::<f64>::new();
        a.add("x", &[1], Init::Zeros, 0).unwrap();
        assert!(a.add("x", &[1], Init::Zeros, 0).is_err());
    }
}
