//! Ordered, named parameter storage shared by the frozen model and the
//! prompt generators.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numkernel::{Graph, Tensor, Var};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its index.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
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

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        for t in &mut self.tensors {
            t.requires_grad = on;
        }
    }

    /// Binds every tensor as a graph leaf (tracked iff `requires_grad`).
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t)).collect()
    }

    /// Binds every tensor as an untracked constant.
    pub fn bind_frozen<'a>(&'a self, g: &mut Graph<'a>) -> Vec<Var> {
        self.tensors.iter().map(|t| g.frozen(t)).collect()
    }

    /// First 8 bytes of SHA-256 over every parameter's little-endian bytes,
    /// in storage order.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        for t in &self.tensors {
            for x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn assign_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Contract("parameter names differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::dim(format!(
                    "parameter shape {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Replaces the tensor data of parameter `i`.
    pub fn set_data(&mut self, i: usize, data: &[f64]) -> Result<()> {
        let t = &mut self.tensors[i];
        if t.len() != data.len() {
            return Err(Error::dim(format!(
                "{} values for parameter `{}` of shape {:?}",
                data.len(),
                self.names[i],
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }
}

/// Per-parameter gradient buffers aligned with a [`ParamSet`].
pub type ParamGrads = Vec<Vec<f64>>;

pub fn zero_grads(p: &ParamSet) -> ParamGrads {
    p.tensors().iter().map(|t| vec![0.0; t.len()]).collect()
}

/// Collects gradients for `vars` (bound from `p`), zero-filling untouched ones.
pub fn collect_grads(p: &ParamSet, vars: &[Var], grads: &crate::numkernel::Gradients) -> ParamGrads {
    vars.iter()
        .zip(p.tensors())
        .map(|(&v, t)| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect()
}

/// `acc += g`
pub fn add_grads(acc: &mut ParamGrads, g: &ParamGrads) {
    for (a, b) in acc.iter_mut().zip(g) {
        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    }
}

pub fn grad_norm(g: &ParamGrads) -> f64 {
    g.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}
