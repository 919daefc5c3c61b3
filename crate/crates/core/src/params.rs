//! Named parameter tensors.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// An ordered map of named `f32` tensors. Iteration order (and therefore
/// hashing, binding and serialization order) is the lexical name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<f32>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for x in t.data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copies every tensor onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf_f32(t, requires_grad)))
            .collect();
        Bound { vars }
    }

    /// Adds every tensor under `prefix` to `out`.
    pub fn export_into(&self, prefix: &str, out: &mut BTreeMap<String, Tensor<f32>>) {
        for (k, t) in &self.tensors {
            out.insert(format!("{prefix}{k}"), t.clone());
        }
    }

    /// Takes the tensors named `prefix*` from `src`, checking them against the
    /// names and shapes of `self`.
    pub fn import_from(&mut self, prefix: &str, src: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        for (k, t) in self.tensors.iter_mut() {
            let full = format!("{prefix}{k}");
            let loaded = src
                .get(&full)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing `{full}`")))?;
            if loaded.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "`{full}`: checkpoint shape {:?}, expected {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded.clone();
        }
        Ok(())
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` was not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}
