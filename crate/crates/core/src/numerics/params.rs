//! Named, ordered parameter storage and its binding onto a tape.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::rng::Rng;
use super::tape::{Gradients, Tape, Var};
use super::{NumericsError, Tensor};

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = tensor;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
    }

    /// Glorot-uniform weight `[fan_in, fan_out]` plus zero bias `[fan_out]`.
    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.uniform_range(-limit, limit)).collect();
        self.insert(format!("{prefix}.w"), Tensor::from_parts(vec![fan_in, fan_out], w));
        self.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
    }

    /// Unit gain and zero shift for a layer norm over `dim` features.
    pub fn norm(&mut self, prefix: &str, dim: usize) {
        self.insert(format!("{prefix}.gamma"), Tensor::full(&[dim], 1.0));
        self.insert(format!("{prefix}.beta"), Tensor::zeros(&[dim]));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Records every tensor on `tape`, as trainable leaves or constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound { vars, index: self.index.clone() }
    }

    /// Binds externally recorded vars, one per tensor in parameter order.
    pub fn bind_vars<'t>(&self, vars: &[Var<'t>]) -> Result<Bound<'t>, NumericsError> {
        if vars.len() != self.len() {
            return Err(NumericsError::shape(
                "bind_vars",
                format!("{} vars for {} parameters", vars.len(), self.len()),
            ));
        }
        Ok(Bound { vars: vars.to_vec(), index: self.index.clone() })
    }
}

/// A [`ParamSet`] recorded on a tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
    index: HashMap<String, usize>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>, NumericsError> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| NumericsError::MissingParam(name.to_string()))
    }

    /// Gradients for every bound parameter, in [`ParamSet`] order.
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.get(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_tracks_values() {
        let mut rng = Rng::new(1);
        let mut p = ParamSet::new();
        p.linear("a", 3, 2, &mut rng);
        let d0 = p.digest();
        assert_eq!(d0, p.clone().digest());
        p.get_mut("a.b").unwrap().data_mut()[0] = 1e-300;
        assert_ne!(d0, p.digest());
        assert_eq!(p.count(), 8);
    }

    #[test]
    fn bound_lookup() {
        let mut p = ParamSet::new();
        p.norm("ln", 4);
        let tape = Tape::new();
        let b = p.bind(&tape, true);
        assert_eq!(b.get("ln.gamma").unwrap().shape(), vec![4]);
        assert!(matches!(b.get("nope"), Err(NumericsError::MissingParam(_))));
    }
}
