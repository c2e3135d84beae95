use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Position of a tensor inside a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A single scalar coordinate of a stored tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCoord {
    pub param: ParamId,
    pub offset: usize,
}

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, ParamId>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 2],
    values: Vec<f64>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::Config(format!("parameter {name} registered twice")));
        }
        let id = ParamId(self.tensors.len());
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Every scalar coordinate, in registration order.
    pub fn coords(&self) -> Vec<ParamCoord> {
        self.ids()
            .flat_map(|p| (0..self.get(p).len()).map(move |offset| ParamCoord { param: p, offset }))
            .collect()
    }

    /// Places every tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        BoundParams { vars }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let entries: Vec<Entry> = self
            .iter()
            .map(|(_, name, t)| Entry { name: name.to_string(), shape: t.shape(), values: t.data().to_vec() })
            .collect();
        serde_json::to_value(entries).expect("parameter entries serialize")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let entries: Vec<Entry> = serde_json::from_value(value)?;
        let mut store = Self::new();
        for e in entries {
            let t = Tensor::new(e.shape[0], e.shape[1], e.values)
                .map_err(|err| Error::Checkpoint(format!("{}: {err}", e.name)))?;
            store.register(e.name, t)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(&self.to_json())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_json(serde_json::from_slice(&bytes)?)
    }
}

/// Tape handles for each stored tensor, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients reordered to match the store.
    pub fn collect(&self, grads: &Gradients, store: &ParameterStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(&store.tensors)
            .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::new();
        s.register("w", Tensor::zeros(1, 1)).unwrap();
        assert!(s.register("w", Tensor::zeros(1, 1)).is_err());
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut s = ParameterStore::new();
        s.register("a", Tensor::from_fn(2, 3, |i, j| (i as f64 + 0.1).powf(j as f64 + 0.37) / 3.0)).unwrap();
        s.register("b", Tensor::column(&[f64::MIN_POSITIVE, -1.0e-300, 0.1 + 0.2, 1.0 / 7.0])).unwrap();
        let text = serde_json::to_string(&s.to_json()).unwrap();
        let back = ParameterStore::from_json(serde_json::from_str(&text).unwrap()).unwrap();
        for (id, name, t) in s.iter() {
            assert_eq!(back.name(id), name);
            let bits: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let back_bits: Vec<u64> = back.get(id).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, back_bits);
        }
    }
}
