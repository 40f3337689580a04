use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tape::{Gradients, Tape, Var};
use crate::numerics::tensor::{Scalar, Tensor};

/// Named parameter collection. Names are unique and iterate in
/// lexicographic order, which fixes checkpoint layout and makes training
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<E: Scalar = f32> {
    map: BTreeMap<String, Tensor<E>>,
}

impl<E: Scalar> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<E>) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.map.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<E>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Names in lexicographic order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<E>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Bind a parameter onto a tape as a leaf.
    pub fn bind(&self, tape: &mut Tape<E>, name: &str) -> Result<Var> {
        Ok(tape.param(name, self.get(name)?))
    }

    /// Set the trainable flag by predicate over parameter names.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, t) in self.map.iter_mut() {
            t.set_trainable(pred(name));
        }
    }

    pub fn freeze_all(&mut self) {
        self.set_trainable_where(|_| false);
    }

    pub fn all_frozen(&self) -> bool {
        self.map.values().all(|t| !t.trainable())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.map
            .iter()
            .filter(|(_, t)| t.trainable())
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Accumulate gradients (by name) into the parameters' grad buffers.
    /// Gradient entries for names that are not trainable here are skipped.
    pub fn accumulate(&mut self, grads: &Gradients<E>) -> Result<()> {
        for (name, g) in grads.iter() {
            if let Some(t) = self.map.get_mut(name) {
                if t.trainable() {
                    t.accumulate_grad(g.data())?;
                }
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for t in self.map.values_mut() {
            t.clear_grad();
        }
    }

    /// Bit snapshot of every parameter, for byte-diff tests.
    pub fn bit_snapshot(&self) -> BTreeMap<String, Vec<u64>> {
        self.map
            .iter()
            .map(|(k, v)| (k.clone(), v.data().iter().map(|e| e.to_bits_u64()).collect()))
            .collect()
    }

    pub fn cast<F: Scalar>(&self) -> ParamSet<F> {
        ParamSet {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<F>()))
                .collect(),
        }
    }
}

impl<E: Scalar> FromIterator<(String, Tensor<E>)> for ParamSet<E> {
    fn from_iter<T: IntoIterator<Item = (String, Tensor<E>)>>(iter: T) -> Self {
        ParamSet {
            map: iter.into_iter().collect(),
        }
    }
}
