use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named parameters in insertion order, each with its trainable flag.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Inserts or replaces a parameter.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => {
                self.params[i].value = value;
                self.params[i].trainable = trainable;
            }
            None => {
                self.index.insert(name.clone(), self.params.len());
                self.params.push(Param {
                    name,
                    value,
                    trainable,
                });
            }
        }
    }

    /// Removes every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|p| !p.name.starts_with(prefix));
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub fn param(&self, i: usize) -> &Param<T> {
        &self.params[i]
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Param<T> {
        &mut self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn set_trainable(&mut self, mut rule: impl FnMut(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = rule(&p.name);
        }
    }

    /// Number of scalar entries that train.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// SHA-256 over names, shapes and little-endian values, as hex.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in p.value.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copies every parameter into `g` as a leaf; trainable ones require grad.
    pub fn bind<'s>(&'s self, g: &mut Graph<T>) -> Bound<'s, T> {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), p.trainable))
            .collect();
        Bound { store: self, vars }
    }
}

/// Graph handles for one [`ParamStore`] snapshot.
pub struct Bound<'s, T> {
    store: &'s ParamStore<T>,
    vars: Vec<Var>,
}

impl<T: Scalar> Bound<'_, T> {
    /// Panics on an unknown name: parameter layout is fixed by the config.
    pub fn var(&self, name: &str) -> Var {
        self.try_var(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.store.position(name).map(|i| self.vars[i])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Gradients of every trainable parameter, in store order (`None` when frozen or unreached).
    pub fn grads(&self, g: &Graph<T>) -> Vec<Option<Vec<T>>> {
        self.vars
            .iter()
            .zip(self.store.iter())
            .map(|(&v, p)| {
                if p.trainable {
                    g.grad(v).map(<[T]>::to_vec)
                } else {
                    None
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_replace_and_hash() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a", Tensor::ones(vec![2]), true);
        s.insert("b", Tensor::zeros(vec![3]), false);
        let h = s.hash();
        assert_eq!(h.len(), 64);
        s.insert("a", Tensor::full(vec![2], 2.0), true);
        assert_eq!(s.len(), 2);
        assert_ne!(s.hash(), h);
        assert_eq!(s.trainable_count(), 2);
        assert_eq!(s.frozen_count(), 3);
        s.remove_prefix("a");
        assert_eq!(s.position("b"), Some(0));
    }

    #[test]
    fn bind_respects_flags() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::ones(vec![2]), true);
        s.insert("f", Tensor::ones(vec![2]), false);
        let mut g = Graph::new();
        let b = s.bind(&mut g);
        let y = g.mul(b.var("w"), b.var("f")).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        let grads = b.grads(&g);
        assert_eq!(grads[0].as_deref(), Some(&[1.0, 1.0][..]));
        assert!(grads[1].is_none());
        assert!(g.grad(b.var("f")).is_none());
    }
}
