//! Named parameter storage and its binding onto a [`Tape`].

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::error::{ensure, Error, Result};
use crate::numerics::{Gradients, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State such as running normalization statistics; never differentiated.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T> {
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
}

/// Ordered map from dotted parameter names to tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Entry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, kind: ParamKind) {
        self.entries.insert(name.into(), Entry { tensor, kind });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|e| e.kind)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Replaces a tensor; the shape must stay the same.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        ensure!(
            entry.tensor.shape() == tensor.shape(),
            "parameter `{}` has shape {:?}, got {:?}",
            name,
            entry.tensor.shape(),
            tensor.shape()
        );
        entry.tensor = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(k, e)| (k, &e.tensor))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    /// Squared L2 norm over all trainable tensors.
    pub fn squared_norm(&self) -> f64 {
        self.trainable().map(|(_, t)| t.sum_squares().as_f64()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            tensor: e.tensor.cast(),
                            kind: e.kind,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Largest absolute elementwise difference over shared names.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.entries
            .iter()
            .filter_map(|(k, e)| other.entries.get(k).map(|o| e.tensor.max_abs_diff(&o.tensor)))
            .fold(0.0, f64::max)
    }
}

/// Lazily places parameters of a store on a tape.
///
/// Each name maps to exactly one [`Var`], so a store used for several
/// forward passes (support and query images) accumulates gradients from
/// all of them.
pub struct Binding<'a, T: Real> {
    tape: &'a Tape<T>,
    store: &'a ParamStore<T>,
    trainable: bool,
    vars: RefCell<BTreeMap<String, Var>>,
    buffer_updates: RefCell<Vec<(String, Tensor<T>)>>,
}

impl<'a, T: Real> Binding<'a, T> {
    /// With `trainable = false` every parameter enters the tape as a constant.
    pub fn new(tape: &'a Tape<T>, store: &'a ParamStore<T>, trainable: bool) -> Self {
        Binding {
            tape,
            store,
            trainable,
            vars: RefCell::new(BTreeMap::new()),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &'a Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.borrow().get(name) {
            return Ok(v);
        }
        let tensor = self.store.get(name)?.clone();
        let train = self.trainable && self.store.kind(name) == Some(ParamKind::Trainable);
        let v = if train {
            self.tape.leaf(tensor)
        } else {
            self.tape.constant(tensor)
        };
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&'a Tensor<T>> {
        self.store.get(name)
    }

    /// Queues a new value for a buffer; see [`Binding::take_buffer_updates`].
    pub fn update_buffer(&self, name: &str, value: Tensor<T>) {
        self.buffer_updates.borrow_mut().push((name.to_string(), value));
    }

    pub fn take_buffer_updates(&self) -> Vec<(String, Tensor<T>)> {
        std::mem::take(&mut *self.buffer_updates.borrow_mut())
    }

    /// Gradients for every trainable parameter that was bound.
    pub fn gradients(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .borrow()
            .iter()
            .filter(|(name, _)| self.trainable && self.store.kind(name) == Some(ParamKind::Trainable))
            .map(|(name, &v)| {
                let shape = self.store.get(name).expect("bound").shape().to_vec();
                (name.clone(), grads.get_or_zeros(v, &shape))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_binding_accumulates_gradients() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::new(&[1], vec![3.0]).unwrap(), ParamKind::Trainable);
        store.insert("stat", Tensor::new(&[1], vec![1.0]).unwrap(), ParamKind::Buffer);
        let tape = Tape::new();
        let bind = Binding::new(&tape, &store, true);
        let a = bind.var("w").unwrap();
        let b = bind.var("w").unwrap();
        assert_eq!(a, b);
        let s = bind.var("stat").unwrap();
        assert!(!tape.requires_grad(s));
        let y = tape.mul(a, b).unwrap();
        let grads = tape.backward(y).unwrap();
        let named = bind.gradients(&grads);
        assert_eq!(named.len(), 1);
        assert_eq!(named["w"].data(), &[6.0]);
    }

    #[test]
    fn frozen_binding_yields_no_gradients() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::new(&[1], vec![3.0]).unwrap(), ParamKind::Trainable);
        let tape = Tape::new();
        let bind = Binding::new(&tape, &store, false);
        let w = bind.var("w").unwrap();
        assert!(!tape.requires_grad(w));
        assert!(bind.gradients(&tape.backward(w).unwrap()).is_empty());
    }

    #[test]
    fn set_rejects_shape_change() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::zeros(&[2]), ParamKind::Trainable);
        assert!(store.set("w", Tensor::zeros(&[3])).is_err());
        assert!(store.set("missing", Tensor::zeros(&[2])).is_err());
        assert_eq!(store.num_trainable(), 2);
    }
}
