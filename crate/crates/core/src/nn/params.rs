use std::cell::RefCell;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::norm::{update_running, BatchStats};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Gradients, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
    pub grad: Option<Tensor<T>>,
    /// Running statistics are stored here too, with `trainable == false`.
    pub trainable: bool,
}

/// Named, ordered storage for every tensor a model owns.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            value: Arc::new(value),
            grad: None,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.entries[id.0].trainable).collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    /// Mutable access; copies the buffer only if a tape still shares it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(shape_err!(
                "{}: cannot assign {:?} to {:?}",
                e.name,
                value.shape(),
                e.value.shape()
            ));
        }
        e.value = Arc::new(value);
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.entries[id.0].grad.as_ref()
    }

    /// Adds tape gradients into the per-parameter grad slots.
    pub fn accumulate_grads(&mut self, grads: &Gradients<T>) {
        for (key, g) in grads.params() {
            let e = &mut self.entries[key];
            match &mut e.grad {
                Some(acc) => acc.add_assign(g),
                slot => *slot = Some(g.clone()),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Number of learnable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// SHA-256 over names, shapes and values of every entry.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for &d in e.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in e.value.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    /// Copies every same-named, same-shaped entry of `other`; returns how
    /// many were copied.
    pub fn copy_matching(&mut self, other: &ParamStore<T>) -> usize {
        let mut copied = 0;
        for e in &mut self.entries {
            if let Some(src) = other.entries.iter().find(|o| o.name == e.name) {
                if src.value.shape() == e.value.shape() {
                    e.value = Arc::clone(&src.value);
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate<T>>) {
        for u in updates {
            let mut mean = (*self.entries[u.mean.0].value).clone();
            let mut var = (*self.entries[u.var.0].value).clone();
            update_running(&mut mean, &mut var, &u.stats, u.momentum);
            self.entries[u.mean.0].value = Arc::new(mean);
            self.entries[u.var.0].value = Arc::new(var);
        }
    }

    /// Replaces all values from `(name, tensor)` pairs after validating
    /// every name and shape; on error nothing is modified.
    pub fn load_named(&mut self, tensors: Vec<(String, Tensor<T>)>) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "tensor count mismatch: file has {}, model has {}",
                tensors.len(),
                self.entries.len()
            )));
        }
        for ((name, t), e) in tensors.iter().zip(&self.entries) {
            if *name != e.name || t.shape() != e.value.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} {:?} does not match {} {:?}",
                    t.shape(),
                    e.name,
                    e.value.shape()
                )));
            }
        }
        for ((_, t), e) in tensors.into_iter().zip(&mut self.entries) {
            e.value = Arc::new(t);
            e.grad = None;
        }
        Ok(())
    }
}

/// Pending running-statistics update from a train-mode batchnorm.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats<T>,
    pub momentum: f64,
}

/// Everything a layer needs during one forward pass.
pub struct Ctx<'s, 't, T: Scalar> {
    pub tape: &'t Tape<T>,
    pub store: &'s ParamStore<T>,
    pub train: bool,
    updates: RefCell<Vec<StatUpdate<T>>>,
}

impl<'s, 't, T: Scalar> Ctx<'s, 't, T> {
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>, train: bool) -> Self {
        Ctx {
            tape,
            store,
            train,
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        let e = self.store.entry(id);
        if e.trainable {
            self.tape.param(id.0, &e.value)
        } else {
            self.tape.leaf_shared(Arc::clone(&e.value), false)
        }
    }

    pub(crate) fn push_update(&self, u: StatUpdate<T>) {
        self.updates.borrow_mut().push(u);
    }

    pub fn into_updates(self) -> Vec<StatUpdate<T>> {
        self.updates.into_inner()
    }
}
