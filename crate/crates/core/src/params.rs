//! Named parameter storage and the per-forward binding context.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use ccdnet_autograd::{BatchStats, Graph, Scalar, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T> {
    pub value: Tensor<T>,
    /// Buffers (running BN statistics) are stored but never optimised.
    pub trainable: bool,
}

/// Flat map from dotted names (`backbone.stage2.0.b1.weight`) to tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(
            name.into(),
            Entry {
                value,
                trainable: true,
            },
        );
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(
            name.into(),
            Entry {
                value,
                trainable: false,
            },
        );
    }

    pub fn insert_entry(&mut self, name: impl Into<String>, entry: Entry<T>) {
        self.entries.insert(name.into(), entry);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn entry(&self, name: &str) -> Option<&Entry<T>> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Entry<T>> {
        self.entries.remove(name)
    }

    /// Drops every entry whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.entries.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Entry<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Learnable scalars whose names do not start with any of `exclude`.
    pub fn trainable_count(&self, exclude: &[&str]) -> usize {
        self.entries
            .iter()
            .filter(|(k, e)| e.trainable && !exclude.iter().any(|p| k.starts_with(p)))
            .map(|(_, e)| e.value.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        Entry {
                            value: e.value.cast(),
                            trainable: e.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|e| e.value.all_finite())
    }
}

/// How batch normalisation behaves during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalise with the statistics of the current batch and record them.
    Batch,
    /// Normalise with the stored running statistics.
    Running,
}

/// Binds stored parameters to graph leaves for one forward pass. Each name
/// is bound at most once so repeated uses share a single leaf.
pub struct Ctx<'g, T: Scalar> {
    pub graph: &'g Graph<T>,
    store: &'g ParamStore<T>,
    bound: RefCell<HashMap<String, Var<'g, T>>>,
    pub bn: BnMode,
    bn_updates: RefCell<Vec<(String, BatchStats<T>)>>,
}

impl<'g, T: Scalar> Ctx<'g, T> {
    pub fn new(graph: &'g Graph<T>, store: &'g ParamStore<T>, bn: BnMode) -> Self {
        Self {
            graph,
            store,
            bound: RefCell::new(HashMap::new()),
            bn,
            bn_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn store(&self) -> &'g ParamStore<T> {
        self.store
    }

    /// Graph variable for a stored entry; trainable entries become leaves.
    pub fn param(&self, name: &str) -> Result<Var<'g, T>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let entry = self
            .store
            .entry(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        let v = if entry.trainable {
            self.graph.leaf(entry.value.clone())
        } else {
            self.graph.constant(entry.value.clone())
        };
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn tensor(&self, name: &str) -> Result<&'g Tensor<T>> {
        self.store.get(name)
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    /// Trainable parameters bound so far, sorted by name.
    pub fn bound_trainable(&self) -> Vec<(String, Var<'g, T>)> {
        let mut out: Vec<_> = self
            .bound
            .borrow()
            .iter()
            .filter(|(k, _)| self.store.entry(k).is_some_and(|e| e.trainable))
            .map(|(k, v)| (k.clone(), *v))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub(crate) fn record_bn(&self, prefix: &str, stats: BatchStats<T>) {
        self.bn_updates
            .borrow_mut()
            .push((prefix.to_string(), stats));
    }

    /// Batch statistics seen by each BN layer (prefix, stats).
    pub fn take_bn_updates(&self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.bn_updates.borrow_mut())
    }
}
