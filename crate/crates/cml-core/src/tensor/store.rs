//! Named, group-tagged parameter storage with snapshots and diffing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::lang::LangId;

use super::{Fingerprinter, Tensor, TensorError};

/// Which part of the model a parameter belongs to.
///
/// Every named parameter carries exactly one tag; learning rates, masks, and
/// freezing all key off it.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Shared encoder weights (embeddings, attention, feed-forward).
    Base,
    /// Bottleneck adapter owned by one language.
    Adapter(LangId),
    /// Task head (token tagger, sentence classifier, masked-token predictor).
    Head,
    /// Layer-normalization gains and biases, kept separate so they can be
    /// frozen independently of the rest of the base model.
    LayerNorm,
}

impl ParamGroup {
    pub fn kind(&self) -> GroupKind {
        match self {
            ParamGroup::Base => GroupKind::Base,
            ParamGroup::Adapter(_) => GroupKind::Adapter,
            ParamGroup::Head => GroupKind::Head,
            ParamGroup::LayerNorm => GroupKind::LayerNorm,
        }
    }
}

/// Group tag with the adapter language erased; the granularity at which
/// learning rates and freezing are configured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GroupKind {
    Base,
    Adapter,
    Head,
    LayerNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ParamEntry {
    pub tensor: Tensor,
    pub group: ParamGroup,
}

/// Map from parameter name to gradient tensor. Names absent from the map
/// have zero gradient (the parameter was not reachable from the loss).
#[derive(Clone, Debug, Default)]
pub struct GradMap {
    grads: BTreeMap<String, Tensor>,
}

impl GradMap {
    pub fn new() -> Self {
        GradMap::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.grads.insert(name, grad);
    }

    /// Adds `grad` into the existing entry, creating it if absent.
    pub fn accumulate(&mut self, name: &str, grad: &Tensor) {
        match self.grads.get_mut(name) {
            Some(t) => {
                debug_assert_eq!(t.shape(), grad.shape());
                for (a, b) in t.data_mut().iter_mut().zip(grad.data()) {
                    *a += b;
                }
            }
            None => {
                self.grads.insert(name.to_owned(), grad.clone());
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.grads.contains_key(name)
    }
}

/// Immutable copy of a store's contents plus a content fingerprint.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub(crate) entries: BTreeMap<String, ParamEntry>,
    fingerprint: u64,
}

impl Snapshot {
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }
}

/// The set of named parameter tensors for one model.
///
/// Iteration order is lexicographic by name (the map is a `BTreeMap`), so
/// diffs, fingerprints, and optimizer traversal are reproducible. The
/// version counter bumps on every mutation and is how forward purity is
/// asserted in tests.
#[derive(Clone, Debug, Default)]
pub struct NamedParamStore {
    entries: BTreeMap<String, ParamEntry>,
    version: u64,
}

impl NamedParamStore {
    pub fn new() -> Self {
        NamedParamStore::default()
    }

    /// Registers a fresh parameter. Panics if the name is already taken;
    /// duplicate registration is always a construction bug.
    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor, group: ParamGroup) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), ParamEntry { tensor, group });
        assert!(prev.is_none(), "duplicate parameter name {name:?}");
        self.version += 1;
    }

    /// Removes a parameter, returning whether it existed.
    pub fn remove(&mut self, name: &str) -> bool {
        let removed = self.entries.remove(name).is_some();
        if removed {
            self.version += 1;
        }
        removed
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn group(&self, name: &str) -> Option<&ParamGroup> {
        self.entries.get(name).map(|e| &e.group)
    }

    /// Mutable access to one tensor; bumps the version counter.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        match self.entries.get_mut(name) {
            Some(e) => {
                self.version += 1;
                Some(&mut e.tensor)
            }
            None => None,
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn total_coords(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    /// Lexicographic iteration over (name, tensor, group).
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor, &ParamGroup)> {
        self.entries.iter().map(|(n, e)| (n, &e.tensor, &e.group))
    }

    /// Names matching a group predicate, in lexicographic order.
    pub fn names_where(&self, mut pred: impl FnMut(&ParamGroup) -> bool) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| pred(&e.group))
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Content fingerprint over every entry (name, group, shape, value bits).
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint_where(|_| true)
    }

    /// Fingerprint restricted to entries whose group matches the predicate.
    pub fn fingerprint_where(&self, mut pred: impl FnMut(&ParamGroup) -> bool) -> u64 {
        let mut h = Fingerprinter::new();
        for (name, entry) in &self.entries {
            if !pred(&entry.group) {
                continue;
            }
            hash_entry(&mut h, name, entry);
        }
        h.finish()
    }

    /// Immutable copy of the current contents plus fingerprint.
    pub fn snapshot(&self) -> Snapshot {
        Snapshot { entries: self.entries.clone(), fingerprint: self.fingerprint() }
    }

    /// Restores the exact contents captured by `snap`.
    pub fn restore(&mut self, snap: &Snapshot) {
        self.entries = snap.entries.clone();
        self.version += 1;
    }

    /// Dense differences `current − snapshot` for every parameter whose
    /// group matches `filter`.
    ///
    /// Fails if the snapshot is missing a matching name or disagrees on a
    /// shape; extra names in the snapshot are ignored so that diffs can be
    /// taken against supersets (e.g. before adapters were removed).
    pub fn param_delta(
        &self,
        snap: &Snapshot,
        mut filter: impl FnMut(&ParamGroup) -> bool,
    ) -> Result<BTreeMap<String, Tensor>, TensorError> {
        let mut out = BTreeMap::new();
        for (name, entry) in &self.entries {
            if !filter(&entry.group) {
                continue;
            }
            let old = snap.entries.get(name).ok_or_else(|| {
                TensorError::IncompatibleSnapshot(format!("snapshot missing parameter {name:?}"))
            })?;
            if old.tensor.shape() != entry.tensor.shape() {
                return Err(TensorError::IncompatibleSnapshot(format!(
                    "shape mismatch for {name:?}: store {:?} vs snapshot {:?}",
                    entry.tensor.shape(),
                    old.tensor.shape()
                )));
            }
            let data: Vec<f64> = entry
                .tensor
                .data()
                .iter()
                .zip(old.tensor.data())
                .map(|(a, b)| a - b)
                .collect();
            out.insert(name.clone(), Tensor::from_vec(entry.tensor.shape(), data));
        }
        Ok(out)
    }
}

fn hash_entry(h: &mut Fingerprinter, name: &str, entry: &ParamEntry) {
    h.write_str(name);
    match &entry.group {
        ParamGroup::Base => h.write_u64(0),
        ParamGroup::Adapter(lang) => {
            h.write_u64(1);
            h.write_str(lang.as_str());
        }
        ParamGroup::Head => h.write_u64(2),
        ParamGroup::LayerNorm => h.write_u64(3),
    }
    h.write_u64(entry.tensor.shape().len() as u64);
    for &d in entry.tensor.shape() {
        h.write_u64(d as u64);
    }
    for &v in entry.tensor.data() {
        h.write_f64(v);
    }
}
