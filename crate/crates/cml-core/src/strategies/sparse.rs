//! Composable sparse parameter updates.
//!
//! A [`SparseUpdate`] is a sorted list of (parameter name, flat index,
//! delta) records relative to a base store identified by fingerprint.
//! Applying adds the deltas; reverting restores the exact prior bit
//! patterns via the [`UndoToken`] captured at apply time, so
//! apply-then-revert is a bitwise identity even where floating-point
//! subtraction would round. Updates over the same base form a commutative
//! group under coordinate-wise composition.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::tensor::{NamedParamStore, Tensor};

use super::StrategyError;

const UPDATE_MAGIC: &[u8; 8] = b"CMLSPUPD";
const FORMAT_VERSION: u32 = 1;

/// Which parameters an update may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateScope {
    /// Base encoder and layer norms only (language update matrices).
    EncoderOnly,
    /// Any parameter (task updates from sparse continuation).
    Full,
}

/// One changed coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseEntry {
    pub name: String,
    pub index: usize,
    pub delta: f64,
}

/// Whether a mismatched base fingerprint is an error or a logged warning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ApplyMode {
    Strict,
    Forced,
}

/// Proof of one application; holds the displaced values so revert can
/// restore them bitwise.
#[derive(Debug)]
pub struct UndoToken {
    saved: Vec<f64>,
}

/// A sparse vector of parameter differences against a fingerprinted base.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseUpdate {
    base_fingerprint: u64,
    scope: UpdateScope,
    entries: Vec<SparseEntry>,
}

impl SparseUpdate {
    /// Validates, sorts by (name, index), and wraps the entries. Entries
    /// must be unique per coordinate and have non-zero deltas.
    pub fn new(
        base_fingerprint: u64,
        scope: UpdateScope,
        mut entries: Vec<SparseEntry>,
    ) -> Result<Self, StrategyError> {
        entries.sort_by(|a, b| a.name.cmp(&b.name).then(a.index.cmp(&b.index)));
        for pair in entries.windows(2) {
            if pair[0].name == pair[1].name && pair[0].index == pair[1].index {
                return Err(StrategyError::Contract(format!(
                    "duplicate coordinate ({}, {})",
                    pair[0].name, pair[0].index
                )));
            }
        }
        if let Some(zero) = entries.iter().find(|e| e.delta == 0.0 || !e.delta.is_finite()) {
            return Err(StrategyError::Contract(format!(
                "entry ({}, {}) has delta {}",
                zero.name, zero.index, zero.delta
            )));
        }
        Ok(SparseUpdate { base_fingerprint, scope, entries })
    }

    /// Collects the non-zero coordinates of dense per-parameter deltas.
    pub fn from_deltas(
        base_fingerprint: u64,
        scope: UpdateScope,
        deltas: &BTreeMap<String, Tensor>,
    ) -> Self {
        let entries: Vec<SparseEntry> = deltas
            .iter()
            .flat_map(|(name, t)| {
                t.data().iter().enumerate().filter(|(_, &d)| d != 0.0).map(|(index, &delta)| {
                    SparseEntry { name: name.clone(), index, delta }
                })
            })
            .collect();
        SparseUpdate { base_fingerprint, scope, entries }
    }

    /// The empty update over a base (group identity).
    pub fn empty(base_fingerprint: u64, scope: UpdateScope) -> Self {
        SparseUpdate { base_fingerprint, scope, entries: Vec::new() }
    }

    pub fn base_fingerprint(&self) -> u64 {
        self.base_fingerprint
    }

    pub fn scope(&self) -> UpdateScope {
        self.scope
    }

    pub fn entries(&self) -> &[SparseEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The group inverse: every delta negated.
    pub fn negated(&self) -> SparseUpdate {
        SparseUpdate {
            base_fingerprint: self.base_fingerprint,
            scope: self.scope,
            entries: self
                .entries
                .iter()
                .map(|e| SparseEntry { name: e.name.clone(), index: e.index, delta: -e.delta })
                .collect(),
        }
    }

    /// Adds every delta into the store. In [`ApplyMode::Strict`] the store
    /// fingerprint must equal the update's base fingerprint; `Forced` skips
    /// the check (post-continuation inference on a drifted base).
    pub fn apply(
        &self,
        store: &mut NamedParamStore,
        mode: ApplyMode,
    ) -> Result<UndoToken, StrategyError> {
        if mode == ApplyMode::Strict {
            let actual = store.fingerprint();
            if actual != self.base_fingerprint {
                return Err(StrategyError::StaleBase {
                    expected: self.base_fingerprint,
                    actual,
                });
            }
        }
        // validate every coordinate before the first mutation
        for e in &self.entries {
            let t = store.get(&e.name).ok_or_else(|| {
                StrategyError::Contract(format!("update names unknown parameter {:?}", e.name))
            })?;
            if e.index >= t.numel() {
                return Err(StrategyError::Contract(format!(
                    "index {} out of range for {:?}",
                    e.index, e.name
                )));
            }
        }
        let mut saved = Vec::with_capacity(self.entries.len());
        let mut i = 0;
        while i < self.entries.len() {
            let name = &self.entries[i].name;
            let tensor = store.get_mut(name).expect("validated above");
            let data = tensor.data_mut();
            while i < self.entries.len() && &self.entries[i].name == name {
                let e = &self.entries[i];
                saved.push(data[e.index]);
                data[e.index] += e.delta;
                i += 1;
            }
        }
        Ok(UndoToken { saved })
    }

    /// Restores the exact values displaced by the matching `apply` call.
    pub fn revert(
        &self,
        store: &mut NamedParamStore,
        token: UndoToken,
    ) -> Result<(), StrategyError> {
        if token.saved.len() != self.entries.len() {
            return Err(StrategyError::Contract(format!(
                "undo token covers {} coordinates, update has {}",
                token.saved.len(),
                self.entries.len()
            )));
        }
        let mut i = 0;
        while i < self.entries.len() {
            let name = &self.entries[i].name;
            let tensor = store.get_mut(name).ok_or_else(|| {
                StrategyError::Contract(format!("update names unknown parameter {name:?}"))
            })?;
            let data = tensor.data_mut();
            while i < self.entries.len() && &self.entries[i].name == name {
                data[self.entries[i].index] = token.saved[i];
                i += 1;
            }
        }
        Ok(())
    }

    /// Reverts an application that bracketed a training phase. Coordinates
    /// the training never touched (still bit-equal to value-at-apply) are
    /// restored to their saved bits; trained coordinates keep their new
    /// value minus the delta, so the training survives the revert.
    pub fn revert_after_training(
        &self,
        store: &mut NamedParamStore,
        token: UndoToken,
    ) -> Result<(), StrategyError> {
        if token.saved.len() != self.entries.len() {
            return Err(StrategyError::Contract(format!(
                "undo token covers {} coordinates, update has {}",
                token.saved.len(),
                self.entries.len()
            )));
        }
        let mut i = 0;
        while i < self.entries.len() {
            let name = &self.entries[i].name;
            let tensor = store.get_mut(name).ok_or_else(|| {
                StrategyError::Contract(format!("update names unknown parameter {name:?}"))
            })?;
            let data = tensor.data_mut();
            while i < self.entries.len() && &self.entries[i].name == name {
                let e = &self.entries[i];
                let at_apply = token.saved[i] + e.delta;
                if data[e.index].to_bits() == at_apply.to_bits() {
                    data[e.index] = token.saved[i];
                } else {
                    data[e.index] -= e.delta;
                }
                i += 1;
            }
        }
        Ok(())
    }

    /// Coordinate-wise sum of updates over one base; zero-sum coordinates
    /// are dropped. Fails on differing base fingerprints.
    pub fn compose(updates: &[SparseUpdate]) -> Result<SparseUpdate, StrategyError> {
        let first = updates.first().ok_or_else(|| {
            StrategyError::IncompatibleUpdates("cannot compose an empty list".into())
        })?;
        let mut sums: BTreeMap<(String, usize), f64> = BTreeMap::new();
        let mut scope = first.scope;
        for u in updates {
            if u.base_fingerprint != first.base_fingerprint {
                return Err(StrategyError::IncompatibleUpdates(format!(
                    "base fingerprints differ: {:#x} vs {:#x}",
                    first.base_fingerprint, u.base_fingerprint
                )));
            }
            if u.scope == UpdateScope::Full {
                scope = UpdateScope::Full;
            }
            for e in &u.entries {
                *sums.entry((e.name.clone(), e.index)).or_insert(0.0) += e.delta;
            }
        }
        let entries: Vec<SparseEntry> = sums
            .into_iter()
            .filter(|(_, delta)| *delta != 0.0)
            .map(|((name, index), delta)| SparseEntry { name, index, delta })
            .collect();
        Ok(SparseUpdate { base_fingerprint: first.base_fingerprint, scope, entries })
    }

    pub fn write(&self, w: &mut impl Write) -> Result<(), StrategyError> {
        let io = |e: std::io::Error| StrategyError::Io(e.to_string());
        w.write_all(UPDATE_MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&self.base_fingerprint.to_le_bytes()).map_err(io)?;
        w.write_all(&[match self.scope {
            UpdateScope::EncoderOnly => 0u8,
            UpdateScope::Full => 1u8,
        }])
        .map_err(io)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes()).map_err(io)?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(e.name.as_bytes()).map_err(io)?;
            w.write_all(&(e.index as u64).to_le_bytes()).map_err(io)?;
            w.write_all(&e.delta.to_le_bytes()).map_err(io)?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<SparseUpdate, StrategyError> {
        let io = |e: std::io::Error| StrategyError::Io(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != UPDATE_MAGIC {
            return Err(StrategyError::Contract("not a sparse-update file".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(io)?;
        if u32::from_le_bytes(u32buf) != FORMAT_VERSION {
            return Err(StrategyError::Contract("unsupported sparse-update version".into()));
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf).map_err(io)?;
        let base_fingerprint = u64::from_le_bytes(u64buf);
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag).map_err(io)?;
        let scope = match tag[0] {
            0 => UpdateScope::EncoderOnly,
            1 => UpdateScope::Full,
            t => return Err(StrategyError::Contract(format!("unknown scope tag {t}"))),
        };
        r.read_exact(&mut u64buf).map_err(io)?;
        let count = u64::from_le_bytes(u64buf);
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            r.read_exact(&mut u32buf).map_err(io)?;
            let mut name = vec![0u8; u32::from_le_bytes(u32buf) as usize];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name)
                .map_err(|e| StrategyError::Contract(format!("bad utf-8 name: {e}")))?;
            r.read_exact(&mut u64buf).map_err(io)?;
            let index = u64::from_le_bytes(u64buf) as usize;
            r.read_exact(&mut u64buf).map_err(io)?;
            let delta = f64::from_le_bytes(u64buf);
            entries.push(SparseEntry { name, index, delta });
        }
        SparseUpdate::new(base_fingerprint, scope, entries)
    }
}

/// Ranks coordinates by |delta| (descending; ties by name then index) and
/// keeps the top `budget`.
pub(crate) fn select_top_coordinates(
    deltas: &BTreeMap<String, Tensor>,
    budget: usize,
) -> std::collections::BTreeSet<(String, usize)> {
    let mut coords: Vec<(f64, &String, usize)> = deltas
        .iter()
        .flat_map(|(name, t)| {
            t.data().iter().enumerate().map(move |(i, &d)| (d.abs(), name, i))
        })
        .collect();
    coords.sort_by(|a, b| {
        b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(b.1)).then_with(|| a.2.cmp(&b.2))
    });
    coords.into_iter().take(budget).map(|(_, name, i)| (name.clone(), i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamGroup;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store_with(values: &[(&str, Vec<f64>)]) -> NamedParamStore {
        let mut s = NamedParamStore::new();
        for (name, data) in values {
            let n = data.len();
            s.register(*name, Tensor::from_vec(&[n], data.clone()), ParamGroup::Base);
        }
        s
    }

    fn update(base: u64, entries: &[(&str, usize, f64)]) -> SparseUpdate {
        SparseUpdate::new(
            base,
            UpdateScope::Full,
            entries
                .iter()
                .map(|(n, i, d)| SparseEntry { name: (*n).to_owned(), index: *i, delta: *d })
                .collect(),
        )
        .unwrap()
    }

    /// Random values on a dyadic grid; additions between them are exact.
    fn dyadic(rng: &mut ChaCha8Rng) -> f64 {
        (rng.random_range(-4096i64..=4096) as f64) / 1024.0
    }

    #[test]
    fn apply_revert_is_bitwise_identity() {
        let mut store = store_with(&[("w", vec![0.1, 0.2, 0.3]), ("b", vec![1.0])]);
        let fp = store.fingerprint();
        let u = update(fp, &[("w", 1, 1e-17), ("b", 0, -0.5)]);
        let token = u.apply(&mut store, ApplyMode::Strict).unwrap();
        assert_ne!(store.fingerprint(), fp);
        u.revert(&mut store, token).unwrap();
        assert_eq!(store.fingerprint(), fp, "revert must restore exact bits");
    }

    #[test]
    fn empty_update_is_a_noop() {
        let mut store = store_with(&[("w", vec![0.5])]);
        let fp = store.fingerprint();
        let u = SparseUpdate::empty(fp, UpdateScope::Full);
        let token = u.apply(&mut store, ApplyMode::Strict).unwrap();
        assert_eq!(store.fingerprint(), fp);
        u.revert(&mut store, token).unwrap();
        assert_eq!(store.fingerprint(), fp);
    }

    #[test]
    fn stale_base_rejected_unless_forced() {
        let mut store = store_with(&[("w", vec![0.5])]);
        let u = update(0xdead, &[("w", 0, 0.25)]);
        assert!(matches!(
            u.apply(&mut store, ApplyMode::Strict),
            Err(StrategyError::StaleBase { .. })
        ));
        let token = u.apply(&mut store, ApplyMode::Forced).unwrap();
        assert_eq!(store.get("w").unwrap().data()[0], 0.75);
        u.revert(&mut store, token).unwrap();
        assert_eq!(store.get("w").unwrap().data()[0], 0.5);
    }

    #[test]
    fn composition_sums_coordinates() {
        let u1 = update(7, &[("w", 3, 0.5)]);
        let u2 = update(7, &[("w", 3, -0.2), ("w", 7, 0.1)]);
        let c = SparseUpdate::compose(&[u1, u2]).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.entries()[0], SparseEntry { name: "w".into(), index: 3, delta: 0.3 });
        assert_eq!(c.entries()[1], SparseEntry { name: "w".into(), index: 7, delta: 0.1 });
    }

    #[test]
    fn inverse_composes_to_identity() {
        let u = update(7, &[("w", 0, 0.5), ("w", 2, -1.25)]);
        let c = SparseUpdate::compose(&[u.clone(), u.negated()]).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn composition_is_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mk = |rng: &mut ChaCha8Rng| {
            let entries: Vec<SparseEntry> = (0..6)
                .map(|i| SparseEntry {
                    name: if i % 2 == 0 { "w".into() } else { "v".into() },
                    index: rng.random_range(0..4),
                    delta: dyadic(rng),
                })
                .filter(|e| e.delta != 0.0)
                .fold(BTreeMap::<(String, usize), SparseEntry>::new(), |mut m, e| {
                    m.insert((e.name.clone(), e.index), e);
                    m
                })
                .into_values()
                .collect();
            SparseUpdate::new(7, UpdateScope::Full, entries).unwrap()
        };
        let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let abc = SparseUpdate::compose(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let cab = SparseUpdate::compose(&[c, a, b]).unwrap();
        assert_eq!(abc, cab);
    }

    #[test]
    fn composed_equals_sequential_on_dyadic_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let init: Vec<f64> = (0..8).map(|_| dyadic(&mut rng)).collect();
        let mut store_seq = store_with(&[("w", init.clone())]);
        let mut store_comp = store_with(&[("w", init)]);
        let fp = store_seq.fingerprint();

        let updates: Vec<SparseUpdate> = (0..10)
            .map(|_| {
                let entries: Vec<SparseEntry> = (0..8)
                    .filter_map(|i| {
                        let d = dyadic(&mut rng);
                        (d != 0.0 && rng.random_bool(0.7)).then(|| SparseEntry {
                            name: "w".into(),
                            index: i,
                            delta: d,
                        })
                    })
                    .collect();
                SparseUpdate::new(fp, UpdateScope::Full, entries).unwrap()
            })
            .collect();

        for u in &updates {
            let _ = u.apply(&mut store_seq, ApplyMode::Forced).unwrap();
        }
        let composed = SparseUpdate::compose(&updates).unwrap();
        let _ = composed.apply(&mut store_comp, ApplyMode::Forced).unwrap();
        assert_eq!(store_seq.fingerprint(), store_comp.fingerprint());
    }

    #[test]
    fn mismatched_bases_do_not_compose() {
        let u1 = update(1, &[("w", 0, 0.5)]);
        let u2 = update(2, &[("w", 0, 0.5)]);
        assert!(matches!(
            SparseUpdate::compose(&[u1, u2]),
            Err(StrategyError::IncompatibleUpdates(_))
        ));
    }

    #[test]
    fn rejects_duplicates_and_zero_deltas() {
        let dup = vec![
            SparseEntry { name: "w".into(), index: 1, delta: 0.5 },
            SparseEntry { name: "w".into(), index: 1, delta: 0.25 },
        ];
        assert!(SparseUpdate::new(0, UpdateScope::Full, dup).is_err());
        let zero = vec![SparseEntry { name: "w".into(), index: 0, delta: 0.0 }];
        assert!(SparseUpdate::new(0, UpdateScope::Full, zero).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let u = update(0xfeed, &[("enc.00.attn.wq", 17, -0.125), ("head.token.w", 2, 3.5)]);
        let mut buf = Vec::new();
        u.write(&mut buf).unwrap();
        let back = SparseUpdate::read(&mut buf.as_slice()).unwrap();
        assert_eq!(back, u);
    }

    #[test]
    fn top_coordinate_selection_ranks_by_magnitude() {
        let mut deltas = BTreeMap::new();
        deltas.insert("a".to_owned(), Tensor::from_vec(&[3], vec![0.1, -0.9, 0.0]));
        deltas.insert("b".to_owned(), Tensor::from_vec(&[2], vec![0.5, -0.1]));
        let keep = select_top_coordinates(&deltas, 2);
        assert!(keep.contains(&("a".to_owned(), 1)));
        assert!(keep.contains(&("b".to_owned(), 0)));
        // ties break lexicographically: ("a",0) before ("b",1)
        let keep = select_top_coordinates(&deltas, 3);
        assert!(keep.contains(&("a".to_owned(), 0)));
        assert!(!keep.contains(&("b".to_owned(), 1)));
    }
}
