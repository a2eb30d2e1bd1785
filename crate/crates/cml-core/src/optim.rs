//! Gradient descent with per-group learning rates, trainability masks, and
//! group freezing.
//!
//! AdamW (decoupled weight decay) is the experiment default; SGD mode exists
//! so the learning-rate-division contract can be asserted exactly, since
//! Adam's per-coordinate normalization obscures the lr ratio. Masked-out
//! coordinates are untouched in every respect: no update, no weight decay,
//! and no moment accumulation, so re-enabling a coordinate later does not
//! inherit stale curvature.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{GradMap, GroupKind, NamedParamStore};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("gradient for unknown parameter {0:?}")]
    UnknownParameter(String),
    #[error("gradient shape mismatch for {0:?}")]
    ShapeMismatch(String),
    #[error("non-finite gradient for {0:?}")]
    NumericFault(String),
    #[error("invalid coordinate {1} for parameter {0:?}")]
    InvalidCoordinate(String, usize),
    #[error("division factor must be >= 1, got {0}")]
    DivisionFactorBelowOne(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimMode {
    Sgd,
    AdamW,
}

/// Learning rate per parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupLrs {
    pub base: f64,
    pub adapter: f64,
    pub head: f64,
    pub layer_norm: f64,
}

impl GroupLrs {
    /// The same rate for every group.
    pub fn uniform(lr: f64) -> Self {
        GroupLrs { base: lr, adapter: lr, head: lr, layer_norm: lr }
    }

    pub fn for_kind(&self, kind: GroupKind) -> f64 {
        match kind {
            GroupKind::Base => self.base,
            GroupKind::Adapter => self.adapter,
            GroupKind::Head => self.head,
            GroupKind::LayerNorm => self.layer_norm,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OptimConfig {
    pub mode: OptimMode,
    pub lrs: GroupLrs,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimConfig {
    pub fn sgd(lrs: GroupLrs) -> Self {
        OptimConfig { mode: OptimMode::Sgd, ..Self::adamw(lrs) }
    }

    pub fn adamw(lrs: GroupLrs) -> Self {
        OptimConfig {
            mode: OptimMode::AdamW,
            lrs,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let lrs = [self.lrs.base, self.lrs.adapter, self.lrs.head, self.lrs.layer_norm];
        if lrs.iter().any(|lr| !lr.is_finite() || *lr < 0.0) {
            return Err(OptimError::InvalidConfig(format!("learning rates must be >= 0: {lrs:?}")));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(OptimError::InvalidConfig(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(OptimError::InvalidConfig("eps must be > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }

    /// Derives the adapter-vs-base learning-rate split: adapters (and the
    /// head) train at `adapter_lr`, the base model and layer norms at
    /// `adapter_lr / division_factor`.
    pub fn with_division_factor(
        mut self,
        adapter_lr: f64,
        division_factor: f64,
    ) -> Result<Self, OptimError> {
        if !(division_factor >= 1.0) {
            return Err(OptimError::DivisionFactorBelowOne(division_factor));
        }
        self.lrs.adapter = adapter_lr;
        self.lrs.head = adapter_lr;
        self.lrs.base = adapter_lr / division_factor;
        self.lrs.layer_norm = adapter_lr / division_factor;
        Ok(self)
    }
}

/// Per-parameter boolean trainability masks. A name absent from the set is
/// fully trainable; a present mask freezes exactly its `false` coordinates.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MaskSet {
    masks: BTreeMap<String, Vec<bool>>,
}

impl MaskSet {
    /// No masks: everything trainable.
    pub fn unmasked() -> Self {
        MaskSet::default()
    }

    /// Masks every parameter of `store` to exactly the coordinates in
    /// `keep`; all other coordinates (including whole parameters never
    /// mentioned) become frozen.
    pub fn from_keep(
        store: &NamedParamStore,
        keep: &BTreeSet<(String, usize)>,
    ) -> Result<Self, OptimError> {
        let mut masks: BTreeMap<String, Vec<bool>> = store
            .iter()
            .map(|(name, t, _)| (name.clone(), vec![false; t.numel()]))
            .collect();
        for (name, index) in keep {
            let mask = masks
                .get_mut(name)
                .ok_or_else(|| OptimError::UnknownParameter(name.clone()))?;
            if *index >= mask.len() {
                return Err(OptimError::InvalidCoordinate(name.clone(), *index));
            }
            mask[*index] = true;
        }
        Ok(MaskSet { masks })
    }

    /// An all-false mask over every parameter of the given groups, leaving
    /// other parameters unmasked.
    pub fn freeze_groups(store: &NamedParamStore, groups: &BTreeSet<GroupKind>) -> Self {
        let masks = store
            .iter()
            .filter(|(_, _, g)| groups.contains(&g.kind()))
            .map(|(name, t, _)| (name.clone(), vec![false; t.numel()]))
            .collect();
        MaskSet { masks }
    }

    pub fn set(&mut self, name: impl Into<String>, mask: Vec<bool>) {
        self.masks.insert(name.into(), mask);
    }

    /// Drops the mask for one parameter, making it fully trainable again.
    pub fn remove(&mut self, name: &str) -> bool {
        self.masks.remove(name).is_some()
    }

    pub fn get(&self, name: &str) -> Option<&[bool]> {
        self.masks.get(name).map(|m| m.as_slice())
    }

    pub fn is_trainable(&self, name: &str, index: usize) -> bool {
        self.masks.get(name).map_or(true, |m| m[index])
    }

    /// Number of `true` coordinates across all masks.
    pub fn trainable_count(&self) -> usize {
        self.masks.values().map(|m| m.iter().filter(|b| **b).count()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

/// AdamW moment buffers and the step counter.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct OptState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    step: u64,
}

impl OptState {
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.m.get(name).map(|v| v.as_slice())
    }
}

/// One optimizer instance per model instance; owns masks, frozen groups,
/// and AdamW state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimConfig,
    masks: MaskSet,
    frozen: BTreeSet<GroupKind>,
    state: OptState,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig) -> Result<Self, OptimError> {
        cfg.validate()?;
        Ok(Optimizer {
            cfg,
            masks: MaskSet::unmasked(),
            frozen: BTreeSet::new(),
            state: OptState::default(),
        })
    }

    pub fn with_masks(mut self, masks: MaskSet) -> Self {
        self.masks = masks;
        self
    }

    pub fn with_frozen(mut self, frozen: impl IntoIterator<Item = GroupKind>) -> Self {
        self.frozen = frozen.into_iter().collect();
        self
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    pub fn state(&self) -> &OptState {
        &self.state
    }

    /// Applies one update. Parameters absent from `grads` are untouched;
    /// masked-out coordinates and frozen-group parameters are left bitwise
    /// unchanged (no update, no decay, no moment accumulation).
    pub fn step(&mut self, store: &mut NamedParamStore, grads: &GradMap) -> Result<(), OptimError> {
        // validate the whole batch of gradients before mutating anything
        for (name, grad) in grads.iter() {
            let tensor =
                store.get(name).ok_or_else(|| OptimError::UnknownParameter(name.clone()))?;
            if tensor.shape() != grad.shape() {
                return Err(OptimError::ShapeMismatch(name.clone()));
            }
            if !grad.all_finite() {
                return Err(OptimError::NumericFault(name.clone()));
            }
        }

        self.state.step += 1;
        let t = self.state.step;
        let bias1 = 1.0 - self.cfg.beta1.powi(t as i32);
        let bias2 = 1.0 - self.cfg.beta2.powi(t as i32);

        for (name, grad) in grads.iter() {
            let kind = store.group(name).expect("validated above").kind();
            if self.frozen.contains(&kind) {
                continue;
            }
            let lr = self.cfg.lrs.for_kind(kind);
            let mask = self.masks.get(name).map(|m| m.to_vec());
            let n = grad.numel();
            match self.cfg.mode {
                OptimMode::Sgd => {
                    let theta = store.get_mut(name).expect("validated above");
                    for (i, (p, g)) in theta.data_mut().iter_mut().zip(grad.data()).enumerate() {
                        if mask.as_ref().map_or(true, |m| m[i]) {
                            *p -= lr * g;
                        }
                    }
                }
                OptimMode::AdamW => {
                    let m = self.state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let v = self.state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
                    let (eps, wd) = (self.cfg.eps, self.cfg.weight_decay);
                    let theta = store.get_mut(name).expect("validated above");
                    for (i, (p, g)) in theta.data_mut().iter_mut().zip(grad.data()).enumerate() {
                        if !mask.as_ref().map_or(true, |mk| mk[i]) {
                            continue;
                        }
                        m[i] = b1 * m[i] + (1.0 - b1) * g;
                        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                        let m_hat = m[i] / bias1;
                        let v_hat = v[i] / bias2;
                        *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamGroup, Tensor};

    fn store_one(name: &str, data: Vec<f64>, group: ParamGroup) -> NamedParamStore {
        let mut s = NamedParamStore::new();
        let n = data.len();
        s.register(name, Tensor::from_vec(&[n], data), group);
        s
    }

    fn grad_one(name: &str, data: Vec<f64>) -> GradMap {
        let mut g = GradMap::new();
        let n = data.len();
        g.insert(name.to_owned(), Tensor::from_vec(&[n], data));
        g
    }

    #[test]
    fn sgd_definition() {
        let mut store = store_one("w", vec![0.0], ParamGroup::Base);
        let mut opt = Optimizer::new(OptimConfig::sgd(GroupLrs::uniform(0.1))).unwrap();
        opt.step(&mut store, &grad_one("w", vec![1.0])).unwrap();
        assert_eq!(store.get("w").unwrap().data(), &[-0.1]);
    }

    #[test]
    fn adamw_first_step_is_bias_corrected() {
        // lr 0.1, grad 1.0, wd 0: m_hat = v_hat = 1 -> theta_1 ~ -0.1
        let mut store = store_one("w", vec![0.0], ParamGroup::Base);
        let mut cfg = OptimConfig::adamw(GroupLrs::uniform(0.1));
        cfg.weight_decay = 0.0;
        let mut opt = Optimizer::new(cfg).unwrap();
        opt.step(&mut store, &grad_one("w", vec![1.0])).unwrap();
        let w = store.get("w").unwrap().data()[0];
        assert!((w + 0.1).abs() < 1e-8, "got {w}");
        assert_eq!(opt.state().step_count(), 1);
    }

    #[test]
    fn all_false_mask_freezes_bitwise() {
        let init = vec![0.123456789, -2.5];
        let mut store = store_one("w", init.clone(), ParamGroup::Base);
        let mut masks = MaskSet::unmasked();
        masks.set("w", vec![false, false]);
        let mut opt = Optimizer::new(OptimConfig::adamw(GroupLrs::uniform(0.1)))
            .unwrap()
            .with_masks(masks);
        for _ in 0..100 {
            opt.step(&mut store, &grad_one("w", vec![1.0, -1.0])).unwrap();
        }
        let after = store.get("w").unwrap().data();
        assert_eq!(after[0].to_bits(), init[0].to_bits());
        assert_eq!(after[1].to_bits(), init[1].to_bits());
    }

    #[test]
    fn keep_all_equals_unmasked() {
        let run = |masked: bool| {
            let mut store = store_one("w", vec![0.5, -0.5, 1.5], ParamGroup::Base);
            let keep: BTreeSet<(String, usize)> =
                (0..3).map(|i| ("w".to_owned(), i)).collect();
            let mut opt = Optimizer::new(OptimConfig::adamw(GroupLrs::uniform(0.05))).unwrap();
            if masked {
                opt = opt.with_masks(MaskSet::from_keep(&store, &keep).unwrap());
            }
            for k in 0..10 {
                let g = vec![1.0 + k as f64, -0.3, 0.7];
                opt.step(&mut store, &grad_one("w", g)).unwrap();
            }
            store.fingerprint()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn single_kept_coordinate_updates_alone() {
        let init = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let mut store = store_one("w", init.clone(), ParamGroup::Base);
        let keep: BTreeSet<(String, usize)> = [("w".to_owned(), 3)].into_iter().collect();
        let masks = MaskSet::from_keep(&store, &keep).unwrap();
        assert_eq!(masks.trainable_count(), 1);
        let mut opt =
            Optimizer::new(OptimConfig::sgd(GroupLrs::uniform(0.1))).unwrap().with_masks(masks);
        opt.step(&mut store, &grad_one("w", vec![1.0; 5])).unwrap();
        let after = store.get("w").unwrap().data();
        for i in 0..5 {
            if i == 3 {
                assert_eq!(after[i], init[i] - 0.1);
            } else {
                assert_eq!(after[i].to_bits(), init[i].to_bits());
            }
        }
    }

    #[test]
    fn empty_keep_freezes_everything() {
        let mut store = store_one("w", vec![1.0, 2.0], ParamGroup::Base);
        let masks = MaskSet::from_keep(&store, &BTreeSet::new()).unwrap();
        assert_eq!(masks.trainable_count(), 0);
        let before = store.fingerprint();
        let mut opt =
            Optimizer::new(OptimConfig::adamw(GroupLrs::uniform(0.1))).unwrap().with_masks(masks);
        opt.step(&mut store, &grad_one("w", vec![1.0, 1.0])).unwrap();
        assert_eq!(store.fingerprint(), before);
    }

    #[test]
    fn frozen_group_matches_all_false_mask() {
        let run = |freeze_by_group: bool| {
            let mut store = NamedParamStore::new();
            store.register("base.w", Tensor::from_vec(&[2], vec![0.1, 0.2]), ParamGroup::Base);
            store.register("head.w", Tensor::from_vec(&[2], vec![0.3, 0.4]), ParamGroup::Head);
            let mut opt = Optimizer::new(OptimConfig::adamw(GroupLrs::uniform(0.05))).unwrap();
            if freeze_by_group {
                opt = opt.with_frozen([GroupKind::Head]);
            } else {
                let groups: BTreeSet<GroupKind> = [GroupKind::Head].into_iter().collect();
                opt = opt.with_masks(MaskSet::freeze_groups(&store, &groups));
            }
            for _ in 0..10 {
                let mut g = GradMap::new();
                g.insert("base.w".into(), Tensor::from_vec(&[2], vec![0.5, -0.5]));
                g.insert("head.w".into(), Tensor::from_vec(&[2], vec![1.0, 1.0]));
                opt.step(&mut store, &g).unwrap();
            }
            store.fingerprint()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn sgd_step_size_bound_is_exact() {
        // dyadic lr, factor, and gradients keep every operation exact, so
        // the per-step bound |delta| <= lr * |g| holds with no tolerance
        let mut store = NamedParamStore::new();
        store.register("base.w", Tensor::from_vec(&[1], vec![0.0]), ParamGroup::Base);
        store.register(
            "adapter.w",
            Tensor::from_vec(&[1], vec![0.0]),
            ParamGroup::Adapter("xx".into()),
        );
        let adapter_lr = 0.0078125; // 2^-7
        let factor = 32.0;
        let cfg =
            OptimConfig::sgd(GroupLrs::uniform(0.0)).with_division_factor(adapter_lr, factor).unwrap();
        let mut opt = Optimizer::new(cfg).unwrap();
        let mut prev_base = 0.0;
        for k in 1..=50 {
            let g = 0.25 * k as f64;
            let mut grads = GradMap::new();
            grads.insert("base.w".into(), Tensor::from_vec(&[1], vec![g]));
            grads.insert("adapter.w".into(), Tensor::from_vec(&[1], vec![g]));
            opt.step(&mut store, &grads).unwrap();
            let base = store.get("base.w").unwrap().data()[0];
            let delta = (base - prev_base).abs();
            assert!(delta <= (adapter_lr / factor) * g, "step {k}: |{delta}| > lr*|g|");
            prev_base = base;
        }
    }

    #[test]
    fn moments_skip_masked_coordinates() {
        let mut store = store_one("w", vec![0.0, 0.0], ParamGroup::Base);
        let mut masks = MaskSet::unmasked();
        masks.set("w", vec![true, false]);
        let mut opt = Optimizer::new(OptimConfig::adamw(GroupLrs::uniform(0.1)))
            .unwrap()
            .with_masks(masks);
        for _ in 0..5 {
            opt.step(&mut store, &grad_one("w", vec![1.0, 1.0])).unwrap();
        }
        let m = opt.state().first_moment("w").unwrap();
        assert!(m[0] > 0.0);
        assert_eq!(m[1], 0.0, "masked coordinate must not accumulate momentum");
    }

    #[test]
    fn division_factor_paper_rows() {
        // th row: 5e-5 / 100 = 5e-7; hi row: 5e-5 / 80 = 6.25e-7
        let cfg = OptimConfig::adamw(GroupLrs::uniform(0.0))
            .with_division_factor(5e-5, 100.0)
            .unwrap();
        assert!((cfg.lrs.base / 5e-7 - 1.0).abs() < 1e-12);
        assert_eq!(cfg.lrs.adapter, 5e-5);

        let cfg = OptimConfig::adamw(GroupLrs::uniform(0.0))
            .with_division_factor(5e-5, 80.0)
            .unwrap();
        assert!((cfg.lrs.base / 6.25e-7 - 1.0).abs() < 1e-12);

        let cfg =
            OptimConfig::adamw(GroupLrs::uniform(0.0)).with_division_factor(3e-4, 1.0).unwrap();
        assert_eq!(cfg.lrs.base, cfg.lrs.adapter);
    }

    #[test]
    fn division_factor_below_one_rejected() {
        let err =
            OptimConfig::adamw(GroupLrs::uniform(0.0)).with_division_factor(1e-3, 0.5).unwrap_err();
        assert!(matches!(err, OptimError::DivisionFactorBelowOne(_)));
    }

    #[test]
    fn nan_gradient_rejected_before_mutation() {
        let mut store = store_one("w", vec![1.0], ParamGroup::Base);
        let before = store.fingerprint();
        let mut opt = Optimizer::new(OptimConfig::sgd(GroupLrs::uniform(0.1))).unwrap();
        let err = opt.step(&mut store, &grad_one("w", vec![f64::NAN])).unwrap_err();
        assert!(matches!(err, OptimError::NumericFault(_)));
        assert_eq!(store.fingerprint(), before);
    }

    #[test]
    fn unknown_parameter_rejected() {
        let mut store = store_one("w", vec![1.0], ParamGroup::Base);
        let mut opt = Optimizer::new(OptimConfig::sgd(GroupLrs::uniform(0.1))).unwrap();
        let err = opt.step(&mut store, &grad_one("nope", vec![1.0])).unwrap_err();
        assert!(matches!(err, OptimError::UnknownParameter(_)));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = OptimConfig::adamw(GroupLrs::uniform(-0.1));
        assert!(cfg.validate().is_err());
        cfg = OptimConfig::adamw(GroupLrs::uniform(0.1));
        cfg.beta2 = 1.0;
        assert!(cfg.validate().is_err());
    }
}
