//! The four finetuning strategies as explicit inception and continuation
//! procedures.
//!
//! * **FFT** — full finetuning: every parameter trainable at one rate.
//! * **SFT** — lottery-ticket sparse finetuning: pilot-train, keep the
//!   top-changed coordinates, rewind, retrain only those; language
//!   knowledge comes from per-language masked-token update matrices applied
//!   before every forward pass.
//! * **LAFT** — per-language adapters over a shared base; continuation
//!   trains the stage language's adapter and the head at the full rate and
//!   the base at that rate divided by a fixed factor.
//! * **LAFT-URIEL** — LAFT with the division factor computed per stage from
//!   the continued language's average syntactic distance to the rest.

mod sparse;
mod train;

pub use sparse::{ApplyMode, SparseEntry, SparseUpdate, UndoToken, UpdateScope};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Benchmark, DataError, Example, TaskKind};
use crate::lang::LangId;
use crate::metrics::{MetricsError, PerfRecord};
use crate::model::{Model, ModelConfig, ModelError, TaskHead};
use crate::optim::{GroupLrs, MaskSet, OptimConfig, OptimError, OptimMode};
use crate::tensor::{derive_seed, GroupKind, ParamGroup, TensorError};
use crate::uriel::{DistanceMatrix, DivisionFactorFn, UrielError};

use sparse::select_top_coordinates;
use train::{accuracy_percent, head_for, run_phase, AdapterRule, Phase};

/// Reserved adapter id for the jointly trained stack that is cloned into
/// per-language stacks during LAFT inception.
pub const JOINT_ADAPTER: &str = "@joint";

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("data does not cover required languages: {0}")]
    Coverage(String),
    #[error("missing dependency: {0}")]
    Dependency(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("store fingerprint {actual:#x} does not match update base {expected:#x}")]
    StaleBase { expected: u64, actual: u64 },
    #[error("incompatible updates: {0}")]
    IncompatibleUpdates(String),
    #[error("invalid strategy config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Uriel(#[from] UrielError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Fft,
    Sft,
    Laft,
    LaftUriel,
}

impl StrategyKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StrategyKind::Fft => "fft",
            StrategyKind::Sft => "sft",
            StrategyKind::Laft => "laft",
            StrategyKind::LaftUriel => "laft-uriel",
        }
    }
}

/// Lottery-ticket sparse-finetuning knobs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    /// Pilot (selection) epochs.
    pub ft_epochs: usize,
    /// Sparse retraining epochs after the rewind.
    pub st_epochs: usize,
    /// Trainable fraction of the selection pool.
    pub rho: f64,
    /// Freeze layer norms during sparse continuation.
    pub freeze_layer_norm: bool,
    /// Error on stale language matrices instead of warning.
    pub strict_stale_matrices: bool,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            ft_epochs: 3,
            st_epochs: 10,
            rho: 0.05,
            freeze_layer_norm: true,
            strict_stale_matrices: false,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<(), StrategyError> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(StrategyError::Config(format!("rho must be in (0, 1], got {}", self.rho)));
        }
        if self.ft_epochs == 0 {
            return Err(StrategyError::Config("ft_epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Learning rates, epochs, and batch sizing shared by the strategies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyHyper {
    pub batch_size: usize,
    pub inception_lr: f64,
    pub inception_epochs: usize,
    /// FFT/SFT continuation rate; for LAFT this is the adapter rate.
    pub continuation_lr: f64,
    pub continuation_epochs: usize,
    /// LAFT inception: epochs for the shared (joint) adapter phase.
    pub adapter_joint_epochs: usize,
    /// LAFT inception: epochs for each per-language adapter phase.
    pub adapter_lang_epochs: usize,
    /// Fixed base-lr division factor for plain LAFT.
    pub laft_div_factor: f64,
    pub weight_decay: f64,
    /// Masked-token pretraining rate for language update matrices.
    pub mlm_lr: f64,
    pub mask_rate: f64,
    /// AdamW is the experiment default; SGD makes the lr-division bound
    /// exactly assertable.
    pub mode: OptimMode,
    pub sft: SftConfig,
}

impl Default for StrategyHyper {
    fn default() -> Self {
        StrategyHyper {
            batch_size: 16,
            inception_lr: 3e-3,
            inception_epochs: 8,
            continuation_lr: 3e-3,
            continuation_epochs: 8,
            adapter_joint_epochs: 4,
            adapter_lang_epochs: 4,
            laft_div_factor: 10.0,
            weight_decay: 1e-5,
            mlm_lr: 3e-3,
            mask_rate: 0.15,
            mode: OptimMode::AdamW,
            sft: SftConfig::default(),
        }
    }
}

impl StrategyHyper {
    pub fn validate(&self) -> Result<(), StrategyError> {
        if self.batch_size == 0 {
            return Err(StrategyError::Config("batch_size must be >= 1".into()));
        }
        for (name, lr) in [
            ("inception_lr", self.inception_lr),
            ("continuation_lr", self.continuation_lr),
            ("mlm_lr", self.mlm_lr),
        ] {
            if !lr.is_finite() || lr < 0.0 {
                return Err(StrategyError::Config(format!("{name} must be >= 0, got {lr}")));
            }
        }
        if !(self.laft_div_factor >= 1.0) {
            return Err(StrategyError::Config(format!(
                "laft_div_factor must be >= 1, got {}",
                self.laft_div_factor
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(StrategyError::Config("mask_rate must be in [0, 1]".into()));
        }
        self.sft.validate()
    }

    fn optim(&self, lr: f64) -> OptimConfig {
        let mut cfg = match self.mode {
            OptimMode::AdamW => OptimConfig::adamw(GroupLrs::uniform(lr)),
            OptimMode::Sgd => OptimConfig::sgd(GroupLrs::uniform(lr)),
        };
        cfg.weight_decay = self.weight_decay;
        cfg
    }
}

/// New data for one continuation stage: a single language.
#[derive(Clone, Debug)]
pub struct ContinuationPlan {
    pub lang: LangId,
    pub data: Vec<Example>,
}

impl ContinuationPlan {
    pub fn new(lang: LangId, data: Vec<Example>) -> Result<Self, StrategyError> {
        if data.is_empty() {
            return Err(StrategyError::Contract("continuation stage with no data".into()));
        }
        if let Some(stray) = data.iter().find(|e| e.lang != lang) {
            return Err(StrategyError::Contract(format!(
                "continuation stage for {lang} contains {} data (worst-case single-language skew is the setup)",
                stray.lang
            )));
        }
        Ok(ContinuationPlan { lang, data })
    }
}

/// Where a LAFT continuation gets its base-lr division factor.
#[derive(Clone, Copy, Debug)]
pub enum FactorSource<'a> {
    Fixed(f64),
    Uriel { distances: &'a DistanceMatrix, factor_fn: DivisionFactorFn },
}

/// A trained model plus the strategy artifacts needed to continue and
/// evaluate it. `stage` counts completed continuation stages.
#[derive(Clone, Debug)]
pub struct DeployedModel {
    pub model: Model,
    pub kind: StrategyKind,
    pub task: TaskKind,
    /// Per-language masked-token update matrices (SFT only).
    pub lang_matrices: BTreeMap<LangId, SparseUpdate>,
    /// Task updates recorded by sparse continuation stages (SFT only).
    pub task_updates: Vec<SparseUpdate>,
    pub stage: usize,
}

impl DeployedModel {
    pub fn head(&self) -> TaskHead {
        head_for(self.task)
    }

    /// Checks that the artifacts match the strategy kind over a language set.
    pub fn check_artifacts(&self, langs: &[LangId]) -> Result<(), StrategyError> {
        match self.kind {
            StrategyKind::Fft => Ok(()),
            StrategyKind::Sft => {
                for lang in langs {
                    if !self.lang_matrices.contains_key(lang) {
                        return Err(StrategyError::Dependency(format!(
                            "no language update matrix for {lang}"
                        )));
                    }
                }
                Ok(())
            }
            StrategyKind::Laft | StrategyKind::LaftUriel => {
                for lang in langs {
                    if !self.model.adapter_langs().contains(lang) {
                        return Err(StrategyError::Dependency(format!(
                            "no adapter stack for {lang}"
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    /// Scores the deployment on per-language data (percent accuracy). SFT
    /// applies the evaluation language's update matrix around the forward
    /// passes and restores the store exactly.
    pub fn evaluate(
        &mut self,
        data: &BTreeMap<LangId, Vec<Example>>,
        batch_size: usize,
    ) -> Result<PerfRecord, StrategyError> {
        let mut scores = BTreeMap::new();
        for (lang, examples) in data {
            let score = match self.kind {
                StrategyKind::Fft => {
                    accuracy_percent(&self.model, self.task, examples, None, batch_size)?
                }
                StrategyKind::Laft | StrategyKind::LaftUriel => {
                    accuracy_percent(&self.model, self.task, examples, Some(lang), batch_size)?
                }
                StrategyKind::Sft => {
                    let matrix = self.lang_matrices.get(lang).cloned().ok_or_else(|| {
                        StrategyError::Dependency(format!("no language update matrix for {lang}"))
                    })?;
                    let token = apply_language_matrix(
                        &matrix,
                        &mut self.model,
                        self.stage,
                        &MatrixPolicy { strict: false },
                    )?;
                    let result =
                        accuracy_percent(&self.model, self.task, examples, None, batch_size);
                    matrix.revert(self.model.store_mut(), token)?;
                    result?
                }
            };
            scores.insert(lang.clone(), score);
        }
        Ok(PerfRecord::new(scores)?)
    }

    /// Strict variant: error instead of warn when matrices are stale.
    pub fn evaluate_strict(
        &mut self,
        data: &BTreeMap<LangId, Vec<Example>>,
        batch_size: usize,
    ) -> Result<PerfRecord, StrategyError> {
        match self.kind {
            StrategyKind::Sft => {
                for (lang, _) in data.iter() {
                    let matrix = self.lang_matrices.get(lang).ok_or_else(|| {
                        StrategyError::Dependency(format!("no language update matrix for {lang}"))
                    })?;
                    let actual = self.model.store().fingerprint();
                    if actual != matrix.base_fingerprint() {
                        return Err(StrategyError::StaleBase {
                            expected: matrix.base_fingerprint(),
                            actual,
                        });
                    }
                }
                self.evaluate(data, batch_size)
            }
            _ => self.evaluate(data, batch_size),
        }
    }
}

impl DeployedModel {
    /// Serializes the deployment bundle into a directory: the model
    /// checkpoint plus one file per language update matrix and recorded
    /// task update, and a small metadata header.
    pub fn save_bundle(&self, dir: &std::path::Path) -> Result<(), StrategyError> {
        let io = |e: std::io::Error| StrategyError::Io(e.to_string());
        std::fs::create_dir_all(dir).map_err(io)?;
        let mut ckpt = Vec::new();
        self.model.write_checkpoint(&mut ckpt)?;
        std::fs::write(dir.join("model.ckpt"), ckpt).map_err(io)?;
        for (lang, matrix) in &self.lang_matrices {
            let mut buf = Vec::new();
            matrix.write(&mut buf)?;
            std::fs::write(dir.join(format!("lang_matrix_{lang}.spu")), buf).map_err(io)?;
        }
        for (i, update) in self.task_updates.iter().enumerate() {
            let mut buf = Vec::new();
            update.write(&mut buf)?;
            std::fs::write(dir.join(format!("task_update_{i:03}.spu")), buf).map_err(io)?;
        }
        let meta = serde_json::json!({
            "kind": self.kind,
            "task": self.task,
            "stage": self.stage,
            "lang_matrices": self.lang_matrices.keys().map(|l| l.as_str()).collect::<Vec<_>>(),
            "task_updates": self.task_updates.len(),
        });
        std::fs::write(
            dir.join("deployed.json"),
            serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n",
        )
        .map_err(io)?;
        Ok(())
    }

    /// Loads a bundle previously written by [`DeployedModel::save_bundle`].
    pub fn load_bundle(dir: &std::path::Path) -> Result<DeployedModel, StrategyError> {
        let io = |e: std::io::Error| StrategyError::Io(e.to_string());
        let meta: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.join("deployed.json")).map_err(io)?,
        )
        .map_err(|e| StrategyError::Contract(format!("bad deployed.json: {e}")))?;
        let kind: StrategyKind = serde_json::from_value(meta["kind"].clone())
            .map_err(|e| StrategyError::Contract(format!("bad strategy kind: {e}")))?;
        let task: TaskKind = serde_json::from_value(meta["task"].clone())
            .map_err(|e| StrategyError::Contract(format!("bad task kind: {e}")))?;
        let stage = meta["stage"].as_u64().unwrap_or(0) as usize;

        let ckpt = std::fs::read(dir.join("model.ckpt")).map_err(io)?;
        let model = Model::read_checkpoint(&mut ckpt.as_slice())?;

        let mut lang_matrices = BTreeMap::new();
        if let Some(langs) = meta["lang_matrices"].as_array() {
            for lang in langs {
                let lang = LangId::new(lang.as_str().ok_or_else(|| {
                    StrategyError::Contract("non-string language in deployed.json".into())
                })?);
                let bytes =
                    std::fs::read(dir.join(format!("lang_matrix_{lang}.spu"))).map_err(io)?;
                lang_matrices.insert(lang, SparseUpdate::read(&mut bytes.as_slice())?);
            }
        }
        let mut task_updates = Vec::new();
        for i in 0..meta["task_updates"].as_u64().unwrap_or(0) {
            let bytes =
                std::fs::read(dir.join(format!("task_update_{i:03}.spu"))).map_err(io)?;
            task_updates.push(SparseUpdate::read(&mut bytes.as_slice())?);
        }
        Ok(DeployedModel { model, kind, task, lang_matrices, task_updates, stage })
    }
}

struct MatrixPolicy {
    strict: bool,
}

fn apply_language_matrix(
    matrix: &SparseUpdate,
    model: &mut Model,
    stage: usize,
    policy: &MatrixPolicy,
) -> Result<UndoToken, StrategyError> {
    let actual = model.store().fingerprint();
    let stale = actual != matrix.base_fingerprint();
    if stale && policy.strict {
        return Err(StrategyError::StaleBase { expected: matrix.base_fingerprint(), actual });
    }
    if stale && stage > 0 {
        log::warn!(
            "language update matrix is stale after {stage} continuation stage(s); applying anyway"
        );
    }
    Ok(matrix.apply(model.store_mut(), ApplyMode::Forced)?)
}

fn is_encoder(group: &ParamGroup) -> bool {
    matches!(group.kind(), GroupKind::Base | GroupKind::LayerNorm)
}

fn pool_coords(model: &Model, pred: impl Fn(&ParamGroup) -> bool) -> usize {
    model.store().iter().filter(|(_, _, g)| pred(g)).map(|(_, t, _)| t.numel()).sum()
}

fn check_coverage(bench: &Benchmark) -> Result<(), StrategyError> {
    for lang in bench.langs() {
        let shard = bench.inception_shard(&lang)?;
        if shard.is_empty() {
            return Err(StrategyError::Coverage(format!("no inception data for {lang}")));
        }
    }
    Ok(())
}

/// Trains one language's masked-token update matrix with the lottery-ticket
/// procedure: pilot-train the encoder, rank coordinates by |delta|, rewind,
/// retrain only the kept coordinates. The head stays frozen so all
/// adaptation lands in the encoder, which is the only scope the emitted
/// update covers.
pub fn pretrain_language_matrices(
    model: &Model,
    corpora: &BTreeMap<LangId, Vec<Example>>,
    hyper: &StrategyHyper,
    seed: u64,
) -> Result<BTreeMap<LangId, SparseUpdate>, StrategyError> {
    hyper.validate()?;
    if corpora.is_empty() {
        return Err(StrategyError::Coverage("no pretraining corpora".into()));
    }
    for (lang, corpus) in corpora {
        if corpus.is_empty() {
            return Err(StrategyError::Coverage(format!("empty pretraining corpus for {lang}")));
        }
    }
    let mask_token = model.config().vocab_size - 1;
    let base_fingerprint = model.store().fingerprint();
    let pool = pool_coords(model, is_encoder);
    let budget = (hyper.sft.rho * pool as f64).floor() as usize;
    if budget < 1 {
        return Err(StrategyError::Config(format!(
            "rho {} keeps no encoder coordinate trainable (pool {pool})",
            hyper.sft.rho
        )));
    }

    let mut matrices = BTreeMap::new();
    for (lang, corpus) in corpora {
        let mut worker = model.clone();
        let base_snapshot = worker.store().snapshot();
        let lang_seed = derive_seed(seed, &format!("lang-matrix.{lang}"));
        let data: BTreeMap<LangId, Vec<Example>> =
            [(lang.clone(), corpus.clone())].into_iter().collect();

        let pilot = Phase {
            head: TaskHead::MaskedToken,
            data: data.clone(),
            epochs: hyper.sft.ft_epochs,
            batch_size: hyper.batch_size,
            optim: hyper.optim(hyper.mlm_lr),
            masks: MaskSet::unmasked(),
            frozen: [GroupKind::Head, GroupKind::Adapter].into_iter().collect(),
            adapter: AdapterRule::None,
            lang_matrices: None,
            mask_rate: hyper.mask_rate,
            mask_token,
        };
        run_phase(&mut worker, &pilot, lang_seed)?;

        let deltas = worker.store().param_delta(&base_snapshot, is_encoder)?;
        let keep = select_top_coordinates(&deltas, budget);
        worker.store_mut().restore(&base_snapshot);

        let sparse = Phase {
            epochs: hyper.sft.st_epochs,
            masks: MaskSet::from_keep(worker.store(), &keep)?,
            frozen: BTreeSet::new(),
            ..pilot
        };
        run_phase(&mut worker, &sparse, derive_seed(lang_seed, "sparse"))?;

        let deltas = worker.store().param_delta(&base_snapshot, is_encoder)?;
        matrices.insert(
            lang.clone(),
            SparseUpdate::from_deltas(base_fingerprint, UpdateScope::EncoderOnly, &deltas),
        );
    }
    Ok(matrices)
}

/// Runs the inception stage for a strategy over a benchmark's inception
/// shards, producing the first deployed model (stage 0).
///
/// SFT requires pretrained language update matrices over the identical
/// freshly initialized base (same config and seed).
pub fn run_inception(
    kind: StrategyKind,
    model_cfg: &ModelConfig,
    bench: &Benchmark,
    hyper: &StrategyHyper,
    lang_matrices: Option<BTreeMap<LangId, SparseUpdate>>,
    seed: u64,
) -> Result<DeployedModel, StrategyError> {
    hyper.validate()?;
    check_coverage(bench)?;
    let head = head_for(bench.task);
    let inception_data = bench.inception_data();
    let mask_token = model_cfg.vocab_size - 1;

    match kind {
        StrategyKind::Fft => {
            let mut model = Model::build(model_cfg.clone(), seed)?;
            let phase = Phase {
                head,
                data: inception_data,
                epochs: hyper.inception_epochs,
                batch_size: hyper.batch_size,
                optim: hyper.optim(hyper.inception_lr),
                masks: MaskSet::unmasked(),
                frozen: BTreeSet::new(),
                adapter: AdapterRule::None,
                lang_matrices: None,
                mask_rate: 0.0,
                mask_token,
            };
            run_phase(&mut model, &phase, derive_seed(seed, "inception.fft"))?;
            Ok(DeployedModel {
                model,
                kind,
                task: bench.task,
                lang_matrices: BTreeMap::new(),
                task_updates: Vec::new(),
                stage: 0,
            })
        }
        StrategyKind::Sft => {
            let matrices = lang_matrices.ok_or_else(|| {
                StrategyError::Dependency(
                    "SFT inception requires pretrained language update matrices".into(),
                )
            })?;
            let mut model = Model::build(model_cfg.clone(), seed)?;
            for lang in bench.langs() {
                let matrix = matrices.get(&lang).ok_or_else(|| {
                    StrategyError::Dependency(format!("no language update matrix for {lang}"))
                })?;
                if matrix.base_fingerprint() != model.store().fingerprint() {
                    return Err(StrategyError::StaleBase {
                        expected: matrix.base_fingerprint(),
                        actual: model.store().fingerprint(),
                    });
                }
            }
            let base_snapshot = model.store().snapshot();

            // pilot over the sparsely-trainable pool plus the free head
            let pilot = Phase {
                head,
                data: inception_data.clone(),
                epochs: hyper.sft.ft_epochs,
                batch_size: hyper.batch_size,
                optim: hyper.optim(hyper.inception_lr),
                masks: MaskSet::unmasked(),
                frozen: BTreeSet::new(),
                adapter: AdapterRule::None,
                lang_matrices: Some(&matrices),
                mask_rate: 0.0,
                mask_token,
            };
            run_phase(&mut model, &pilot, derive_seed(seed, "inception.sft.pilot"))?;

            let pool = pool_coords(&model, is_encoder);
            let budget = (hyper.sft.rho * pool as f64).floor() as usize;
            if budget < 1 {
                return Err(StrategyError::Config(format!(
                    "rho {} keeps no encoder coordinate trainable (pool {pool})",
                    hyper.sft.rho
                )));
            }
            let deltas = model.store().param_delta(&base_snapshot, is_encoder)?;
            let keep = select_top_coordinates(&deltas, budget);
            model.store_mut().restore(&base_snapshot);

            let mut masks = MaskSet::from_keep(model.store(), &keep)?;
            for name in model.store().names_where(|g| g.kind() == GroupKind::Head) {
                masks.remove(&name); // head stays fully trainable at inception
            }
            let sparse = Phase {
                epochs: hyper.sft.st_epochs,
                masks,
                ..pilot
            };
            run_phase(&mut model, &sparse, derive_seed(seed, "inception.sft.sparse"))?;

            Ok(DeployedModel {
                model,
                kind,
                task: bench.task,
                lang_matrices: matrices,
                task_updates: Vec::new(),
                stage: 0,
            })
        }
        StrategyKind::Laft | StrategyKind::LaftUriel => {
            // start from the FFT deployed model for the same seed
            let fft = run_inception(StrategyKind::Fft, model_cfg, bench, hyper, None, seed)?;
            let mut model = fft.model;
            let joint = LangId::new(JOINT_ADAPTER);
            model.insert_adapters(std::slice::from_ref(&joint))?;

            let joint_phase = Phase {
                head,
                data: inception_data,
                epochs: hyper.adapter_joint_epochs,
                batch_size: hyper.batch_size,
                optim: hyper.optim(hyper.inception_lr),
                masks: MaskSet::unmasked(),
                frozen: [GroupKind::Base, GroupKind::LayerNorm].into_iter().collect(),
                adapter: AdapterRule::Fixed(joint.clone()),
                lang_matrices: None,
                mask_rate: 0.0,
                mask_token,
            };
            run_phase(&mut model, &joint_phase, derive_seed(seed, "inception.laft.joint"))?;

            let langs = bench.langs();
            model.clone_adapters(&joint, &langs)?;
            model.remove_adapter_stack(&joint)?;

            let shared_fp = model.store().fingerprint_where(|g| !matches!(g, ParamGroup::Adapter(_)));
            for lang in &langs {
                let data: BTreeMap<LangId, Vec<Example>> =
                    [(lang.clone(), bench.inception_shard(lang)?.to_vec())].into_iter().collect();
                let phase = Phase {
                    head,
                    data,
                    epochs: hyper.adapter_lang_epochs,
                    batch_size: hyper.batch_size,
                    optim: hyper.optim(hyper.inception_lr),
                    masks: MaskSet::unmasked(),
                    frozen: [GroupKind::Base, GroupKind::LayerNorm, GroupKind::Head]
                        .into_iter()
                        .collect(),
                    adapter: AdapterRule::Fixed(lang.clone()),
                    lang_matrices: None,
                    mask_rate: 0.0,
                    mask_token,
                };
                run_phase(&mut model, &phase, derive_seed(seed, &format!("inception.laft.{lang}")))?;
            }
            assert_eq!(
                model.store().fingerprint_where(|g| !matches!(g, ParamGroup::Adapter(_))),
                shared_fp,
                "shared parameters must stay frozen during per-language adapter finetuning"
            );

            Ok(DeployedModel {
                model,
                kind,
                task: bench.task,
                lang_matrices: BTreeMap::new(),
                task_updates: Vec::new(),
                stage: 0,
            })
        }
    }
}

/// Full-finetuning continuation: every parameter trainable on the new
/// single-language data.
pub fn continuation_fft(
    dep: &mut DeployedModel,
    plan: &ContinuationPlan,
    hyper: &StrategyHyper,
    seed: u64,
) -> Result<(), StrategyError> {
    hyper.validate()?;
    let mask_token = dep.model.config().vocab_size - 1;
    let phase = Phase {
        head: dep.head(),
        data: [(plan.lang.clone(), plan.data.clone())].into_iter().collect(),
        epochs: hyper.continuation_epochs,
        batch_size: hyper.batch_size,
        optim: hyper.optim(hyper.continuation_lr),
        masks: MaskSet::unmasked(),
        frozen: BTreeSet::new(),
        adapter: AdapterRule::None,
        lang_matrices: None,
        mask_rate: 0.0,
        mask_token,
    };
    let phase_seed = stage_seed(dep, &plan.lang, seed);
    run_phase(&mut dep.model, &phase, phase_seed)?;
    dep.stage += 1;
    Ok(())
}

/// Sparse continuation: the stage language's update matrix is applied for
/// the whole stage, the pilot/rewind/sparse-train cycle runs over base and
/// head coordinates (layer norms frozen by default), the resulting task
/// update is recorded, and the matrix is reverted without disturbing the
/// trained coordinates.
pub fn continuation_sft(
    dep: &mut DeployedModel,
    plan: &ContinuationPlan,
    hyper: &StrategyHyper,
    seed: u64,
) -> Result<(), StrategyError> {
    hyper.validate()?;
    let matrix = dep
        .lang_matrices
        .get(&plan.lang)
        .cloned()
        .ok_or_else(|| StrategyError::Dependency(format!("no language update matrix for {}", plan.lang)))?;
    let mask_token = dep.model.config().vocab_size - 1;
    let policy = MatrixPolicy { strict: hyper.sft.strict_stale_matrices };
    let phase_seed = stage_seed(dep, &plan.lang, seed);
    let token = apply_language_matrix(&matrix, &mut dep.model, dep.stage, &policy)?;

    let result = (|| {
        let start = dep.model.store().snapshot();
        let start_fp = start.fingerprint();
        let in_pool = |g: &ParamGroup| {
            matches!(g.kind(), GroupKind::Base | GroupKind::Head)
                || (!hyper.sft.freeze_layer_norm && g.kind() == GroupKind::LayerNorm)
        };
        let frozen: BTreeSet<GroupKind> = if hyper.sft.freeze_layer_norm {
            [GroupKind::LayerNorm].into_iter().collect()
        } else {
            BTreeSet::new()
        };

        let pilot = Phase {
            head: dep.head(),
            data: [(plan.lang.clone(), plan.data.clone())].into_iter().collect(),
            epochs: hyper.sft.ft_epochs,
            batch_size: hyper.batch_size,
            optim: hyper.optim(hyper.continuation_lr),
            masks: MaskSet::unmasked(),
            frozen: frozen.clone(),
            adapter: AdapterRule::None,
            lang_matrices: None,
            mask_rate: 0.0,
            mask_token,
        };
        run_phase(&mut dep.model, &pilot, phase_seed)?;

        let pool = pool_coords(&dep.model, in_pool);
        let budget = (hyper.sft.rho * pool as f64).floor() as usize;
        if budget < 1 {
            return Err(StrategyError::Config(format!(
                "rho {} keeps no coordinate trainable (pool {pool})",
                hyper.sft.rho
            )));
        }
        let deltas = dep.model.store().param_delta(&start, in_pool)?;
        let keep = select_top_coordinates(&deltas, budget);
        dep.model.store_mut().restore(&start);

        let sparse = Phase {
            epochs: hyper.sft.st_epochs,
            masks: MaskSet::from_keep(dep.model.store(), &keep)?,
            frozen,
            ..pilot
        };
        run_phase(&mut dep.model, &sparse, derive_seed(phase_seed, "sparse"))?;

        let deltas = dep.model.store().param_delta(&start, |_| true)?;
        Ok(SparseUpdate::from_deltas(start_fp, UpdateScope::Full, &deltas))
    })();

    match result {
        Ok(update) => {
            matrix.revert_after_training(dep.model.store_mut(), token)?;
            dep.task_updates.push(update);
            dep.stage += 1;
            Ok(())
        }
        Err(e) => {
            matrix.revert_after_training(dep.model.store_mut(), token)?;
            Err(e)
        }
    }
}

/// Adapter continuation: the stage language's adapter and the head train at
/// `adapter_lr`, the base and layer norms at `adapter_lr / factor`, where
/// the factor is fixed (LAFT) or derived from the language's average
/// syntactic distance to the rest (LAFT-URIEL).
pub fn continuation_laft(
    dep: &mut DeployedModel,
    plan: &ContinuationPlan,
    adapter_lr: f64,
    factor_source: FactorSource<'_>,
    hyper: &StrategyHyper,
    seed: u64,
) -> Result<(), StrategyError> {
    hyper.validate()?;
    if !dep.model.adapter_langs().contains(&plan.lang) {
        return Err(StrategyError::Dependency(format!("no adapter stack for {}", plan.lang)));
    }
    let factor = match factor_source {
        FactorSource::Fixed(f) => f,
        FactorSource::Uriel { distances, factor_fn } => {
            factor_fn.validate()?;
            factor_fn.factor(distances.avg_distance_to_rest(&plan.lang)?)
        }
    };
    if !(factor >= 1.0) {
        return Err(StrategyError::Config(format!("division factor must be >= 1, got {factor}")));
    }
    let optim = hyper.optim(adapter_lr).with_division_factor(adapter_lr, factor)?;

    let mask_token = dep.model.config().vocab_size - 1;
    let phase = Phase {
        head: dep.head(),
        data: [(plan.lang.clone(), plan.data.clone())].into_iter().collect(),
        epochs: hyper.continuation_epochs,
        batch_size: hyper.batch_size,
        optim,
        masks: MaskSet::unmasked(),
        frozen: BTreeSet::new(),
        adapter: AdapterRule::Fixed(plan.lang.clone()),
        lang_matrices: None,
        mask_rate: 0.0,
        mask_token,
    };
    let phase_seed = stage_seed(dep, &plan.lang, seed);
    run_phase(&mut dep.model, &phase, phase_seed)?;
    dep.stage += 1;
    Ok(())
}

/// Dispatches the continuation procedure matching the deployment's
/// strategy. LAFT-URIEL requires `uriel`.
pub fn run_continuation(
    dep: &mut DeployedModel,
    plan: &ContinuationPlan,
    hyper: &StrategyHyper,
    uriel: Option<(&DistanceMatrix, DivisionFactorFn)>,
    seed: u64,
) -> Result<(), StrategyError> {
    match dep.kind {
        StrategyKind::Fft => continuation_fft(dep, plan, hyper, seed),
        StrategyKind::Sft => continuation_sft(dep, plan, hyper, seed),
        StrategyKind::Laft => continuation_laft(
            dep,
            plan,
            hyper.continuation_lr,
            FactorSource::Fixed(hyper.laft_div_factor),
            hyper,
            seed,
        ),
        StrategyKind::LaftUriel => {
            let (distances, factor_fn) = uriel.ok_or_else(|| {
                StrategyError::Dependency(
                    "LAFT-URIEL continuation needs a distance matrix and factor function".into(),
                )
            })?;
            continuation_laft(
                dep,
                plan,
                hyper.continuation_lr,
                FactorSource::Uriel { distances, factor_fn },
                hyper,
                seed,
            )
        }
    }
}

fn stage_seed(dep: &DeployedModel, lang: &LangId, seed: u64) -> u64 {
    derive_seed(seed, &format!("stage.{}.{}.{}", dep.kind.as_str(), dep.stage, lang))
}
