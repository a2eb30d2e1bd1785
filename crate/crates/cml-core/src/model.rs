//! A small transformer encoder with per-language bottleneck adapters and
//! swappable task heads.
//!
//! Layout per layer (post-norm): self-attention, optional adapter, residual
//! + layer norm, feed-forward, optional adapter, residual + layer norm.
//! Adapters follow the two-per-layer convention (one after the attention
//! sublayer, one after the feed-forward sublayer); their up-projections are
//! zero-initialized so a freshly inserted adapter is an exact identity and
//! the model's behavior is unchanged until the adapter trains.
//!
//! Every parameter is registered in a [`NamedParamStore`] under a stable
//! name and group tag:
//!
//! ```text
//! embed.tok, embed.pos                               Base
//! enc.<L>.attn.{wq,bq,wk,bk,wv,bv,wo,bo}             Base
//! enc.<L>.ffn.{w1,b1,w2,b2}                          Base
//! enc.<L>.{ln1,ln2}.{gain,bias}                      LayerNorm
//! head.{token,sent,mask}.{w,b}                       Head
//! adapter.<lang>.<L>.{attn,ffn}.{down,up}.{w,b}      Adapter(lang)
//! ```

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lang::LangId;
use crate::tensor::{
    derive_seed, read_store, write_store, Fingerprinter, Graph, NamedParamStore, NodeId,
    ParamGroup, SerializeError, Tensor, TensorError,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("no adapter stack for language {0}")]
    MissingAdapter(LangId),
    #[error("duplicate language {0}")]
    DuplicateLanguage(LangId),
    #[error("token id {id} out of range (vocab size {vocab})")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("batch rows must share one length")]
    RaggedBatch,
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Serialize(#[from] SerializeError),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
}

/// Encoder activation. Only GELU is implemented; the field exists so
/// checkpoints record the choice explicitly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_tags: usize,
    pub n_classes: usize,
    /// Adapter bottleneck width.
    pub b_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelConfig {
    /// Default architecture (2 layers, d_model 64, 4 heads, ffn 128,
    /// max_seq_len 32, bottleneck 16) for a given task sizing.
    pub fn with_task(vocab_size: usize, n_tags: usize, n_classes: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ffn: 128,
            vocab_size,
            max_seq_len: 32,
            n_tags,
            n_classes,
            b_dim: 16,
            activation: Activation::Gelu,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut problems = Vec::new();
        if self.n_layers == 0 {
            problems.push("n_layers must be >= 1".to_owned());
        }
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            problems.push(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ffn == 0 {
            problems.push("d_ffn must be >= 1".to_owned());
        }
        if self.b_dim == 0 || self.b_dim >= self.d_model {
            problems.push(format!(
                "b_dim ({}) must satisfy 1 <= b_dim < d_model ({})",
                self.b_dim, self.d_model
            ));
        }
        if self.vocab_size < 2 {
            problems.push("vocab_size must be >= 2".to_owned());
        }
        if self.max_seq_len == 0 {
            problems.push("max_seq_len must be >= 1".to_owned());
        }
        if self.n_tags == 0 || self.n_classes == 0 {
            problems.push("n_tags and n_classes must be >= 1".to_owned());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig(problems.join("; ")))
        }
    }

    /// Closed-form count of base + layer-norm + head parameters:
    ///
    /// ```text
    ///   embeddings  vocab*d + max_seq*d
    ///   per layer   4*(d*d + d)                  attention
    ///             + d*ffn + ffn + ffn*d + d      feed-forward
    ///             + 4*d                          two layer norms
    ///   heads       d*n_tags + n_tags + d*n_classes + n_classes
    ///             + d*vocab + vocab
    /// ```
    pub fn param_census(&self) -> usize {
        let d = self.d_model;
        let embed = self.vocab_size * d + self.max_seq_len * d;
        let per_layer = 4 * (d * d + d) + d * self.d_ffn + self.d_ffn + self.d_ffn * d + d + 4 * d;
        let heads = d * self.n_tags
            + self.n_tags
            + d * self.n_classes
            + self.n_classes
            + d * self.vocab_size
            + self.vocab_size;
        embed + self.n_layers * per_layer + heads
    }

    /// Adapter parameters added per language:
    /// `2 * n_layers * (2*d_model*b_dim + b_dim + d_model)`.
    pub fn adapter_params_per_language(&self) -> usize {
        2 * self.n_layers * (2 * self.d_model * self.b_dim + self.b_dim + self.d_model)
    }
}

/// Which output head a forward pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskHead {
    /// Per-position linear to `n_tags`.
    TokenTag,
    /// Mean-pool over positions, then linear to `n_classes`.
    SentenceClass,
    /// Per-position linear to `vocab_size`.
    MaskedToken,
}

/// A rectangular batch of token ids (`batch` rows of `seq_len` each).
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
}

impl TokenBatch {
    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self, ModelError> {
        let batch = rows.len();
        if batch == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let seq_len = rows[0].len();
        if seq_len == 0 || rows.iter().any(|r| r.len() != seq_len) {
            return Err(ModelError::RaggedBatch);
        }
        let ids = rows.iter().flatten().copied().collect();
        Ok(TokenBatch { ids, batch, seq_len })
    }
}

/// Gold labels matching a [`TaskHead`].
#[derive(Clone, Debug)]
pub enum Targets {
    /// One tag per position, row-major `[batch * seq_len]`.
    Tags(Vec<usize>),
    /// One class per row, `[batch]`.
    Class(Vec<usize>),
    /// Original token per masked position, `[batch * seq_len]`; `None`
    /// positions are excluded from the loss.
    Masked(Vec<Option<usize>>),
}

/// The transformer, its parameter store, and the set of adapter stacks
/// currently inserted.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    store: NamedParamStore,
    adapter_langs: BTreeSet<LangId>,
    seed: u64,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CMLCKPT1";

impl Model {
    /// Builds and deterministically initializes a model: weights are
    /// Xavier-uniform per tensor from an RNG stream derived from
    /// `(seed, parameter name)`, embeddings uniform in
    /// `±1/sqrt(d_model)`, biases zero, layer-norm gains one.
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Model, ModelError> {
        cfg.validate()?;
        let mut store = NamedParamStore::new();
        let d = cfg.d_model;

        let emb_limit = 1.0 / (d as f64).sqrt();
        register_uniform(&mut store, "embed.tok", &[cfg.vocab_size, d], emb_limit, seed, ParamGroup::Base);
        register_uniform(&mut store, "embed.pos", &[cfg.max_seq_len, d], emb_limit, seed, ParamGroup::Base);

        for layer in 0..cfg.n_layers {
            for proj in ["wq", "wk", "wv", "wo"] {
                let name = format!("enc.{layer:02}.attn.{proj}");
                register_xavier(&mut store, &name, &[d, d], seed, ParamGroup::Base);
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                let name = format!("enc.{layer:02}.attn.{bias}");
                store.register(name, Tensor::zeros(&[d]), ParamGroup::Base);
            }
            for ln in ["ln1", "ln2"] {
                store.register(
                    format!("enc.{layer:02}.{ln}.gain"),
                    Tensor::filled(&[d], 1.0),
                    ParamGroup::LayerNorm,
                );
                store.register(
                    format!("enc.{layer:02}.{ln}.bias"),
                    Tensor::zeros(&[d]),
                    ParamGroup::LayerNorm,
                );
            }
            register_xavier(&mut store, &format!("enc.{layer:02}.ffn.w1"), &[d, cfg.d_ffn], seed, ParamGroup::Base);
            store.register(format!("enc.{layer:02}.ffn.b1"), Tensor::zeros(&[cfg.d_ffn]), ParamGroup::Base);
            register_xavier(&mut store, &format!("enc.{layer:02}.ffn.w2"), &[cfg.d_ffn, d], seed, ParamGroup::Base);
            store.register(format!("enc.{layer:02}.ffn.b2"), Tensor::zeros(&[d]), ParamGroup::Base);
        }

        register_xavier(&mut store, "head.token.w", &[d, cfg.n_tags], seed, ParamGroup::Head);
        store.register("head.token.b", Tensor::zeros(&[cfg.n_tags]), ParamGroup::Head);
        register_xavier(&mut store, "head.sent.w", &[d, cfg.n_classes], seed, ParamGroup::Head);
        store.register("head.sent.b", Tensor::zeros(&[cfg.n_classes]), ParamGroup::Head);
        register_xavier(&mut store, "head.mask.w", &[d, cfg.vocab_size], seed, ParamGroup::Head);
        store.register("head.mask.b", Tensor::zeros(&[cfg.vocab_size]), ParamGroup::Head);

        Ok(Model { cfg, store, adapter_langs: BTreeSet::new(), seed })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &NamedParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut NamedParamStore {
        &mut self.store
    }

    pub fn adapter_langs(&self) -> &BTreeSet<LangId> {
        &self.adapter_langs
    }

    /// Inserts one adapter stack per language: down-projections seeded
    /// random, up-projections zero, so base behavior is unchanged.
    pub fn insert_adapters(&mut self, languages: &[LangId]) -> Result<(), ModelError> {
        let mut seen = BTreeSet::new();
        for lang in languages {
            if !seen.insert(lang.clone()) || self.adapter_langs.contains(lang) {
                return Err(ModelError::DuplicateLanguage(lang.clone()));
            }
        }
        for lang in languages {
            for layer in 0..self.cfg.n_layers {
                for sub in ["attn", "ffn"] {
                    let prefix = format!("adapter.{lang}.{layer:02}.{sub}");
                    let group = ParamGroup::Adapter(lang.clone());
                    register_xavier(
                        &mut self.store,
                        &format!("{prefix}.down.w"),
                        &[self.cfg.d_model, self.cfg.b_dim],
                        self.seed,
                        group.clone(),
                    );
                    self.store.register(
                        format!("{prefix}.down.b"),
                        Tensor::zeros(&[self.cfg.b_dim]),
                        group.clone(),
                    );
                    self.store.register(
                        format!("{prefix}.up.w"),
                        Tensor::zeros(&[self.cfg.b_dim, self.cfg.d_model]),
                        group.clone(),
                    );
                    self.store.register(
                        format!("{prefix}.up.b"),
                        Tensor::zeros(&[self.cfg.d_model]),
                        group,
                    );
                }
            }
            self.adapter_langs.insert(lang.clone());
        }
        Ok(())
    }

    /// Deep-copies the adapter stack of `src` into one independently
    /// mutable stack per target language.
    pub fn clone_adapters(&mut self, src: &LangId, languages: &[LangId]) -> Result<(), ModelError> {
        if !self.adapter_langs.contains(src) {
            return Err(ModelError::MissingAdapter(src.clone()));
        }
        let mut seen = BTreeSet::new();
        for lang in languages {
            if !seen.insert(lang.clone()) || self.adapter_langs.contains(lang) {
                return Err(ModelError::DuplicateLanguage(lang.clone()));
            }
        }
        let src_prefix = format!("adapter.{src}.");
        let src_entries: Vec<(String, Tensor)> = self
            .store
            .iter()
            .filter(|(name, _, _)| name.starts_with(&src_prefix))
            .map(|(name, t, _)| (name[src_prefix.len()..].to_owned(), t.clone()))
            .collect();
        for lang in languages {
            for (suffix, tensor) in &src_entries {
                self.store.register(
                    format!("adapter.{lang}.{suffix}"),
                    tensor.clone(),
                    ParamGroup::Adapter(lang.clone()),
                );
            }
            self.adapter_langs.insert(lang.clone());
        }
        Ok(())
    }

    /// Drops the adapter stack of one language.
    pub fn remove_adapter_stack(&mut self, lang: &LangId) -> Result<(), ModelError> {
        if !self.adapter_langs.remove(lang) {
            return Err(ModelError::MissingAdapter(lang.clone()));
        }
        let prefix = format!("adapter.{lang}.");
        let names: Vec<String> = self
            .store
            .iter()
            .filter(|(name, _, _)| name.starts_with(&prefix))
            .map(|(name, _, _)| name.clone())
            .collect();
        for name in names {
            self.store.remove(&name);
        }
        Ok(())
    }

    /// Language-independent fingerprint of one adapter stack (names are
    /// hashed with the language id stripped, so freshly cloned stacks
    /// compare equal across languages).
    pub fn adapter_fingerprint(&self, lang: &LangId) -> Result<u64, ModelError> {
        if !self.adapter_langs.contains(lang) {
            return Err(ModelError::MissingAdapter(lang.clone()));
        }
        let prefix = format!("adapter.{lang}.");
        let mut h = Fingerprinter::new();
        for (name, tensor, _) in self.store.iter() {
            if let Some(suffix) = name.strip_prefix(&prefix) {
                h.write_str(suffix);
                h.write_u64(tensor.shape().len() as u64);
                for &d in tensor.shape() {
                    h.write_u64(d as u64);
                }
                for &v in tensor.data() {
                    h.write_f64(v);
                }
            }
        }
        Ok(h.finish())
    }

    fn validate_batch(&self, batch: &TokenBatch, adapter: Option<&LangId>) -> Result<(), ModelError> {
        if batch.batch == 0 || batch.seq_len == 0 {
            return Err(ModelError::EmptyBatch);
        }
        if batch.seq_len > self.cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: batch.seq_len,
                max: self.cfg.max_seq_len,
            });
        }
        if let Some(&id) = batch.ids.iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange { id, vocab: self.cfg.vocab_size });
        }
        if let Some(lang) = adapter {
            if !self.adapter_langs.contains(lang) {
                return Err(ModelError::MissingAdapter(lang.clone()));
            }
        }
        Ok(())
    }

    /// Encoder output for a batch as a `[batch, seq_len, d_model]` tensor.
    pub fn encode_batch(
        &self,
        batch: &TokenBatch,
        adapter: Option<&LangId>,
    ) -> Result<Tensor, ModelError> {
        self.validate_batch(batch, adapter)?;
        let mut g = Graph::new();
        let enc = self.encode(&mut g, batch, adapter);
        Ok(g.value(enc).reshaped(&[batch.batch, batch.seq_len, self.cfg.d_model]))
    }

    /// Logits for a batch under the given head; a pure function of the
    /// parameters and the batch.
    pub fn forward(
        &self,
        head: TaskHead,
        batch: &TokenBatch,
        adapter: Option<&LangId>,
    ) -> Result<Tensor, ModelError> {
        self.validate_batch(batch, adapter)?;
        let mut g = Graph::new();
        let enc = self.encode(&mut g, batch, adapter);
        let logits = self.head_logits(&mut g, head, enc, batch);
        let (b, l) = (batch.batch, batch.seq_len);
        let shaped = match head {
            TaskHead::TokenTag => g.value(logits).reshaped(&[b, l, self.cfg.n_tags]),
            TaskHead::SentenceClass => g.value(logits).clone(),
            TaskHead::MaskedToken => g.value(logits).reshaped(&[b, l, self.cfg.vocab_size]),
        };
        Ok(shaped)
    }

    /// Builds the full loss graph for one batch; the returned graph is
    /// ready for `backward(loss)`.
    pub fn loss_graph(
        &self,
        head: TaskHead,
        batch: &TokenBatch,
        targets: &Targets,
        adapter: Option<&LangId>,
    ) -> Result<(Graph, NodeId), ModelError> {
        self.validate_batch(batch, adapter)?;
        let mut g = Graph::new();
        let enc = self.encode(&mut g, batch, adapter);
        let logits = self.head_logits(&mut g, head, enc, batch);
        let loss = match (head, targets) {
            (TaskHead::TokenTag, Targets::Tags(tags)) => {
                let t: Vec<Option<usize>> = tags.iter().map(|&t| Some(t)).collect();
                g.cross_entropy(logits, &t)
            }
            (TaskHead::SentenceClass, Targets::Class(classes)) => {
                let t: Vec<Option<usize>> = classes.iter().map(|&c| Some(c)).collect();
                g.cross_entropy(logits, &t)
            }
            (TaskHead::MaskedToken, Targets::Masked(masked)) => g.cross_entropy(logits, masked),
            _ => panic!("targets do not match head {head:?}"),
        };
        Ok((g, loss))
    }

    /// Encoder over the flat `[batch*seq_len, d_model]` representation.
    fn encode(&self, g: &mut Graph, batch: &TokenBatch, adapter: Option<&LangId>) -> NodeId {
        let (b, l, d) = (batch.batch, batch.seq_len, self.cfg.d_model);
        let tok_table = g.param(&self.store, "embed.tok");
        let tok = g.embedding(tok_table, &batch.ids);
        let pos_ids: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
        let pos_table = g.param(&self.store, "embed.pos");
        let pos = g.embedding(pos_table, &pos_ids);
        let mut x = g.add(tok, pos); // [b*l, d]

        for layer in 0..self.cfg.n_layers {
            let p = format!("enc.{layer:02}");
            let attn = self.attention(g, x, layer, b, l);
            let attn = match adapter {
                Some(lang) => self.adapter(g, attn, lang, layer, "attn"),
                None => attn,
            };
            let res = g.add(x, attn);
            let gain = g.param(&self.store, &format!("{p}.ln1.gain"));
            let bias = g.param(&self.store, &format!("{p}.ln1.bias"));
            x = g.layer_norm(res, gain, bias);

            let w1 = g.param(&self.store, &format!("{p}.ffn.w1"));
            let b1 = g.param(&self.store, &format!("{p}.ffn.b1"));
            let h = g.matmul(x, w1);
            let h = g.add_bias(h, b1);
            let h = g.gelu(h);
            let w2 = g.param(&self.store, &format!("{p}.ffn.w2"));
            let b2 = g.param(&self.store, &format!("{p}.ffn.b2"));
            let h = g.matmul(h, w2);
            let h = g.add_bias(h, b2);
            let h = match adapter {
                Some(lang) => self.adapter(g, h, lang, layer, "ffn"),
                None => h,
            };
            let res = g.add(x, h);
            let gain = g.param(&self.store, &format!("{p}.ln2.gain"));
            let bias = g.param(&self.store, &format!("{p}.ln2.bias"));
            x = g.layer_norm(res, gain, bias);
        }
        let _ = d;
        x
    }

    /// Multi-head self-attention over flat input `[b*l, d]`.
    fn attention(&self, g: &mut Graph, x: NodeId, layer: usize, b: usize, l: usize) -> NodeId {
        let d = self.cfg.d_model;
        let h = self.cfg.n_heads;
        let dh = d / h;
        let p = format!("enc.{layer:02}.attn");

        let project = |g: &mut Graph, store: &NamedParamStore, w: &str, bias: &str, x: NodeId| {
            let w = g.param(store, w);
            let bv = g.param(store, bias);
            let y = g.matmul(x, w);
            g.add_bias(y, bv)
        };
        let q = project(g, &self.store, &format!("{p}.wq"), &format!("{p}.bq"), x);
        let k = project(g, &self.store, &format!("{p}.wk"), &format!("{p}.bk"), x);
        let v = project(g, &self.store, &format!("{p}.wv"), &format!("{p}.bv"), x);

        // [b*l, d] -> [b, h, l, dh] -> [b*h, l, dh]
        let split = |g: &mut Graph, t: NodeId| {
            let t = g.reshape(t, &[b, l, h, dh]);
            let t = g.swap_axes_1_2(t);
            g.reshape(t, &[b * h, l, dh])
        };
        let q = split(g, q);
        let k = split(g, k);
        let v = split(g, v);

        let kt = g.transpose_last(k);
        let scores = g.batch_matmul(q, kt);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let probs = g.softmax(scores);
        let ctx = g.batch_matmul(probs, v); // [b*h, l, dh]

        let ctx = g.reshape(ctx, &[b, h, l, dh]);
        let ctx = g.swap_axes_1_2(ctx);
        let ctx = g.reshape(ctx, &[b * l, d]);
        project(g, &self.store, &format!("{p}.wo"), &format!("{p}.bo"), ctx)
    }

    /// Bottleneck block with internal residual: `h + up(gelu(down(h)))`.
    fn adapter(&self, g: &mut Graph, h: NodeId, lang: &LangId, layer: usize, sub: &str) -> NodeId {
        let p = format!("adapter.{lang}.{layer:02}.{sub}");
        let dw = g.param(&self.store, &format!("{p}.down.w"));
        let db = g.param(&self.store, &format!("{p}.down.b"));
        let a = g.matmul(h, dw);
        let a = g.add_bias(a, db);
        let a = g.gelu(a);
        let uw = g.param(&self.store, &format!("{p}.up.w"));
        let ub = g.param(&self.store, &format!("{p}.up.b"));
        let a = g.matmul(a, uw);
        let a = g.add_bias(a, ub);
        g.add(h, a)
    }

    fn head_logits(&self, g: &mut Graph, head: TaskHead, enc: NodeId, batch: &TokenBatch) -> NodeId {
        let (b, l, d) = (batch.batch, batch.seq_len, self.cfg.d_model);
        match head {
            TaskHead::TokenTag => {
                let w = g.param(&self.store, "head.token.w");
                let bias = g.param(&self.store, "head.token.b");
                let y = g.matmul(enc, w);
                g.add_bias(y, bias)
            }
            TaskHead::SentenceClass => {
                let enc3 = g.reshape(enc, &[b, l, d]);
                let pooled = g.mean_axis1(enc3);
                let w = g.param(&self.store, "head.sent.w");
                let bias = g.param(&self.store, "head.sent.b");
                let y = g.matmul(pooled, w);
                g.add_bias(y, bias)
            }
            TaskHead::MaskedToken => {
                let w = g.param(&self.store, "head.mask.w");
                let bias = g.param(&self.store, "head.mask.b");
                let y = g.matmul(enc, w);
                g.add_bias(y, bias)
            }
        }
    }

    /// Writes config header plus the full parameter store.
    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<(), ModelError> {
        w.write_all(CHECKPOINT_MAGIC).map_err(SerializeError::Io)?;
        let header = serde_json::to_vec(&CheckpointHeader {
            cfg: self.cfg.clone(),
            adapter_langs: self.adapter_langs.iter().cloned().collect(),
            seed: self.seed,
        })
        .expect("config serializes");
        w.write_all(&(header.len() as u32).to_le_bytes()).map_err(SerializeError::Io)?;
        w.write_all(&header).map_err(SerializeError::Io)?;
        write_store(&self.store, w)?;
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Model, ModelError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(SerializeError::Io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::CorruptCheckpoint("bad magic".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(SerializeError::Io)?;
        let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut header).map_err(SerializeError::Io)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)
            .map_err(|e| ModelError::CorruptCheckpoint(format!("bad header: {e}")))?;
        let store = read_store(r)?;
        Ok(Model {
            cfg: header.cfg,
            store,
            adapter_langs: header.adapter_langs.into_iter().collect(),
            seed: header.seed,
        })
    }

    /// Serializes a single language's adapter stack.
    pub fn write_adapter(&self, lang: &LangId, w: &mut impl Write) -> Result<(), ModelError> {
        if !self.adapter_langs.contains(lang) {
            return Err(ModelError::MissingAdapter(lang.clone()));
        }
        let prefix = format!("adapter.{lang}.");
        let mut sub = NamedParamStore::new();
        for (name, tensor, group) in self.store.iter() {
            if name.starts_with(&prefix) {
                sub.register(name.clone(), tensor.clone(), group.clone());
            }
        }
        write_store(&sub, w)?;
        Ok(())
    }

    /// Loads one language's adapter stack, replacing an existing stack for
    /// that language if present.
    pub fn load_adapter(&mut self, r: &mut impl Read) -> Result<LangId, ModelError> {
        let sub = read_store(r)?;
        let mut lang: Option<LangId> = None;
        for (name, _, group) in sub.iter() {
            match group {
                ParamGroup::Adapter(l) => {
                    if lang.get_or_insert_with(|| l.clone()) != l {
                        return Err(ModelError::CorruptCheckpoint(
                            "adapter file mixes languages".into(),
                        ));
                    }
                    if !name.starts_with(&format!("adapter.{l}.")) {
                        return Err(ModelError::CorruptCheckpoint(format!(
                            "misnamed adapter parameter {name:?}"
                        )));
                    }
                }
                _ => {
                    return Err(ModelError::CorruptCheckpoint(format!(
                        "non-adapter parameter {name:?} in adapter file"
                    )))
                }
            }
        }
        let lang = lang.ok_or_else(|| ModelError::CorruptCheckpoint("empty adapter file".into()))?;
        if self.adapter_langs.contains(&lang) {
            self.remove_adapter_stack(&lang)?;
        }
        for (name, tensor, group) in sub.iter() {
            self.store.register(name.clone(), tensor.clone(), group.clone());
        }
        self.adapter_langs.insert(lang.clone());
        Ok(lang)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    cfg: ModelConfig,
    adapter_langs: Vec<LangId>,
    seed: u64,
}

fn register_uniform(
    store: &mut NamedParamStore,
    name: &str,
    shape: &[usize],
    limit: f64,
    seed: u64,
    group: ParamGroup,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name));
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    store.register(name.to_owned(), Tensor::from_vec(shape, data), group);
}

fn register_xavier(
    store: &mut NamedParamStore,
    name: &str,
    shape: &[usize],
    seed: u64,
    group: ParamGroup,
) {
    let (fan_in, fan_out) = (shape[0], shape[1]);
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    register_uniform(store, name, shape, limit, seed, group);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::with_task(30, 5, 4);
        cfg.n_layers = 2;
        cfg.d_model = 16;
        cfg.n_heads = 4;
        cfg.d_ffn = 24;
        cfg.max_seq_len = 12;
        cfg.b_dim = 4;
        cfg
    }

    fn batch(b: usize, l: usize, vocab: usize, seed: u64) -> TokenBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<usize>> =
            (0..b).map(|_| (0..l).map(|_| rng.random_range(0..vocab)).collect()).collect();
        TokenBatch::from_rows(&rows).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::build(small_cfg(), 42).unwrap();
        let b = Model::build(small_cfg(), 42).unwrap();
        assert_eq!(a.store().fingerprint(), b.store().fingerprint());
        let c = Model::build(small_cfg(), 43).unwrap();
        assert_ne!(a.store().fingerprint(), c.store().fingerprint());
    }

    #[test]
    fn divisibility_violation_rejected() {
        let mut cfg = ModelConfig::with_task(30, 5, 4);
        cfg.n_heads = 5;
        let err = Model::build(cfg, 1).unwrap_err();
        assert!(matches!(err, ModelError::InvalidConfig(msg) if msg.contains("n_heads")));
    }

    #[test]
    fn census_matches_registered_parameters() {
        for cfg in [small_cfg(), ModelConfig::with_task(100, 5, 4)] {
            let model = Model::build(cfg.clone(), 7).unwrap();
            assert_eq!(model.store().total_coords(), cfg.param_census());
        }
    }

    #[test]
    fn adapter_census_matches_formula() {
        let cfg = small_cfg();
        let mut model = Model::build(cfg.clone(), 7).unwrap();
        let before = model.store().total_coords();
        model.insert_adapters(&[LangId::new("aa"), LangId::new("bb")]).unwrap();
        let added = model.store().total_coords() - before;
        assert_eq!(added, 2 * cfg.adapter_params_per_language());
    }

    #[test]
    fn token_tag_logit_shape() {
        let model = Model::build(small_cfg(), 3).unwrap();
        let b = batch(2, 8, 30, 1);
        let logits = model.forward(TaskHead::TokenTag, &b, None).unwrap();
        assert_eq!(logits.shape(), &[2, 8, 5]);
        let logits = model.forward(TaskHead::SentenceClass, &b, None).unwrap();
        assert_eq!(logits.shape(), &[2, 4]);
        let logits = model.forward(TaskHead::MaskedToken, &b, None).unwrap();
        assert_eq!(logits.shape(), &[2, 8, 30]);
    }

    #[test]
    fn forward_is_deterministic_and_pure() {
        let model = Model::build(small_cfg(), 3).unwrap();
        let b = batch(3, 6, 30, 5);
        let v0 = model.store().version();
        let l1 = model.forward(TaskHead::TokenTag, &b, None).unwrap();
        let l2 = model.forward(TaskHead::TokenTag, &b, None).unwrap();
        assert_eq!(model.store().version(), v0, "forward must not mutate the store");
        assert_eq!(l1.data(), l2.data());
    }

    #[test]
    fn fresh_adapters_are_transparent() {
        let mut model = Model::build(small_cfg(), 3).unwrap();
        let b = batch(2, 8, 30, 9);
        let plain = model.forward(TaskHead::TokenTag, &b, None).unwrap();
        model.insert_adapters(&[LangId::new("aa")]).unwrap();
        let with = model.forward(TaskHead::TokenTag, &b, Some(&LangId::new("aa"))).unwrap();
        let without = model.forward(TaskHead::TokenTag, &b, None).unwrap();
        for ((p, w), wo) in plain.data().iter().zip(with.data()).zip(without.data()) {
            assert!((p - w).abs() <= 1e-12);
            assert_eq!(p, wo);
        }
    }

    #[test]
    fn adapter_gradients_are_isolated() {
        let mut model = Model::build(small_cfg(), 3).unwrap();
        model.insert_adapters(&[LangId::new("aa"), LangId::new("bb")]).unwrap();
        let b = batch(2, 6, 30, 11);
        let tags: Vec<usize> = (0..12).map(|i| i % 5).collect();
        let (g, loss) = model
            .loss_graph(TaskHead::TokenTag, &b, &Targets::Tags(tags), Some(&LangId::new("aa")))
            .unwrap();
        let grads = g.backward(loss).unwrap();
        let mut saw_aa = false;
        for (name, _) in grads.iter() {
            assert!(!name.starts_with("adapter.bb."), "inactive adapter got a gradient: {name}");
            saw_aa |= name.starts_with("adapter.aa.");
        }
        assert!(saw_aa, "active adapter should receive gradients");
    }

    #[test]
    fn head_swap_leaves_encoder_untouched() {
        let model = Model::build(small_cfg(), 3).unwrap();
        let b = batch(2, 6, 30, 13);
        let e1 = model.encode_batch(&b, None).unwrap();
        let _ = model.forward(TaskHead::SentenceClass, &b, None).unwrap();
        let _ = model.forward(TaskHead::MaskedToken, &b, None).unwrap();
        let e2 = model.encode_batch(&b, None).unwrap();
        assert_eq!(e1.data(), e2.data());
    }

    #[test]
    fn clone_adapters_is_deep() {
        let mut model = Model::build(small_cfg(), 3).unwrap();
        let joint = LangId::new("@joint");
        model.insert_adapters(&[joint.clone()]).unwrap();
        // give the source stack non-trivial values
        model
            .store_mut()
            .get_mut("adapter.@joint.00.attn.up.w")
            .unwrap()
            .data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = i as f64 * 0.01);

        let langs = [LangId::new("aa"), LangId::new("bb")];
        model.clone_adapters(&joint, &langs).unwrap();
        let fp_aa = model.adapter_fingerprint(&langs[0]).unwrap();
        let fp_bb = model.adapter_fingerprint(&langs[1]).unwrap();
        let fp_src = model.adapter_fingerprint(&joint).unwrap();
        assert_eq!(fp_aa, fp_bb);
        assert_eq!(fp_aa, fp_src);

        model.store_mut().get_mut("adapter.aa.00.attn.up.w").unwrap().data_mut()[0] = 99.0;
        assert_ne!(model.adapter_fingerprint(&langs[0]).unwrap(), fp_bb);
        assert_eq!(model.adapter_fingerprint(&langs[1]).unwrap(), fp_bb);
    }

    #[test]
    fn remove_adapter_stack_restores_census() {
        let mut model = Model::build(small_cfg(), 3).unwrap();
        let before = model.store().total_coords();
        model.insert_adapters(&[LangId::new("aa")]).unwrap();
        model.remove_adapter_stack(&LangId::new("aa")).unwrap();
        assert_eq!(model.store().total_coords(), before);
        assert!(model.adapter_langs().is_empty());
    }

    #[test]
    fn input_validation_errors() {
        let mut model = Model::build(small_cfg(), 3).unwrap();
        model.insert_adapters(&[LangId::new("aa")]).unwrap();
        let err = model.insert_adapters(&[LangId::new("aa")]).unwrap_err();
        assert!(matches!(err, ModelError::DuplicateLanguage(_)));

        let b = batch(1, 6, 30, 1);
        let err = model.forward(TaskHead::TokenTag, &b, Some(&LangId::new("zz"))).unwrap_err();
        assert!(matches!(err, ModelError::MissingAdapter(_)));

        let bad = TokenBatch { ids: vec![29, 30], batch: 1, seq_len: 2 };
        let err = model.forward(TaskHead::TokenTag, &bad, None).unwrap_err();
        assert!(matches!(err, ModelError::TokenOutOfRange { id: 30, .. }));

        let long = batch(1, 13, 30, 1);
        let err = model.forward(TaskHead::TokenTag, &long, None).unwrap_err();
        assert!(matches!(err, ModelError::SequenceTooLong { .. }));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut model = Model::build(small_cfg(), 3).unwrap();
        model.insert_adapters(&[LangId::new("aa")]).unwrap();
        let mut buf = Vec::new();
        model.write_checkpoint(&mut buf).unwrap();
        let loaded = Model::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded.store().fingerprint(), model.store().fingerprint());
        assert_eq!(loaded.config(), model.config());
        assert_eq!(loaded.adapter_langs(), model.adapter_langs());
    }

    #[test]
    fn adapter_file_roundtrip_swaps_stack() {
        let mut model = Model::build(small_cfg(), 3).unwrap();
        model.insert_adapters(&[LangId::new("aa")]).unwrap();
        model.store_mut().get_mut("adapter.aa.00.ffn.up.b").unwrap().data_mut()[2] = 0.5;
        let fp = model.adapter_fingerprint(&LangId::new("aa")).unwrap();

        let mut buf = Vec::new();
        model.write_adapter(&LangId::new("aa"), &mut buf).unwrap();
        // wipe the stack, then load it back from the file
        model.store_mut().get_mut("adapter.aa.00.ffn.up.b").unwrap().data_mut()[2] = -1.0;
        let lang = model.load_adapter(&mut buf.as_slice()).unwrap();
        assert_eq!(lang, LangId::new("aa"));
        assert_eq!(model.adapter_fingerprint(&lang).unwrap(), fp);
    }
}
