//! A desk-scale laboratory for continual multilingual learning.
//!
//! The crate trains a small transformer tagger/classifier on a synthetic
//! multilingual benchmark, updates it in stages with single-language data
//! under four finetuning strategies (full finetuning, lottery-ticket sparse
//! finetuning, language adapters with a reduced base learning rate, and the
//! same with a typology-driven learning-rate divisor), and measures how
//! gains and losses spread across languages after each update.
//!
//! Layering, bottom to top:
//!
//! * [`tensor`] — f64 tensors, a fixed-primitive reverse-mode graph, and the
//!   named, group-tagged parameter store everything else mutates.
//! * [`model`] — the transformer encoder with per-language bottleneck
//!   adapters and task heads.
//! * [`optim`] — SGD/AdamW with per-group learning rates, trainability
//!   masks, and group freezing.
//! * [`uriel`] — syntactic vectors, cosine distances, and the linear
//!   division-factor function for the base-model learning rate.
//! * [`data`] — the synthetic benchmark generator (languages, corpora,
//!   stage partitions, multi-source batching).
//! * [`strategies`] — inception and continuation procedures for the four
//!   finetuning strategies, plus composable sparse updates.
//! * [`metrics`] — percent-change matrices and the comparison metrics.
//! * [`runner`] — config-driven experiments, trajectories, and artifact
//!   emission (heatmap CSV/SVG, reports, manifests).

pub mod data;
pub mod lang;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod runner;
pub mod strategies;
pub mod tensor;
pub mod uriel;

pub use lang::LangId;
