//! Shared training-phase machinery for the finetuning strategies.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Batch, Example, Labels, MultiSourceSampler, TaskKind};
use crate::lang::LangId;
use crate::model::{Model, Targets, TaskHead, TokenBatch};
use crate::optim::{MaskSet, OptimConfig, Optimizer};
use crate::tensor::{derive_seed, GroupKind};

use super::sparse::{ApplyMode, SparseUpdate};
use super::StrategyError;

/// Which adapter stack a phase activates.
#[derive(Clone, Debug)]
pub(crate) enum AdapterRule {
    None,
    Fixed(LangId),
}

/// One gradient-descent phase over multi-source batches.
pub(crate) struct Phase<'a> {
    pub head: TaskHead,
    pub data: BTreeMap<LangId, Vec<Example>>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub masks: MaskSet,
    pub frozen: BTreeSet<GroupKind>,
    pub adapter: AdapterRule,
    /// When set, the batch language's update matrix is applied before the
    /// forward pass and reverted before the optimizer step.
    pub lang_matrices: Option<&'a BTreeMap<LangId, SparseUpdate>>,
    /// Masked-token corruption rate; only read for `TaskHead::MaskedToken`.
    pub mask_rate: f64,
    pub mask_token: usize,
}

/// Converts one monolingual batch into model inputs for the given head.
pub(crate) fn batch_inputs(
    batch: &Batch,
    head: TaskHead,
    mask_rate: f64,
    mask_token: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(TokenBatch, Targets), StrategyError> {
    let rows: Vec<Vec<usize>> = batch.examples.iter().map(|e| e.tokens.clone()).collect();
    match head {
        TaskHead::TokenTag => {
            let mut tags = Vec::new();
            for ex in &batch.examples {
                match &ex.labels {
                    Labels::Tags(t) => tags.extend_from_slice(t),
                    Labels::Class(_) => {
                        return Err(StrategyError::Contract(
                            "token-tag phase over a sentence-class corpus".into(),
                        ))
                    }
                }
            }
            Ok((TokenBatch::from_rows(&rows)?, Targets::Tags(tags)))
        }
        TaskHead::SentenceClass => {
            let mut classes = Vec::new();
            for ex in &batch.examples {
                match &ex.labels {
                    Labels::Class(c) => classes.push(*c),
                    Labels::Tags(_) => {
                        return Err(StrategyError::Contract(
                            "sentence-class phase over a token-tag corpus".into(),
                        ))
                    }
                }
            }
            Ok((TokenBatch::from_rows(&rows)?, Targets::Class(classes)))
        }
        TaskHead::MaskedToken => {
            let mut masked_rows = rows;
            let seq_len = masked_rows[0].len();
            let n_mask = ((seq_len as f64 * mask_rate).round() as usize).clamp(1, seq_len);
            let mut targets = Vec::with_capacity(masked_rows.len() * seq_len);
            for row in &mut masked_rows {
                let mut positions: Vec<usize> = (0..seq_len).collect();
                for i in 0..n_mask {
                    let j = rng.random_range(i..seq_len);
                    positions.swap(i, j);
                }
                let chosen: BTreeSet<usize> = positions[..n_mask].iter().copied().collect();
                for (pos, tok) in row.iter_mut().enumerate() {
                    if chosen.contains(&pos) {
                        targets.push(Some(*tok));
                        *tok = mask_token;
                    } else {
                        targets.push(None);
                    }
                }
            }
            Ok((TokenBatch::from_rows(&masked_rows)?, Targets::Masked(targets)))
        }
    }
}

/// Runs `phase.epochs` of multi-source training, mutating the model store
/// in place. Deterministic given (model, phase, seed).
pub(crate) fn run_phase(model: &mut Model, phase: &Phase, seed: u64) -> Result<(), StrategyError> {
    let mut optimizer = Optimizer::new(phase.optim)?
        .with_masks(phase.masks.clone())
        .with_frozen(phase.frozen.iter().copied());
    let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "mlm-mask"));

    for epoch in 0..phase.epochs {
        let mut sampler = MultiSourceSampler::new(
            &phase.data,
            phase.batch_size,
            derive_seed(seed, &format!("epoch.{epoch}")),
        )?;
        while let Some(batch) = sampler.next_batch() {
            let matrix = match phase.lang_matrices {
                Some(matrices) => Some(matrices.get(&batch.lang).ok_or_else(|| {
                    StrategyError::Dependency(format!(
                        "no language update matrix for {}",
                        batch.lang
                    ))
                })?),
                None => None,
            };
            let adapter = match &phase.adapter {
                AdapterRule::None => None,
                AdapterRule::Fixed(lang) => Some(lang.clone()),
            };

            let (tokens, targets) =
                batch_inputs(&batch, phase.head, phase.mask_rate, phase.mask_token, &mut mask_rng)?;

            // LT-SFT: gradients are taken at (theta + phi); the update is
            // applied to theta, so the matrix is reverted before stepping
            let undo = match matrix {
                Some(m) => Some((m, m.apply(model.store_mut(), ApplyMode::Forced)?)),
                None => None,
            };
            let result = model
                .loss_graph(phase.head, &tokens, &targets, adapter.as_ref())
                .map_err(StrategyError::from)
                .and_then(|(graph, loss)| graph.backward(loss).map_err(StrategyError::from));
            let grads = match (result, undo) {
                (Ok(grads), Some((m, token))) => {
                    m.revert(model.store_mut(), token)?;
                    grads
                }
                (Ok(grads), None) => grads,
                (Err(e), Some((m, token))) => {
                    m.revert(model.store_mut(), token)?;
                    return Err(e);
                }
                (Err(e), None) => return Err(e),
            };
            optimizer.step(model.store_mut(), &grads)?;
        }
    }
    Ok(())
}

/// Groups examples into rectangular batches by token length, preserving
/// input order within a length group.
pub(crate) fn fixed_batches(data: &[Example], batch_size: usize) -> Vec<Batch> {
    let mut by_len: BTreeMap<usize, Vec<Example>> = BTreeMap::new();
    for e in data {
        by_len.entry(e.tokens.len()).or_default().push(e.clone());
    }
    let mut out = Vec::new();
    for (_, group) in by_len {
        let lang = group[0].lang.clone();
        for chunk in group.chunks(batch_size) {
            out.push(Batch { lang: lang.clone(), examples: chunk.to_vec() });
        }
    }
    out
}

/// Accuracy of the model on one language's examples, in percent.
pub(crate) fn accuracy_percent(
    model: &Model,
    task: TaskKind,
    data: &[Example],
    adapter: Option<&LangId>,
    batch_size: usize,
) -> Result<f64, StrategyError> {
    let head = head_for(task);
    let mut correct = 0usize;
    let mut total = 0usize;
    for batch in fixed_batches(data, batch_size) {
        let rows: Vec<Vec<usize>> = batch.examples.iter().map(|e| e.tokens.clone()).collect();
        let tokens = TokenBatch::from_rows(&rows)?;
        let logits = model.forward(head, &tokens, adapter)?;
        match task {
            TaskKind::TokenTag => {
                let n_tags = model.config().n_tags;
                let (b, l) = (tokens.batch, tokens.seq_len);
                for (row_idx, ex) in batch.examples.iter().enumerate() {
                    let Labels::Tags(tags) = &ex.labels else {
                        return Err(StrategyError::Contract("expected tag labels".into()));
                    };
                    for pos in 0..l {
                        let off = (row_idx * l + pos) * n_tags;
                        let pred = argmax(&logits.data()[off..off + n_tags]);
                        correct += usize::from(pred == tags[pos]);
                        total += 1;
                    }
                }
                debug_assert_eq!(b, batch.examples.len());
            }
            TaskKind::SentenceClass => {
                let n_classes = model.config().n_classes;
                for (row_idx, ex) in batch.examples.iter().enumerate() {
                    let Labels::Class(class) = &ex.labels else {
                        return Err(StrategyError::Contract("expected class labels".into()));
                    };
                    let off = row_idx * n_classes;
                    let pred = argmax(&logits.data()[off..off + n_classes]);
                    correct += usize::from(pred == *class);
                    total += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(StrategyError::Contract("empty evaluation set".into()));
    }
    Ok(100.0 * correct as f64 / total as f64)
}

pub(crate) fn head_for(task: TaskKind) -> TaskHead {
    match task {
        TaskKind::TokenTag => TaskHead::TokenTag,
        TaskKind::SentenceClass => TaskHead::SentenceClass,
    }
}

/// Lowest index of the maximal value (deterministic tie-break).
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, LanguageProfile, TaskSpec, WordOrderTransform};
    use crate::model::ModelConfig;

    fn tiny_model() -> Model {
        let mut cfg = ModelConfig::with_task(21, 5, 4);
        cfg.n_layers = 1;
        cfg.d_model = 16;
        cfg.n_heads = 2;
        cfg.d_ffn = 24;
        cfg.max_seq_len = 12;
        cfg.b_dim = 4;
        Model::build(cfg, 11).unwrap()
    }

    fn test_mean_loss(model: &Model, data: &[Example]) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in fixed_batches(data, 8) {
            let (tokens, targets) =
                batch_inputs(&batch, TaskHead::TokenTag, 0.0, 20, &mut rng).unwrap();
            let (graph, loss) =
                model.loss_graph(TaskHead::TokenTag, &tokens, &targets, None).unwrap();
            total += graph.value(loss).item();
            batches += 1;
        }
        total / batches as f64
    }

    fn tiny_corpus(n: usize) -> Vec<Example> {
        let profile = LanguageProfile {
            lang: LangId::new("xx"),
            family: 0,
            features: vec![0; 16],
            surface_map: (0..20).collect(),
            transform: WordOrderTransform::default(),
            resource_count: n,
        };
        let spec = TaskSpec { n_concept_classes: 4, n_tags: 5, seq_len: (4, 8) };
        generate_corpus(&profile, TaskKind::TokenTag, n, &spec, 3).unwrap().examples
    }

    #[test]
    fn masking_respects_rate_and_restores_targets() {
        let examples = tiny_corpus(6);
        let batches = fixed_batches(&examples, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for batch in batches {
            let len = batch.seq_len();
            let (tokens, targets) =
                batch_inputs(&batch, TaskHead::MaskedToken, 0.15, 20, &mut rng).unwrap();
            let Targets::Masked(masked) = targets else { panic!() };
            let expected = ((len as f64 * 0.15).round() as usize).clamp(1, len);
            for (row, ex) in batch.examples.iter().enumerate() {
                let mut seen = 0;
                for pos in 0..len {
                    match masked[row * len + pos] {
                        Some(orig) => {
                            seen += 1;
                            assert_eq!(orig, ex.tokens[pos]);
                            assert_eq!(tokens.ids[row * len + pos], 20);
                        }
                        None => assert_eq!(tokens.ids[row * len + pos], ex.tokens[pos]),
                    }
                }
                assert_eq!(seen, expected);
            }
        }
    }

    #[test]
    fn training_reduces_loss_on_fixed_data() {
        let mut model = tiny_model();
        let examples = tiny_corpus(48);
        let before = test_mean_loss(&model, &examples);
        let phase = Phase {
            head: TaskHead::TokenTag,
            data: [(LangId::new("xx"), examples.clone())].into_iter().collect(),
            epochs: 10,
            batch_size: 8,
            optim: OptimConfig::adamw(crate::optim::GroupLrs::uniform(3e-3)),
            masks: MaskSet::unmasked(),
            frozen: BTreeSet::new(),
            adapter: AdapterRule::None,
            lang_matrices: None,
            mask_rate: 0.0,
            mask_token: 20,
        };
        run_phase(&mut model, &phase, 5).unwrap();
        let after = test_mean_loss(&model, &examples);
        assert!(after < before, "loss {before} -> {after}");
    }

    #[test]
    fn run_phase_is_deterministic() {
        let run = || {
            let mut model = tiny_model();
            let phase = Phase {
                head: TaskHead::TokenTag,
                data: [(LangId::new("xx"), tiny_corpus(24))].into_iter().collect(),
                epochs: 2,
                batch_size: 8,
                optim: OptimConfig::adamw(crate::optim::GroupLrs::uniform(1e-3)),
                masks: MaskSet::unmasked(),
                frozen: BTreeSet::new(),
                adapter: AdapterRule::None,
                lang_matrices: None,
                mask_rate: 0.0,
                mask_token: 20,
            };
            run_phase(&mut model, &phase, 5).unwrap();
            model.store().fingerprint()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn accuracy_is_percent_scaled() {
        let model = tiny_model();
        let examples = tiny_corpus(16);
        let acc =
            accuracy_percent(&model, TaskKind::TokenTag, &examples, None, 8).unwrap();
        assert!((0.0..=100.0).contains(&acc));
    }
}
