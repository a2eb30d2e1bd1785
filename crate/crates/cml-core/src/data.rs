//! Synthetic multilingual benchmark generator.
//!
//! A "language" is a seeded surface realization of a shared concept-level
//! task: a family-structured binary feature vector, a bijective mapping
//! from concept ids to surface token ids, and a word-order transform keyed
//! to three designated feature bits. Labels are produced at the concept
//! level by a fixed rule and carried along through reordering and token
//! renaming, so any language's corpus decodes back to the same underlying
//! task.
//!
//! Similarity is controllable: members of one family flip each prototype
//! bit with probability `p_in`, prototypes flip a hidden global vector with
//! `p_out`, and the distance matrix is computed from the resulting vectors.
//! Since the transform bits are feature bits, closer languages also share
//! word order more often, which is exactly the structure the
//! similarity-driven learning-rate scheduling exploits.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lang::LangId;
use crate::tensor::derive_seed;
use crate::uriel::{DistanceMatrix, SyntacticVector, UrielError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid data config: {0}")]
    InvalidConfig(String),
    #[error("unknown language {0}")]
    UnknownLanguage(LangId),
    #[error("cannot split {size} examples into {stages} stages")]
    TooFewExamples { size: usize, stages: usize },
    #[error(transparent)]
    Uriel(#[from] UrielError),
    #[error("malformed corpus line {line}: {reason}")]
    MalformedCorpus { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which task labels a corpus carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    TokenTag,
    SentenceClass,
}

/// Word-order transform composed from three designated feature bits, in
/// fixed order: reverse, then adjacent swap, then rotate right by one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordOrderTransform {
    pub reverse: bool,
    pub adjacent_swap: bool,
    pub rotate: bool,
}

impl WordOrderTransform {
    /// The transform encoded by the first three bits of a feature vector.
    pub fn from_features(features: &[u8]) -> Self {
        WordOrderTransform {
            reverse: features.first().is_some_and(|&b| b != 0),
            adjacent_swap: features.get(1).is_some_and(|&b| b != 0),
            rotate: features.get(2).is_some_and(|&b| b != 0),
        }
    }

    pub fn apply<T: Clone>(&self, seq: &[T]) -> Vec<T> {
        let mut out: Vec<T> = seq.to_vec();
        if self.reverse {
            out.reverse();
        }
        if self.adjacent_swap {
            for pair in out.chunks_mut(2) {
                if pair.len() == 2 {
                    pair.swap(0, 1);
                }
            }
        }
        if self.rotate && out.len() > 1 {
            out.rotate_right(1);
        }
        out
    }

    pub fn invert<T: Clone>(&self, seq: &[T]) -> Vec<T> {
        let mut out: Vec<T> = seq.to_vec();
        if self.rotate && out.len() > 1 {
            out.rotate_left(1);
        }
        if self.adjacent_swap {
            for pair in out.chunks_mut(2) {
                if pair.len() == 2 {
                    pair.swap(0, 1);
                }
            }
        }
        if self.reverse {
            out.reverse();
        }
        out
    }
}

/// One synthetic language.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LanguageProfile {
    pub lang: LangId,
    pub family: usize,
    /// Binary syntactic features (0/1), fixed dimension across a set.
    pub features: Vec<u8>,
    /// Bijection concept id -> surface token id.
    pub surface_map: Vec<usize>,
    pub transform: WordOrderTransform,
    /// Training examples available for this language.
    pub resource_count: usize,
}

impl LanguageProfile {
    pub fn syntactic_vector(&self) -> SyntacticVector {
        SyntacticVector::new(
            self.lang.clone(),
            self.features.iter().map(|&b| b as f64).collect(),
        )
    }

    /// Inverse of the surface map (surface token id -> concept id).
    pub fn inverse_surface_map(&self) -> BTreeMap<usize, usize> {
        self.surface_map.iter().enumerate().map(|(c, &s)| (s, c)).collect()
    }
}

/// Controls for [`generate_language_set`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSetConfig {
    pub n_families: usize,
    pub langs_per_family: usize,
    pub feature_dim: usize,
    /// Per-bit flip probability of a member against its family prototype.
    pub p_in: f64,
    /// Per-bit flip probability of a prototype against the hidden global
    /// vector (controls inter-family distance).
    pub p_out: f64,
    pub concept_vocab: usize,
    /// Fraction of concepts mapped into the surface region shared by all
    /// languages.
    pub anchor_fraction: f64,
    /// Training examples for the highest-resource language.
    pub base_resource: usize,
    /// Per-language resource ratios in generation order; when empty, a
    /// linear 1.0 -> 0.25 skew is used.
    #[serde(default)]
    pub resource_ratios: Vec<f64>,
}

impl Default for LanguageSetConfig {
    fn default() -> Self {
        LanguageSetConfig {
            n_families: 2,
            langs_per_family: 3,
            feature_dim: 16,
            p_in: 0.05,
            p_out: 0.35,
            concept_vocab: 40,
            anchor_fraction: 0.2,
            base_resource: 400,
            resource_ratios: Vec::new(),
        }
    }
}

impl LanguageSetConfig {
    pub fn n_langs(&self) -> usize {
        self.n_families * self.langs_per_family
    }

    /// Surface vocabulary size implied by the config (anchors + one private
    /// block per language), excluding the mask token.
    pub fn surface_vocab(&self) -> usize {
        let anchors = self.n_anchors();
        anchors + self.n_langs() * (self.concept_vocab - anchors)
    }

    fn n_anchors(&self) -> usize {
        ((self.concept_vocab as f64) * self.anchor_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_families == 0 || self.langs_per_family == 0 {
            return Err(DataError::InvalidConfig("need at least one language".into()));
        }
        if self.feature_dim == 0 {
            return Err(DataError::InvalidConfig("feature dimension must be >= 1".into()));
        }
        for (name, p) in [("p_in", self.p_in), ("p_out", self.p_out)] {
            if !(0.0..=0.5).contains(&p) {
                return Err(DataError::InvalidConfig(format!("{name} must be in [0, 0.5], got {p}")));
            }
        }
        if !(0.0..=1.0).contains(&self.anchor_fraction) {
            return Err(DataError::InvalidConfig("anchor_fraction must be in [0, 1]".into()));
        }
        if self.concept_vocab < 2 || self.n_anchors() >= self.concept_vocab {
            return Err(DataError::InvalidConfig(
                "concept vocabulary too small for the anchor fraction".into(),
            ));
        }
        if !self.resource_ratios.is_empty() && self.resource_ratios.len() != self.n_langs() {
            return Err(DataError::InvalidConfig(format!(
                "expected {} resource ratios, got {}",
                self.n_langs(),
                self.resource_ratios.len()
            )));
        }
        Ok(())
    }

    fn ratio(&self, index: usize) -> f64 {
        if !self.resource_ratios.is_empty() {
            return self.resource_ratios[index];
        }
        let n = self.n_langs();
        if n == 1 {
            1.0
        } else {
            1.0 - 0.75 * index as f64 / (n - 1) as f64
        }
    }
}

/// Draws the language set: family prototypes, member vectors, surface maps,
/// transforms, resource counts, and the pairwise distance matrix.
pub fn generate_language_set(
    cfg: &LanguageSetConfig,
    seed: u64,
) -> Result<(Vec<LanguageProfile>, DistanceMatrix), DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "langset"));
    let global: Vec<u8> = (0..cfg.feature_dim).map(|_| rng.random_range(0..2u8)).collect();

    // anchors: which concepts map into the shared surface region
    let n_anchor = cfg.n_anchors();
    let mut concept_ids: Vec<usize> = (0..cfg.concept_vocab).collect();
    concept_ids.shuffle(&mut rng);
    let mut anchors: Vec<usize> = concept_ids[..n_anchor].to_vec();
    anchors.sort_unstable();
    let anchor_rank: BTreeMap<usize, usize> =
        anchors.iter().enumerate().map(|(r, &c)| (c, r)).collect();
    let privates: Vec<usize> =
        (0..cfg.concept_vocab).filter(|c| !anchor_rank.contains_key(c)).collect();
    let private_size = privates.len();

    let mut profiles = Vec::with_capacity(cfg.n_langs());
    for family in 0..cfg.n_families {
        let prototype: Vec<u8> =
            global.iter().map(|&b| if rng.random_bool(cfg.p_out) { 1 - b } else { b }).collect();
        for member in 0..cfg.langs_per_family {
            let lang = LangId::new(format!(
                "{}{}",
                (b'a' + (family % 26) as u8) as char,
                member
            ));
            let mut features: Vec<u8> = prototype
                .iter()
                .map(|&b| if rng.random_bool(cfg.p_in) { 1 - b } else { b })
                .collect();
            if features.iter().all(|&b| b == 0) {
                // cosine distance needs a non-zero norm
                *features.last_mut().expect("feature_dim >= 1") = 1;
            }

            let index = profiles.len();
            let mut perm: Vec<usize> = (0..private_size).collect();
            let mut lang_rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("surface.{lang}")));
            perm.shuffle(&mut lang_rng);
            let block_base = n_anchor + index * private_size;
            let mut surface_map = vec![0usize; cfg.concept_vocab];
            let mut private_iter = perm.into_iter();
            for c in 0..cfg.concept_vocab {
                surface_map[c] = match anchor_rank.get(&c) {
                    Some(&rank) => rank,
                    None => block_base + private_iter.next().expect("permutation covers privates"),
                };
            }

            let resource_count =
                (cfg.base_resource as f64 * cfg.ratio(index)).round().max(1.0) as usize;
            profiles.push(LanguageProfile {
                lang,
                family,
                transform: WordOrderTransform::from_features(&features),
                features,
                surface_map,
                resource_count,
            });
        }
    }

    let vectors: Vec<SyntacticVector> = profiles.iter().map(|p| p.syntactic_vector()).collect();
    let distances = DistanceMatrix::from_vectors(&vectors)?;
    Ok((profiles, distances))
}

/// Gold labels for one example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    Tags(Vec<usize>),
    Class(usize),
}

/// One surface-realized example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub lang: LangId,
    pub tokens: Vec<usize>,
    pub labels: Labels,
}

/// A labeled corpus for one language and task.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub lang: LangId,
    pub task: TaskKind,
    pub examples: Vec<Example>,
}

/// Concept-level tag rule: a function of the concept class, position
/// parity, and the left neighbor's class (with a sentinel at position 0).
pub fn concept_tags(concepts: &[usize], n_concept_classes: usize, n_tags: usize) -> Vec<usize> {
    concepts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let class = c % n_concept_classes;
            let left = if i == 0 { n_concept_classes } else { concepts[i - 1] % n_concept_classes };
            (2 * class + (i % 2) + left) % n_tags
        })
        .collect()
}

/// Majority concept class, ties broken by the smallest class id.
pub fn majority_class(concepts: &[usize], n_concept_classes: usize) -> usize {
    let mut counts = vec![0usize; n_concept_classes];
    for &c in concepts {
        counts[c % n_concept_classes] += 1;
    }
    counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(class, _)| class)
        .unwrap_or(0)
}

/// Sizing knobs shared by every corpus of a benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n_concept_classes: usize,
    pub n_tags: usize,
    pub seq_len: (usize, usize),
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_concept_classes == 0 || self.n_tags == 0 {
            return Err(DataError::InvalidConfig("class and tag counts must be >= 1".into()));
        }
        let (lo, hi) = self.seq_len;
        if lo == 0 || hi < lo {
            return Err(DataError::InvalidConfig(format!("bad sequence length range {lo}..={hi}")));
        }
        Ok(())
    }
}

/// Generates `n_examples` for one language: concept sequences are drawn,
/// labeled by the concept-level rule, reordered by the language's word-order
/// transform (labels riding along), and renamed through its surface map.
pub fn generate_corpus(
    profile: &LanguageProfile,
    task: TaskKind,
    n_examples: usize,
    spec: &TaskSpec,
    seed: u64,
) -> Result<Corpus, DataError> {
    spec.validate()?;
    if n_examples == 0 {
        return Err(DataError::InvalidConfig("n_examples must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("corpus.{}", profile.lang)));
    let vocab = profile.surface_map.len();
    let (lo, hi) = spec.seq_len;
    let mut examples = Vec::with_capacity(n_examples);
    for _ in 0..n_examples {
        let len = rng.random_range(lo..=hi);
        let concepts: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
        let tags = concept_tags(&concepts, spec.n_concept_classes, spec.n_tags);

        // transform moves (token, tag) pairs together; surfaces rename after
        let paired: Vec<(usize, usize)> = concepts.into_iter().zip(tags).collect();
        let reordered = profile.transform.apply(&paired);
        let tokens: Vec<usize> = reordered.iter().map(|(c, _)| profile.surface_map[*c]).collect();
        let labels = match task {
            TaskKind::TokenTag => Labels::Tags(reordered.iter().map(|(_, t)| *t).collect()),
            TaskKind::SentenceClass => {
                let concepts: Vec<usize> = reordered.iter().map(|(c, _)| *c).collect();
                Labels::Class(majority_class(&concepts, spec.n_concept_classes))
            }
        };
        examples.push(Example { lang: profile.lang.clone(), tokens, labels });
    }
    Ok(Corpus { lang: profile.lang.clone(), task, examples })
}

/// Recomputes an example's labels through the inverse surface map and
/// inverse transform; true when they match the stored labels.
pub fn verify_example(profile: &LanguageProfile, example: &Example, spec: &TaskSpec) -> bool {
    let inverse = profile.inverse_surface_map();
    let surface_concepts: Option<Vec<usize>> =
        example.tokens.iter().map(|t| inverse.get(t).copied()).collect();
    let Some(surface_concepts) = surface_concepts else {
        return false;
    };
    let concepts = profile.transform.invert(&surface_concepts);
    let tags = concept_tags(&concepts, spec.n_concept_classes, spec.n_tags);
    match &example.labels {
        Labels::Tags(stored) => {
            let expected: Vec<usize> = {
                let paired: Vec<(usize, usize)> = concepts.iter().copied().zip(tags).collect();
                profile.transform.apply(&paired).iter().map(|(_, t)| *t).collect()
            };
            *stored == expected
        }
        Labels::Class(stored) => *stored == majority_class(&concepts, spec.n_concept_classes),
    }
}

/// Splits a corpus into `stages` disjoint shards of near-equal size (within
/// one example) after a seeded shuffle.
pub fn partition_stages(
    examples: &[Example],
    stages: usize,
    seed: u64,
) -> Result<Vec<Vec<Example>>, DataError> {
    if stages == 0 || examples.len() < stages {
        return Err(DataError::TooFewExamples { size: examples.len(), stages });
    }
    let mut shuffled: Vec<Example> = examples.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "stage-partition"));
    shuffled.shuffle(&mut rng);
    let base = shuffled.len() / stages;
    let extra = shuffled.len() % stages;
    let mut shards = Vec::with_capacity(stages);
    let mut it = shuffled.into_iter();
    for s in 0..stages {
        let take = base + usize::from(s < extra);
        shards.push(it.by_ref().take(take).collect());
    }
    Ok(shards)
}

/// One monolingual batch of equal-length examples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub lang: LangId,
    pub examples: Vec<Example>,
}

impl Batch {
    pub fn seq_len(&self) -> usize {
        self.examples.first().map_or(0, |e| e.tokens.len())
    }
}

/// Uniform multi-source sampler: each draw picks a non-exhausted language
/// uniformly at random and yields one monolingual batch from it. Within a
/// language, examples are shuffled per epoch and grouped by length so a
/// batch is always rectangular.
pub struct MultiSourceSampler {
    queues: Vec<(LangId, std::collections::VecDeque<Batch>)>,
    rng: ChaCha8Rng,
}

impl MultiSourceSampler {
    pub fn new(
        shards: &BTreeMap<LangId, Vec<Example>>,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self, DataError> {
        if batch_size == 0 {
            return Err(DataError::InvalidConfig("batch_size must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "multisource"));
        let mut queues = Vec::new();
        for (lang, examples) in shards {
            if examples.is_empty() {
                continue;
            }
            let mut shuffled = examples.clone();
            shuffled.shuffle(&mut rng);
            shuffled.sort_by_key(|e| e.tokens.len());
            let mut queue = std::collections::VecDeque::new();
            let mut current: Vec<Example> = Vec::new();
            for ex in shuffled {
                let same_len = current.first().is_none_or(|c| c.tokens.len() == ex.tokens.len());
                if !same_len || current.len() == batch_size {
                    queue.push_back(Batch { lang: lang.clone(), examples: std::mem::take(&mut current) });
                }
                current.push(ex);
            }
            if !current.is_empty() {
                queue.push_back(Batch { lang: lang.clone(), examples: current });
            }
            queues.push((lang.clone(), queue));
        }
        Ok(MultiSourceSampler { queues, rng })
    }

    /// The next monolingual batch, or `None` once every language is
    /// exhausted (end of epoch).
    pub fn next_batch(&mut self) -> Option<Batch> {
        let live: Vec<usize> = self
            .queues
            .iter()
            .enumerate()
            .filter(|(_, (_, q))| !q.is_empty())
            .map(|(i, _)| i)
            .collect();
        if live.is_empty() {
            return None;
        }
        let pick = live[self.rng.random_range(0..live.len())];
        self.queues[pick].1.pop_front()
    }
}

/// Everything one experiment run needs: profiles, distances, per-language
/// stage shards, and fixed dev/test sets shared by every stage.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub profiles: Vec<LanguageProfile>,
    pub distances: DistanceMatrix,
    pub task: TaskKind,
    pub spec: TaskSpec,
    /// Per language: shard 0 is inception data, shards 1.. are continuation
    /// stage data.
    pub shards: BTreeMap<LangId, Vec<Vec<Example>>>,
    pub dev: BTreeMap<LangId, Vec<Example>>,
    pub test: BTreeMap<LangId, Vec<Example>>,
    /// Surface vocabulary size (the mask token sits directly above it).
    pub surface_vocab: usize,
}

/// Benchmark-level configuration (language set plus corpus sizing).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub langset: LanguageSetConfig,
    pub task: TaskKind,
    /// Total shards per language: 1 inception + (n_stages - 1) continuation.
    pub n_stages: usize,
    pub n_concept_classes: usize,
    pub n_tags: usize,
    pub seq_len: (usize, usize),
    pub dev_per_lang: usize,
    pub test_per_lang: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            langset: LanguageSetConfig::default(),
            task: TaskKind::TokenTag,
            n_stages: 2,
            n_concept_classes: 4,
            n_tags: 5,
            seq_len: (5, 10),
            dev_per_lang: 48,
            test_per_lang: 64,
        }
    }
}

impl BenchmarkConfig {
    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            n_concept_classes: self.n_concept_classes,
            n_tags: self.n_tags,
            seq_len: self.seq_len,
        }
    }
}

impl Benchmark {
    pub fn build(cfg: &BenchmarkConfig, seed: u64) -> Result<Benchmark, DataError> {
        let spec = cfg.task_spec();
        spec.validate()?;
        if cfg.n_stages == 0 {
            return Err(DataError::InvalidConfig("n_stages must be >= 1".into()));
        }
        if cfg.dev_per_lang == 0 || cfg.test_per_lang == 0 {
            return Err(DataError::InvalidConfig("dev/test sizes must be >= 1".into()));
        }
        let (profiles, distances) = generate_language_set(&cfg.langset, seed)?;

        let mut shards = BTreeMap::new();
        let mut dev = BTreeMap::new();
        let mut test = BTreeMap::new();
        for profile in &profiles {
            let train = generate_corpus(
                profile,
                cfg.task,
                profile.resource_count,
                &spec,
                derive_seed(seed, "train"),
            )?;
            shards.insert(
                profile.lang.clone(),
                partition_stages(&train.examples, cfg.n_stages, derive_seed(seed, &format!("shards.{}", profile.lang)))?,
            );
            dev.insert(
                profile.lang.clone(),
                generate_corpus(profile, cfg.task, cfg.dev_per_lang, &spec, derive_seed(seed, "dev"))?
                    .examples,
            );
            test.insert(
                profile.lang.clone(),
                generate_corpus(profile, cfg.task, cfg.test_per_lang, &spec, derive_seed(seed, "test"))?
                    .examples,
            );
        }
        Ok(Benchmark {
            profiles,
            distances,
            task: cfg.task,
            spec,
            shards,
            dev,
            test,
            surface_vocab: cfg.langset.surface_vocab(),
        })
    }

    pub fn langs(&self) -> Vec<LangId> {
        self.profiles.iter().map(|p| p.lang.clone()).collect()
    }

    pub fn profile(&self, lang: &LangId) -> Result<&LanguageProfile, DataError> {
        self.profiles
            .iter()
            .find(|p| &p.lang == lang)
            .ok_or_else(|| DataError::UnknownLanguage(lang.clone()))
    }

    /// Token id used for masked-token pretraining.
    pub fn mask_token(&self) -> usize {
        self.surface_vocab
    }

    /// Embedding-table size required by a model over this benchmark
    /// (surface vocabulary plus the mask token).
    pub fn model_vocab(&self) -> usize {
        self.surface_vocab + 1
    }

    pub fn inception_shard(&self, lang: &LangId) -> Result<&[Example], DataError> {
        self.stage_shard(lang, 0)
    }

    pub fn stage_shard(&self, lang: &LangId, stage: usize) -> Result<&[Example], DataError> {
        let shards =
            self.shards.get(lang).ok_or_else(|| DataError::UnknownLanguage(lang.clone()))?;
        shards.get(stage).map(|v| v.as_slice()).ok_or_else(|| {
            DataError::InvalidConfig(format!("stage {stage} out of range ({} shards)", shards.len()))
        })
    }

    /// All inception shards keyed by language.
    pub fn inception_data(&self) -> BTreeMap<LangId, Vec<Example>> {
        self.shards.iter().map(|(l, s)| (l.clone(), s[0].clone())).collect()
    }
}

/// Writes the line format `lang<TAB>tokens(space-sep)<TAB>labels(space-sep)`.
pub fn write_corpus(examples: &[Example], w: &mut impl Write) -> Result<(), DataError> {
    for ex in examples {
        let tokens: Vec<String> = ex.tokens.iter().map(|t| t.to_string()).collect();
        let labels = match &ex.labels {
            Labels::Tags(tags) => {
                tags.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
            }
            Labels::Class(c) => c.to_string(),
        };
        writeln!(w, "{}\t{}\t{}", ex.lang, tokens.join(" "), labels)?;
    }
    Ok(())
}

/// Reads the corpus line format back; `task` decides how labels parse.
pub fn read_corpus(r: &mut impl BufRead, task: TaskKind) -> Result<Vec<Example>, DataError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(DataError::MalformedCorpus {
                line: i + 1,
                reason: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let parse_list = |s: &str| -> Result<Vec<usize>, DataError> {
            s.split_whitespace()
                .map(|t| {
                    t.parse::<usize>().map_err(|e| DataError::MalformedCorpus {
                        line: i + 1,
                        reason: format!("bad id {t:?}: {e}"),
                    })
                })
                .collect()
        };
        let tokens = parse_list(fields[1])?;
        let labels = match task {
            TaskKind::TokenTag => {
                let tags = parse_list(fields[2])?;
                if tags.len() != tokens.len() {
                    return Err(DataError::MalformedCorpus {
                        line: i + 1,
                        reason: format!("{} tokens but {} tags", tokens.len(), tags.len()),
                    });
                }
                Labels::Tags(tags)
            }
            TaskKind::SentenceClass => Labels::Class(
                fields[2].trim().parse().map_err(|e| DataError::MalformedCorpus {
                    line: i + 1,
                    reason: format!("bad class: {e}"),
                })?,
            ),
        };
        out.push(Example { lang: LangId::new(fields[0]), tokens, labels });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> TaskSpec {
        TaskSpec { n_concept_classes: 4, n_tags: 5, seq_len: (5, 9) }
    }

    fn identity_profile(vocab: usize) -> LanguageProfile {
        LanguageProfile {
            lang: LangId::new("id"),
            family: 0,
            features: vec![0; 16],
            surface_map: (0..vocab).collect(),
            transform: WordOrderTransform::default(),
            resource_count: 100,
        }
    }

    #[test]
    fn transforms_invert_exactly() {
        let cases = [
            WordOrderTransform { reverse: true, adjacent_swap: false, rotate: false },
            WordOrderTransform { reverse: false, adjacent_swap: true, rotate: true },
            WordOrderTransform { reverse: true, adjacent_swap: true, rotate: true },
        ];
        for t in cases {
            for len in 1..8 {
                let seq: Vec<usize> = (0..len).collect();
                assert_eq!(t.invert(&t.apply(&seq)), seq, "{t:?} len {len}");
            }
        }
    }

    #[test]
    fn zero_p_in_collapses_intra_family_distance() {
        let cfg = LanguageSetConfig { p_in: 0.0, ..Default::default() };
        let (profiles, distances) = generate_language_set(&cfg, 7).unwrap();
        for a in &profiles {
            for b in &profiles {
                if a.family == b.family {
                    assert_eq!(
                        distances.get(&a.lang, &b.lang).unwrap(),
                        0.0,
                        "{} vs {}",
                        a.lang,
                        b.lang
                    );
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = LanguageSetConfig::default();
        let (p1, d1) = generate_language_set(&cfg, 42).unwrap();
        let (p2, d2) = generate_language_set(&cfg, 42).unwrap();
        assert_eq!(d1, d2);
        for (a, b) in p1.iter().zip(&p2) {
            assert_eq!(a.features, b.features);
            assert_eq!(a.surface_map, b.surface_map);
        }
        let (p3, _) = generate_language_set(&cfg, 43).unwrap();
        assert_ne!(p1[0].surface_map, p3[0].surface_map);
    }

    #[test]
    fn intra_family_distance_below_inter_family() {
        let cfg = LanguageSetConfig::default();
        let mut holds = 0;
        for seed in 0..100 {
            let (profiles, distances) = generate_language_set(&cfg, seed).unwrap();
            let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
            for i in 0..profiles.len() {
                for j in (i + 1)..profiles.len() {
                    let d = distances.get(&profiles[i].lang, &profiles[j].lang).unwrap();
                    if profiles[i].family == profiles[j].family {
                        intra = (intra.0 + d, intra.1 + 1);
                    } else {
                        inter = (inter.0 + d, inter.1 + 1);
                    }
                }
            }
            if intra.0 / (intra.1 as f64) < inter.0 / (inter.1 as f64) {
                holds += 1;
            }
        }
        assert!(holds >= 95, "intra < inter in only {holds}/100 draws");
    }

    #[test]
    fn same_family_shares_transforms_more_often() {
        let cfg = LanguageSetConfig::default();
        let mut holds = 0;
        for seed in 0..100 {
            let (profiles, _) = generate_language_set(&cfg, seed).unwrap();
            let (mut intra, mut inter) = ((0usize, 0usize), (0usize, 0usize));
            for i in 0..profiles.len() {
                for j in (i + 1)..profiles.len() {
                    let same = profiles[i].transform == profiles[j].transform;
                    if profiles[i].family == profiles[j].family {
                        intra = (intra.0 + usize::from(same), intra.1 + 1);
                    } else {
                        inter = (inter.0 + usize::from(same), inter.1 + 1);
                    }
                }
            }
            if intra.0 * inter.1 > inter.0 * intra.1 {
                holds += 1;
            }
        }
        assert!(holds >= 80, "transform sharing favored same family in only {holds}/100 draws");
    }

    #[test]
    fn surface_maps_are_bijective_with_shared_anchors() {
        let cfg = LanguageSetConfig::default();
        let (profiles, _) = generate_language_set(&cfg, 11).unwrap();
        let n_anchor = ((cfg.concept_vocab as f64) * cfg.anchor_fraction).round() as usize;
        for p in &profiles {
            let mut seen: Vec<usize> = p.surface_map.clone();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), cfg.concept_vocab, "{} map not injective", p.lang);
            assert!(p.surface_map.iter().all(|&s| s < cfg.surface_vocab()));
            let anchored = p.surface_map.iter().filter(|&&s| s < n_anchor).count();
            assert_eq!(anchored, n_anchor);
        }
        // anchor concepts map identically everywhere
        for c in 0..cfg.concept_vocab {
            let s0 = profiles[0].surface_map[c];
            if s0 < n_anchor {
                assert!(profiles.iter().all(|p| p.surface_map[c] == s0));
            }
        }
    }

    #[test]
    fn identity_language_keeps_concept_sequences() {
        let profile = identity_profile(20);
        let corpus = generate_corpus(&profile, TaskKind::TokenTag, 20, &spec(), 3).unwrap();
        for ex in &corpus.examples {
            let tags = concept_tags(&ex.tokens, 4, 5);
            assert_eq!(ex.labels, Labels::Tags(tags));
        }
    }

    #[test]
    fn labels_survive_surface_and_reordering() {
        let cfg = LanguageSetConfig::default();
        let (profiles, _) = generate_language_set(&cfg, 23).unwrap();
        for profile in &profiles {
            for task in [TaskKind::TokenTag, TaskKind::SentenceClass] {
                let corpus = generate_corpus(profile, task, 30, &spec(), 5).unwrap();
                for ex in &corpus.examples {
                    assert!(verify_example(profile, ex, &spec()), "{}: {ex:?}", profile.lang);
                }
            }
        }
    }

    #[test]
    fn tag_multisets_are_surface_invariant() {
        let cfg = LanguageSetConfig::default();
        let (profiles, _) = generate_language_set(&cfg, 29).unwrap();
        // same corpus seed, two different languages: same concept draws
        let a = generate_corpus(&profiles[0], TaskKind::TokenTag, 10, &spec(), 5).unwrap();
        let mut profile_b = profiles[3].clone();
        profile_b.lang = profiles[0].lang.clone(); // align the corpus rng stream
        let b = generate_corpus(&profile_b, TaskKind::TokenTag, 10, &spec(), 5).unwrap();
        for (ea, eb) in a.examples.iter().zip(&b.examples) {
            let (Labels::Tags(ta), Labels::Tags(tb)) = (&ea.labels, &eb.labels) else {
                panic!("token task");
            };
            let mut ta = ta.clone();
            let mut tb = tb.clone();
            ta.sort_unstable();
            tb.sort_unstable();
            assert_eq!(ta, tb);
        }
    }

    #[test]
    fn partition_sizes_and_disjointness() {
        let profile = identity_profile(20);
        let corpus = generate_corpus(&profile, TaskKind::TokenTag, 100, &spec(), 3).unwrap();
        let shards = partition_stages(&corpus.examples, 2, 9).unwrap();
        assert_eq!(shards[0].len(), 50);
        assert_eq!(shards[1].len(), 50);

        let shards = partition_stages(&corpus.examples, 3, 9).unwrap();
        let sizes: Vec<usize> = shards.iter().map(|s| s.len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 100);
        assert!(sizes.iter().all(|&s| s == 33 || s == 34));

        let single = partition_stages(&corpus.examples, 1, 9).unwrap();
        assert_eq!(single[0].len(), 100);

        assert!(matches!(
            partition_stages(&corpus.examples[..2], 3, 9),
            Err(DataError::TooFewExamples { .. })
        ));
    }

    #[test]
    fn partition_varies_with_seed() {
        let profile = identity_profile(20);
        let corpus = generate_corpus(&profile, TaskKind::TokenTag, 60, &spec(), 3).unwrap();
        let reference = partition_stages(&corpus.examples, 2, 0).unwrap();
        let mut distinct = 0;
        for seed in 1..=10 {
            let shards = partition_stages(&corpus.examples, 2, seed).unwrap();
            if shards[0] != reference[0] {
                distinct += 1;
            }
        }
        assert!(distinct >= 9, "only {distinct}/10 seeds moved the shard assignment");
    }

    #[test]
    fn multisource_batches_are_monolingual_and_uniform() {
        // three equal languages, batch size 1: language draw counts should
        // sit within 3 sigma of uniform
        let n_per_lang = 10_000;
        let profile = identity_profile(20);
        let mut shards = BTreeMap::new();
        for lang in ["aa", "bb", "cc"] {
            let mut p = profile.clone();
            p.lang = LangId::new(lang);
            let corpus = generate_corpus(&p, TaskKind::TokenTag, n_per_lang, &spec(), 5).unwrap();
            shards.insert(p.lang.clone(), corpus.examples);
        }
        let mut sampler = MultiSourceSampler::new(&shards, 1, 77).unwrap();
        let mut counts: BTreeMap<LangId, usize> = BTreeMap::new();
        let draws = 3 * n_per_lang / 2; // far from exhausting any language
        for _ in 0..draws {
            let batch = sampler.next_batch().expect("languages not exhausted");
            assert_eq!(batch.examples.len(), 1);
            assert!(batch.examples.iter().all(|e| e.lang == batch.lang));
            *counts.entry(batch.lang).or_default() += 1;
        }
        let p = 1.0 / 3.0;
        let sigma = ((draws as f64) * p * (1.0 - p)).sqrt();
        for (lang, count) in counts {
            let dev = (count as f64 - draws as f64 * p).abs();
            assert!(dev <= 3.0 * sigma, "{lang}: count {count} deviates {dev:.1} > 3 sigma");
        }
    }

    #[test]
    fn single_language_sampler_drains_everything() {
        let profile = identity_profile(20);
        let corpus = generate_corpus(&profile, TaskKind::TokenTag, 23, &spec(), 5).unwrap();
        let mut shards = BTreeMap::new();
        shards.insert(profile.lang.clone(), corpus.examples);
        let mut sampler = MultiSourceSampler::new(&shards, 4, 1).unwrap();
        let mut total = 0;
        while let Some(batch) = sampler.next_batch() {
            assert_eq!(batch.lang, profile.lang);
            assert!(batch.examples.len() <= 4);
            let len = batch.seq_len();
            assert!(batch.examples.iter().all(|e| e.tokens.len() == len));
            total += batch.examples.len();
        }
        assert_eq!(total, 23);
    }

    #[test]
    fn benchmark_build_is_deterministic_and_complete() {
        let cfg = BenchmarkConfig {
            langset: LanguageSetConfig { base_resource: 60, ..Default::default() },
            dev_per_lang: 8,
            test_per_lang: 8,
            ..Default::default()
        };
        let b1 = Benchmark::build(&cfg, 5).unwrap();
        let b2 = Benchmark::build(&cfg, 5).unwrap();
        assert_eq!(b1.langs(), b2.langs());
        assert_eq!(b1.shards, b2.shards);
        assert_eq!(b1.test, b2.test);
        assert_eq!(b1.langs().len(), 6);
        for lang in b1.langs() {
            assert_eq!(b1.shards[&lang].len(), 2);
            assert!(b1.test[&lang].iter().all(|e| e.tokens.iter().all(|&t| t < b1.surface_vocab)));
        }
        // resource skew: generation order is high to low resource
        let counts: Vec<usize> = b1.profiles.iter().map(|p| p.resource_count).collect();
        assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");
    }

    #[test]
    fn corpus_file_roundtrip() {
        let cfg = LanguageSetConfig::default();
        let (profiles, _) = generate_language_set(&cfg, 31).unwrap();
        for task in [TaskKind::TokenTag, TaskKind::SentenceClass] {
            let corpus = generate_corpus(&profiles[2], task, 12, &spec(), 8).unwrap();
            let mut buf = Vec::new();
            write_corpus(&corpus.examples, &mut buf).unwrap();
            let back = read_corpus(&mut buf.as_slice(), task).unwrap();
            assert_eq!(back, corpus.examples);
        }
    }

    #[test]
    fn invalid_probability_rejected() {
        let cfg = LanguageSetConfig { p_out: 0.6, ..Default::default() };
        assert!(matches!(generate_language_set(&cfg, 1), Err(DataError::InvalidConfig(_))));
        let cfg = LanguageSetConfig { feature_dim: 0, ..Default::default() };
        assert!(matches!(generate_language_set(&cfg, 1), Err(DataError::InvalidConfig(_))));
    }
}
