//! Config-driven experiment orchestration.
//!
//! One experiment run is: build the benchmark for a seed, run inception,
//! branch one continuation arm per language from the deployed model,
//! evaluate before/after on the fixed test set, assemble the change matrix
//! and metrics, then aggregate across seeds. Trajectories instead run the
//! continuation stages sequentially on one evolving model and report the
//! worst-case stage.
//!
//! Arms are embarrassingly parallel; `CML_THREADS` caps how many run
//! concurrently (each owns a private deep copy of the deployed model).
//! Everything except wall-clock timings is a pure function of
//! (config, seed), so repeated runs emit byte-identical artifacts.

mod artifacts;

pub use artifacts::{
    emit_benchmark, emit_experiment_artifacts, emit_trajectory_artifacts, render_heatmap_svg,
    write_atomic, write_manifest, ArtifactFormat,
};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Benchmark, BenchmarkConfig, DataError, LanguageSetConfig, TaskKind};
use crate::lang::LangId;
use crate::metrics::{
    build_change_matrix, ChangeMatrix, MetricsError, MetricsReport, PerfRecord, RowMetrics,
};
use crate::model::{ModelConfig, ModelError};
use crate::strategies::{
    pretrain_language_matrices, run_continuation, run_inception, ContinuationPlan, DeployedModel,
    StrategyError, StrategyHyper, StrategyKind,
};
use crate::tensor::{derive_seed, Fingerprinter};
use crate::uriel::DivisionFactorFn;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Uriel(#[from] crate::uriel::UrielError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> RunnerError {
    let path = path.into();
    move |source| RunnerError::Io { path, source }
}

/// Architecture knobs; task sizing (vocabulary, tags, classes) comes from
/// the benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    pub b_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig { n_layers: 2, d_model: 64, n_heads: 4, d_ffn: 128, max_seq_len: 32, b_dim: 16 }
    }
}

impl ArchConfig {
    pub fn model_config(&self, bench: &Benchmark) -> ModelConfig {
        let mut cfg = ModelConfig::with_task(
            bench.model_vocab(),
            bench.spec.n_tags,
            bench.spec.n_concept_classes,
        );
        cfg.n_layers = self.n_layers;
        cfg.d_model = self.d_model;
        cfg.n_heads = self.n_heads;
        cfg.d_ffn = self.d_ffn;
        cfg.max_seq_len = self.max_seq_len;
        cfg.b_dim = self.b_dim;
        cfg
    }
}

/// Order of a sequential multi-stage run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryOrder {
    H2l,
    L2h,
    Explicit(Vec<LangId>),
}

/// A full experiment description; loadable from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub strategy: StrategyKind,
    pub benchmark: BenchmarkConfig,
    #[serde(default)]
    pub model: ArchConfig,
    #[serde(default)]
    pub hyper: StrategyHyper,
    /// Division-factor function for LAFT-URIEL; defaults to the
    /// published-table fit.
    #[serde(default)]
    pub division: DivisionFactorFn,
    #[serde(default)]
    pub trajectory: Option<TrajectoryOrder>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, RunnerError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| RunnerError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        if self.seeds.is_empty() {
            return Err(RunnerError::Config("seeds must be non-empty".into()));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(RunnerError::Config(format!("bad experiment name {:?}", self.name)));
        }
        if let Some(TrajectoryOrder::Explicit(order)) = &self.trajectory {
            let mut sorted: Vec<&LangId> = order.iter().collect();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != order.len() {
                return Err(RunnerError::Config("explicit trajectory repeats a language".into()));
            }
        }
        self.hyper.validate()?;
        Ok(())
    }

    /// Stable hex hash of the resolved config.
    pub fn config_hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h = Fingerprinter::new();
        h.write_str(&text);
        format!("{:016x}", h.finish())
    }

    /// The frozen reference experiment: 6 synthetic languages in 2
    /// families, token tagging, 3 seeds, 1 inception + 1 continuation
    /// shard.
    pub fn reference(strategy: StrategyKind) -> Self {
        ExperimentConfig {
            name: format!("reference-{}", strategy.as_str()),
            seeds: vec![2, 3, 8],
            strategy,
            benchmark: BenchmarkConfig {
                langset: LanguageSetConfig {
                    n_families: 2,
                    langs_per_family: 3,
                    feature_dim: 16,
                    p_in: 0.05,
                    p_out: 0.35,
                    concept_vocab: 32,
                    anchor_fraction: 0.2,
                    base_resource: 520,
                    resource_ratios: vec![1.0, 0.85, 0.7, 0.55, 0.45, 0.35],
                },
                task: TaskKind::TokenTag,
                n_stages: 2,
                n_concept_classes: 4,
                n_tags: 5,
                seq_len: (5, 7),
                dev_per_lang: 48,
                test_per_lang: 80,
            },
            model: ArchConfig::default(),
            hyper: StrategyHyper {
                inception_lr: 3e-3,
                inception_epochs: 18,
                continuation_lr: 3e-3,
                continuation_epochs: 10,
                adapter_joint_epochs: 5,
                adapter_lang_epochs: 4,
                ..StrategyHyper::default()
            },
            // synthetic distances sit lower than the published URIEL range,
            // so the reference run uses coefficients fitted to it
            division: DivisionFactorFn {
                slope: 200.0,
                intercept: -30.0,
                step: 5.0,
                min_factor: 10.0,
            },
            trajectory: None,
        }
    }
}

/// Per-arm completion record for the manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArmRecord {
    pub seed: u64,
    /// `None` marks the inception arm.
    pub lang: Option<LangId>,
    pub status: String,
    pub seconds: f64,
}

impl ArmRecord {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// What one run produced and where it put it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub config_hash: String,
    pub strategy: String,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmRecord>,
    pub artifacts: Vec<PathBuf>,
    pub total_seconds: f64,
    pub success: bool,
}

/// All numeric results for one seed of the fan-out experiment.
#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub before: PerfRecord,
    pub after: BTreeMap<LangId, PerfRecord>,
    pub matrix: ChangeMatrix,
    pub report: MetricsReport,
}

/// Seed outcomes plus cross-seed aggregates.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub per_seed: Vec<SeedOutcome>,
    pub averaged_report: MetricsReport,
    pub averaged_matrix: ChangeMatrix,
}

/// Outcome (when every arm succeeded) plus the manifest either way.
#[derive(Debug)]
pub struct RunResult {
    pub outcome: Option<ExperimentOutcome>,
    pub manifest: RunManifest,
}

fn thread_cap() -> usize {
    std::env::var("CML_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Builds the deployed model for one (config, seed) pair, including SFT
/// language-matrix pretraining when the strategy needs it.
pub fn build_deployed(
    cfg: &ExperimentConfig,
    bench: &Benchmark,
    seed: u64,
) -> Result<DeployedModel, RunnerError> {
    let model_cfg = cfg.model.model_config(bench);
    let matrices = match cfg.strategy {
        StrategyKind::Sft => {
            let base = crate::model::Model::build(model_cfg.clone(), seed)?;
            Some(pretrain_language_matrices(
                &base,
                &bench.inception_data(),
                &cfg.hyper,
                derive_seed(seed, "lang-matrices"),
            )?)
        }
        _ => None,
    };
    Ok(run_inception(cfg.strategy, &model_cfg, bench, &cfg.hyper, matrices, seed)?)
}

fn run_arm(
    cfg: &ExperimentConfig,
    bench: &Benchmark,
    deployed: &DeployedModel,
    lang: &LangId,
    seed: u64,
) -> Result<PerfRecord, RunnerError> {
    let mut arm = deployed.clone();
    let plan = ContinuationPlan::new(lang.clone(), bench.stage_shard(lang, 1)?.to_vec())?;
    let uriel = (&bench.distances, cfg.division);
    run_continuation(&mut arm, &plan, &cfg.hyper, Some(uriel), seed)?;
    Ok(arm.evaluate(&bench.test, cfg.hyper.batch_size)?)
}

/// Runs the full fan-out experiment: for every seed, inception plus one
/// continuation arm per language, then metrics over the change matrices.
/// A failed arm is recorded in the manifest and the run continues; the
/// outcome is only produced when everything succeeded.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult, RunnerError> {
    cfg.validate()?;
    let started = Instant::now();
    let mut arms_log: Vec<ArmRecord> = Vec::new();
    let mut per_seed = Vec::new();
    let mut all_ok = true;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap())
        .build()
        .map_err(|e| RunnerError::Config(format!("thread pool: {e}")))?;

    for &seed in &cfg.seeds {
        let bench = Benchmark::build(&cfg.benchmark, seed)?;
        let langs = bench.langs();

        let t0 = Instant::now();
        let deployed = match build_deployed(cfg, &bench, seed) {
            Ok(dep) => {
                arms_log.push(ArmRecord {
                    seed,
                    lang: None,
                    status: "ok".into(),
                    seconds: t0.elapsed().as_secs_f64(),
                });
                dep
            }
            Err(e) => {
                arms_log.push(ArmRecord {
                    seed,
                    lang: None,
                    status: format!("failed: {e}"),
                    seconds: t0.elapsed().as_secs_f64(),
                });
                all_ok = false;
                continue;
            }
        };
        let mut before_model = deployed.clone();
        let before = before_model.evaluate(&bench.test, cfg.hyper.batch_size)?;

        let arm_results: Vec<(LangId, Result<PerfRecord, RunnerError>, f64)> = pool.install(|| {
            use rayon::prelude::*;
            langs
                .par_iter()
                .map(|lang| {
                    let t = Instant::now();
                    let result = run_arm(cfg, &bench, &deployed, lang, seed);
                    (lang.clone(), result, t.elapsed().as_secs_f64())
                })
                .collect()
        });

        let mut after = BTreeMap::new();
        let mut seed_ok = true;
        for (lang, result, seconds) in arm_results {
            match result {
                Ok(record) => {
                    arms_log.push(ArmRecord {
                        seed,
                        lang: Some(lang.clone()),
                        status: "ok".into(),
                        seconds,
                    });
                    after.insert(lang, record);
                }
                Err(e) => {
                    arms_log.push(ArmRecord {
                        seed,
                        lang: Some(lang.clone()),
                        status: format!("failed: {e}"),
                        seconds,
                    });
                    seed_ok = false;
                }
            }
        }
        if !seed_ok {
            all_ok = false;
            continue;
        }

        let matrix = build_change_matrix(&before, &after)?;
        let report = MetricsReport::from_matrix(&matrix);
        per_seed.push(SeedOutcome { seed, before, after, matrix, report });
    }

    let outcome = if all_ok && per_seed.len() == cfg.seeds.len() {
        let averaged_report =
            MetricsReport::average(&per_seed.iter().map(|s| s.report.clone()).collect::<Vec<_>>())?;
        let averaged_matrix =
            ChangeMatrix::average(&per_seed.iter().map(|s| s.matrix.clone()).collect::<Vec<_>>())?;
        Some(ExperimentOutcome { per_seed, averaged_report, averaged_matrix })
    } else {
        None
    };

    let manifest = RunManifest {
        name: cfg.name.clone(),
        config_hash: cfg.config_hash(),
        strategy: cfg.strategy.as_str().to_owned(),
        seeds: cfg.seeds.clone(),
        arms: arms_log,
        artifacts: Vec::new(),
        total_seconds: started.elapsed().as_secs_f64(),
        success: outcome.is_some(),
    };
    Ok(RunResult { outcome, manifest })
}

/// One seed of a sequential trajectory.
#[derive(Clone, Debug)]
pub struct SeedTrajectory {
    pub seed: u64,
    pub order: Vec<LangId>,
    /// Percent changes per stage against the immediately preceding model.
    pub stage_rows: Vec<Vec<f64>>,
    pub stage_losses: Vec<f64>,
    /// 1-based worst-case stage index.
    pub worst_stage: usize,
    pub worst_row: RowMetrics,
}

/// Trajectory results with worst-case aggregates over seeds.
#[derive(Clone, Debug)]
pub struct TrajectoryOutcome {
    pub per_seed: Vec<SeedTrajectory>,
    pub order_kind: TrajectoryOrder,
    pub avg_worst_loss: f64,
    pub avg_worst_improved: f64,
}

/// Resolves a trajectory order over a benchmark: H2L sorts by descending
/// resource count (ties by language id) and L2H is its exact reverse.
pub fn resolve_order(
    bench: &Benchmark,
    order: &TrajectoryOrder,
) -> Result<Vec<LangId>, RunnerError> {
    let mut by_resource: Vec<(usize, LangId)> =
        bench.profiles.iter().map(|p| (p.resource_count, p.lang.clone())).collect();
    by_resource.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    let h2l: Vec<LangId> = by_resource.into_iter().map(|(_, l)| l).collect();
    match order {
        TrajectoryOrder::H2l => Ok(h2l),
        TrajectoryOrder::L2h => Ok(h2l.into_iter().rev().collect()),
        TrajectoryOrder::Explicit(langs) => {
            let mut sorted = langs.clone();
            sorted.sort();
            let mut expected = bench.langs();
            expected.sort();
            if sorted != expected {
                return Err(RunnerError::Config(
                    "explicit trajectory must cover each language exactly once".into(),
                ));
            }
            Ok(langs.clone())
        }
    }
}

/// Runs the sequential trajectory for every seed: stages execute in order
/// on the evolving model, each stage's change row is measured against the
/// model just before it, and the worst-case stage maximizes the average
/// percent loss.
pub fn run_trajectory(cfg: &ExperimentConfig) -> Result<TrajectoryOutcome, RunnerError> {
    cfg.validate()?;
    let order_kind = cfg
        .trajectory
        .clone()
        .ok_or_else(|| RunnerError::Config("config has no trajectory order".into()))?;

    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let bench = Benchmark::build(&cfg.benchmark, seed)?;
        let order = resolve_order(&bench, &order_kind)?;
        let mut deployed = build_deployed(cfg, &bench, seed)?;

        let mut current = deployed.evaluate(&bench.test, cfg.hyper.batch_size)?;
        let mut stage_rows = Vec::new();
        let mut stage_losses = Vec::new();
        for lang in &order {
            let plan = ContinuationPlan::new(lang.clone(), bench.stage_shard(lang, 1)?.to_vec())?;
            run_continuation(
                &mut deployed,
                &plan,
                &cfg.hyper,
                Some((&bench.distances, cfg.division)),
                seed,
            )?;
            let after = deployed.evaluate(&bench.test, cfg.hyper.batch_size)?;
            let row: Result<Vec<f64>, MetricsError> = bench
                .langs()
                .iter()
                .map(|l| {
                    crate::metrics::percent_change(current.get(l).unwrap(), after.get(l).unwrap())
                })
                .collect();
            let row = row?;
            stage_losses.push(crate::metrics::avg_percent_loss(&row));
            stage_rows.push(row);
            current = after;
        }
        let worst_stage = crate::metrics::worst_case_stage(&stage_losses)?;
        let worst_row = RowMetrics::from_changes(&stage_rows[worst_stage - 1]);
        per_seed.push(SeedTrajectory {
            seed,
            order,
            stage_rows,
            stage_losses,
            worst_stage,
            worst_row,
        });
    }

    let n = per_seed.len() as f64;
    let avg_worst_loss = per_seed.iter().map(|s| s.worst_row.avg_percent_loss).sum::<f64>() / n;
    let avg_worst_improved =
        per_seed.iter().map(|s| s.worst_row.num_improved_langs).sum::<f64>() / n;
    Ok(TrajectoryOutcome { per_seed, order_kind, avg_worst_loss, avg_worst_improved })
}

/// Per-seed closest-language fractions for an experiment outcome.
pub fn closest_language_fractions(
    cfg: &ExperimentConfig,
    outcome: &ExperimentOutcome,
) -> Result<Vec<f64>, RunnerError> {
    let mut out = Vec::new();
    for seed_outcome in &outcome.per_seed {
        let bench = Benchmark::build(&cfg.benchmark, seed_outcome.seed)?;
        out.push(crate::metrics::closest_language_check(&bench.distances, &seed_outcome.matrix)?);
    }
    Ok(out)
}
