//! Artifact emission: heatmap CSV/SVG, metric reports, benchmark dumps,
//! and the run manifest. Every write is atomic (temp file + rename) so a
//! crashed run never leaves half-written artifacts behind.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::data::{write_corpus, Benchmark};
use crate::metrics::ChangeMatrix;
use crate::uriel::write_vectors_csv;

use super::{
    io_err, ExperimentConfig, ExperimentOutcome, RunManifest, RunnerError, TrajectoryOutcome,
};

/// Which heatmap artifacts to emit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArtifactFormat {
    Csv,
    Svg,
    All,
}

impl ArtifactFormat {
    pub fn parse(s: &str) -> Result<Self, RunnerError> {
        match s {
            "csv" => Ok(ArtifactFormat::Csv),
            "svg" => Ok(ArtifactFormat::Svg),
            "all" => Ok(ArtifactFormat::All),
            other => Err(RunnerError::Config(format!("unknown format {other:?}"))),
        }
    }

    fn wants_csv(self) -> bool {
        matches!(self, ArtifactFormat::Csv | ArtifactFormat::All)
    }

    fn wants_svg(self) -> bool {
        matches!(self, ArtifactFormat::Svg | ArtifactFormat::All)
    }
}

/// Writes `bytes` to `path` atomically (write temp, fsync-free rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunnerError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact"),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

/// Color scale of the heatmap: diverging red/green clipped at ±2 percent,
/// white at zero.
fn cell_color(change: f64) -> String {
    let t = (change / 2.0).clamp(-1.0, 1.0);
    let blend = |from: f64, to: f64, t: f64| (from + (to - from) * t).round() as u8;
    if t < 0.0 {
        let a = -t;
        format!("rgb({},{},{})", blend(255.0, 208.0, a), blend(255.0, 28.0, a), blend(255.0, 28.0, a))
    } else {
        format!("rgb({},{},{})", blend(255.0, 22.0, t), blend(255.0, 140.0, t), blend(255.0, 54.0, t))
    }
}

/// Renders a change matrix as a standalone SVG heatmap (rows: continuation
/// language, columns: evaluation language).
pub fn render_heatmap_svg(matrix: &ChangeMatrix, title: &str) -> String {
    const CELL: usize = 46;
    const LEFT: usize = 64;
    const TOP: usize = 56;
    let n = matrix.langs().len();
    let width = LEFT + n * CELL + 24;
    let height = TOP + n * CELL + 30;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"monospace\" font-size=\"11\">\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{LEFT}\" y=\"18\" font-size=\"13\">{title}</text>\n"
    ));
    for (j, lang) in matrix.langs().iter().enumerate() {
        let x = LEFT + j * CELL + CELL / 2;
        svg.push_str(&format!(
            "  <text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{lang}</text>\n",
            TOP - 8
        ));
    }
    for (i, (lang, row)) in matrix.rows().enumerate() {
        let y = TOP + i * CELL;
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{lang}</text>\n",
            LEFT - 8,
            y + CELL / 2 + 4
        ));
        for (j, &change) in row.iter().enumerate() {
            let x = LEFT + j * CELL;
            svg.push_str(&format!(
                "  <rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{}\" \
                 stroke=\"#777\" stroke-width=\"0.5\"/>\n",
                cell_color(change)
            ));
            svg.push_str(&format!(
                "  <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{change:+.2}</text>\n",
                x + CELL / 2,
                y + CELL / 2 + 4
            ));
        }
    }
    svg.push_str(&format!(
        "  <text x=\"{LEFT}\" y=\"{}\">scale clipped at \u{00b1}2%</text>\n",
        height - 10
    ));
    svg.push_str("</svg>\n");
    svg
}

/// Emits every artifact of a completed experiment into `out_dir` and
/// returns the final manifest (also written there as `manifest.json`).
pub fn emit_experiment_artifacts(
    cfg: &ExperimentConfig,
    outcome: &ExperimentOutcome,
    mut manifest: RunManifest,
    out_dir: &Path,
    format: ArtifactFormat,
) -> Result<RunManifest, RunnerError> {
    let strategy = cfg.strategy.as_str();
    let mut artifacts = Vec::new();

    let mut heatmaps: Vec<(String, &ChangeMatrix)> = outcome
        .per_seed
        .iter()
        .map(|s| (format!("heatmap_{strategy}_seed{}", s.seed), &s.matrix))
        .collect();
    heatmaps.push((format!("heatmap_{strategy}_avg"), &outcome.averaged_matrix));

    for (stem, matrix) in heatmaps {
        if format.wants_csv() {
            let mut csv = Vec::new();
            matrix.write_csv(&mut csv)?;
            let path = out_dir.join(format!("{stem}.csv"));
            write_atomic(&path, &csv)?;
            artifacts.push(path);
        }
        if format.wants_svg() {
            let svg = render_heatmap_svg(matrix, &stem);
            let path = out_dir.join(format!("{stem}.svg"));
            write_atomic(&path, svg.as_bytes())?;
            artifacts.push(path);
        }
    }

    let report = json!({
        "name": cfg.name,
        "strategy": strategy,
        "config_hash": cfg.config_hash(),
        "seeds": cfg.seeds,
        "per_seed": outcome.per_seed.iter().map(|s| json!({
            "seed": s.seed,
            "before": s.before.iter().map(|(l, v)| (l.as_str().to_owned(), v)).collect::<BTreeMap<String, f64>>(),
            "report": s.report.to_json(),
        })).collect::<Vec<_>>(),
        "averaged": outcome.averaged_report.to_json(),
    });
    let path = out_dir.join(format!("report_{strategy}.json"));
    write_atomic(&path, (serde_json::to_string_pretty(&report).expect("report serializes") + "\n").as_bytes())?;
    artifacts.push(path);

    manifest.artifacts = artifacts;
    write_manifest(&manifest, out_dir)?;
    Ok(manifest)
}

/// Emits the per-stage trajectory report.
pub fn emit_trajectory_artifacts(
    cfg: &ExperimentConfig,
    outcome: &TrajectoryOutcome,
    out_dir: &Path,
) -> Result<PathBuf, RunnerError> {
    let order_name = match &outcome.order_kind {
        super::TrajectoryOrder::H2l => "h2l".to_owned(),
        super::TrajectoryOrder::L2h => "l2h".to_owned(),
        super::TrajectoryOrder::Explicit(_) => "explicit".to_owned(),
    };
    let report = json!({
        "name": cfg.name,
        "strategy": cfg.strategy.as_str(),
        "config_hash": cfg.config_hash(),
        "order": order_name,
        "per_seed": outcome.per_seed.iter().map(|s| json!({
            "seed": s.seed,
            "order": s.order.iter().map(|l| l.as_str()).collect::<Vec<_>>(),
            "stage_avg_percent_loss": s.stage_losses,
            "worst_case_stage": s.worst_stage,
            "worst_stage_avg_percent_loss": s.worst_row.avg_percent_loss,
            "worst_stage_num_improved": s.worst_row.num_improved_langs,
        })).collect::<Vec<_>>(),
        "avg_worst_stage_loss": outcome.avg_worst_loss,
        "avg_worst_stage_improved": outcome.avg_worst_improved,
    });
    let path = out_dir.join(format!("trajectory_{}_{}.json", cfg.strategy.as_str(), order_name));
    write_atomic(&path, (serde_json::to_string_pretty(&report).expect("report serializes") + "\n").as_bytes())?;
    Ok(path)
}

/// Writes `manifest.json`.
pub fn write_manifest(manifest: &RunManifest, out_dir: &Path) -> Result<(), RunnerError> {
    let path = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    write_atomic(&path, (text + "\n").as_bytes())
}

/// Dumps a generated benchmark to disk: profiles manifest, syntactic
/// vectors, distance matrix, and per-language shard/dev/test corpora.
pub fn emit_benchmark(
    bench: &Benchmark,
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, RunnerError> {
    let dir = out_dir.join(format!("seed{seed}"));
    let mut artifacts = Vec::new();

    let mut vectors = Vec::new();
    write_vectors_csv(
        &bench.profiles.iter().map(|p| p.syntactic_vector()).collect::<Vec<_>>(),
        &mut vectors,
    )?;
    let path = dir.join("vectors.csv");
    write_atomic(&path, &vectors)?;
    artifacts.push(path);

    let mut distances = Vec::new();
    bench.distances.write_csv(&mut distances)?;
    let path = dir.join("distances.csv");
    write_atomic(&path, &distances)?;
    artifacts.push(path);

    for (lang, shards) in &bench.shards {
        for (idx, shard) in shards.iter().enumerate() {
            let mut buf = Vec::new();
            write_corpus(shard, &mut buf)?;
            let path = dir.join(format!("train_{lang}_shard{idx}.tsv"));
            write_atomic(&path, &buf)?;
            artifacts.push(path);
        }
    }
    for (name, split) in [("dev", &bench.dev), ("test", &bench.test)] {
        for (lang, examples) in split {
            let mut buf = Vec::new();
            write_corpus(examples, &mut buf)?;
            let path = dir.join(format!("{name}_{lang}.tsv"));
            write_atomic(&path, &buf)?;
            artifacts.push(path);
        }
    }

    let manifest = json!({
        "seed": seed,
        "task": match bench.task {
            crate::data::TaskKind::TokenTag => "token-tag",
            crate::data::TaskKind::SentenceClass => "sentence-class",
        },
        "surface_vocab": bench.surface_vocab,
        "mask_token": bench.mask_token(),
        "profiles": bench.profiles.iter().map(|p| json!({
            "lang": p.lang.as_str(),
            "family": p.family,
            "features": p.features,
            "resource_count": p.resource_count,
            "transform": {
                "reverse": p.transform.reverse,
                "adjacent_swap": p.transform.adjacent_swap,
                "rotate": p.transform.rotate,
            },
        })).collect::<Vec<_>>(),
        "shards": bench.shards.iter().map(|(l, s)| {
            (l.as_str().to_owned(), s.iter().map(|x| x.len()).collect::<Vec<_>>())
        }).collect::<BTreeMap<String, Vec<usize>>>(),
        "files": artifacts.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect::<Vec<_>>(),
    });
    let path = dir.join("benchmark.json");
    write_atomic(&path, (serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n").as_bytes())?;
    artifacts.push(path);
    Ok(artifacts)
}

#[cfg(test)]
pub(super) fn test_cell_color(change: f64) -> String {
    cell_color(change)
}
