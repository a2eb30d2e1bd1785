//! Percent-change matrices and the comparison metrics computed over them.
//!
//! A [`ChangeMatrix`] row holds the percent performance change on every
//! evaluation language after one continuation stage; the four row metrics
//! (average percent loss, improved-language count, sum ratio, max ratio)
//! summarize it. "Improved" means strictly positive change and "loss"
//! strictly negative; zeros count to neither. Ratios are `f64::INFINITY`
//! when a row has no losses and serialize as the string `"inf"`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde_json::{json, Value};
use thiserror::Error;

use crate::lang::LangId;
use crate::uriel::{DistanceMatrix, UrielError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("percent change undefined for non-positive base score {0}")]
    UndefinedBase(f64),
    #[error("score {0} outside (0, 100]")]
    InvalidScore(f64),
    #[error("language sets do not match: {0}")]
    LanguageMismatch(String),
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error(transparent)]
    Uriel(#[from] UrielError),
    #[error("malformed heatmap csv: {0}")]
    MalformedCsv(String),
    #[error("malformed report: {0}")]
    MalformedReport(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Per-language scores in percent, each in (0, 100].
#[derive(Clone, Debug, PartialEq)]
pub struct PerfRecord {
    scores: BTreeMap<LangId, f64>,
}

impl PerfRecord {
    pub fn new(scores: BTreeMap<LangId, f64>) -> Result<Self, MetricsError> {
        for &s in scores.values() {
            if !s.is_finite() || s <= 0.0 || s > 100.0 {
                return Err(MetricsError::InvalidScore(s));
            }
        }
        Ok(PerfRecord { scores })
    }

    pub fn get(&self, lang: &LangId) -> Option<f64> {
        self.scores.get(lang).copied()
    }

    pub fn langs(&self) -> Vec<LangId> {
        self.scores.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LangId, f64)> {
        self.scores.iter().map(|(l, &s)| (l, s))
    }

    /// Unweighted mean over languages.
    pub fn macro_average(&self) -> f64 {
        let n = self.scores.len();
        if n == 0 {
            return 0.0;
        }
        self.scores.values().sum::<f64>() / n as f64
    }
}

/// `100 * (new - old) / old`; the base score must be positive.
pub fn percent_change(old: f64, new: f64) -> Result<f64, MetricsError> {
    if !(old > 0.0) {
        return Err(MetricsError::UndefinedBase(old));
    }
    Ok(100.0 * (new - old) / old)
}

/// Square matrix of percent changes: row = continuation language, column =
/// evaluation language, both in the same fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeMatrix {
    langs: Vec<LangId>,
    rows: Vec<Vec<f64>>,
}

impl ChangeMatrix {
    pub fn new(langs: Vec<LangId>, rows: Vec<Vec<f64>>) -> Result<Self, MetricsError> {
        if rows.len() != langs.len() || rows.iter().any(|r| r.len() != langs.len()) {
            return Err(MetricsError::LanguageMismatch(format!(
                "matrix must be {n} x {n}",
                n = langs.len()
            )));
        }
        for row in &rows {
            if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
                return Err(MetricsError::LanguageMismatch(format!("non-finite entry {bad}")));
            }
        }
        Ok(ChangeMatrix { langs, rows })
    }

    pub fn langs(&self) -> &[LangId] {
        &self.langs
    }

    pub fn row(&self, lang: &LangId) -> Option<&[f64]> {
        let i = self.langs.iter().position(|l| l == lang)?;
        Some(&self.rows[i])
    }

    pub fn rows(&self) -> impl Iterator<Item = (&LangId, &[f64])> {
        self.langs.iter().zip(self.rows.iter().map(|r| r.as_slice()))
    }

    pub fn get(&self, row: &LangId, col: &LangId) -> Option<f64> {
        let i = self.langs.iter().position(|l| l == row)?;
        let j = self.langs.iter().position(|l| l == col)?;
        Some(self.rows[i][j])
    }

    /// Entry-wise mean of several matrices over the same language order.
    pub fn average(matrices: &[ChangeMatrix]) -> Result<ChangeMatrix, MetricsError> {
        let first = matrices
            .first()
            .ok_or_else(|| MetricsError::LanguageMismatch("no matrices to average".into()))?;
        let n = first.langs.len();
        let mut rows = vec![vec![0.0; n]; n];
        for m in matrices {
            if m.langs != first.langs {
                return Err(MetricsError::LanguageMismatch("differing language orders".into()));
            }
            for (acc, row) in rows.iter_mut().zip(&m.rows) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
        }
        for row in &mut rows {
            for v in row.iter_mut() {
                *v /= matrices.len() as f64;
            }
        }
        ChangeMatrix::new(first.langs.clone(), rows)
    }

    /// Writes the heatmap CSV: header `lang,<eval langs>`, one row per
    /// continuation language, cells with exactly four decimals.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<(), MetricsError> {
        let header: Vec<&str> = self.langs.iter().map(|l| l.as_str()).collect();
        writeln!(w, "lang,{}", header.join(","))?;
        for (lang, row) in self.rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
            writeln!(w, "{},{}", lang, cells.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv(r: &mut impl BufRead) -> Result<Self, MetricsError> {
        let mut lines = r.lines();
        let header =
            lines.next().ok_or_else(|| MetricsError::MalformedCsv("empty file".into()))??;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"lang") {
            return Err(MetricsError::MalformedCsv("header must start with 'lang'".into()));
        }
        let langs: Vec<LangId> = cols[1..].iter().map(|s| LangId::new(*s)).collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != langs.len() + 1 {
                return Err(MetricsError::MalformedCsv(format!(
                    "row {i}: {} fields for {} languages",
                    fields.len(),
                    langs.len()
                )));
            }
            if i >= langs.len() || fields[0] != langs[i].as_str() {
                return Err(MetricsError::MalformedCsv(format!(
                    "row {i}: continuation language order must match the header"
                )));
            }
            let row: Result<Vec<f64>, _> = fields[1..].iter().map(|f| f.trim().parse()).collect();
            rows.push(row.map_err(|e| MetricsError::MalformedCsv(format!("row {i}: {e}")))?);
        }
        ChangeMatrix::new(langs, rows)
    }
}

/// Builds the matrix `delta[i][j] = percent_change(before[j], after[i][j])`.
pub fn build_change_matrix(
    before: &PerfRecord,
    after: &BTreeMap<LangId, PerfRecord>,
) -> Result<ChangeMatrix, MetricsError> {
    let langs = before.langs();
    if after.keys().cloned().collect::<Vec<_>>() != langs {
        return Err(MetricsError::LanguageMismatch(
            "continuation rows must cover exactly the evaluation languages".into(),
        ));
    }
    let mut rows = Vec::with_capacity(langs.len());
    for row_lang in &langs {
        let record = &after[row_lang];
        if record.langs() != langs {
            return Err(MetricsError::LanguageMismatch(format!(
                "row {row_lang} does not cover the evaluation languages"
            )));
        }
        let row: Result<Vec<f64>, _> = langs
            .iter()
            .map(|l| percent_change(before.get(l).unwrap(), record.get(l).unwrap()))
            .collect();
        rows.push(row?);
    }
    ChangeMatrix::new(langs, rows)
}

/// Mean magnitude of the strictly negative changes; 0 when none lost.
pub fn avg_percent_loss(changes: &[f64]) -> f64 {
    let losses: Vec<f64> = changes.iter().filter(|&&c| c < 0.0).map(|c| c.abs()).collect();
    if losses.is_empty() {
        0.0
    } else {
        losses.iter().sum::<f64>() / losses.len() as f64
    }
}

/// Count of strictly positive changes.
pub fn num_improved_langs(changes: &[f64]) -> usize {
    changes.iter().filter(|&&c| c > 0.0).count()
}

/// `(sum(gains)/|sum(losses)|, max(gain)/|worst loss|)`. No losses gives
/// `(inf, inf)`; gains absent but losses present gives `(0, 0)`.
pub fn gain_loss_ratios(changes: &[f64]) -> (f64, f64) {
    let sum_gains: f64 = changes.iter().filter(|&&c| c > 0.0).sum();
    let sum_losses: f64 = changes.iter().filter(|&&c| c < 0.0).sum();
    let max_gain = changes.iter().cloned().filter(|&c| c > 0.0).fold(0.0, f64::max);
    let worst_loss = changes.iter().cloned().filter(|&c| c < 0.0).fold(0.0, f64::min);
    if sum_losses == 0.0 {
        (f64::INFINITY, f64::INFINITY)
    } else {
        (sum_gains / sum_losses.abs(), max_gain / worst_loss.abs())
    }
}

/// 1-based stage whose average percent loss is maximal; ties go to the
/// earliest stage.
pub fn worst_case_stage(per_stage_losses: &[f64]) -> Result<usize, MetricsError> {
    if per_stage_losses.is_empty() {
        return Err(MetricsError::EmptyTrajectory);
    }
    let mut best = 0;
    for (i, &v) in per_stage_losses.iter().enumerate() {
        if v > per_stage_losses[best] {
            best = i;
        }
    }
    Ok(best + 1)
}

/// Sorts each row's languages by change (descending, ties by language id)
/// and returns the Levenshtein distance between the two orderings.
pub fn ordering_edit_distance(
    langs: &[LangId],
    row_a: &[f64],
    row_b: &[f64],
) -> Result<usize, MetricsError> {
    if row_a.len() != langs.len() || row_b.len() != langs.len() {
        return Err(MetricsError::LanguageMismatch(format!(
            "rows of {} and {} entries over {} languages",
            row_a.len(),
            row_b.len(),
            langs.len()
        )));
    }
    let order = |row: &[f64]| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..langs.len()).collect();
        idx.sort_by(|&a, &b| {
            row[b].partial_cmp(&row[a]).unwrap().then_with(|| langs[a].cmp(&langs[b]))
        });
        idx
    };
    Ok(levenshtein(&order(row_a), &order(row_b)))
}

fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &bj) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ai != bj);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Fraction of continuation rows whose change on the row language's nearest
/// neighbor is at least the change on its second-nearest neighbor.
pub fn closest_language_check(
    distances: &DistanceMatrix,
    matrix: &ChangeMatrix,
) -> Result<f64, MetricsError> {
    if matrix.langs().len() < 3 {
        return Err(MetricsError::LanguageMismatch("need at least 3 languages".into()));
    }
    let mut satisfied = 0usize;
    let mut total = 0usize;
    for (lang, _) in matrix.rows() {
        let (l1, l2) = distances.nearest_two(lang)?;
        let d1 = matrix.get(lang, &l1).ok_or_else(|| {
            MetricsError::LanguageMismatch(format!("matrix missing column {l1}"))
        })?;
        let d2 = matrix.get(lang, &l2).ok_or_else(|| {
            MetricsError::LanguageMismatch(format!("matrix missing column {l2}"))
        })?;
        satisfied += usize::from(d1 >= d2);
        total += 1;
    }
    Ok(satisfied as f64 / total as f64)
}

/// The four row metrics for one continuation stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowMetrics {
    pub avg_percent_loss: f64,
    pub num_improved_langs: f64,
    pub sum_ratio: f64,
    pub max_ratio: f64,
}

impl RowMetrics {
    pub fn from_changes(changes: &[f64]) -> Self {
        let (sum_ratio, max_ratio) = gain_loss_ratios(changes);
        RowMetrics {
            avg_percent_loss: avg_percent_loss(changes),
            num_improved_langs: num_improved_langs(changes) as f64,
            sum_ratio,
            max_ratio,
        }
    }

    fn mean(items: &[RowMetrics]) -> RowMetrics {
        let n = items.len() as f64;
        RowMetrics {
            avg_percent_loss: items.iter().map(|m| m.avg_percent_loss).sum::<f64>() / n,
            num_improved_langs: items.iter().map(|m| m.num_improved_langs).sum::<f64>() / n,
            sum_ratio: items.iter().map(|m| m.sum_ratio).sum::<f64>() / n,
            max_ratio: items.iter().map(|m| m.max_ratio).sum::<f64>() / n,
        }
    }

    fn to_json(self) -> Value {
        json!({
            "avg_percent_loss": ratio_to_json(self.avg_percent_loss),
            "num_improved_langs": ratio_to_json(self.num_improved_langs),
            "sum_ratio": ratio_to_json(self.sum_ratio),
            "max_ratio": ratio_to_json(self.max_ratio),
        })
    }

    fn from_json(v: &Value) -> Result<Self, MetricsError> {
        Ok(RowMetrics {
            avg_percent_loss: json_to_ratio(&v["avg_percent_loss"])?,
            num_improved_langs: json_to_ratio(&v["num_improved_langs"])?,
            sum_ratio: json_to_ratio(&v["sum_ratio"])?,
            max_ratio: json_to_ratio(&v["max_ratio"])?,
        })
    }
}

fn ratio_to_json(v: f64) -> Value {
    if v.is_infinite() {
        Value::String("inf".to_owned())
    } else {
        json!(v)
    }
}

fn json_to_ratio(v: &Value) -> Result<f64, MetricsError> {
    match v {
        Value::String(s) if s == "inf" => Ok(f64::INFINITY),
        Value::Number(n) => n
            .as_f64()
            .ok_or_else(|| MetricsError::MalformedReport(format!("bad number {n}"))),
        other => Err(MetricsError::MalformedReport(format!("expected number or \"inf\", got {other}"))),
    }
}

/// Per-row metrics, their average over continuation rows, and (for
/// trajectories) the worst-case stage.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub langs: Vec<LangId>,
    pub per_row: Vec<RowMetrics>,
    pub averaged: RowMetrics,
    pub worst_case_stage: Option<usize>,
    pub seeds: usize,
}

impl MetricsReport {
    /// Row metrics for every continuation row of a matrix, averaged over
    /// the rows (one seed).
    pub fn from_matrix(matrix: &ChangeMatrix) -> Self {
        let per_row: Vec<RowMetrics> =
            matrix.rows().map(|(_, row)| RowMetrics::from_changes(row)).collect();
        MetricsReport {
            langs: matrix.langs().to_vec(),
            averaged: RowMetrics::mean(&per_row),
            per_row,
            worst_case_stage: None,
            seeds: 1,
        }
    }

    /// Field-wise mean over per-seed reports; infinities propagate into the
    /// mean exactly as IEEE arithmetic dictates.
    pub fn average(reports: &[MetricsReport]) -> Result<MetricsReport, MetricsError> {
        let first = reports
            .first()
            .ok_or_else(|| MetricsError::MalformedReport("no reports to average".into()))?;
        for r in reports {
            if r.langs != first.langs || r.per_row.len() != first.per_row.len() {
                return Err(MetricsError::LanguageMismatch("reports do not align".into()));
            }
        }
        let per_row: Vec<RowMetrics> = (0..first.per_row.len())
            .map(|i| {
                let column: Vec<RowMetrics> = reports.iter().map(|r| r.per_row[i]).collect();
                RowMetrics::mean(&column)
            })
            .collect();
        let averaged =
            RowMetrics::mean(&reports.iter().map(|r| r.averaged).collect::<Vec<_>>());
        Ok(MetricsReport {
            langs: first.langs.clone(),
            per_row,
            averaged,
            worst_case_stage: None,
            seeds: reports.iter().map(|r| r.seeds).sum(),
        })
    }

    pub fn to_json(&self) -> Value {
        let rows: Vec<Value> = self
            .langs
            .iter()
            .zip(&self.per_row)
            .map(|(lang, m)| {
                let mut row = m.to_json();
                row["lang"] = json!(lang.as_str());
                row
            })
            .collect();
        json!({
            "languages": self.langs.iter().map(|l| l.as_str()).collect::<Vec<_>>(),
            "per_row": rows,
            "averaged": self.averaged.to_json(),
            "worst_case_stage": self.worst_case_stage,
            "seeds": self.seeds,
        })
    }

    pub fn from_json(v: &Value) -> Result<Self, MetricsError> {
        let langs: Vec<LangId> = v["languages"]
            .as_array()
            .ok_or_else(|| MetricsError::MalformedReport("missing languages".into()))?
            .iter()
            .map(|l| {
                l.as_str()
                    .map(LangId::new)
                    .ok_or_else(|| MetricsError::MalformedReport("bad language".into()))
            })
            .collect::<Result<_, _>>()?;
        let per_row = v["per_row"]
            .as_array()
            .ok_or_else(|| MetricsError::MalformedReport("missing per_row".into()))?
            .iter()
            .map(RowMetrics::from_json)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(MetricsReport {
            langs,
            per_row,
            averaged: RowMetrics::from_json(&v["averaged"])?,
            worst_case_stage: v["worst_case_stage"].as_u64().map(|s| s as usize),
            seeds: v["seeds"].as_u64().unwrap_or(1) as usize,
        })
    }
}
