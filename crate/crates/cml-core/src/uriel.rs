//! Language similarity layer: syntactic vectors, cosine distances, and the
//! division factor that converts average distance into a base-model
//! learning-rate divisor.
//!
//! Distance is `1 - cosine similarity` (range [0, 2]). The default
//! [`DivisionFactorFn`] coefficients were recovered once by least squares
//! over the six published (average distance, factor) pairs and frozen; the
//! regression oracle in the tests re-derives them.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lang::LangId;

/// Least-squares slope over the six published (distance, factor) pairs.
pub const TABLE2_SLOPE: f64 = 477.2486410720929;
/// Least-squares intercept over the same pairs.
pub const TABLE2_INTERCEPT: f64 = -157.62167675178867;

/// The six published (language, average syntactic distance, division
/// factor) triples the default coefficients were fitted to.
pub const TABLE2_ROWS: [(&str, f64, f64); 6] = [
    ("en", 0.405, 35.0),
    ("de", 0.435, 50.0),
    ("es", 0.415, 40.0),
    ("fr", 0.422, 45.0),
    ("hi", 0.498, 80.0),
    ("th", 0.540, 100.0),
];

#[derive(Debug, Error)]
pub enum UrielError {
    #[error("zero-norm syntactic vector for {0}")]
    ZeroNorm(LangId),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("unknown language {0}")]
    UnknownLanguage(LangId),
    #[error("need at least {need} languages, got {got}")]
    TooFewLanguages { need: usize, got: usize },
    #[error("invalid distance matrix: {0}")]
    InvalidMatrix(String),
    #[error("invalid division-factor function: {0}")]
    InvalidFactorFn(String),
    #[error("malformed csv: {0}")]
    MalformedCsv(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Fixed-length syntactic feature vector for one language. Synthetic
/// vectors are binary, but any real-valued vector with non-zero norm works.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntacticVector {
    pub lang: LangId,
    pub values: Vec<f64>,
}

impl SyntacticVector {
    pub fn new(lang: impl Into<LangId>, values: Vec<f64>) -> Self {
        SyntacticVector { lang: lang.into(), values }
    }

    fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Cosine distance `1 - u.v / (|u||v|)`, in [0, 2].
pub fn cosine_distance(u: &SyntacticVector, v: &SyntacticVector) -> Result<f64, UrielError> {
    if u.values.len() != v.values.len() {
        return Err(UrielError::DimensionMismatch(u.values.len(), v.values.len()));
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 {
        return Err(UrielError::ZeroNorm(u.lang.clone()));
    }
    if nv == 0.0 {
        return Err(UrielError::ZeroNorm(v.lang.clone()));
    }
    let dot: f64 = u.values.iter().zip(&v.values).map(|(a, b)| a * b).sum();
    Ok(1.0 - dot / (nu * nv))
}

/// Symmetric pairwise-distance matrix over an ordered language list.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    langs: Vec<LangId>,
    // row-major n x n
    dist: Vec<f64>,
}

impl DistanceMatrix {
    /// Validates and wraps an explicit matrix: square, zero diagonal,
    /// symmetric within 1e-12, finite entries in [0, 2].
    pub fn new(langs: Vec<LangId>, dist: Vec<f64>) -> Result<Self, UrielError> {
        let n = langs.len();
        if dist.len() != n * n {
            return Err(UrielError::InvalidMatrix(format!(
                "{} entries for {} languages",
                dist.len(),
                n
            )));
        }
        for i in 0..n {
            if dist[i * n + i] != 0.0 {
                return Err(UrielError::InvalidMatrix(format!("non-zero diagonal at {i}")));
            }
            for j in 0..n {
                let d = dist[i * n + j];
                if !d.is_finite() || !(0.0..=2.0).contains(&d) {
                    return Err(UrielError::InvalidMatrix(format!("entry ({i},{j}) = {d}")));
                }
                if (d - dist[j * n + i]).abs() > 1e-12 {
                    return Err(UrielError::InvalidMatrix(format!("asymmetry at ({i},{j})")));
                }
            }
        }
        Ok(DistanceMatrix { langs, dist })
    }

    /// Element-wise cosine distances between the given vectors.
    pub fn from_vectors(vectors: &[SyntacticVector]) -> Result<Self, UrielError> {
        let n = vectors.len();
        let mut dist = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = cosine_distance(&vectors[i], &vectors[j])?;
                // clamp rounding spill just outside [0, 2]
                let d = d.clamp(0.0, 2.0);
                dist[i * n + j] = d;
                dist[j * n + i] = d;
            }
        }
        Ok(DistanceMatrix { langs: vectors.iter().map(|v| v.lang.clone()).collect(), dist })
    }

    pub fn langs(&self) -> &[LangId] {
        &self.langs
    }

    pub fn len(&self) -> usize {
        self.langs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.langs.is_empty()
    }

    fn index_of(&self, lang: &LangId) -> Result<usize, UrielError> {
        self.langs
            .iter()
            .position(|l| l == lang)
            .ok_or_else(|| UrielError::UnknownLanguage(lang.clone()))
    }

    pub fn get(&self, a: &LangId, b: &LangId) -> Result<f64, UrielError> {
        let (i, j) = (self.index_of(a)?, self.index_of(b)?);
        Ok(self.dist[i * self.langs.len() + j])
    }

    /// Arithmetic mean of the row for `lang`, excluding the diagonal.
    pub fn avg_distance_to_rest(&self, lang: &LangId) -> Result<f64, UrielError> {
        let n = self.langs.len();
        if n < 2 {
            return Err(UrielError::TooFewLanguages { need: 2, got: n });
        }
        let i = self.index_of(lang)?;
        let sum: f64 =
            (0..n).filter(|&j| j != i).map(|j| self.dist[i * n + j]).sum();
        Ok(sum / (n - 1) as f64)
    }

    /// The closest and second-closest languages to `lang`, ties broken by
    /// language id.
    pub fn nearest_two(&self, lang: &LangId) -> Result<(LangId, LangId), UrielError> {
        let n = self.langs.len();
        if n < 3 {
            return Err(UrielError::TooFewLanguages { need: 3, got: n });
        }
        let i = self.index_of(lang)?;
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| {
            self.dist[i * n + a]
                .partial_cmp(&self.dist[i * n + b])
                .unwrap()
                .then_with(|| self.langs[a].cmp(&self.langs[b]))
        });
        Ok((self.langs[others[0]].clone(), self.langs[others[1]].clone()))
    }

    /// Writes the CSV form: header `lang,<l0>,<l1>,...`, one row per
    /// language with full-precision distances.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<(), UrielError> {
        let n = self.langs.len();
        let header: Vec<&str> = self.langs.iter().map(|l| l.as_str()).collect();
        writeln!(w, "lang,{}", header.join(","))?;
        for i in 0..n {
            let row: Vec<String> =
                (0..n).map(|j| format!("{}", self.dist[i * n + j])).collect();
            writeln!(w, "{},{}", self.langs[i], row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv(r: &mut impl BufRead) -> Result<Self, UrielError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| UrielError::MalformedCsv("empty file".into()))??;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"lang") {
            return Err(UrielError::MalformedCsv("header must start with 'lang'".into()));
        }
        let langs: Vec<LangId> = cols[1..].iter().map(|s| LangId::new(*s)).collect();
        let n = langs.len();
        let mut dist = vec![0.0; n * n];
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != n + 1 {
                return Err(UrielError::MalformedCsv(format!("row {i} has {} fields", fields.len())));
            }
            if i >= n {
                return Err(UrielError::MalformedCsv("too many rows".into()));
            }
            if fields[0] != langs[i].as_str() {
                return Err(UrielError::MalformedCsv(format!(
                    "row {i} language {} does not match header order",
                    fields[0]
                )));
            }
            for (j, f) in fields[1..].iter().enumerate() {
                dist[i * n + j] = f
                    .trim()
                    .parse()
                    .map_err(|e| UrielError::MalformedCsv(format!("row {i} col {j}: {e}")))?;
            }
        }
        DistanceMatrix::new(langs, dist)
    }
}

/// Reads a vector CSV with header `lang,f0,f1,...`.
pub fn read_vectors_csv(r: &mut impl BufRead) -> Result<Vec<SyntacticVector>, UrielError> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| UrielError::MalformedCsv("empty file".into()))??;
    let dim = header.split(',').count() - 1;
    if !header.starts_with("lang,") {
        return Err(UrielError::MalformedCsv("header must start with 'lang,'".into()));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(UrielError::MalformedCsv(format!(
                "row for {} has {} fields, expected {}",
                fields[0],
                fields.len(),
                dim + 1
            )));
        }
        let values: Result<Vec<f64>, _> = fields[1..].iter().map(|f| f.trim().parse()).collect();
        let values = values.map_err(|e| UrielError::MalformedCsv(format!("{}: {e}", fields[0])))?;
        out.push(SyntacticVector { lang: LangId::new(fields[0]), values });
    }
    Ok(out)
}

/// Writes the vector CSV form.
pub fn write_vectors_csv(
    vectors: &[SyntacticVector],
    w: &mut impl Write,
) -> Result<(), UrielError> {
    let dim = vectors.first().map_or(0, |v| v.values.len());
    let header: Vec<String> = (0..dim).map(|i| format!("f{i}")).collect();
    writeln!(w, "lang,{}", header.join(","))?;
    for v in vectors {
        let vals: Vec<String> = v.values.iter().map(|x| format!("{x}")).collect();
        writeln!(w, "{},{}", v.lang, vals.join(","))?;
    }
    Ok(())
}

/// Linear map from average syntactic distance to the base-model
/// learning-rate division factor: `max(min_factor, step-rounded(a*d + b))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivisionFactorFn {
    pub slope: f64,
    pub intercept: f64,
    pub step: f64,
    pub min_factor: f64,
}

impl Default for DivisionFactorFn {
    fn default() -> Self {
        DivisionFactorFn {
            slope: TABLE2_SLOPE,
            intercept: TABLE2_INTERCEPT,
            step: 5.0,
            min_factor: 1.0,
        }
    }
}

impl DivisionFactorFn {
    pub fn new(slope: f64, intercept: f64, step: f64, min_factor: f64) -> Result<Self, UrielError> {
        let f = DivisionFactorFn { slope, intercept, step, min_factor };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), UrielError> {
        if !(self.step > 0.0) {
            return Err(UrielError::InvalidFactorFn(format!("step must be > 0, got {}", self.step)));
        }
        if !(self.min_factor >= 1.0) {
            return Err(UrielError::InvalidFactorFn(format!(
                "min_factor must be >= 1, got {}",
                self.min_factor
            )));
        }
        if !self.slope.is_finite() || !self.intercept.is_finite() {
            return Err(UrielError::InvalidFactorFn("non-finite coefficients".into()));
        }
        Ok(())
    }

    /// Evaluates the factor for a mean distance `d >= 0`. Always at least
    /// `min_factor`.
    pub fn factor(&self, d: f64) -> f64 {
        let raw = self.slope * d + self.intercept;
        let rounded = (raw / self.step).round() * self.step;
        rounded.max(self.min_factor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_of(lang: &str, values: &[f64]) -> SyntacticVector {
        SyntacticVector::new(LangId::new(lang), values.to_vec())
    }

    #[test]
    fn identical_vectors_have_zero_distance() {
        let u = vec_of("a", &[1.0, 1.0, 0.0]);
        // norm product rounds, so "zero" means zero up to one ulp of 1
        assert!(cosine_distance(&u, &u).unwrap().abs() <= f64::EPSILON);
        let v = vec_of("b", &[1.0, 0.0, 0.0]);
        assert_eq!(cosine_distance(&v, &v).unwrap(), 0.0);
    }

    #[test]
    fn orthogonal_vectors_have_distance_one() {
        let u = vec_of("a", &[1.0, 0.0]);
        let v = vec_of("b", &[0.0, 1.0]);
        assert_eq!(cosine_distance(&u, &v).unwrap(), 1.0);
    }

    #[test]
    fn hand_evaluated_distance() {
        // (1,1,0) . (1,0,1) = 1, norms sqrt(2) each -> 1 - 1/2 = 0.5
        let u = vec_of("a", &[1.0, 1.0, 0.0]);
        let v = vec_of("b", &[1.0, 0.0, 1.0]);
        assert!((cosine_distance(&u, &v).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_norm_rejected() {
        let u = vec_of("a", &[0.0, 0.0]);
        let v = vec_of("b", &[1.0, 0.0]);
        assert!(matches!(cosine_distance(&u, &v), Err(UrielError::ZeroNorm(_))));
    }

    #[test]
    fn distance_is_symmetric_and_zero_iff_parallel() {
        let u = vec_of("a", &[1.0, 2.0, 3.0]);
        let v = vec_of("b", &[2.0, 4.0, 6.0]); // positive scalar multiple
        let w = vec_of("c", &[2.0, 4.0, 5.0]);
        assert!(cosine_distance(&u, &v).unwrap().abs() < 1e-15);
        assert!(cosine_distance(&u, &w).unwrap() > 0.0);
        assert_eq!(
            cosine_distance(&u, &w).unwrap(),
            cosine_distance(&w, &u).unwrap()
        );
    }

    #[test]
    fn avg_distance_examples() {
        // row distances {0.2, 0.4, 0.6} -> mean 0.4
        let langs: Vec<LangId> = ["a", "b", "c", "d"].iter().map(|s| LangId::new(*s)).collect();
        #[rustfmt::skip]
        let dist = vec![
            0.0, 0.2, 0.4, 0.6,
            0.2, 0.0, 0.5, 0.5,
            0.4, 0.5, 0.0, 0.1,
            0.6, 0.5, 0.1, 0.0,
        ];
        let m = DistanceMatrix::new(langs.clone(), dist).unwrap();
        assert!((m.avg_distance_to_rest(&langs[0]).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn all_equal_matrix_averages_to_constant() {
        let langs: Vec<LangId> = ["a", "b", "c"].iter().map(|s| LangId::new(*s)).collect();
        let c = 0.37;
        let dist = vec![0.0, c, c, c, 0.0, c, c, c, 0.0];
        let m = DistanceMatrix::new(langs.clone(), dist).unwrap();
        for l in &langs {
            assert!((m.avg_distance_to_rest(l).unwrap() - c).abs() < 1e-15);
        }
    }

    #[test]
    fn avg_distance_matches_brute_force_on_random_matrix() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let n = 5;
        let langs: Vec<LangId> = (0..n).map(|i| LangId::new(format!("l{i}"))).collect();
        let mut dist = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d: f64 = rng.random_range(0.0..2.0);
                dist[i * n + j] = d;
                dist[j * n + i] = d;
            }
        }
        let m = DistanceMatrix::new(langs.clone(), dist.clone()).unwrap();
        for (i, l) in langs.iter().enumerate() {
            let brute: f64 = (0..n).filter(|&j| j != i).map(|j| dist[i * n + j]).sum::<f64>()
                / (n - 1) as f64;
            assert!((m.avg_distance_to_rest(l).unwrap() - brute).abs() < 1e-15);
        }
    }

    #[test]
    fn singleton_language_set_rejected() {
        let m = DistanceMatrix::new(vec![LangId::new("a")], vec![0.0]).unwrap();
        assert!(matches!(
            m.avg_distance_to_rest(&LangId::new("a")),
            Err(UrielError::TooFewLanguages { .. })
        ));
    }

    #[test]
    fn matrix_from_vectors_matches_elementwise_cosine() {
        let vs = vec![
            vec_of("a", &[1.0, 0.0, 1.0, 1.0]),
            vec_of("b", &[0.0, 1.0, 1.0, 0.0]),
            vec_of("c", &[1.0, 1.0, 0.0, 1.0]),
        ];
        let m = DistanceMatrix::from_vectors(&vs).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect =
                    if i == j { 0.0 } else { cosine_distance(&vs[i], &vs[j]).unwrap() };
                assert_eq!(m.get(&vs[i].lang, &vs[j].lang).unwrap(), expect);
            }
        }
    }

    #[test]
    fn asymmetric_matrix_rejected() {
        let langs: Vec<LangId> = ["a", "b"].iter().map(|s| LangId::new(*s)).collect();
        let err = DistanceMatrix::new(langs, vec![0.0, 0.3, 0.300001, 0.0]).unwrap_err();
        assert!(matches!(err, UrielError::InvalidMatrix(_)));
    }

    #[test]
    fn default_factor_reproduces_published_table() {
        let f = DivisionFactorFn::default();
        for (_, d, expected) in TABLE2_ROWS {
            assert_eq!(f.factor(d), expected, "distance {d}");
        }
    }

    #[test]
    fn default_coefficients_match_least_squares_oracle() {
        // independent least-squares fit over the six published pairs
        let n = TABLE2_ROWS.len() as f64;
        let sx: f64 = TABLE2_ROWS.iter().map(|r| r.1).sum();
        let sy: f64 = TABLE2_ROWS.iter().map(|r| r.2).sum();
        let sxx: f64 = TABLE2_ROWS.iter().map(|r| r.1 * r.1).sum();
        let sxy: f64 = TABLE2_ROWS.iter().map(|r| r.1 * r.2).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        let intercept = (sy - slope * sx) / n;
        assert!((slope - TABLE2_SLOPE).abs() < 1e-9, "slope {slope}");
        assert!((intercept - TABLE2_INTERCEPT).abs() < 1e-9, "intercept {intercept}");
        // the derived example: a ~ 477, b ~ -158
        assert_eq!(slope.round(), 477.0);
        assert_eq!(intercept.round(), -158.0);
    }

    #[test]
    fn factor_is_monotone_for_positive_slope() {
        let f = DivisionFactorFn::default();
        let mut prev = f.factor(0.0);
        for k in 1..200 {
            let d = k as f64 * 0.005;
            let cur = f.factor(d);
            assert!(cur >= prev, "factor dropped at d={d}");
            prev = cur;
        }
    }

    #[test]
    fn factor_respects_minimum() {
        let f = DivisionFactorFn::default();
        assert_eq!(f.factor(0.0), 1.0);
        let err = DivisionFactorFn::new(1.0, 0.0, 5.0, 0.0).unwrap_err();
        assert!(matches!(err, UrielError::InvalidFactorFn(_)));
    }

    #[test]
    fn distance_csv_roundtrip() {
        let vs = vec![
            vec_of("aa", &[1.0, 0.0, 1.0]),
            vec_of("bb", &[0.0, 1.0, 1.0]),
            vec_of("cc", &[1.0, 1.0, 0.0]),
        ];
        let m = DistanceMatrix::from_vectors(&vs).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let back = DistanceMatrix::read_csv(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn vectors_csv_roundtrip() {
        let vs = vec![vec_of("aa", &[1.0, 0.0]), vec_of("bb", &[0.5, 1.0])];
        let mut buf = Vec::new();
        write_vectors_csv(&vs, &mut buf).unwrap();
        let back = read_vectors_csv(&mut buf.as_slice()).unwrap();
        assert_eq!(back, vs);
    }
}
