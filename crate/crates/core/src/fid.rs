//! Fréchet distance between two embedding sets under a Gaussian fit:
//!
//! `‖μ_a − μ_b‖² + tr(Σ_a + Σ_b − 2·(Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2})`
//!
//! The inner square root is taken of the symmetric product, which has the
//! same trace as `(Σ_a Σ_b)^{1/2}`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{mean_and_covariance, psd_sqrt, psd_sqrt_trace, symmetric_eigen, Matrix, SeededRng};

/// Covariances whose smallest eigenvalue is below this get `EPS_REGULARIZER·I`.
pub const MIN_EIGENVALUE: f64 = 1e-10;
pub const EPS_REGULARIZER: f64 = 1e-6;
/// Negative trace residue tolerated (relative to `max(1, tr Σ_a + tr Σ_b)`)
/// before clamping to zero.
pub const NEGATIVE_RESIDUE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    embeddings: Matrix,
    pub source: String,
}

impl EmbeddingSet {
    pub fn new(embeddings: Matrix, source: impl Into<String>) -> Result<Self> {
        if embeddings.rows() < 2 {
            return Err(Error::invalid(format!(
                "embedding set needs at least 2 rows, got {}",
                embeddings.rows()
            )));
        }
        if !embeddings.is_finite() {
            return Err(Error::Numerical("non-finite embedding".into()));
        }
        Ok(Self {
            embeddings,
            source: source.into(),
        })
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.embeddings.cols()
    }
}

/// Reads one embedding per row of numeric CSV. A first row that does not
/// parse as numbers is treated as a header.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    read_embeddings(file, path.display().to_string())
}

pub fn read_embeddings(reader: impl std::io::Read, source: impl Into<String>) -> Result<EmbeddingSet> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data {
            line: e.position().map_or(n + 1, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(n + 1, |p| p.line() as usize);
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(v) => rows.push(v),
            Err(_) if n == 0 => continue,
            Err(_) => {
                return Err(Error::Data {
                    line,
                    message: "non-numeric embedding value".into(),
                })
            }
        }
    }
    let m = Matrix::from_rows(&rows).map_err(|e| Error::Data {
        line: 0,
        message: e.to_string(),
    })?;
    EmbeddingSet::new(m, source)
}

/// Distance plus whether either covariance was regularized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidResult {
    pub distance: f64,
    pub regularized: bool,
}

fn regularize(cov: &mut Matrix) -> Result<bool> {
    let (values, _) = symmetric_eigen(cov)?;
    let smallest = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if smallest < MIN_EIGENVALUE {
        for i in 0..cov.rows() {
            cov[(i, i)] += EPS_REGULARIZER;
        }
        return Ok(true);
    }
    Ok(false)
}

pub fn fid(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<FidResult> {
    if a.width() != b.width() {
        return Err(Error::shape(
            "fid",
            format!("{} columns ({})", a.width(), a.source),
            format!("{} columns ({})", b.width(), b.source),
        ));
    }
    let (mu_a, mut cov_a) = mean_and_covariance(&a.embeddings)?;
    let (mu_b, mut cov_b) = mean_and_covariance(&b.embeddings)?;
    let regularized = regularize(&mut cov_a)? | regularize(&mut cov_b)?;

    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y) * (x - y)).sum();
    let root_a = psd_sqrt(&cov_a)?;
    let mut inner = root_a.matmul(&cov_b)?.matmul(&root_a)?;
    inner.symmetrize();
    let cross = psd_sqrt_trace(&inner)?;
    let traces = cov_a.trace() + cov_b.trace();
    let cov_term = traces - 2.0 * cross;

    let mut distance = mean_term + cov_term;
    if distance < 0.0 {
        if distance < -NEGATIVE_RESIDUE_TOL * traces.max(1.0) {
            return Err(Error::Numerical(format!(
                "Fréchet distance came out at {distance:e}"
            )));
        }
        distance = 0.0;
    }
    Ok(FidResult {
        distance,
        regularized,
    })
}

/// Uniform subset of `n` rows without replacement (partial Fisher-Yates).
pub fn subsample(set: &EmbeddingSet, n: usize, rng: &mut SeededRng) -> Result<EmbeddingSet> {
    if n > set.len() {
        return Err(Error::invalid(format!(
            "cannot draw {n} rows from a set of {}",
            set.len()
        )));
    }
    let mut idx: Vec<usize> = (0..set.len()).collect();
    for i in 0..n {
        let j = i + rng.below(set.len() - i);
        idx.swap(i, j);
    }
    idx.truncate(n);
    EmbeddingSet::new(set.embeddings.select_rows(&idx), format!("{} (subset of {n})", set.source))
}
