//! Trainable token-embedding table, its frozen anchor copy, distribution
//! statistics, growth policies and checkpoint files.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

use crate::bpe::{quote_token, TokenId};
use crate::error::{Error, Result};
use crate::matfile;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TEIREMB1";

/// Read access to embedding rows, shared by trainable and frozen tables.
pub trait EmbeddingRows<T: Scalar> {
    fn row(&self, id: TokenId) -> ArrayView1<'_, T>;
    fn row_count(&self) -> usize;
    fn dim(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T: Scalar> {
    matrix: Array2<T>,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        EmbeddingTable {
            matrix: Array2::zeros((rows, dim)),
        }
    }

    pub fn from_matrix(matrix: Array2<T>) -> Result<Self> {
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("embedding matrix contains non-finite entries".into()));
        }
        Ok(EmbeddingTable { matrix })
    }

    pub fn from_rows(rows: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        let matrix = Array2::from_shape_vec((rows, dim), data)
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        Self::from_matrix(matrix)
    }

    pub fn matrix(&self) -> &Array2<T> {
        &self.matrix
    }

    pub fn row_mut(&mut self, id: TokenId) -> ndarray::ArrayViewMut1<'_, T> {
        self.matrix.row_mut(id as usize)
    }

    /// Overwrite selected rows with fresh draws from `policy`.
    pub fn reinit_rows(&mut self, ids: &[TokenId], policy: InitPolicy, seed: u64) -> Result<()> {
        let (mu, sigma) = policy.params(self)?;
        let normal = normal(mu, sigma)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &id in ids {
            for v in self.matrix.row_mut(id as usize) {
                *v = T::of(normal.sample(&mut rng));
            }
        }
        Ok(())
    }

    /// Values in row-major order.
    pub fn values(&self) -> impl Iterator<Item = T> + '_ {
        self.matrix.iter().copied()
    }
}

impl<T: Scalar> EmbeddingRows<T> for EmbeddingTable<T> {
    fn row(&self, id: TokenId) -> ArrayView1<'_, T> {
        self.matrix.row(id as usize)
    }

    fn row_count(&self) -> usize {
        self.matrix.nrows()
    }

    fn dim(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Frozen copy of a trained table. Exposes no mutation.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTable<T: Scalar> {
    inner: EmbeddingTable<T>,
}

impl<T: Scalar> AnchorTable<T> {
    pub fn table(&self) -> &EmbeddingTable<T> {
        &self.inner
    }
}

impl<T: Scalar> EmbeddingRows<T> for AnchorTable<T> {
    fn row(&self, id: TokenId) -> ArrayView1<'_, T> {
        self.inner.row(id)
    }

    fn row_count(&self) -> usize {
        self.inner.row_count()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }
}

/// Holds the anchor; it can be filled exactly once.
#[derive(Debug, Clone, Default)]
pub struct AnchorSlot<T: Scalar> {
    anchor: Option<AnchorTable<T>>,
}

impl<T: Scalar> AnchorSlot<T> {
    pub fn new() -> Self {
        AnchorSlot { anchor: None }
    }

    pub fn snapshot_anchor(&mut self, table: &EmbeddingTable<T>) -> Result<&AnchorTable<T>> {
        if self.anchor.is_some() {
            return Err(Error::State("anchor table already snapshotted".into()));
        }
        Ok(self.anchor.insert(AnchorTable { inner: table.clone() }))
    }

    pub fn get(&self) -> Option<&AnchorTable<T>> {
        self.anchor.as_ref()
    }
}

/// Scalar moments over every entry of a table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistStats {
    pub mu: f64,
    /// Population standard deviation.
    pub sigma: f64,
}

/// Mean and population standard deviation of a set of values (two-pass, `f64`).
pub fn moments<T: Scalar>(values: impl Iterator<Item = T> + Clone) -> Option<DistStats> {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values.clone() {
        sum += v.wide();
        n += 1;
    }
    if n == 0 {
        return None;
    }
    let mu = sum / n as f64;
    let ss: f64 = values.map(|v| (v.wide() - mu).powi(2)).sum();
    Some(DistStats {
        mu,
        sigma: (ss / n as f64).sqrt(),
    })
}

pub fn dist_stats<T: Scalar>(table: &EmbeddingTable<T>) -> Result<DistStats> {
    if table.row_count() == 0 || table.dim() == 0 {
        return Err(Error::InvalidInput("distribution stats of an empty table".into()));
    }
    Ok(moments(table.matrix.iter().copied()).expect("non-empty"))
}

/// How freshly created rows are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InitPolicy {
    /// Match the scalar moments of the table being grown.
    Matched,
    Fixed { mu: f64, sigma: f64 },
}

impl InitPolicy {
    pub const BASELINE: InitPolicy = InitPolicy::Fixed { mu: 0.0, sigma: 0.02 };

    fn params<T: Scalar>(&self, table: &EmbeddingTable<T>) -> Result<(f64, f64)> {
        match *self {
            InitPolicy::Matched => {
                let s = dist_stats(table)?;
                Ok((s.mu, s.sigma))
            }
            InitPolicy::Fixed { mu, sigma } => Ok((mu, sigma)),
        }
    }

    pub fn label(&self) -> String {
        match self {
            InitPolicy::Matched => "matched".into(),
            InitPolicy::Fixed { mu, sigma } => format!("fixed({mu},{sigma})"),
        }
    }
}

fn normal(mu: f64, sigma: f64) -> Result<Normal<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() || !mu.is_finite() {
        return Err(Error::InvalidInput(format!("invalid normal parameters N({mu}, {sigma}^2)")));
    }
    Normal::new(mu, sigma).map_err(|e| Error::InvalidInput(e.to_string()))
}

/// Append `n_new` rows drawn i.i.d. from the policy's normal distribution.
///
/// Existing rows are copied verbatim. The matched policy reads the moments
/// of the table before growth.
pub fn expand<T: Scalar>(
    table: &EmbeddingTable<T>,
    n_new: usize,
    policy: InitPolicy,
    seed: u64,
) -> Result<EmbeddingTable<T>> {
    if n_new == 0 {
        return Ok(table.clone());
    }
    let (mu, sigma) = policy.params(table)?;
    let normal = normal(mu, sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = table.dim();
    let fresh: Vec<T> = (0..n_new * dim).map(|_| T::of(normal.sample(&mut rng))).collect();
    let fresh = Array2::from_shape_vec((n_new, dim), fresh).expect("shape");
    let matrix = ndarray::concatenate(Axis(0), &[table.matrix.view(), fresh.view()])
        .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    Ok(EmbeddingTable { matrix })
}

/// Kolmogorov–Smirnov distance between the sample and `N(mu, sigma^2)`.
pub fn ks_statistic(samples: &[f64], mu: f64, sigma: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    if sigma <= 0.0 {
        // point mass: distance is the mass not sitting exactly at mu
        let at = xs.iter().filter(|&&x| x == mu).count() as f64;
        return 1.0 - at / n;
    }
    let dist = StatNormal::new(mu, sigma).expect("valid normal");
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = dist.cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic one-sample KS critical value at the 1% level.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

/// Sidecar metadata stored next to each checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub rows: usize,
    pub dim: usize,
    pub vocab_hash: String,
    pub task_index: usize,
    pub policy: String,
    pub seed: u64,
}

/// SHA-256 over the quoted token lines.
pub fn vocab_hash(tokens: &[Vec<u8>]) -> String {
    let mut h = Sha256::new();
    for t in tokens {
        h.update(quote_token(t).as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

pub fn save_checkpoint(table: &EmbeddingTable<f32>, manifest: &CheckpointManifest, path: &Path) -> Result<()> {
    if manifest.rows != table.row_count() || manifest.dim != table.dim() {
        return Err(Error::DimensionMismatch(format!(
            "manifest declares {}x{}, table is {}x{}",
            manifest.rows,
            manifest.dim,
            table.row_count(),
            table.dim()
        )));
    }
    let data: Vec<f32> = table.values().collect();
    matfile::write_matrix(path, CHECKPOINT_MAGIC, table.row_count(), table.dim(), &data)?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(manifest).expect("serializable");
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn load_checkpoint(path: &Path) -> Result<EmbeddingTable<f32>> {
    let (rows, dim, data) = matfile::read_matrix(path, CHECKPOINT_MAGIC)?;
    EmbeddingTable::from_rows(rows, dim, data)
}

pub fn load_manifest(path: &Path) -> Result<CheckpointManifest> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: side,
        msg: e.to_string(),
    })
}

/// Load a checkpoint and verify it against the vocabulary it belongs to.
pub fn load_checkpoint_checked(path: &Path, tokens: &[Vec<u8>]) -> Result<EmbeddingTable<f32>> {
    let table = load_checkpoint(path)?;
    let manifest = load_manifest(path)?;
    if table.row_count() != tokens.len() || manifest.rows != tokens.len() {
        return Err(Error::DimensionMismatch(format!(
            "checkpoint {} has {} rows, vocabulary has {} tokens",
            path.display(),
            table.row_count(),
            tokens.len()
        )));
    }
    if manifest.dim != table.dim() {
        return Err(Error::DimensionMismatch(format!(
            "checkpoint {} dim {} disagrees with its manifest ({})",
            path.display(),
            table.dim(),
            manifest.dim
        )));
    }
    if manifest.vocab_hash != vocab_hash(tokens) {
        return Err(Error::DimensionMismatch(format!(
            "checkpoint {} was saved against a different vocabulary",
            path.display()
        )));
    }
    Ok(table)
}
