//! Frozen feature extractors.
//!
//! The text side maps a token sequence to `tanh(W·h + b)` where `h` is the
//! mean over positions of `embedding[id] + pos[position]`. Only the
//! embedding table is trainable, so besides the forward pass this module
//! provides the exact adjoint with respect to the embedding rows.
//!
//! The image side is a fixed matrix of precomputed features.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::bpe::TokenId;
use crate::embedding::EmbeddingRows;
use crate::error::{Error, Result};
use crate::matfile;
use crate::scalar::Scalar;

pub const IMAGE_MAGIC: &[u8; 8] = b"TEIRIMG1";
pub const DEFAULT_MAX_LEN: usize = 32;

/// Frozen parameters of the text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTextParams<T: Scalar> {
    /// `d_out × d` projection.
    pub w: Array2<T>,
    pub b: Array1<T>,
    pub max_len: usize,
    /// `max_len × d` sinusoidal table.
    pub pos: Array2<T>,
    pub seed: u64,
}

/// `pos[i][2k] = sin(i / 10000^(2k/d))`, `pos[i][2k+1] = cos(i / 10000^(2k/d))`.
pub fn sinusoidal_positions<T: Scalar>(max_len: usize, dim: usize) -> Array2<T> {
    Array2::from_shape_fn((max_len, dim), |(i, c)| {
        let k2 = (c - c % 2) as f64;
        let angle = i as f64 / 10000f64.powf(k2 / dim as f64);
        T::of(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

impl<T: Scalar> FrozenTextParams<T> {
    /// Draw `W` with entries `N(0, (1/√d)²)`; `b` is zero.
    pub fn new(dim: usize, d_out: usize, max_len: usize, seed: u64) -> Result<Self> {
        if dim == 0 || d_out == 0 || max_len == 0 {
            return Err(Error::InvalidInput("encoder dimensions must be positive".into()));
        }
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Array2::from_shape_simple_fn((d_out, dim), || T::of(normal.sample(&mut rng)));
        Ok(FrozenTextParams {
            w,
            b: Array1::zeros(d_out),
            max_len,
            pos: sinusoidal_positions(max_len, dim),
            seed,
        })
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.w.nrows()
    }
}

/// Sparse per-row gradients with `f64` accumulation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RowGrads {
    rows: BTreeMap<TokenId, Vec<f64>>,
}

impl RowGrads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_row(&mut self, id: TokenId, grad: &[f64]) {
        let slot = self.rows.entry(id).or_insert_with(|| vec![0.0; grad.len()]);
        for (s, g) in slot.iter_mut().zip(grad) {
            *s += g;
        }
    }

    pub fn merge(&mut self, other: &RowGrads) {
        for (&id, g) in &other.rows {
            self.add_row(id, g);
        }
    }

    pub fn get(&self, id: TokenId) -> Option<&[f64]> {
        self.rows.get(&id).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, id: TokenId) -> Option<&mut Vec<f64>> {
        self.rows.get_mut(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (TokenId, &[f64])> {
        self.rows.iter().map(|(&id, g)| (id, g.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Sum of squared entries.
    pub fn squared_norm(&self) -> f64 {
        self.rows.values().flatten().map(|g| g * g).sum()
    }
}

fn check_ids<T: Scalar>(ids: &[TokenId], table: &impl EmbeddingRows<T>, max_len: usize) -> Result<usize> {
    if ids.is_empty() {
        return Err(Error::InvalidInput("cannot encode an empty token sequence".into()));
    }
    let len = ids.len().min(max_len);
    for &id in &ids[..len] {
        if id as usize >= table.row_count() {
            return Err(Error::InvalidId {
                id,
                len: table.row_count(),
            });
        }
    }
    Ok(len)
}

/// Forward pass in `f64`; returns the features and the used length.
fn forward<T: Scalar>(
    ids: &[TokenId],
    table: &impl EmbeddingRows<T>,
    params: &FrozenTextParams<T>,
) -> Result<(Vec<f64>, usize)> {
    if table.dim() != params.dim() {
        return Err(Error::DimensionMismatch(format!(
            "table dim {} vs encoder dim {}",
            table.dim(),
            params.dim()
        )));
    }
    let len = check_ids(ids, table, params.max_len)?;
    let d = params.dim();
    let mut h = vec![0.0f64; d];
    for (i, &id) in ids[..len].iter().enumerate() {
        let row = table.row(id);
        let pos = params.pos.row(i);
        for c in 0..d {
            h[c] += row[c].wide() + pos[c].wide();
        }
    }
    let inv = 1.0 / len as f64;
    h.iter_mut().for_each(|v| *v *= inv);
    let r = params
        .w
        .rows()
        .into_iter()
        .zip(params.b.iter())
        .map(|(w_row, &b)| {
            let z: f64 = w_row.iter().zip(&h).map(|(w, x)| w.wide() * x).sum::<f64>() + b.wide();
            z.tanh()
        })
        .collect();
    Ok((r, len))
}

/// Text feature of a token sequence (truncated to `max_len`).
pub fn encode_text<T: Scalar>(
    ids: &[TokenId],
    table: &impl EmbeddingRows<T>,
    params: &FrozenTextParams<T>,
) -> Result<Vec<T>> {
    let (r, _) = forward(ids, table, params)?;
    Ok(r.into_iter().map(T::of).collect())
}

/// Adjoint of [`encode_text`]: gradient of `upstream · r` with respect to
/// every embedding row used by the sequence, accumulated into `out`.
pub fn encode_text_grad_into<T: Scalar>(
    out: &mut RowGrads,
    ids: &[TokenId],
    table: &impl EmbeddingRows<T>,
    params: &FrozenTextParams<T>,
    upstream: &[f64],
) -> Result<()> {
    if upstream.len() != params.d_out() {
        return Err(Error::DimensionMismatch(format!(
            "upstream length {} vs encoder output {}",
            upstream.len(),
            params.d_out()
        )));
    }
    let (r, len) = forward(ids, table, params)?;
    let inv = 1.0 / len as f64;
    let delta: Vec<f64> = r.iter().zip(upstream).map(|(r, u)| (1.0 - r * r) * u).collect();
    let mut g = vec![0.0f64; params.dim()];
    for (w_row, dz) in params.w.rows().into_iter().zip(&delta) {
        for (gc, w) in g.iter_mut().zip(w_row.iter()) {
            *gc += w.wide() * dz;
        }
    }
    g.iter_mut().for_each(|v| *v *= inv);
    for &id in &ids[..len] {
        out.add_row(id, &g);
    }
    Ok(())
}

pub fn encode_text_grad<T: Scalar>(
    ids: &[TokenId],
    table: &impl EmbeddingRows<T>,
    params: &FrozenTextParams<T>,
    upstream: &[f64],
) -> Result<RowGrads> {
    let mut out = RowGrads::new();
    encode_text_grad_into(&mut out, ids, table, params, upstream)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureSource {
    File(PathBuf),
    Synthetic { seed: u64 },
}

/// Fixed image features, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatureProvider {
    features: Array2<f32>,
    source: FeatureSource,
}

impl ImageFeatureProvider {
    pub fn from_matrix(features: Array2<f32>, source: FeatureSource) -> Result<Self> {
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "image feature row {} is not finite",
                pos / features.ncols().max(1)
            )));
        }
        Ok(ImageFeatureProvider { features, source })
    }

    /// Unit-normalised Gaussian rows drawn from `seed`.
    pub fn synthetic(n_images: usize, d_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Array2::<f32>::zeros((n_images, d_out));
        for mut row in features.rows_mut() {
            let v: Vec<f64> = (0..d_out).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            row.iter_mut().zip(v).for_each(|(r, x)| *r = (x / norm) as f32);
        }
        ImageFeatureProvider {
            features,
            source: FeatureSource::Synthetic { seed },
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (rows, cols, data) = matfile::read_matrix(path, IMAGE_MAGIC)?;
        let features = Array2::from_shape_vec((rows, cols), data).expect("shape checked by decoder");
        Self::from_matrix(features, FeatureSource::File(path.to_path_buf()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let data: Vec<f32> = self.features.iter().copied().collect();
        matfile::write_matrix(path, IMAGE_MAGIC, self.len(), self.d_out(), &data)
    }

    pub fn image_feature(&self, index: usize) -> Result<ArrayView1<'_, f32>> {
        if index >= self.len() {
            return Err(Error::InvalidInput(format!(
                "image index {index} out of range ({} images)",
                self.len()
            )));
        }
        Ok(self.features.row(index))
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn source(&self) -> &FeatureSource {
        &self.source
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn d_out(&self) -> usize {
        self.features.ncols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{expand, EmbeddingTable, InitPolicy};

    fn identity_params(d: usize) -> FrozenTextParams<f64> {
        FrozenTextParams {
            w: Array2::eye(d),
            b: Array1::zeros(d),
            max_len: 4,
            pos: sinusoidal_positions(4, d),
            seed: 0,
        }
    }

    #[test]
    fn single_zero_token_gives_tanh_of_position() {
        let p = identity_params(6);
        let table = EmbeddingTable::<f64>::zeros(3, 6);
        let r = encode_text(&[2], &table, &p).unwrap();
        for (c, v) in r.iter().enumerate() {
            assert!((v - p.pos[[0, c]].tanh()).abs() < 1e-15);
        }
        // position 0: sin(0) = 0, cos(0) = 1
        assert_eq!(p.pos[[0, 0]], 0.0);
        assert_eq!(p.pos[[0, 1]], 1.0);
    }

    #[test]
    fn truncation_matches_prefix() {
        let p = FrozenTextParams::<f32>::new(8, 5, 3, 1).unwrap();
        let t = expand(&EmbeddingTable::zeros(0, 8), 10, InitPolicy::Fixed { mu: 0.0, sigma: 0.5 }, 2).unwrap();
        let long = encode_text(&[1, 2, 3, 4, 9], &t, &p).unwrap();
        let short = encode_text(&[1, 2, 3], &t, &p).unwrap();
        assert_eq!(long, short);
        assert!(long.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn input_errors() {
        let p = FrozenTextParams::<f32>::new(4, 4, 8, 1).unwrap();
        let t = EmbeddingTable::<f32>::zeros(3, 4);
        assert!(matches!(encode_text(&[], &t, &p), Err(Error::InvalidInput(_))));
        assert!(matches!(encode_text(&[0, 3], &t, &p), Err(Error::InvalidId { id: 3, .. })));
    }

    #[test]
    fn gradient_accumulates_repeats_linearly() {
        let p = FrozenTextParams::<f64>::new(8, 8, 8, 3).unwrap();
        let t = expand(&EmbeddingTable::zeros(0, 8), 5, InitPolicy::Fixed { mu: 0.0, sigma: 0.3 }, 4).unwrap();
        let u: Vec<f64> = (0..8).map(|i| (i as f64 - 3.5) / 4.0).collect();
        let zero = encode_text_grad(&[1, 2], &t, &p, &[0.0; 8]).unwrap();
        assert!(zero.iter().all(|(_, g)| g.iter().all(|&v| v == 0.0)));

        let g = encode_text_grad(&[1, 1, 2], &t, &p, &u).unwrap();
        let (g1, g2) = (g.get(1).unwrap(), g.get(2).unwrap());
        for c in 0..8 {
            assert_eq!(g1[c], 2.0 * g2[c]);
        }
    }

    #[test]
    fn image_provider_is_stable() {
        let a = ImageFeatureProvider::synthetic(5, 4, 7);
        let b = ImageFeatureProvider::synthetic(5, 4, 7);
        assert_eq!(a.features(), b.features());
        let x = a.image_feature(3).unwrap().to_vec();
        let y = a.image_feature(3).unwrap().to_vec();
        assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(a.image_feature(5).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("images.feat");
        a.save(&path).unwrap();
        let back = ImageFeatureProvider::load(&path).unwrap();
        assert_eq!(back.features(), a.features());
        assert_eq!(std::fs::read(&path).unwrap(), {
            back.save(&dir.path().join("again.feat")).unwrap();
            std::fs::read(dir.path().join("again.feat")).unwrap()
        });
    }
}
