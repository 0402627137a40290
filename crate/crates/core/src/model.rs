//! Batch objective of the dual-encoder: images and anchor texts are fixed
//! features, trainable texts are encoded from the embedding table.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::bpe::TokenId;
use crate::embedding::{EmbeddingRows, EmbeddingTable};
use crate::encoder::{encode_text, encode_text_grad_into, FrozenTextParams, RowGrads};
use crate::error::{Error, Result};
use crate::objectives::{total_loss, FeatureBatch, LossConfig};
use crate::scalar::Scalar;

/// One training example: an image, the anchor feature of its English
/// caption, and the token ids of its trainable-side caption.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T: Scalar> {
    pub image: usize,
    pub anchor: Vec<T>,
    pub ids: Vec<TokenId>,
}

/// Encode every sequence into one feature row each.
pub fn encode_all<T: Scalar, E: EmbeddingRows<T> + Sync>(
    seqs: &[Vec<TokenId>],
    table: &E,
    params: &FrozenTextParams<T>,
) -> Result<Array2<T>> {
    let rows: Vec<Vec<T>> = seqs
        .par_iter()
        .map(|ids| encode_text(ids, table, params))
        .collect::<Result<_>>()?;
    let mut out = Array2::<T>::zeros((seqs.len(), params.d_out()));
    for (mut dst, src) in out.rows_mut().into_iter().zip(rows) {
        dst.iter_mut().zip(src).for_each(|(d, s)| *d = s);
    }
    Ok(out)
}

/// Loss of the batch and its gradient with respect to the embedding rows.
pub fn batch_objective<T: Scalar>(
    batch: &[&Sample<T>],
    images: ArrayView2<'_, T>,
    table: &EmbeddingTable<T>,
    params: &FrozenTextParams<T>,
    loss: &LossConfig,
) -> Result<(f64, RowGrads)> {
    let k = batch.len();
    if k == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let d_out = params.d_out();
    let mut r_i = Array2::<T>::zeros((k, d_out));
    let mut r_e = Array2::<T>::zeros((k, d_out));
    let mut r_f = Array2::<T>::zeros((k, d_out));
    for (row, s) in batch.iter().enumerate() {
        if s.image >= images.nrows() {
            return Err(Error::InvalidInput(format!("image {} out of range", s.image)));
        }
        if s.anchor.len() != d_out {
            return Err(Error::DimensionMismatch("anchor feature width".into()));
        }
        r_i.row_mut(row).assign(&images.row(s.image));
        r_e.row_mut(row).iter_mut().zip(&s.anchor).for_each(|(d, v)| *d = *v);
        let f = encode_text(&s.ids, table, params)?;
        r_f.row_mut(row).iter_mut().zip(f).for_each(|(d, v)| *d = v);
    }
    let out = total_loss(&FeatureBatch::new(r_i, r_e, r_f)?, loss)?;
    let mut grads = RowGrads::new();
    for (s, g) in batch.iter().zip(out.grad_rf.rows()) {
        encode_text_grad_into(&mut grads, &s.ids, table, params, g.as_slice().expect("owned rows are contiguous"))?;
    }
    Ok((out.loss, grads))
}

/// Mean squared per-sample gradient norm (batch size 1), accumulated in `f64`.
pub fn fisher_trace<T: Scalar>(
    samples: &[Sample<T>],
    images: ArrayView2<'_, T>,
    table: &EmbeddingTable<T>,
    params: &FrozenTextParams<T>,
    loss: &LossConfig,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("fisher trace of an empty dataset".into()));
    }
    let norms: Vec<f64> = samples
        .par_iter()
        .map(|s| batch_objective(&[s], images, table, params, loss).map(|(_, g)| g.squared_norm()))
        .collect::<Result<_>>()?;
    Ok(norms.iter().sum::<f64>() / samples.len() as f64)
}

/// Mean batch loss over consecutive batches of `batch_size` in the given order.
pub fn mean_loss<T: Scalar>(
    samples: &[Sample<T>],
    batch_size: usize,
    images: ArrayView2<'_, T>,
    table: &EmbeddingTable<T>,
    params: &FrozenTextParams<T>,
    loss: &LossConfig,
) -> Result<f64> {
    if samples.is_empty() || batch_size == 0 {
        return Err(Error::InvalidInput("mean loss needs samples and a positive batch size".into()));
    }
    let chunks: Vec<Vec<&Sample<T>>> = samples.chunks(batch_size).map(|c| c.iter().collect()).collect();
    let losses: Vec<f64> = chunks
        .par_iter()
        .map(|c| batch_objective(c, images, table, params, loss).map(|(l, _)| l))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{expand, InitPolicy};

    fn setup() -> (EmbeddingTable<f64>, FrozenTextParams<f64>, Array2<f64>, Vec<Sample<f64>>) {
        let table = expand(&EmbeddingTable::<f64>::zeros(0, 4), 6, InitPolicy::Fixed { mu: 0.0, sigma: 0.5 }, 3).unwrap();
        let params = FrozenTextParams::new(4, 3, 8, 11).unwrap();
        let images = Array2::from_shape_fn((3, 3), |(a, b)| ((a * 3 + b) as f64 * 0.7).sin());
        let samples = (0..3)
            .map(|i| Sample {
                image: i,
                anchor: vec![0.1 * i as f64, -0.2, 0.3],
                ids: vec![i as TokenId, (i + 2) as TokenId, 5],
            })
            .collect();
        (table, params, images, samples)
    }

    #[test]
    fn zero_weights_give_zero_fisher() {
        let (table, params, images, samples) = setup();
        let loss = LossConfig { tau: 0.07, gamma_cm: 0.0, gamma_cl: 0.0 };
        assert_eq!(fisher_trace(&samples, images.view(), &table, &params, &loss).unwrap(), 0.0);
    }

    #[test]
    fn single_sample_fisher_is_its_squared_norm() {
        let (table, params, images, samples) = setup();
        let loss = LossConfig::default();
        let one = &samples[..1];
        let (_, g) = batch_objective(&[&one[0]], images.view(), &table, &params, &loss).unwrap();
        assert_eq!(fisher_trace(one, images.view(), &table, &params, &loss).unwrap(), g.squared_norm());
        assert!(fisher_trace::<f64>(&[], images.view(), &table, &params, &loss).is_err());
    }

    #[test]
    fn mean_loss_of_one_batch_is_the_batch_loss() {
        let (table, params, images, samples) = setup();
        let loss = LossConfig::default();
        let refs: Vec<&Sample<f64>> = samples.iter().collect();
        let (l, _) = batch_objective(&refs, images.view(), &table, &params, &loss).unwrap();
        assert_eq!(mean_loss(&samples, 3, images.view(), &table, &params, &loss).unwrap(), l);
    }
}
