//! Training objectives over a batch of image, anchor-text and trainable-text
//! features, with exact gradients with respect to the trainable-text side.
//!
//! * cross-modal: symmetric InfoNCE over cosine logits scaled by `1/tau`;
//! * cross-lingual: `1/(2K) Σ ‖r_E − r_F‖²` on raw features;
//! * total: `gamma_cm · cross-modal + gamma_cl · cross-lingual`.
//!
//! Image and anchor features are constants; no gradient flows into them.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch<T: Scalar> {
    pub r_i: Array2<T>,
    pub r_e: Array2<T>,
    pub r_f: Array2<T>,
}

impl<T: Scalar> FeatureBatch<T> {
    pub fn new(r_i: Array2<T>, r_e: Array2<T>, r_f: Array2<T>) -> Result<Self> {
        if r_i.dim() != r_f.dim() || r_e.dim() != r_f.dim() {
            return Err(Error::DimensionMismatch(format!(
                "batch shapes differ: images {:?}, anchor {:?}, trainable {:?}",
                r_i.dim(),
                r_e.dim(),
                r_f.dim()
            )));
        }
        Ok(FeatureBatch { r_i, r_e, r_f })
    }

    pub fn len(&self) -> usize {
        self.r_f.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.r_f.nrows() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub gamma_cm: f64,
    pub gamma_cl: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.07,
            gamma_cm: 0.01,
            gamma_cl: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// `K × d_out` gradient with respect to the trainable-text features.
    pub grad_rf: Array2<f64>,
}

fn unit_rows<T: Scalar>(m: &Array2<T>, name: &'static str) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut out = Array2::<f64>::zeros(m.dim());
    let mut norms = Vec::with_capacity(m.nrows());
    for (k, row) in m.rows().into_iter().enumerate() {
        let norm = row.iter().map(|v| v.wide() * v.wide()).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::DegenerateFeature { matrix: name, row: k });
        }
        out.row_mut(k)
            .iter_mut()
            .zip(row.iter())
            .for_each(|(o, v)| *o = v.wide() / norm);
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Cosine similarity of two vectors.
pub fn cosine<T: Scalar>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        let (x, y) = (x.wide(), y.wide());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa > 0.0 && bb > 0.0 {
        Some(ab / (aa.sqrt() * bb.sqrt()))
    } else {
        None
    }
}

/// Row-wise log-softmax probabilities with max subtraction.
fn softmax_rows(logits: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut probs = logits.clone();
    let mut lse = Vec::with_capacity(logits.nrows());
    for mut row in probs.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let l = m + s.ln();
        row.iter_mut().for_each(|v| *v = (*v - l).exp());
        lse.push(l);
    }
    (probs, lse)
}

/// Symmetric InfoNCE between images and trainable texts.
pub fn cm_loss<T: Scalar>(batch: &FeatureBatch<T>, tau: f64) -> Result<LossOutput> {
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {tau}")));
    }
    let k = batch.len();
    if k == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let (img, _) = unit_rows(&batch.r_i, "image")?;
    let (txt, txt_norm) = unit_rows(&batch.r_f, "trainable-text")?;
    // cos[a][b] = <img_a, txt_b>
    let cos = img.dot(&txt.t());
    let logits = &cos / tau;

    let (p_row, lse_row) = softmax_rows(&logits);
    let logits_t = logits.t().to_owned();
    let (p_col_t, lse_col) = softmax_rows(&logits_t);

    let kf = k as f64;
    let mut i2f = 0.0;
    let mut f2i = 0.0;
    for a in 0..k {
        i2f += lse_row[a] - logits[[a, a]];
        f2i += lse_col[a] - logits[[a, a]];
    }
    let loss = 0.5 * (i2f / kf + f2i / kf);

    // dL/dlogits[a][b]
    let mut g_logits = Array2::<f64>::zeros((k, k));
    for a in 0..k {
        for b in 0..k {
            let eye = if a == b { 1.0 } else { 0.0 };
            g_logits[[a, b]] = 0.5 / kf * ((p_row[[a, b]] - eye) + (p_col_t[[b, a]] - eye));
        }
    }
    // logits[a][b] = <img_a, txt_b>/tau with txt_b = f_b/|f_b|
    let mut grad_rf = Array2::<f64>::zeros(batch.r_f.dim());
    for b in 0..k {
        let tb = txt.row(b);
        let mut acc = vec![0.0f64; txt.ncols()];
        for a in 0..k {
            let g = g_logits[[a, b]];
            if g == 0.0 {
                continue;
            }
            let c = cos[[a, b]];
            for (j, slot) in acc.iter_mut().enumerate() {
                *slot += g * (img[[a, j]] - c * tb[j]);
            }
        }
        let scale = 1.0 / (tau * txt_norm[b]);
        grad_rf.row_mut(b).iter_mut().zip(acc).for_each(|(o, v)| *o = v * scale);
    }
    Ok(LossOutput { loss, grad_rf })
}

/// Mean squared distance between anchor and trainable text features.
pub fn cl_loss<T: Scalar>(batch: &FeatureBatch<T>) -> Result<LossOutput> {
    let k = batch.len();
    if k == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let kf = k as f64;
    let mut loss = 0.0;
    let mut grad_rf = Array2::<f64>::zeros(batch.r_f.dim());
    for ((e, f), mut g) in batch
        .r_e
        .rows()
        .into_iter()
        .zip(batch.r_f.rows())
        .zip(grad_rf.rows_mut())
    {
        for ((ev, fv), gv) in e.iter().zip(f.iter()).zip(g.iter_mut()) {
            let diff = fv.wide() - ev.wide();
            loss += diff * diff;
            *gv = diff / kf;
        }
    }
    Ok(LossOutput {
        loss: loss / (2.0 * kf),
        grad_rf,
    })
}

/// Weighted sum of both objectives. A zero weight skips its term entirely.
pub fn total_loss<T: Scalar>(batch: &FeatureBatch<T>, cfg: &LossConfig) -> Result<LossOutput> {
    let mut out = LossOutput {
        loss: 0.0,
        grad_rf: Array2::zeros(batch.r_f.dim()),
    };
    if cfg.gamma_cm != 0.0 {
        let cm = cm_loss(batch, cfg.tau)?;
        out.loss += cfg.gamma_cm * cm.loss;
        out.grad_rf.scaled_add(cfg.gamma_cm, &cm.grad_rf);
    }
    if cfg.gamma_cl != 0.0 {
        let cl = cl_loss(batch)?;
        out.loss += cfg.gamma_cl * cl.loss;
        out.grad_rf.scaled_add(cfg.gamma_cl, &cl.grad_rf);
    }
    Ok(out)
}
