//! Finite-difference verification of the embedding-row gradients.
//!
//! Random small instances are built in `f64`; every coordinate of every row
//! that appears in the batch is perturbed by `±step` and the central
//! difference of the total loss is compared against the analytic gradient.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::bpe::TokenId;
use crate::embedding::EmbeddingTable;
use crate::encoder::FrozenTextParams;
use crate::error::{Error, Result};
use crate::model::{batch_objective, Sample};
use crate::objectives::LossConfig;
use crate::seed::indexed_seed;

/// Test hook: add `delta` to one analytic gradient entry before comparing,
/// in every instance whose batch uses the row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corruption {
    pub row: TokenId,
    pub col: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub instances: usize,
    pub dim: usize,
    pub d_out: usize,
    pub batch: usize,
    pub max_len: usize,
    pub vocab: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    pub corrupt: Option<Corruption>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            seed: 0,
            instances: 8,
            dim: 8,
            d_out: 8,
            batch: 4,
            max_len: 5,
            vocab: 12,
            step: 1e-3,
            tolerance: 1e-4,
            floor: 1e-2,
            corrupt: None,
        }
    }
}

/// One compared gradient entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub instance: usize,
    pub gamma_cm: f64,
    pub gamma_cl: f64,
    pub row: TokenId,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst: Entry,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst.rel_err <= self.tolerance
    }
}

impl std::fmt::Display for Entry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "instance={} gamma_cm={} gamma_cl={} row={} col={} analytic={:.9e} numeric={:.9e} rel_err={:.3e}",
            self.instance, self.gamma_cm, self.gamma_cl, self.row, self.col, self.analytic, self.numeric, self.rel_err
        )
    }
}

struct Instance {
    table: EmbeddingTable<f64>,
    params: FrozenTextParams<f64>,
    images: Array2<f64>,
    samples: Vec<Sample<f64>>,
}

fn build(cfg: &GradCheckConfig, index: usize) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(indexed_seed(cfg.seed, "gradcheck", index));
    let normal = Normal::new(0.0, 0.5).expect("valid std");
    let table = Array2::from_shape_simple_fn((cfg.vocab, cfg.dim), || normal.sample(&mut rng));
    let table = EmbeddingTable::from_matrix(table)?;
    let params = FrozenTextParams::new(cfg.dim, cfg.d_out, cfg.max_len, rng.random())?;
    let images = Array2::from_shape_simple_fn((cfg.batch, cfg.d_out), || StandardNormal.sample(&mut rng));
    let samples = (0..cfg.batch)
        .map(|image| {
            let len = rng.random_range(1..=cfg.max_len);
            Sample {
                image,
                anchor: (0..cfg.d_out).map(|_| StandardNormal.sample(&mut rng)).collect(),
                ids: (0..len).map(|_| rng.random_range(0..cfg.vocab) as TokenId).collect(),
            }
        })
        .collect();
    Ok(Instance { table, params, images, samples })
}

fn check_instance(cfg: &GradCheckConfig, index: usize, inst: &Instance, loss: &LossConfig, worst: &mut Option<Entry>) -> Result<usize> {
    let batch: Vec<&Sample<f64>> = inst.samples.iter().collect();
    let objective = |table: &EmbeddingTable<f64>| batch_objective(&batch, inst.images.view(), table, &inst.params, loss);
    let (_, mut grads) = objective(&inst.table)?;
    if let Some(c) = cfg.corrupt {
        if c.col >= cfg.dim {
            return Err(Error::InvalidInput(format!("corrupted column {} out of range", c.col)));
        }
        // instances that do not use the row are left intact
        if let Some(row) = grads.get_mut(c.row) {
            row[c.col] += c.delta;
        }
    }
    let mut checked = 0;
    let mut table = inst.table.clone();
    for (row, g) in grads.iter() {
        for (col, &analytic) in g.iter().enumerate() {
            let orig = table.matrix()[[row as usize, col]];
            table.row_mut(row)[col] = orig + cfg.step;
            let (plus, _) = objective(&table)?;
            table.row_mut(row)[col] = orig - cfg.step;
            let (minus, _) = objective(&table)?;
            table.row_mut(row)[col] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.floor);
            checked += 1;
            if worst.is_none_or(|w| rel_err > w.rel_err) {
                *worst = Some(Entry {
                    instance: index,
                    gamma_cm: loss.gamma_cm,
                    gamma_cl: loss.gamma_cl,
                    row,
                    col,
                    analytic,
                    numeric,
                    rel_err,
                });
            }
        }
    }
    Ok(checked)
}

/// Compare analytic and central-difference gradients on random instances,
/// under both the default loss weights and unit weights.
pub fn grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.instances == 0 || cfg.batch == 0 || cfg.vocab == 0 || !(cfg.step > 0.0) {
        return Err(Error::InvalidInput("grad check needs instances, a batch, a vocabulary and a positive step".into()));
    }
    let losses = [
        LossConfig::default(),
        LossConfig { gamma_cm: 1.0, gamma_cl: 1.0, ..LossConfig::default() },
    ];
    let mut worst = None;
    let mut checked = 0;
    for index in 0..cfg.instances {
        let inst = build(cfg, index)?;
        for loss in &losses {
            checked += check_instance(cfg, index, &inst, loss, &mut worst)?;
        }
    }
    Ok(GradCheckReport {
        checked,
        worst: worst.expect("at least one entry is checked"),
        tolerance: cfg.tolerance,
    })
}
