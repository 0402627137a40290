//! Run configuration: a flat schema of dotted keys (`loss.tau`,
//! `optim.lr`, ...) read from TOML, with `key=value` overrides layered on top.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::bench::BenchConfig;
use crate::error::{Error, Result};
use crate::objectives::LossConfig;
use crate::optim::{LambdaScope, OptimConfig, OptimKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub d_out: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabConfig {
    pub size_per_task: usize,
    pub oracle: bool,
    /// Oracle vocabulary size; 0 selects the size a continual run would reach
    /// if no task shared a merged token.
    pub oracle_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    pub kind: OptimKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Continual,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Switch {
    On,
    Off,
}

/// Which parts of the update the per-token scale applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegMode {
    Off,
    Gradient,
    Decay,
    On,
}

impl RegMode {
    pub fn scope(self) -> Option<LambdaScope> {
        match self {
            RegMode::Off => None,
            RegMode::Gradient => Some(LambdaScope::Gradient),
            RegMode::Decay => Some(LambdaScope::Decay),
            RegMode::On => Some(LambdaScope::Both),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub mode: Mode,
    pub seed: u64,
    /// Languages after the anchor, in training order; empty means `1..T`.
    pub task_order: Vec<usize>,
    pub teir_init: Switch,
    pub teir_reg: RegMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub kind: OptimKind,
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub bench: BenchConfig,
    pub model: ModelConfig,
    pub vocab: VocabConfig,
    pub loss: LossConfig,
    pub optim: OptimSection,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            bench: BenchConfig::default(),
            model: ModelConfig {
                dim: 64,
                d_out: 64,
                max_len: 32,
            },
            vocab: VocabConfig {
                size_per_task: 512,
                oracle: false,
                oracle_size: 0,
            },
            loss: LossConfig::default(),
            optim: OptimSection {
                kind: OptimKind::AdamW,
                lr: 2e-1,
                weight_decay: 5e-5,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-3,
                warmup_fraction: 0.1,
            },
            train: TrainConfig {
                epochs: 3,
                batch_size: 32,
                mode: Mode::Continual,
                seed: 0,
                task_order: Vec::new(),
                teir_init: Switch::On,
                teir_reg: RegMode::On,
            },
            pretrain: PretrainConfig {
                kind: OptimKind::AdamW,
                epochs: 10,
                lr: 2e-2,
            },
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if let Err((key, msg)) = self.bench.check() {
            return Err(Error::config(key, msg));
        }
        let positive = [
            ("model.dim", self.model.dim),
            ("model.d_out", self.model.d_out),
            ("model.max_len", self.model.max_len),
            ("train.epochs", self.train.epochs),
            ("pretrain.epochs", self.pretrain.epochs),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if self.vocab.size_per_task < 257 {
            return Err(Error::config("vocab.size_per_task", "must be at least 257"));
        }
        if self.vocab.oracle_size != 0 && self.vocab.oracle_size < 257 {
            return Err(Error::config("vocab.oracle_size", "must be 0 (auto) or at least 257"));
        }
        if self.train.batch_size < 2 {
            return Err(Error::config("train.batch_size", "contrastive training needs at least 2"));
        }
        if !(self.loss.tau > 0.0) {
            return Err(Error::config("loss.tau", "must be positive"));
        }
        if !(self.loss.gamma_cm >= 0.0) {
            return Err(Error::config("loss.gamma_cm", "must be non-negative"));
        }
        if !(self.loss.gamma_cl >= 0.0) {
            return Err(Error::config("loss.gamma_cl", "must be non-negative"));
        }
        if !(self.pretrain.lr > 0.0) {
            return Err(Error::config("pretrain.lr", "must be positive"));
        }
        if self.model.d_out != self.bench.d_out {
            return Err(Error::config("model.d_out", "must equal bench.d_out"));
        }
        let n = self.bench.n_languages;
        if !self.train.task_order.is_empty() {
            let mut sorted = self.train.task_order.clone();
            sorted.sort_unstable();
            if sorted != (1..n).collect::<Vec<_>>() {
                return Err(Error::config("train.task_order", format!("must be a permutation of 1..{n}")));
            }
        }
        self.optim_config(1, self.optim.lr).validate()
    }

    /// Languages in training order, anchor first.
    pub fn languages(&self) -> Vec<usize> {
        let mut out = vec![0];
        if self.train.task_order.is_empty() {
            out.extend(1..self.bench.n_languages);
        } else {
            out.extend(&self.train.task_order);
        }
        out
    }

    pub fn oracle_size(&self) -> usize {
        if self.vocab.oracle_size != 0 {
            return self.vocab.oracle_size;
        }
        let t = self.bench.n_languages;
        self.vocab.size_per_task * t - 256 * (t - 1)
    }

    pub fn optim_config(&self, total_steps: u64, lr: f64) -> OptimConfig {
        OptimConfig {
            kind: self.optim.kind,
            lr_peak: lr,
            weight_decay: self.optim.weight_decay,
            beta1: self.optim.beta1,
            beta2: self.optim.beta2,
            eps: self.optim.eps,
            warmup_fraction: self.optim.warmup_fraction,
            total_steps,
            lambda_scope: self.train.teir_reg.scope().unwrap_or(LambdaScope::Both),
        }
    }

    /// Flat `key = value` TOML.
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        for (k, v) in flat(self) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Parse a configuration from TOML text and apply overrides.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| Error::config("<file>", e.message()))?;
        let mut user = BTreeMap::new();
        flatten("", &table, &mut user);
        for (k, v) in overrides {
            user.insert(k.clone(), parse_override(v));
        }
        build(user)
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }
}

fn flat(cfg: &RunConfig) -> BTreeMap<String, Value> {
    let table = Table::try_from(cfg).expect("config serialises to TOML");
    let mut out = BTreeMap::new();
    flatten("", &table, &mut out);
    out
}

fn flatten(prefix: &str, table: &Table, out: &mut BTreeMap<String, Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Table {
    let mut root = Table::new();
    for (k, v) in flat {
        let parts: Vec<&str> = k.split('.').collect();
        let mut t = &mut root;
        for p in &parts[..parts.len() - 1] {
            t = t
                .entry(p.to_string())
                .or_insert_with(|| Value::Table(Table::new()))
                .as_table_mut()
                .expect("sections are tables");
        }
        t.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    root
}

/// Interpret an override as a TOML value, falling back to a bare string.
fn parse_override(v: &str) -> Value {
    format!("v = {v}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(v.to_string()))
}

fn type_name(v: &Value) -> &'static str {
    v.type_str()
}

fn build(user: BTreeMap<String, Value>) -> Result<RunConfig> {
    let mut merged = flat(&RunConfig::default());
    for (k, v) in &user {
        let Some(default) = merged.get(k) else {
            return Err(Error::config(k, "unknown key"));
        };
        let v = match (default, v) {
            (Value::Float(_), Value::Integer(i)) => Value::Float(*i as f64),
            (d, v) if type_name(d) == type_name(v) => v.clone(),
            (d, v) => {
                return Err(Error::config(k, format!("expected {}, found {}", type_name(d), type_name(v))));
            }
        };
        merged.insert(k.clone(), v);
    }
    let cfg: RunConfig = match Value::Table(unflatten(&merged)).try_into() {
        Ok(c) => c,
        Err(e) => {
            // name the first key that fails on its own
            let base = flat(&RunConfig::default());
            for (k, v) in &merged {
                if base.get(k) == Some(v) {
                    continue;
                }
                let mut probe = base.clone();
                probe.insert(k.clone(), v.clone());
                if let Err(single) = Value::Table(unflatten(&probe)).try_into::<RunConfig>() {
                    return Err(Error::config(k, single.message()));
                }
            }
            return Err(Error::config("<config>", e.message()));
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(e: Error) -> String {
        match e {
            Error::Config { key, .. } => key,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml(), &[]).unwrap(), cfg);
    }

    #[test]
    fn sections_and_dotted_keys_are_equivalent() {
        let a = RunConfig::from_toml("[loss]\ntau = 0.1\n", &[]).unwrap();
        let b = RunConfig::from_toml("loss.tau = 0.1\n", &[]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.loss.tau, 0.1);
    }

    #[test]
    fn overrides_win_and_coerce() {
        let o = vec![
            ("optim.lr".to_string(), "1".to_string()),
            ("train.mode".to_string(), "joint".to_string()),
        ];
        let cfg = RunConfig::from_toml("optim.lr = 0.5\n", &o).unwrap();
        assert_eq!(cfg.optim.lr, 1.0);
        assert_eq!(cfg.train.mode, Mode::Joint);
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(key_of(RunConfig::from_toml("bench.overlap = 1.5", &[]).unwrap_err()), "bench.overlap");
        assert_eq!(key_of(RunConfig::from_toml("loss.nope = 1", &[]).unwrap_err()), "loss.nope");
        assert_eq!(key_of(RunConfig::from_toml("train.mode = \"sideways\"", &[]).unwrap_err()), "train.mode");
        assert_eq!(key_of(RunConfig::from_toml("train.epochs = \"3\"", &[]).unwrap_err()), "train.epochs");
        assert_eq!(key_of(RunConfig::from_toml("train.task_order = [1, 1, 2, 3]", &[]).unwrap_err()), "train.task_order");
    }

    #[test]
    fn oracle_size_auto() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.oracle_size(), 512 * 5 - 256 * 4);
    }
}
