//! The continual run: anchor pretraining on task 0, then one training task per
//! language with vocabulary growth, embedding initialisation, per-token
//! regularisation, checkpoint selection and evaluation on every seen task.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{self, Benchmark, DatasetManifest, Split, TrainingTriplet};
use crate::bpe::{
    read_merges_file, read_vocab_file, train_bpe, write_merges_file, write_vocab_file, Scope, TokenId, BYTE_TOKENS,
};
use crate::config::{Mode, RunConfig, Switch};
use crate::embedding::{
    dist_stats, expand, ks_critical_1pct, ks_statistic, load_checkpoint_checked, save_checkpoint, vocab_hash, AnchorSlot, AnchorTable,
    CheckpointManifest, DistStats, EmbeddingRows, EmbeddingTable, InitPolicy,
};
use crate::encoder::{encode_text, FrozenTextParams};
use crate::error::{Error, Result};
use crate::matfile::FORMAT_VERSION;
use crate::metrics::{recall_at_k, ted_histogram, Direction, EvalMatrix, TedHistogram};
use crate::model::{batch_objective, encode_all, fisher_trace, mean_loss, Sample};
use crate::objectives::LossConfig;
use crate::optim::{reset_state, step, OptimConfig, OptimState};
use crate::seed::{indexed_seed, sub_seed};
use crate::vocab::{lambda_for, update_counts_ids, LambdaVector, Partition, TokenCounts, VocabState};

pub const TED_BINS: usize = 50;

/// Raw text data of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub language: String,
    pub corpus: Vec<String>,
    pub train: Vec<TrainingTriplet>,
    pub val: Vec<TrainingTriplet>,
    pub test: Vec<TrainingTriplet>,
}

impl TaskData {
    pub fn split(&self, split: Split) -> &[TrainingTriplet] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Every task in training order (anchor first) plus the shared image features.
#[derive(Debug, Clone)]
pub struct RunData {
    pub tasks: Vec<TaskData>,
    pub images: Array2<f32>,
}

impl RunData {
    pub fn load(cfg: &RunConfig, dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        if manifest.languages.len() != cfg.bench.n_languages {
            return Err(Error::config(
                "bench.n_languages",
                format!("dataset has {} languages", manifest.languages.len()),
            ));
        }
        if manifest.config.d_out != cfg.model.d_out {
            return Err(Error::config("model.d_out", format!("dataset features have width {}", manifest.config.d_out)));
        }
        let images = bench::load_images(dir)?;
        let mut tasks = Vec::new();
        for l in cfg.languages() {
            let lang = &manifest.languages[l];
            let load = |s| bench::load_split(dir, &manifest, lang, s, images.len());
            tasks.push(TaskData {
                language: lang.clone(),
                corpus: bench::load_corpus(dir, &manifest, lang)?,
                train: load(Split::Train)?,
                val: load(Split::Val)?,
                test: load(Split::Test)?,
            });
        }
        Ok(RunData {
            tasks,
            images: images.features().clone(),
        })
    }

    /// Same content as a generated directory, without touching the disk.
    pub fn from_benchmark(cfg: &RunConfig, b: &Benchmark) -> Self {
        let tasks = cfg
            .languages()
            .into_iter()
            .map(|l| {
                let lang = bench::language_id(l);
                let triplets = |s| {
                    b.split_range(s)
                        .map(|i| TrainingTriplet {
                            image_index: i,
                            english: b.captions[0][i].clone(),
                            foreign: b.captions[l][i].clone(),
                            language_id: lang.clone(),
                        })
                        .collect()
                };
                TaskData {
                    language: lang.clone(),
                    corpus: b.split_range(Split::Train).map(|i| b.captions[l][i].clone()).collect(),
                    train: triplets(Split::Train),
                    val: triplets(Split::Val),
                    test: triplets(Split::Test),
                }
            })
            .collect();
        RunData {
            tasks,
            images: b.images.clone(),
        }
    }
}

/// Image indices and trainable-side token ids of one evaluation split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub images: Vec<usize>,
    pub ids: Vec<Vec<TokenId>>,
}

impl EvalSet {
    fn build(triplets: &[TrainingTriplet], scope: &Scope<'_>) -> Self {
        EvalSet {
            images: triplets.iter().map(|t| t.image_index).collect(),
            ids: triplets.iter().map(|t| scope.encode(t.foreign.as_bytes())).collect(),
        }
    }
}

/// Recall@k for both directions; one caption per image, so relevance is the diagonal.
pub fn retrieval<E: EmbeddingRows<f32> + Sync>(
    images: &Array2<f32>,
    set: &EvalSet,
    table: &E,
    params: &FrozenTextParams<f32>,
    ks: &[usize],
) -> Result<Vec<(Direction, usize, f64)>> {
    let texts = encode_all(&set.ids, table, params)?;
    let mut img = Array2::<f32>::zeros((set.images.len(), images.ncols()));
    for (mut row, &i) in img.rows_mut().into_iter().zip(&set.images) {
        row.assign(&images.row(i));
    }
    let rel: Vec<Vec<usize>> = (0..set.images.len()).map(|q| vec![q]).collect();
    let mut out = Vec::new();
    for &k in ks {
        out.push((Direction::ImageToText, k, recall_at_k(&img, &texts, &rel, k)?));
        out.push((Direction::TextToImage, k, recall_at_k(&texts, &img, &rel, k)?));
    }
    Ok(out)
}

/// Sum of Recall@{1,5,10} over both directions.
pub fn selection_score<E: EmbeddingRows<f32> + Sync>(
    images: &Array2<f32>,
    sets: &[&EvalSet],
    table: &E,
    params: &FrozenTextParams<f32>,
) -> Result<f64> {
    let mut total = 0.0;
    for set in sets {
        total += retrieval(images, set, table, params, &[1, 5, 10])?
            .iter()
            .map(|r| r.2)
            .sum::<f64>();
    }
    Ok(total)
}

/// Fill row `j` of the matrix with test Recall@1 of every listed task.
pub fn evaluate_row<E: EmbeddingRows<f32> + Sync>(
    matrix: &mut EvalMatrix,
    j: usize,
    tests: &[(usize, &EvalSet)],
    images: &Array2<f32>,
    table: &E,
    params: &FrozenTextParams<f32>,
) -> Result<()> {
    for &(i, set) in tests {
        for (dir, _, r) in retrieval(images, set, table, params, &[1])? {
            matrix.set(j, i, dir, r)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: usize,
    pub language: String,
    pub vocab_size: usize,
    pub n_old: usize,
    pub n_overlap: usize,
    pub n_new: usize,
    pub init_policy: String,
    pub selected_epoch: usize,
    pub val_score: f64,
    pub dist: DistStats,
    pub init_ks: f64,
    pub init_ks_critical: f64,
    pub fisher_trace: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub task: usize,
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_score: f64,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub eval: EvalMatrix,
    pub tasks: Vec<TaskRecord>,
    pub epochs: Vec<EpochRecord>,
    pub ted: Vec<(usize, TedHistogram)>,
    /// Selected table after each trained task, indexed like `tasks`.
    pub checkpoints: Vec<EmbeddingTable<f32>>,
    pub anchor: AnchorTable<f32>,
    pub vocab: VocabState,
    pub partitions: Vec<Partition>,
    /// Mean batch loss of the final table over all training data.
    pub end_mean_loss: f64,
    /// Fisher trace of the final table over all training data.
    pub end_fisher: f64,
}

/// Layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Self {
        RunDir { root: root.to_path_buf() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("effective_config.toml")
    }
    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.txt")
    }
    pub fn merges(&self) -> PathBuf {
        self.root.join("merges.txt")
    }
    pub fn registry(&self) -> PathBuf {
        self.root.join("registry.json")
    }
    pub fn eval_matrix(&self) -> PathBuf {
        self.root.join("eval_matrix.csv")
    }
    pub fn log(&self) -> PathBuf {
        self.root.join("train.log")
    }
    pub fn checkpoint(&self, task: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("task_{task}.emb"))
    }
    pub fn diagnostics(&self) -> PathBuf {
        self.root.join("diagnostics")
    }
}

/// Summary of the vocabulary history, enough to rebuild evaluation scopes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub mode: Mode,
    pub oracle: bool,
    pub languages: Vec<String>,
    /// One entry per trained task, in training order.
    pub tasks: Vec<RegistryEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub task: usize,
    pub vocab_before: usize,
    pub vocab_after: usize,
    pub n_old: usize,
    pub n_overlap: usize,
    pub n_new: usize,
    /// Task-presence counts after the task.
    pub counts: Vec<u32>,
}

impl RegistryEntry {
    /// Rows of the checkpoint written after this task.
    pub fn vocab_rows(&self, oracle: bool, full: usize) -> usize {
        if oracle {
            full
        } else {
            self.vocab_after
        }
    }
}

impl Registry {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// Scope used to encode task `i`'s text.
    pub fn scope_task(&self, i: usize) -> usize {
        if self.oracle {
            0
        } else {
            i
        }
    }
}

pub fn encoder_params(cfg: &RunConfig) -> Result<FrozenTextParams<f32>> {
    FrozenTextParams::new(
        cfg.model.dim,
        cfg.model.d_out,
        cfg.model.max_len,
        sub_seed(cfg.train.seed, "encoder"),
    )
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    data: &'a RunData,
    params: FrozenTextParams<f32>,
    log: String,
}

impl Ctx<'_> {
    fn note(&mut self, line: String) {
        log::info!("{line}");
        self.log.push_str(&line);
        self.log.push('\n');
    }
}

struct TaskPlan<'a> {
    task: usize,
    samples: Vec<Sample<f32>>,
    val: Vec<&'a EvalSet>,
    lambda: LambdaVector,
    loss: LossConfig,
    optim: OptimConfig,
    epochs: usize,
}

/// Train one task and return the selected table.
fn train_task(
    ctx: &mut Ctx<'_>,
    plan: &TaskPlan<'_>,
    mut table: EmbeddingTable<f32>,
    epochs_out: &mut Vec<EpochRecord>,
) -> Result<(EmbeddingTable<f32>, usize, f64)> {
    let k = ctx.cfg.train.batch_size;
    let images = ctx.data.images.view();
    let mut state = OptimState::<f32>::new();
    reset_state(&mut state);
    let mut best: Option<(EmbeddingTable<f32>, usize, f64)> = None;
    let mut order: Vec<usize> = (0..plan.samples.len()).collect();
    for epoch in 0..plan.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(indexed_seed(
            ctx.cfg.train.seed,
            &format!("order/{}", plan.task),
            epoch,
        ));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(k) {
            let batch: Vec<&Sample<f32>> = chunk.iter().map(|&i| &plan.samples[i]).collect();
            let (loss, grads) = batch_objective(&batch, images, &table, &ctx.params, &plan.loss)?;
            step(&mut table, &grads, &plan.lambda, &plan.optim, &mut state)?;
            loss_sum += loss;
            batches += 1;
        }
        let score = selection_score(&ctx.data.images, &plan.val, &table, &ctx.params)?;
        let mean = loss_sum / batches as f64;
        ctx.note(format!(
            "task={} epoch={} mean_loss={mean:.6} val_score={score:.3}",
            plan.task, epoch
        ));
        epochs_out.push(EpochRecord {
            task: plan.task,
            epoch,
            mean_loss: mean,
            val_score: score,
        });
        if best.as_ref().is_none_or(|b| score > b.2) {
            best = Some((table.clone(), epoch, score));
        }
    }
    Ok(best.expect("at least one epoch"))
}

fn samples_for(
    triplets: &[TrainingTriplet],
    english: &Scope<'_>,
    foreign: &Scope<'_>,
    anchor: &AnchorTable<f32>,
    params: &FrozenTextParams<f32>,
) -> Result<Vec<Sample<f32>>> {
    triplets
        .iter()
        .map(|t| {
            Ok(Sample {
                image: t.image_index,
                anchor: encode_text(&english.encode(t.english.as_bytes()), anchor, params)?,
                ids: foreign.encode(t.foreign.as_bytes()),
            })
        })
        .collect()
}

/// Token ids a task touches: the bytes plus every id its corpus encodes to.
fn used_ids(corpus: &[String], scope: &Scope<'_>) -> BTreeSet<TokenId> {
    let mut ids: BTreeSet<TokenId> = (0..BYTE_TOKENS as TokenId).collect();
    for line in corpus {
        ids.extend(scope.encode(line.as_bytes()));
    }
    ids
}

fn stats_of_rows(table: &EmbeddingTable<f32>, rows: &BTreeSet<TokenId>) -> Result<DistStats> {
    let vals: Vec<f32> = rows.iter().flat_map(|&r| table.row(r).to_vec()).collect();
    dist_stats(&EmbeddingTable::from_rows(rows.len(), table.dim(), vals)?)
}

fn init_ks(table: &EmbeddingTable<f32>, rows: &BTreeSet<TokenId>, mu: f64, sigma: f64) -> (f64, f64) {
    let vals: Vec<f64> = rows.iter().flat_map(|&r| table.row(r).to_vec()).map(f64::from).collect();
    if vals.is_empty() || sigma == 0.0 {
        return (0.0, 0.0);
    }
    (ks_statistic(&vals, mu, sigma), ks_critical_1pct(vals.len()))
}

/// Run the whole sequence; artifacts are written to `out` when given.
pub fn run_sequence(cfg: &RunConfig, data: &RunData, out: Option<&Path>) -> Result<RunArtifacts> {
    cfg.validate()?;
    if data.tasks.len() != cfg.bench.n_languages {
        return Err(Error::InvalidInput(format!(
            "{} tasks of data for {} languages",
            data.tasks.len(),
            cfg.bench.n_languages
        )));
    }
    let mut ctx = Ctx {
        cfg,
        data,
        params: encoder_params(cfg)?,
        log: String::new(),
    };
    let oracle = cfg.vocab.oracle || cfg.train.mode == Mode::Joint;
    let n = data.tasks.len();
    let dim = cfg.model.dim;
    let master = cfg.train.seed;
    let policy_for = |on: bool| if on { InitPolicy::Matched } else { InitPolicy::BASELINE };
    let teir_init = cfg.train.teir_init == Switch::On;

    // vocabulary for task 0 (or the oracle vocabulary for every task)
    let (mut vocab, _) = if oracle {
        let all: Vec<&String> = data.tasks.iter().flat_map(|t| &t.corpus).collect();
        VocabState::new().merge_vocab(&train_bpe(&all, cfg.oracle_size(), 0)?)
    } else {
        VocabState::new().merge_vocab(&train_bpe(&data.tasks[0].corpus, cfg.vocab.size_per_task, 0)?)
    };
    let scope_task = |i: usize| if oracle { 0 } else { i };

    // ---- task 0: anchor pretraining
    let mut table = expand(
        &EmbeddingTable::<f32>::zeros(0, dim),
        vocab.len(),
        InitPolicy::BASELINE,
        indexed_seed(master, "init", 0),
    )
    .map_err(|e| e.in_task(0))?;
    let task0_ids = if oracle {
        used_ids(&data.tasks[0].corpus, &vocab.task_scope(0))
    } else {
        (0..vocab.len() as TokenId).collect()
    };
    let init0 = init_ks(&table, &task0_ids, 0.0, 0.02);

    let mut val_sets = Vec::with_capacity(n);
    let mut test_sets = Vec::with_capacity(n);
    let mut task_ids: Vec<BTreeSet<TokenId>> = Vec::with_capacity(n);
    let mut epochs = Vec::new();
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    let mut partitions = Vec::new();
    let mut ted = Vec::new();
    let mut eval = EvalMatrix::new(n);
    let mut entries = Vec::new();

    {
        let scope = vocab.task_scope(0);
        val_sets.push(EvalSet::build(&data.tasks[0].val, &scope));
        test_sets.push(EvalSet::build(&data.tasks[0].test, &scope));
    }
    let pre_samples: Vec<Sample<f32>> = {
        let scope = vocab.task_scope(0);
        data.tasks[0]
            .train
            .iter()
            .map(|t| Sample {
                image: t.image_index,
                anchor: vec![0.0; cfg.model.d_out],
                ids: scope.encode(t.foreign.as_bytes()),
            })
            .collect()
    };
    let pre_steps = (cfg.pretrain.epochs * pre_samples.len().div_ceil(cfg.train.batch_size)) as u64;
    let pre_loss = LossConfig {
        tau: cfg.loss.tau,
        gamma_cm: 1.0,
        gamma_cl: 0.0,
    };
    let plan = TaskPlan {
        task: 0,
        samples: pre_samples,
        val: vec![&val_sets[0]],
        lambda: LambdaVector::ones(vocab.len()),
        loss: pre_loss,
        optim: OptimConfig {
            kind: cfg.pretrain.kind,
            ..cfg.optim_config(pre_steps, cfg.pretrain.lr)
        },
        epochs: cfg.pretrain.epochs,
    };
    let (best, sel_epoch, sel_score) = train_task(&mut ctx, &plan, table, &mut epochs).map_err(|e| e.in_task(0))?;
    table = best;
    let mut slot = AnchorSlot::new();
    let anchor = slot.snapshot_anchor(&table)?.clone();
    let mut counts = update_counts_ids(&TokenCounts::default(), vocab.len(), &task0_ids);
    evaluate_row(&mut eval, 0, &[(0, &test_sets[0])], &data.images, &table, &ctx.params)?;
    let fisher0 = fisher_trace(&plan.samples, data.images.view(), &table, &ctx.params, &pre_loss)?;
    records.push(TaskRecord {
        task: 0,
        language: data.tasks[0].language.clone(),
        vocab_size: vocab.len(),
        n_old: 0,
        n_overlap: 0,
        n_new: task0_ids.len(),
        init_policy: InitPolicy::BASELINE.label(),
        selected_epoch: sel_epoch,
        val_score: sel_score,
        dist: dist_stats(&table)?,
        init_ks: init0.0,
        init_ks_critical: init0.1,
        fisher_trace: fisher0,
    });
    ted.push((0, ted_histogram(&table, TED_BINS)?));
    checkpoints.push(table.clone());
    partitions.push(Partition::from_sets(vocab.len(), &BTreeSet::new(), &task0_ids));
    entries.push(RegistryEntry {
        task: 0,
        vocab_before: 0,
        vocab_after: vocab.len(),
        n_old: 0,
        n_overlap: 0,
        n_new: task0_ids.len(),
        counts: counts.counts.clone(),
    });
    task_ids.push(task0_ids);
    drop(plan);

    // English side of every task is encoded by the anchor under task 0's scope
    let english_scope_rules: Vec<_> = vocab.task_rules(0).to_vec();
    let anchor_tokens: Vec<Vec<u8>> = vocab.tokens()[..anchor.row_count()].to_vec();
    let english_scope = Scope::new(&anchor_tokens, english_scope_rules);

    // ---- continual tasks (or one pooled task in joint mode)
    let groups: Vec<Vec<usize>> = match cfg.train.mode {
        Mode::Continual => (1..n).map(|t| vec![t]).collect(),
        Mode::Joint => vec![(0..n).collect()],
    };
    for group in groups {
        let t = *group.last().expect("non-empty group");
        let policy = policy_for(teir_init);
        let known: BTreeSet<TokenId> = task_ids.iter().flatten().copied().collect();
        let vocab_before = if oracle { known.len() } else { table.row_count() };
        let (partition, ids_t, ks) = if oracle {
            let scope = vocab.task_scope(0);
            let mut ids_t = BTreeSet::new();
            for &g in &group {
                ids_t.extend(used_ids(&data.tasks[g].corpus, &scope));
            }
            let partition = Partition::from_sets(vocab.len(), &known, &ids_t);
            let (mu, sigma) = match policy {
                InitPolicy::Matched => {
                    let s = stats_of_rows(&table, &known)?;
                    (s.mu, s.sigma)
                }
                InitPolicy::Fixed { mu, sigma } => (mu, sigma),
            };
            let fresh: Vec<TokenId> = partition.new.iter().copied().collect();
            table
                .reinit_rows(&fresh, InitPolicy::Fixed { mu, sigma }, indexed_seed(master, "init", t))
                .map_err(|e| e.in_task(t))?;
            let ks = init_ks(&table, &partition.new, mu, sigma);
            (partition, ids_t, ks)
        } else {
            let tv = train_bpe(&data.tasks[t].corpus, cfg.vocab.size_per_task, t).map_err(|e| e.in_task(t))?;
            let before = dist_stats(&table)?;
            let (next, partition) = vocab.merge_vocab(&tv);
            vocab = next;
            let n_new = vocab.len() - table.row_count();
            table = expand(&table, n_new, policy, indexed_seed(master, "init", t)).map_err(|e| e.in_task(t))?;
            let (mu, sigma) = match policy {
                InitPolicy::Matched => (before.mu, before.sigma),
                InitPolicy::Fixed { mu, sigma } => (mu, sigma),
            };
            let ks = init_ks(&table, &partition.new, mu, sigma);
            let ids_t: BTreeSet<TokenId> = partition.overlap.union(&partition.new).copied().collect();
            (partition, ids_t, ks)
        };
        let counts_sized = update_counts_ids(&counts, vocab.len(), &BTreeSet::new());
        let lambda = match cfg.train.teir_reg.scope() {
            Some(_) => lambda_for(&partition, &counts_sized).map_err(|e| e.in_task(t))?,
            None => LambdaVector::ones(vocab.len()),
        };

        for &g in &group {
            if g >= val_sets.len() {
                let scope = vocab.task_scope(scope_task(g));
                val_sets.push(EvalSet::build(&data.tasks[g].val, &scope));
                test_sets.push(EvalSet::build(&data.tasks[g].test, &scope));
            }
        }
        let mut samples = Vec::new();
        for &g in &group {
            let scope = vocab.task_scope(scope_task(g));
            samples.extend(
                samples_for(&data.tasks[g].train, &english_scope, &scope, &anchor, &ctx.params)
                    .map_err(|e| e.in_task(t))?,
            );
        }
        let steps = (cfg.train.epochs * samples.len().div_ceil(cfg.train.batch_size)) as u64;
        let plan = TaskPlan {
            task: t,
            samples,
            val: group.iter().map(|&g| &val_sets[g]).collect(),
            lambda,
            loss: cfg.loss,
            optim: cfg.optim_config(steps, cfg.optim.lr),
            epochs: cfg.train.epochs,
        };
        let (best, sel_epoch, sel_score) = train_task(&mut ctx, &plan, table, &mut epochs).map_err(|e| e.in_task(t))?;
        table = best;
        counts = update_counts_ids(&counts_sized, vocab.len(), &ids_t);

        let seen: Vec<(usize, &EvalSet)> = (0..=t).map(|i| (i, &test_sets[i])).collect();
        evaluate_row(&mut eval, t, &seen, &data.images, &table, &ctx.params).map_err(|e| e.in_task(t))?;
        let fisher = fisher_trace(&plan.samples, data.images.view(), &table, &ctx.params, &plan.loss)?;
        records.push(TaskRecord {
            task: t,
            language: data.tasks[t].language.clone(),
            vocab_size: vocab.len(),
            n_old: partition.old.len(),
            n_overlap: partition.overlap.len(),
            n_new: partition.new.len(),
            init_policy: policy.label(),
            selected_epoch: sel_epoch,
            val_score: sel_score,
            dist: dist_stats(&table)?,
            init_ks: ks.0,
            init_ks_critical: ks.1,
            fisher_trace: fisher,
        });
        ctx.note(format!(
            "task={t} vocab={} old={} overlap={} new={} selected_epoch={sel_epoch}",
            vocab.len(),
            partition.old.len(),
            partition.overlap.len(),
            partition.new.len()
        ));
        ted.push((t, ted_histogram(&table, TED_BINS)?));
        checkpoints.push(table.clone());
        entries.push(RegistryEntry {
            task: t,
            vocab_before,
            vocab_after: vocab_before + partition.new.len(),
            n_old: partition.old.len(),
            n_overlap: partition.overlap.len(),
            n_new: partition.new.len(),
            counts: counts.counts.clone(),
        });
        partitions.push(partition);
        task_ids.push(ids_t);
    }

    // ---- end-of-run diagnostics over all training data
    let mut all = Vec::new();
    for (g, task) in data.tasks.iter().enumerate() {
        let scope = vocab.task_scope(scope_task(g));
        all.extend(samples_for(&task.train, &english_scope, &scope, &anchor, &ctx.params)?);
    }
    let end_mean_loss = mean_loss(&all, cfg.train.batch_size, data.images.view(), &table, &ctx.params, &cfg.loss)?;
    let end_fisher = fisher_trace(&all, data.images.view(), &table, &ctx.params, &cfg.loss)?;
    ctx.note(format!("end mean_loss={end_mean_loss:.6} fisher_trace={end_fisher:.6e}"));

    let artifacts = RunArtifacts {
        eval,
        tasks: records,
        epochs,
        ted,
        checkpoints,
        anchor,
        vocab,
        partitions,
        end_mean_loss,
        end_fisher,
    };
    if let Some(dir) = out {
        let registry = Registry {
            mode: cfg.train.mode,
            oracle,
            languages: data.tasks.iter().map(|t| t.language.clone()).collect(),
            tasks: entries,
        };
        write_run(cfg, &artifacts, &registry, &ctx.log, &RunDir::new(dir))?;
    }
    Ok(artifacts)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_run(cfg: &RunConfig, a: &RunArtifacts, registry: &Registry, log: &str, dir: &RunDir) -> Result<()> {
    for d in [dir.root.join("checkpoints"), dir.diagnostics()] {
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    cfg.save(&dir.config())?;
    write_vocab_file(&dir.vocab(), a.vocab.tokens())?;
    let rules: Vec<_> = a.vocab.all_rules().cloned().collect();
    write_merges_file(&dir.merges(), &rules)?;
    let json = serde_json::to_string_pretty(registry).expect("registry serialises");
    write_file(&dir.registry(), &format!("{json}\n"))?;

    for (rec, table) in a.tasks.iter().zip(&a.checkpoints) {
        let tokens = &a.vocab.tokens()[..table.row_count()];
        let manifest = CheckpointManifest {
            format_version: FORMAT_VERSION,
            rows: table.row_count(),
            dim: table.dim(),
            vocab_hash: vocab_hash(tokens),
            task_index: rec.task,
            policy: rec.init_policy.clone(),
            seed: cfg.train.seed,
        };
        save_checkpoint(table, &manifest, &dir.checkpoint(rec.task))?;
    }
    a.eval.save(&dir.eval_matrix())?;

    let diag = dir.diagnostics();
    let mut dist = String::from("task,mu,sigma,ks_stat\n");
    let mut fisher = String::from("task,fisher_trace\n");
    for r in &a.tasks {
        let _ = writeln!(dist, "{},{},{},{}", r.task, r.dist.mu, r.dist.sigma, r.init_ks);
        let _ = writeln!(fisher, "{},{}", r.task, r.fisher_trace);
    }
    write_file(&diag.join("dist_stats.csv"), &dist)?;
    write_file(&diag.join("fisher.csv"), &fisher)?;
    let mut curve = String::from("task,epoch,mean_loss,val_score\n");
    for e in &a.epochs {
        let _ = writeln!(curve, "{},{},{},{}", e.task, e.epoch, e.mean_loss, e.val_score);
    }
    write_file(&diag.join("loss_curve.csv"), &curve)?;
    for (t, h) in &a.ted {
        write_file(&diag.join(format!("ted_task{t}.csv")), &h.to_csv())?;
    }
    let tasks = serde_json::to_string_pretty(&a.tasks).expect("records serialise");
    write_file(&diag.join("tasks.json"), &format!("{tasks}\n"))?;
    write_file(
        &diag.join("end_of_run.csv"),
        &format!("mean_loss,fisher_trace\n{},{}\n", a.end_mean_loss, a.end_fisher),
    )?;
    write_file(&dir.log(), log)
}

/// Recompute the evaluation matrix of a finished run from its stored
/// checkpoints, on the given split of the dataset at `data`.
pub fn evaluate_run(run: &Path, data: &Path, split: Split) -> Result<EvalMatrix> {
    let dir = RunDir::new(run);
    for p in [dir.config(), dir.vocab(), dir.merges(), dir.registry()] {
        if !p.exists() {
            return Err(Error::MissingArtifact(p));
        }
    }
    let cfg = RunConfig::load(Some(&dir.config()), &[])?;
    let registry = Registry::load(&dir.registry())?;
    let vocab = VocabState::from_parts(read_vocab_file(&dir.vocab())?, read_merges_file(&dir.merges())?)?;
    let data = RunData::load(&cfg, data)?;
    if data.tasks.iter().map(|t| &t.language).ne(registry.languages.iter()) {
        return Err(Error::InvalidInput("dataset languages differ from the run's".into()));
    }
    let params = encoder_params(&cfg)?;
    let sets: Vec<EvalSet> = data
        .tasks
        .iter()
        .enumerate()
        .map(|(i, t)| EvalSet::build(t.split(split), &vocab.task_scope(registry.scope_task(i))))
        .collect();
    let mut eval = EvalMatrix::new(data.tasks.len());
    for entry in &registry.tasks {
        let path = dir.checkpoint(entry.task);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let table = load_checkpoint_checked(&path, &vocab.tokens()[..entry.vocab_rows(registry.oracle, vocab.len())])?;
        let seen: Vec<(usize, &EvalSet)> = sets.iter().enumerate().take(entry.task + 1).collect();
        evaluate_row(&mut eval, entry.task, &seen, &data.images, &table, &params).map_err(|e| e.in_task(entry.task))?;
    }
    Ok(eval)
}
