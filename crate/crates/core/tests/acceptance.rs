//! Acceptance suite: one line per criterion, nonzero exit if any fails.

mod common;

use std::collections::HashMap;
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use teir::bench::{build_benchmark, gen_benchmark};
use teir::bpe::{train_bpe, TokenId};
use teir::config::RunConfig;
use teir::embedding::{expand, ks_critical_1pct, ks_statistic, moments, EmbeddingRows, EmbeddingTable, InitPolicy};
use teir::encoder::RowGrads;
use teir::gradcheck::{grad_check, GradCheckConfig};
use teir::harness::{run_sequence, RunArtifacts, RunData};
use teir::metrics::{average_recall, forgetting, recall_at_k, Direction, EvalMatrix};
use teir::objectives::{cl_loss, cm_loss, FeatureBatch};
use teir::optim::{lr_at, step, LambdaScope, OptimConfig, OptimKind, OptimState};
use teir::vocab::{lambda_for, update_counts, LambdaVector, TokenCounts, VocabState};

const SEEDS: [u64; 3] = [0, 1, 2];
const DIRS: [Direction; 2] = [Direction::ImageToText, Direction::TextToImage];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- 1

fn gradient_exactness() -> Outcome {
    let t0 = Instant::now();
    let report = grad_check(&GradCheckConfig::default()).expect("grad check runs");
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        report.passed() && secs < 10.0,
        format!("max rel err {:.2e} over {} entries in {secs:.2}s", report.worst.rel_err, report.checked),
    )
}

// ---------------------------------------------------------------- 2

fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let k = rng.random_range(1..=4);
        let mut m = || Array2::from_shape_simple_fn((k, 6), || rng.sample::<f64, _>(StandardNormal));
        let (r_i, r_e, r_f) = (m(), m(), m());
        let b = FeatureBatch::new(r_i.clone(), r_e.clone(), r_f.clone()).unwrap();
        worst = worst.max((cm_loss(&b, 0.07).unwrap().loss - common::cm_loss(&r_i, &r_f, 0.07)).abs());
        worst = worst.max((cl_loss(&b).unwrap().loss - common::cl_loss(&r_e, &r_f)).abs());
    }
    let eye = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
    let hand = cm_loss(&FeatureBatch::new(eye.clone(), eye.clone(), eye).unwrap(), 1.0).unwrap().loss;
    let hand_err = (hand - (1.0 + (-1.0f64).exp()).ln()).abs();
    outcome(
        worst <= 1e-6 && hand_err <= 1e-6,
        format!("max abs diff {worst:.1e}, hand case err {hand_err:.1e}"),
    )
}

// ---------------------------------------------------------------- 3

fn random_corpus(rng: &mut ChaCha8Rng, shared: &[String], alphabet: &[char]) -> Vec<String> {
    (0..40)
        .map(|_| {
            (0..rng.random_range(2..6))
                .map(|_| {
                    if rng.random_bool(0.4) {
                        shared[rng.random_range(0..shared.len())].clone()
                    } else {
                        (0..rng.random_range(2..5)).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
                    }
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

/// Decoupled-decay AdamW and SGD on a dense table, with no per-token scale.
fn reference_step(table: &mut Array2<f64>, grads: &RowGrads, cfg: &OptimConfig, moments: &mut HashMap<TokenId, (Vec<f64>, Vec<f64>)>, t: u64) {
    let lr = lr_at(t, cfg);
    for (id, g) in grads.iter() {
        let mut row = table.row_mut(id as usize);
        match cfg.kind {
            OptimKind::Sgd => {
                let keep = 1.0 - lr * cfg.weight_decay;
                for (theta, &gv) in row.iter_mut().zip(g) {
                    *theta = keep * *theta - lr * gv;
                }
            }
            OptimKind::AdamW => {
                let (m, v) = moments.entry(id).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                let bc1 = 1.0 - cfg.beta1.powi(t as i32);
                let bc2 = 1.0 - cfg.beta2.powi(t as i32);
                for (c, theta) in row.iter_mut().enumerate() {
                    *theta -= lr * cfg.weight_decay * *theta;
                    m[c] = cfg.beta1 * m[c] + (1.0 - cfg.beta1) * g[c];
                    v[c] = cfg.beta2 * v[c] + (1.0 - cfg.beta2) * g[c] * g[c];
                    *theta -= lr * (m[c] / bc1) / ((v[c] / bc2).sqrt() + cfg.eps);
                }
            }
        }
    }
}

fn lambda_semantics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scripts: Vec<Vec<char>> = ["abcdefgh", "αβγδεζηθ", "абвгдежз", "defghijk"]
        .iter()
        .map(|s| s.chars().collect())
        .collect();
    let mut checked = (0usize, 0usize, 0usize);
    for seq in 0..12 {
        let shared: Vec<String> = (0..6).map(|i| format!("w{i}x{seq}")).collect();
        let n_tasks = rng.random_range(2..=4);
        let mut state = VocabState::new();
        let mut counts = TokenCounts::default();
        let mut presence: HashMap<TokenId, u32> = HashMap::new();
        let dim = 4;
        let mut table = Array2::<f64>::zeros((0, dim));
        for t in 0..n_tasks {
            let alphabet = &scripts[rng.random_range(0..scripts.len())];
            let corpus = random_corpus(&mut rng, &shared, alphabet);
            let tv = train_bpe(&corpus, rng.random_range(260..300), t).unwrap();
            let (next, partition) = state.merge_vocab(&tv);
            state = next;
            let sized = TokenCounts {
                counts: {
                    let mut c = counts.counts.clone();
                    c.resize(state.len(), 0);
                    c
                },
            };
            let lambda = lambda_for(&partition, &sized).unwrap();
            for &id in &partition.overlap {
                let c = presence[&id];
                if lambda.lambda[id as usize].to_bits() != (1.0 / (f64::from(c) + 1.0)).to_bits() {
                    return outcome(false, format!("overlap token {id} with c={c} has lambda {}", lambda.lambda[id as usize]));
                }
                checked.0 += 1;
            }
            if partition.old.iter().any(|&id| lambda.lambda[id as usize] != 0.0)
                || partition.new.iter().any(|&id| lambda.lambda[id as usize] != 1.0)
            {
                return outcome(false, format!("old/new lambda wrong in sequence {seq} task {t}"));
            }

            // train one task with gradients on every row, old rows included
            let grow = state.len() - table.nrows();
            let fresh = Array2::from_shape_simple_fn((grow, dim), || rng.sample::<f64, _>(StandardNormal) * 0.1);
            table = ndarray::concatenate![ndarray::Axis(0), table, fresh];
            for kind in [OptimKind::AdamW, OptimKind::Sgd] {
                let cfg = OptimConfig {
                    kind,
                    lr_peak: 0.05,
                    weight_decay: 0.1,
                    eps: 1e-6,
                    warmup_fraction: 0.2,
                    total_steps: 10,
                    lambda_scope: LambdaScope::Both,
                    ..OptimConfig::default()
                };
                let mut scaled = EmbeddingTable::from_matrix(table.clone()).unwrap();
                let mut plain = scaled.clone();
                let mut reference = table.clone();
                let (mut s1, mut s2) = (OptimState::new(), OptimState::new());
                let mut ref_moments = HashMap::new();
                for it in 1..=10u64 {
                    let mut grads = RowGrads::new();
                    for id in 0..state.len() as TokenId {
                        let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                        grads.add_row(id, &g);
                    }
                    step(&mut scaled, &grads, &lambda, &cfg, &mut s1).unwrap();
                    step(&mut plain, &grads, &LambdaVector::ones(state.len()), &cfg, &mut s2).unwrap();
                    reference_step(&mut reference, &grads, &cfg, &mut ref_moments, it);
                }
                for &id in &partition.old {
                    let before = table.row(id as usize);
                    if scaled.row(id).iter().zip(before.iter()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                        return outcome(false, format!("old row {id} moved under {kind:?}"));
                    }
                    checked.1 += 1;
                }
                if plain.matrix().iter().zip(reference.iter()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                    return outcome(false, format!("unit-lambda {kind:?} differs from the reference optimizer"));
                }
                checked.2 += 1;
            }
            counts = update_counts(&sized, &state, &tv);
            for id in state.lookup_all(&tv).into_iter().flatten() {
                *presence.entry(id).or_default() += 1;
            }
            if (0..state.len() as TokenId).any(|id| counts.get(id).unwrap_or(0) != presence.get(&id).copied().unwrap_or(0)) {
                return outcome(false, "task-presence counts disagree with the oracle");
            }
        }
    }
    outcome(
        true,
        format!(
            "{} overlap values exact, {} frozen old rows bitwise equal, {} unit-lambda runs bitwise equal",
            checked.0, checked.1, checked.2
        ),
    )
}

// ---------------------------------------------------------------- 4

fn within_bounds(samples: &[f64], mu: f64, sigma: f64) -> (bool, String) {
    let n = samples.len() as f64;
    let s = moments(samples.iter().copied()).unwrap();
    let se_mu = sigma / n.sqrt();
    let se_sigma = sigma / (2.0 * n).sqrt();
    let ks = ks_statistic(samples, mu, sigma);
    let crit = ks_critical_1pct(samples.len());
    let ok = (s.mu - mu).abs() <= 4.0 * se_mu && (s.sigma - sigma).abs() <= 4.0 * se_sigma && ks < crit;
    (
        ok,
        format!(
            "n={} mu {:.4}/{mu:.4} sigma {:.4}/{sigma:.4} ks {ks:.4}<{crit:.4}",
            samples.len(),
            s.mu,
            s.sigma
        ),
    )
}

fn init_distribution(trained: &EmbeddingTable<f32>) -> Outcome {
    let n_new = 10_000usize.div_ceil(trained.dim()) + 1;
    let source: Vec<f64> = trained.values().map(f64::from).collect();
    let src = moments(source.iter().copied()).unwrap();
    let new_values = |policy| {
        let grown = expand(trained, n_new, policy, 99).unwrap();
        grown.matrix().rows().into_iter().skip(trained.row_count()).flatten().map(|&v| f64::from(v)).collect::<Vec<_>>()
    };
    let (ok_m, d_m) = within_bounds(&new_values(InitPolicy::Matched), src.mu, src.sigma);
    let (ok_f, d_f) = within_bounds(&new_values(InitPolicy::BASELINE), 0.0, 0.02);
    outcome(ok_m && ok_f, format!("matched: {d_m}; fixed: {d_f}"))
}

// ---------------------------------------------------------------- 5-8

#[derive(Default, Clone, Copy)]
struct Summary {
    ar: [f64; 2],
    f: [f64; 2],
    loss: f64,
    fisher: f64,
}

impl Summary {
    fn fmt(&self) -> String {
        format!(
            "AR=({:.2},{:.2}) F=({:.2},{:.2}) loss={:.4} fisher={:.4}",
            self.ar[0], self.ar[1], self.f[0], self.f[1], self.loss, self.fisher
        )
    }
}

struct Runs {
    baseline: Summary,
    full: Summary,
    init: Summary,
    reg: Summary,
    joint: Summary,
    slowest: Duration,
    trained: EmbeddingTable<f32>,
}

fn config(seed: u64, flags: &[(&str, &str)]) -> RunConfig {
    let mut ov: Vec<(String, String)> = vec![("train.seed".into(), seed.to_string()), ("bench.seed".into(), seed.to_string())];
    ov.extend(flags.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    RunConfig::from_toml("", &ov).expect("valid config")
}

fn run_variant(flags: &[(&str, &str)], joint: bool, slowest: &mut Duration, keep: &mut Option<RunArtifacts>) -> Summary {
    let mut acc = Summary::default();
    for &seed in &SEEDS {
        let cfg = config(seed, flags);
        let data = RunData::from_benchmark(&cfg, &build_benchmark(&cfg.bench).unwrap());
        let t0 = Instant::now();
        let a = run_sequence(&cfg, &data, None).expect("run succeeds");
        *slowest = (*slowest).max(t0.elapsed());
        let j = cfg.bench.n_languages - 1;
        let w = 1.0 / SEEDS.len() as f64;
        for (d, dir) in DIRS.iter().enumerate() {
            acc.ar[d] += w * average_recall(&a.eval, j, *dir).unwrap();
            if !joint {
                acc.f[d] += w * forgetting(&a.eval, j, *dir).unwrap();
            }
        }
        acc.loss += w * a.end_mean_loss;
        acc.fisher += w * a.end_fisher;
        if keep.is_none() {
            *keep = Some(a);
        }
    }
    acc
}

fn runs() -> Runs {
    let mut slowest = Duration::ZERO;
    let mut keep = None;
    let off = [("train.teir_init", "off"), ("train.teir_reg", "off")];
    let baseline = run_variant(&off, false, &mut slowest, &mut None);
    let full = run_variant(&[("train.teir_init", "on"), ("train.teir_reg", "on")], false, &mut slowest, &mut keep);
    let init = run_variant(&[("train.teir_init", "on"), ("train.teir_reg", "off")], false, &mut slowest, &mut None);
    let reg = run_variant(&[("train.teir_init", "off"), ("train.teir_reg", "on")], false, &mut slowest, &mut None);
    let joint = run_variant(&[off[0], off[1], ("train.mode", "joint")], true, &mut slowest, &mut None);
    Runs {
        baseline,
        full,
        init,
        reg,
        joint,
        slowest,
        trained: keep.expect("full run kept").checkpoints[0].clone(),
    }
}

fn forgetting_mitigation(r: &Runs) -> Outcome {
    let (b, f) = (&r.baseline, &r.full);
    let pass = (0..2).all(|d| f.f[d] < b.f[d] && f.ar[d] > b.ar[d]) && r.slowest < Duration::from_secs(15 * 60);
    outcome(
        pass,
        format!("full {} vs baseline {}; slowest run {:.1}s", f.fmt(), b.fmt(), r.slowest.as_secs_f64()),
    )
}

fn component_ablations(r: &Runs) -> Outcome {
    let b = &r.baseline;
    let f_ok = (0..2).all(|d| r.init.f[d] <= b.f[d] && r.reg.f[d] <= b.f[d]);
    let ar_ok = (0..2).all(|d| r.full.ar[d] >= r.init.ar[d] && r.full.ar[d] >= r.reg.ar[d]);
    outcome(
        f_ok && ar_ok,
        format!("init {}; reg {}; full {}; baseline {}", r.init.fmt(), r.reg.fmt(), r.full.fmt(), b.fmt()),
    )
}

fn convergence(r: &Runs) -> Outcome {
    let (b, f) = (&r.baseline, &r.full);
    outcome(
        f.loss <= b.loss && f.fisher <= b.fisher,
        format!("loss {:.4} vs {:.4}, fisher {:.4} vs {:.4}", f.loss, b.loss, f.fisher, b.fisher),
    )
}

fn joint_bound(r: &Runs) -> Outcome {
    let (b, j) = (&r.baseline, &r.joint);
    outcome(
        (0..2).all(|d| j.ar[d] >= b.ar[d]),
        format!("joint AR=({:.2},{:.2}) vs baseline AR=({:.2},{:.2})", j.ar[0], j.ar[1], b.ar[0], b.ar[1]),
    )
}

// ---------------------------------------------------------------- 9

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..20 {
        let a: Vec<Vec<f64>> = (0..3).map(|j| (0..=j).map(|_| rng.random_range(0..=250) as f64 * 0.4).collect()).collect();
        let mut m = EvalMatrix::new(3);
        for (j, row) in a.iter().enumerate() {
            for (i, &v) in row.iter().enumerate() {
                for dir in DIRS {
                    m.set(j, i, dir, v).unwrap();
                }
            }
        }
        for j in 0..3 {
            if average_recall(&m, j, Direction::TextToImage).unwrap() != common::average_recall(&a, j)
                || (j > 0 && forgetting(&m, j, Direction::ImageToText).unwrap() != common::forgetting(&a, j))
            {
                return outcome(false, format!("AR/F mismatch in matrix {case} row {j}"));
            }
        }
    }
    for n in 0..100 {
        let (nq, ng) = (rng.random_range(1..16), rng.random_range(1..16));
        let q = Array2::from_shape_simple_fn((nq, 4), || rng.sample::<f64, _>(StandardNormal));
        let pool = Array2::from_shape_simple_fn((4, 4), || rng.sample::<f64, _>(StandardNormal));
        let picks: Vec<usize> = (0..ng).map(|_| rng.random_range(0..4)).collect();
        let g = Array2::from_shape_fn((ng, 4), |(r, c)| pool[[picks[r], c]]);
        let rel: Vec<Vec<usize>> = (0..nq).map(|_| vec![rng.random_range(0..ng)]).collect();
        let k = rng.random_range(1..=5);
        if recall_at_k(&q, &g, &rel, k).unwrap() != common::recall_at_k(&q, &g, &rel, k) {
            return outcome(false, format!("recall mismatch on instance {n}"));
        }
    }
    outcome(true, "20 three-task matrices and 100 recall instances agree exactly")
}

// ---------------------------------------------------------------- 10

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism_and_formats() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let small = [
        ("bench.n_concepts", "200"),
        ("bench.n_train", "400"),
        ("bench.n_val", "100"),
        ("bench.n_test", "100"),
        ("bench.n_languages", "3"),
        ("train.epochs", "2"),
        ("pretrain.epochs", "3"),
    ];
    let cfg = config(4, &small);

    // dataset files round-trip into exactly the in-memory benchmark
    let data_dir = tmp.path().join("data");
    gen_benchmark(&cfg.bench, &data_dir).unwrap();
    gen_benchmark(&cfg.bench, &tmp.path().join("data2")).unwrap();
    if tree_bytes(&data_dir) != tree_bytes(&tmp.path().join("data2")) {
        return outcome(false, "dataset generation is not byte-identical");
    }
    let loaded = RunData::load(&cfg, &data_dir).unwrap();
    let memory = RunData::from_benchmark(&cfg, &build_benchmark(&cfg.bench).unwrap());
    let bits = |m: &Array2<f32>| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    if loaded.tasks != memory.tasks || bits(&loaded.images) != bits(&memory.images) {
        return outcome(false, "dataset does not round-trip");
    }

    // same-seed reruns: identical matrices and checkpoint files
    let a = run_sequence(&cfg, &loaded, Some(&tmp.path().join("run_a"))).unwrap();
    let b = run_sequence(&cfg, &loaded, Some(&tmp.path().join("run_b"))).unwrap();
    let csv = |r: &str| std::fs::read(tmp.path().join(r).join("eval_matrix.csv")).unwrap();
    if a.eval.to_csv() != b.eval.to_csv() || csv("run_a") != csv("run_b") {
        return outcome(false, "eval matrices differ between same-seed runs");
    }
    let ckpt = |r: &str| tree_bytes(&tmp.path().join(r).join("checkpoints"));
    if ckpt("run_a") != ckpt("run_b") {
        return outcome(false, "checkpoints differ between same-seed runs");
    }
    for (t, table) in a.checkpoints.iter().enumerate() {
        let back = teir::embedding::load_checkpoint(&tmp.path().join("run_a/checkpoints").join(format!("task_{t}.emb"))).unwrap();
        if back.values().map(f32::to_bits).ne(table.values().map(f32::to_bits)) {
            return outcome(false, format!("checkpoint {t} does not round-trip"));
        }
    }

    // BPE on multi-byte text
    let corpus = ["naïve café ψυχή", "日本語 テキスト ψυχή", "Ünïcödé naïve 😀😀", "ψυχή ψυχή café"];
    let v = train_bpe(&corpus, 300, 0).unwrap();
    for line in corpus.iter().chain(&["unseen 文字 ψ", ""]) {
        let ids = v.scope().encode(line.as_bytes());
        if v.scope().decode(&ids).unwrap() != line.as_bytes() {
            return outcome(false, format!("BPE round trip failed on {line:?}"));
        }
    }
    let n_ckpt = ckpt("run_a").len();
    outcome(true, format!("dataset, {n_ckpt} checkpoint files and BPE round trips are exact"))
}

fn main() {
    // `cargo test -- --list` and similar harness probes
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut results: Vec<(u8, &str, Outcome)> = Vec::new();
    let mut report = |id, name, o: Outcome| {
        println!("criterion {id:>2} {name:<28} {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };
    report(1, "gradient exactness", gradient_exactness());
    report(2, "loss oracles", loss_oracles());
    report(3, "lambda semantics", lambda_semantics());
    let r = runs();
    report(4, "initialization distribution", init_distribution(&r.trained));
    report(5, "forgetting mitigation", forgetting_mitigation(&r));
    report(6, "component ablations", component_ablations(&r));
    report(7, "convergence diagnostic", convergence(&r));
    report(8, "joint upper bound", joint_bound(&r));
    report(9, "metric oracles", metric_oracles());
    report(10, "determinism and formats", determinism_and_formats());
    let failed: Vec<u8> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {}/{} criteria pass", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
