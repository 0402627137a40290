mod common;

use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use teir::bpe::{train_bpe, TokenId};
use teir::embedding::{load_checkpoint, save_checkpoint, CheckpointManifest, EmbeddingTable};
use teir::matfile::FORMAT_VERSION;
use teir::metrics::{average_recall, forgetting, recall_at_k, Direction, EvalMatrix};
use teir::objectives::{cl_loss, cm_loss, total_loss, FeatureBatch, LossConfig};

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.sample(StandardNormal))
}

#[test]
fn losses_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let k = rng.random_range(1..=4);
        let (r_i, r_e, r_f) = (random(&mut rng, k, 5), random(&mut rng, k, 5), random(&mut rng, k, 5));
        let tau = rng.random_range(0.05..1.0);
        let b = FeatureBatch::new(r_i.clone(), r_e.clone(), r_f.clone()).unwrap();
        assert!((cm_loss(&b, tau).unwrap().loss - common::cm_loss(&r_i, &r_f, tau)).abs() < 1e-6);
        assert!((cl_loss(&b).unwrap().loss - common::cl_loss(&r_e, &r_f)).abs() < 1e-6);
    }
}

#[test]
fn loss_hand_cases() {
    let eye = array![[1.0, 0.0], [0.0, 1.0]];
    let b = FeatureBatch::new(eye.clone(), eye.clone(), eye.clone()).unwrap();
    let expected = (1.0 + (-1.0f64).exp()).ln();
    assert!((cm_loss(&b, 1.0).unwrap().loss - expected).abs() < 1e-6);
    let cfg = LossConfig { tau: 1.0, ..LossConfig::default() };
    assert!((total_loss(&b, &cfg).unwrap().loss - 0.01 * expected).abs() < 1e-9);

    let one = FeatureBatch::new(array![[1.0, 0.0]], array![[1.0, 0.0]], array![[0.0, 1.0]]).unwrap();
    let cl = cl_loss(&one).unwrap();
    assert_eq!(cl.loss, 1.0);
    assert_eq!(cl.grad_rf.row(0).to_vec(), vec![-1.0, 1.0]);
}

#[test]
fn feature_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-5;
    for _ in 0..20 {
        let k = rng.random_range(1..=4);
        let (r_i, r_e, r_f) = (random(&mut rng, k, 4), random(&mut rng, k, 4), random(&mut rng, k, 4));
        let cfg = LossConfig { gamma_cm: 1.0, gamma_cl: 1.0, ..LossConfig::default() };
        let at = |f: &Array2<f64>| total_loss(&FeatureBatch::new(r_i.clone(), r_e.clone(), f.clone()).unwrap(), &cfg).unwrap();
        let g = at(&r_f).grad_rf;
        for a in 0..k {
            for c in 0..4 {
                let mut p = r_f.clone();
                p[[a, c]] += h;
                let mut m = r_f.clone();
                m[[a, c]] -= h;
                let fd = (at(&p).loss - at(&m).loss) / (2.0 * h);
                assert!((fd - g[[a, c]]).abs() <= 1e-5 * g[[a, c]].abs().max(1.0), "{fd} vs {}", g[[a, c]]);
            }
        }
    }
}

#[test]
fn recall_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in 0..100 {
        let (nq, ng) = (rng.random_range(1..12), rng.random_range(1..12));
        // duplicated gallery rows force exact ties in similarity
        let q = random(&mut rng, nq, 3);
        let pool = random(&mut rng, 3, 3);
        let picks: Vec<usize> = (0..ng).map(|_| rng.random_range(0..3)).collect();
        let g = Array2::from_shape_fn((ng, 3), |(r, c)| pool[[picks[r], c]]);
        let rel: Vec<Vec<usize>> = (0..nq)
            .map(|_| {
                let m = rng.random_range(1..=ng.min(3));
                (0..m).map(|_| rng.random_range(0..ng)).collect()
            })
            .collect();
        for k in [1, 2, 5] {
            let got = recall_at_k(&q, &g, &rel, k).unwrap();
            assert_eq!(got, common::recall_at_k(&q, &g, &rel, k), "instance {n} k={k}");
        }
    }
}

#[test]
fn average_recall_and_forgetting_match_brute_force() {
    let mats = [
        vec![vec![50.0], vec![40.0, 60.0], vec![30.0, 55.0, 70.0]],
        vec![vec![10.0], vec![20.0, 5.0], vec![15.0, 25.0, 1.0]],
        vec![vec![33.3], vec![33.3, 66.6], vec![0.0, 100.0, 12.5]],
    ];
    for a in &mats {
        let mut m = EvalMatrix::new(3);
        for (j, row) in a.iter().enumerate() {
            for (i, &v) in row.iter().enumerate() {
                m.set(j, i, Direction::ImageToText, v).unwrap();
                m.set(j, i, Direction::TextToImage, 100.0 - v).unwrap();
            }
        }
        let flipped: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| 100.0 - v).collect()).collect();
        for j in 0..3 {
            assert_eq!(average_recall(&m, j, Direction::ImageToText).unwrap(), common::average_recall(a, j));
            assert_eq!(average_recall(&m, j, Direction::TextToImage).unwrap(), common::average_recall(&flipped, j));
        }
        for j in 1..3 {
            assert_eq!(forgetting(&m, j, Direction::ImageToText).unwrap(), common::forgetting(a, j));
            assert_eq!(forgetting(&m, j, Direction::TextToImage).unwrap(), common::forgetting(&flipped, j));
        }
        assert!(forgetting(&m, 0, Direction::ImageToText).is_err());
    }
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<f32> = (0..40 * 6).map(|_| rng.sample::<f32, _>(StandardNormal) * 1e-3).collect();
    let mut data = data;
    data[0] = f32::MIN_POSITIVE / 2.0;
    data[1] = -0.0;
    let table = EmbeddingTable::from_rows(40, 6, data).unwrap();
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        rows: 40,
        dim: 6,
        vocab_hash: "x".into(),
        task_index: 2,
        policy: "matched".into(),
        seed: 9,
    };
    let path = dir.path().join("t.emb");
    save_checkpoint(&table, &manifest, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let bits = |t: &EmbeddingTable<f32>| t.values().map(f32::to_bits).collect::<Vec<_>>();
    assert_eq!(bits(&table), bits(&back));
}

#[test]
fn eval_matrix_csv_round_trips() {
    let mut m = EvalMatrix::new(3);
    m.set(0, 0, Direction::ImageToText, 1.0 / 3.0).unwrap();
    m.set(0, 0, Direction::TextToImage, 0.1 + 0.2).unwrap();
    m.set(2, 1, Direction::ImageToText, 99.96).unwrap();
    m.set(2, 1, Direction::TextToImage, 1e-300).unwrap();
    let back = EvalMatrix::from_csv(&m.to_csv(), std::path::Path::new("m.csv")).unwrap();
    assert_eq!(back, m);
}

fn corpus_strategy() -> impl Strategy<Value = Vec<String>> {
    let word = prop::sample::select(vec!["ab", "abc", "ψχ", "日本", "naïve", "aaa", "bca", "ψψχ"]);
    prop::collection::vec(prop::collection::vec(word, 1..6).prop_map(|w| w.join(" ")), 1..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bpe_round_trips(corpus in corpus_strategy(), extra in 1usize..40, probe in "\\PC{0,24}") {
        let v = train_bpe(&corpus, 256 + extra, 0).unwrap();
        let scope = v.scope();
        for line in corpus.iter().map(String::as_str).chain([probe.as_str()]) {
            let ids = scope.encode(line.as_bytes());
            prop_assert_eq!(scope.decode(&ids).unwrap(), line.as_bytes().to_vec());
        }
    }

    #[test]
    fn more_merges_never_lengthen_encodings(corpus in corpus_strategy(), n in 1usize..20) {
        let small = train_bpe(&corpus, 256 + n, 0).unwrap();
        let large = train_bpe(&corpus, 256 + n + 5, 0).unwrap();
        prop_assert_eq!(&large.tokens[..small.len()], &small.tokens[..]);
        for line in &corpus {
            let a: Vec<TokenId> = small.scope().encode(line.as_bytes());
            let b: Vec<TokenId> = large.scope().encode(line.as_bytes());
            prop_assert!(b.len() <= a.len());
        }
    }
}
