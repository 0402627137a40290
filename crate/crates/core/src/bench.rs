//! Synthetic multilingual image-caption benchmark.
//!
//! Images are points in feature space built from a handful of concept
//! prototypes. Every language names the concepts with its own lexicon; a
//! configurable fraction of concepts reuse the anchor language's word form,
//! which is what produces lexical overlap between tasks.
//!
//! Directory layout:
//!
//! ```text
//! manifest.json
//! images.feat                  TEIRIMG1 matrix, one row per image
//! lang{l}/corpus.txt           training captions of language l
//! lang{l}/{train,val,test}.tsv image_index \t english \t foreign
//! ```

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::{FeatureSource, ImageFeatureProvider};
use crate::error::{Error, Result};
use crate::seed::{indexed_seed, sub_seed};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MAX_ALPHABET: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub n_concepts: usize,
    pub n_languages: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub concepts_per_image: usize,
    pub d_out: usize,
    pub overlap: f64,
    pub alphabet_size: usize,
    pub function_words: usize,
    pub image_noise: f64,
    pub distinct_alphabets: bool,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_concepts: 500,
            n_languages: 5,
            n_train: 2000,
            n_val: 250,
            n_test: 250,
            concepts_per_image: 3,
            d_out: 64,
            overlap: 0.5,
            alphabet_size: 20,
            function_words: 8,
            image_noise: 0.05,
            distinct_alphabets: true,
            seed: 0,
        }
    }
}

impl BenchConfig {
    /// First violated constraint as `(key, message)`.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(("bench.overlap", format!("{} is outside [0, 1]", self.overlap)));
        }
        if self.concepts_per_image == 0 {
            return Err(("bench.concepts_per_image", "must be at least 1".into()));
        }
        if self.concepts_per_image > self.n_concepts {
            return Err((
                "bench.concepts_per_image",
                format!("{} exceeds n_concepts = {}", self.concepts_per_image, self.n_concepts),
            ));
        }
        if self.n_languages < 1 {
            return Err(("bench.n_languages", "must be at least 1".into()));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(("bench.n_train", "every split needs at least one image".into()));
        }
        if self.d_out == 0 {
            return Err(("bench.d_out", "must be positive".into()));
        }
        if !(2..=MAX_ALPHABET).contains(&self.alphabet_size) {
            return Err(("bench.alphabet_size", format!("must lie in [2, {MAX_ALPHABET}]")));
        }
        if self.function_words == 0 {
            return Err(("bench.function_words", "must be at least 1".into()));
        }
        if self.function_words > self.alphabet_size * self.alphabet_size / 2 {
            return Err(("bench.function_words", "too many for the alphabet".into()));
        }
        if !(self.image_noise >= 0.0) || !self.image_noise.is_finite() {
            return Err(("bench.image_noise", "must be a finite non-negative number".into()));
        }
        Ok(())
    }

    pub fn n_images(&self) -> usize {
        self.n_train + self.n_val + self.n_test
    }

    pub fn n_shared(&self) -> usize {
        (self.overlap * self.n_concepts as f64).floor() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidInput(format!("unknown split `{s}` (train|val|test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: BenchConfig,
    pub languages: Vec<String>,
}

impl DatasetManifest {
    pub fn split_len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.config.n_train,
            Split::Val => self.config.n_val,
            Split::Test => self.config.n_test,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        if m.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Version {
                path,
                found: m.format_version,
                expected: DATASET_FORMAT_VERSION,
            });
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingTriplet {
    pub image_index: usize,
    pub english: String,
    pub foreign: String,
    pub language_id: String,
}

pub fn language_id(l: usize) -> String {
    format!("lang{l}")
}

/// First code point of each foreign alphabet; language 0 uses ASCII `a..`.
const SCRIPT_BASES: [u32; 11] = [
    0x3B1, 0x430, 0x561, 0x5D0, 0x627, 0x905, 0xE01, 0x10D0, 0x3131, 0x3041, 0x30A1,
];

fn alphabet(cfg: &BenchConfig, lang: usize) -> Vec<char> {
    let base = if lang == 0 || !cfg.distinct_alphabets {
        u32::from(b'a')
    } else if lang - 1 < SCRIPT_BASES.len() {
        SCRIPT_BASES[lang - 1]
    } else {
        0x4E00 + 64 * (lang - 1 - SCRIPT_BASES.len()) as u32
    };
    (0..cfg.alphabet_size as u32)
        .map(|k| char::from_u32(base + k).expect("alphabet bases are valid scalar values"))
        .collect()
}

fn random_word(rng: &mut ChaCha8Rng, letters: &[char], min: usize, max: usize) -> String {
    let len = rng.random_range(min..=max);
    (0..len).map(|_| letters[rng.random_range(0..letters.len())]).collect()
}

#[derive(Debug, Clone)]
struct Lexicon {
    concepts: Vec<String>,
    function: Vec<String>,
}

fn build_lexicons(cfg: &BenchConfig) -> Vec<Lexicon> {
    let mut out: Vec<Lexicon> = Vec::with_capacity(cfg.n_languages);
    for lang in 0..cfg.n_languages {
        let mut rng = ChaCha8Rng::seed_from_u64(indexed_seed(cfg.seed, "lexicon", lang));
        let letters = alphabet(cfg, lang);
        let mut used: HashSet<String> = HashSet::new();
        let mut function = Vec::with_capacity(cfg.function_words);
        while function.len() < cfg.function_words {
            let w = random_word(&mut rng, &letters, 2, 2);
            if used.insert(w.clone()) {
                function.push(w);
            }
        }
        let shared: BTreeSet<usize> = if lang == 0 {
            BTreeSet::new()
        } else {
            let mut ids: Vec<usize> = (0..cfg.n_concepts).collect();
            ids.shuffle(&mut rng);
            ids.into_iter().take(cfg.n_shared()).collect()
        };
        let anchor: HashSet<&str> = out
            .first()
            .map(|l| l.concepts.iter().chain(&l.function).map(String::as_str).collect())
            .unwrap_or_default();
        let mut concepts = Vec::with_capacity(cfg.n_concepts);
        for c in 0..cfg.n_concepts {
            if shared.contains(&c) {
                let w = out[0].concepts[c].clone();
                used.insert(w.clone());
                concepts.push(w);
                continue;
            }
            loop {
                let w = random_word(&mut rng, &letters, 3, 7);
                if !anchor.contains(w.as_str()) && used.insert(w.clone()) {
                    concepts.push(w);
                    break;
                }
            }
        }
        out.push(Lexicon { concepts, function });
    }
    out
}

fn caption(rng: &mut ChaCha8Rng, lex: &Lexicon, concepts: &[usize]) -> String {
    let mut order = concepts.to_vec();
    order.shuffle(rng);
    let mut words = Vec::with_capacity(2 * order.len() + 1);
    for c in order {
        words.push(lex.function[rng.random_range(0..lex.function.len())].as_str());
        words.push(lex.concepts[c].as_str());
    }
    words.push(lex.function[rng.random_range(0..lex.function.len())].as_str());
    words.join(" ")
}

/// In-memory benchmark, mainly useful for tests.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub config: BenchConfig,
    pub images: Array2<f32>,
    pub image_concepts: Vec<Vec<usize>>,
    /// `captions[l][image]`
    pub captions: Vec<Vec<String>>,
}

impl Benchmark {
    pub fn split_range(&self, split: Split) -> std::ops::Range<usize> {
        let c = &self.config;
        match split {
            Split::Train => 0..c.n_train,
            Split::Val => c.n_train..c.n_train + c.n_val,
            Split::Test => c.n_train + c.n_val..c.n_images(),
        }
    }
}

pub fn build_benchmark(cfg: &BenchConfig) -> Result<Benchmark> {
    cfg.check().map_err(|(key, msg)| Error::InvalidInput(format!("{key}: {msg}")))?;
    let mut proto_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "prototypes"));
    let mut protos = Array2::<f64>::zeros((cfg.n_concepts, cfg.d_out));
    for mut row in protos.rows_mut() {
        row.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut proto_rng));
        let n = row.dot(&row).sqrt();
        row.mapv_inplace(|v| v / n);
    }

    let mut img_rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "images"));
    let noise = Normal::new(0.0, cfg.image_noise).expect("noise checked non-negative");
    let n = cfg.n_images();
    let mut images = Array2::<f32>::zeros((n, cfg.d_out));
    let mut image_concepts = Vec::with_capacity(n);
    for i in 0..n {
        let mut set = rand::seq::index::sample(&mut img_rng, cfg.n_concepts, cfg.concepts_per_image).into_vec();
        set.sort_unstable();
        let mut sum = vec![0.0f64; cfg.d_out];
        for &c in &set {
            sum.iter_mut().zip(protos.row(c)).for_each(|(s, p)| *s += p);
        }
        let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (slot, s) in images.row_mut(i).iter_mut().zip(&sum) {
            let base = if norm > 0.0 { s / norm } else { 0.0 };
            *slot = (base + noise.sample(&mut img_rng)) as f32;
        }
        image_concepts.push(set);
    }

    let lexicons = build_lexicons(cfg);
    let captions = lexicons
        .iter()
        .enumerate()
        .map(|(l, lex)| {
            let mut rng = ChaCha8Rng::seed_from_u64(indexed_seed(cfg.seed, "captions", l));
            image_concepts.iter().map(|set| caption(&mut rng, lex, set)).collect()
        })
        .collect();
    Ok(Benchmark {
        config: cfg.clone(),
        images,
        image_concepts,
        captions,
    })
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Generate the benchmark into `out` (created if missing).
pub fn gen_benchmark(cfg: &BenchConfig, out: &Path) -> Result<DatasetManifest> {
    let bench = build_benchmark(cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        config: cfg.clone(),
        languages: (0..cfg.n_languages).map(language_id).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    write(&out.join("manifest.json"), format!("{json}\n").as_bytes())?;
    ImageFeatureProvider::from_matrix(bench.images.clone(), FeatureSource::Synthetic { seed: cfg.seed })?
        .save(&out.join("images.feat"))?;

    for (l, lang) in manifest.languages.iter().enumerate() {
        let dir = out.join(lang);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for split in Split::ALL {
            let mut tsv = String::new();
            for i in bench.split_range(split) {
                tsv.push_str(&format!("{i}\t{}\t{}\n", bench.captions[0][i], bench.captions[l][i]));
            }
            write(&dir.join(format!("{split}.tsv")), tsv.as_bytes())?;
        }
        let mut corpus = String::new();
        for i in bench.split_range(Split::Train) {
            corpus.push_str(&bench.captions[l][i]);
            corpus.push('\n');
        }
        write(&dir.join("corpus.txt"), corpus.as_bytes())?;
    }
    Ok(manifest)
}

fn language_dir(dir: &Path, manifest: &DatasetManifest, language: &str) -> Result<PathBuf> {
    if !manifest.languages.iter().any(|l| l == language) {
        return Err(Error::InvalidInput(format!("language `{language}` is not in the dataset")));
    }
    Ok(dir.join(language))
}

/// Triplets of one language split plus the shared image features.
pub fn load_dataset(dir: &Path, language: &str, split: Split) -> Result<(Vec<TrainingTriplet>, ImageFeatureProvider)> {
    let manifest = DatasetManifest::load(dir)?;
    let images = load_images(dir)?;
    let triplets = load_split(dir, &manifest, language, split, images.len())?;
    Ok((triplets, images))
}

pub fn load_images(dir: &Path) -> Result<ImageFeatureProvider> {
    let path = dir.join("images.feat");
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    ImageFeatureProvider::load(&path)
}

pub fn load_split(
    dir: &Path,
    manifest: &DatasetManifest,
    language: &str,
    split: Split,
    n_images: usize,
) -> Result<Vec<TrainingTriplet>> {
    let path = language_dir(dir, manifest, language)?.join(format!("{split}.tsv"));
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.clone(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(perr(n + 1, format!("expected 3 tab-separated fields, found {}", fields.len())));
        }
        let image_index: usize = fields[0]
            .parse()
            .map_err(|_| perr(n + 1, format!("bad image index `{}`", fields[0])))?;
        if image_index >= n_images {
            return Err(perr(n + 1, format!("image {image_index} does not exist ({n_images} images)")));
        }
        if fields[1].is_empty() || fields[2].is_empty() {
            return Err(perr(n + 1, "empty caption".into()));
        }
        out.push(TrainingTriplet {
            image_index,
            english: fields[1].to_string(),
            foreign: fields[2].to_string(),
            language_id: language.to_string(),
        });
    }
    let expected = manifest.split_len(split);
    if out.len() != expected {
        return Err(perr(
            out.len() + 1,
            format!("{} rows, manifest declares {expected}", out.len()),
        ));
    }
    Ok(out)
}

pub fn load_corpus(dir: &Path, manifest: &DatasetManifest, language: &str) -> Result<Vec<String>> {
    let path = language_dir(dir, manifest, language)?.join("corpus.txt");
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}
