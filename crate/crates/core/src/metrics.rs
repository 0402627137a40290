//! Retrieval metrics and the continual-learning summary statistics.

use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{dist_stats, DistStats, EmbeddingTable};
use crate::error::{Error, Result};
use crate::objectives::cosine;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    ImageToText,
    TextToImage,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::ImageToText, Direction::TextToImage];

    fn slot(self) -> usize {
        match self {
            Direction::ImageToText => 0,
            Direction::TextToImage => 1,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::ImageToText => "img2txt",
            Direction::TextToImage => "txt2img",
        })
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "img2txt" => Ok(Direction::ImageToText),
            "txt2img" => Ok(Direction::TextToImage),
            _ => Err(format!("unknown direction `{s}`")),
        }
    }
}

fn unit_rows<T: Scalar>(m: &Array2<T>) -> Vec<Vec<f64>> {
    m.rows()
        .into_iter()
        .map(|r| {
            let n = r.iter().map(|v| v.wide() * v.wide()).sum::<f64>().sqrt();
            let inv = if n > 0.0 { 1.0 / n } else { 0.0 };
            r.iter().map(|v| v.wide() * inv).collect()
        })
        .collect()
}

/// Percentage of queries whose top-`k` gallery items (cosine similarity,
/// ties broken towards the lower index) contain a relevant item.
pub fn recall_at_k<T: Scalar>(
    queries: &Array2<T>,
    gallery: &Array2<T>,
    relevance: &[Vec<usize>],
    k: usize,
) -> Result<f64> {
    if relevance.len() != queries.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} relevance sets for {} queries",
            relevance.len(),
            queries.nrows()
        )));
    }
    if queries.nrows() == 0 {
        return Err(Error::InvalidInput("no queries".into()));
    }
    if queries.ncols() != gallery.ncols() {
        return Err(Error::DimensionMismatch("query and gallery widths differ".into()));
    }
    if let Some(q) = relevance.iter().position(|r| r.is_empty()) {
        return Err(Error::InvalidInput(format!("query {q} has no relevant gallery item")));
    }
    if let Some(&g) = relevance.iter().flatten().find(|&&g| g >= gallery.nrows()) {
        return Err(Error::InvalidInput(format!("relevant item {g} outside gallery")));
    }
    let q = unit_rows(queries);
    let g = unit_rows(gallery);
    let hits: usize = q
        .par_iter()
        .zip(relevance.par_iter())
        .map(|(qv, rel)| {
            let sims: Vec<f64> = g.iter().map(|gv| qv.iter().zip(gv).map(|(a, b)| a * b).sum()).collect();
            let hit = rel.iter().any(|&r| {
                let s = sims[r];
                let ahead = sims
                    .iter()
                    .enumerate()
                    .filter(|&(h, &sh)| sh > s || (sh == s && h < r))
                    .count();
                ahead < k
            });
            usize::from(hit)
        })
        .sum();
    Ok(100.0 * hits as f64 / queries.nrows() as f64)
}

/// Lower-triangular matrix of Recall@1 per retrieval direction: entry
/// `(j, i)` is task `i` measured after training task `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    n_tasks: usize,
    entries: Vec<Option<[f64; 2]>>,
}

impl EvalMatrix {
    pub fn new(n_tasks: usize) -> Self {
        EvalMatrix {
            n_tasks,
            entries: vec![None; n_tasks * n_tasks],
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn set(&mut self, j: usize, i: usize, dir: Direction, value: f64) -> Result<()> {
        if i > j || j >= self.n_tasks {
            return Err(Error::InvalidInput(format!("entry ({j}, {i}) outside the lower triangle")));
        }
        if !(0.0..=100.0).contains(&value) {
            return Err(Error::InvalidInput(format!("recall {value} outside [0, 100]")));
        }
        let slot = self.entries[j * self.n_tasks + i].get_or_insert([f64::NAN; 2]);
        slot[dir.slot()] = value;
        Ok(())
    }

    pub fn get(&self, j: usize, i: usize, dir: Direction) -> Option<f64> {
        if i > j || j >= self.n_tasks {
            return None;
        }
        self.entries[j * self.n_tasks + i]
            .map(|e| e[dir.slot()])
            .filter(|v| !v.is_nan())
    }

    /// Whether row `j` holds all `j + 1` entries for `dir`.
    pub fn row_complete(&self, j: usize, dir: Direction) -> bool {
        j < self.n_tasks && (0..=j).all(|i| self.get(j, i, dir).is_some())
    }

    /// Number of entries recorded in row `j` (both directions counted once).
    pub fn row_len(&self, j: usize) -> usize {
        (0..=j.min(self.n_tasks.saturating_sub(1)))
            .filter(|&i| self.entries[j * self.n_tasks + i].is_some())
            .count()
    }

    /// Last row that is complete in both directions.
    pub fn last_complete_row(&self) -> Option<usize> {
        (0..self.n_tasks)
            .rev()
            .find(|&j| Direction::ALL.iter().all(|&d| self.row_complete(j, d)))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("j,i,direction,recall1\n");
        for j in 0..self.n_tasks {
            for i in 0..=j {
                for dir in Direction::ALL {
                    if let Some(v) = self.get(j, i, dir) {
                        let _ = writeln!(s, "{j},{i},{dir},{v}");
                    }
                }
            }
        }
        s
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "j,i,direction,recall1")) => {}
            _ => return Err(perr(1, "missing header `j,i,direction,recall1`".into())),
        }
        let mut rows = Vec::new();
        for (n, line) in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(perr(n + 1, format!("expected 4 fields, found {}", f.len())));
            }
            let j: usize = f[0].parse().map_err(|_| perr(n + 1, "bad j".into()))?;
            let i: usize = f[1].parse().map_err(|_| perr(n + 1, "bad i".into()))?;
            let dir: Direction = f[2].parse().map_err(|e| perr(n + 1, e))?;
            let v: f64 = f[3].parse().map_err(|_| perr(n + 1, "bad recall".into()))?;
            rows.push((n + 1, j, i, dir, v));
        }
        let n_tasks = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        let mut m = EvalMatrix::new(n_tasks);
        for (line, j, i, dir, v) in rows {
            m.set(j, i, dir, v).map_err(|e| perr(line, e.to_string()))?;
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, path)
    }
}

/// Mean Recall@1 over every task seen up to `j` (the anchor task included).
pub fn average_recall(m: &EvalMatrix, j: usize, dir: Direction) -> Result<f64> {
    if !m.row_complete(j, dir) {
        return Err(Error::UndefinedMetric(format!("row {j} of the eval matrix is incomplete")));
    }
    let sum: f64 = (0..=j).map(|i| m.get(j, i, dir).expect("complete")).sum();
    Ok(sum / (j + 1) as f64)
}

/// Mean drop from each earlier task's best measured recall to its recall after `j`.
///
/// The best value for task `i` is taken over the rows `k ∈ [i, j−1]` that
/// were recorded; a task with no earlier measurement is an error.
pub fn forgetting(m: &EvalMatrix, j: usize, dir: Direction) -> Result<f64> {
    if j < 1 {
        return Err(Error::UndefinedMetric("forgetting needs at least two tasks".into()));
    }
    if !m.row_complete(j, dir) {
        return Err(Error::UndefinedMetric(format!("row {j} of the eval matrix is incomplete")));
    }
    let mut total = 0.0;
    for i in 0..j {
        let best = (i..j)
            .filter_map(|k| m.get(k, i, dir))
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
            .ok_or_else(|| Error::UndefinedMetric(format!("task {i} was never measured before row {j}")))?;
        total += best - m.get(j, i, dir).expect("complete");
    }
    Ok(total / j as f64)
}

/// `eta · cos(img, english) + (1 − eta) · cos(img, foreign)`.
pub fn fused_similarity<T: Scalar>(
    r_img: ArrayView1<'_, T>,
    r_eng: ArrayView1<'_, T>,
    r_foreign: ArrayView1<'_, T>,
    eta: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::InvalidInput(format!("fusion weight {eta} outside [0, 1]")));
    }
    let degenerate = |matrix| Error::DegenerateFeature { matrix, row: 0 };
    let ce = cosine(r_img, r_eng).ok_or_else(|| degenerate("fusion-english"))?;
    let cf = cosine(r_img, r_foreign).ok_or_else(|| degenerate("fusion-foreign"))?;
    Ok(eta * ce + (1.0 - eta) * cf)
}

/// Recall@1 under score fusion; row `q` of each text matrix describes image `q`.
pub fn fused_recall_at_1<T: Scalar>(
    images: &Array2<T>,
    english: &Array2<T>,
    foreign: &Array2<T>,
    eta: f64,
    dir: Direction,
) -> Result<f64> {
    let n = images.nrows();
    if english.nrows() != n || foreign.nrows() != n || n == 0 {
        return Err(Error::DimensionMismatch("fusion inputs must share a non-zero row count".into()));
    }
    let mut sims = Array2::<f64>::zeros((n, n));
    for a in 0..n {
        for b in 0..n {
            sims[[a, b]] = fused_similarity(images.row(a), english.row(b), foreign.row(b), eta)?;
        }
    }
    let mut hits = 0;
    for q in 0..n {
        let score = |g: usize| match dir {
            Direction::ImageToText => sims[[q, g]],
            Direction::TextToImage => sims[[g, q]],
        };
        let s = score(q);
        let ahead = (0..n).filter(|&g| score(g) > s || (score(g) == s && g < q)).count();
        hits += usize::from(ahead == 0);
    }
    Ok(100.0 * hits as f64 / n as f64)
}

/// Equal-width histogram of every table entry over `[mu − 5σ, mu + 5σ]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TedHistogram {
    pub stats: DistStats,
    pub bins: Vec<(f64, f64, u64)>,
    pub below: u64,
    pub above: u64,
    /// Set when σ = 0 and all mass sits in a single bin.
    pub degenerate: bool,
}

impl TedHistogram {
    pub fn total(&self) -> u64 {
        self.below + self.above + self.bins.iter().map(|b| b.2).sum::<u64>()
    }

    /// CSV with header `bin_left,bin_right,count`; outliers appear as
    /// half-open bins reaching to `-inf` / `inf`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_left,bin_right,count\n");
        let lo = self.bins.first().map_or(self.stats.mu, |b| b.0);
        let hi = self.bins.last().map_or(self.stats.mu, |b| b.1);
        if self.below > 0 {
            let _ = writeln!(s, "-inf,{lo},{}", self.below);
        }
        for (l, r, c) in &self.bins {
            let _ = writeln!(s, "{l},{r},{c}");
        }
        if self.above > 0 {
            let _ = writeln!(s, "{hi},inf,{}", self.above);
        }
        s
    }
}

pub fn ted_histogram<T: Scalar>(table: &EmbeddingTable<T>, bins: usize) -> Result<TedHistogram> {
    if bins < 2 {
        return Err(Error::InvalidInput(format!("histogram needs at least 2 bins, got {bins}")));
    }
    let stats = dist_stats(table)?;
    let total = table.matrix().len() as u64;
    if stats.sigma == 0.0 {
        log::warn!("degenerate embedding distribution (sigma = 0); emitting a single bin");
        return Ok(TedHistogram {
            stats,
            bins: vec![(stats.mu, stats.mu, total)],
            below: 0,
            above: 0,
            degenerate: true,
        });
    }
    let lo = stats.mu - 5.0 * stats.sigma;
    let hi = stats.mu + 5.0 * stats.sigma;
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    let (mut below, mut above) = (0, 0);
    for v in table.values() {
        let x = v.wide();
        if x < lo {
            below += 1;
        } else if x > hi {
            above += 1;
        } else {
            let b = (((x - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
    }
    let bins = counts
        .into_iter()
        .enumerate()
        .map(|(b, c)| (lo + b as f64 * width, lo + (b + 1) as f64 * width, c))
        .collect();
    Ok(TedHistogram {
        stats,
        bins,
        below,
        above,
        degenerate: false,
    })
}
