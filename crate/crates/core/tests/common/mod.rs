//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::Array2;

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Symmetric InfoNCE from the full K×K cosine table, without max-shifting.
pub fn cm_loss(r_i: &Array2<f64>, r_f: &Array2<f64>, tau: f64) -> f64 {
    let img: Vec<Vec<f64>> = rows(r_i).iter().map(|r| normalize(r)).collect();
    let txt: Vec<Vec<f64>> = rows(r_f).iter().map(|r| normalize(r)).collect();
    let k = img.len();
    let cos = |a: usize, b: usize| img[a].iter().zip(&txt[b]).map(|(x, y)| x * y).sum::<f64>();
    let mut i2f = 0.0;
    let mut f2i = 0.0;
    for a in 0..k {
        let row: f64 = (0..k).map(|b| (cos(a, b) / tau).exp()).sum();
        i2f -= ((cos(a, a) / tau).exp() / row).ln();
        let col: f64 = (0..k).map(|b| (cos(b, a) / tau).exp()).sum();
        f2i -= ((cos(a, a) / tau).exp() / col).ln();
    }
    0.5 * (i2f + f2i) / k as f64
}

pub fn cl_loss(r_e: &Array2<f64>, r_f: &Array2<f64>) -> f64 {
    let k = r_e.nrows() as f64;
    let sq: f64 = (r_e - r_f).iter().map(|d| d * d).sum();
    sq / (2.0 * k)
}

/// Recall@k by fully sorting the gallery for every query.
pub fn recall_at_k(q: &Array2<f64>, g: &Array2<f64>, rel: &[Vec<usize>], k: usize) -> f64 {
    let qs: Vec<Vec<f64>> = rows(q).iter().map(|r| normalize(r)).collect();
    let gs: Vec<Vec<f64>> = rows(g).iter().map(|r| normalize(r)).collect();
    let mut hits = 0;
    for (qv, r) in qs.iter().zip(rel) {
        let mut order: Vec<(f64, usize)> = gs
            .iter()
            .enumerate()
            .map(|(i, gv)| (qv.iter().zip(gv).map(|(a, b)| a * b).sum(), i))
            .collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        if order.iter().take(k).any(|(_, i)| r.contains(i)) {
            hits += 1;
        }
    }
    100.0 * hits as f64 / qs.len() as f64
}

/// Average recall of row `j` of a lower-triangular matrix.
pub fn average_recall(a: &[Vec<f64>], j: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..=j {
        s += a[j][i];
    }
    s / (j + 1) as f64
}

/// Mean over earlier tasks of (best earlier recall − recall after `j`).
pub fn forgetting(a: &[Vec<f64>], j: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..j {
        let mut best = f64::NEG_INFINITY;
        for row in a.iter().take(j).skip(i) {
            if row[i] > best {
                best = row[i];
            }
        }
        s += best - a[j][i];
    }
    s / j as f64
}
