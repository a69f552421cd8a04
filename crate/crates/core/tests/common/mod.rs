//! Test fixtures and naive reference implementations.
//!
//! The oracles below are written as plain index loops over row-major data
//! and share no code with the library beyond the data types.

#![allow(dead_code)]

use dac_core::bundle::{EmbeddingBundle, Record, SplitTag};
use dac_core::cache::{build_visual_cache, TextCache, VisualCache};
use dac_core::linalg::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn raw_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    naive_normalize(&raw_vec(rng, d))
}

pub fn naive_normalize(v: &[f64]) -> Vec<f64> {
    let mut s = 0.0;
    for x in v {
        s += x * x;
    }
    let n = s.sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Identity plus uniform noise of the given spread.
pub fn random_theta(rng: &mut ChaCha8Rng, d: usize, spread: f64) -> Mat {
    let mut data = vec![0.0; d * d];
    for r in 0..d {
        for c in 0..d {
            data[r * d + c] = if r == c { 1.0 } else { 0.0 } + spread * rng.gen_range(-1.0..1.0);
        }
    }
    Mat::from_vec(d, d, data).unwrap()
}

pub fn naive_matvec(m: &Mat, z: &[f64]) -> Vec<f64> {
    let (rows, cols) = m.shape();
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        for c in 0..cols {
            out[r] += m.data()[r * cols + c] * z[c];
        }
    }
    out
}

/// `M^T z` for a `d x n` matrix.
pub fn naive_matvec_t(m: &Mat, z: &[f64]) -> Vec<f64> {
    let (rows, cols) = m.shape();
    let mut out = vec![0.0; cols];
    for c in 0..cols {
        for r in 0..rows {
            out[c] += m.data()[r * cols + c] * z[r];
        }
    }
    out
}

fn naive_lse(v: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &x in v {
        if x > m {
            m = x;
        }
    }
    let mut s = 0.0;
    for &x in v {
        s += (x - m).exp();
    }
    m + s.ln()
}

/// Contrastive loss for one pair batch, single linear layer `theta`.
pub fn naive_contrastive(theta: &Mat, first: &[Vec<f64>], second: &[Vec<f64>], tau: f64) -> f64 {
    let gi: Vec<Vec<f64>> = first.iter().map(|z| naive_normalize(&naive_matvec(theta, z))).collect();
    let gj: Vec<Vec<f64>> = second.iter().map(|z| naive_normalize(&naive_matvec(theta, z))).collect();
    let n = first.len();
    let mut loss = 0.0;
    for a in 0..n {
        let mut scores = vec![0.0; n];
        for q in 0..n {
            let mut s = 0.0;
            for k in 0..gj[a].len() {
                s += gj[a][k] * gi[q][k];
            }
            scores[q] = s / tau;
        }
        loss += naive_lse(&scores) - scores[a];
    }
    loss
}

pub fn column(m: &Mat, c: usize) -> Vec<f64> {
    let (rows, cols) = m.shape();
    (0..rows).map(|r| m.data()[r * cols + c]).collect()
}

pub fn naive_clip(text: &TextCache, z: &[f64]) -> Vec<f64> {
    naive_matvec_t(text.weights(), z)
}

/// Intra-modal scores via the explicit one-hot value matrix.
pub fn naive_intra(keys: &[Vec<f64>], values: &Mat, q: &[f64], sharpness: f64) -> Vec<f64> {
    let n_classes = values.cols();
    let mut out = vec![0.0; n_classes];
    for (k, key) in keys.iter().enumerate() {
        let mut s = 0.0;
        for i in 0..q.len() {
            s += key[i] * q[i];
        }
        let aff = (sharpness * (s - 1.0)).exp();
        for (n, o) in out.iter_mut().enumerate() {
            *o += aff * values.data()[k * n_classes + n];
        }
    }
    out
}

pub fn cache_keys(cache: &VisualCache) -> Vec<Vec<f64>> {
    (0..cache.n_keys()).map(|k| column(cache.keys(), k)).collect()
}

pub fn naive_tip(text: &TextCache, cache: &VisualCache, z: &[f64], alpha: f64, beta: f64) -> Vec<f64> {
    let inter = naive_clip(text, z);
    let intra = naive_intra(&cache_keys(cache), cache.values(), z, beta);
    inter.iter().zip(&intra).map(|(a, b)| a + alpha * b).collect()
}

/// DAC-V logits from the unadapted cache: keys are adapted inside.
pub fn naive_dacv(text: &TextCache, cache: &VisualCache, theta: &Mat, z: &[f64], alpha: f64) -> Vec<f64> {
    let g = naive_normalize(&naive_matvec(theta, z));
    let keys: Vec<Vec<f64>> = cache_keys(cache)
        .iter()
        .map(|k| naive_normalize(&naive_matvec(theta, k)))
        .collect();
    let inter = naive_clip(text, z);
    let intra = naive_intra(&keys, cache.values(), &g, 1.0);
    inter.iter().zip(&intra).map(|(a, b)| a + alpha * b).collect()
}

/// Mean cross-entropy of DAC-V logits with keys adapted by `theta`.
pub fn naive_xent(
    text: &TextCache,
    cache: &VisualCache,
    theta: &Mat,
    queries: &[(Vec<f64>, usize)],
    alpha: f64,
) -> f64 {
    let mut total = 0.0;
    for (z, y) in queries {
        let logits = naive_dacv(text, cache, theta, z, alpha);
        total += naive_lse(&logits) - logits[*y];
    }
    total / queries.len() as f64
}

/// Bundle with `views` random raw views for every (class, shot).
pub fn random_bundle(
    rng: &mut ChaCha8Rng,
    n: usize,
    k: usize,
    views: usize,
    d: usize,
    split: SplitTag,
) -> EmbeddingBundle {
    let classes = (0..n).map(|c| format!("class{c}")).collect();
    let mut b = EmbeddingBundle::new(d, classes, split, "random");
    for c in 0..n {
        for s in 0..k {
            for v in 0..views {
                let e = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                b.records.push(Record::new(c, s, v, e));
            }
        }
    }
    b
}

pub fn random_cache(rng: &mut ChaCha8Rng, n: usize, k: usize, d: usize) -> VisualCache {
    build_visual_cache(&random_bundle(rng, n, k, 3, d, SplitTag::Cache), 10).unwrap()
}

pub fn random_text(rng: &mut ChaCha8Rng, n: usize, d: usize, normalize: bool) -> TextCache {
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|_| if normalize { unit_vec(rng, d) } else { raw_vec(rng, d) })
        .collect();
    TextCache::from_weights(Mat::from_columns(&cols).unwrap(), (0..n).map(|c| format!("class{c}")).collect())
        .unwrap()
}

/// Central finite differences of `f` with respect to every entry of `theta`.
pub fn fd_grad(theta: &Mat, h: f64, f: impl Fn(&Mat) -> f64) -> Vec<f64> {
    (0..theta.data().len())
        .map(|idx| {
            let mut plus = theta.clone();
            plus.data_mut()[idx] += h;
            let mut minus = theta.clone();
            minus.data_mut()[idx] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||b||, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += (x - y) * (x - y);
        den += y * y;
    }
    num.sqrt() / den.sqrt().max(floor)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
