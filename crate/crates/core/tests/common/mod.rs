//! Random fixtures and brute-force oracles shared by the integration tests.
//!
//! The oracles here deliberately avoid the library's code paths: they
//! recompute logits, rankings and losses with plain loops.

#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeSet;

use imblens::{ClassifierHead, EmbeddingSet, Matrix, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_set(rng: &mut ChaCha8Rng, n: usize, h: usize, c: usize, split: Split) -> EmbeddingSet {
    let fe: Vec<f32> = (0..n * h).map(|_| rng.random_range(0.0f32..4.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
    EmbeddingSet::new(Matrix::from_vec(n, h, fe).unwrap(), labels, c, split).unwrap()
}

pub fn random_head(rng: &mut ChaCha8Rng, c: usize, h: usize, with_bias: bool) -> ClassifierHead {
    let w: Vec<f32> = (0..c * h).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let bias = with_bias.then(|| (0..c).map(|_| rng.random_range(-1.0f32..1.0)).collect());
    ClassifierHead::new(Matrix::from_vec(c, h, w).unwrap(), bias).unwrap()
}

pub struct OracleInstance {
    pub logits: Vec<f64>,
    pub reference: usize,
    pub adversary_logit: f64,
    /// `covered[k - 1]` for k = 1..=H.
    pub covered: Vec<bool>,
    pub minimal_k: usize,
}

/// Recomputes everything from scratch: logits by explicit dot products,
/// reference by first maximum, and for every k the top-k CE entries by
/// repeated selection of the largest remaining entry.
pub fn oracle_instance(fe: &[f32], head: &ClassifierHead) -> OracleInstance {
    let c = head.num_classes();
    let h = fe.len();
    let bias = |k: usize| head.bias().map_or(0.0, |b| b[k] as f64);
    let mut logits = vec![0.0f64; c];
    for (k, logit) in logits.iter_mut().enumerate() {
        let mut s = 0.0f64;
        for j in 0..h {
            s += fe[j] as f64 * head.weights().get(k, j) as f64;
        }
        *logit = s + bias(k);
    }
    let mut reference = 0;
    for k in 0..c {
        if logits[k] > logits[reference] {
            reference = k;
        }
    }
    let mut adversary_logit = f64::NEG_INFINITY;
    for k in 0..c {
        if k != reference && logits[k] > adversary_logit {
            adversary_logit = logits[k];
        }
    }
    let ce: Vec<f64> = (0..h)
        .map(|j| fe[j] as f64 * head.weights().get(reference, j) as f64)
        .collect();
    let mut covered = Vec::with_capacity(h);
    for k in 1..=h {
        let mut taken = vec![false; h];
        let mut sum = 0.0f64;
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for j in 0..h {
                if taken[j] {
                    continue;
                }
                if best.is_none_or(|b| ce[j] > ce[b]) {
                    best = Some(j);
                }
            }
            let b = best.unwrap();
            taken[b] = true;
            sum += ce[b];
        }
        covered.push(sum + bias(reference) > adversary_logit);
    }
    let minimal_k = covered.iter().position(|&x| x).map_or(h + 1, |p| p + 1);
    OracleInstance {
        logits,
        reference,
        adversary_logit,
        covered,
        minimal_k,
    }
}

/// Top-k identity set of the reference CE row, by explicit selection.
pub fn oracle_top_set(fe: &[f32], head: &ClassifierHead, k: usize) -> BTreeSet<usize> {
    let o = oracle_instance(fe, head);
    let ce: Vec<f64> = (0..fe.len())
        .map(|j| fe[j] as f64 * head.weights().get(o.reference, j) as f64)
        .collect();
    let mut chosen = BTreeSet::new();
    for _ in 0..k.min(fe.len()) {
        let mut best: Option<usize> = None;
        for j in 0..fe.len() {
            if chosen.contains(&j) {
                continue;
            }
            if best.is_none_or(|b| ce[j] > ce[b]) {
                best = Some(j);
            }
        }
        chosen.insert(best.unwrap());
    }
    chosen
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean softmax cross-entropy written out naively, parameters in f64.
pub fn naive_loss(es: &EmbeddingSet, weights: &[f64], bias: &[f64]) -> f64 {
    let (c, h) = (bias.len(), es.dim());
    let mut total = 0.0;
    for n in 0..es.len() {
        let x = es.fe().row(n);
        let z: Vec<f64> = (0..c)
            .map(|k| (0..h).map(|j| x[j] as f64 * weights[k * h + j]).sum::<f64>() + bias[k])
            .collect();
        let p = softmax(&z);
        total -= p[es.labels()[n]].ln();
    }
    total / es.len() as f64
}

/// Smallest logit gap between the top two classes over all instances.
pub fn min_margin(es: &EmbeddingSet, head: &ClassifierHead) -> f64 {
    (0..es.len())
        .map(|n| {
            let o = oracle_instance(es.fe().row(n), head);
            o.logits[o.reference] - o.adversary_logit
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn separable_fixture() -> EmbeddingSet {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..100 {
        let class = usize::from(i >= 50);
        rows.push(if class == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] });
        labels.push(class);
    }
    EmbeddingSet::new(Matrix::from_rows(&rows).unwrap(), labels, 2, Split::Train).unwrap()
}
