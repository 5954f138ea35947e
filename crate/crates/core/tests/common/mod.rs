//! Reference implementations shared by the integration tests. None of
//! them touch the tape.

#![allow(dead_code)]

use rca_core::data::{stratified_batches, synth_generate, SynthConfig};
use rca_core::{Batch, Corpus};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Supervised contrastive loss by direct summation: for every anchor with
/// at least one positive, minus the mean over positives of
/// `log(exp(s_ip/τ) / Σ_{j≠i} exp(s_ij/τ))`, averaged over such anchors.
/// `None` when no anchor has a positive.
pub fn supcon_brute(rows: &[Vec<f64>], groups: &[usize], tau: f64) -> Option<f64> {
    let n = rows.len();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&k| k != i && groups[k] == groups[i]).collect();
        if positives.is_empty() {
            continue;
        }
        let denom: f64 = (0..n)
            .filter(|&j| j != i)
            .map(|j| (cosine(&rows[i], &rows[j]) / tau).exp())
            .sum();
        let mut term = 0.0;
        for &p in &positives {
            let num = (cosine(&rows[i], &rows[p]) / tau).exp();
            term -= (num / denom).ln();
        }
        total += term / positives.len() as f64;
        anchors += 1;
    }
    (anchors > 0).then(|| total / anchors as f64)
}

/// Binary logistic regression fitted by full-batch gradient descent.
/// Returns weights with the bias last.
pub fn logistic_regression(xs: &[Vec<f64>], ys: &[usize], steps: usize, lr: f64) -> Vec<f64> {
    let d = xs[0].len();
    let mut w = vec![0.0; d + 1];
    for _ in 0..steps {
        let mut g = vec![0.0; d + 1];
        for (x, &y) in xs.iter().zip(ys) {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + w[d];
            let err = 1.0 / (1.0 + (-z).exp()) - y as f64;
            for j in 0..d {
                g[j] += err * x[j];
            }
            g[d] += err;
        }
        for j in 0..=d {
            w[j] -= lr * g[j] / xs.len() as f64;
        }
    }
    w
}

pub fn logistic_accuracy(w: &[f64], xs: &[Vec<f64>], ys: &[usize]) -> f64 {
    let d = w.len() - 1;
    let hits = xs
        .iter()
        .zip(ys)
        .filter(|(x, &y)| {
            let z: f64 = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + w[d];
            usize::from(z > 0.0) == y
        })
        .count();
    hits as f64 / xs.len() as f64
}

/// Dense rows of a corpus.
pub fn dense(corpus: &Corpus) -> Vec<Vec<f64>> {
    let all: Vec<usize> = (0..corpus.len()).collect();
    let x = corpus.batch(&all).x;
    (0..corpus.len()).map(|i| x.row(i).to_vec()).collect()
}

pub fn small_corpus(seed: u64) -> Corpus {
    synth_generate(&SynthConfig {
        num_domains: 2,
        num_classes: 2,
        per_cell_count: 24,
        feature_dim: 8,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

/// First stratified batch of `small_corpus(seed)`.
pub fn small_batch(seed: u64, batch_size: usize) -> Batch {
    let corpus = small_corpus(seed);
    let batches = stratified_batches(&corpus, batch_size, 4, seed).unwrap();
    corpus.batch(&batches[0])
}
