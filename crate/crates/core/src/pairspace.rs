//! Pair construction and the dichotomy transformation.
//!
//! A pair of embeddings `(φ_q, φ_g)` maps to `u = |φ_q − φ_g|`. Pairs of the
//! same class are within-class (`y = +1`), all others between-class (`y = −1`).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};

/// Labelled query/gallery index pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairBatch {
    pub q: Vec<usize>,
    pub g: Vec<usize>,
    pub y: Vec<i8>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.y.iter().filter(|&&y| y == 1).count()
    }

    fn push(&mut self, q: usize, g: usize, y: i8) {
        self.q.push(q);
        self.g.push(g);
        self.y.push(y);
    }
}

/// Pair counts for `K` classes with `R` references each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PairCount {
    pub total: u64,
    pub positives: u64,
    pub negatives: u64,
}

fn choose2(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

pub fn count_pairs(classes: u64, refs: u64) -> Result<PairCount> {
    if classes == 0 || refs == 0 {
        return Err(Error::invalid(format!(
            "classes and references per class must be at least 1 (got K={classes}, R={refs})"
        )));
    }
    Ok(PairCount {
        total: choose2(classes * refs),
        positives: classes * choose2(refs),
        negatives: choose2(classes) * refs * refs,
    })
}

/// Every unordered pair `(i, j)`, `i < j`, in lexicographic order.
pub fn enumerate_all_pairs<L: PartialEq>(labels: &[L]) -> PairBatch {
    let mut out = PairBatch::default();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            out.push(i, j, if labels[i] == labels[j] { 1 } else { -1 });
        }
    }
    out
}

/// Draws `pairs_per_batch / 2` within-class and as many between-class pairs.
///
/// Sampling is without replacement when the pool is large enough and with
/// replacement otherwise. The result is shuffled.
pub fn sample_balanced_pairs(
    labels: &[usize],
    pairs_per_batch: usize,
    rng: &mut SeededRng,
) -> Result<PairBatch> {
    if pairs_per_batch == 0 || !pairs_per_batch.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "pairs_per_batch must be a positive even number, got {pairs_per_batch}"
        )));
    }
    let all = enumerate_all_pairs(labels);
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for k in 0..all.len() {
        if all.y[k] == 1 {
            pos.push(k);
        } else {
            neg.push(k);
        }
    }
    if pos.is_empty() {
        return Err(Error::Sampling(
            "no positive pairs available: every class in the batch has a single sample".into(),
        ));
    }
    if neg.is_empty() {
        return Err(Error::Sampling(
            "no negative pairs available: the batch contains a single class".into(),
        ));
    }
    let half = pairs_per_batch / 2;
    let mut chosen = Vec::with_capacity(pairs_per_batch);
    for pool in [&pos, &neg] {
        if pool.len() >= half {
            chosen.extend(rng.sample_distinct(pool.len(), half).into_iter().map(|i| pool[i]));
        } else {
            chosen.extend((0..half).map(|_| pool[rng.below(pool.len())]));
        }
    }
    rng.shuffle(&mut chosen);
    let mut out = PairBatch::default();
    for k in chosen {
        out.push(all.q[k], all.g[k], all.y[k]);
    }
    Ok(out)
}

/// `u[i, j] = |φ_q[i, j] − φ_g[i, j]|`.
pub fn dichotomy_transform(phi_q: &Tensor, phi_g: &Tensor) -> Result<Tensor> {
    if phi_q.shape() != phi_g.shape() {
        return Err(Error::shape(
            "dichotomy_transform",
            format!("{:?} vs {:?}", phi_q.shape(), phi_g.shape()),
        ));
    }
    let data = phi_q
        .data()
        .iter()
        .zip(phi_g.data())
        .map(|(a, b)| (a - b).abs())
        .collect();
    Tensor::new(phi_q.shape().to_vec(), data)
}

/// Backward of [`dichotomy_transform`]: `(∂L/∂φ_q, ∂L/∂φ_g)`, using
/// subgradient 0 where `φ_q == φ_g`.
pub fn dichotomy_backward(phi_q: &Tensor, phi_g: &Tensor, grad_u: &Tensor) -> (Tensor, Tensor) {
    let mut gq = Tensor::zeros(phi_q.shape());
    let mut gg = Tensor::zeros(phi_q.shape());
    for (k, (a, b)) in phi_q.data().iter().zip(phi_g.data()).enumerate() {
        let s = sign(a - b);
        gq.data_mut()[k] = s * grad_u.data()[k];
        gg.data_mut()[k] = -s * grad_u.data()[k];
    }
    (gq, gg)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Dissimilarity vectors for every pair, rows taken from `phi`.
pub fn pair_dissimilarities(phi: &Tensor, pairs: &PairBatch) -> Result<Tensor> {
    let n = phi.rows();
    if let Some(&bad) = pairs.q.iter().chain(&pairs.g).find(|&&i| i >= n) {
        return Err(Error::invalid(format!(
            "pair index {bad} out of range for {n} embeddings"
        )));
    }
    dichotomy_transform(&phi.select_rows(&pairs.q), &phi.select_rows(&pairs.g))
}

/// Routes `∂L/∂u` back onto the rows of `phi` the pairs were built from.
pub fn scatter_pair_grad(phi: &Tensor, pairs: &PairBatch, grad_u: &Tensor) -> Tensor {
    let mut grad = Tensor::zeros(phi.shape());
    for k in 0..pairs.len() {
        let (qi, gi) = (pairs.q[k], pairs.g[k]);
        for j in 0..phi.cols() {
            let s = sign(phi.at(qi, j) - phi.at(gi, j)) * grad_u.at(k, j);
            grad.row_mut(qi)[j] += s;
            grad.row_mut(gi)[j] -= s;
        }
    }
    grad
}
