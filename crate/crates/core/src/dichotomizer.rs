//! Max-margin pair classifier over dissimilarity vectors, plus the diagonal
//! and full Mahalanobis distances it is related to.
//!
//! The classifier scores `s = W_cᵀ·v + b`, where `v` is the dissimilarity
//! vector `u` after optional batch normalisation and dropout. Larger scores
//! mean "more likely the same class"; within-class vectors sit near the
//! origin, so trained weights are typically negative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{apply_mask, dropout, BatchNorm1d, BatchNormCache, Mode};
use crate::pairspace::PairBatch;
use crate::tensor::{ParamSlot, SeededRng, Tensor};

/// How the classifier's weight norm is controlled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormRegime {
    /// `½‖W_c‖²` penalty inside the hinge objective.
    SoftL2,
    /// No penalty; `W_c` is rescaled to norm `τ` after each optimiser step.
    FixedNorm(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dichotomizer {
    pub weight: ParamSlot,
    pub bias: ParamSlot,
    pub c: f64,
    pub norm_regime: NormRegime,
    pub bn: Option<BatchNorm1d>,
    pub dropout_p: f64,
}

/// Forward state needed by [`Dichotomizer::backward_scores`].
#[derive(Debug, Clone)]
pub struct ScoreCache {
    v: Tensor,
    bn: Option<BatchNormCache>,
    mask: Option<Tensor>,
}

impl Dichotomizer {
    pub fn new(dim: usize, c: f64, norm_regime: NormRegime, rng: &mut SeededRng) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::invalid(format!("hinge penalty C must be > 0, got {c}")));
        }
        if let NormRegime::FixedNorm(tau) = norm_regime {
            if !(tau > 0.0) {
                return Err(Error::invalid(format!("fixed norm τ must be > 0, got {tau}")));
            }
        }
        let w = ParamSlot::glorot(1, dim, rng);
        let mut d = Self {
            weight: ParamSlot::new(Tensor::vector(w.value.into_data())),
            bias: ParamSlot::zeros(&[1]),
            c,
            norm_regime,
            bn: None,
            dropout_p: 0.0,
        };
        d.project_if_fixed()?;
        Ok(d)
    }

    pub fn with_batchnorm(mut self) -> Self {
        self.bn = Some(BatchNorm1d::new(self.dim()));
        self
    }

    pub fn with_dropout(mut self, p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout must be in [0, 1), got {p}")));
        }
        self.dropout_p = p;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.weight.value.len()
    }

    fn check_dim(&self, u: &Tensor) -> Result<()> {
        let (_, n) = u.expect_matrix("decision_score")?;
        if n != self.dim() {
            return Err(Error::shape(
                "decision_score",
                format!("dissimilarity vectors have {n} entries, classifier has {}", self.dim()),
            ));
        }
        Ok(())
    }

    fn linear_scores(&self, v: &Tensor) -> Vec<f64> {
        let w = self.weight.value.data();
        let b = self.bias.value.data()[0];
        (0..v.rows())
            .map(|i| w.iter().zip(v.row(i)).map(|(a, x)| a * x).sum::<f64>() + b)
            .collect()
    }

    /// Eval-mode scores; does not touch any state.
    pub fn scores(&self, u: &Tensor) -> Result<Vec<f64>> {
        self.check_dim(u)?;
        match &self.bn {
            Some(bn) => Ok(self.linear_scores(&bn.eval(u)?)),
            None => Ok(self.linear_scores(u)),
        }
    }

    /// Scores with the train/eval behaviour of the optional BN and dropout.
    pub fn decision_score(
        &mut self,
        u: &Tensor,
        mode: Mode,
        rng: &mut SeededRng,
    ) -> Result<(Vec<f64>, ScoreCache)> {
        self.check_dim(u)?;
        let (mut v, bn_cache) = match &mut self.bn {
            Some(bn) => {
                let (v, c) = bn.forward(u, mode)?;
                (v, Some(c))
            }
            None => (u.clone(), None),
        };
        let mut mask = None;
        if self.dropout_p > 0.0 && mode == Mode::Train {
            let (out, m) = dropout(&v, self.dropout_p, mode, rng)?;
            v = out;
            mask = Some(m);
        }
        let s = self.linear_scores(&v);
        Ok((
            s,
            ScoreCache {
                v,
                bn: bn_cache,
                mask,
            },
        ))
    }

    /// Same as [`Self::decision_score`] in train mode but with a fixed dropout mask.
    pub fn decision_score_with_mask(
        &mut self,
        u: &Tensor,
        mask: &Tensor,
    ) -> Result<(Vec<f64>, ScoreCache)> {
        self.check_dim(u)?;
        let (v, bn_cache) = match &mut self.bn {
            Some(bn) => {
                let (v, c) = bn.forward(u, Mode::Train)?;
                (v, Some(c))
            }
            None => (u.clone(), None),
        };
        let v = apply_mask(&v, mask);
        let s = self.linear_scores(&v);
        Ok((
            s,
            ScoreCache {
                v,
                bn: bn_cache,
                mask: Some(mask.clone()),
            },
        ))
    }

    /// Accumulates parameter gradients from `∂L/∂s` and returns `∂L/∂u`.
    pub fn backward_scores(&mut self, cache: &ScoreCache, grad_s: &[f64]) -> Tensor {
        let n = self.dim();
        let w = self.weight.value.data().to_vec();
        let mut grad_v = Tensor::zeros(&[grad_s.len(), n]);
        for (i, &g) in grad_s.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            self.bias.grad.data_mut()[0] += g;
            let vr = cache.v.row(i);
            for (gw, x) in self.weight.grad.data_mut().iter_mut().zip(vr) {
                *gw += g * x;
            }
            for (gv, wj) in grad_v.row_mut(i).iter_mut().zip(&w) {
                *gv = g * wj;
            }
        }
        if let Some(mask) = &cache.mask {
            grad_v = apply_mask(&grad_v, mask);
        }
        match (&mut self.bn, &cache.bn) {
            (Some(bn), Some(c)) => bn.backward(c, &grad_v),
            _ => grad_v,
        }
    }

    /// Hinge objective `½‖W_c‖² + C Σ max{0, 1 − y·s}` (the norm term is
    /// dropped under [`NormRegime::FixedNorm`]). Gradients are accumulated
    /// into the classifier, scaled by `scale`; returns `(loss, scale·∂L/∂u)`.
    pub fn hinge_loss(
        &mut self,
        u: &Tensor,
        y: &[i8],
        mode: Mode,
        rng: &mut SeededRng,
        scale: f64,
    ) -> Result<(f64, Tensor)> {
        check_labels(y, u.rows())?;
        let (s, cache) = self.decision_score(u, mode, rng)?;
        Ok(self.hinge_from_scores(&s, &cache, y, scale))
    }

    /// [`Self::hinge_loss`] with a fixed dropout mask, for gradient checking.
    pub fn hinge_loss_with_mask(
        &mut self,
        u: &Tensor,
        y: &[i8],
        mask: &Tensor,
        scale: f64,
    ) -> Result<(f64, Tensor)> {
        check_labels(y, u.rows())?;
        let (s, cache) = self.decision_score_with_mask(u, mask)?;
        Ok(self.hinge_from_scores(&s, &cache, y, scale))
    }

    fn hinge_from_scores(
        &mut self,
        s: &[f64],
        cache: &ScoreCache,
        y: &[i8],
        scale: f64,
    ) -> (f64, Tensor) {
        let mut loss = 0.0;
        let mut grad_s = vec![0.0; s.len()];
        for (i, (&si, &yi)) in s.iter().zip(y).enumerate() {
            let yf = f64::from(yi);
            let slack = 1.0 - yf * si;
            if slack > 0.0 {
                loss += self.c * slack;
                grad_s[i] = -self.c * yf * scale;
            }
        }
        if self.norm_regime == NormRegime::SoftL2 {
            loss += 0.5 * self.weight.value.norm_sq();
            let w = self.weight.value.clone();
            self.weight.grad.axpy(scale, &w);
        }
        let grad_u = self.backward_scores(cache, &grad_s);
        (loss, grad_u)
    }

    /// Smallest `|1 − y·s|` over the given pairs (distance to the hinge kink).
    pub fn margin_gap(&self, u: &Tensor, y: &[i8]) -> Result<f64> {
        let s = self.scores(u)?;
        Ok(s.iter()
            .zip(y)
            .map(|(si, &yi)| (1.0 - f64::from(yi) * si).abs())
            .fold(f64::INFINITY, f64::min))
    }

    pub fn project_if_fixed(&mut self) -> Result<()> {
        if let NormRegime::FixedNorm(tau) = self.norm_regime {
            fixed_norm_project(&mut self.weight.value, tau)?;
        }
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamSlot> {
        let mut v = vec![&mut self.weight, &mut self.bias];
        if let Some(bn) = &mut self.bn {
            v.extend(bn.params_mut());
        }
        v
    }
}

fn check_labels(y: &[i8], n: usize) -> Result<()> {
    if y.len() != n {
        return Err(Error::shape(
            "hinge_loss",
            format!("{} labels for {n} dissimilarity vectors", y.len()),
        ));
    }
    if let Some(bad) = y.iter().find(|&&v| v != 1 && v != -1) {
        return Err(Error::invalid(format!("pair labels must be +1 or -1, got {bad}")));
    }
    Ok(())
}

/// Predicted pair label: `+1` (same class) when `s >= 0`.
pub fn predict(score: f64) -> i8 {
    if score >= 0.0 {
        1
    } else {
        -1
    }
}

/// Rescales `w` to Euclidean norm `tau`.
pub fn fixed_norm_project(w: &mut Tensor, tau: f64) -> Result<()> {
    let norm = w.norm_sq().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::invalid(
            "cannot project a zero (or non-finite) weight vector; reinitialise it",
        ));
    }
    w.scale(tau / norm);
    Ok(())
}

/// `Σ w_i (x_i − y_i)²`.
///
/// Negative weights are an error when `strict`; otherwise `|w_i|` is used and a
/// warning is logged.
pub fn diag_mahalanobis_distance(x: &[f64], y: &[f64], w: &[f64], strict: bool) -> Result<f64> {
    if x.len() != y.len() || x.len() != w.len() {
        return Err(Error::shape(
            "diag_mahalanobis_distance",
            format!("lengths {}, {}, {}", x.len(), y.len(), w.len()),
        ));
    }
    if w.iter().any(|&v| v < 0.0) {
        if strict {
            return Err(Error::invalid("diagonal Mahalanobis weights must be nonnegative"));
        }
        log::warn!("negative diagonal Mahalanobis weights; using absolute values");
    }
    Ok(x.iter()
        .zip(y)
        .zip(w)
        .map(|((a, b), wi)| wi.abs() * (a - b) * (a - b))
        .sum())
}

/// Full Mahalanobis metric `M = LᵀL` with a learnable decision threshold on `d²`.
#[derive(Debug, Clone, PartialEq)]
pub struct MahalanobisParams {
    pub l: ParamSlot,
    pub threshold: ParamSlot,
}

impl MahalanobisParams {
    pub fn new(dim: usize, threshold: f64) -> Self {
        Self {
            l: ParamSlot::new(Tensor::identity(dim)),
            threshold: ParamSlot::new(Tensor::scalar(threshold)),
        }
    }

    pub fn dim(&self) -> usize {
        self.l.shape()[0]
    }

    fn l_times(&self, delta: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let l = self.l.value.data();
        (0..n)
            .map(|i| l[i * n..(i + 1) * n].iter().zip(delta).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `‖L(x − y)‖²`.
    pub fn distance(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != self.dim() || y.len() != self.dim() {
            return Err(Error::shape(
                "full_mahalanobis_distance",
                format!("vectors of length {} and {} for a {}-dim metric", x.len(), y.len(), self.dim()),
            ));
        }
        let delta: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        Ok(self.l_times(&delta).iter().map(|v| v * v).sum())
    }

    /// `d²` for each row pair plus, per pair, `L·Δ` for the backward pass.
    fn pair_distances(&self, phi: &Tensor, pairs: &PairBatch) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut d2 = Vec::with_capacity(pairs.len());
        let mut deltas = Vec::with_capacity(pairs.len());
        let mut lds = Vec::with_capacity(pairs.len());
        for k in 0..pairs.len() {
            let delta: Vec<f64> = phi
                .row(pairs.q[k])
                .iter()
                .zip(phi.row(pairs.g[k]))
                .map(|(a, b)| a - b)
                .collect();
            let ld = self.l_times(&delta);
            d2.push(ld.iter().map(|v| v * v).sum());
            deltas.push(delta);
            lds.push(ld);
        }
        (d2, deltas, lds)
    }

    /// Mean of `max{0, 1 − y·(θ − d²)}` over the pairs. Accumulates
    /// `scale`-weighted gradients into `L` and `θ`; returns the loss and the
    /// gradient with respect to `phi`.
    pub fn pair_loss(&mut self, phi: &Tensor, pairs: &PairBatch, scale: f64) -> Result<(f64, Tensor)> {
        let (_, n) = phi.expect_matrix("mahalanobis_pair_loss")?;
        if n != self.dim() {
            return Err(Error::shape(
                "mahalanobis_pair_loss",
                format!("embeddings have {n} entries, metric has {}", self.dim()),
            ));
        }
        check_labels(&pairs.y, pairs.len())?;
        if pairs.is_empty() {
            return Err(Error::invalid("empty pair batch"));
        }
        let theta = self.threshold.value.data()[0];
        let (d2, deltas, lds) = self.pair_distances(phi, pairs);
        let inv_n = 1.0 / pairs.len() as f64;
        let mut loss = 0.0;
        let mut grad_phi = Tensor::zeros(phi.shape());
        let l = self.l.value.clone();
        for k in 0..pairs.len() {
            let y = f64::from(pairs.y[k]);
            let slack = 1.0 - y * (theta - d2[k]);
            if slack <= 0.0 {
                continue;
            }
            loss += slack * inv_n;
            // ∂slack/∂θ = −y, ∂slack/∂d² = y
            self.threshold.grad.data_mut()[0] -= scale * y * inv_n;
            let gd = scale * y * inv_n;
            // ∂d²/∂L = 2 (LΔ) Δᵀ ; ∂d²/∂Δ = 2 Lᵀ(LΔ)
            let gl = self.l.grad.data_mut();
            for i in 0..n {
                for j in 0..n {
                    gl[i * n + j] += gd * 2.0 * lds[k][i] * deltas[k][j];
                }
            }
            for j in 0..n {
                let mut gdelta = 0.0;
                for i in 0..n {
                    gdelta += l.data()[i * n + j] * lds[k][i];
                }
                gdelta *= 2.0 * gd;
                grad_phi.row_mut(pairs.q[k])[j] += gdelta;
                grad_phi.row_mut(pairs.g[k])[j] -= gdelta;
            }
        }
        Ok((loss, grad_phi))
    }

    /// Smallest `|1 − y·(θ − d²)|` over the pairs.
    pub fn margin_gap(&self, phi: &Tensor, pairs: &PairBatch) -> f64 {
        let theta = self.threshold.value.data()[0];
        let (d2, _, _) = self.pair_distances(phi, pairs);
        d2.iter()
            .zip(&pairs.y)
            .map(|(d, &y)| (1.0 - f64::from(y) * (theta - d)).abs())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn params_mut(&mut self) -> [&mut ParamSlot; 2] {
        [&mut self.l, &mut self.threshold]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng_vec(rng: &mut SeededRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.normal()).collect()
    }

    fn plain(dim: usize) -> Dichotomizer {
        Dichotomizer::new(dim, 1.0, NormRegime::SoftL2, &mut SeededRng::new(0)).unwrap()
    }

    #[test]
    fn score_closed_forms() {
        let mut d = plain(2);
        d.weight.value.fill(0.0);
        d.bias.value = Tensor::scalar(1.0);
        let u = Tensor::from_rows(&[vec![3.0, 7.0]]).unwrap();
        assert_eq!(d.scores(&u).unwrap(), vec![1.0]);
        assert_eq!(predict(1.0), 1);
        assert_eq!(predict(0.0), 1);

        d.weight.value = Tensor::vector(vec![-1.0, -1.0]);
        let origin = Tensor::zeros(&[1, 2]);
        assert_eq!(d.scores(&origin).unwrap(), vec![1.0]);
        assert!(d.scores(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn score_matches_dot_product_oracle() {
        let mut rng = SeededRng::new(21);
        let mut d = plain(5);
        d.weight.value = Tensor::vector(rng_vec(&mut rng, 5));
        d.bias.value = Tensor::scalar(rng.normal());
        let u = Tensor::new(vec![7, 5], rng_vec(&mut rng, 35)).unwrap();
        let s = d.scores(&u).unwrap();
        for (i, si) in s.iter().enumerate() {
            let mut want = d.bias.value.data()[0];
            for j in 0..5 {
                want += d.weight.value.data()[j] * u.at(i, j);
            }
            assert!((si - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn hinge_closed_forms() {
        let mut rng = SeededRng::new(0);
        let mut d = plain(4);
        d.weight.value.fill(0.0);
        let u = Tensor::new(vec![3, 4], rng_vec(&mut rng, 12)).unwrap();
        let (l, _) = d.hinge_loss(&u, &[1, -1, 1], Mode::Train, &mut rng, 1.0).unwrap();
        assert_eq!(l, 3.0);

        // all margins satisfied: loss is the norm term alone
        d.weight.value = Tensor::vector(vec![-1.0, -1.0, 0.0, 0.0]);
        d.bias.value = Tensor::scalar(2.0);
        let u = Tensor::from_rows(&[vec![0.5, 0.5, 9.0, 9.0], vec![3.0, 1.0, 0.0, 0.0]]).unwrap();
        let (l, _) = d.hinge_loss(&u, &[1, -1], Mode::Train, &mut rng, 1.0).unwrap();
        assert_eq!(l, 0.5 * 2.0);

        assert!(d.hinge_loss(&u, &[1, 0], Mode::Train, &mut rng, 1.0).is_err());
    }

    #[test]
    fn fixed_norm_projection() {
        let mut w = Tensor::vector(vec![3.0, 4.0]);
        fixed_norm_project(&mut w, 1.0).unwrap();
        assert!((w.data()[0] - 0.6).abs() < 1e-15 && (w.data()[1] - 0.8).abs() < 1e-15);
        let before = w.clone();
        fixed_norm_project(&mut w, 1.0).unwrap();
        for (a, b) in w.data().iter().zip(before.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(fixed_norm_project(&mut Tensor::zeros(&[3]), 1.0).is_err());

        let mut rng = SeededRng::new(4);
        for _ in 0..1000 {
            let mut w = Tensor::vector(rng_vec(&mut rng, 8));
            let tau = rng.uniform(0.1, 10.0);
            fixed_norm_project(&mut w, tau).unwrap();
            assert!((w.norm_sq().sqrt() - tau).abs() < 1e-12);
        }
    }

    #[test]
    fn diag_distance_cases() {
        let x = [1.0, 2.0, -1.0];
        let y = [0.0, 4.0, 1.0];
        assert_eq!(diag_mahalanobis_distance(&x, &y, &[1.0; 3], true).unwrap(), 9.0);
        assert_eq!(diag_mahalanobis_distance(&x, &x, &[2.0, 3.0, 4.0], true).unwrap(), 0.0);
        assert!(diag_mahalanobis_distance(&x, &y, &[1.0, -1.0, 1.0], true).is_err());
        assert_eq!(diag_mahalanobis_distance(&x, &y, &[1.0, -1.0, 1.0], false).unwrap(), 9.0);
    }

    #[test]
    fn full_distance_cases() {
        let m = MahalanobisParams::new(3, 1.0);
        let (x, y) = ([1.0, 2.0, 3.0], [0.0, 0.0, 1.0]);
        assert_eq!(m.distance(&x, &y).unwrap(), 9.0);
        let mut rng = SeededRng::new(1);
        let mut m = MahalanobisParams::new(3, 1.0);
        m.l.value = Tensor::new(vec![3, 3], rng_vec(&mut rng, 9)).unwrap();
        assert_eq!(m.distance(&x, &x).unwrap(), 0.0);
        assert!(m.distance(&x, &[1.0]).is_err());
    }

    #[test]
    fn full_distance_two_paths() {
        let mut rng = SeededRng::new(17);
        for _ in 0..50 {
            let n = 6;
            let mut m = MahalanobisParams::new(n, 1.0);
            m.l.value = Tensor::new(vec![n, n], rng_vec(&mut rng, n * n)).unwrap();
            let x = rng_vec(&mut rng, n);
            let y = rng_vec(&mut rng, n);
            let d = m.distance(&x, &y).unwrap();
            // (x−y)ᵀ (LᵀL) (x−y)
            let l = m.l.value.data();
            let mut mm = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    mm[i * n + j] = (0..n).map(|k| l[k * n + i] * l[k * n + j]).sum();
                }
            }
            let delta: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            let mut q = 0.0;
            for i in 0..n {
                for j in 0..n {
                    q += delta[i] * mm[i * n + j] * delta[j];
                }
            }
            assert!((d - q).abs() <= 1e-10 * q.abs().max(1.0));
        }
    }

    #[test]
    fn mahalanobis_pair_loss_closed_forms() {
        let phi = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let pairs = PairBatch {
            q: vec![0, 0],
            g: vec![1, 2],
            y: vec![1, -1],
        };
        // θ equal to both distances is impossible here; use L scaling instead
        let mut m = MahalanobisParams::new(2, 1.0);
        m.l.value = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0 / 3.0]]).unwrap();
        let (l, _) = m.pair_loss(&phi, &pairs, 1.0).unwrap();
        assert_eq!(l, 1.0);

        let mut m = MahalanobisParams::new(2, 4.5);
        // positives d²=1 ≤ θ−1, negatives d²=9 ≥ θ+1
        let (l, g) = m.pair_loss(&phi, &pairs, 1.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}
