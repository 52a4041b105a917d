//! Central-difference checks of every hand-written backward pass.
//!
//! Each op is exercised on `trials` random draws. Draws that land within
//! [`KINK_MIN_GAP`] of a non-differentiable point (ReLU at 0, hinge at the
//! margin, `|·|` at 0, ties in hardest-example selection) are redrawn.

use serde::Serialize;

use crate::config::{TrainConfig, TrainMode};
use crate::dichotomizer::{Dichotomizer, MahalanobisParams, NormRegime};
use crate::error::{Error, Result};
use crate::ops::{
    apply_mask, dropout, finite_diff_gradcheck, linear, linear_backward, relu, relu_backward,
    softmax_cross_entropy, BatchNorm1d, Mode,
};
use crate::pairspace::{dichotomy_backward, dichotomy_transform, enumerate_all_pairs, sample_balanced_pairs};
use crate::tensor::{SeededRng, Tensor};
use crate::trainer::{triplet_loss_batch_hard, DropoutSource, Model};

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const KINK_MIN_GAP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
pub const BATCHNORM_TOLERANCE: f64 = 1e-3;
pub const ZERO_GRAD_BOUND: f64 = 1e-9;

const MAX_REDRAWS: usize = 200;

#[derive(Debug, Clone, Serialize)]
pub struct OpReport {
    pub op: &'static str,
    pub trials: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

type Trial = fn(&mut SeededRng) -> Result<Option<f64>>;

pub const OPS: [(&str, Trial, f64); 10] = [
    ("linear", check_linear, TOLERANCE),
    ("relu", check_relu, TOLERANCE),
    ("softmax_cross_entropy", check_ce, TOLERANCE),
    ("batchnorm1d", check_batchnorm, BATCHNORM_TOLERANCE),
    ("dropout_fixed_mask", check_dropout, TOLERANCE),
    ("dichotomy_transform", check_dichotomy, TOLERANCE),
    ("hinge_loss", check_hinge, TOLERANCE),
    ("triplet_batch_hard", check_triplet, TOLERANCE),
    ("mahalanobis_pair_loss", check_mahalanobis, TOLERANCE),
    ("l_total", check_pipeline, TOLERANCE),
];

/// Runs every op for `trials` kink-free draws.
pub fn run_suite(seed: u64, trials: usize) -> Result<Vec<OpReport>> {
    OPS.iter()
        .enumerate()
        .map(|(i, &(op, f, tol))| {
            let mut rng = SeededRng::with_stream(seed, 100 + i as u64);
            let worst = run_trials(f, trials, &mut rng)
                .map_err(|e| Error::NonFinite(format!("{op}: {e}")))?;
            Ok(OpReport {
                op,
                trials,
                max_rel_err: worst,
                tolerance: tol,
                passed: worst < tol,
            })
        })
        .collect()
}

pub fn run_trials(f: Trial, trials: usize, rng: &mut SeededRng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut attempts = 0;
    while done < trials {
        attempts += 1;
        if attempts > trials * MAX_REDRAWS {
            return Err(Error::Sampling(format!(
                "only {done} of {trials} kink-free draws after {attempts} attempts"
            )));
        }
        if let Some(err) = f(rng)? {
            worst = worst.max(err);
            done += 1;
        }
    }
    Ok(worst)
}

fn randn(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.normal());
    t
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn concat(parts: &[&Tensor]) -> Vec<f64> {
    parts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Splits a flat vector back into tensors shaped like `like`.
fn split(flat: &[f64], like: &[&Tensor]) -> Vec<Tensor> {
    let mut at = 0;
    like.iter()
        .map(|t| {
            let n = t.len();
            let out = Tensor::new(t.shape().to_vec(), flat[at..at + n].to_vec()).expect("shape");
            at += n;
            out
        })
        .collect()
}

/// Coordinates whose analytic gradient is (numerically) zero, `|a| <
/// ZERO_GRAD_BOUND / 10`, are not scored by relative error: round-off in an
/// `O(1)` objective alone gives `~1e-11` central differences there, a
/// relative error near `1e-3` under the `1e-8` floor. Their central
/// difference must instead stay below [`ZERO_GRAD_BOUND`] in absolute value.
/// The returned error is the relative error over the remaining coordinates,
/// or infinity if a zero coordinate fails its bound.
pub fn gradcheck(params: &[f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Result<f64> {
    let (zero, nonzero): (Vec<usize>, Vec<usize>) = (0..analytic.len()).partition(|&i| analytic[i].abs() < ZERO_GRAD_BOUND / 10.0);
    if !zero.is_empty() {
        let zeros = vec![0.0; analytic.len()];
        // Against a zero analytic value the relative error is |n| / max(1e-8, |n|).
        let worst = finite_diff_gradcheck(params, &zeros, GRADCHECK_EPS, Some(&zero), &mut f)?;
        if worst * 1e-8 >= ZERO_GRAD_BOUND {
            return Ok(f64::INFINITY);
        }
    }
    finite_diff_gradcheck(params, analytic, GRADCHECK_EPS, Some(&nonzero), &mut f)
}

fn check_linear(rng: &mut SeededRng) -> Result<Option<f64>> {
    let (x, w, b, r) = (randn(&[4, 3], rng), randn(&[5, 3], rng), randn(&[5], rng), randn(&[4, 5], rng));
    let g = linear_backward(&x, &w, &r)?;
    let like = [&x, &w, &b];
    let err = gradcheck(&concat(&like), &concat(&[&g.dx, &g.dw, &g.db]), |p| {
        let t = split(p, &like);
        dot(&linear(&t[0], &t[1], Some(&t[2])).expect("linear"), &r)
    })?;
    Ok(Some(err))
}

fn check_relu(rng: &mut SeededRng) -> Result<Option<f64>> {
    let (x, r) = (randn(&[5, 4], rng), randn(&[5, 4], rng));
    if x.data().iter().any(|v| v.abs() <= KINK_MIN_GAP) {
        return Ok(None);
    }
    let g = relu_backward(&x, &r);
    let err = gradcheck(x.data(), g.data(), |p| {
        dot(&relu(&Tensor::new(x.shape().to_vec(), p.to_vec()).expect("shape")), &r)
    })?;
    Ok(Some(err))
}

fn check_ce(rng: &mut SeededRng) -> Result<Option<f64>> {
    let logits = randn(&[6, 4], rng);
    let labels: Vec<usize> = (0..6).map(|_| rng.below(4)).collect();
    let (_, g) = softmax_cross_entropy(&logits, &labels)?;
    let err = gradcheck(logits.data(), g.data(), |p| {
        let t = Tensor::new(logits.shape().to_vec(), p.to_vec()).expect("shape");
        softmax_cross_entropy(&t, &labels).expect("ce").0
    })?;
    Ok(Some(err))
}

fn check_batchnorm(rng: &mut SeededRng) -> Result<Option<f64>> {
    let (x, r) = (randn(&[6, 4], rng), randn(&[6, 4], rng));
    let mut bn = BatchNorm1d::new(4);
    bn.gamma.value = randn(&[4], rng);
    bn.beta.value = randn(&[4], rng);
    let base = bn.clone();
    let (_, cache) = bn.forward(&x, Mode::Train)?;
    let dx = bn.backward(&cache, &r);
    let like = [&x, &base.gamma.value, &base.beta.value];
    let analytic = concat(&[&dx, &bn.gamma.grad, &bn.beta.grad]);
    let err = gradcheck(&concat(&like), &analytic, |p| {
        let t = split(p, &like);
        let mut layer = base.clone();
        layer.gamma.value = t[1].clone();
        layer.beta.value = t[2].clone();
        dot(&layer.forward(&t[0], Mode::Train).expect("bn").0, &r)
    })?;
    Ok(Some(err))
}

fn check_dropout(rng: &mut SeededRng) -> Result<Option<f64>> {
    let (x, r) = (randn(&[5, 6], rng), randn(&[5, 6], rng));
    let (_, mask) = dropout(&x, 0.4, Mode::Train, rng)?;
    let g = apply_mask(&r, &mask);
    let err = gradcheck(x.data(), g.data(), |p| {
        let t = Tensor::new(x.shape().to_vec(), p.to_vec()).expect("shape");
        dot(&apply_mask(&t, &mask), &r)
    })?;
    Ok(Some(err))
}

fn check_dichotomy(rng: &mut SeededRng) -> Result<Option<f64>> {
    let (q, g, r) = (randn(&[5, 4], rng), randn(&[5, 4], rng), randn(&[5, 4], rng));
    if q.data().iter().zip(g.data()).any(|(a, b)| (a - b).abs() <= KINK_MIN_GAP) {
        return Ok(None);
    }
    let (dq, dg) = dichotomy_backward(&q, &g, &r);
    let like = [&q, &g];
    let err = gradcheck(&concat(&like), &concat(&[&dq, &dg]), |p| {
        let t = split(p, &like);
        dot(&dichotomy_transform(&t[0], &t[1]).expect("dichotomy"), &r)
    })?;
    Ok(Some(err))
}

fn check_hinge(rng: &mut SeededRng) -> Result<Option<f64>> {
    let n = 4;
    let regime = if rng.below(2) == 0 {
        NormRegime::SoftL2
    } else {
        NormRegime::FixedNorm(1.5)
    };
    let mut d = Dichotomizer::new(n, 0.5 + rng.unit(), regime, rng)?;
    d.weight.value = randn(&[n], rng);
    d.bias.value = randn(&[1], rng);
    let mut u = randn(&[8, n], rng);
    u.data_mut().iter_mut().for_each(|v| *v = v.abs());
    let y: Vec<i8> = (0..8).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
    if d.margin_gap(&u, &y)? <= KINK_MIN_GAP {
        return Ok(None);
    }
    let base = d.clone();
    let (_, gu) = d.hinge_loss(&u, &y, Mode::Train, rng, 1.0)?;
    let like = [&base.weight.value, &base.bias.value, &u];
    let analytic = concat(&[&d.weight.grad, &d.bias.grad, &gu]);
    let mut scratch = SeededRng::new(0);
    let err = gradcheck(&concat(&like), &analytic, |p| {
        let t = split(p, &like);
        let mut c = base.clone();
        c.weight.value = t[0].clone();
        c.bias.value = t[1].clone();
        c.hinge_loss(&t[2], &y, Mode::Train, &mut scratch, 1.0).expect("hinge").0
    })?;
    Ok(Some(err))
}

fn check_triplet(rng: &mut SeededRng) -> Result<Option<f64>> {
    let feat = randn(&[8, 3], rng);
    let labels = [0, 0, 1, 1, 2, 2, 3, 3];
    let margin = 0.5 + rng.unit();
    let out = triplet_loss_batch_hard(&feat, &labels, margin)?;
    if out.kink_gap <= KINK_MIN_GAP {
        return Ok(None);
    }
    let err = gradcheck(feat.data(), out.grad.data(), |p| {
        let t = Tensor::new(feat.shape().to_vec(), p.to_vec()).expect("shape");
        triplet_loss_batch_hard(&t, &labels, margin).expect("triplet").loss
    })?;
    Ok(Some(err))
}

fn check_mahalanobis(rng: &mut SeededRng) -> Result<Option<f64>> {
    let n = 3;
    let phi = randn(&[6, n], rng);
    let pairs = enumerate_all_pairs(&[0, 0, 1, 1, 2, 2]);
    let mut m = MahalanobisParams::new(n, 1.0 + rng.unit() * 3.0);
    for (v, e) in m.l.value.data_mut().iter_mut().zip(randn(&[n, n], rng).data()) {
        *v += 0.3 * e;
    }
    if m.margin_gap(&phi, &pairs) <= KINK_MIN_GAP {
        return Ok(None);
    }
    let base = m.clone();
    let (_, gphi) = m.pair_loss(&phi, &pairs, 1.0)?;
    let like = [&base.l.value, &base.threshold.value, &phi];
    let analytic = concat(&[&m.l.grad, &m.threshold.grad, &gphi]);
    let err = gradcheck(&concat(&like), &analytic, |p| {
        let t = split(p, &like);
        let mut c = base.clone();
        c.l.value = t[0].clone();
        c.threshold.value = t[1].clone();
        c.pair_loss(&t[2], &pairs, 1.0).expect("mahalanobis").0
    })?;
    Ok(Some(err))
}

/// Parameters of `mode`, flattened in [`Model::trainable_mut`] order.
fn flat_values(model: &mut Model, mode: TrainMode) -> Vec<f64> {
    model
        .trainable_mut(mode)
        .iter()
        .flat_map(|p| p.value.data().to_vec())
        .collect()
}

fn flat_grads(model: &mut Model, mode: TrainMode) -> Vec<f64> {
    model
        .trainable_mut(mode)
        .iter()
        .flat_map(|p| p.grad.data().to_vec())
        .collect()
}

fn assign(model: &mut Model, mode: TrainMode, flat: &[f64]) {
    let mut at = 0;
    for p in model.trainable_mut(mode) {
        let n = p.value.len();
        p.value.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
    }
}

/// The whole weighted objective through backbone, adapter, dichotomy
/// transform and classifier with a fixed dropout mask; draws
/// alternate between the hinge and the Mahalanobis pair term.
fn check_pipeline(rng: &mut SeededRng) -> Result<Option<f64>> {
    let mode = if rng.below(2) == 0 {
        TrainMode::End2end
    } else {
        TrainMode::MahalanobisBaseline
    };
    let cfg = TrainConfig {
        mode,
        hidden_dims: vec![6],
        d_embed: 5,
        d_adapt: 4,
        classifier_dropout: 0.3,
        lambda_ce: 0.5 + rng.unit(),
        lambda_tri: 0.5 + rng.unit(),
        lambda_hinge: 0.5 + rng.unit(),
        triplet_margin: 0.5,
        aux_on_embedding: rng.below(2) == 1,
        ..Default::default()
    };
    let labels = [0, 0, 0, 1, 1, 1, 2, 2, 2];
    let x = randn(&[9, 4], rng);
    let mut model = Model::new(&cfg, 4, 3, rng)?;
    if let Some(m) = &mut model.mahalanobis {
        m.threshold.value.data_mut()[0] = 0.5 + rng.unit();
    }
    let pairs = sample_balanced_pairs(&labels, 8, rng)?;
    let (_, mask) = dropout(&Tensor::filled(&[8, cfg.d_adapt], 1.0), cfg.classifier_dropout, Mode::Train, rng)?;

    model.zero_grad();
    let report = model.forward_backward(&cfg, &x, &labels, &pairs, DropoutSource::Mask(&mask))?;
    if report.kink_gap <= KINK_MIN_GAP {
        return Ok(None);
    }
    let analytic = flat_grads(&mut model, mode);
    let params = flat_values(&mut model, mode);
    let base = model.clone();
    let err = gradcheck(&params, &analytic, |p| {
        let mut m = base.clone();
        assign(&mut m, mode, p);
        m.forward_backward(&cfg, &x, &labels, &pairs, DropoutSource::Mask(&mask))
            .expect("forward")
            .losses
            .l_total
    })?;
    Ok(Some(err))
}
