//! Layers and losses with hand-derived backward passes, the momentum SGD
//! update and a central-difference gradient checker.
//!
//! Forward functions return whatever the matching backward needs as an
//! explicit cache value; nothing is recorded implicitly.

use crate::error::{Error, Result};
use crate::tensor::{ParamSlot, SeededRng, Tensor};

/// Train/eval switch for layers whose behaviour differs between the two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `out[i,j] = Σ_k W[j,k]·x[i,k] + b[j]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (batch, d_in) = x.expect_matrix("linear")?;
    let (d_out, w_in) = w.expect_matrix("linear")?;
    if w_in != d_in {
        return Err(Error::shape(
            "linear",
            format!("input has {d_in} features but weight is {d_out}x{w_in}"),
        ));
    }
    if let Some(b) = b {
        if b.len() != d_out {
            return Err(Error::shape(
                "linear",
                format!("bias has {} entries, expected {d_out}", b.len()),
            ));
        }
    }
    let mut out = Tensor::zeros(&[batch, d_out]);
    let wd = w.data();
    for i in 0..batch {
        let xr = x.row(i);
        let orow = out.row_mut(i);
        for (j, o) in orow.iter_mut().enumerate() {
            let wr = &wd[j * d_in..(j + 1) * d_in];
            let mut acc: f64 = wr.iter().zip(xr).map(|(a, b)| a * b).sum();
            if let Some(b) = b {
                acc += b.data()[j];
            }
            *o = acc;
        }
    }
    Ok(out)
}

/// Gradients of [`linear`].
pub struct LinearGrads {
    pub dx: Tensor,
    pub dw: Tensor,
    pub db: Tensor,
}

pub fn linear_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<LinearGrads> {
    let (batch, d_in) = x.expect_matrix("linear_backward")?;
    let (d_out, _) = w.expect_matrix("linear_backward")?;
    if grad_out.shape() != [batch, d_out] {
        return Err(Error::shape(
            "linear_backward",
            format!(
                "upstream gradient has shape {:?}, expected [{batch}, {d_out}]",
                grad_out.shape()
            ),
        ));
    }
    let mut dx = Tensor::zeros(&[batch, d_in]);
    let mut dw = Tensor::zeros(&[d_out, d_in]);
    let mut db = Tensor::zeros(&[d_out]);
    let wd = w.data();
    for i in 0..batch {
        let xr = x.row(i);
        let gr = grad_out.row(i);
        for (j, &g) in gr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            db.data_mut()[j] += g;
            let dwr = &mut dw.data_mut()[j * d_in..(j + 1) * d_in];
            for (a, &xv) in dwr.iter_mut().zip(xr) {
                *a += g * xv;
            }
            let wr = &wd[j * d_in..(j + 1) * d_in];
            for (a, &wv) in dx.row_mut(i).iter_mut().zip(wr) {
                *a += g * wv;
            }
        }
    }
    Ok(LinearGrads { dx, dw, db })
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Gates `grad_out` by `x > 0`, where `x` is the ReLU input.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

/// Mean softmax cross-entropy; returns the loss and `∂L/∂logits`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (batch, k) = logits.expect_matrix("softmax_cross_entropy")?;
    if labels.len() != batch {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} labels for {batch} rows", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut grad = Tensor::zeros(&[batch, k]);
    let mut loss = 0.0;
    let inv_b = 1.0 / batch as f64;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[label];
        let g = grad.row_mut(i);
        for (gv, &lv) in g.iter_mut().zip(row) {
            *gv = (lv - log_z).exp() * inv_b;
        }
        g[label] -= inv_b;
    }
    Ok((loss * inv_b, grad))
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// 1-D batch normalisation over the feature axis of a `B×d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm1d {
    pub gamma: ParamSlot,
    pub beta: ParamSlot,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

/// Values cached by [`BatchNorm1d::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
    mode: Mode,
}

impl BatchNorm1d {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: ParamSlot::new(Tensor::filled(&[dim], 1.0)),
            beta: ParamSlot::zeros(&[dim]),
            running_mean: Tensor::zeros(&[dim]),
            running_var: Tensor::filled(&[dim], 1.0),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.value.len()
    }

    /// Normalises `x`. In train mode batch statistics are used and the
    /// running estimates are updated; eval mode uses the running estimates.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, BatchNormCache)> {
        let (batch, d) = x.expect_matrix("batchnorm1d")?;
        if d != self.dim() {
            return Err(Error::shape(
                "batchnorm1d",
                format!("input has {d} features, layer has {}", self.dim()),
            ));
        }
        let (mean, var) = match mode {
            Mode::Train => {
                if batch < 2 {
                    return Err(Error::invalid(format!(
                        "batchnorm1d needs at least 2 rows in train mode, got {batch}"
                    )));
                }
                let (mean, var) = column_moments(x);
                for j in 0..d {
                    let rm = &mut self.running_mean.data_mut()[j];
                    *rm = BN_MOMENTUM * *rm + (1.0 - BN_MOMENTUM) * mean[j];
                    let rv = &mut self.running_var.data_mut()[j];
                    *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * var[j];
                }
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut x_hat = x.clone();
        let mut out = x.clone();
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        for i in 0..batch {
            let xh = x_hat.row_mut(i);
            for j in 0..d {
                xh[j] = (xh[j] - mean[j]) * inv_std[j];
            }
            let o = out.row_mut(i);
            for j in 0..d {
                o[j] = g[j] * xh[j] + b[j];
            }
        }
        Ok((
            out,
            BatchNormCache {
                x_hat,
                inv_std,
                mode,
            },
        ))
    }

    /// Eval-mode forward that leaves the layer untouched.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let (_, d) = x.expect_matrix("batchnorm1d")?;
        if d != self.dim() {
            return Err(Error::shape(
                "batchnorm1d",
                format!("input has {d} features, layer has {}", self.dim()),
            ));
        }
        let mut out = x.clone();
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        let (m, v) = (self.running_mean.data(), self.running_var.data());
        for i in 0..out.rows() {
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = g[j] * (*o - m[j]) / (v[j] + BN_EPS).sqrt() + b[j];
            }
        }
        Ok(out)
    }

    /// Accumulates `∂L/∂γ`, `∂L/∂β` and returns `∂L/∂x`.
    pub fn backward(&mut self, cache: &BatchNormCache, grad_out: &Tensor) -> Tensor {
        let batch = grad_out.rows();
        let d = self.dim();
        let gamma = self.gamma.value.data().to_vec();
        let mut sum_dxh = vec![0.0; d];
        let mut sum_dxh_xh = vec![0.0; d];
        for i in 0..batch {
            let go = grad_out.row(i);
            let xh = cache.x_hat.row(i);
            for j in 0..d {
                self.gamma.grad.data_mut()[j] += go[j] * xh[j];
                self.beta.grad.data_mut()[j] += go[j];
                let dxh = go[j] * gamma[j];
                sum_dxh[j] += dxh;
                sum_dxh_xh[j] += dxh * xh[j];
            }
        }
        let mut dx = Tensor::zeros(&[batch, d]);
        let nb = batch as f64;
        for i in 0..batch {
            let go = grad_out.row(i);
            let xh = cache.x_hat.row(i);
            let r = dx.row_mut(i);
            for j in 0..d {
                let dxh = go[j] * gamma[j];
                r[j] = match cache.mode {
                    Mode::Train => {
                        cache.inv_std[j] * (dxh - sum_dxh[j] / nb - xh[j] * sum_dxh_xh[j] / nb)
                    }
                    Mode::Eval => cache.inv_std[j] * dxh,
                };
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> [&mut ParamSlot; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}

fn column_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (batch, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for i in 0..batch {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= batch as f64);
    let mut var = vec![0.0; d];
    for i in 0..batch {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= batch as f64);
    (mean, var)
}

/// Inverted dropout. Returns the output and the multiplicative mask
/// (entries are `0` or `1/(1-p)`), which is also the backward operator.
pub fn dropout(x: &Tensor, p: f64, mode: Mode, rng: &mut SeededRng) -> Result<(Tensor, Tensor)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok((x.clone(), Tensor::filled(x.shape(), 1.0)));
    }
    let keep = 1.0 / (1.0 - p);
    let mut mask = Tensor::zeros(x.shape());
    for m in mask.data_mut() {
        if rng.unit() >= p {
            *m = keep;
        }
    }
    Ok((apply_mask(x, &mask), mask))
}

/// Elementwise product; used both for applying a dropout mask and for its backward.
pub fn apply_mask(x: &Tensor, mask: &Tensor) -> Tensor {
    let mut out = x.clone();
    for (o, m) in out.data_mut().iter_mut().zip(mask.data()) {
        *o *= m;
    }
    out
}

/// `buf ← momentum·buf + grad + weight_decay·value; value ← value − lr·buf`.
pub fn sgd_momentum_step<'a>(
    params: impl IntoIterator<Item = &'a mut ParamSlot>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for p in params {
        let ParamSlot {
            value,
            grad,
            momentum: buf,
        } = p;
        for ((v, g), b) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(buf.data_mut().iter_mut())
        {
            *b = momentum * *b + g + weight_decay * *v;
            *v -= lr * *b;
        }
    }
}

/// Compares `analytic` against central differences of `f` at `params` over
/// the listed coordinates (all coordinates when `coords` is `None`).
///
/// Returns the largest `|a − n| / max(1e-8, |a| + |n|)`.
pub fn finite_diff_gradcheck<F>(
    params: &[f64],
    analytic: &[f64],
    eps: f64,
    coords: Option<&[usize]>,
    mut f: F,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(Error::shape(
            "finite_diff_gradcheck",
            format!(
                "{} parameters but {} gradient entries",
                params.len(),
                analytic.len()
            ),
        ));
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        let orig = work[i];
        work[i] = orig + eps;
        let fp = f(&work);
        work[i] = orig - eps;
        let fm = f(&work);
        work[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective not finite when perturbing coordinate {i}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}
