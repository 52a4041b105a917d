//! Feature extractor, adapter layer and the identity-classification head.

use crate::error::{Error, Result};
use crate::ops::{linear, linear_backward, relu, relu_backward, softmax_cross_entropy};
use crate::tensor::{ParamSlot, SeededRng, Tensor};

/// One fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: ParamSlot,
    pub bias: ParamSlot,
}

impl Dense {
    pub fn new(d_in: usize, d_out: usize, rng: &mut SeededRng) -> Self {
        Self {
            weight: ParamSlot::glorot(d_out, d_in, rng),
            bias: ParamSlot::zeros(&[d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Feed-forward network `ψ = f(x)`: linear layers with ReLU in between and
/// no activation after the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub layers: Vec<Dense>,
}

/// Per-layer inputs and pre-activations from a forward pass.
#[derive(Debug, Clone)]
pub struct BackboneCache {
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
}

impl BackboneCache {
    /// Pre-activations that feed a ReLU (every layer but the last).
    pub fn relu_inputs(&self) -> &[Tensor] {
        &self.pre[..self.pre.len().saturating_sub(1)]
    }
}

impl Backbone {
    /// `dims = [d_input, hidden..., d_embed]`.
    pub fn new(dims: &[usize], rng: &mut SeededRng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid("backbone needs at least one layer"));
        }
        if *dims.last().unwrap() < 2 {
            return Err(Error::invalid("embedding dimension must be at least 2"));
        }
        if dims.contains(&0) {
            return Err(Error::invalid("layer dimensions must be positive"));
        }
        let layers = dims
            .windows(2)
            .map(|w| Dense::new(w[0], w[1], rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn d_input(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_embed(&self) -> usize {
        self.layers.last().unwrap().d_out()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.d_input()];
        d.extend(self.layers.iter().map(Dense::d_out));
        d
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.0)
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, BackboneCache)> {
        let (_, d) = x.expect_matrix("embed")?;
        if d != self.d_input() {
            return Err(Error::shape(
                "embed",
                format!("input has {d} features, backbone expects {}", self.d_input()),
            ));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = linear(&h, &layer.weight.value, Some(&layer.bias.value))?;
            inputs.push(h);
            h = if i < last { relu(&z) } else { z.clone() };
            pre.push(z);
        }
        Ok((h, BackboneCache { inputs, pre }))
    }

    /// Accumulates parameter gradients from `∂L/∂ψ`.
    pub fn backward(&mut self, cache: &BackboneCache, grad_psi: &Tensor) -> Result<()> {
        let mut g = grad_psi.clone();
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            if i < last {
                g = relu_backward(&cache.pre[i], &g);
            }
            let layer = &mut self.layers[i];
            let grads = linear_backward(&cache.inputs[i], &layer.weight.value, &g)?;
            layer.weight.grad.axpy(1.0, &grads.dw);
            layer.bias.grad.axpy(1.0, &grads.db);
            g = grads.dx;
        }
        Ok(())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut ParamSlot> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }
}

/// `φ = ReLU(W1·ψ)`, one weight row per output element and no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub weight: ParamSlot,
}

impl Adapter {
    pub fn new(d_embed: usize, d_adapt: usize, rng: &mut SeededRng) -> Self {
        Self {
            weight: ParamSlot::glorot(d_adapt, d_embed, rng),
        }
    }

    pub fn d_adapt(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Returns `φ` and the pre-activation `W1·ψ`.
    pub fn forward(&self, psi: &Tensor) -> Result<(Tensor, Tensor)> {
        let z = linear(psi, &self.weight.value, None)?;
        Ok((relu(&z), z))
    }

    pub fn adapt(&self, psi: &Tensor) -> Result<Tensor> {
        Ok(self.forward(psi)?.0)
    }

    /// Accumulates `∂L/∂W1` and returns `∂L/∂ψ`.
    pub fn backward(&mut self, psi: &Tensor, pre: &Tensor, grad_phi: &Tensor) -> Result<Tensor> {
        let g = relu_backward(pre, grad_phi);
        let grads = linear_backward(psi, &self.weight.value, &g)?;
        self.weight.grad.axpy(1.0, &grads.dw);
        Ok(grads.dx)
    }
}

/// Linear `K_train`-way classifier used for the cross-entropy term.
#[derive(Debug, Clone, PartialEq)]
pub struct CeHead {
    pub weight: ParamSlot,
    pub bias: ParamSlot,
}

impl CeHead {
    pub fn new(d_feat: usize, n_classes: usize, rng: &mut SeededRng) -> Self {
        Self {
            weight: ParamSlot::glorot(n_classes, d_feat, rng),
            bias: ParamSlot::zeros(&[n_classes]),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Mean cross-entropy of the head's logits. Accumulates head gradients
    /// and returns `(L_ce, ∂L/∂features)`.
    pub fn loss(&mut self, feats: &Tensor, labels: &[usize], scale: f64) -> Result<(f64, Tensor)> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.n_classes()) {
            return Err(Error::invalid(format!(
                "label {bad} is not one of the {} training classes",
                self.n_classes()
            )));
        }
        let logits = linear(feats, &self.weight.value, Some(&self.bias.value))?;
        let (loss, mut g) = softmax_cross_entropy(&logits, labels)?;
        g.scale(scale);
        let grads = linear_backward(feats, &self.weight.value, &g)?;
        self.weight.grad.axpy(1.0, &grads.dw);
        self.bias.grad.axpy(1.0, &grads.db);
        Ok((loss, grads.dx))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_mat(rng: &mut SeededRng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn identity_layer_passes_input() {
        let mut rng = SeededRng::new(0);
        let mut bb = Backbone::new(&[3, 3], &mut rng).unwrap();
        bb.layers[0].weight.value = Tensor::identity(3);
        let x = rand_mat(&mut rng, 4, 3);
        assert_eq!(bb.embed(&x).unwrap(), x);
    }

    #[test]
    fn zero_weights_give_zero_embedding() {
        let mut rng = SeededRng::new(0);
        let mut bb = Backbone::new(&[4, 6, 3], &mut rng).unwrap();
        for p in bb.params_mut() {
            p.value.fill(0.0);
        }
        let x = rand_mat(&mut rng, 5, 4);
        assert!(bb.embed(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_layer_net_matches_per_layer_oracle() {
        let mut rng = SeededRng::new(9);
        let bb = Backbone::new(&[5, 7, 3], &mut rng).unwrap();
        let x = rand_mat(&mut rng, 6, 5);
        let got = bb.embed(&x).unwrap();
        let (w0, b0) = (&bb.layers[0].weight.value, &bb.layers[0].bias.value);
        let (w1, b1) = (&bb.layers[1].weight.value, &bb.layers[1].bias.value);
        for i in 0..6 {
            let mut h = [0.0; 7];
            for (j, hj) in h.iter_mut().enumerate() {
                let mut s = b0.data()[j];
                for k in 0..5 {
                    s += w0.at(j, k) * x.at(i, k);
                }
                *hj = if s > 0.0 { s } else { 0.0 };
            }
            for j in 0..3 {
                let mut s = b1.data()[j];
                for (k, hk) in h.iter().enumerate() {
                    s += w1.at(j, k) * hk;
                }
                assert!((got.at(i, j) - s).abs() <= 1e-12 * s.abs().max(1.0));
            }
        }
    }

    #[test]
    fn embed_rejects_dim_mismatch() {
        let mut rng = SeededRng::new(0);
        let bb = Backbone::new(&[4, 3], &mut rng).unwrap();
        assert!(bb.embed(&Tensor::zeros(&[2, 5])).is_err());
        assert!(Backbone::new(&[4], &mut rng).is_err());
        assert!(Backbone::new(&[4, 1], &mut rng).is_err());
    }

    #[test]
    fn adapter_identity_and_negation() {
        let mut rng = SeededRng::new(2);
        let mut ad = Adapter::new(3, 3, &mut rng);
        let psi = Tensor::from_rows(&[vec![0.5, 0.0, 2.0], vec![1.0, 3.0, 0.1]]).unwrap();
        ad.weight.value = Tensor::identity(3);
        assert_eq!(ad.adapt(&psi).unwrap(), psi);
        let mut neg = Tensor::identity(3);
        neg.scale(-1.0);
        ad.weight.value = neg;
        assert!(ad.adapt(&psi).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adapter_matches_linear_relu_composition() {
        let mut rng = SeededRng::new(4);
        let ad = Adapter::new(6, 4, &mut rng);
        let psi = rand_mat(&mut rng, 5, 6);
        let want = relu(&linear(&psi, &ad.weight.value, None).unwrap());
        let got = ad.adapt(&psi).unwrap();
        assert_eq!(got, want);
        assert!(got.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn ce_head_closed_forms() {
        let mut rng = SeededRng::new(1);
        let mut head = CeHead::new(4, 5, &mut rng);
        head.weight.value.fill(0.0);
        let feats = rand_mat(&mut rng, 3, 4);
        let (l, _) = head.loss(&feats, &[0, 2, 4], 1.0).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);

        let mut w = Tensor::identity(4);
        w.scale(100.0);
        head = CeHead::new(4, 4, &mut rng);
        head.weight.value = w;
        let onehot = Tensor::identity(4);
        let (l, _) = head.loss(&onehot, &[0, 1, 2, 3], 1.0).unwrap();
        assert!(l < 1e-6);

        assert!(head.loss(&onehot, &[0, 1, 2, 4], 1.0).is_err());
    }
}
