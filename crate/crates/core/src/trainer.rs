//! End-to-end training in dissimilarity space.
//!
//! One step: embed a PK batch (`ψ = f(x)`), adapt (`φ = ReLU(W1·ψ)`), draw
//! balanced within/between-class pairs, transform them to `u = |φ_q − φ_g|`
//! and minimise `λ_ce·L_ce + λ_tri·L_tri + λ_hinge·L_hinge` with momentum SGD.
//! The baseline modes swap or drop the hinge term.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::backbone::{Adapter, Backbone, BackboneCache, CeHead};
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TrainConfig, TrainMode};
use crate::data::Dataset;
use crate::dichotomizer::{Dichotomizer, MahalanobisParams};
use crate::error::{Error, Result};
use crate::ops::{sgd_momentum_step, Mode};
use crate::pairspace::{pair_dissimilarities, sample_balanced_pairs, scatter_pair_grad, PairBatch};
use crate::tensor::{ParamSlot, SeededRng, Tensor};

/// RNG stream used for model initialisation; training draws from [`TRAIN_STREAM`].
pub const INIT_STREAM: u64 = 0;
pub const TRAIN_STREAM: u64 = 1;

/// All trainable state.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub adapter: Adapter,
    pub head: CeHead,
    pub dichotomizer: Dichotomizer,
    pub mahalanobis: Option<MahalanobisParams>,
    pub aux_on_embedding: bool,
}

/// Per-step (or per-epoch mean) loss values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_tri: f64,
    /// Hinge term; the Mahalanobis pair loss in `mahalanobis_baseline` mode.
    pub l_hinge: f64,
    pub l_total: f64,
}

/// Where dropout on the dissimilarity vectors gets its mask from.
pub enum DropoutSource<'a> {
    Rng(&'a mut SeededRng),
    Mask(&'a Tensor),
}

/// Result of [`Model::forward_backward`].
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub losses: LossBreakdown,
    /// Distance of the evaluation point to the nearest non-differentiable
    /// point of any ReLU, hinge, `|·|` or hardest-example selection.
    pub kink_gap: f64,
}

impl Model {
    pub fn new(cfg: &TrainConfig, d_input: usize, n_classes: usize, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        if n_classes < 2 {
            return Err(Error::invalid("need at least 2 training classes"));
        }
        let mut dims = vec![d_input];
        dims.extend(&cfg.hidden_dims);
        dims.push(cfg.d_embed);
        let backbone = Backbone::new(&dims, rng)?;
        let adapter = Adapter::new(cfg.d_embed, cfg.d_adapt, rng);
        let aux_dim = if cfg.aux_on_embedding { cfg.d_embed } else { cfg.d_adapt };
        let head = CeHead::new(aux_dim, n_classes, rng);
        let mut dichotomizer = Dichotomizer::new(cfg.d_adapt, cfg.hinge_c, cfg.norm(), rng)?
            .with_dropout(cfg.classifier_dropout)?;
        if cfg.classifier_batchnorm {
            dichotomizer = dichotomizer.with_batchnorm();
        }
        let mahalanobis = (cfg.mode == TrainMode::MahalanobisBaseline)
            .then(|| MahalanobisParams::new(cfg.d_adapt, cfg.mahalanobis_threshold));
        Ok(Self {
            backbone,
            adapter,
            head,
            dichotomizer,
            mahalanobis,
            aux_on_embedding: cfg.aux_on_embedding,
        })
    }

    /// `ψ`, eval mode.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        self.backbone.embed(x)
    }

    /// `φ = adapt(embed(x))`, eval mode.
    pub fn adapted(&self, x: &Tensor) -> Result<Tensor> {
        self.adapter.adapt(&self.backbone.embed(x)?)
    }

    /// Features the cross-entropy and triplet terms are attached to.
    pub fn metric_features(&self, x: &Tensor) -> Result<Tensor> {
        if self.aux_on_embedding {
            self.embed(x)
        } else {
            self.adapted(x)
        }
    }

    /// Every tensor that makes up the model, with stable names.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut push = |name: String, p: &ParamSlot| {
            out.push((name.clone(), p.value.clone()));
            out.push((format!("{name}.momentum"), p.momentum.clone()));
        };
        for (i, l) in self.backbone.layers.iter().enumerate() {
            push(format!("backbone.{i}.weight"), &l.weight);
            push(format!("backbone.{i}.bias"), &l.bias);
        }
        push("adapter.weight".into(), &self.adapter.weight);
        push("head.weight".into(), &self.head.weight);
        push("head.bias".into(), &self.head.bias);
        push("dichotomizer.weight".into(), &self.dichotomizer.weight);
        push("dichotomizer.bias".into(), &self.dichotomizer.bias);
        if let Some(bn) = &self.dichotomizer.bn {
            push("dichotomizer.bn.gamma".into(), &bn.gamma);
            push("dichotomizer.bn.beta".into(), &bn.beta);
        }
        if let Some(m) = &self.mahalanobis {
            push("mahalanobis.l".into(), &m.l);
            push("mahalanobis.threshold".into(), &m.threshold);
        }
        if let Some(bn) = &self.dichotomizer.bn {
            out.push(("dichotomizer.bn.running_mean".into(), bn.running_mean.clone()));
            out.push(("dichotomizer.bn.running_var".into(), bn.running_var.clone()));
        }
        out
    }

    fn tensor_slots_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        fn push<'a>(out: &mut Vec<(String, &'a mut Tensor)>, name: String, p: &'a mut ParamSlot) {
            out.push((format!("{name}.momentum"), &mut p.momentum));
            out.push((name, &mut p.value));
        }
        for (i, l) in self.backbone.layers.iter_mut().enumerate() {
            push(&mut out, format!("backbone.{i}.weight"), &mut l.weight);
            push(&mut out, format!("backbone.{i}.bias"), &mut l.bias);
        }
        push(&mut out, "adapter.weight".into(), &mut self.adapter.weight);
        push(&mut out, "head.weight".into(), &mut self.head.weight);
        push(&mut out, "head.bias".into(), &mut self.head.bias);
        push(&mut out, "dichotomizer.weight".into(), &mut self.dichotomizer.weight);
        push(&mut out, "dichotomizer.bias".into(), &mut self.dichotomizer.bias);
        if let Some(bn) = &mut self.dichotomizer.bn {
            push(&mut out, "dichotomizer.bn.gamma".into(), &mut bn.gamma);
            push(&mut out, "dichotomizer.bn.beta".into(), &mut bn.beta);
            out.push(("dichotomizer.bn.running_mean".into(), &mut bn.running_mean));
            out.push(("dichotomizer.bn.running_var".into(), &mut bn.running_var));
        }
        if let Some(m) = &mut self.mahalanobis {
            push(&mut out, "mahalanobis.l".into(), &mut m.l);
            push(&mut out, "mahalanobis.threshold".into(), &mut m.threshold);
        }
        out
    }

    /// Overwrites every tensor from `tensors`; all names must be present with
    /// matching shapes and no extra names are allowed.
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let slots = self.tensor_slots_mut();
        if slots.len() != tensors.len() {
            return Err(Error::MalformedCheckpoint(format!(
                "model has {} tensors, checkpoint has {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (name, slot) in slots {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::MalformedCheckpoint(format!("missing tensor '{name}'")))?;
            if t.shape() != slot.shape() {
                return Err(Error::MalformedCheckpoint(format!(
                    "tensor '{name}' has shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    /// Parameters updated by the optimiser in `mode`.
    pub fn trainable_mut(&mut self, mode: TrainMode) -> Vec<&mut ParamSlot> {
        let mut v: Vec<&mut ParamSlot> = Vec::new();
        if mode != TrainMode::FrozenBackbone {
            v.extend(self.backbone.params_mut());
        }
        v.push(&mut self.adapter.weight);
        v.push(&mut self.head.weight);
        v.push(&mut self.head.bias);
        match mode {
            TrainMode::End2end | TrainMode::FrozenBackbone => v.extend(self.dichotomizer.params_mut()),
            TrainMode::MahalanobisBaseline => {
                if let Some(m) = &mut self.mahalanobis {
                    v.extend(m.params_mut());
                }
            }
            TrainMode::EuclidBaseline => {}
        }
        v
    }

    pub fn zero_grad(&mut self) {
        self.backbone.params_mut().for_each(ParamSlot::zero_grad);
        self.adapter.weight.zero_grad();
        self.head.weight.zero_grad();
        self.head.bias.zero_grad();
        self.dichotomizer.params_mut().into_iter().for_each(ParamSlot::zero_grad);
        if let Some(m) = &mut self.mahalanobis {
            m.params_mut().into_iter().for_each(ParamSlot::zero_grad);
        }
    }

    /// Computes the weighted objective on one batch and accumulates gradients
    /// of `L_total` into every parameter the mode trains. Gradients are not
    /// zeroed first.
    pub fn forward_backward(
        &mut self,
        cfg: &TrainConfig,
        x: &Tensor,
        labels: &[usize],
        pairs: &PairBatch,
        dropout: DropoutSource<'_>,
    ) -> Result<StepReport> {
        let mode = cfg.mode;
        let (psi, bb_cache) = self.backbone.forward(x)?;
        let (phi, adapt_pre) = self.adapter.forward(&psi)?;
        let mut gap = relu_gap(&bb_cache, &adapt_pre);

        let aux = if self.aux_on_embedding { &psi } else { &phi };
        let mut grad_aux = Tensor::zeros(aux.shape());
        let mut losses = LossBreakdown::default();

        if cfg.lambda_ce > 0.0 {
            let (l, g) = self.head.loss(aux, labels, cfg.lambda_ce)?;
            losses.l_ce = l;
            grad_aux.axpy(1.0, &g);
        } else {
            losses.l_ce = self.head.loss(aux, labels, 0.0)?.0;
        }

        let tri = triplet_loss_batch_hard(aux, labels, cfg.triplet_margin)?;
        losses.l_tri = tri.loss;
        gap = gap.min(tri.kink_gap);
        grad_aux.axpy(cfg.lambda_tri, &tri.grad);

        let mut grad_phi = Tensor::zeros(phi.shape());
        match mode {
            TrainMode::End2end | TrainMode::FrozenBackbone => {
                let u = pair_dissimilarities(&phi, pairs)?;
                let (l, grad_u) = match dropout {
                    DropoutSource::Rng(rng) => {
                        self.dichotomizer
                            .hinge_loss(&u, &pairs.y, Mode::Train, rng, cfg.lambda_hinge)?
                    }
                    DropoutSource::Mask(mask) => {
                        self.dichotomizer
                            .hinge_loss_with_mask(&u, &pairs.y, mask, cfg.lambda_hinge)?
                    }
                };
                losses.l_hinge = l;
                if self.dichotomizer.bn.is_none() && self.dichotomizer.dropout_p == 0.0 {
                    gap = gap.min(self.dichotomizer.margin_gap(&u, &pairs.y)?);
                }
                gap = gap.min(abs_gap(&phi, pairs));
                grad_phi.axpy(1.0, &scatter_pair_grad(&phi, pairs, &grad_u));
            }
            TrainMode::MahalanobisBaseline => {
                let m = self
                    .mahalanobis
                    .as_mut()
                    .ok_or_else(|| Error::invalid("mahalanobis_baseline mode without metric parameters"))?;
                let (l, g) = m.pair_loss(&phi, pairs, cfg.lambda_hinge)?;
                gap = gap.min(m.margin_gap(&phi, pairs));
                losses.l_hinge = l;
                grad_phi.axpy(1.0, &g);
            }
            TrainMode::EuclidBaseline => {}
        }
        losses.l_total =
            cfg.lambda_ce * losses.l_ce + cfg.lambda_tri * losses.l_tri + cfg.lambda_hinge * losses.l_hinge;

        let mut grad_psi = if self.aux_on_embedding {
            grad_aux
        } else {
            grad_phi.axpy(1.0, &grad_aux);
            Tensor::zeros(psi.shape())
        };
        let from_adapter = self.adapter.backward(&psi, &adapt_pre, &grad_phi)?;
        grad_psi.axpy(1.0, &from_adapter);
        if mode != TrainMode::FrozenBackbone {
            self.backbone.backward(&bb_cache, &grad_psi)?;
        }
        Ok(StepReport {
            losses,
            kink_gap: gap,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }
}

fn relu_gap(cache: &BackboneCache, adapter_pre: &Tensor) -> f64 {
    cache
        .relu_inputs()
        .iter()
        .chain(std::iter::once(adapter_pre))
        .flat_map(|t| t.data().iter())
        .map(|v| v.abs())
        .fold(f64::INFINITY, f64::min)
}

/// Smallest nonzero `|φ_q − φ_g|` entry where at least one side is active.
fn abs_gap(phi: &Tensor, pairs: &PairBatch) -> f64 {
    let mut gap = f64::INFINITY;
    for k in 0..pairs.len() {
        for (a, b) in phi.row(pairs.q[k]).iter().zip(phi.row(pairs.g[k])) {
            if *a == 0.0 && *b == 0.0 {
                continue;
            }
            gap = gap.min((a - b).abs());
        }
    }
    gap
}

/// Output of [`triplet_loss_batch_hard`].
#[derive(Debug, Clone)]
pub struct TripletOutput {
    pub loss: f64,
    pub grad: Tensor,
    /// Valid anchors (at least one positive and one negative).
    pub anchors: usize,
    /// Smallest distance to a hinge kink or a tie in hardest-example selection.
    pub kink_gap: f64,
}

/// Batch-hard triplet loss: mean over anchors of
/// `max{0, m + d(a, hardest positive) − d(a, hardest negative)}`, Euclidean `d`.
pub fn triplet_loss_batch_hard(feat: &Tensor, labels: &[usize], margin: f64) -> Result<TripletOutput> {
    let (n, d) = feat.expect_matrix("triplet_loss_batch_hard")?;
    if labels.len() != n {
        return Err(Error::shape("triplet_loss_batch_hard", format!("{} labels for {n} rows", labels.len())));
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = feat.row(i).iter().zip(feat.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            dist[i * n + j] = s.sqrt();
            dist[j * n + i] = s.sqrt();
        }
    }
    let mut grad = Tensor::zeros(&[n, d]);
    let mut total = 0.0;
    let mut anchors = 0usize;
    let mut gap = f64::INFINITY;
    let mut active = Vec::new();
    for a in 0..n {
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        let (mut pos2, mut neg2) = (f64::NEG_INFINITY, f64::INFINITY);
        for j in 0..n {
            if j == a {
                continue;
            }
            let dj = dist[a * n + j];
            if labels[j] == labels[a] {
                match pos {
                    Some(p) if dj <= dist[a * n + p] => pos2 = pos2.max(dj),
                    Some(p) => {
                        pos2 = pos2.max(dist[a * n + p]);
                        pos = Some(j);
                    }
                    None => pos = Some(j),
                }
            } else {
                match neg {
                    Some(q) if dj >= dist[a * n + q] => neg2 = neg2.min(dj),
                    Some(q) => {
                        neg2 = neg2.min(dist[a * n + q]);
                        neg = Some(j);
                    }
                    None => neg = Some(j),
                }
            }
        }
        let (Some(p), Some(q)) = (pos, neg) else { continue };
        anchors += 1;
        let (dp, dn) = (dist[a * n + p], dist[a * n + q]);
        let slack = margin + dp - dn;
        gap = gap.min(slack.abs()).min(dp - pos2).min(neg2 - dn);
        if dp > 0.0 {
            gap = gap.min(dp);
        }
        gap = gap.min(dn);
        if slack > 0.0 {
            total += slack;
            active.push((a, p, q, dp, dn));
        }
    }
    if anchors == 0 {
        return Err(Error::Sampling(
            "no valid triplet anchor: the batch needs two classes and a class with two samples".into(),
        ));
    }
    let inv = 1.0 / anchors as f64;
    for (a, p, q, dp, dn) in active {
        // ∂dp/∂a = (a − p)/dp ; ∂dn/∂a = (a − n)/dn; zero-distance terms contribute nothing
        for j in 0..d {
            let (xa, xp, xq) = (feat.at(a, j), feat.at(p, j), feat.at(q, j));
            let gp = if dp > 0.0 { (xa - xp) / dp * inv } else { 0.0 };
            let gn = if dn > 0.0 { (xa - xq) / dn * inv } else { 0.0 };
            grad.row_mut(a)[j] += gp - gn;
            grad.row_mut(p)[j] -= gp;
            grad.row_mut(q)[j] += gn;
        }
    }
    Ok(TripletOutput {
        loss: total * inv,
        grad,
        anchors,
        kink_gap: gap,
    })
}

/// `P` distinct classes with `K` samples each (with replacement when a class
/// is smaller than `K`), shuffled. Returns sample indices and their labels.
pub fn make_batch_pk(
    by_class: &[Vec<usize>],
    labels: &[usize],
    p: usize,
    k: usize,
    rng: &mut SeededRng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let eligible: Vec<usize> = (0..by_class.len()).filter(|&c| !by_class[c].is_empty()).collect();
    if eligible.len() < p {
        return Err(Error::Sampling(format!(
            "PK batch needs {p} classes but the dataset has {}",
            eligible.len()
        )));
    }
    let mut idx = Vec::with_capacity(p * k);
    for ci in rng.sample_distinct(eligible.len(), p) {
        let members = &by_class[eligible[ci]];
        if members.len() >= k {
            idx.extend(rng.sample_distinct(members.len(), k).into_iter().map(|i| members[i]));
        } else {
            idx.extend((0..k).map(|_| members[rng.below(members.len())]));
        }
    }
    rng.shuffle(&mut idx);
    let lab = idx.iter().map(|&i| labels[i]).collect();
    Ok((idx, lab))
}

/// One optimisation step on a prepared batch.
pub fn train_step(
    model: &mut Model,
    cfg: &TrainConfig,
    x: &Tensor,
    labels: &[usize],
    rng: &mut SeededRng,
) -> Result<LossBreakdown> {
    let pairs = if cfg.mode == TrainMode::EuclidBaseline {
        PairBatch::default()
    } else {
        sample_balanced_pairs(labels, cfg.pairs_per_batch, rng)?
    };
    model.zero_grad();
    let report = model.forward_backward(cfg, x, labels, &pairs, DropoutSource::Rng(rng))?;
    sgd_momentum_step(model.trainable_mut(cfg.mode), cfg.lr, cfg.momentum, cfg.weight_decay);
    if matches!(cfg.mode, TrainMode::End2end | TrainMode::FrozenBackbone) {
        model.dichotomizer.project_if_fixed()?;
    }
    Ok(report.losses)
}

/// Mean losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRow {
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

pub fn write_loss_log(rows: &[LossRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,l_ce,l_tri,l_hinge,l_total")?;
    for r in rows {
        let l = r.losses;
        writeln!(f, "{},{:?},{:?},{:?},{:?}", r.epoch, l.l_ce, l.l_tri, l.l_hinge, l.l_total)?;
    }
    f.flush()?;
    Ok(())
}

/// Everything produced by a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LossRow>,
    /// Per-step losses, in order.
    pub steps: Vec<LossBreakdown>,
    pub checkpoint: Checkpoint,
}

/// Number of optimiser steps per epoch: one pass worth of PK batches.
pub fn steps_per_epoch(n_samples: usize, cfg: &TrainConfig) -> usize {
    let b = cfg.batch_classes * cfg.batch_per_class;
    n_samples.div_ceil(b).max(1)
}

/// Trains a freshly initialised model on `train` (labels must be dense).
pub fn train(train: &Dataset, run: &RunConfig) -> Result<TrainOutcome> {
    let cfg = &run.train;
    cfg.validate()?;
    let mut init_rng = SeededRng::with_stream(cfg.seed, INIT_STREAM);
    let model = Model::new(cfg, train.dim(), train.n_classes(), &mut init_rng)?;
    train_from(model, train, run)
}

/// Continues training `model` under `run.train` (e.g. a frozen-backbone stage
/// on top of a baseline).
pub fn train_from(mut model: Model, train: &Dataset, run: &RunConfig) -> Result<TrainOutcome> {
    let cfg = &run.train;
    cfg.validate()?;
    if cfg.mode == TrainMode::MahalanobisBaseline && model.mahalanobis.is_none() {
        model.mahalanobis = Some(MahalanobisParams::new(cfg.d_adapt, cfg.mahalanobis_threshold));
    }
    if train.n_classes() > model.head.n_classes() {
        return Err(Error::Data(format!(
            "dataset has {} classes but the model head has {}",
            train.n_classes(),
            model.head.n_classes()
        )));
    }
    let mut rng = SeededRng::with_stream(cfg.seed, TRAIN_STREAM);
    let by_class = train.by_class();
    let per_epoch = steps_per_epoch(train.len(), cfg);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::with_capacity(cfg.epochs * per_epoch);
    for epoch in 0..cfg.epochs {
        let last_good = Checkpoint::from_model(&model, run, epoch, rng.state());
        let mut sum = LossBreakdown::default();
        for step in 0..per_epoch {
            let (idx, labels) =
                make_batch_pk(&by_class, &train.labels, cfg.batch_classes, cfg.batch_per_class, &mut rng)?;
            let x = train.features.select_rows(&idx);
            let l = train_step(&mut model, cfg, &x, &labels, &mut rng)?;
            if !l.l_total.is_finite() || !model.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    what: format!("L_total = {}", l.l_total),
                    last_good: Box::new(last_good),
                });
            }
            sum.l_ce += l.l_ce;
            sum.l_tri += l.l_tri;
            sum.l_hinge += l.l_hinge;
            sum.l_total += l.l_total;
            steps.push(l);
        }
        let k = per_epoch as f64;
        log.push(LossRow {
            epoch,
            losses: LossBreakdown {
                l_ce: sum.l_ce / k,
                l_tri: sum.l_tri / k,
                l_hinge: sum.l_hinge / k,
                l_total: sum.l_total / k,
            },
        });
    }
    let checkpoint = Checkpoint::from_model(&model, run, cfg.epochs, rng.state());
    Ok(TrainOutcome {
        model,
        log,
        steps,
        checkpoint,
    })
}
