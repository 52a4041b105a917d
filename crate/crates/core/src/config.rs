//! Run configuration: flat JSON keys, every field optional with a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_csv, Dataset, SyntheticSpec};
use crate::dichotomizer::NormRegime;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Backbone, adapter and dichotomizer trained jointly on the full objective.
    End2end,
    /// Backbone parameters held fixed; everything downstream trains.
    FrozenBackbone,
    /// Cross-entropy + triplet only; retrieval by Euclidean distance.
    EuclidBaseline,
    /// Hinge term replaced by a learned full Mahalanobis metric.
    MahalanobisBaseline,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::End2end => "end2end",
            TrainMode::FrozenBackbone => "frozen_backbone",
            TrainMode::EuclidBaseline => "euclid_baseline",
            TrainMode::MahalanobisBaseline => "mahalanobis_baseline",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::invalid(format!("unknown training mode '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    SoftL2,
    FixedNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Classes per batch (P).
    pub batch_classes: usize,
    /// Samples per class per batch (K).
    pub batch_per_class: usize,
    pub pairs_per_batch: usize,
    pub triplet_margin: f64,
    pub hinge_c: f64,
    pub norm_regime: NormKind,
    pub fixed_norm_tau: f64,
    pub lambda_ce: f64,
    pub lambda_tri: f64,
    pub lambda_hinge: f64,
    pub hidden_dims: Vec<usize>,
    pub d_embed: usize,
    pub d_adapt: usize,
    pub classifier_batchnorm: bool,
    pub classifier_dropout: f64,
    /// Attach the cross-entropy and triplet terms to ψ instead of φ.
    pub aux_on_embedding: bool,
    pub mahalanobis_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::End2end,
            epochs: 50,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_classes: 8,
            batch_per_class: 4,
            pairs_per_batch: 64,
            triplet_margin: 0.2,
            hinge_c: 1.0,
            norm_regime: NormKind::SoftL2,
            fixed_norm_tau: 1.0,
            lambda_ce: 1.0,
            lambda_tri: 1.0,
            lambda_hinge: 1.0,
            hidden_dims: vec![64],
            d_embed: 32,
            d_adapt: 32,
            classifier_batchnorm: false,
            classifier_dropout: 0.0,
            aux_on_embedding: false,
            mahalanobis_threshold: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn norm(&self) -> NormRegime {
        match self.norm_regime {
            NormKind::SoftL2 => NormRegime::SoftL2,
            NormKind::FixedNorm => NormRegime::FixedNorm(self.fixed_norm_tau),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.batch_classes < 2 || self.batch_per_class < 2 {
            return bad(format!(
                "batch needs P >= 2 classes and K >= 2 samples per class (got P={}, K={})",
                self.batch_classes, self.batch_per_class
            ));
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be >= 0".into());
        }
        if self.pairs_per_batch == 0 || !self.pairs_per_batch.is_multiple_of(2) {
            return bad(format!("pairs_per_batch must be positive and even, got {}", self.pairs_per_batch));
        }
        if !(self.hinge_c > 0.0) {
            return bad(format!("hinge_c must be > 0, got {}", self.hinge_c));
        }
        if self.norm_regime == NormKind::FixedNorm && !(self.fixed_norm_tau > 0.0) {
            return bad("fixed_norm_tau must be > 0".into());
        }
        if self.triplet_margin < 0.0 {
            return bad("triplet_margin must be >= 0".into());
        }
        if [self.lambda_ce, self.lambda_tri, self.lambda_hinge].iter().any(|l| *l < 0.0) {
            return bad("loss weights must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.classifier_dropout) {
            return bad("classifier_dropout must be in [0, 1)".into());
        }
        if self.d_embed < 2 || self.d_adapt < 1 || self.hidden_dims.contains(&0) {
            return bad("layer sizes must be positive and d_embed >= 2".into());
        }
        Ok(())
    }
}

/// Where the data comes from and how it is split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// CSV file; when absent the synthetic generator is used.
    pub data_csv: Option<PathBuf>,
    pub label_column: String,
    pub synth_classes: usize,
    pub synth_per_class: usize,
    pub synth_dim: usize,
    pub synth_within_std: f64,
    pub synth_between_sep: f64,
    pub synth_seed: u64,
    /// Fraction of classes held out for open-set testing.
    pub holdout_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            data_csv: None,
            label_column: "label".into(),
            synth_classes: s.classes,
            synth_per_class: s.per_class,
            synth_dim: s.dim,
            synth_within_std: s.within_std,
            synth_between_sep: s.between_sep,
            synth_seed: s.seed,
            holdout_fraction: 1.0 / 3.0,
        }
    }
}

impl DataConfig {
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.synth_classes,
            per_class: self.synth_per_class,
            dim: self.synth_dim,
            within_std: self.synth_within_std,
            between_sep: self.synth_between_sep,
            seed: self.synth_seed,
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        match &self.data_csv {
            Some(p) => load_csv(p, &self.label_column),
            None => generate_synthetic(&self.synthetic_spec()),
        }
    }

    /// Loads the data and returns the class-disjoint `(train, test)` split.
    pub fn load_split(&self) -> Result<(Dataset, Dataset)> {
        self.load()?.split_by_class(self.holdout_fraction)
    }
}

/// Full configuration of a run; serialises to a single flat JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(flatten)]
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Parses a flat JSON object, rejecting keys that match no field.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let known = serde_json::to_value(RunConfig::default())?;
        if let (Some(obj), Some(known)) = (value.as_object(), known.as_object()) {
            if let Some(k) = obj.keys().find(|k| !known.contains_key(*k) && *k != "data_csv") {
                return Err(Error::invalid(format!("unknown config key '{k}'")));
            }
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}
