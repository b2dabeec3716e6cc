//! Distillation losses, instance-weighting strategies and training loops.

mod loss;
mod train;

pub use loss::{
    blend_coefficients, ce_loss, confidence_margin, kd_loss, kd_loss_scaled, margin_weight,
    margin_weight_unclamped, student_loss,
};
pub use train::{
    distill_dedier, distill_laplace, train_teacher, weight_histogram, weight_histogram_edges,
    DistillOutcome, EpochMetrics,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::laplace::Ridge;
use crate::network::{Activation, AuxTrainSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    /// `(1 − λ)·ce + λ·wt·kd`
    LambdaBlend,
    /// `ce + wt·kd`
    Alg2Additive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Uniform,
    Margin,
    LaplaceEntropy,
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "margin" => Ok(Self::Margin),
            "laplace" | "laplace_entropy" => Ok(Self::LaplaceEntropy),
            other => Err(Error::ConfigMismatch(format!("unknown strategy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gating {
    /// Weights other than 1 only where the aux head mislabels the example.
    GatedOnAuxError,
    Unconditional,
}

/// Which uncertainty drives the instance weights, and when it applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightingStrategy {
    pub kind: StrategyKind,
    pub gating: Gating,
}

impl WeightingStrategy {
    /// Margin weighting is gated on aux error; entropy weighting is not.
    pub fn with_default_gating(kind: StrategyKind) -> Self {
        let gating = match kind {
            StrategyKind::LaplaceEntropy => Gating::Unconditional,
            _ => Gating::GatedOnAuxError,
        };
        Self { kind, gating }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// Early-exit activations of the student at `exit_depth`.
    Student,
    /// Last hidden layer of the teacher.
    Teacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshSchedule {
    /// Aux head, covariance and weights are refreshed over the full training
    /// set at the start of every epoch.
    PerEpoch,
    /// Refreshed from each minibatch alone before its update.
    PerMinibatch,
}

/// Every knob of teacher training and distillation. Serialized flat so it
/// can live in a TOML file with any subset of keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Distillation fraction `λ` in `(1 − λ)·ce + λ·wt·kd`.
    pub lambda: f64,
    /// Exponent on the uncertainty in the weight formula.
    pub alpha_w: f64,
    /// Scale on the uncertainty in the weight formula.
    pub beta_w: f64,
    /// Distillation temperature.
    pub temp: f64,
    /// Student layer (1-based) feeding the aux head.
    pub exit_depth: usize,
    pub epochs: usize,
    /// Aux retraining period `L` (in epochs) for margin weighting.
    pub aux_period: usize,
    /// Aux training epochs `R` per refresh.
    pub aux_epochs: usize,
    pub mc_samples: usize,
    pub eval_mc_samples: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_cap: f64,
    pub blend_mode: BlendMode,
    pub strategy: StrategyKind,
    /// Overrides the strategy's default gating.
    pub gating: Option<Gating>,
    pub aux_feature_source: FeatureSource,
    pub refresh: RefreshSchedule,
    pub ridge: Ridge,
    /// Multiply the KD term by `T²`.
    pub kd_temp_squared: bool,
    pub aux_learning_rate: f64,
    pub num_classes: usize,
    pub teacher_epochs: usize,
    pub teacher_hidden: Vec<usize>,
    pub student_hidden: Vec<usize>,
    pub activation: Activation,
    /// Train/val/test fractions applied to a dataset file.
    pub split: Vec<f64>,
    pub threads: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            alpha_w: 2.0,
            beta_w: 4.0,
            temp: 2.0,
            exit_depth: 2,
            epochs: 5,
            aux_period: 1,
            aux_epochs: 5,
            mc_samples: 100,
            eval_mc_samples: 100_000,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            batch_size: 16,
            seed: 0,
            weight_cap: 100.0,
            blend_mode: BlendMode::LambdaBlend,
            strategy: StrategyKind::Uniform,
            gating: None,
            aux_feature_source: FeatureSource::Student,
            refresh: RefreshSchedule::PerEpoch,
            ridge: Ridge::default(),
            kd_temp_squared: true,
            aux_learning_rate: 1e-2,
            num_classes: 3,
            teacher_epochs: 3,
            teacher_hidden: vec![64; 6],
            student_hidden: vec![32; 3],
            activation: Activation::Relu,
            split: vec![0.8, 0.1, 0.1],
            threads: 1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidHyperparameter(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda = {} outside [0, 1]", self.lambda));
        }
        if !(self.temp > 0.0) {
            return bad(format!("temp = {} must be > 0", self.temp));
        }
        if !(self.beta_w >= 0.0) || !(self.alpha_w > 0.0) {
            return bad(format!("beta_w = {}, alpha_w = {}", self.beta_w, self.alpha_w));
        }
        if !(self.weight_cap >= 1.0) {
            return bad(format!("weight_cap = {} must be >= 1", self.weight_cap));
        }
        if self.aux_period == 0 || self.batch_size == 0 || self.mc_samples == 0 {
            return bad("aux_period, batch_size and mc_samples must be >= 1".into());
        }
        if self.exit_depth == 0 || self.exit_depth > self.student_hidden.len() + 1 {
            return bad(format!(
                "exit_depth = {} outside 1..={}",
                self.exit_depth,
                self.student_hidden.len() + 1
            ));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes = {}", self.num_classes));
        }
        if !(self.learning_rate > 0.0) || !(self.aux_learning_rate > 0.0) {
            return bad("learning rates must be > 0".into());
        }
        Ok(())
    }

    pub fn weighting(&self) -> WeightingStrategy {
        let mut w = WeightingStrategy::with_default_gating(self.strategy);
        if let Some(g) = self.gating {
            w.gating = g;
        }
        w
    }

    pub fn aux_settings(&self) -> AuxTrainSettings {
        AuxTrainSettings {
            epochs: self.aux_epochs,
            batch_size: self.batch_size,
            learning_rate: self.aux_learning_rate,
        }
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: TrainingConfig =
            toml::from_str(s).map_err(|e| Error::ConfigMismatch(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}
