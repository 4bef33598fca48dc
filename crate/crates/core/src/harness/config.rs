use serde::{Deserialize, Serialize};

use crate::adapter::{DEFAULT_ALPHA, DEFAULT_RANK};
use crate::autodiff::Activation;
use crate::coordinator::DEFAULT_DEPTH;
use crate::error::{Error, Result};
use crate::graph::DEFAULT_COS_THRESHOLD;
use crate::ib::{GateMode, DEFAULT_BETA, DEFAULT_PRIOR_P, DEFAULT_SIGMA, DEFAULT_TAU};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    TeacherStudentRegression,
    TwoMoonsClassification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Lora,
    LoraCos,
    LoraLap,
    Structlora,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Lora,
        Variant::LoraCos,
        Variant::LoraLap,
        Variant::Structlora,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Lora => "lora",
            Variant::LoraCos => "lora_cos",
            Variant::LoraLap => "lora_lap",
            Variant::Structlora => "structlora",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Penalty weights handed to [`super::total_loss`]. Only the weight that
/// belongs to the running variant may be non-zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PenaltyWeights {
    pub lambda_ib: f64,
    pub lambda_cos: f64,
    pub lambda_lap: f64,
}

/// Everything that defines one training run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub variant: Variant,
    /// Number of adapted layers.
    #[serde(rename = "L", alias = "layers")]
    pub layers: usize,
    pub d: usize,
    pub k: usize,
    pub r: usize,
    pub alpha: f64,

    pub lambda_ib: f64,
    pub lambda_cos: f64,
    pub lambda_lap: f64,

    pub eta_lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub log_every: usize,

    /// Message-passing depth.
    #[serde(rename = "T", alias = "depth")]
    pub depth: usize,
    pub coordinator_activation: Activation,
    pub cos_threshold: f64,
    /// Steps between semantic-edge rebuilds; one epoch by default.
    pub graph_rebuild_every: Option<usize>,

    pub gate_mode: GateMode,
    /// Initial gate mean (Gaussian) or logit (Bernoulli).
    pub gate_init: f64,
    pub gate_sigma: f64,
    pub gate_tau: f64,
    pub prior_p: f64,

    pub n_train: usize,
    pub n_test: usize,
    /// Std of the student's offset from the teacher, per entry.
    pub drift_scale: f64,
    /// Fraction of the offset variance shared by every layer.
    pub drift_shared: f64,
    /// Observation noise on regression targets, or point jitter for moons.
    pub noise_std: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::TeacherStudentRegression,
            variant: Variant::Structlora,
            layers: 6,
            d: 8,
            k: 8,
            r: DEFAULT_RANK,
            alpha: DEFAULT_ALPHA,
            lambda_ib: DEFAULT_BETA,
            lambda_cos: 0.01,
            lambda_lap: 0.01,
            eta_lr: 2e-3,
            momentum: 0.9,
            steps: 2000,
            seed: 0,
            batch_size: 64,
            log_every: 10,
            depth: DEFAULT_DEPTH,
            coordinator_activation: Activation::Tanh,
            cos_threshold: DEFAULT_COS_THRESHOLD,
            graph_rebuild_every: None,
            gate_mode: GateMode::Gaussian,
            gate_init: 0.9,
            gate_sigma: DEFAULT_SIGMA,
            gate_tau: DEFAULT_TAU,
            prior_p: DEFAULT_PRIOR_P,
            n_train: 512,
            n_test: 256,
            drift_scale: 0.3,
            drift_shared: 0.5,
            noise_std: 0.01,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("L", self.layers),
            ("d", self.d),
            ("k", self.k),
            ("r", self.r),
            ("batch_size", self.batch_size),
            ("log_every", self.log_every),
            ("n_train", self.n_train),
            ("n_test", self.n_test),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.layers < 2 {
            return Err(Error::Config(
                "L must be at least 2 to form a layer graph".into(),
            ));
        }
        if self.d != self.k {
            return Err(Error::Config(format!(
                "stacked toy layers need square weights, got d={} k={}",
                self.d, self.k
            )));
        }
        if self.graph_rebuild_every == Some(0) {
            return Err(Error::Config("graph_rebuild_every must be positive".into()));
        }
        let nonneg = [
            ("alpha", self.alpha),
            ("lambda_ib", self.lambda_ib),
            ("lambda_cos", self.lambda_cos),
            ("lambda_lap", self.lambda_lap),
            ("eta_lr", self.eta_lr),
            ("drift_scale", self.drift_scale),
            ("noise_std", self.noise_std),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("alpha must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(0.0..=1.0).contains(&self.drift_shared) {
            return Err(Error::Config(format!(
                "drift_shared must lie in [0, 1], got {}",
                self.drift_shared
            )));
        }
        if !(self.cos_threshold > -1.0 && self.cos_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "cos_threshold must lie in (-1, 1], got {}",
                self.cos_threshold
            )));
        }
        if !(self.gate_sigma > 0.0 && self.gate_tau > 0.0) {
            return Err(Error::Config("gate_sigma and gate_tau must be > 0".into()));
        }
        if !(self.prior_p > 0.0 && self.prior_p < 1.0) {
            return Err(Error::Config(format!(
                "prior_p must lie in (0, 1), got {}",
                self.prior_p
            )));
        }
        Ok(())
    }

    /// Steps per pass over the training set.
    pub fn epoch_steps(&self) -> usize {
        self.n_train.div_ceil(self.batch_size).max(1)
    }

    pub fn rebuild_interval(&self) -> usize {
        self.graph_rebuild_every
            .unwrap_or_else(|| self.epoch_steps())
    }

    /// The running variant's weight; every other weight is zeroed.
    pub fn active_weights(&self) -> PenaltyWeights {
        let mut w = PenaltyWeights::default();
        match self.variant {
            Variant::Lora => {}
            Variant::LoraCos => w.lambda_cos = self.lambda_cos,
            Variant::LoraLap => w.lambda_lap = self.lambda_lap,
            Variant::Structlora => w.lambda_ib = self.lambda_ib,
        }
        w
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}
