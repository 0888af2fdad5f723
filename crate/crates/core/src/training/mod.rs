//! Two-phase training, variants, and experiment bundles.

mod experiment;
mod optim;
mod session;
mod variants;


use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::decomposition::DecompError;
use crate::losses::{LossConfig, LossError};
use crate::metrics::{MetricError, MetricReport};
use crate::network::NetworkError;

pub use experiment::{
    load_experiment_config, run_experiment, run_experiment_on, BundleState, ExperimentConfig,
    ExperimentOptions, ExperimentResult, BEST_CHECKPOINT, CONFIG_FILE, FINAL_REPORT,
    LAST_CHECKPOINT, RESUME_FILE, STATE_FILE, TRAIN_LOG,
};
pub use optim::{Adam, AdamConfig};
pub use session::{evaluate_samples, predict_original, sample_gradients, Progress, Trainer};
pub use variants::{build_variant, Schedule, Variant, VariantRegistry, VariantSpec};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training split is empty")]
    EmptyDataset,
    #[error("phase 2 needs a completed phase 1")]
    MissingPhase1,
    #[error("unknown variant {0:?}")]
    UnknownVariant(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite training loss in phase {phase}, epoch {epoch}")]
    NonFinite { phase: u8, epoch: usize },
    #[error("resume state: {0}")]
    Resume(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Decomposition(#[from] DecompError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Step-decay schedule of one phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub lr: f64,
    pub decay: f64,
    pub decay_every: usize,
}

impl PhaseConfig {
    /// `lr * decay^floor((epoch - 1) / decay_every)` for 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = (epoch.max(1) - 1) / self.decay_every.max(1);
        self.lr * self.decay.powi(k as i32)
    }

    fn validate(&self, which: &str) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(format!("{which}: {m}")));
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad("decay must lie in (0, 1]");
        }
        if self.decay_every == 0 {
            return bad("decay_every must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub phase1: PhaseConfig,
    pub phase2: PhaseConfig,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub variant: String,
    /// Base term weights; the variant zeroes the terms it does not use.
    pub loss: LossConfig,
    /// Relative-only samples drawn per metric sample each epoch. `None`
    /// interleaves every relative-only sample once per epoch.
    pub relative_ratio: Option<f64>,
    /// Predicted original-space depth is clamped to this range before scoring.
    pub depth_range: (f64, f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase1: PhaseConfig { epochs: 20, lr: 1e-4, decay: 0.1, decay_every: 5 },
            phase2: PhaseConfig { epochs: 15, lr: 1e-4, decay: 0.1, decay_every: 3 },
            optimizer: AdamConfig::default(),
            batch_size: 8,
            seed: 0,
            variant: "proposed".into(),
            loss: LossConfig::default(),
            relative_ratio: None,
            depth_range: (1e-3, 10.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.phase1.validate("phase1")?;
        self.phase2.validate("phase2")?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.relative_ratio.is_some_and(|r| !(r >= 0.0 && r.is_finite())) {
            return Err(TrainError::InvalidConfig("relative_ratio must be >= 0".into()));
        }
        let (lo, hi) = self.depth_range;
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(TrainError::InvalidConfig("depth_range must satisfy 0 < lo < hi".into()));
        }
        Ok(())
    }

    pub fn phase(&self, phase: Phase) -> &PhaseConfig {
        match phase {
            Phase::One => &self.phase1,
            Phase::Two => &self.phase2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Phase {
    /// Encoder, G-Net and N-Net.
    One,
    /// All parameters. Single-phase variants run only this one.
    Two,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::One => 1,
            Phase::Two => 2,
        }
    }
}

impl From<Phase> for u8 {
    fn from(p: Phase) -> u8 {
        p.number()
    }
}

impl TryFrom<u8> for Phase {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(Phase::One),
            2 => Ok(Phase::Two),
            _ => Err(format!("phase must be 1 or 2, got {v}")),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub phase: Phase,
    /// 1-based epoch within the phase.
    pub epoch: usize,
    pub lr: f64,
    /// Mean weighted total over the epoch's training samples.
    pub train_loss: f64,
    /// Mean unweighted value of every term; `None` when never evaluated.
    pub losses: BTreeMap<String, Option<f64>>,
    pub val_loss: Option<f64>,
    /// Mean validation metrics; absent in phase 1, which has no metric output.
    pub val: Option<MetricReport>,
}

impl LogRecord {
    pub fn to_json_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("log record serializes");
        s.push('\n');
        s
    }
}
