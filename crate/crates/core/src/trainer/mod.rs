//! End-to-end optimisation: sequence partitioning, batching, alternating
//! critic-ascent / model-descent Adam updates and checkpointing.

mod fit;
mod model;
mod optim;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::objectives::{AblationFlags, LossConfig};
use crate::simkit::TrajectorySample;
use crate::{Error, Result};

pub use fit::{fit, train_epoch, EpochMetrics, FitOutcome, TrainState};
pub use model::{Batch, ForwardOutput, Model, XiStats};
pub use optim::{adam_step, clip_by_norm, AdamState};

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub condition_length: usize,
    pub prediction_length: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Prototype count; forced to 1 when `flags.multi_prototype` is off.
    pub k: usize,
    /// Latent and context width.
    pub d: usize,
    pub encoder_layers: usize,
    pub decoder_hidden: usize,
    pub critic_hidden: usize,
    /// RK4 steps per frame interval.
    pub substeps: usize,
    /// Latent time between consecutive frames.
    pub frame_dt: f64,
    pub loss: LossConfig,
    pub flags: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            condition_length: 12,
            prediction_length: 12,
            batch_size: 32,
            epochs: 30,
            lr: 5e-4,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            grad_clip: 5.0,
            seed: 0,
            k: 5,
            d: 64,
            encoder_layers: 2,
            decoder_hidden: 64,
            critic_hidden: 64,
            substeps: 4,
            frame_dt: 0.1,
            loss: LossConfig::default(),
            flags: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn effective_k(&self) -> usize {
        if self.flags.multi_prototype {
            self.k
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.condition_length < 2 {
            return bad(format!("condition_length must be at least 2, got {}", self.condition_length));
        }
        if self.prediction_length == 0 {
            return bad("prediction_length must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be nonnegative, got {}", self.lr));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps be positive".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be positive".into());
        }
        if self.k == 0 || self.d == 0 || !self.d.is_multiple_of(2) {
            return bad(format!("need k >= 1 and an even d >= 2, got k={} d={}", self.k, self.d));
        }
        if self.substeps == 0 || !(self.frame_dt > 0.0) {
            return bad("substeps and frame_dt must be positive".into());
        }
        if self.batch_size == 0 || self.decoder_hidden == 0 || self.critic_hidden == 0 {
            return bad("batch_size and hidden widths must be positive".into());
        }
        if self.batch_size < 2 && self.flags.uses_mi() {
            return bad("batch_size must be at least 2 while mutual-information losses are active".into());
        }
        self.loss.validate()?;
        self.flags.validate()
    }
}

/// Condition frames `0..c` and target frames `c..c+p` (zero-based).
pub fn partition_sequence(sample: &TrajectorySample, cfg: &TrainConfig) -> Result<(Range<usize>, Range<usize>)> {
    partition(sample.n_frames, cfg.condition_length, cfg.prediction_length)
}

pub(crate) fn partition(n_frames: usize, cond: usize, pred: usize) -> Result<(Range<usize>, Range<usize>)> {
    if pred == 0 || cond == 0 {
        return Err(Error::Config("condition and prediction lengths must be positive".into()));
    }
    if cond + pred > n_frames {
        return Err(Error::Config(format!(
            "sequence of {n_frames} frames is too short for {cond} condition + {pred} prediction frames"
        )));
    }
    Ok((0..cond, cond..cond + pred))
}
