//! Prediction metrics, the ablation runner, theory harnesses and plots.

mod ablation;
mod plot;
mod theory;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::simkit::{Split, TrajectorySample};
use crate::trainer::Model;
use crate::{Error, Result};

pub use ablation::{run_ablations, AblationConfig, AblationData, AblationReport, RunSummary, Stat};
pub use plot::{emit_plots, write_csv, write_svg};
pub use theory::{
    lyapunov_harness, power_iteration, random_bank, uniqueness_check, LyapunovReport, SeedSeries, TheoryConfig,
    UniquenessReport,
};

/// Prediction lengths reported by default.
pub const LENGTHS: [usize; 3] = [12, 24, 36];

/// Mean squared error per variable group.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, Default, PartialEq)]
pub struct VarMse {
    pub q: f64,
    pub v: f64,
    pub qx: f64,
    pub qy: f64,
    pub vx: f64,
    pub vy: f64,
}

impl VarMse {
    pub const NAMES: [&'static str; 6] = ["q", "v", "qx", "qy", "vx", "vy"];

    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "q" => self.q,
            "v" => self.v,
            "qx" => self.qx,
            "qy" => self.qy,
            "vx" => self.vx,
            "vy" => self.vy,
            _ => return None,
        })
    }

    fn scaled(&self, s: f64) -> Self {
        VarMse {
            q: self.q * s,
            v: self.v * s,
            qx: self.qx * s,
            qy: self.qy * s,
            vx: self.vx * s,
            vy: self.vy * s,
        }
    }
}

/// MSE of `pred` against the frames following `condition_length`.
/// `pred` is `[sample][object][step]`; only the first `length` steps count.
pub fn prediction_errors(
    samples: &[TrajectorySample],
    pred: &[Vec<Vec<[f64; 4]>>],
    condition_length: usize,
    length: usize,
) -> Result<VarMse> {
    if samples.is_empty() {
        return Err(Error::Config("cannot score an empty split".into()));
    }
    if samples.len() != pred.len() {
        return Err(Error::shape("prediction_errors", format!("{} samples, {} predictions", samples.len(), pred.len())));
    }
    let mut sums = [0.0; 4];
    let mut count = 0usize;
    for (s, p) in samples.iter().zip(pred) {
        if condition_length + length > s.n_frames {
            return Err(Error::Config(format!("sample {} has too few frames for length {length}", s.id)));
        }
        for (i, obj) in p.iter().enumerate().take(s.n_objects) {
            if obj.len() < length {
                return Err(Error::shape("prediction_errors", format!("{} predicted steps < {length}", obj.len())));
            }
            for (t, y) in obj.iter().enumerate().take(length) {
                let x = s.features(i, condition_length + t);
                for c in 0..4 {
                    sums[c] += (x[c] - y[c]).powi(2);
                }
            }
            count += length;
        }
    }
    let n = count as f64;
    let [qx, qy, vx, vy] = sums.map(|s| s / n);
    Ok(VarMse {
        q: (qx + qy) / 2.0,
        v: (vx + vy) / 2.0,
        qx,
        qy,
        vx,
        vy,
    })
}

/// Validation score used for checkpoint selection.
pub fn position_mse(model: &Model, samples: &[TrajectorySample], length: usize) -> Result<f64> {
    let pred = model.predict(samples, length)?;
    Ok(prediction_errors(samples, &pred, model.cfg.condition_length, length)?.q)
}

/// Split → prediction length → variable → MSE.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct MseReport {
    /// Values are multiplied by `10^-scale_exponent`: `0` for raw MSE, `-2`
    /// when reported in units of 10⁻².
    pub scale_exponent: i32,
    pub splits: BTreeMap<String, BTreeMap<String, VarMse>>,
}

impl MseReport {
    /// Same report in units of 10⁻².
    pub fn in_hundredths(&self) -> Self {
        let s = 10f64.powi(-2 - self.scale_exponent).recip();
        MseReport {
            scale_exponent: -2,
            splits: self
                .splits
                .iter()
                .map(|(k, m)| (k.clone(), m.iter().map(|(l, v)| (l.clone(), v.scaled(s))).collect()))
                .collect(),
        }
    }

    pub fn get(&self, split: Split, length: usize) -> Option<&VarMse> {
        self.splits.get(split.name())?.get(&length.to_string())
    }
}

/// Scores `model` on every given split for every length that fits the
/// recorded frames. One rollout per split serves all lengths.
pub fn mse_report(model: &Model, splits: &[(Split, &[TrajectorySample])], lengths: &[usize]) -> Result<MseReport> {
    let c = model.cfg.condition_length;
    let mut out = BTreeMap::new();
    for &(split, samples) in splits {
        if samples.is_empty() {
            return Err(Error::Config(format!("split {} is empty", split.name())));
        }
        let frames = samples.iter().map(|s| s.n_frames).min().unwrap_or(0);
        let usable: Vec<usize> = lengths.iter().copied().filter(|&l| l > 0 && c + l <= frames).collect();
        let Some(&max_len) = usable.iter().max() else {
            return Err(Error::Config(format!(
                "split {}: no requested length fits {frames} frames after {c} condition frames",
                split.name()
            )));
        };
        let pred = model.predict(samples, max_len)?;
        let mut per = BTreeMap::new();
        for l in usable {
            per.insert(l.to_string(), prediction_errors(samples, &pred, c, l)?);
        }
        out.insert(split.name().to_string(), per);
    }
    Ok(MseReport {
        scale_exponent: 0,
        splits: out,
    })
}
