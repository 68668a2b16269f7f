use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{mse_report, MseReport, VarMse};
use crate::objectives::Variant;
use crate::simkit::{Split, TrajectorySample};
use crate::trainer::{fit, TrainConfig};
use crate::{Error, Result};

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct AblationConfig {
    /// Shared settings; `flags` and `seed` are overridden per run.
    pub base: TrainConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub lengths: Vec<usize>,
}

pub struct AblationData<'a> {
    pub train: &'a [TrajectorySample],
    pub val: &'a [TrajectorySample],
    pub test_id: &'a [TrajectorySample],
    pub test_ood: &'a [TrajectorySample],
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation (zero for a single run).
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub variant: Variant,
    pub seed: u64,
    pub best_epoch: usize,
    pub report: MseReport,
}

/// Variant → split → length → variable → mean ± std over seeds, plus the
/// individual runs.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub summary: BTreeMap<String, BTreeMap<String, BTreeMap<String, BTreeMap<String, Stat>>>>,
    pub runs: Vec<RunSummary>,
}

impl AblationReport {
    pub fn stat(&self, variant: Variant, split: Split, length: usize, var: &str) -> Option<Stat> {
        self.summary
            .get(variant.name())?
            .get(split.name())?
            .get(&length.to_string())?
            .get(var)
            .copied()
    }
}

/// Trains every variant for every seed and scores the best-validation model
/// on both test splits.
pub fn run_ablations(cfg: &AblationConfig, data: &AblationData) -> Result<AblationReport> {
    if cfg.seeds.len() < 3 {
        return Err(Error::Config(format!("ablations need at least 3 seeds, got {}", cfg.seeds.len())));
    }
    if cfg.variants.is_empty() {
        return Err(Error::Config("no ablation variants requested".into()));
    }
    let mut runs = Vec::new();
    for &variant in &cfg.variants {
        for &seed in &cfg.seeds {
            let mut tc = cfg.base.clone();
            tc.flags = variant.flags();
            tc.seed = seed;
            log::info!("ablation {} seed {seed}", variant.name());
            let out = fit(tc, data.train, data.val)?;
            let report = mse_report(
                &out.best,
                &[(Split::TestId, data.test_id), (Split::TestOod, data.test_ood)],
                &cfg.lengths,
            )?;
            runs.push(RunSummary {
                variant,
                seed,
                best_epoch: out.best_epoch,
                report,
            });
        }
    }
    let mut summary = BTreeMap::new();
    for &variant in &cfg.variants {
        let mine: Vec<&RunSummary> = runs.iter().filter(|r| r.variant == variant).collect();
        let mut per_split = BTreeMap::new();
        for (split, lengths) in &mine[0].report.splits {
            let mut per_len = BTreeMap::new();
            for len in lengths.keys() {
                let vals: Vec<&VarMse> = mine.iter().filter_map(|r| r.report.splits.get(split)?.get(len)).collect();
                let per_var = VarMse::NAMES
                    .iter()
                    .map(|&v| {
                        let xs: Vec<f64> = vals.iter().filter_map(|m| m.get(v)).collect();
                        (v.to_string(), Stat::of(&xs))
                    })
                    .collect();
                per_len.insert(len.clone(), per_var);
            }
            per_split.insert(split.clone(), per_len);
        }
        summary.insert(variant.name().to_string(), per_split);
    }
    Ok(AblationReport { summary, runs })
}
