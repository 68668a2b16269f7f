use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Batch, Model, XiStats};
use super::optim::{adam_step, clip_by_norm, AdamState};
use super::TrainConfig;
use crate::diffcore::{checkpoint, Tape, Tensor};
use crate::evalkit::position_mse;
use crate::simkit::TrajectorySample;
use crate::{Error, Result};

const SHUFFLE_DOMAIN: u64 = 0x5348_5546;
const NOISE_DOMAIN: u64 = 0x4e4f_4953;

fn stream(seed: u64, domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain);
    rng.set_stream((a << 32) | b);
    rng
}

/// Parameters, optimiser moments and the epoch counter. Random draws are
/// derived from `(seed, epoch, batch)`, so no generator state is stored.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub model_opt: AdamState,
    pub critic_opt: AdamState,
    pub epoch: usize,
}

/// Mean loss components over one epoch plus the validation score.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub batches: usize,
    pub loss: f64,
    pub elbo: f64,
    pub sys: f64,
    pub dis: f64,
    /// Validation position MSE, when a validation set is given.
    pub val_mse_q: Option<f64>,
}

/// Scalar values of one optimisation step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub loss: f64,
    pub elbo: f64,
    pub sys: f64,
    pub dis: f64,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        TrainState {
            model,
            model_opt: AdamState::default(),
            critic_opt: AdamState::default(),
            epoch: 0,
        }
    }

    fn noise(&self, batch_index: usize, batch: &Batch) -> Tensor {
        let mut rng = stream(self.model.cfg.seed, NOISE_DOMAIN, self.epoch as u64, batch_index as u64);
        Tensor::randn(vec![batch.graphs.n_objects, self.model.cfg.d], 1.0, &mut rng)
    }

    /// One forward/backward pass followed by a critic ascent step on the
    /// disentanglement value and a model descent step on the total loss.
    /// Both steps use gradients from the same pass.
    pub fn step(&mut self, batch: &Batch, noise: &Tensor) -> Result<StepLosses> {
        let cfg = self.model.cfg.clone();
        let mut tape = Tape::new();
        let p = self.model.store.bind(&mut tape, true)?;
        let f = self.model.forward(&mut tape, &p, batch, Some(noise), true)?;
        let value = |v: Option<_>| v.map_or(0.0, |v| tape.value(v).data()[0]);
        let losses = StepLosses {
            loss: tape.value(f.total).data()[0],
            elbo: tape.value(f.elbo).data()[0],
            sys: value(f.sys),
            dis: value(f.dis),
        };
        let grads = tape.backward(f.total)?;
        drop(tape);
        let (mut critic, mut model): (BTreeMap<_, _>, BTreeMap<_, _>) =
            grads.into_map().into_iter().partition(|(k, _)| Model::is_critic_param(k));
        if cfg.flags.use_disentangle {
            clip_by_norm(&mut critic, cfg.grad_clip);
            adam_step(
                &mut self.model.store,
                &critic,
                &mut self.critic_opt,
                cfg.lr,
                cfg.betas,
                cfg.adam_eps,
                -1.0,
            )?;
        }
        clip_by_norm(&mut model, cfg.grad_clip);
        adam_step(
            &mut self.model.store,
            &model,
            &mut self.model_opt,
            cfg.lr,
            cfg.betas,
            cfg.adam_eps,
            1.0,
        )?;
        Ok(losses)
    }

    /// Parameters and moments in one checkpoint file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = self.model.store.as_map().clone();
        for (group, st) in [("model", &self.model_opt), ("critic", &self.critic_opt)] {
            for (k, t) in &st.m {
                tensors.insert(format!("adam.{group}.m.{k}"), t.clone());
            }
            for (k, t) in &st.v {
                tensors.insert(format!("adam.{group}.v.{k}"), t.clone());
            }
        }
        let mut meta = self.model.metadata();
        meta["epoch"] = self.epoch.into();
        meta["model_step"] = self.model_opt.step.into();
        meta["critic_step"] = self.critic_opt.step.into();
        checkpoint::save(path, &tensors, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = checkpoint::load(path)?;
        let (cfg, xi) = Model::parse_metadata(&meta)?;
        let mut params = BTreeMap::new();
        let mut model_opt = AdamState::default();
        let mut critic_opt = AdamState::default();
        for (k, t) in tensors {
            let Some(rest) = k.strip_prefix("adam.") else {
                params.insert(k, t);
                continue;
            };
            let (st, rest) = if let Some(r) = rest.strip_prefix("model.") {
                (&mut model_opt, r)
            } else if let Some(r) = rest.strip_prefix("critic.") {
                (&mut critic_opt, r)
            } else {
                return Err(Error::Format(format!("unknown optimiser tensor {k:?}")));
            };
            if let Some(name) = rest.strip_prefix("m.") {
                st.m.insert(name.to_string(), t);
            } else if let Some(name) = rest.strip_prefix("v.") {
                st.v.insert(name.to_string(), t);
            } else {
                return Err(Error::Format(format!("unknown optimiser tensor {k:?}")));
            }
        }
        let count = |key: &str| meta[key].as_u64().ok_or_else(|| Error::Format(format!("checkpoint lacks {key}")));
        model_opt.step = count("model_step")?;
        critic_opt.step = count("critic_step")?;
        let epoch = count("epoch")? as usize;
        Ok(TrainState {
            model: Model::from_params(cfg, xi, params)?,
            model_opt,
            critic_opt,
            epoch,
        })
    }
}

/// Index chunks of one epoch. A trailing batch of one sample is merged into
/// the previous one when critic losses need negative pairs.
fn batches(n: usize, size: usize, needs_pairs: bool, order: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if needs_pairs && out.last().is_some_and(|b| b.len() == 1) {
        if out.len() == 1 {
            return Err(Error::Config(format!(
                "a training set of {n} sample cannot form the pairs the critic losses need"
            )));
        }
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    Ok(out)
}

/// One pass over `data` in a seed-determined order. The epoch counter is
/// advanced afterwards.
pub fn train_epoch(state: &mut TrainState, data: &[TrajectorySample]) -> Result<EpochMetrics> {
    if data.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let cfg = state.model.cfg.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut stream(cfg.seed, SHUFFLE_DOMAIN, state.epoch as u64, 0));
    let chunks = batches(data.len(), cfg.batch_size, cfg.flags.uses_mi(), &order)?;
    let mut sum = StepLosses::default();
    for (b, idx) in chunks.iter().enumerate() {
        let refs: Vec<&TrajectorySample> = idx.iter().map(|&i| &data[i]).collect();
        let batch = state.model.prepare(&refs, cfg.prediction_length)?;
        let noise = state.noise(b, &batch);
        let s = state.step(&batch, &noise).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("epoch {} batch {b}: {m}", state.epoch + 1)),
            other => other,
        })?;
        if !s.loss.is_finite() {
            return Err(Error::Numeric(format!("epoch {} batch {b}: non-finite loss", state.epoch + 1)));
        }
        sum.loss += s.loss;
        sum.elbo += s.elbo;
        sum.sys += s.sys;
        sum.dis += s.dis;
    }
    state.epoch += 1;
    let k = chunks.len() as f64;
    Ok(EpochMetrics {
        epoch: state.epoch,
        batches: chunks.len(),
        loss: sum.loss / k,
        elbo: sum.elbo / k,
        sys: sum.sys / k,
        dis: sum.dis / k,
        val_mse_q: None,
    })
}

pub struct FitOutcome {
    /// Parameters from the epoch with the lowest validation position MSE
    /// (the last epoch when no validation set is given).
    pub best: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
    pub last: TrainState,
}

/// Trains for `cfg.epochs` epochs, keeping the best validation checkpoint.
pub fn fit(cfg: TrainConfig, train: &[TrajectorySample], val: &[TrajectorySample]) -> Result<FitOutcome> {
    let model = Model::new(cfg.clone(), XiStats::fit(train))?;
    let mut state = TrainState::new(model);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    for _ in 0..cfg.epochs {
        let mut m = train_epoch(&mut state, train)?;
        if !val.is_empty() {
            let mse = position_mse(&state.model, val, cfg.prediction_length)?;
            m.val_mse_q = Some(mse);
            if best.as_ref().is_none_or(|(b, _, _)| mse < *b) {
                best = Some((mse, m.epoch, state.model.clone()));
            }
        }
        log::info!(
            "epoch {} loss {:.5} elbo {:.5} sys {:.4} dis {:.4} val_q {:?}",
            m.epoch,
            m.loss,
            m.elbo,
            m.sys,
            m.dis,
            m.val_mse_q
        );
        history.push(m);
    }
    let (best_epoch, best) = match best {
        Some((_, e, m)) => (e, m),
        None => (state.epoch, state.model.clone()),
    };
    Ok(FitOutcome {
        best,
        best_epoch,
        history,
        last: state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lone_trailing_sample_is_merged() {
        let order: Vec<usize> = (0..5).collect();
        let b = batches(5, 2, true, &order).unwrap();
        assert_eq!(b, vec![vec![0, 1], vec![2, 3, 4]]);
        let b = batches(5, 2, false, &order).unwrap();
        assert_eq!(b.len(), 3);
        assert!(batches(1, 2, true, &[0]).is_err());
    }
}
