use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{partition, TrainConfig};
use crate::diffcore::{checkpoint, Tape, Tensor, Var};
use crate::encoder::{build_temporal_graph, posterior_params, system_context, Encoder, GraphBatch, PosteriorHeads, FEATURE_DIM};
use crate::nn::{Bound, ParamStore};
use crate::objectives::{decode, elbo_loss, mi_losses, total_loss, Critics, Decoder, LossComponents, reparameterize};
use crate::odecore::{gate_weights, prototype_field, rk4_integrate, GateColumns, GatingHead, InteractionGraph, PrototypeBank};
use crate::simkit::TrajectorySample;
use crate::{Error, Result};

/// Standardisation of the system parameters fed to the `[g, ξ]` critic.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
pub struct XiStats {
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

impl Default for XiStats {
    fn default() -> Self {
        XiStats {
            mean: [0.0; 4],
            std: [1.0; 4],
        }
    }
}

impl XiStats {
    pub fn fit(samples: &[TrajectorySample]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let n = samples.len() as f64;
        let mut mean = [0.0; 4];
        for s in samples {
            for (m, x) in mean.iter_mut().zip(s.params.as_array()) {
                *m += x / n;
            }
        }
        let mut std = [0.0; 4];
        for s in samples {
            for ((v, x), m) in std.iter_mut().zip(s.params.as_array()).zip(mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        for v in &mut std {
            *v = if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 };
        }
        XiStats { mean, std }
    }

    fn apply(&self, s: &TrajectorySample) -> [f64; 4] {
        let a = s.params.as_array();
        std::array::from_fn(|i| (a[i] - self.mean[i]) / self.std[i])
    }
}

/// Model inputs for a set of samples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub graphs: GraphBatch,
    pub interactions: InteractionGraph,
    /// `[P·objects, 4]` target features, frame-major.
    pub truth: Tensor,
    /// `[B, 4]` standardised system parameters.
    pub xi: Tensor,
    pub prediction_length: usize,
}

impl Batch {
    pub fn n_samples(&self) -> usize {
        self.graphs.n_samples
    }
}

#[derive(Clone, Debug)]
struct Parts {
    object_encoder: Encoder,
    system_encoder: Encoder,
    heads: PosteriorHeads,
    gate: GatingHead,
    bank: PrototypeBank,
    decoder: Decoder,
    critics: Critics,
}

impl Parts {
    fn init(cfg: &TrainConfig, store: &mut ParamStore) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d;
        let k = cfg.effective_k();
        Parts {
            object_encoder: Encoder::init(store, "enc.obj", d, cfg.encoder_layers, &mut rng),
            system_encoder: Encoder::init(store, "enc.sys", d, cfg.encoder_layers, &mut rng),
            heads: PosteriorHeads::init(store, "post", d, &mut rng),
            gate: GatingHead::init(store, "gate", d, k, &mut rng),
            bank: PrototypeBank::init(store, "proto", d, k, &mut rng),
            decoder: Decoder::init(store, "dec", d, cfg.decoder_hidden, &mut rng),
            critics: Critics::init(store, d, cfg.critic_hidden, &mut rng),
        }
    }
}

/// Everything a forward pass records.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[P·objects, 4]` decoded predictions, frame-major.
    pub pred: Var,
    pub mean: Var,
    pub var: Var,
    pub u: Var,
    pub g: Var,
    pub gates: Var,
    pub elbo: Var,
    pub sys: Option<Var>,
    pub dis: Option<Var>,
    pub total: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub xi_stats: XiStats,
    parts: Parts,
}

impl Model {
    /// Fresh parameters, deterministic in `cfg.seed`.
    pub fn new(cfg: TrainConfig, xi_stats: XiStats) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let parts = Parts::init(&cfg, &mut store);
        Ok(Model {
            cfg,
            store,
            xi_stats,
            parts,
        })
    }

    /// Rebuilds a model around stored parameters; names and shapes must
    /// match the configuration.
    pub fn from_params(cfg: TrainConfig, xi_stats: XiStats, params: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut m = Model::new(cfg, xi_stats)?;
        if m.store.len() != params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, configuration expects {}",
                params.len(),
                m.store.len()
            )));
        }
        for (name, t) in params {
            match m.store.get(&name) {
                Some(old) if old.shape() == t.shape() => m.store.insert(name, t),
                Some(old) => {
                    return Err(Error::Format(format!(
                        "parameter {name}: checkpoint shape {:?}, expected {:?}",
                        t.shape(),
                        old.shape()
                    )))
                }
                None => return Err(Error::Format(format!("unexpected parameter {name:?} in checkpoint"))),
            }
        }
        Ok(m)
    }

    pub fn is_critic_param(name: &str) -> bool {
        name.starts_with(Critics::DISENTANGLE_PREFIX)
    }

    /// Stacks samples into model inputs for the given prediction length.
    pub fn prepare(&self, samples: &[&TrajectorySample], prediction_length: usize) -> Result<Batch> {
        if samples.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let c = self.cfg.condition_length;
        let graphs = samples
            .iter()
            .map(|s| {
                partition(s.n_frames, c, prediction_length)?;
                build_temporal_graph(s, c)
            })
            .collect::<Result<Vec<_>>>()?;
        let graphs = GraphBatch::new(&graphs)?;
        let edges: Vec<&[Vec<f64>]> = samples.iter().map(|s| s.edges.as_slice()).collect();
        let interactions = InteractionGraph::stack(&edges);
        let mut truth = Vec::with_capacity(prediction_length * graphs.n_objects * FEATURE_DIM);
        for p in 0..prediction_length {
            for s in samples {
                for i in 0..s.n_objects {
                    truth.extend_from_slice(&s.features(i, c + p));
                }
            }
        }
        let xi: Vec<f64> = samples.iter().flat_map(|s| self.xi_stats.apply(s)).collect();
        Ok(Batch {
            truth: Tensor::new(vec![prediction_length * graphs.n_objects, FEATURE_DIM], truth)?,
            xi: Tensor::new(vec![samples.len(), 4], xi)?,
            graphs,
            interactions,
            prediction_length,
        })
    }

    /// Records the full model on `tape`. `noise` draws `z0` from the
    /// posterior; without it the posterior mean is used. Critic terms are
    /// computed only when `with_mi` is set.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        batch: &Batch,
        noise: Option<&Tensor>,
        with_mi: bool,
    ) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let flags = &cfg.flags;
        let parts = &self.parts;
        let n = batch.graphs.n_objects;
        let d = cfg.d;

        let u = parts.object_encoder.encode(tape, p, &batch.graphs)?;
        let (_, g) = system_context(tape, p, &parts.system_encoder, &batch.graphs)?;
        let gate_u = if flags.use_object_ctx {
            u
        } else {
            tape.constant(Tensor::zeros(vec![n, d]))
        };
        let gate_g = if flags.use_system_ctx {
            tape.gather_rows(g, batch.graphs.object_sample.clone())?
        } else {
            tape.constant(Tensor::zeros(vec![n, d]))
        };
        let gates = gate_weights(tape, p, &parts.gate, gate_u, gate_g)?;

        let (mean, var) = posterior_params(tape, p, &parts.heads, u)?;
        let z0 = match noise {
            Some(eps) => reparameterize(tape, mean, var, eps)?,
            None => mean,
        };
        let bank = parts.bank.bind(tape, p)?;
        let cols = GateColumns::new(tape, gates, d)?;
        let times: Vec<f64> = (0..=batch.prediction_length).map(|t| t as f64 * cfg.frame_dt).collect();
        let graph = &batch.interactions;
        let traj = rk4_integrate(tape, z0, &times, cfg.substeps, |tape, z| {
            prototype_field(tape, &bank, graph, &cols, z, true)
        })?;
        let stacked = tape.concat(&traj[1..], 0)?;
        let pred = decode(tape, p, &parts.decoder, stacked)?;

        let truth = tape.constant(batch.truth.clone());
        let elbo = elbo_loss(tape, pred, truth, mean, var, &cfg.loss)?;
        let elbo = tape.scale(elbo, 1.0 / batch.n_samples() as f64)?;

        let (mut sys, mut dis) = (None, None);
        if with_mi && flags.uses_mi() {
            let xi = tape.constant(batch.xi.clone());
            let mi = mi_losses(tape, p, &parts.critics, g, xi, u, &batch.graphs.object_sample)?;
            sys = flags.use_system_ctx.then_some(mi.sys);
            dis = flags.use_disentangle.then_some(mi.dis);
        }
        let total = total_loss(tape, &LossComponents { elbo, sys, dis }, flags, &cfg.loss)?;
        Ok(ForwardOutput {
            pred,
            mean,
            var,
            u,
            g,
            gates,
            elbo,
            sys,
            dis,
            total,
        })
    }

    /// Deterministic predictions from the posterior mean, as
    /// `[sample][object][step] -> [qx, qy, vx, vy]`.
    pub fn predict(&self, samples: &[TrajectorySample], prediction_length: usize) -> Result<Vec<Vec<Vec<[f64; 4]>>>> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(CHUNK) {
            let refs: Vec<&TrajectorySample> = chunk.iter().collect();
            let batch = self.prepare(&refs, prediction_length)?;
            let mut tape = Tape::new();
            let p = self.store.bind(&mut tape, false)?;
            let f = self.forward(&mut tape, &p, &batch, None, false)?;
            let pred = tape.value(f.pred);
            let n = batch.graphs.n_objects;
            let mut off = 0;
            for s in chunk {
                let per: Vec<Vec<[f64; 4]>> = (0..s.n_objects)
                    .map(|i| {
                        (0..prediction_length)
                            .map(|t| {
                                let r = pred.row(t * n + off + i);
                                [r[0], r[1], r[2], r[3]]
                            })
                            .collect()
                    })
                    .collect();
                out.push(per);
                off += s.n_objects;
            }
        }
        Ok(out)
    }

    /// Gate weights `[objects, K]` for each sample.
    pub fn gates(&self, samples: &[TrajectorySample]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(samples.len());
        for s in samples {
            let batch = self.prepare(&[s], 1)?;
            let mut tape = Tape::new();
            let p = self.store.bind(&mut tape, false)?;
            let f = self.forward(&mut tape, &p, &batch, None, false)?;
            out.push(tape.value(f.gates).clone());
        }
        Ok(out)
    }

    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "pgode-model",
            "config": self.cfg,
            "xi_stats": self.xi_stats,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, self.store.as_map(), &self.metadata())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, meta) = checkpoint::load(path)?;
        let params: BTreeMap<String, Tensor> = tensors
            .into_iter()
            .filter(|(k, _)| !k.starts_with("adam."))
            .collect();
        let (cfg, xi) = Self::parse_metadata(&meta)?;
        Model::from_params(cfg, xi, params)
    }

    pub(crate) fn parse_metadata(meta: &serde_json::Value) -> Result<(TrainConfig, XiStats)> {
        let cfg: TrainConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let xi: XiStats = serde_json::from_value(meta["xi_stats"].clone())
            .map_err(|e| Error::Format(format!("checkpoint xi_stats: {e}")))?;
        Ok((cfg, xi))
    }
}
