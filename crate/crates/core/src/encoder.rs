//! Temporal observation graph, attention encoder, object/system contexts and
//! the posterior heads for initial latent states.

use std::sync::Arc;

use rand::Rng;

use crate::diffcore::{Tape, Tensor, Var};
use crate::nn::{Bound, Linear, ParamStore};
use crate::simkit::TrajectorySample;
use crate::{Error, Result};

/// Raw per-observation feature width: `[qx, qy, vx, vy]`.
pub const FEATURE_DIM: usize = 4;

/// Observation graph over the first `t_obs` frames of one sample. Node
/// `t·N + i` is object `i` at frame `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalGraph {
    pub n_objects: usize,
    pub t_obs: usize,
    /// `[N·t_obs, 4]` node features.
    pub features: Tensor,
    /// Nonzero adjacency entries `(row, col, weight)`; row `r` aggregates
    /// from column `c`.
    pub entries: Vec<(usize, usize, f64)>,
}

impl TemporalGraph {
    pub fn n_nodes(&self) -> usize {
        self.n_objects * self.t_obs
    }

    pub fn node(&self, object: usize, t: usize) -> usize {
        t * self.n_objects + object
    }

    pub fn adjacency(&self) -> Tensor {
        let n = self.n_nodes();
        let mut a = Tensor::zeros(vec![n, n]);
        for &(r, c, w) in &self.entries {
            a.data_mut()[r * n + c] = w;
        }
        a
    }
}

/// Spatial entries `w_ij` between distinct objects at the same frame, and
/// temporal entries of weight 1 linking `i` at frame `t` to `i` at `t + 1`.
pub fn build_temporal_graph(sample: &TrajectorySample, t_obs: usize) -> Result<TemporalGraph> {
    if t_obs < 2 {
        return Err(Error::Config(format!("t_obs must be at least 2, got {t_obs}")));
    }
    if t_obs > sample.n_frames {
        return Err(Error::Config(format!(
            "t_obs {t_obs} exceeds the {} recorded frames",
            sample.n_frames
        )));
    }
    let n = sample.n_objects;
    let mut features = Vec::with_capacity(n * t_obs * FEATURE_DIM);
    for t in 0..t_obs {
        for i in 0..n {
            features.extend_from_slice(&sample.features(i, t));
        }
    }
    let mut entries = Vec::new();
    for t in 0..t_obs {
        for i in 0..n {
            for j in 0..n {
                let w = sample.edges[i][j];
                if i != j && w != 0.0 {
                    entries.push((t * n + i, t * n + j, w));
                }
            }
            if t + 1 < t_obs {
                entries.push((t * n + i, (t + 1) * n + i, 1.0));
            }
        }
    }
    Ok(TemporalGraph {
        n_objects: n,
        t_obs,
        features: Tensor::new(vec![n * t_obs, FEATURE_DIM], features)?,
        entries,
    })
}

/// Sinusoidal embedding of frame index `t` at even width `d`.
pub fn temporal_embedding(t: usize, d: usize) -> Result<Vec<f64>> {
    if !d.is_multiple_of(2) {
        return Err(Error::Config(format!("temporal embedding width must be even, got {d}")));
    }
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let angle = t as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Ok(out)
}

/// Several temporal graphs stacked into one disjoint union.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub features: Tensor,
    pub recv: Arc<[usize]>,
    pub send: Arc<[usize]>,
    /// `[E, 1]` adjacency weights, aligned with `recv`/`send`.
    pub weights: Tensor,
    pub node_time: Vec<usize>,
    /// Global object index of every node.
    pub node_object: Arc<[usize]>,
    /// Sample index of every object.
    pub object_sample: Arc<[usize]>,
    pub n_objects: usize,
    pub n_samples: usize,
    pub t_obs: usize,
}

impl GraphBatch {
    pub fn new(graphs: &[TemporalGraph]) -> Result<Self> {
        let t_obs = graphs.first().map_or(0, |g| g.t_obs);
        if graphs.is_empty() || graphs.iter().any(|g| g.t_obs != t_obs) {
            return Err(Error::Config("graph batch needs graphs with one common t_obs".into()));
        }
        let mut features = Vec::new();
        let (mut recv, mut send, mut weights) = (Vec::new(), Vec::new(), Vec::new());
        let (mut node_time, mut node_object, mut object_sample) = (Vec::new(), Vec::new(), Vec::new());
        let (mut node_off, mut obj_off) = (0, 0);
        for (b, g) in graphs.iter().enumerate() {
            features.extend_from_slice(g.features.data());
            for &(r, c, w) in &g.entries {
                recv.push(node_off + r);
                send.push(node_off + c);
                weights.push(w);
            }
            for t in 0..t_obs {
                for i in 0..g.n_objects {
                    node_time.push(t);
                    node_object.push(obj_off + i);
                }
            }
            object_sample.extend(std::iter::repeat_n(b, g.n_objects));
            node_off += g.n_nodes();
            obj_off += g.n_objects;
        }
        let e = weights.len();
        Ok(GraphBatch {
            features: Tensor::new(vec![node_off, FEATURE_DIM], features)?,
            recv: recv.into(),
            send: send.into(),
            weights: Tensor::new(vec![e, 1], weights)?,
            node_time,
            node_object: node_object.into(),
            object_sample: object_sample.into(),
            n_objects: obj_off,
            n_samples: graphs.len(),
            t_obs,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.node_time.len()
    }

    /// `[nodes, d]` matrix whose row is the embedding of that node's frame.
    pub fn time_embedding(&self, d: usize) -> Result<Tensor> {
        let table: Vec<Vec<f64>> = (0..self.t_obs).map(|t| temporal_embedding(t, d)).collect::<Result<_>>()?;
        let mut data = Vec::with_capacity(self.n_nodes() * d);
        for &t in &self.node_time {
            data.extend_from_slice(&table[t]);
        }
        Tensor::new(vec![self.n_nodes(), d], data)
    }
}

/// Query/key/value maps of one attention layer, each `d × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

/// One masked attention update: every node adds `relu(Σ α·V ĥ_j)` over its
/// neighbours, with `α = A/√d · (Q ĥ_i)·(K ĥ_j)` and `ĥ = h + TE`. Scores
/// are not normalised.
pub fn attention_layer(
    tape: &mut Tape,
    p: &Bound,
    layer: &AttentionLayer,
    batch: &GraphBatch,
    h: Var,
    te: Var,
    layer_index: usize,
) -> Result<Var> {
    let (m, d) = tape.value(h).dims2();
    let hh = tape.add(h, te)?;
    let q = layer.query.forward(tape, p, hh)?;
    let k = layer.key.forward(tape, p, hh)?;
    let v = layer.value.forward(tape, p, hh)?;
    let qr = tape.gather_rows(q, batch.recv.clone())?;
    let ks = tape.gather_rows(k, batch.send.clone())?;
    let vs = tape.gather_rows(v, batch.send.clone())?;
    let qk = tape.mul(qr, ks)?;
    let dot = tape.sum_axis(qk, 1)?;
    let e = batch.recv.len();
    let dot = tape.reshape(dot, &[e, 1])?;
    let scale = tape.constant(batch.weights.map(|w| w / (d as f64).sqrt()));
    let alpha = tape.mul(dot, scale)?;
    if !tape.value(alpha).is_finite() {
        return Err(Error::Numeric(format!("non-finite attention scores in layer {layer_index}")));
    }
    let alpha = tape.broadcast(alpha, e, d)?;
    let msg = tape.mul(alpha, vs)?;
    let agg = tape.scatter_add_rows(msg, batch.recv.clone(), m)?;
    let upd = tape.relu(agg)?;
    tape.add(h, upd)
}

/// Input embedding, attention stack and summary map.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub embed: Linear,
    pub layers: Vec<AttentionLayer>,
    pub summary: Linear,
    pub width: usize,
}

impl Encoder {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        n_layers: usize,
        rng: &mut R,
    ) -> Self {
        let embed = Linear::init(store, &format!("{prefix}.embed"), FEATURE_DIM, width, true, rng);
        let layers = (0..n_layers)
            .map(|l| AttentionLayer {
                query: Linear::init(store, &format!("{prefix}.att{l}.q"), width, width, false, rng),
                key: Linear::init(store, &format!("{prefix}.att{l}.k"), width, width, false, rng),
                value: Linear::init(store, &format!("{prefix}.att{l}.v"), width, width, false, rng),
            })
            .collect();
        let summary = Linear::init(store, &format!("{prefix}.sum"), width, width, false, rng);
        Encoder {
            embed,
            layers,
            summary,
            width,
        }
    }

    /// Final node representations after all attention layers.
    pub fn node_states(&self, tape: &mut Tape, p: &Bound, batch: &GraphBatch, te: Var) -> Result<Var> {
        let x = tape.constant(batch.features.clone());
        let mut h = self.embed.forward(tape, p, x)?;
        for (l, layer) in self.layers.iter().enumerate() {
            h = attention_layer(tape, p, layer, batch, h, te, l)?;
        }
        Ok(h)
    }

    /// Per-object contexts `[objects, d]`.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, batch: &GraphBatch) -> Result<Var> {
        let te = tape.constant(batch.time_embedding(self.width)?);
        let h = self.node_states(tape, p, batch, te)?;
        summarize_objects(tape, p, &self.summary, batch, h, te)
    }
}

/// `u_i = mean_t relu(W_sum (h_i^t + TE(t)))`.
pub fn summarize_objects(
    tape: &mut Tape,
    p: &Bound,
    summary: &Linear,
    batch: &GraphBatch,
    h: Var,
    te: Var,
) -> Result<Var> {
    let q = tape.add(h, te)?;
    let s = summary.forward(tape, p, q)?;
    let s = tape.relu(s)?;
    let total = tape.scatter_add_rows(s, batch.node_object.clone(), batch.n_objects)?;
    tape.scale(total, 1.0 / batch.t_obs as f64)
}

/// Auxiliary contexts from the system encoder and their per-sample sums:
/// returns `(u' [objects, d], g [samples, d])`.
pub fn system_context(
    tape: &mut Tape,
    p: &Bound,
    system_encoder: &Encoder,
    batch: &GraphBatch,
) -> Result<(Var, Var)> {
    let u_prime = system_encoder.encode(tape, p, batch)?;
    let g = tape.scatter_add_rows(u_prime, batch.object_sample.clone(), batch.n_samples)?;
    Ok((u_prime, g))
}

/// Mean and log-variance maps, both `d → d`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorHeads {
    pub mean: Linear,
    pub log_var: Linear,
}

impl PosteriorHeads {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut R) -> Self {
        PosteriorHeads {
            mean: Linear::init(store, &format!("{prefix}.mean"), width, width, true, rng),
            log_var: Linear::init(store, &format!("{prefix}.logvar"), width, width, true, rng),
        }
    }
}

/// Diagonal Gaussian posterior over initial latents: `(mean, var)`.
pub fn posterior_params(tape: &mut Tape, p: &Bound, heads: &PosteriorHeads, u: Var) -> Result<(Var, Var)> {
    let mean = heads.mean.forward(tape, p, u)?;
    let lv = heads.log_var.forward(tape, p, u)?;
    let var = tape.exp(lv)?;
    Ok((mean, var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simkit::{Split, SystemParams};

    fn sample(n: usize, frames: usize, connected: bool) -> TrajectorySample {
        let w = if connected { 1.0 } else { 0.0 };
        TrajectorySample {
            id: "s".into(),
            split: Split::Train,
            params: SystemParams {
                alpha: 5.0,
                beta: 0.5,
                gamma_strength: 0.1,
                delta: 0.5,
            },
            n_objects: n,
            n_frames: frames,
            positions: (0..n).map(|i| (0..frames).map(|t| [i as f64, t as f64]).collect()).collect(),
            velocities: (0..n).map(|i| (0..frames).map(|t| [0.1 * i as f64, -0.1 * t as f64]).collect()).collect(),
            edges: (0..n).map(|i| (0..n).map(|j| if i == j { 0.0 } else { w }).collect()).collect(),
        }
    }

    fn store(entries: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (name, shape, data) in entries {
            s.insert(*name, Tensor::new(shape.clone(), data.clone()).unwrap());
        }
        s
    }

    #[test]
    fn connected_pair_has_six_entries() {
        let g = build_temporal_graph(&sample(2, 5, true), 2).unwrap();
        assert_eq!(g.n_nodes(), 4);
        assert_eq!(g.entries.len(), 6);
        let a = g.adjacency();
        assert_eq!(a.data().iter().filter(|&&x| x != 0.0).count(), 6);
        assert_eq!(a.at(g.node(1, 0), g.node(1, 1)), 1.0);
        assert_eq!(a.at(g.node(1, 1), g.node(1, 0)), 0.0);
    }

    #[test]
    fn empty_graph_keeps_only_temporal_chains() {
        let g = build_temporal_graph(&sample(3, 6, false), 4).unwrap();
        assert_eq!(g.entries.len(), 3 * 3);
        assert!(g.entries.iter().all(|&(r, c, w)| w == 1.0 && c == r + 3));
    }

    #[test]
    fn single_frame_window_is_rejected() {
        assert!(matches!(build_temporal_graph(&sample(2, 5, true), 1), Err(Error::Config(_))));
        assert!(build_temporal_graph(&sample(2, 5, true), 6).is_err());
    }

    #[test]
    fn embedding_values() {
        assert_eq!(temporal_embedding(0, 4).unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
        let e = temporal_embedding(1, 2).unwrap();
        assert!((e[0] - 0.841_470_984_807_896_5).abs() < 1e-15);
        assert!((e[1] - 0.540_302_305_868_139_8).abs() < 1e-15);
        assert!(temporal_embedding(3, 5).is_err());
        for t in 0..50 {
            assert!(temporal_embedding(t, 16).unwrap().iter().all(|x| x.abs() <= 1.0));
        }
    }

    fn layer(prefix: &str) -> AttentionLayer {
        AttentionLayer {
            query: Linear::existing(&format!("{prefix}.q"), 2, 2, false),
            key: Linear::existing(&format!("{prefix}.k"), 2, 2, false),
            value: Linear::existing(&format!("{prefix}.v"), 2, 2, false),
        }
    }

    #[test]
    fn two_node_chain_matches_hand_computation() {
        // one object, two frames: node 0 aggregates from node 1
        let g = build_temporal_graph(&sample(1, 2, true), 2).unwrap();
        let batch = GraphBatch::new(&[g]).unwrap();
        let wq = [0.5, -0.2, 0.1, 0.3];
        let wk = [0.4, 0.0, -0.6, 0.2];
        let wv = [1.0, 0.5, -0.5, 2.0];
        let s = store(&[
            ("a.q.w", vec![2, 2], wq.to_vec()),
            ("a.k.w", vec![2, 2], wk.to_vec()),
            ("a.v.w", vec![2, 2], wv.to_vec()),
        ]);
        let h0 = [[0.3, -0.7], [1.2, 0.4]];
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, false).unwrap();
        let h = tape.constant(Tensor::from_rows(&[h0[0].to_vec(), h0[1].to_vec()]).unwrap());
        let te = tape.constant(batch.time_embedding(2).unwrap());
        let out = attention_layer(&mut tape, &p, &layer("a"), &batch, h, te, 0).unwrap();

        let te1 = [1f64.sin(), 1f64.cos()];
        let hat0 = [h0[0][0], h0[0][1] + 1.0];
        let hat1 = [h0[1][0] + te1[0], h0[1][1] + te1[1]];
        let mv = |x: [f64; 2], w: [f64; 4]| [x[0] * w[0] + x[1] * w[2], x[0] * w[1] + x[1] * w[3]];
        let q = mv(hat0, wq);
        let k = mv(hat1, wk);
        let v = mv(hat1, wv);
        let alpha = (q[0] * k[0] + q[1] * k[1]) / 2f64.sqrt();
        let expect0 = [h0[0][0] + (alpha * v[0]).max(0.0), h0[0][1] + (alpha * v[1]).max(0.0)];
        let got = tape.value(out);
        assert!((got.at(0, 0) - expect0[0]).abs() < 1e-14);
        assert!((got.at(0, 1) - expect0[1]).abs() < 1e-14);
        // the last frame has no neighbours and is left unchanged
        assert_eq!(got.row(1), &h0[1]);
    }

    #[test]
    fn zero_adjacency_masks_scores() {
        let mut g = build_temporal_graph(&sample(2, 3, true), 3).unwrap();
        for e in &mut g.entries {
            e.2 = 0.0;
        }
        let batch = GraphBatch::new(&[g]).unwrap();
        let s = store(&[
            ("a.q.w", vec![2, 2], vec![3.0, 1.0, -2.0, 5.0]),
            ("a.k.w", vec![2, 2], vec![1.0, 4.0, 2.0, -1.0]),
            ("a.v.w", vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]),
        ]);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, false).unwrap();
        let h0 = Tensor::new(vec![6, 2], (0..12).map(|i| i as f64 * 0.3).collect()).unwrap();
        let h = tape.constant(h0.clone());
        let te = tape.constant(batch.time_embedding(2).unwrap());
        let out = attention_layer(&mut tape, &p, &layer("a"), &batch, h, te, 0).unwrap();
        assert_eq!(tape.value(out), &h0);
    }

    #[test]
    fn zero_summary_gives_zero_context() {
        let g = build_temporal_graph(&sample(3, 4, true), 3).unwrap();
        let batch = GraphBatch::new(&[g]).unwrap();
        let s = store(&[("s.w", vec![2, 2], vec![0.0; 4])]);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, false).unwrap();
        let h = tape.constant(Tensor::filled(vec![9, 2], 0.7));
        let te = tape.constant(batch.time_embedding(2).unwrap());
        let u = summarize_objects(&mut tape, &p, &Linear::existing("s", 2, 2, false), &batch, h, te).unwrap();
        assert_eq!(tape.value(u), &Tensor::zeros(vec![3, 2]));
    }

    #[test]
    fn identity_summary_is_mean_of_relu() {
        let g = build_temporal_graph(&sample(1, 3, true), 3).unwrap();
        let batch = GraphBatch::new(&[g]).unwrap();
        let s = store(&[("s.w", vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])]);
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, false).unwrap();
        let h = tape.constant(Tensor::from_rows(&vec![vec![-0.4, -2.0]; 3]).unwrap());
        let te = tape.constant(batch.time_embedding(2).unwrap());
        let u = summarize_objects(&mut tape, &p, &Linear::existing("s", 2, 2, false), &batch, h, te).unwrap();
        let mut expect = [0.0; 2];
        for t in 0..3 {
            let e = temporal_embedding(t, 2).unwrap();
            expect[0] += (-0.4 + e[0]).max(0.0) / 3.0;
            expect[1] += (-2.0 + e[1]).max(0.0) / 3.0;
        }
        let got = tape.value(u);
        assert!((got.at(0, 0) - expect[0]).abs() < 1e-15);
        assert!((got.at(0, 1) - expect[1]).abs() < 1e-15);
    }

    fn context(samples: &[TrajectorySample], seed: u64) -> (Tensor, Tensor) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let enc = Encoder::init(&mut s, "sys", 4, 2, &mut rng);
        let graphs: Vec<_> = samples.iter().map(|x| build_temporal_graph(x, 3).unwrap()).collect();
        let batch = GraphBatch::new(&graphs).unwrap();
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, false).unwrap();
        let (u, g) = system_context(&mut tape, &p, &enc, &batch).unwrap();
        (tape.value(u).clone(), tape.value(g).clone())
    }

    #[test]
    fn system_context_sums_auxiliary_rows() {
        let (u, g) = context(&[sample(1, 4, true)], 1);
        assert_eq!(u.data(), g.data());

        let (u, g) = context(&[sample(3, 4, true)], 2);
        for c in 0..4 {
            let sum = u.at(0, c) + u.at(1, c) + u.at(2, c);
            assert_eq!(g.at(0, c), sum);
        }
    }

    #[test]
    fn system_context_is_permutation_invariant() {
        let s = sample(3, 4, true);
        let mut p = s.clone();
        p.positions.rotate_left(1);
        p.velocities.rotate_left(1);
        let (_, g1) = context(&[s], 5);
        let (_, g2) = context(&[p], 5);
        assert!(g1.max_abs_diff(&g2) < 1e-12);
    }

    #[test]
    fn zero_heads_give_the_prior() {
        let s = store(&[
            ("h.mean.w", vec![2, 2], vec![0.0; 4]),
            ("h.mean.b", vec![2], vec![0.0; 2]),
            ("h.logvar.w", vec![2, 2], vec![0.0; 4]),
            ("h.logvar.b", vec![2], vec![0.0; 2]),
        ]);
        let heads = PosteriorHeads {
            mean: Linear::existing("h.mean", 2, 2, true),
            log_var: Linear::existing("h.logvar", 2, 2, true),
        };
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, false).unwrap();
        let u = tape.constant(Tensor::filled(vec![3, 2], 4.2));
        let (m, v) = posterior_params(&mut tape, &p, &heads, u).unwrap();
        assert_eq!(tape.value(m), &Tensor::zeros(vec![3, 2]));
        assert_eq!(tape.value(v), &Tensor::ones(vec![3, 2]));
    }

    #[test]
    fn hand_set_scalar_heads() {
        let s = store(&[
            ("h.mean.w", vec![1, 1], vec![2.0]),
            ("h.mean.b", vec![1], vec![0.0]),
            ("h.logvar.w", vec![1, 1], vec![0.0]),
            ("h.logvar.b", vec![1], vec![0.0]),
        ]);
        let heads = PosteriorHeads {
            mean: Linear::existing("h.mean", 1, 1, true),
            log_var: Linear::existing("h.logvar", 1, 1, true),
        };
        let mut tape = Tape::new();
        let p = s.bind(&mut tape, false).unwrap();
        let u = tape.constant(Tensor::new(vec![1, 1], vec![0.5]).unwrap());
        let (m, v) = posterior_params(&mut tape, &p, &heads, u).unwrap();
        assert_eq!(tape.value(m).data(), &[1.0]);
        assert_eq!(tape.value(v).data(), &[1.0]);
    }
}
