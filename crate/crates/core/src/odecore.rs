//! Prototype bank, context-gated mixture vector field, the single-prototype
//! field and a differentiable fixed-step RK4 integrator.

use std::sync::Arc;

use rand::Rng;

use crate::diffcore::{Tape, Tensor, Var};
use crate::nn::{Activation, Bound, Linear, Mlp, ParamStore};
use crate::{Error, Result};

/// Directed interaction pairs over latent nodes: node `recv[e]` aggregates
/// from node `send[e]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionGraph {
    pub recv: Arc<[usize]>,
    pub send: Arc<[usize]>,
    pub n_nodes: usize,
}

impl InteractionGraph {
    /// From a dense matrix: `i` aggregates from every `j ≠ i` with
    /// `edges[i][j] != 0`.
    pub fn from_dense(edges: &[Vec<f64>]) -> Self {
        Self::stack(&[edges])
    }

    /// Disjoint union of several systems, nodes numbered consecutively.
    pub fn stack(systems: &[&[Vec<f64>]]) -> Self {
        let (mut recv, mut send) = (Vec::new(), Vec::new());
        let mut off = 0;
        for edges in systems {
            let n = edges.len();
            for i in 0..n {
                for j in 0..n {
                    if i != j && edges[i][j] != 0.0 {
                        recv.push(off + i);
                        send.push(off + j);
                    }
                }
            }
            off += n;
        }
        InteractionGraph {
            recv: recv.into(),
            send: send.into(),
            n_nodes: off,
        }
    }
}

/// `ρ`: `2d → d → K` feed-forward map followed by a row softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingHead {
    pub mlp: Mlp,
}

impl GatingHead {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, width: usize, k: usize, rng: &mut R) -> Self {
        GatingHead {
            mlp: Mlp::init(
                store,
                prefix,
                &[2 * width, width, k],
                Activation::Relu,
                Activation::Identity,
                rng,
            ),
        }
    }
}

/// `softmax(ρ([u_i, g]))` per object; `g_rows` holds each object's system
/// context. Returns `[objects, K]`.
pub fn gate_weights(tape: &mut Tape, p: &Bound, head: &GatingHead, u: Var, g_rows: Var) -> Result<Var> {
    let x = tape.concat(&[u, g_rows], 1)?;
    let logits = head.mlp.forward(tape, p, x)?;
    tape.softmax(logits)
}

/// `K` relation maps `ψ_r^k: 2d → d` and aggregation maps `ψ_a^k: d → d`,
/// each one linear layer followed by tanh.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub relation: Vec<Linear>,
    pub aggregation: Vec<Linear>,
    pub width: usize,
}

impl PrototypeBank {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, width: usize, k: usize, rng: &mut R) -> Self {
        let mut relation = Vec::with_capacity(k);
        let mut aggregation = Vec::with_capacity(k);
        for i in 0..k {
            relation.push(Linear::init(store, &format!("{prefix}.{i}.rel"), 2 * width, width, true, rng));
            aggregation.push(Linear::init(store, &format!("{prefix}.{i}.agg"), width, width, true, rng));
        }
        PrototypeBank {
            relation,
            aggregation,
            width,
        }
    }

    pub fn k(&self) -> usize {
        self.relation.len()
    }

    /// Stacks the relation maps so one product per side serves all
    /// prototypes: `[z_i, z_j]·W = z_i·W_top + z_j·W_bot`.
    pub fn bind(&self, tape: &mut Tape, p: &Bound) -> Result<BoundBank> {
        let d = self.width;
        if self.relation.is_empty() {
            return Err(Error::Config("prototype bank needs at least one prototype".into()));
        }
        let (mut tops, mut bots, mut biases) = (Vec::new(), Vec::new(), Vec::new());
        for rel in &self.relation {
            let w = p.get(&rel.weight)?;
            tops.push(tape.slice(w, 0, 0, d)?);
            bots.push(tape.slice(w, 0, d, 2 * d)?);
            let b = match &rel.bias {
                Some(b) => p.get(b)?,
                None => tape.constant(Tensor::zeros(vec![d])),
            };
            biases.push(b);
        }
        let w_top = tape.concat(&tops, 1)?;
        let w_bot = tape.concat(&bots, 1)?;
        let b_rel = tape.concat(&biases, 0)?;
        let aggregation = self
            .aggregation
            .iter()
            .map(|a| {
                let w = p.get(&a.weight)?;
                let b = match &a.bias {
                    Some(b) => p.get(b)?,
                    None => tape.constant(Tensor::zeros(vec![d])),
                };
                Ok((w, b))
            })
            .collect::<Result<_>>()?;
        Ok(BoundBank {
            w_top,
            w_bot,
            b_rel,
            aggregation,
            width: d,
        })
    }
}

/// A prototype bank recorded on one tape.
#[derive(Clone, Debug)]
pub struct BoundBank {
    w_top: Var,
    w_bot: Var,
    b_rel: Var,
    aggregation: Vec<(Var, Var)>,
    width: usize,
}

impl BoundBank {
    pub fn k(&self) -> usize {
        self.aggregation.len()
    }

    /// Bank built from one explicit relation pair and aggregation pair.
    pub fn single(tape: &mut Tape, relation: (Var, Var), aggregation: (Var, Var)) -> Result<Self> {
        let (w, b) = relation;
        let d = tape.value(w).cols();
        if tape.value(w).rows() != 2 * d {
            return Err(Error::shape(
                "single_prototype_field",
                format!("relation weight {:?} is not [2d, d]", tape.shape(w)),
            ));
        }
        Ok(BoundBank {
            w_top: tape.slice(w, 0, 0, d)?,
            w_bot: tape.slice(w, 0, d, 2 * d)?,
            b_rel: b,
            aggregation: vec![aggregation],
            width: d,
        })
    }

    /// Per-prototype aggregated responses `ψ_a^k(Σ_j ψ_r^k([z_i, z_j]))`,
    /// each `[nodes, d]`.
    fn responses(&self, tape: &mut Tape, graph: &InteractionGraph, z: Var) -> Result<Vec<Var>> {
        let n = graph.n_nodes;
        let d = self.width;
        let kd = self.k() * d;
        if tape.value(z).dims2() != (n, d) {
            return Err(Error::shape(
                "prototype_field",
                format!("state {:?} vs graph of {n} nodes, width {d}", tape.shape(z)),
            ));
        }
        let top = tape.matmul(z, self.w_top)?;
        let bot = tape.matmul(z, self.w_bot)?;
        let e = graph.recv.len();
        let agg = if e == 0 {
            tape.constant(Tensor::zeros(vec![n, kd]))
        } else {
            let a = tape.gather_rows(top, graph.recv.clone())?;
            let b = tape.gather_rows(bot, graph.send.clone())?;
            let pre = tape.add(a, b)?;
            let bias = tape.broadcast(self.b_rel, e, kd)?;
            let pre = tape.add(pre, bias)?;
            let msg = tape.tanh(pre)?;
            tape.scatter_add_rows(msg, graph.recv.clone(), n)?
        };
        let mut out = Vec::with_capacity(self.k());
        for (k, &(w, b)) in self.aggregation.iter().enumerate() {
            let part = if self.k() == 1 { agg } else { tape.slice(agg, 1, k * d, (k + 1) * d)? };
            let y = tape.matmul(part, w)?;
            let bb = tape.broadcast(b, n, d)?;
            let y = tape.add(y, bb)?;
            out.push(tape.tanh(y)?);
        }
        Ok(out)
    }
}

/// Gate columns expanded to `[nodes, d]`, built once per trajectory.
#[derive(Clone, Debug)]
pub struct GateColumns(Vec<Var>);

impl GateColumns {
    pub fn new(tape: &mut Tape, gates: Var, width: usize) -> Result<Self> {
        let (n, k) = tape.value(gates).dims2();
        let cols = (0..k)
            .map(|i| {
                let c = tape.slice(gates, 1, i, i + 1)?;
                tape.broadcast(c, n, width)
            })
            .collect::<Result<_>>()?;
        Ok(GateColumns(cols))
    }
}

fn check_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {what}")))
    }
}

/// `dz_i/dt = Σ_k w_ik ψ_a^k(Σ_j ψ_r^k([z_i, z_j])) − z_i`, optionally
/// without the recovery term.
pub fn prototype_field(
    tape: &mut Tape,
    bank: &BoundBank,
    graph: &InteractionGraph,
    gates: &GateColumns,
    z: Var,
    recovery: bool,
) -> Result<Var> {
    if gates.0.len() != bank.k() {
        return Err(Error::shape(
            "prototype_field",
            format!("{} gate columns for {} prototypes", gates.0.len(), bank.k()),
        ));
    }
    let parts = bank.responses(tape, graph, z)?;
    let mut acc: Option<Var> = None;
    for (r, &w) in parts.into_iter().zip(&gates.0) {
        let term = tape.mul(w, r)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    let mut out = acc.expect("bank has at least one prototype");
    if recovery {
        out = tape.sub(out, z)?;
    }
    check_finite(tape, out, "vector field")?;
    Ok(out)
}

/// `dz_i/dt = ψ_a(Σ_j ψ_r([z_i, z_j])) − z_i` with one shared pair.
pub fn single_prototype_field(
    tape: &mut Tape,
    bank: &BoundBank,
    graph: &InteractionGraph,
    z: Var,
    recovery: bool,
) -> Result<Var> {
    if bank.k() != 1 {
        return Err(Error::Config(format!("single-prototype field given {} prototypes", bank.k())));
    }
    let mut out = bank.responses(tape, graph, z)?.remove(0);
    if recovery {
        out = tape.sub(out, z)?;
    }
    check_finite(tape, out, "vector field")?;
    Ok(out)
}

/// Classic RK4 with `substeps` equal steps per interval of `times`.
/// Returns the state at every time, starting with `z0`.
pub fn rk4_integrate<F>(tape: &mut Tape, z0: Var, times: &[f64], substeps: usize, mut field: F) -> Result<Vec<Var>>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    if substeps == 0 {
        return Err(Error::Config("substeps must be at least 1".into()));
    }
    if times.is_empty() || times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("integration times must be strictly ascending".into()));
    }
    let mut out = Vec::with_capacity(times.len());
    out.push(z0);
    let mut z = z0;
    for w in times.windows(2) {
        let h = (w[1] - w[0]) / substeps as f64;
        for s in 0..substeps {
            let k1 = field(tape, z)?;
            let a = tape.scale(k1, 0.5 * h)?;
            let z2 = tape.add(z, a)?;
            let k2 = field(tape, z2)?;
            let a = tape.scale(k2, 0.5 * h)?;
            let z3 = tape.add(z, a)?;
            let k3 = field(tape, z3)?;
            let a = tape.scale(k3, h)?;
            let z4 = tape.add(z, a)?;
            let k4 = field(tape, z4)?;
            let k23 = tape.add(k2, k3)?;
            let k23 = tape.scale(k23, 2.0)?;
            let sum = tape.add(k1, k23)?;
            let sum = tape.add(sum, k4)?;
            let inc = tape.scale(sum, h / 6.0)?;
            z = tape.add(z, inc)?;
            if !tape.value(z).is_finite() {
                let t = w[0] + h * (s + 1) as f64;
                return Err(Error::Numeric(format!("non-finite state at t = {t}")));
            }
        }
        out.push(z);
    }
    Ok(out)
}
