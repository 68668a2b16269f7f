//! Decoder, reparameterised sampling, ELBO terms, mutual-information critics
//! and the combined training loss.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::encoder::FEATURE_DIM;
use crate::nn::{Activation, Bound, Linear, Mlp, ParamStore};
use crate::{Error, Result};

/// `φ`: `d → hidden → 4`, ReLU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub mlp: Mlp,
}

impl Decoder {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, width: usize, hidden: usize, rng: &mut R) -> Self {
        Decoder {
            mlp: Mlp::init(
                store,
                prefix,
                &[width, hidden, FEATURE_DIM],
                Activation::Relu,
                Activation::Identity,
                rng,
            ),
        }
    }
}

/// Applies the decoder row-wise to stacked latents.
pub fn decode(tape: &mut Tape, p: &Bound, decoder: &Decoder, z: Var) -> Result<Var> {
    decoder.mlp.forward(tape, p, z)
}

fn require_positive(tape: &Tape, var: Var, op: &str) -> Result<()> {
    if tape.value(var).data().iter().all(|&v| v > 0.0) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{op}: variance must be strictly positive")))
    }
}

/// `mean + sqrt(var) ⊙ noise`; `noise` is a fixed standard-normal draw, so
/// gradients reach `mean` and `var` only.
pub fn reparameterize(tape: &mut Tape, mean: Var, var: Var, noise: &Tensor) -> Result<Var> {
    require_positive(tape, var, "reparameterize")?;
    let sd = tape.sqrt(var)?;
    let eps = tape.constant(noise.clone());
    let step = tape.mul(sd, eps)?;
    tape.add(mean, step)
}

/// `Σ ½(var + mean² − 1 − log var)`: KL from `N(mean, var)` to `N(0, 1)`.
pub fn gaussian_kl(tape: &mut Tape, mean: Var, var: Var) -> Result<Var> {
    require_positive(tape, var, "gaussian_kl")?;
    let m2 = tape.mul(mean, mean)?;
    let lv = tape.log(var)?;
    let a = tape.add(var, m2)?;
    let a = tape.sub(a, lv)?;
    let a = tape.add_scalar(a, -1.0)?;
    let s = tape.sum(a)?;
    tape.scale(s, 0.5)
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
#[serde(default)]
pub struct LossConfig {
    /// Observation variance `σ²`.
    pub sigma2: f64,
    pub kl_weight: f64,
    pub sys_weight: f64,
    pub dis_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            sigma2: 1.0,
            kl_weight: 1.0,
            sys_weight: 1.0,
            dis_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return Err(Error::Config(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        Ok(())
    }
}

/// `Σ ||x − μ||²/(2σ²) + kl_weight · KL(mean, var)`.
pub fn elbo_loss(tape: &mut Tape, pred: Var, truth: Var, mean: Var, var: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let diff = tape.sub(truth, pred)?;
    let sq = tape.mul(diff, diff)?;
    let rec = tape.sum(sq)?;
    let rec = tape.scale(rec, 0.5 / cfg.sigma2)?;
    let kl = gaussian_kl(tape, mean, var)?;
    let kl = tape.scale(kl, cfg.kl_weight)?;
    tape.add(rec, kl)
}

/// Critic outputs are bounded: both estimators are unbounded in `T` once a
/// constant score can be pushed without limit.
pub const CRITIC_BOUND: f64 = 5.0;

/// Scalar critic on a pair `[left, right]`: one hidden ReLU layer and a
/// linear read-out. The first layer is stored split by input so pair
/// scores reuse per-row products.
#[derive(Clone, Debug, PartialEq)]
pub struct PairCritic {
    pub left: Linear,
    pub right: Linear,
    pub out: Linear,
}

impl PairCritic {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        left_dim: usize,
        right_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        // split rows of a single (left+right) × hidden layer
        let bound = 1.0 / ((left_dim + right_dim) as f64).sqrt();
        let mut mk = |name: &str, rows: usize, bias: bool| {
            let l = Linear::existing(&format!("{prefix}.{name}"), rows, hidden, bias);
            store.insert(l.weight.clone(), Tensor::uniform(vec![rows, hidden], bound, rng));
            if let Some(b) = &l.bias {
                store.insert(b.clone(), Tensor::uniform(vec![hidden], bound, rng));
            }
            l
        };
        let left = mk("l", left_dim, false);
        let right = mk("r", right_dim, true);
        let out = Linear::init(store, &format!("{prefix}.out"), hidden, 1, true, rng);
        PairCritic { left, right, out }
    }

    /// Scores `T(left[li[e]], right[ri[e]])` for every pair `e`, as `[E, 1]`,
    /// squashed into `(-CRITIC_BOUND, CRITIC_BOUND)`.
    pub fn score_pairs(
        &self,
        tape: &mut Tape,
        p: &Bound,
        left: Var,
        right: Var,
        li: Arc<[usize]>,
        ri: Arc<[usize]>,
    ) -> Result<Var> {
        let a = self.left.forward(tape, p, left)?;
        let b = self.right.forward(tape, p, right)?;
        let a = tape.gather_rows(a, li)?;
        let b = tape.gather_rows(b, ri)?;
        let h = tape.add(a, b)?;
        let h = tape.relu(h)?;
        let raw = self.out.forward(tape, p, h)?;
        let t = tape.scale(raw, 1.0 / CRITIC_BOUND)?;
        let t = tape.tanh(t)?;
        tape.scale(t, CRITIC_BOUND)
    }
}

/// Both critics: `T_γ` on `[g, ξ]` and `T_γ′` on `[g, u_i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Critics {
    pub system: PairCritic,
    pub disentangle: PairCritic,
}

impl Critics {
    pub const SYSTEM_PREFIX: &'static str = "critic.sys";
    pub const DISENTANGLE_PREFIX: &'static str = "critic.dis";

    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, width: usize, hidden: usize, rng: &mut R) -> Self {
        Critics {
            system: PairCritic::init(store, Self::SYSTEM_PREFIX, width, 4, hidden, rng),
            disentangle: PairCritic::init(store, Self::DISENTANGLE_PREFIX, width, width, hidden, rng),
        }
    }
}

/// Batch-level mutual-information terms.
#[derive(Clone, Copy, Debug)]
pub struct MiLosses {
    pub sys: Var,
    /// Inner value of the disentanglement objective: descended by the
    /// model, ascended by its critic.
    pub dis: Var,
}

fn weighted_softplus_sum(tape: &mut Tape, scores: Var, coef: Vec<f64>) -> Result<Var> {
    let n = coef.len();
    let neg = tape.neg(scores)?;
    let sp = tape.softplus(neg)?;
    let c = tape.constant(Tensor::new(vec![n, 1], coef)?);
    let w = tape.mul(sp, c)?;
    tape.sum(w)
}

/// `L_sys` over all `B²` pairs of `(g_a, ξ_b)`. Matched pairs are positives.
pub fn system_mi(tape: &mut Tape, p: &Bound, critic: &PairCritic, g: Var, xi: Var) -> Result<Var> {
    let b = tape.value(g).rows();
    if b < 2 {
        return Err(Error::Config(format!("mutual-information losses need a batch of at least 2, got {b}")));
    }
    let (mut li, mut ri, mut coef) = (Vec::new(), Vec::new(), Vec::new());
    let bf = b as f64;
    for x in 0..b {
        for y in 0..b {
            li.push(x);
            ri.push(y);
            coef.push(if x == y { -1.0 / bf } else { 1.0 / (bf * bf) });
        }
    }
    let t = critic.score_pairs(tape, p, g, xi, li.into(), ri.into())?;
    weighted_softplus_sum(tape, t, coef)
}

/// Inner disentanglement value over all `(g_b, u_i)` pairs. Pairs where
/// object `i` belongs to sample `b` are positives.
pub fn disentangle_mi(
    tape: &mut Tape,
    p: &Bound,
    critic: &PairCritic,
    g: Var,
    u: Var,
    object_sample: &[usize],
) -> Result<Var> {
    let b = tape.value(g).rows();
    let n = tape.value(u).rows();
    if b < 2 {
        return Err(Error::Config(format!("mutual-information losses need a batch of at least 2, got {b}")));
    }
    if object_sample.len() != n {
        return Err(Error::shape("disentangle_mi", format!("{} owners for {n} objects", object_sample.len())));
    }
    let (mut li, mut ri, mut coef) = (Vec::new(), Vec::new(), Vec::new());
    let pos = n as f64;
    for x in 0..b {
        for (i, &owner) in object_sample.iter().enumerate() {
            li.push(x);
            ri.push(i);
            coef.push(if owner == x { 1.0 / pos } else { -1.0 / (pos * b as f64) });
        }
    }
    let t = critic.score_pairs(tape, p, g, u, li.into(), ri.into())?;
    weighted_softplus_sum(tape, t, coef)
}

pub fn mi_losses(
    tape: &mut Tape,
    p: &Bound,
    critics: &Critics,
    g: Var,
    xi: Var,
    u: Var,
    object_sample: &[usize],
) -> Result<MiLosses> {
    Ok(MiLosses {
        sys: system_mi(tape, p, &critics.system, g, xi)?,
        dis: disentangle_mi(tape, p, &critics.disentangle, g, u, object_sample)?,
    })
}

/// Which model components are active.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(default)]
pub struct AblationFlags {
    pub use_object_ctx: bool,
    pub use_system_ctx: bool,
    pub multi_prototype: bool,
    pub use_disentangle: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Variant::Full.flags()
    }
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if !self.use_object_ctx && !self.use_system_ctx {
            return Err(Error::Config("at least one of the object and system contexts must be on".into()));
        }
        Ok(())
    }

    /// Whether any critic loss is computed.
    pub fn uses_mi(&self) -> bool {
        self.use_system_ctx || self.use_disentangle
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "w/o O")]
    NoObject,
    #[serde(rename = "w/o eps")]
    NoSystem,
    #[serde(rename = "w/o F")]
    NoPrototypes,
    #[serde(rename = "w/o D")]
    NoDisentangle,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoObject,
        Variant::NoSystem,
        Variant::NoPrototypes,
        Variant::NoDisentangle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoObject => "w/o O",
            Variant::NoSystem => "w/o eps",
            Variant::NoPrototypes => "w/o F",
            Variant::NoDisentangle => "w/o D",
        }
    }

    pub fn flags(self) -> AblationFlags {
        let mut f = AblationFlags {
            use_object_ctx: true,
            use_system_ctx: true,
            multi_prototype: true,
            use_disentangle: true,
        };
        match self {
            Variant::Full => {}
            Variant::NoObject => f.use_object_ctx = false,
            Variant::NoSystem => f.use_system_ctx = false,
            Variant::NoPrototypes => f.multi_prototype = false,
            Variant::NoDisentangle => f.use_disentangle = false,
        }
        f
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['/', ' ', '_', '-'], "");
        match key.as_str() {
            "full" => Ok(Variant::Full),
            "woo" | "noobject" => Ok(Variant::NoObject),
            "woeps" | "woe" | "nosystem" => Ok(Variant::NoSystem),
            "wof" | "noprototypes" => Ok(Variant::NoPrototypes),
            "wod" | "nodisentangle" => Ok(Variant::NoDisentangle),
            _ => Err(Error::Config(format!("unknown variant {s:?}"))),
        }
    }
}

/// Loss terms of one batch; MI terms are absent when not computed.
#[derive(Clone, Copy, Debug)]
pub struct LossComponents {
    pub elbo: Var,
    pub sys: Option<Var>,
    pub dis: Option<Var>,
}

/// `L_elbo + L_sys + L_dis`, dropping `L_sys` without the system context and
/// `L_dis` without disentanglement.
pub fn total_loss(tape: &mut Tape, c: &LossComponents, flags: &AblationFlags, cfg: &LossConfig) -> Result<Var> {
    let mut total = c.elbo;
    let terms = [
        (c.sys, flags.use_system_ctx, cfg.sys_weight),
        (c.dis, flags.use_disentangle, cfg.dis_weight),
    ];
    for (term, on, w) in terms {
        if let (Some(v), true) = (term, on) {
            if w != 0.0 {
                let s = tape.scale(v, w)?;
                total = tape.add(total, s)?;
            }
        }
    }
    if !tape.value(total).is_finite() {
        return Err(Error::Numeric("non-finite total loss".into()));
    }
    Ok(total)
}
