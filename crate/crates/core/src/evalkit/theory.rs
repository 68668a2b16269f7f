use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::nn::{Linear, ParamStore};
use crate::odecore::{prototype_field, rk4_integrate, single_prototype_field, GateColumns, InteractionGraph, PrototypeBank};
use crate::{Error, Result};

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(default)]
pub struct TheoryConfig {
    /// Norm of the initial perturbation.
    pub epsilon: f64,
    pub seeds: usize,
    pub seed: u64,
    pub horizon: f64,
    pub k: usize,
    pub n_objects: usize,
    pub width: usize,
    /// Lipschitz product `L_a^k·L_r^k` of every prototype.
    pub prototype_lipschitz: f64,
    /// The single network's product is this multiple of the prototypes'.
    pub single_scale: f64,
    /// RK4 steps over the horizon.
    pub steps: usize,
    /// Recorded points after `t = 0`.
    pub record: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        TheoryConfig {
            epsilon: 1e-3,
            seeds: 20,
            seed: 0,
            horizon: 1.0,
            k: 3,
            n_objects: 5,
            width: 16,
            prototype_lipschitz: 1.0,
            single_scale: 2.0,
            steps: 40,
            record: 10,
        }
    }
}

impl TheoryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !(self.horizon > 0.0) {
            return Err(Error::Config("epsilon must be nonnegative and horizon positive".into()));
        }
        if !(self.prototype_lipschitz > 0.0) || !(self.single_scale > 0.0) {
            return Err(Error::Config("Lipschitz targets must be positive".into()));
        }
        if self.seeds == 0 || self.k == 0 || self.n_objects == 0 || self.width == 0 {
            return Err(Error::Config("seeds, k, n_objects and width must be positive".into()));
        }
        if self.record == 0 || self.steps < self.record || !self.steps.is_multiple_of(self.record) {
            return Err(Error::Config("steps must be a positive multiple of record".into()));
        }
        Ok(())
    }
}

/// `V(t) = ||e^t||²/2` for both systems at the recorded times.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct SeedSeries {
    pub seed: u64,
    pub times: Vec<f64>,
    pub v_multi: Vec<f64>,
    pub v_single: Vec<f64>,
    pub lipschitz_prototypes: Vec<f64>,
    pub lipschitz_single: f64,
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct LyapunovReport {
    /// `"pass"`, `"fail"` or `"premise not met"`.
    pub status: String,
    /// Absent when the premise does not hold.
    pub verdict: Option<bool>,
    pub mean_multi: f64,
    pub var_multi: f64,
    pub mean_single: f64,
    pub var_single: f64,
    pub mean_lipschitz_prototypes: f64,
    pub mean_lipschitz_single: f64,
    pub config: TheoryConfig,
    pub per_seed: Vec<SeedSeries>,
}

/// Largest singular value by power iteration on `WᵀW`.
pub fn power_iteration(w: &Tensor, iters: usize) -> f64 {
    let (r, c) = w.dims2();
    let mut x: Vec<f64> = (0..c).map(|i| 1.0 + 0.01 * i as f64).collect();
    let mut sigma = 0.0;
    for _ in 0..iters {
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        x.iter_mut().for_each(|v| *v /= norm);
        let y: Vec<f64> = (0..r).map(|i| w.row(i).iter().zip(&x).map(|(a, b)| a * b).sum()).collect();
        sigma = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut z = vec![0.0; c];
        for (i, yi) in y.iter().enumerate() {
            for (zj, a) in z.iter_mut().zip(w.row(i)) {
                *zj += a * yi;
            }
        }
        x = z;
    }
    sigma
}

fn scaled_gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, target: f64, rng: &mut R) -> Tensor {
    let t = Tensor::randn(vec![rows, cols], 1.0, rng);
    let s = power_iteration(&t, 300);
    t.map(|x| x * target / s)
}

/// `k` random prototypes whose relation and aggregation weights each have
/// spectral norm `sqrt(lipschitz)`, so every product `L_a·L_r` equals
/// `lipschitz`. Biases are small Gaussians.
pub fn random_bank<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    width: usize,
    k: usize,
    lipschitz: f64,
    rng: &mut R,
) -> PrototypeBank {
    let side = lipschitz.sqrt();
    let mut relation = Vec::with_capacity(k);
    let mut aggregation = Vec::with_capacity(k);
    for i in 0..k {
        let rel = Linear::existing(&format!("{prefix}.{i}.rel"), 2 * width, width, true);
        let agg = Linear::existing(&format!("{prefix}.{i}.agg"), width, width, true);
        store.insert(rel.weight.clone(), scaled_gaussian(2 * width, width, side, rng));
        store.insert(rel.bias.clone().unwrap(), Tensor::randn(vec![width], 0.1, rng));
        store.insert(agg.weight.clone(), scaled_gaussian(width, width, side, rng));
        store.insert(agg.bias.clone().unwrap(), Tensor::randn(vec![width], 0.1, rng));
        relation.push(rel);
        aggregation.push(agg);
    }
    PrototypeBank {
        relation,
        aggregation,
        width,
    }
}

fn lipschitz_products(store: &ParamStore, bank: &PrototypeBank) -> Vec<f64> {
    bank.relation
        .iter()
        .zip(&bank.aggregation)
        .map(|(r, a)| {
            power_iteration(store.get(&r.weight).unwrap(), 300) * power_iteration(store.get(&a.weight).unwrap(), 300)
        })
        .collect()
}

fn fully_connected(n: usize) -> InteractionGraph {
    let edges: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
        .collect();
    InteractionGraph::from_dense(&edges)
}

fn random_simplex<R: Rng + ?Sized>(rows: usize, k: usize, rng: &mut R) -> Tensor {
    let mut data = Vec::with_capacity(rows * k);
    for _ in 0..rows {
        // normalised exponentials are uniform on the simplex
        let e: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let s: f64 = e.iter().sum();
        data.extend(e.iter().map(|x| x / s));
    }
    Tensor::from_parts(vec![rows, k], data)
}

/// Integrates a constant-parameter field and returns states at `times`.
fn rollout<F>(z0: &Tensor, times: &[f64], substeps: usize, mut field: F) -> Result<Vec<Tensor>>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let z = tape.constant(z0.clone());
    let traj = rk4_integrate(&mut tape, z, times, substeps, &mut field)?;
    Ok(traj.into_iter().map(|v| tape.value(v).clone()).collect())
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
}

/// Perturbation growth of a gated `K`-prototype field against a single
/// field with a larger Lipschitz product, both without the recovery term.
/// Each seed draws fresh banks, gates, `Z⁰` and a perturbation of norm
/// `epsilon`, and records `V(t) = ||e^t||²/2`.
pub fn lyapunov_harness(cfg: &TheoryConfig) -> Result<LyapunovReport> {
    cfg.validate()?;
    let n = cfg.n_objects;
    let d = cfg.width;
    let graph = fully_connected(n);
    let dt = cfg.horizon / cfg.record as f64;
    let times: Vec<f64> = (0..=cfg.record).map(|i| i as f64 * dt).collect();
    let substeps = cfg.steps / cfg.record;

    let mut per_seed = Vec::with_capacity(cfg.seeds);
    let mut premise = true;
    for s in 0..cfg.seeds {
        let seed = cfg.seed.wrapping_add(s as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let multi = random_bank(&mut store, "multi", d, cfg.k, cfg.prototype_lipschitz, &mut rng);
        let single = random_bank(
            &mut store,
            "single",
            d,
            1,
            cfg.prototype_lipschitz * cfg.single_scale,
            &mut rng,
        );
        let gates = random_simplex(n, cfg.k, &mut rng);
        let z0 = Tensor::randn(vec![n, d], 1.0, &mut rng);
        let mut delta = Tensor::randn(vec![n, d], 1.0, &mut rng);
        let norm = delta.norm();
        let scale = if norm > 0.0 { cfg.epsilon / norm } else { 0.0 };
        delta.data_mut().iter_mut().for_each(|x| *x *= scale);
        let z1 = z0.zip_map(&delta, |a, b| a + b)?;

        let lip_multi = lipschitz_products(&store, &multi);
        let lip_single = lipschitz_products(&store, &single)[0];
        let mean_multi = lip_multi.iter().sum::<f64>() / lip_multi.len() as f64;
        premise &= mean_multi < lip_single;

        let multi_field = |start: &Tensor| {
            rollout(start, &times, substeps, |tape, z| {
                let p = store.bind(tape, false)?;
                let bank = multi.bind(tape, &p)?;
                let g = tape.constant(gates.clone());
                let cols = GateColumns::new(tape, g, d)?;
                prototype_field(tape, &bank, &graph, &cols, z, false)
            })
        };
        let single_field = |start: &Tensor| {
            rollout(start, &times, substeps, |tape, z| {
                let p = store.bind(tape, false)?;
                let bank = single.bind(tape, &p)?;
                single_prototype_field(tape, &bank, &graph, z, false)
            })
        };
        let energy = |a: &[Tensor], b: &[Tensor]| -> Vec<f64> {
            a.iter()
                .zip(b)
                .map(|(x, y)| 0.5 * x.data().iter().zip(y.data()).map(|(p, q)| (q - p).powi(2)).sum::<f64>())
                .collect()
        };
        let v_multi = energy(&multi_field(&z0)?, &multi_field(&z1)?);
        let v_single = energy(&single_field(&z0)?, &single_field(&z1)?);
        per_seed.push(SeedSeries {
            seed,
            times: times.clone(),
            v_multi,
            v_single,
            lipschitz_prototypes: lip_multi,
            lipschitz_single: lip_single,
        });
    }

    let last = |f: fn(&SeedSeries) -> &Vec<f64>| per_seed.iter().map(|s| *f(s).last().unwrap()).collect::<Vec<f64>>();
    let (mean_multi, var_multi) = mean_var(&last(|s| &s.v_multi));
    let (mean_single, var_single) = mean_var(&last(|s| &s.v_single));
    let lp: Vec<f64> = per_seed.iter().flat_map(|s| s.lipschitz_prototypes.iter().copied()).collect();
    let ls: Vec<f64> = per_seed.iter().map(|s| s.lipschitz_single).collect();
    let mean_lp = mean_var(&lp).0;
    let mean_ls = mean_var(&ls).0;
    let premise = premise && mean_lp < mean_ls;
    let verdict = premise.then_some(mean_multi <= mean_single && var_multi <= var_single);
    let status = match verdict {
        None => "premise not met",
        Some(true) => "pass",
        Some(false) => "fail",
    };
    Ok(LyapunovReport {
        status: status.to_string(),
        verdict,
        mean_multi,
        var_multi,
        mean_single,
        var_single,
        mean_lipschitz_prototypes: mean_lp,
        mean_lipschitz_single: mean_ls,
        config: cfg.clone(),
        per_seed,
    })
}

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct UniquenessReport {
    pub substeps: Vec<usize>,
    /// Max-norm difference between final states at successive refinements.
    pub differences: Vec<f64>,
    /// Empirical order from the finest pair of differences above `floor`.
    pub order: Option<f64>,
    /// Differences below this are treated as round-off.
    pub floor: f64,
    pub pass: bool,
    pub note: String,
}

/// Integrates `field` over `[0, horizon]` with 1, 2, 4, 8 and 16 RK4 steps
/// and checks that successive solutions contract at fourth order.
pub fn uniqueness_check<F>(mut field: F, z0: &Tensor, horizon: f64) -> Result<UniquenessReport>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    if !(horizon > 0.0) {
        return Err(Error::Config("horizon must be positive".into()));
    }
    let substeps = vec![1, 2, 4, 8, 16];
    let mut finals = Vec::new();
    for &s in &substeps {
        match rollout(z0, &[0.0, horizon], s, &mut field) {
            Ok(mut traj) => finals.push(traj.pop().unwrap()),
            Err(Error::Numeric(m)) => {
                let differences = finals.windows(2).map(|w: &[Tensor]| w[0].max_abs_diff(&w[1])).collect();
                return Ok(UniquenessReport {
                    substeps,
                    differences,
                    order: None,
                    floor: 0.0,
                    pass: false,
                    note: format!("diverged with {s} substeps: {m}"),
                });
            }
            Err(e) => return Err(e),
        }
    }
    let differences: Vec<f64> = finals.windows(2).map(|w| w[0].max_abs_diff(&w[1])).collect();
    let scale = finals.iter().map(Tensor::max_abs).fold(1.0, f64::max);
    let floor = 1e-11 * scale;
    let monotone = differences.windows(2).all(|w| w[1] <= w[0] || w[1] <= floor);
    let order = differences
        .windows(2)
        .rev()
        .find(|w| w[0] > floor && w[1] > floor)
        .map(|w| (w[0] / w[1]).log2());
    let pass = monotone && order.is_none_or(|o| o >= 3.5);
    let note = match (pass, order) {
        (true, Some(o)) => format!("contracting, empirical order {o:.3}"),
        (true, None) => "all refinements agree to round-off".to_string(),
        (false, _) if !monotone => "differences do not contract monotonically".to_string(),
        (false, o) => format!("empirical order {:.3} below 3.5", o.unwrap_or(f64::NAN)),
    };
    Ok(UniquenessReport {
        substeps,
        differences,
        order,
        floor,
        pass,
        note,
    })
}
