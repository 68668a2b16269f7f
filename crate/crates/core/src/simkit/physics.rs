use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Split, System, SystemParams, TrajectorySample};
use crate::{Error, Result};

/// Integrator and initial-state settings shared by both systems.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
pub struct SimConfig {
    /// Leapfrog step.
    pub dt: f64,
    /// Inner steps between recorded frames.
    pub subsample: usize,
    /// Distance clamp in the charged force law.
    pub r_min: f64,
    /// Standard deviation of initial positions, per coordinate.
    pub init_pos_std: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 0.001,
            subsample: 100,
            r_min: 0.1,
            init_pos_std: 0.5,
        }
    }
}

impl SimConfig {
    /// Simulation time between two recorded frames.
    pub fn frame_dt(&self) -> f64 {
        self.dt * self.subsample as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) || self.subsample == 0 {
            return Err(Error::Config("dt must be positive and subsample at least 1".into()));
        }
        if !(self.r_min > 0.0) || !(self.init_pos_std >= 0.0) {
            return Err(Error::Config("r_min must be positive, init_pos_std nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ForceLaw {
    /// Zero-rest-length springs of constant `strength` on every nonzero edge.
    Springs { edges: Vec<Vec<f64>>, strength: f64 },
    /// Inverse-square interaction between signed charges.
    Charged {
        charges: Vec<f64>,
        strength: f64,
        r_min: f64,
    },
}

impl ForceLaw {
    fn n_objects(&self) -> usize {
        match self {
            ForceLaw::Springs { edges, .. } => edges.len(),
            ForceLaw::Charged { charges, .. } => charges.len(),
        }
    }

    fn forces(&self, q: &[[f64; 2]], out: &mut [[f64; 2]]) {
        match self {
            ForceLaw::Springs { edges, strength } => springs_forces(q, edges, *strength, out),
            ForceLaw::Charged {
                charges,
                strength,
                r_min,
            } => charged_forces(q, charges, *strength, *r_min, out),
        }
    }
}

fn springs_forces(q: &[[f64; 2]], edges: &[Vec<f64>], k: f64, out: &mut [[f64; 2]]) {
    out.iter_mut().for_each(|f| *f = [0.0; 2]);
    for i in 0..q.len() {
        for j in i + 1..q.len() {
            if edges[i][j] == 0.0 {
                continue;
            }
            for c in 0..2 {
                let f = -k * (q[i][c] - q[j][c]);
                out[i][c] += f;
                out[j][c] -= f;
            }
        }
    }
}

/// Pairwise force `strength·c_i·c_j·(q_i − q_j)/max(r, r_min)³`, accumulated
/// so that each pair contributes exactly opposite vectors.
pub fn charged_forces(q: &[[f64; 2]], charges: &[f64], strength: f64, r_min: f64, out: &mut [[f64; 2]]) {
    out.iter_mut().for_each(|f| *f = [0.0; 2]);
    for i in 0..q.len() {
        for j in i + 1..q.len() {
            let d = [q[i][0] - q[j][0], q[i][1] - q[j][1]];
            let r = (d[0] * d[0] + d[1] * d[1]).sqrt().max(r_min);
            let s = strength * charges[i] * charges[j] / (r * r * r);
            for c in 0..2 {
                out[i][c] += s * d[c];
                out[j][c] -= s * d[c];
            }
        }
    }
}

/// Recorded trajectory, indexed `[object][frame]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub positions: Vec<Vec<[f64; 2]>>,
    pub velocities: Vec<Vec<[f64; 2]>>,
    /// Number of wall reflections over the whole run.
    pub wall_contacts: usize,
}

fn reflect(q: &mut [f64; 2], v: &mut [f64; 2], alpha: f64) -> usize {
    let mut hits = 0;
    for c in 0..2 {
        // a fold may be needed more than once for very fast objects
        while q[c].is_finite() && (q[c] > alpha || q[c] < -alpha) {
            q[c] = if q[c] > alpha { 2.0 * alpha - q[c] } else { -2.0 * alpha - q[c] };
            v[c] = -v[c];
            hits += 1;
        }
    }
    hits
}

/// Kick-drift-kick leapfrog with unit masses and elastic walls at `±alpha`.
/// Frame 0 is the initial state; each later frame is `cfg.subsample` steps
/// after the previous one.
pub fn integrate(
    law: &ForceLaw,
    alpha: f64,
    q0: &[[f64; 2]],
    v0: &[[f64; 2]],
    n_frames: usize,
    cfg: &SimConfig,
) -> Result<Rollout> {
    let n = law.n_objects();
    if q0.len() != n || v0.len() != n {
        return Err(Error::Config(format!(
            "initial state has {} positions and {} velocities for {n} objects",
            q0.len(),
            v0.len()
        )));
    }
    cfg.validate()?;
    let dt = cfg.dt;
    let mut q = q0.to_vec();
    let mut v = v0.to_vec();
    let mut a = vec![[0.0; 2]; n];
    law.forces(&q, &mut a);

    let mut positions = vec![Vec::with_capacity(n_frames); n];
    let mut velocities = vec![Vec::with_capacity(n_frames); n];
    let mut wall_contacts = 0;
    let record = |q: &[[f64; 2]], v: &[[f64; 2]], p: &mut Vec<Vec<[f64; 2]>>, w: &mut Vec<Vec<[f64; 2]>>| {
        for i in 0..n {
            p[i].push(q[i]);
            w[i].push(v[i]);
        }
    };
    if n_frames > 0 {
        record(&q, &v, &mut positions, &mut velocities);
    }
    let total = n_frames.saturating_sub(1) * cfg.subsample;
    for step in 1..=total {
        for i in 0..n {
            for c in 0..2 {
                v[i][c] += 0.5 * dt * a[i][c];
                q[i][c] += dt * v[i][c];
            }
            wall_contacts += reflect(&mut q[i], &mut v[i], alpha);
        }
        law.forces(&q, &mut a);
        for i in 0..n {
            for c in 0..2 {
                v[i][c] += 0.5 * dt * a[i][c];
            }
        }
        if q.iter().chain(&v).flatten().any(|x| !x.is_finite()) {
            return Err(Error::Simulation {
                step,
                reason: "non-finite state".into(),
            });
        }
        if step % cfg.subsample == 0 {
            record(&q, &v, &mut positions, &mut velocities);
        }
    }
    Ok(Rollout {
        positions,
        velocities,
        wall_contacts,
    })
}

/// Kinetic plus spring potential energy, unit masses.
pub fn springs_energy(q: &[[f64; 2]], v: &[[f64; 2]], edges: &[Vec<f64>], strength: f64) -> f64 {
    let kinetic: f64 = v.iter().map(|w| 0.5 * (w[0] * w[0] + w[1] * w[1])).sum();
    let mut potential = 0.0;
    for i in 0..q.len() {
        for j in i + 1..q.len() {
            if edges[i][j] != 0.0 {
                let dx = q[i][0] - q[j][0];
                let dy = q[i][1] - q[j][1];
                potential += 0.5 * strength * (dx * dx + dy * dy);
            }
        }
    }
    kinetic + potential
}

/// Total momentum, unit masses.
pub fn momentum(v: &[[f64; 2]]) -> [f64; 2] {
    v.iter().fold([0.0; 2], |m, w| [m[0] + w[0], m[1] + w[1]])
}

fn initial_state<R: Rng + ?Sized>(
    params: &SystemParams,
    n: usize,
    cfg: &SimConfig,
    rng: &mut R,
) -> Result<(Vec<[f64; 2]>, Vec<[f64; 2]>)> {
    let normal = Normal::new(0.0, cfg.init_pos_std).map_err(|e| Error::Config(e.to_string()))?;
    let q = (0..n).map(|_| [normal.sample(rng), normal.sample(rng)]).collect();
    let v = (0..n)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            [params.beta * theta.cos(), params.beta * theta.sin()]
        })
        .collect();
    Ok((q, v))
}

fn check_sizes(params: &SystemParams, n: usize, n_frames: usize) -> Result<()> {
    params.validate()?;
    if n < 1 || n_frames < 2 {
        return Err(Error::Config(format!(
            "need at least 1 object and 2 frames, got {n} and {n_frames}"
        )));
    }
    Ok(())
}

fn into_sample(params: SystemParams, edges: Vec<Vec<f64>>, n_frames: usize, r: Rollout) -> TrajectorySample {
    TrajectorySample {
        id: String::new(),
        split: Split::Train,
        params,
        n_objects: edges.len(),
        n_frames,
        positions: r.positions,
        velocities: r.velocities,
        edges,
    }
}

/// Springs system with Bernoulli(delta) edges per unordered pair. The
/// returned sample has an empty id and the `train` tag.
pub fn simulate_springs<R: Rng + ?Sized>(
    params: &SystemParams,
    n_objects: usize,
    n_frames: usize,
    cfg: &SimConfig,
    rng: &mut R,
) -> Result<TrajectorySample> {
    check_sizes(params, n_objects, n_frames)?;
    let mut edges = vec![vec![0.0; n_objects]; n_objects];
    for i in 0..n_objects {
        for j in i + 1..n_objects {
            if rng.random_bool(params.delta) {
                edges[i][j] = 1.0;
                edges[j][i] = 1.0;
            }
        }
    }
    let (q0, v0) = initial_state(params, n_objects, cfg, rng)?;
    let law = ForceLaw::Springs {
        edges: edges.clone(),
        strength: params.gamma_strength,
    };
    let r = integrate(&law, params.alpha, &q0, &v0, n_frames, cfg)?;
    Ok(into_sample(*params, edges, n_frames, r))
}

/// Charged system: charge +1 with probability delta, else −1. The
/// model-facing graph is fully connected.
pub fn simulate_charged<R: Rng + ?Sized>(
    params: &SystemParams,
    n_objects: usize,
    n_frames: usize,
    cfg: &SimConfig,
    rng: &mut R,
) -> Result<TrajectorySample> {
    check_sizes(params, n_objects, n_frames)?;
    let charges: Vec<f64> = (0..n_objects)
        .map(|_| if rng.random_bool(params.delta) { 1.0 } else { -1.0 })
        .collect();
    let (q0, v0) = initial_state(params, n_objects, cfg, rng)?;
    let law = ForceLaw::Charged {
        charges,
        strength: params.gamma_strength,
        r_min: cfg.r_min,
    };
    let r = integrate(&law, params.alpha, &q0, &v0, n_frames, cfg)?;
    let edges = (0..n_objects)
        .map(|i| (0..n_objects).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
        .collect();
    Ok(into_sample(*params, edges, n_frames, r))
}

pub fn simulate<R: Rng + ?Sized>(
    system: System,
    params: &SystemParams,
    n_objects: usize,
    n_frames: usize,
    cfg: &SimConfig,
    rng: &mut R,
) -> Result<TrajectorySample> {
    match system {
        System::Springs => simulate_springs(params, n_objects, n_frames, cfg, rng),
        System::Charged => simulate_charged(params, n_objects, n_frames, cfg, rng),
    }
}
