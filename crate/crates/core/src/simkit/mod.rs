//! Springs and Charged trajectory simulators with in-distribution and
//! out-of-distribution parameter splits.

mod dataset;
mod physics;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use dataset::{
    build_dataset, load_manifest, load_split, sample_stream, DatasetManifest, MANIFEST_FILE,
};
pub use physics::{
    charged_forces, integrate, momentum, simulate, simulate_charged, simulate_springs,
    springs_energy, ForceLaw, Rollout, SimConfig,
};

/// Rejection sampling budget for out-of-distribution draws.
pub const MAX_OOD_TRIES: usize = 10_000;

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[serde(rename_all = "lowercase")]
pub enum System {
    Springs,
    Charged,
}

impl std::str::FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "springs" => Ok(System::Springs),
            "charged" => Ok(System::Charged),
            other => Err(Error::Config(format!("unknown system {other:?}"))),
        }
    }
}

impl std::fmt::Display for System {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            System::Springs => "springs",
            System::Charged => "charged",
        })
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    TestId,
    TestOod,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::TestId, Split::TestOod];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::TestId => "test_id",
            Split::TestOod => "test_ood",
        }
    }

    fn code(self) -> u64 {
        self as u64
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

/// Time-invariant generative knobs of one simulated system.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
pub struct SystemParams {
    /// Half-width of the square box.
    pub alpha: f64,
    /// Initial speed of every object.
    pub beta: f64,
    /// Spring constant or Coulomb-like coupling.
    #[serde(rename = "gamma")]
    pub gamma_strength: f64,
    /// Edge probability (springs) or probability of a positive charge.
    pub delta: f64,
}

impl SystemParams {
    pub fn as_array(&self) -> [f64; 4] {
        [self.alpha, self.beta, self.gamma_strength, self.delta]
    }

    fn from_array(a: [f64; 4]) -> Self {
        SystemParams {
            alpha: a[0],
            beta: a[1],
            gamma_strength: a[2],
            delta: a[3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.as_array();
        if a.iter().any(|x| !x.is_finite() || *x < 0.0) || self.alpha <= 0.0 {
            return Err(Error::Config(format!("invalid system parameters {self:?}")));
        }
        if self.delta > 1.0 {
            return Err(Error::Config(format!("delta {} outside [0, 1]", self.delta)));
        }
        Ok(())
    }
}

/// Closed interval `[lo, hi]`, serialised as a two-element array.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
pub struct Interval(pub f64, pub f64);

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.0 <= x && x <= self.1
    }

    fn within(&self, outer: &Interval) -> bool {
        outer.0 <= self.0 && self.1 <= outer.1
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.0 == self.1 {
            self.0
        } else {
            rng.random_range(self.0..=self.1)
        }
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq)]
pub struct ParamBox {
    pub alpha: Interval,
    pub beta: Interval,
    pub gamma: Interval,
    pub delta: Interval,
}

impl ParamBox {
    fn intervals(&self) -> [Interval; 4] {
        [self.alpha, self.beta, self.gamma, self.delta]
    }

    pub fn contains(&self, p: &SystemParams) -> bool {
        self.intervals()
            .iter()
            .zip(p.as_array())
            .all(|(iv, x)| iv.contains(x))
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SystemParams {
        let iv = self.intervals();
        SystemParams::from_array([
            iv[0].sample(rng),
            iv[1].sample(rng),
            iv[2].sample(rng),
            iv[3].sample(rng),
        ])
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test_id: usize,
    pub test_ood: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::TestId => self.test_id,
            Split::TestOod => self.test_ood,
        }
    }
}

fn default_objects() -> usize {
    5
}

fn default_frames() -> usize {
    60
}

/// Parameter boxes, sample counts and simulation settings for one dataset.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_box: ParamBox,
    pub ood_box: ParamBox,
    pub counts: SplitCounts,
    #[serde(default = "default_objects")]
    pub n_objects: usize,
    #[serde(default = "default_frames")]
    pub n_frames: usize,
    #[serde(default)]
    pub sim: SimConfig,
}

impl SplitSpec {
    /// Training and OOD boxes used for both physical systems; only the
    /// interaction strength differs (0.1 for springs, 1.0 for charges).
    pub fn boxes(system: System) -> (ParamBox, ParamBox) {
        let g = match system {
            System::Springs => 0.1,
            System::Charged => 1.0,
        };
        let train = ParamBox {
            alpha: Interval(4.9, 5.1),
            beta: Interval(0.49, 0.51),
            gamma: Interval(0.9 * g, 1.1 * g),
            delta: Interval(0.49, 0.51),
        };
        let ood = ParamBox {
            alpha: Interval(4.8, 5.2),
            beta: Interval(0.48, 0.52),
            gamma: Interval(0.8 * g, 1.2 * g),
            delta: Interval(0.48, 0.52),
        };
        (train, ood)
    }

    /// Full-size benchmark: 10 objects, 1000/200/200 train/val/test plus 200
    /// OOD samples.
    pub fn full_scale(system: System) -> Self {
        let (train_box, ood_box) = Self::boxes(system);
        SplitSpec {
            train_box,
            ood_box,
            counts: SplitCounts {
                train: 1000,
                val: 200,
                test_id: 200,
                test_ood: 200,
            },
            n_objects: 10,
            n_frames: default_frames(),
            sim: SimConfig::default(),
        }
    }

    /// Laptop-sized variant: 5 objects, 200/50/50/50.
    pub fn desk_scale(system: System) -> Self {
        let (train_box, ood_box) = Self::boxes(system);
        SplitSpec {
            train_box,
            ood_box,
            counts: SplitCounts {
                train: 200,
                val: 50,
                test_id: 50,
                test_ood: 50,
            },
            n_objects: 5,
            n_frames: default_frames(),
            sim: SimConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (t, o)) in ["alpha", "beta", "gamma", "delta"]
            .iter()
            .zip(self.train_box.intervals().iter().zip(self.ood_box.intervals()))
        {
            for iv in [t, &o] {
                if !(iv.0.is_finite() && iv.1.is_finite()) || iv.0 > iv.1 || iv.0 < 0.0 {
                    return Err(Error::Config(format!("invalid {name} interval {iv:?}")));
                }
            }
            if !t.within(&o) {
                return Err(Error::Config(format!(
                    "{name}: training interval {t:?} not inside OOD interval {o:?}"
                )));
            }
        }
        if self.train_box.delta.1 > 1.0 || self.ood_box.delta.1 > 1.0 {
            return Err(Error::Config("delta intervals must lie in [0, 1]".into()));
        }
        if self.train_box.alpha.0 <= 0.0 {
            return Err(Error::Config("box size must be positive".into()));
        }
        if self.n_frames < 2 {
            return Err(Error::Config("n_frames must be at least 2".into()));
        }
        self.sim.validate()
    }
}

/// Draws system parameters for one sample of `split`.
///
/// Train, validation and ID-test draws are uniform over the training box.
/// OOD draws are uniform over the wider box and rejected until at least one
/// coordinate falls outside the training box.
pub fn sample_params<R: Rng + ?Sized>(split: Split, spec: &SplitSpec, rng: &mut R) -> Result<SystemParams> {
    match split {
        Split::Train | Split::Val | Split::TestId => Ok(spec.train_box.sample(rng)),
        Split::TestOod => {
            for _ in 0..MAX_OOD_TRIES {
                let p = spec.ood_box.sample(rng);
                if !spec.train_box.contains(&p) {
                    return Ok(p);
                }
            }
            Err(Error::Config(format!(
                "no out-of-distribution draw after {MAX_OOD_TRIES} tries; is the OOD box wider than the training box?"
            )))
        }
    }
}

/// One simulated system.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
pub struct TrajectorySample {
    pub id: String,
    pub split: Split,
    pub params: SystemParams,
    pub n_objects: usize,
    pub n_frames: usize,
    /// `[object][frame] -> [x, y]`
    pub positions: Vec<Vec<[f64; 2]>>,
    pub velocities: Vec<Vec<[f64; 2]>>,
    /// Static symmetric interaction graph with zero diagonal.
    pub edges: Vec<Vec<f64>>,
}

impl TrajectorySample {
    /// `[qx, qy, vx, vy]` of object `i` at frame `t`.
    pub fn features(&self, i: usize, t: usize) -> [f64; 4] {
        let q = self.positions[i][t];
        let v = self.velocities[i][t];
        [q[0], q[1], v[0], v[1]]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_objects;
        let shape_ok = |a: &Vec<Vec<[f64; 2]>>| {
            a.len() == n && a.iter().all(|o| o.len() == self.n_frames)
        };
        if !shape_ok(&self.positions) || !shape_ok(&self.velocities) {
            return Err(Error::Format(format!("sample {}: trajectory shape mismatch", self.id)));
        }
        if self.edges.len() != n || self.edges.iter().any(|r| r.len() != n) {
            return Err(Error::Format(format!("sample {}: edges must be {n}x{n}", self.id)));
        }
        for i in 0..n {
            if self.edges[i][i] != 0.0 {
                return Err(Error::Format(format!("sample {}: nonzero edge diagonal", self.id)));
            }
            for j in 0..n {
                if self.edges[i][j] != self.edges[j][i] {
                    return Err(Error::Format(format!("sample {}: asymmetric edges", self.id)));
                }
            }
        }
        let finite = |a: &Vec<Vec<[f64; 2]>>| a.iter().flatten().flatten().all(|x| x.is_finite());
        if !finite(&self.positions) || !finite(&self.velocities) {
            return Err(Error::Format(format!("sample {}: non-finite state", self.id)));
        }
        Ok(())
    }

    /// Directed neighbour pairs `(i, j)` with `edges[i][j] != 0`.
    pub fn neighbor_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n_objects {
            for j in 0..self.n_objects {
                if i != j && self.edges[i][j] != 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }
}
