//! Parameter storage and the small layer vocabulary the model is built from.

use std::collections::BTreeMap;

use rand::Rng;

use crate::diffcore::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Named parameter tensors, kept in name order so iteration (and therefore
/// checkpoints and optimizer updates) is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        ParamStore { tensors }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Records every tensor on the tape, as trainable parameters or as
    /// constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            let v = if trainable {
                tape.param(name, t.clone())?
            } else {
                tape.constant(t.clone())
            };
            vars.insert(name.clone(), v);
        }
        Ok(Bound { vars })
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name:?}")))
    }

    /// Same bindings with `name` pointing at `var` instead.
    pub fn with(mut self, name: &str, var: Var) -> Result<Self> {
        match self.vars.get_mut(name) {
            Some(v) => {
                *v = var;
                Ok(self)
            }
            None => Err(Error::Config(format!("missing parameter {name:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// Affine map `x·W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Registers freshly initialised weights, uniform in `±1/sqrt(fan_in)`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let weight = format!("{prefix}.w");
        store.insert(weight.clone(), Tensor::uniform(vec![fan_in, fan_out], bound, rng));
        let bias = bias.then(|| {
            let name = format!("{prefix}.b");
            store.insert(name.clone(), Tensor::uniform(vec![fan_out], bound, rng));
            name
        });
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// Describes a layer whose tensors are already in the store.
    pub fn existing(prefix: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Linear {
            weight: format!("{prefix}.w"),
            bias: bias.then(|| format!("{prefix}.b")),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&self.weight)?;
        let y = tape.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let rows = tape.value(y).rows();
                let bb = tape.broadcast(p.get(b)?, rows, self.fan_out)?;
                tape.add(y, bb)
            }
            None => Ok(y),
        }
    }
}

/// Feed-forward stack: `hidden` activation between layers, `output`
/// activation after the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        widths: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::init(store, &format!("{prefix}.{i}"), w[0], w[1], true, rng))
            .collect();
        Mlp {
            layers,
            hidden,
            output,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h)?;
            let act = if i == last { self.output } else { self.hidden };
            h = act.apply(tape, h)?;
        }
        Ok(h)
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.fan_in)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_matches_manual_affine_map() {
        let mut store = ParamStore::new();
        store.insert("l.w", Tensor::new(vec![2, 1], vec![2.0, -1.0]).unwrap());
        store.insert("l.b", Tensor::vector(vec![0.5]));
        let layer = Linear::existing("l", 2, 1, true);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, true).unwrap();
        let x = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 1.0, 3.0, 2.0]).unwrap());
        let y = layer.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, 4.5]);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let build = || {
            let mut s = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            Mlp::init(&mut s, "m", &[3, 4, 2], Activation::Relu, Activation::Identity, &mut rng);
            s
        };
        assert_eq!(build(), build());
        assert_eq!(build().len(), 4);
    }
}
