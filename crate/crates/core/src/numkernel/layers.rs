use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::Result;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: the tape plus the mutable state layers may touch
/// (running statistics in training mode, the dropout generator).
pub struct Session<'a, T: Real> {
    pub tape: Tape<T>,
    pub store: &'a mut ParamStore<T>,
    pub mode: Mode,
    pub rng: ChaCha8Rng,
}

impl<'a, T: Real> Session<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, mode: Mode, rng: ChaCha8Rng) -> Self {
        Self {
            tape: Tape::new(),
            store,
            mode,
            rng,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply<T: Real>(self, tape: &mut Tape<T>, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu(slope) => tape.leaky_relu(x, slope),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[fan_in, fan_out], fan_in, rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), true));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = self.bias.map(|b| s.param(b));
        s.tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[width], T::one()), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[width]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[width]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[width], T::one()), false),
        }
    }

    /// Training mode normalizes with batch statistics and folds them into the
    /// running estimates; eval mode uses the running estimates only.
    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        match s.mode {
            Mode::Train => {
                let n = s.tape.shape(x).first().copied().unwrap_or(1);
                let (y, mean, var) = s.tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
                let m = T::of(BN_MOMENTUM);
                let unbias = if n > 1 {
                    T::of(n as f64 / (n as f64 - 1.0))
                } else {
                    T::one()
                };
                let rm = s.store.get_mut(self.running_mean).data_mut();
                for (r, &b) in rm.iter_mut().zip(&mean) {
                    *r = (T::one() - m) * *r + m * b;
                }
                let rv = s.store.get_mut(self.running_var).data_mut();
                for (r, &b) in rv.iter_mut().zip(&var) {
                    *r = (T::one() - m) * *r + m * b * unbias;
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = s.store.get(self.running_mean).data().to_vec();
                let var = s.store.get(self.running_var).data().to_vec();
                s.tape.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)
            }
        }
    }
}

/// Linear, optional batch norm, activation.
#[derive(Clone, Debug)]
pub struct Dense {
    pub linear: Linear,
    pub norm: Option<BatchNorm>,
    pub act: Activation,
}

impl Dense {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        norm: bool,
        act: Activation,
        rng: &mut R,
    ) -> Self {
        let linear = Linear::new(store, name, fan_in, fan_out, true, rng);
        let norm = norm.then(|| BatchNorm::new(store, &format!("{name}.bn"), fan_out));
        Self { linear, norm, act }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let y = self.linear.forward(s, x)?;
        let y = match &self.norm {
            Some(bn) => bn.forward(s, y)?,
            None => y,
        };
        Ok(self.act.apply(&mut s.tape, y))
    }
}

/// Stack of [`Dense`] blocks following a channel plan such as `[288, 128, 128, 128]`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        plan: &[usize],
        act: Activation,
        rng: &mut R,
    ) -> Self {
        let layers = plan
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], true, act, rng))
            .collect();
        Self { layers }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(s, x)?;
        }
        Ok(x)
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.linear.fan_out)
    }

    pub fn channel_plan(&self) -> Vec<usize> {
        let mut plan: Vec<usize> = self.layers.iter().map(|l| l.linear.fan_in).take(1).collect();
        plan.extend(self.layers.iter().map(|l| l.linear.fan_out));
        plan
    }
}

/// Linear map over the column concatenation of several input blocks, stored
/// as one weight per block so each block can be projected on its own (for
/// example per node before gathering onto edges). Initialization uses the
/// total fan-in, so it matches a single `Linear` over the concatenation.
#[derive(Clone, Debug)]
pub struct BlockLinear {
    pub blocks: Vec<ParamId>,
    pub widths: Vec<usize>,
    pub bias: ParamId,
    pub fan_out: usize,
}

impl BlockLinear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = widths.iter().sum();
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| store.add_uniform(format!("{name}.weight{i}"), &[w, fan_out], fan_in, rng))
            .collect();
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), true);
        Self {
            blocks,
            widths: widths.to_vec(),
            bias,
            fan_out,
        }
    }

    /// `x @ W_block`, optionally plus the shared bias.
    pub fn project<T: Real>(&self, s: &mut Session<T>, block: usize, x: Var, with_bias: bool) -> Result<Var> {
        let w = s.param(self.blocks[block]);
        let b = with_bias.then(|| s.param(self.bias));
        s.tape.linear(x, w, b)
    }

    /// Weight of one block, as a tape variable.
    pub fn weight<T: Real>(&self, s: &mut Session<T>, block: usize) -> Var {
        s.param(self.blocks[block])
    }

    pub fn fan_in(&self) -> usize {
        self.widths.iter().sum()
    }
}
