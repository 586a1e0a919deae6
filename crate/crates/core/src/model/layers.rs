//! Parameter groups for the transformer building blocks. Each group only
//! holds [`ParamId`]s; values live in the model's [`ParamStore`].

use std::rc::Rc;

use rand::Rng;

use crate::autograd::{AttnGroup, Matrix, Tape, Var};
use crate::params::{truncated_normal, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        inputs: usize,
        outputs: usize,
        std: f64,
        init: Init,
    ) -> Self {
        let w = match init {
            Init::Normal => truncated_normal(rng, inputs, outputs, std),
            Init::Zeros => Matrix::zeros((inputs, outputs)),
        };
        Self {
            weight: store.insert(format!("{name}.weight"), w, true),
            bias: store.insert(format!("{name}.bias"), Matrix::zeros((1, outputs)), false),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.insert(format!("{name}.gamma"), Matrix::ones((1, dim)), false),
            beta: store.insert(format!("{name}.beta"), Matrix::zeros((1, dim)), false),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        std: f64,
        output_init: Init,
    ) -> Self {
        Self {
            query: Linear::new(store, rng, &format!("{name}.query"), dim, dim, std, Init::Normal),
            key: Linear::new(store, rng, &format!("{name}.key"), dim, dim, std, Init::Normal),
            value: Linear::new(store, rng, &format!("{name}.value"), dim, dim, std, Init::Normal),
            output: Linear::new(store, rng, &format!("{name}.output"), dim, dim, std, output_init),
            heads,
        }
    }

    /// Queries come from `x`, keys and values from `memory`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        memory: Var,
        groups: Rc<[AttnGroup]>,
    ) -> Var {
        let q = self.query.forward(tape, store, x);
        let k = self.key.forward(tape, store, memory);
        let v = self.value.forward(tape, store, memory);
        let mixed = tape.attention(q, k, v, groups, self.heads);
        self.output.forward(tape, store, mixed)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, hidden: usize, std: f64) -> Self {
        Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden, std, Init::Normal),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim, std, Init::Normal),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.fc1.forward(tape, store, x);
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, h)
    }
}
