//! Parameterized building blocks shared by the encoders, prompt generators
//! and head.

use crate::error::Result;
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Real, Tape, Var};

/// Standard deviation of weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        input: usize,
        output: usize,
        rng: &mut Rng,
    ) -> Self {
        Self {
            weight: store.add_normal(
                format!("{name}.weight"),
                group,
                &[input, output],
                INIT_STD,
                rng,
            ),
            bias: store.add_const(format!("{name}.bias"), group, &[output], 0.0),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.weight])?;
        tape.add_row(y, p[self.bias])
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        dim: usize,
    ) -> Self {
        Self {
            gamma: store.add_const(format!("{name}.gamma"), group, &[dim], 1.0),
            beta: store.add_const(format!("{name}.beta"), group, &[dim], 0.0),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma], p[self.beta], T::of(LN_EPS))
    }
}

/// Two-layer perceptron `in -> hidden -> out` with GELU in between,
/// applied to every token independently.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        dims: (usize, usize, usize),
        rng: &mut Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), group, dims.0, dims.1, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), group, dims.1, dims.2, rng),
        }
    }

    /// The `D -> 4D -> D` feed-forward network.
    pub fn feed_forward<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        dim: usize,
        rng: &mut Rng,
    ) -> Self {
        Self::new(store, name, group, (dim, 4 * dim, dim), rng)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, p, h)
    }
}
