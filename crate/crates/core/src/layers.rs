//! Fully-connected building blocks shared by the model components.

use rand::Rng;

use crate::error::Result;
use crate::params::{Init, ParamId, ParamStore, INIT_STD};
use crate::tape::{Activation, Tape, Var};

/// `y = x·W + b` with `W: [d_in × d_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.get_or_insert(
            &format!("{prefix}/w"),
            &[d_in, d_out],
            Init::TruncatedNormal(INIT_STD),
            rng,
        )?;
        let bias = store.get_or_insert(&format!("{prefix}/b"), &[d_out], Init::Zeros, rng)?;
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Two fully-connected layers with a ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{prefix}/fc1"), d_in, d_hidden, rng)?,
            output: Linear::new(store, &format!("{prefix}/fc2"), d_hidden, d_out, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.activate(h, Activation::Relu);
        self.output.forward(tape, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.hidden.params().into_iter().chain(self.output.params()).collect()
    }
}
