//! GRU cell shared by all actors and all rollout steps.
//!
//! States are batched: row `i` of the `[N × d_h]` state matrix is actor
//! `i`'s hidden vector, and one parameter set serves every row.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct GruCell {
    pub update: Linear,
    pub reset: Linear,
    pub candidate: Linear,
    pub d_in: usize,
    pub d_h: usize,
}

/// Per-actor hidden vectors `[N × d_h]`.
#[derive(Debug, Clone, Copy)]
pub struct GruState {
    pub h: Var,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_h: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let width = d_h + d_in;
        Ok(Self {
            update: Linear::new(store, &format!("{prefix}/update"), width, d_h, rng)?,
            reset: Linear::new(store, &format!("{prefix}/reset"), width, d_h, rng)?,
            candidate: Linear::new(store, &format!("{prefix}/candidate"), width, d_h, rng)?,
            d_in,
            d_h,
        })
    }

    /// `h⁰ = v`: the feature rows become the initial state untouched.
    pub fn init_state(&self, tape: &Tape, features: Var) -> Result<GruState> {
        let s = tape.shape(features);
        if s.len() != 2 || s[1] != self.d_h {
            return Err(Error::shape("init_state", s, &[self.d_h]));
        }
        Ok(GruState { h: features })
    }

    /// One GRU update:
    /// `z = σ(W_z[h,x])`, `r = σ(W_r[h,x])`, `ĥ = tanh(W_h[r⊙h,x])`,
    /// `h' = (1−z)⊙h + z⊙ĥ`.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, state: GruState, input: Var) -> Result<GruState> {
        let (sh, sx) = (tape.shape(state.h), tape.shape(input));
        if sh.len() != 2 || sx.len() != 2 || sh[1] != self.d_h || sx[1] != self.d_in || sh[0] != sx[0] {
            return Err(Error::shape("gru_step", sh, sx));
        }
        let hx = tape.concat(state.h, input, 1)?;
        let z = self.update.forward(tape, store, hx)?;
        let z = tape.sigmoid(z);
        let r = self.reset.forward(tape, store, hx)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, state.h)?;
        let rhx = tape.concat(rh, input, 1)?;
        let cand = self.candidate.forward(tape, store, rhx)?;
        let cand = tape.tanh(cand);
        // h' = h + z⊙(ĥ − h)
        let diff = tape.sub(cand, state.h)?;
        let step = tape.mul(z, diff)?;
        let h = tape.add(state.h, step)?;
        Ok(GruState { h })
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.update, &self.reset, &self.candidate]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}
