//! Memory-conditioned layer normalization.
//!
//! Scale and shift are offset by affine functions of the flattened memory:
//! `gamma' = gamma + f_g(m)`, `beta' = beta + f_b(m)`, and the output is
//! `gamma' * (r - mean) / (std + eps) + beta'` row by row. The conditioning
//! maps start at zero, so a fresh layer behaves exactly like plain layer
//! normalization.

use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::params::ParamStore;
use crate::tensor::{Tape, Var};

/// Flattens each `slots × d` memory into a `1 × slots·d` row and stacks the
/// rows, one per memory.
pub fn flatten_memory(tape: &mut Tape<'_>, memories: &[Var]) -> Result<Var> {
    if memories.is_empty() {
        return Err(Error::contract("no memory states to flatten"));
    }
    let rows = memories
        .iter()
        .map(|&m| {
            let n = tape.value(m).len();
            tape.reshape(m, &[1, n])
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        tape.concat_rows(&rows)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Mcln {
    pub norm: LayerNorm,
    pub cond_gamma: Linear,
    pub cond_beta: Linear,
}

impl Mcln {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, memory_width: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::register(store, prefix, d, eps)?,
            cond_gamma: Linear::register_zero(store, &format!("{prefix}.cond_gamma"), memory_width, d)?,
            cond_beta: Linear::register_zero(store, &format!("{prefix}.cond_beta"), memory_width, d)?,
        })
    }

    pub fn bind(store: &ParamStore, prefix: &str, eps: f64) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::bind(store, prefix, eps)?,
            cond_gamma: Linear::bind(store, &format!("{prefix}.cond_gamma"), true)?,
            cond_beta: Linear::bind(store, &format!("{prefix}.cond_beta"), true)?,
        })
    }

    /// Normalizes the rows of `x` (`T × d`), row `t` conditioned on row `t`
    /// of `memory` (`T × slots·d`, see [`flatten_memory`]).
    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, x: Var, memory: Var) -> Result<Var> {
        let (xr, _) = tape.value(x).matrix_dims()?;
        let (mr, mc) = tape.value(memory).matrix_dims()?;
        if xr != mr || mc != self.cond_gamma.in_dim(store) {
            return Err(Error::shape("mcln", tape.shape(x), tape.shape(memory)));
        }
        let normed = tape.standardize_rows(x, self.norm.eps)?;
        let gamma = tape.param(store, self.norm.gamma);
        let beta = tape.param(store, self.norm.beta);
        let dg = self.cond_gamma.forward(tape, store, memory)?;
        let db = self.cond_beta.forward(tape, store, memory)?;
        let scale = tape.add_row(dg, gamma)?;
        let shift = tape.add_row(db, beta)?;
        let y = tape.mul(normed, scale)?;
        tape.add(y, shift)
    }
}
