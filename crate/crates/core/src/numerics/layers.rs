use rand::Rng;

use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;

/// Affine map `x W + b` applied row-wise to an `N x in` matrix.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.register_uniform(format!("{name}.weight"), in_dim, out_dim, in_dim, rng)?;
        let bias = if bias {
            Some(store.register_uniform(format!("{name}.bias"), 1, out_dim, in_dim, rng)?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let rows = tape.value(x).shape()[0];
                let b = tape.param(store, b);
                let b = broadcast_row(tape, b, rows)?;
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Repeats a `1 x d` row `rows` times via gather-rows.
pub fn broadcast_row(tape: &mut Tape, row: Var, rows: usize) -> Result<Var> {
    if rows == 1 {
        return Ok(row);
    }
    tape.gather_rows(row, vec![0; rows])
}
