//! Tree-structured baselines: child-sum Tree-LSTM and tree convolution.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Linear, ParamStore, Tape, Tensor, Var};

/// Child-sum Tree-LSTM. Gate input maps carry the bias; recurrent maps do not.
#[derive(Clone, Debug)]
pub struct ChildSumTreeLstm {
    pub w_i: Linear,
    pub u_i: Linear,
    pub w_f: Linear,
    pub u_f: Linear,
    pub w_o: Linear,
    pub u_o: Linear,
    pub w_u: Linear,
    pub u_u: Linear,
    pub hidden: usize,
}

impl ChildSumTreeLstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut pair = |gate: &str| -> Result<(Linear, Linear)> {
            Ok((
                Linear::new(store, &format!("{name}.{gate}.w"), in_dim, hidden, true, rng)?,
                Linear::new(store, &format!("{name}.{gate}.u"), hidden, hidden, false, rng)?,
            ))
        };
        let (w_i, u_i) = pair("i")?;
        let (w_f, u_f) = pair("f")?;
        let (w_o, u_o) = pair("o")?;
        let (w_u, u_u) = pair("u")?;
        Ok(ChildSumTreeLstm {
            w_i,
            u_i,
            w_f,
            u_f,
            w_o,
            u_o,
            w_u,
            u_u,
            hidden,
        })
    }

    /// Hidden state of the last node in `order` (the root).
    /// `children[j]` lists the rows of `j`'s children.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        children: &[Vec<usize>],
        order: &[usize],
    ) -> Result<Var> {
        let n = tape.value(x).shape()[0];
        if order.is_empty() {
            return Err(Error::InvalidInput("Tree-LSTM over an empty tree".into()));
        }
        let xi = self.w_i.forward(tape, store, x)?;
        let xf = self.w_f.forward(tape, store, x)?;
        let xo = self.w_o.forward(tape, store, x)?;
        let xu = self.w_u.forward(tape, store, x)?;
        let mut h: Vec<Option<Var>> = vec![None; n];
        let mut c: Vec<Option<Var>> = vec![None; n];
        let zero = tape.constant(Tensor::zeros(&[1, self.hidden]));
        for &j in order {
            let kids = &children[j];
            let mut h_sum = zero;
            for (idx, &k) in kids.iter().enumerate() {
                let hk = h[k].ok_or_else(|| Error::InvalidInput("child visited after parent".into()))?;
                h_sum = if idx == 0 { hk } else { tape.add(h_sum, hk)? };
            }
            let gate = |tape: &mut Tape, proj: Var, u: &Linear, hv: Var| -> Result<Var> {
                let xj = tape.gather_rows(proj, vec![j])?;
                let uh = u.forward(tape, store, hv)?;
                tape.add(xj, uh)
            };
            let i = gate(tape, xi, &self.u_i, h_sum)?;
            let i = tape.sigmoid(i)?;
            let o = gate(tape, xo, &self.u_o, h_sum)?;
            let o = tape.sigmoid(o)?;
            let u = gate(tape, xu, &self.u_u, h_sum)?;
            let u = tape.tanh(u)?;
            let mut cell = tape.mul(i, u)?;
            for &k in kids {
                let f = gate(tape, xf, &self.u_f, h[k].expect("checked above"))?;
                let f = tape.sigmoid(f)?;
                let fc = tape.mul(f, c[k].expect("set with h"))?;
                cell = tape.add(cell, fc)?;
            }
            let tc = tape.tanh(cell)?;
            h[j] = Some(tape.mul(o, tc)?);
            c[j] = Some(cell);
        }
        Ok(h[*order.last().unwrap()].expect("root visited"))
    }
}

/// One triangular tree convolution `relu(W_p x_j + W_l x_l + W_r x_r + b)`.
#[derive(Clone, Debug)]
pub struct TreeConvLayer {
    pub parent: Linear,
    pub left: Linear,
    pub right: Linear,
}

impl TreeConvLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TreeConvLayer {
            parent: Linear::new(store, &format!("{name}.parent"), in_dim, out_dim, true, rng)?,
            left: Linear::new(store, &format!("{name}.left"), in_dim, out_dim, false, rng)?,
            right: Linear::new(store, &format!("{name}.right"), in_dim, out_dim, false, rng)?,
        })
    }

    /// `x` has `m` rows; `left[j]` / `right[j]` index into `x` or equal `m`
    /// for an absent (zero) child.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        left: &[usize],
        right: &[usize],
    ) -> Result<Var> {
        let d = tape.value(x).shape()[1];
        let zero = tape.constant(Tensor::zeros(&[1, d]));
        let padded = tape.concat(&[x, zero], 0)?;
        let xl = tape.gather_rows(padded, left.to_vec())?;
        let xr = tape.gather_rows(padded, right.to_vec())?;
        let p = self.parent.forward(tape, store, x)?;
        let l = self.left.forward(tape, store, xl)?;
        let r = self.right.forward(tape, store, xr)?;
        let s = tape.add(p, l)?;
        let s = tape.add(s, r)?;
        tape.relu(s)
    }
}

/// Elementwise max over the rows of an `m x d` matrix, as `1 x d`.
pub fn max_pool_rows(tape: &mut Tape, x: Var) -> Result<Var> {
    let d = tape.value(x).shape()[1];
    let t = tape.transpose(x)?;
    let m = tape.row_max(t)?;
    tape.reshape(m, vec![1, d])
}
