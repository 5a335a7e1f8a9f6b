//! GRU and LSTM cells unrolled over a node sequence.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Linear, ParamStore, Tape, Tensor, Var};

/// One gate's input map (with bias) and recurrent map (without bias).
#[derive(Clone, Debug)]
pub struct Gate {
    pub input: Linear,
    pub hidden: Linear,
}

impl Gate {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Gate {
            input: Linear::new(store, &format!("{name}.w"), in_dim, hidden, true, rng)?,
            hidden: Linear::new(store, &format!("{name}.u"), hidden, hidden, false, rng)?,
        })
    }

    /// Input projection of every row at once.
    fn project_inputs(&self, tape: &mut Tape, store: &ParamStore, xs: Var) -> Result<Var> {
        self.input.forward(tape, store, xs)
    }

    /// `(projected input row t) + h U`
    fn preactivation(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        projected: Var,
        t: usize,
        h: Var,
    ) -> Result<Var> {
        let x_t = tape.gather_rows(projected, vec![t])?;
        let uh = self.hidden.forward(tape, store, h)?;
        tape.add(x_t, uh)
    }
}

fn one_minus(tape: &mut Tape, x: Var) -> Result<Var> {
    let neg = tape.scale(x, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = (1 − z) ⊙ h + z ⊙ h̃`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub update: Gate,
    pub reset: Gate,
    pub candidate: Gate,
    pub in_dim: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(GruCell {
            update: Gate::new(store, &format!("{name}.z"), in_dim, hidden, rng)?,
            reset: Gate::new(store, &format!("{name}.r"), in_dim, hidden, rng)?,
            candidate: Gate::new(store, &format!("{name}.h"), in_dim, hidden, rng)?,
            in_dim,
            hidden,
        })
    }

    /// Runs the recurrence over the rows of `xs` from a zero state and returns
    /// every hidden state.
    pub fn run(&self, tape: &mut Tape, store: &ParamStore, xs: Var) -> Result<Vec<Var>> {
        let steps = tape.value(xs).shape()[0];
        if steps == 0 {
            return Err(Error::InvalidInput("GRU over an empty sequence".into()));
        }
        let xz = self.update.project_inputs(tape, store, xs)?;
        let xr = self.reset.project_inputs(tape, store, xs)?;
        let xh = self.candidate.project_inputs(tape, store, xs)?;
        let mut h = tape.constant(Tensor::zeros(&[1, self.hidden]));
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let z = self.update.preactivation(tape, store, xz, t, h)?;
            let z = tape.sigmoid(z)?;
            let r = self.reset.preactivation(tape, store, xr, t, h)?;
            let r = tape.sigmoid(r)?;
            let rh = tape.mul(r, h)?;
            let cand = self.candidate.preactivation(tape, store, xh, t, rh)?;
            let cand = tape.tanh(cand)?;
            let keep = one_minus(tape, z)?;
            let old = tape.mul(keep, h)?;
            let new = tape.mul(z, cand)?;
            h = tape.add(old, new)?;
            states.push(h);
        }
        Ok(states)
    }

    /// Final hidden state after consuming the rows of `xs`.
    pub fn last(&self, tape: &mut Tape, store: &ParamStore, xs: Var) -> Result<Var> {
        Ok(*self.run(tape, store, xs)?.last().expect("non-empty"))
    }
}

/// Standard LSTM: input, forget and output gates plus a tanh cell candidate.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub input_gate: Gate,
    pub forget_gate: Gate,
    pub output_gate: Gate,
    pub cell: Gate,
    pub in_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(LstmCell {
            input_gate: Gate::new(store, &format!("{name}.i"), in_dim, hidden, rng)?,
            forget_gate: Gate::new(store, &format!("{name}.f"), in_dim, hidden, rng)?,
            output_gate: Gate::new(store, &format!("{name}.o"), in_dim, hidden, rng)?,
            cell: Gate::new(store, &format!("{name}.u"), in_dim, hidden, rng)?,
            in_dim,
            hidden,
        })
    }

    /// Hidden states for every step, starting from zero hidden and cell state.
    pub fn run(&self, tape: &mut Tape, store: &ParamStore, xs: Var) -> Result<Vec<Var>> {
        let steps = tape.value(xs).shape()[0];
        if steps == 0 {
            return Err(Error::InvalidInput("LSTM over an empty sequence".into()));
        }
        let xi = self.input_gate.project_inputs(tape, store, xs)?;
        let xf = self.forget_gate.project_inputs(tape, store, xs)?;
        let xo = self.output_gate.project_inputs(tape, store, xs)?;
        let xu = self.cell.project_inputs(tape, store, xs)?;
        let mut h = tape.constant(Tensor::zeros(&[1, self.hidden]));
        let mut c = tape.constant(Tensor::zeros(&[1, self.hidden]));
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let i = self.input_gate.preactivation(tape, store, xi, t, h)?;
            let i = tape.sigmoid(i)?;
            let f = self.forget_gate.preactivation(tape, store, xf, t, h)?;
            let f = tape.sigmoid(f)?;
            let o = self.output_gate.preactivation(tape, store, xo, t, h)?;
            let o = tape.sigmoid(o)?;
            let u = self.cell.preactivation(tape, store, xu, t, h)?;
            let u = tape.tanh(u)?;
            let fresh = tape.mul(i, u)?;
            let carried = tape.mul(f, c)?;
            c = tape.add(fresh, carried)?;
            let tc = tape.tanh(c)?;
            h = tape.mul(o, tc)?;
            states.push(h);
        }
        Ok(states)
    }

    pub fn last(&self, tape: &mut Tape, store: &ParamStore, xs: Var) -> Result<Var> {
        Ok(*self.run(tape, store, xs)?.last().expect("non-empty"))
    }
}

/// LSTM followed by additive attention over its hidden states:
/// `a = softmax(vᵀ tanh(W_a h_i))`, output `Σ a_i h_i`.
#[derive(Clone, Debug)]
pub struct AttentiveLstm {
    pub lstm: LstmCell,
    pub project: Linear,
    pub score: Linear,
}

impl AttentiveLstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(AttentiveLstm {
            lstm: LstmCell::new(store, &format!("{name}.lstm"), in_dim, hidden, rng)?,
            project: Linear::new(store, &format!("{name}.attn.w"), hidden, hidden, false, rng)?,
            score: Linear::new(store, &format!("{name}.attn.v"), hidden, 1, false, rng)?,
        })
    }

    /// Returns the pooled embedding and the attention weights (`N x 1`).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, xs: Var) -> Result<(Var, Var)> {
        let states = self.lstm.run(tape, store, xs)?;
        let n = states.len();
        let hs = tape.concat(&states, 0)?;
        let proj = self.project.forward(tape, store, hs)?;
        let proj = tape.tanh(proj)?;
        let scores = self.score.forward(tape, store, proj)?;
        let weights = tape.segment_softmax(scores, vec![0; n], 1)?;
        let wt = tape.transpose(weights)?;
        let pooled = tape.matmul(wt, hs)?;
        Ok((pooled, weights))
    }
}
