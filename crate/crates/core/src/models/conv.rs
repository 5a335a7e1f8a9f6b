//! Graph attention convolution and the bidirectional layer built from two of them.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{Linear, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub(crate) struct AttentionHead {
    pub(crate) root: Linear,
    pub(crate) value: Linear,
    pub(crate) query: Linear,
    pub(crate) key: Linear,
}

/// Transformer-style graph convolution:
/// `x'_i = W1 x_i + Σ_{j→i} α_ij W2 x_j` with
/// `α_ij = softmax_j((W3 x_i)·(W4 x_j) / sqrt(d))` over the in-neighbours of `i`.
/// Several heads are concatenated and merged by an affine map.
#[derive(Clone, Debug)]
pub struct TransformerConv {
    pub(crate) heads: Vec<AttentionHead>,
    merge: Option<Linear>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl TransformerConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let heads_n = heads.max(1);
        let mut hs = Vec::with_capacity(heads_n);
        for h in 0..heads_n {
            let p = if heads_n == 1 {
                name.to_string()
            } else {
                format!("{name}.head{h}")
            };
            hs.push(AttentionHead {
                root: Linear::new(store, &format!("{p}.root"), in_dim, out_dim, true, rng)?,
                value: Linear::new(store, &format!("{p}.value"), in_dim, out_dim, true, rng)?,
                query: Linear::new(store, &format!("{p}.query"), in_dim, out_dim, true, rng)?,
                key: Linear::new(store, &format!("{p}.key"), in_dim, out_dim, true, rng)?,
            });
        }
        let merge = if heads_n > 1 {
            Some(Linear::new(
                store,
                &format!("{name}.merge"),
                heads_n * out_dim,
                out_dim,
                true,
                rng,
            )?)
        } else {
            None
        };
        Ok(TransformerConv {
            heads: hs,
            merge,
            in_dim,
            out_dim,
        })
    }

    /// Root-term weight and bias of the first head (used by tests that pin weights).
    pub fn root_params(&self) -> (ParamId, Option<ParamId>) {
        (self.heads[0].root.weight, self.heads[0].root.bias)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        edges: &[(usize, usize)],
    ) -> Result<Var> {
        let n = tape.value(x).shape()[0];
        let mut outs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let root = head.root.forward(tape, store, x)?;
            if edges.is_empty() {
                outs.push(root);
                continue;
            }
            let src: Vec<usize> = edges.iter().map(|e| e.0).collect();
            let dst: Vec<usize> = edges.iter().map(|e| e.1).collect();
            let d = self.out_dim;

            let q = head.query.forward(tape, store, x)?;
            let k = head.key.forward(tape, store, x)?;
            let v = head.value.forward(tape, store, x)?;
            let q_dst = tape.gather_rows(q, dst.clone())?;
            let k_src = tape.gather_rows(k, src.clone())?;
            let qk = tape.mul(q_dst, k_src)?;
            let ones_col = tape.constant(Tensor::filled(&[d, 1], 1.0));
            let scores = tape.matmul(qk, ones_col)?;
            let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
            let alpha = tape.segment_softmax(scores, dst.clone(), n)?;

            let v_src = tape.gather_rows(v, src)?;
            let ones_row = tape.constant(Tensor::filled(&[1, d], 1.0));
            let alpha_wide = tape.matmul(alpha, ones_row)?;
            let messages = tape.mul(alpha_wide, v_src)?;
            let aggregated = tape.scatter_add_rows(messages, dst, n)?;
            outs.push(tape.add(root, aggregated)?);
        }
        match &self.merge {
            None => Ok(outs[0]),
            Some(merge) => {
                let cat = tape.concat(&outs, 1)?;
                merge.forward(tape, store, cat)
            }
        }
    }
}

/// One bidirectional layer: a child→parent and a parent→child convolution
/// with independent parameters, mixed by a learnable scalar `p`.
#[derive(Clone, Debug)]
pub struct BiLayer {
    pub child_to_parent: TransformerConv,
    pub parent_to_child: TransformerConv,
    pub mix: ParamId,
}

/// Outputs of a bidirectional layer, kept apart for inspection.
#[derive(Clone, Copy, Debug)]
pub struct BiLayerOutput {
    pub child_to_parent: Var,
    pub parent_to_child: Var,
    pub mixed: Var,
}

impl BiLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let child_to_parent =
            TransformerConv::new(store, &format!("{name}.c2p"), in_dim, out_dim, heads, rng)?;
        let parent_to_child =
            TransformerConv::new(store, &format!("{name}.p2c"), in_dim, out_dim, heads, rng)?;
        let mix = store.register(format!("{name}.p"), Tensor::scalar(0.5))?;
        Ok(BiLayer {
            child_to_parent,
            parent_to_child,
            mix,
        })
    }

    /// `p · conv1(x, E_c2p) + (1 − p) · conv2(x, E_p2c)`
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        child_to_parent: &[(usize, usize)],
        parent_to_child: &[(usize, usize)],
    ) -> Result<BiLayerOutput> {
        let cp = self.child_to_parent.forward(tape, store, x, child_to_parent)?;
        let pc = self.parent_to_child.forward(tape, store, x, parent_to_child)?;
        let mixed = mix(tape, store, self.mix, cp, pc)?;
        Ok(BiLayerOutput {
            child_to_parent: cp,
            parent_to_child: pc,
            mixed,
        })
    }
}

/// `p · a + (1 − p) · b` for a one-element parameter `p`.
pub fn mix(tape: &mut Tape, store: &ParamStore, p: ParamId, a: Var, b: Var) -> Result<Var> {
    let p = tape.param(store, p);
    let neg_p = tape.scale(p, -1.0)?;
    let one_minus_p = tape.add_scalar(neg_p, 1.0)?;
    let left = tape.scalar_mul(p, a)?;
    let right = tape.scalar_mul(one_minus_p, b)?;
    tape.add(left, right)
}
