//! Dense tensors, a recording tape with reverse-mode gradients, Adam, and a
//! finite-difference gradient checker.

mod adam;
mod gradcheck;
mod layers;
mod param;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig};
pub use gradcheck::{grad_check, relative_error, relative_error_with_floor, GradCheckConfig, GradCheckReport};
pub use layers::{broadcast_row, Linear};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Primitive, Tape, Var};
pub use tensor::{Precision, Tensor};

/// Derives an independent stream seed from a base seed and a path of
/// indices (epoch, sample, ...). SplitMix64 finalizer per step.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut s = base;
    for &p in path {
        s = s.wrapping_add(p.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut z = s;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        s = z ^ (z >> 31);
    }
    s
}
