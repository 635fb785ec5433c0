//! Dense tensors, reverse-mode autodiff, parameters, and their storage.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{fd_grad, max_rel_err};
pub use optim::Adam;
pub use param::{Param, ParamId, ParamSet};
pub use rng::Rng;
pub use tape::{cosine, sigmoid, AttnSeg, Gradients, Tape, Var, LN_EPS, NORM_EPS};
pub use tensor::Tensor;

use crate::error::Result;

/// Mean negative log-likelihood of `targets` under row-wise softmax.
pub fn softmax_xent(tape: &mut Tape, logits: Var, targets: Vec<usize>) -> Result<Var> {
    let lp = tape.log_softmax_pick(logits, targets)?;
    let m = tape.mean(lp);
    Ok(tape.scale(m, -1.0))
}

/// Cosine similarity of two plain vectors (see [`cosine`]).
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    cosine(a, b)
}
