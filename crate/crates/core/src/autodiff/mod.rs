//! Tape-based reverse-mode automatic differentiation over dense `f32` tensors.
//!
//! Storage is 32-bit; sums, norms, dot products and softmax reductions
//! accumulate in 64-bit. Matrix products go through a blocked `sgemm`.

mod graph;
mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, ParamGrads, Var};
pub use optim::{Adam, CosineSchedule, Optimizer, Sgd};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

use crate::error::Result;

/// Guard used by every L2 normalization in the crate.
pub const NORM_EPS: f64 = 1e-12;

/// Mean over rows of `−(p/‖p‖)·(z/‖z‖)`.
///
/// Accepts `[d]` vectors or `[N×d]` batches. Rows that are exactly zero
/// normalize to zero, so the loss contribution of such a row is 0.
pub fn neg_cosine(g: &mut Graph, p: Var, z: Var) -> Result<Var> {
    let (p, z) = (as_rows(g, p)?, as_rows(g, z)?);
    let pn = g.l2_normalize(p, 1, NORM_EPS)?;
    let zn = g.l2_normalize(z, 1, NORM_EPS)?;
    let cos = g.row_dot(pn, zn)?;
    let m = g.mean(cos);
    Ok(g.scale(m, -1.0))
}

fn as_rows(g: &mut Graph, v: Var) -> Result<Var> {
    if g.shape(v).len() == 1 {
        let d = g.shape(v)[0];
        g.reshape(v, &[1, d])
    } else {
        Ok(v)
    }
}

/// Affine layer `x·w + b` with `w: [in×out]`, `b: [out]`.
pub fn dense(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row_bias(y, b)
}
