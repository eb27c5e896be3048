//! Shaped arrays, a recording compute graph and its reverse-mode adjoints.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Upsample, Var};
pub use kernels::ConvGeom;
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::real::Real;

/// Output of [`attention`]: the attended values and the row-stochastic weights.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub output: Var,
    pub weights: Var,
}

/// Scaled dot-product attention `softmax(Q K^T / sqrt(d)) V` on `[N,d]` operands.
pub fn attention<T: Real>(g: &Graph<T>, q: Var, k: Var, v: Var) -> Result<Attention> {
    let (sq, sk, sv) = (g.shape(q), g.shape(k), g.shape(v));
    if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 {
        return Err(Error::shape(format!(
            "attention: operands must be [N,d], got {sq:?} {sk:?} {sv:?}"
        )));
    }
    let d = sq[1];
    if d == 0 {
        return Err(Error::shape("attention: zero-width queries"));
    }
    if sk[1] != d || sk[0] != sv[0] || sq[0] == 0 || sk[0] == 0 {
        return Err(Error::shape(format!(
            "attention: incompatible {sq:?} {sk:?} {sv:?}"
        )));
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, T::of(1.0 / (d as f64).sqrt()));
    let weights = g.softmax(scores)?;
    let output = g.matmul(weights, v)?;
    Ok(Attention { output, weights })
}
