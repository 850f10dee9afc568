//! Scaled dot-product attention with multi-head and single-head wrappers.
//!
//! The same code serves the spatial stage (tokens = patches) and the channel stage
//! (tokens = feature channels after the dimension swap).

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::init::trunc_normal;
use crate::tensor::{Real, Tensor};

/// Projection weights for one attention stage of width `D`.
///
/// Weights are stored `[in, out]`, so a projection is `x · w + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_q: Tensor<T>,
    pub b_k: Tensor<T>,
    pub b_v: Tensor<T>,
    pub b_o: Tensor<T>,
}

impl<T: Real> AttentionWeights<T> {
    /// Identity projections with zero biases.
    pub fn identity(d: usize) -> Result<Self> {
        let eye = Tensor::eye(d)?;
        let zero = Tensor::zeros([d])?;
        Ok(AttentionWeights {
            w_q: eye.clone(),
            w_k: eye.clone(),
            w_v: eye.clone(),
            w_o: eye,
            b_q: zero.clone(),
            b_k: zero.clone(),
            b_v: zero.clone(),
            b_o: zero,
        })
    }

    /// Truncated-normal weights and biases, for tests and examples.
    pub fn random<R: Rng + ?Sized>(d: usize, std: f64, rng: &mut R) -> Result<Self> {
        let mut w = || trunc_normal::<T, R>(&[d, d], std, rng);
        let (w_q, w_k, w_v, w_o) = (w()?, w()?, w()?, w()?);
        let mut b = || trunc_normal::<T, R>(&[d], std, rng);
        let (b_q, b_k, b_v, b_o) = (b()?, b()?, b()?, b()?);
        Ok(AttentionWeights {
            w_q,
            w_k,
            w_v,
            w_o,
            b_q,
            b_k,
            b_v,
            b_o,
        })
    }

    pub fn width(&self) -> usize {
        self.w_q.dims()[0]
    }

    /// Record the weights on `tape` as trainable leaves.
    pub fn bind(&self, tape: &mut Tape<T>) -> AttentionVars {
        AttentionVars {
            w_q: tape.leaf(self.w_q.clone()),
            b_q: tape.leaf(self.b_q.clone()),
            w_k: tape.leaf(self.w_k.clone()),
            b_k: tape.leaf(self.b_k.clone()),
            w_v: tape.leaf(self.w_v.clone()),
            b_v: tape.leaf(self.b_v.clone()),
            w_o: tape.leaf(self.w_o.clone()),
            b_o: tape.leaf(self.b_o.clone()),
        }
    }
}

/// Attention weights already recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `[B, T, D]`
    pub values: Var,
    /// Post-softmax maps, `[B, H, T, T]`.
    pub maps: Var,
}

/// `attn = softmax(q·kᵀ/√d)`, `out = attn·v` over `[B, H, T, d]` inputs.
pub fn sdpa<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let qd = tape.dims(q).to_vec();
    if qd.len() != 4 {
        return Err(Error::Rank {
            op: "sdpa",
            expected: "rank 4 [B, H, T, d]",
            dims: qd,
        });
    }
    for other in [k, v] {
        if tape.dims(other) != qd.as_slice() {
            return Err(Error::Dimension {
                op: "sdpa",
                lhs: qd,
                rhs: tape.dims(other).to_vec(),
            });
        }
    }
    let d = qd[3];
    let kt = tape.transpose_last2(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, T::one() / T::lit(d as f64).sqrt());
    let attn = tape.softmax_lastdim(scores);
    let out = tape.matmul(attn, v)?;
    Ok((out, attn))
}

fn project<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Multi-head self-attention over `x: [B, T, D]`.
pub fn mhsa<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    w: &AttentionVars,
    n_heads: usize,
) -> Result<AttentionOutput> {
    let xd = tape.dims(x).to_vec();
    if xd.len() != 3 {
        return Err(Error::Rank {
            op: "mhsa",
            expected: "rank 3 [B, T, D]",
            dims: xd,
        });
    }
    let (b, t, d) = (xd[0], xd[1], xd[2]);
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::config(format!(
            "attention width {d} is not divisible into {n_heads} heads"
        )));
    }
    let hd = d / n_heads;
    let heads = |tape: &mut Tape<T>, wv: Var, bv: Var| -> Result<Var> {
        let p = project(tape, x, wv, bv)?;
        let p = tape.reshape(p, [b, t, n_heads, hd])?;
        tape.swap_axes12(p)
    };
    let q = heads(tape, w.w_q, w.b_q)?;
    let k = heads(tape, w.w_k, w.b_k)?;
    let v = heads(tape, w.w_v, w.b_v)?;
    let (out, maps) = sdpa(tape, q, k, v)?;
    let out = tape.swap_axes12(out)?;
    let out = tape.reshape(out, [b, t, d])?;
    let values = project(tape, out, w.w_o, w.b_o)?;
    Ok(AttentionOutput { values, maps })
}

/// Single-head self-attention; `mhsa` with one head spanning the full width.
pub fn shsa<T: Real>(tape: &mut Tape<T>, x: Var, w: &AttentionVars) -> Result<AttentionOutput> {
    mhsa(tape, x, w, 1)
}
