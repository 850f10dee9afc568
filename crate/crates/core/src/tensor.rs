//! Dense row-major tensors of rank 1 to 4 and the forward kernels used by the tape.
//!
//! Kernels here never record anything; [`crate::autodiff::Tape`] wraps them and
//! supplies the gradient rules.

use std::cell::Cell;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

/// sqrt(2/pi), the scale inside the tanh form of GELU.
pub const GELU_SCALE: f64 = 0.7978845608;
pub const GELU_CUBIC: f64 = 0.044715;

/// Scalar element type. Implemented for `f32` (training) and `f64` (gradient checks).
pub trait Real:
    Float
    + FromPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const NAME: &'static str;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    const NAME: &'static str = "f64";
}

thread_local! {
    static MATMUL_MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulates performed by forward [`Tensor::matmul`] calls on this thread
/// since the last [`reset_matmul_macs`]. Backward products are not counted.
pub fn matmul_macs() -> u64 {
    MATMUL_MACS.with(Cell::get)
}

pub fn reset_matmul_macs() {
    MATMUL_MACS.with(|c| c.set(0));
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_RANK || dims.contains(&0) {
        return Err(Error::Rank {
            op: "tensor",
            expected: "rank 1..=4 with positive extents",
            dims: dims.to_vec(),
        });
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let dims = dims.into();
        check_dims(&dims)?;
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: dims,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_f64(dims: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: T) -> Result<Self> {
        let dims = dims.into();
        check_dims(&dims)?;
        let n = dims.iter().product();
        Ok(Tensor {
            dims,
            data: vec![value; n],
        })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::full(dims, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    /// `n x n` identity matrix.
    pub fn eye(n: usize) -> Result<Self> {
        let mut t = Self::zeros([n, n])?;
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        Ok(t)
    }

    pub fn zeros_like(&self) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value at a multi-index.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.dims.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.dims).enumerate() {
            assert!(ix < d, "index {ix} out of bounds for axis {i} of extent {d}");
            flat = flat * d + ix;
        }
        self.data[flat]
    }

    pub fn reshape(&self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        check_dims(&dims)?;
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.dims.clone(),
                rhs: dims,
            });
        }
        Ok(Tensor {
            dims,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of dims and every element.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    /// Batched matrix product `[..., M, K] x [..., K, P] -> [..., M, P]`.
    ///
    /// Leading batch extents must be equal, or absent on one side (that side is
    /// reused for every batch entry).
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let layout = MatmulLayout::new(&self.dims, &other.dims)?;
        let mut out = vec![T::zero(); layout.batch * layout.m * layout.p];
        layout.forward(&self.data, &other.data, &mut out);
        MATMUL_MACS.with(|c| c.set(c.get() + (layout.batch * layout.m * layout.k * layout.p) as u64));
        Ok(Tensor {
            dims: layout.out_dims.clone(),
            data: out,
        })
    }

    /// Exchange the last two axes.
    pub fn transpose_last2(&self) -> Result<Self> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::Rank {
                op: "transpose_last2",
                expected: "rank >= 2",
                dims: self.dims.clone(),
            });
        }
        let (a, b) = (self.dims[r - 2], self.dims[r - 1]);
        let batch = self.data.len() / (a * b);
        let mut data = vec![T::zero(); self.data.len()];
        for n in 0..batch {
            let src = &self.data[n * a * b..(n + 1) * a * b];
            let dst = &mut data[n * a * b..(n + 1) * a * b];
            for i in 0..a {
                for j in 0..b {
                    dst[j * a + i] = src[i * b + j];
                }
            }
        }
        let mut dims = self.dims.clone();
        dims.swap(r - 2, r - 1);
        Ok(Tensor { dims, data })
    }

    /// `[A, B, C, D] -> [A, C, B, D]`; the head split/merge permutation.
    pub fn swap_axes12(&self) -> Result<Self> {
        if self.rank() != 4 {
            return Err(Error::Rank {
                op: "swap_axes12",
                expected: "rank 4",
                dims: self.dims.clone(),
            });
        }
        let [a, b, c, d] = [self.dims[0], self.dims[1], self.dims[2], self.dims[3]];
        let mut data = vec![T::zero(); self.data.len()];
        for i in 0..a {
            for j in 0..b {
                for k in 0..c {
                    let src = ((i * b + j) * c + k) * d;
                    let dst = ((i * c + k) * b + j) * d;
                    data[dst..dst + d].copy_from_slice(&self.data[src..src + d]);
                }
            }
        }
        Ok(Tensor {
            dims: vec![a, c, b, d],
            data,
        })
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax_lastdim(&self) -> Self {
        let n = *self.dims.last().expect("rank >= 1");
        let mut data = self.data.clone();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Tensor {
            dims: self.dims.clone(),
            data,
        }
    }

    /// Layer normalization over the last axis.
    pub fn layernorm(&self, gamma: &Self, beta: &Self, eps: T) -> Result<Self> {
        Ok(layernorm_forward(self, gamma, beta, eps)?.out)
    }

    /// Elementwise sum. `other` may omit (or set to 1) leading axes of `self`, in which
    /// case it is reused across them.
    pub fn add(&self, other: &Self) -> Result<Self> {
        let block = broadcast_block(&self.dims, &other.dims, "add")?;
        let mut data = self.data.clone();
        for chunk in data.chunks_mut(block) {
            for (v, &o) in chunk.iter_mut().zip(&other.data) {
                *v += o;
            }
        }
        Ok(Tensor {
            dims: self.dims.clone(),
            data,
        })
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::Dimension {
                op: "mul",
                lhs: self.dims.clone(),
                rhs: other.dims.clone(),
            });
        }
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).collect(),
        })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn gelu(&self) -> Self {
        self.map(gelu)
    }

    pub fn mean_all(&self) -> Self {
        Tensor::scalar(self.sum() / T::lit(self.data.len() as f64))
    }

    /// Concatenate along axis 1; all other extents must agree.
    pub fn concat_axis1(&self, other: &Self) -> Result<Self> {
        let mismatch = || Error::Dimension {
            op: "concat_axis1",
            lhs: self.dims.clone(),
            rhs: other.dims.clone(),
        };
        if self.rank() < 2 || self.rank() != other.rank() {
            return Err(mismatch());
        }
        if self.dims[0] != other.dims[0] || self.dims[2..] != other.dims[2..] {
            return Err(mismatch());
        }
        let outer = self.dims[0];
        let inner: usize = self.dims[2..].iter().product();
        let (sa, sb) = (self.dims[1] * inner, other.dims[1] * inner);
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        for n in 0..outer {
            data.extend_from_slice(&self.data[n * sa..(n + 1) * sa]);
            data.extend_from_slice(&other.data[n * sb..(n + 1) * sb]);
        }
        let mut dims = self.dims.clone();
        dims[1] += other.dims[1];
        Ok(Tensor { dims, data })
    }

    /// Rows `start..start + len` along axis 1.
    pub fn slice_axis1(&self, start: usize, len: usize) -> Result<Self> {
        if self.rank() < 2 {
            return Err(Error::Rank {
                op: "slice_axis1",
                expected: "rank >= 2",
                dims: self.dims.clone(),
            });
        }
        let extent = self.dims[1];
        if len == 0 || start + len > extent {
            return Err(Error::Index {
                op: "slice_axis1",
                index: start + len,
                extent,
            });
        }
        let inner: usize = self.dims[2..].iter().product();
        let row = extent * inner;
        let mut data = Vec::with_capacity(self.dims[0] * len * inner);
        for n in 0..self.dims[0] {
            let base = n * row + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut dims = self.dims.clone();
        dims[1] = len;
        Ok(Tensor { dims, data })
    }

    /// Split along axis 1 into `[0, at)` and `[at, extent)`.
    pub fn split_axis1(&self, at: usize) -> Result<(Self, Self)> {
        if self.rank() < 2 {
            return Err(Error::Rank {
                op: "split_axis1",
                expected: "rank >= 2",
                dims: self.dims.clone(),
            });
        }
        let extent = self.dims[1];
        if at == 0 || at >= extent {
            return Err(Error::Index {
                op: "split_axis1",
                index: at,
                extent,
            });
        }
        Ok((self.slice_axis1(0, at)?, self.slice_axis1(at, extent - at)?))
    }
}

#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_SCALE) * (x + T::lit(GELU_CUBIC) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let c = T::lit(GELU_SCALE);
    let a = T::lit(GELU_CUBIC);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// Block length over which `rhs` repeats when broadcast against `lhs`.
pub(crate) fn broadcast_block(lhs: &[usize], rhs: &[usize], op: &'static str) -> Result<usize> {
    let lead = rhs.iter().take_while(|&&d| d == 1).count().min(rhs.len() - 1);
    let core = &rhs[lead..];
    if core.len() > lhs.len() || lhs[lhs.len() - core.len()..] != *core {
        return Err(Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        });
    }
    Ok(core.iter().product())
}

pub(crate) struct LayerNormForward<T> {
    pub out: Tensor<T>,
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layernorm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<LayerNormForward<T>> {
    let d = *x.dims.last().expect("rank >= 1");
    for p in [gamma, beta] {
        if p.dims != [d] {
            return Err(Error::Dimension {
                op: "layernorm",
                lhs: x.dims.clone(),
                rhs: p.dims.clone(),
            });
        }
    }
    let n = T::lit(d as f64);
    let rows = x.data.len() / d;
    let mut xhat = vec![T::zero(); x.data.len()];
    let mut out = vec![T::zero(); x.data.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        rstd.push(inv);
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gamma.data[j] + beta.data[j];
        }
    }
    Ok(LayerNormForward {
        out: Tensor {
            dims: x.dims.clone(),
            data: out,
        },
        xhat,
        rstd,
    })
}

#[derive(Debug, Clone)]
pub(crate) struct MatmulLayout {
    pub batch: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub m: usize,
    pub k: usize,
    pub p: usize,
    pub out_dims: Vec<usize>,
}

impl MatmulLayout {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || Error::Dimension {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, p) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 || (!ab.is_empty() && !bb.is_empty() && ab != bb) {
            return Err(mismatch());
        }
        let lead = if ab.is_empty() { bb } else { ab };
        let mut out_dims = lead.to_vec();
        out_dims.extend([m, p]);
        Ok(MatmulLayout {
            batch: lead.iter().product(),
            a_batched: !ab.is_empty(),
            b_batched: !bb.is_empty(),
            m,
            k,
            p,
            out_dims,
        })
    }

    pub fn forward<T: Real>(&self, a: &[T], b: &[T], out: &mut [T]) {
        let (m, k, p) = (self.m, self.k, self.p);
        for n in 0..self.batch {
            let a = self.a_slice(a, n);
            let b = self.b_slice(b, n);
            gemm_nn(a, b, &mut out[n * m * p..(n + 1) * m * p], m, k, p);
        }
    }

    /// Accumulates `g · bᵀ` into `da` and `aᵀ · g` into `db`, summing over the batch for
    /// whichever side was broadcast.
    pub fn backward<T: Real>(
        &self,
        a: &[T],
        b: &[T],
        g: &[T],
        mut da: Option<&mut [T]>,
        mut db: Option<&mut [T]>,
    ) {
        let (m, k, p) = (self.m, self.k, self.p);
        for n in 0..self.batch {
            let gn = &g[n * m * p..(n + 1) * m * p];
            if let Some(da) = da.as_deref_mut() {
                let off = if self.a_batched { n * m * k } else { 0 };
                gemm_nt(gn, self.b_slice(b, n), &mut da[off..off + m * k], m, p, k);
            }
            if let Some(db) = db.as_deref_mut() {
                let off = if self.b_batched { n * k * p } else { 0 };
                gemm_tn(self.a_slice(a, n), gn, &mut db[off..off + k * p], k, m, p);
            }
        }
    }

    fn a_slice<'a, T>(&self, a: &'a [T], n: usize) -> &'a [T] {
        let sz = self.m * self.k;
        if self.a_batched {
            &a[n * sz..(n + 1) * sz]
        } else {
            a
        }
    }

    fn b_slice<'a, T>(&self, b: &'a [T], n: usize) -> &'a [T] {
        let sz = self.k * self.p;
        if self.b_batched {
            &b[n * sz..(n + 1) * sz]
        } else {
            b
        }
    }
}

/// out[m×n] += a[m×k] · b[k×n]
fn gemm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×n] += a[m×k] · bᵀ, with b stored as [n×k]
fn gemm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out[m×n] += aᵀ · b, with a stored as [k×m] and b as [k×n]
fn gemm_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for kk in 0..k {
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = a[kk * m + i];
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
