//! Reverse-mode differentiation over an append-only tape.
//!
//! Every operation evaluates eagerly, appends a node holding its value and whatever
//! the gradient rule needs, and returns a [`Var`] handle. [`Tape::backward`] walks the
//! nodes in strict reverse order from the loss.

use crate::error::{Error, Result};
use crate::tensor::{
    broadcast_block, gelu_grad, layernorm_forward, MatmulLayout, Real, Tensor,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var, MatmulLayout),
    TransposeLast2(Var),
    SwapAxes12(Var),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    MeanAll(Var),
    SumAll(Var),
    Concat1(Var, Var),
    Slice1 { x: Var, start: usize },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input; receives a gradient on backward.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass, if `v` was reachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Drop gradients so that backward may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let layout = MatmulLayout::new(self.dims(a), self.dims(b))?;
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b, layout), rg))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose_last2()?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::TransposeLast2(x), rg))
    }

    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).swap_axes12()?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SwapAxes12(x), rg))
    }

    pub fn reshape(&mut self, x: Var, dims: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(dims)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let out = self.value(x).softmax_lastdim();
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let fwd = layernorm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat: fwd.xhat,
            rstd: fwd.rstd,
        };
        Ok(self.push(fwd.out, op, rg))
    }

    /// `a + b`, with `b` optionally broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).scale(s);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).gelu();
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let out = self.value(x).mean_all();
        let rg = self.any_grad(&[x]);
        self.push(out, Op::MeanAll(x), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::SumAll(x), rg)
    }

    pub fn concat_axis1(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).concat_axis1(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Concat1(a, b), rg))
    }

    pub fn slice_axis1(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_axis1(start, len)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Slice1 { x, start }, rg))
    }

    pub fn split_axis1(&mut self, x: Var, at: usize) -> Result<(Var, Var)> {
        let extent = self.dims(x).get(1).copied().unwrap_or(0);
        if self.dims(x).len() < 2 || at == 0 || at >= extent {
            return Err(Error::Index {
                op: "split_axis1",
                index: at,
                extent,
            });
        }
        Ok((self.slice_axis1(x, 0, at)?, self.slice_axis1(x, at, extent - at)?))
    }

    /// Mean cross-entropy of `logits: [B, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let dims = self.dims(logits).to_vec();
        if dims.len() != 2 || dims[0] != labels.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: dims,
                rhs: vec![labels.len()],
            });
        }
        let k = dims[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index {
                op: "cross_entropy",
                index: bad,
                extent: k,
            });
        }
        let probs = self.value(logits).softmax_lastdim().into_data();
        let mut loss = T::zero();
        for (row, &label) in labels.iter().enumerate() {
            let z = &self.value(logits).data()[row * k..(row + 1) * k];
            let max = z.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = z.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - z[label];
        }
        loss /= T::lit(labels.len() as f64);
        let rg = self.any_grad(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            probs,
            labels: labels.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Populate gradients of every node reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.dims(loss)
            )));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor<T>) -> Result<()> {
        let mut pending: Vec<(Var, Tensor<T>)> = Vec::with_capacity(3);
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b, layout) => {
                let (av, bv) = (val(*a), val(*b));
                let mut da = rg(*a).then(|| av.zeros_like());
                let mut db = rg(*b).then(|| bv.zeros_like());
                layout.backward(
                    av.data(),
                    bv.data(),
                    g.data(),
                    da.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                pending.extend(da.map(|t| (*a, t)));
                pending.extend(db.map(|t| (*b, t)));
            }
            Op::TransposeLast2(x) => pending.push((*x, g.transpose_last2()?)),
            Op::SwapAxes12(x) => pending.push((*x, g.swap_axes12()?)),
            Op::Reshape(x) => pending.push((*x, g.reshape(val(*x).dims())?)),
            Op::Softmax(x) => {
                let y = &node.value;
                let n = *y.dims().last().expect("rank >= 1");
                let mut dx = g.clone();
                for (dxr, yr) in dx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: T = dxr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (d, &yv) in dxr.iter_mut().zip(yr) {
                        *d = yv * (*d - dot);
                    }
                }
                pending.push((*x, dx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = val(*gamma).data();
                let d = gam.len();
                let nf = T::lit(d as f64);
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = vec![T::zero(); g.len()];
                for (r, &inv) in rstd.iter().enumerate() {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..d {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        let dh = gr[j] * gam[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= nf;
                    mean_dh_h /= nf;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        dx[r * d + j] = inv * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                pending.push((*x, Tensor::new(val(*x).dims(), dx)?));
                pending.push((*gamma, Tensor::new([d], dgamma)?));
                pending.push((*beta, Tensor::new([d], dbeta)?));
            }
            Op::Add(a, b) => {
                pending.push((*a, g.clone()));
                if rg(*b) {
                    let bv = val(*b);
                    let block = broadcast_block(val(*a).dims(), bv.dims(), "add")?;
                    let mut db = vec![T::zero(); block];
                    for chunk in g.data().chunks(block) {
                        for (d, &v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    pending.push((*b, Tensor::new(bv.dims(), db)?));
                }
            }
            Op::Mul(a, b) => {
                pending.push((*a, g.mul(val(*b))?));
                pending.push((*b, g.mul(val(*a))?));
            }
            Op::Scale(x, s) => pending.push((*x, g.scale(*s))),
            Op::Gelu(x) => {
                let xv = val(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &xv)| gv * gelu_grad(xv))
                    .collect();
                pending.push((*x, Tensor::new(xv.dims(), data)?));
            }
            Op::MeanAll(x) => {
                let xv = val(*x);
                let each = g.data()[0] / T::lit(xv.len() as f64);
                pending.push((*x, Tensor::full(xv.dims(), each)?));
            }
            Op::SumAll(x) => pending.push((*x, Tensor::full(val(*x).dims(), g.data()[0])?)),
            Op::Concat1(a, b) => {
                let (ga, gb) = g.split_axis1(val(*a).dims()[1])?;
                pending.push((*a, ga));
                pending.push((*b, gb));
            }
            Op::Slice1 { x, start } => {
                let xv = val(*x);
                let xd = xv.dims();
                let inner: usize = xd[2..].iter().product();
                let (len, extent) = (g.dims()[1], xd[1]);
                let mut dx = xv.zeros_like();
                for n in 0..xd[0] {
                    let dst = n * extent * inner + start * inner;
                    let src = n * len * inner;
                    dx.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[src..src + len * inner]);
                }
                pending.push((*x, dx));
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
            } => {
                let lv = val(*logits);
                let k = lv.dims()[1];
                let scale = g.data()[0] / T::lit(labels.len() as f64);
                let mut d = probs.clone();
                for (row, &label) in labels.iter().enumerate() {
                    d[row * k + label] -= T::one();
                }
                for v in d.iter_mut() {
                    *v *= scale;
                }
                pending.push((*logits, Tensor::new(lv.dims(), d)?));
            }
        }
        for (v, t) in pending {
            self.accumulate(v, t);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let mut tape = Tape::<f64>::new();
        let vals = [1.5, -2.0, 0.25, 4.0];
        let x = tape.leaf(Tensor::from_f64([4], &vals).unwrap());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq);
        let loss = tape.scale(s, 0.5);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &vals);
    }

    #[test]
    fn backward_contract_and_state_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones([3]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::State(_))));
        tape.reset_grads();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 3]);
    }

    #[test]
    fn constants_and_unreachable_leaves_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::ones([2]).unwrap());
        let x = tape.leaf(Tensor::ones([2]).unwrap());
        let unused = tape.leaf(Tensor::ones([2]).unwrap());
        let y = tape.add(x, c).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(unused).is_none());
        assert!(tape.grad(x).is_some());
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros([2, 3, 4]).unwrap());
        let b = tape.leaf(Tensor::zeros([1, 3, 4]).unwrap());
        let y = tape.add(x, b).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap().dims(), &[1, 3, 4]);
        assert!(tape.grad(b).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::zeros([2, 4]).unwrap());
        let loss = tape.cross_entropy(z, &[0, 3]).unwrap();
        assert!((tape.value(loss).data()[0] - 4f64.ln()).abs() < 1e-12);
        tape.backward(loss).unwrap();
        let g = tape.grad(z).unwrap().data();
        assert!((g[0] - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!((g[1] - 0.125).abs() < 1e-12);
        assert!(tape.cross_entropy(z, &[4, 0]).is_err());
    }
}
