use indexmap::IndexMap;
use rand::Rng;

use super::config::{ClsProjection, ModelConfig};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::init::{trunc_normal, INIT_STD};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

/// One entry of a model's parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    /// Sublayer the parameter belongs to, e.g. `blocks.0.attn`.
    pub group: String,
    pub dims: Vec<usize>,
    pub init: Init,
}

struct LayoutBuilder(Vec<ParamSpec>);

impl LayoutBuilder {
    fn push(&mut self, group: &str, leaf: &str, dims: &[usize], init: Init) {
        let name = if leaf.is_empty() {
            group.to_string()
        } else {
            format!("{group}.{leaf}")
        };
        self.0.push(ParamSpec {
            name,
            group: group.to_string(),
            dims: dims.to_vec(),
            init,
        });
    }

    fn linear(&mut self, group: &str, prefix: &str, fan_in: usize, fan_out: usize) {
        let sep = if prefix.is_empty() { "" } else { "." };
        self.push(group, &format!("{prefix}{sep}weight"), &[fan_in, fan_out], Init::TruncNormal);
        self.push(group, &format!("{prefix}{sep}bias"), &[fan_out], Init::Zeros);
    }

    fn norm(&mut self, group: &str, width: usize) {
        self.push(group, "gamma", &[width], Init::Ones);
        self.push(group, "beta", &[width], Init::Zeros);
    }

    fn attention(&mut self, group: &str, width: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(group, p, width, width);
        }
    }
}

/// Every trainable tensor of `cfg`, in store order: embedding, positional, blocks by
/// index (sublayers in application order), final norm, head.
pub fn param_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let c = cfg.embed_dim;
    let n = cfg.num_patches();
    let mut b = LayoutBuilder(Vec::new());
    b.linear("patch_embed", "", cfg.patch_dim(), c);
    b.push("cls_token", "", &[1, 1, c], Init::TruncNormal);
    b.push("pos_embed", "", &[1, n + 1, c], Init::TruncNormal);
    let learned_cls = cfg.variant.splits_cls() && cfg.cls_projection == ClsProjection::LearnedLinear;
    for i in 0..cfg.depth {
        let g = |s: &str| format!("blocks.{i}.{s}");
        if cfg.variant.has_spatial_attention() {
            b.norm(&g("norm1"), c);
            b.attention(&g("attn"), c);
        }
        if cfg.variant.has_channel_attention() {
            b.norm(&g("channel_norm"), cfg.channel_width());
            if learned_cls {
                b.linear(&g("cls_in"), "", c, n);
            }
            b.attention(&g("channel_attn"), cfg.channel_width());
            if learned_cls {
                b.linear(&g("cls_out"), "", n, c);
            }
        }
        if cfg.variant.has_mlp() {
            b.norm(&g("norm2"), c);
            b.linear(&g("mlp"), "fc1", c, cfg.mlp_hidden());
            b.linear(&g("mlp"), "fc2", cfg.mlp_hidden(), c);
        }
    }
    b.norm("norm", c);
    b.linear("head", "", c, cfg.n_classes);
    b.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub group: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Ordered, uniquely named trainable tensors with matching gradient slots.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    /// Allocate and initialize every tensor of `layout`.
    pub fn init<R: Rng + ?Sized>(layout: &[ParamSpec], rng: &mut R) -> Result<Self> {
        let mut store = Self::new();
        for spec in layout {
            let value = match spec.init {
                Init::TruncNormal => trunc_normal(&spec.dims, INIT_STD, rng)?,
                Init::Zeros => Tensor::zeros(spec.dims.clone())?,
                Init::Ones => Tensor::ones(spec.dims.clone())?,
            };
            store.insert(&spec.name, &spec.group, value)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, group: &str, value: Tensor<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        let grad = value.zeros_like();
        self.entries.insert(
            name.to_string(),
            Param {
                group: group.to_string(),
                value,
                grad,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count over all tensors.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|p| &p.grad)
    }

    /// Replace a tensor's value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("no parameter named {name:?}")))?;
        if p.value.dims() != value.dims() {
            return Err(Error::Dimension {
                op: "set_param",
                lhs: p.value.dims().to_vec(),
                rhs: value.dims().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    /// Scalar count per sublayer group, in store order.
    pub fn group_counts(&self) -> IndexMap<String, usize> {
        let mut out: IndexMap<String, usize> = IndexMap::new();
        for p in self.entries.values() {
            *out.entry(p.group.clone()).or_default() += p.value.len();
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Record every tensor on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            vars: self
                .entries
                .iter()
                .map(|(k, p)| (k.clone(), tape.leaf(p.value.clone())))
                .collect(),
        }
    }

    /// Copy the tape's gradients into the gradient slots. Parameters the loss did not
    /// reach get zeros.
    pub fn collect_grads(&mut self, tape: &Tape<T>, bound: &BoundParams) -> Result<()> {
        for (name, p) in self.entries.iter_mut() {
            let var = bound.get(name)?;
            match tape.grad(var) {
                Some(g) => p.grad.data_mut().copy_from_slice(g.data()),
                None => p.grad.data_mut().fill(T::zero()),
            }
        }
        Ok(())
    }

    /// Plain gradient descent: `p <- p - lr * grad(p)`.
    pub fn sgd_step(&mut self, lr: T) {
        for p in self.entries.values_mut() {
            for (v, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v -= lr * g;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            group: p.group.clone(),
                            value: p.value.cast(),
                            grad: p.grad.cast(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Check that names, order and shapes match `layout` exactly.
    pub fn check_layout(&self, layout: &[ParamSpec]) -> Result<()> {
        if self.len() != layout.len() {
            return Err(Error::config(format!(
                "parameter store has {} tensors, layout expects {}",
                self.len(),
                layout.len()
            )));
        }
        for ((name, p), spec) in self.entries.iter().zip(layout) {
            if *name != spec.name || p.value.dims() != spec.dims.as_slice() {
                return Err(Error::config(format!(
                    "parameter {name:?} {:?} does not match layout entry {:?} {:?}",
                    p.value.dims(),
                    spec.name,
                    spec.dims
                )));
            }
        }
        Ok(())
    }
}

/// Parameters recorded on a tape, looked up by name.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("no parameter named {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
