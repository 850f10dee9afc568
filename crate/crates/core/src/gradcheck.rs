//! Central finite-difference gradient checking in 64-bit.
//!
//! Numerical gradients are computed from forward evaluations only, so they share no
//! code with the backward rules they validate.

use indexmap::IndexMap;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::model::Model;
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Magnitude below which errors are measured against this floor instead of the
/// gradient itself. Keeps round-off on near-zero gradients from reading as failures.
pub const REL_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central difference of `f` with respect to every element of `x`.
pub fn numeric_gradient(
    x: &Tensor<f64>,
    h: f64,
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
) -> Result<Tensor<f64>> {
    let mut probe = x.clone();
    let mut grad = x.zeros_like();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest elementwise [`relative_error`] between two gradients of equal shape.
pub fn max_relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Max relative error for each input, in input order.
    pub per_input: Vec<f64>,
}

impl GradCheck {
    pub fn max(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

/// Compare tape gradients of a scalar-valued `build` with central differences.
///
/// `build` receives a fresh tape and one leaf per input and must return a scalar.
pub fn check_op<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let out = build(&mut t, &vs)?;
        Ok(t.value(out).data()[0])
    };

    let mut per_input = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let numeric = numeric_gradient(&inputs[i], h, |probe| {
            let mut xs = inputs.to_vec();
            xs[i] = probe.clone();
            eval(&xs)
        })?;
        let analytic = tape
            .grad(*var)
            .cloned()
            .unwrap_or_else(|| inputs[i].zeros_like());
        per_input.push(max_relative_error(&analytic, &numeric));
    }
    Ok(GradCheck { per_input })
}

/// Full-model check results keyed by parameter name, in store order.
#[derive(Debug, Clone)]
pub struct ModelGradCheck {
    pub per_param: IndexMap<String, f64>,
    pub groups: IndexMap<String, f64>,
}

impl ModelGradCheck {
    pub fn max(&self) -> f64 {
        self.per_param.values().copied().fold(0.0, f64::max)
    }
}

/// Compare backprop gradients of the mean cross-entropy loss against central
/// differences for every scalar parameter of `model`.
pub fn check_model(model: &Model<f64>, images: &Tensor<f64>, labels: &[usize], h: f64) -> Result<ModelGradCheck> {
    let mut work = model.clone();
    work.loss_and_grads(images, labels)?;
    let analytic = work.params().clone();

    let mut per_param = IndexMap::new();
    let mut groups: IndexMap<String, f64> = IndexMap::new();
    for (name, p) in analytic.iter() {
        let numeric = numeric_gradient(&p.value, h, |probe| {
            work.params_mut().set(name, probe.clone())?;
            work.loss(images, labels)
        })?;
        work.params_mut().set(name, p.value.clone())?;
        let err = max_relative_error(&p.grad, &numeric);
        per_param.insert(name.to_string(), err);
        let g = groups.entry(p.group.clone()).or_insert(0.0);
        *g = g.max(err);
    }
    Ok(ModelGradCheck { per_param, groups })
}
