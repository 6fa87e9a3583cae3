use indexmap::IndexMap;

use crate::error::{NumError, Result};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    pub adam: AdamState<T>,
}

/// Named parameters plus Adam state. The step count is shared by every
/// entry since they are always updated together.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T> {
    entries: IndexMap<String, ParamEntry<T>>,
    step: u64,
}

/// Gradients keyed like the [`ParamSet`] they were computed for.
pub type Grads<T> = IndexMap<String, Tensor<T>>;

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let n = value.numel();
        self.entries.insert(
            name.into(),
            ParamEntry {
                value,
                adam: AdamState {
                    m: vec![T::zero(); n],
                    v: vec![T::zero(); n],
                },
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (k, e) in &self.entries {
            out.insert(k.clone(), e.value.cast());
        }
        out.step = self.step;
        out
    }

    /// Registers every entry as a differentiable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> ParamVars {
        ParamVars {
            vars: self
                .entries
                .iter()
                .map(|(k, e)| (k.clone(), g.param(e.value.clone())))
                .collect(),
        }
    }

    /// Registers every entry as a constant (no gradient) of `g`.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> ParamVars {
        ParamVars {
            vars: self
                .entries
                .iter()
                .map(|(k, e)| (k.clone(), g.constant(e.value.clone())))
                .collect(),
        }
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Builds `expr` on a fresh graph with `wrt` bound as differentiable leaves
/// and returns the scalar loss with its gradient for every entry of `wrt`.
/// Entries that do not influence the loss get zero gradients.
pub fn eval_and_grad<T, F>(wrt: &ParamSet<T>, expr: F) -> Result<(T, Grads<T>)>
where
    T: Real,
    F: FnOnce(&mut Graph<T>, &ParamVars) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = wrt.bind(&mut g);
    let loss = expr(&mut g, &vars)?;
    let gr = g.backward(loss)?;
    let grads = vars.iter().map(|(k, v)| (k.to_string(), gr.get(v))).collect();
    Ok((g.value(loss).item(), grads))
}

/// One bias-corrected Adam update with β1 = 0.9, β2 = 0.999, ε = 1e-8.
pub fn adam_step<T: Real>(params: &mut ParamSet<T>, grads: &Grads<T>, lr: f64) -> Result<()> {
    if grads.len() != params.entries.len() {
        let missing = params
            .entries
            .keys()
            .find(|k| !grads.contains_key(*k))
            .or_else(|| grads.keys().find(|k| !params.entries.contains_key(*k)))
            .cloned()
            .unwrap_or_default();
        return Err(NumError::KeyMismatch(missing));
    }
    for (k, e) in &params.entries {
        let g = grads.get(k).ok_or_else(|| NumError::KeyMismatch(k.clone()))?;
        if g.shape() != e.value.shape() {
            return Err(NumError::ShapeMismatch {
                op: "adam_step",
                lhs: e.value.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(NumError::NonFiniteGrad(k.clone()));
        }
    }
    params.step += 1;
    let t = params.step as f64;
    let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
    let c1 = T::of(1.0 - ADAM_BETA1.powf(t));
    let c2 = T::of(1.0 - ADAM_BETA2.powf(t));
    let (lr, eps) = (T::of(lr), T::of(ADAM_EPS));
    for (k, e) in params.entries.iter_mut() {
        let g = grads[k].data();
        let ParamEntry { value, adam } = e;
        for (((p, m), v), &gi) in value
            .data_mut()
            .iter_mut()
            .zip(adam.m.iter_mut())
            .zip(adam.v.iter_mut())
            .zip(g)
        {
            *m = b1 * *m + (T::one() - b1) * gi;
            *v = b2 * *v + (T::one() - b2) * gi * gi;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
