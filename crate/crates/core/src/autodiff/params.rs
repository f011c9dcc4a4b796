//! Named parameter storage and the adaptive-moment optimizer.

use std::collections::BTreeMap;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradient per parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    steps: u64,
}

impl Param {
    fn new(value: Tensor) -> Self {
        let n = value.len();
        Self {
            value,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            steps: 0,
        }
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// Named trainable tensors plus their optimizer state. Iteration order is
/// the lexicographic order of names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::KeyMismatch(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, Param::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    /// Replaces a value, keeping the shape fixed.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::KeyMismatch(format!("unknown parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, p)| (k.as_str(), &p.value))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// L2 norm of each parameter, for diagnostics.
    pub fn norms(&self) -> Vec<(String, f64)> {
        self.params
            .iter()
            .map(|(k, p)| (k.clone(), p.value.l2_norm()))
            .collect()
    }

    /// Records every parameter as a leaf. With `trainable == false` they
    /// enter as constants and receive no gradient.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, p)| (k.clone(), tape.leaf(p.value.clone(), trainable)))
            .collect();
        Bound { vars }
    }

    /// Adaptive-moment step with bias correction
    /// (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
    pub fn adam_update(&mut self, grads: &GradMap, lr: f64) -> Result<()> {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        if grads.len() != self.params.len() || grads.keys().ne(self.params.keys()) {
            let missing: Vec<_> = self
                .params
                .keys()
                .filter(|k| !grads.contains_key(*k))
                .chain(grads.keys().filter(|k| !self.params.contains_key(*k)))
                .cloned()
                .collect();
            return Err(Error::KeyMismatch(format!(
                "gradient keys do not match parameters: {missing:?}"
            )));
        }
        for (name, g) in grads {
            if g.shape() != self.params[name].value.shape() {
                return Err(Error::Shape(format!(
                    "gradient for `{name}` has shape {:?}, parameter has {:?}",
                    g.shape(),
                    self.params[name].value.shape()
                )));
            }
        }
        for (name, p) in self.params.iter_mut() {
            let g = grads[name].data();
            p.steps += 1;
            let t = p.steps as f64;
            let c1 = 1.0 - BETA1.powf(t);
            let c2 = 1.0 - BETA2.powf(t);
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let m = BETA1 * p.first_moment[i] + (1.0 - BETA1) * g[i];
                let v = BETA2 * p.second_moment[i] + (1.0 - BETA2) * g[i] * g[i];
                p.first_moment[i] = m;
                p.second_moment[i] = v;
                values[i] -= lr * (m / c1) / ((v / c2).sqrt() + EPS);
            }
        }
        Ok(())
    }
}

/// Tape variables for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binding from explicit `(name, variable)` pairs, e.g. to treat
    /// parameters as ordinary inputs of a gradient check.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::KeyMismatch(format!("parameter `{name}` not bound")))
    }

    /// Gradient for every bound parameter; unreached parameters get zeros.
    pub fn gradients(&self, tape: &Tape, grads: &mut Gradients) -> GradMap {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
                (k.clone(), g)
            })
            .collect()
    }
}

/// Zero gradient for every parameter of `params`.
pub fn zero_grads(params: &ParamSet) -> GradMap {
    params
        .iter()
        .map(|(k, t)| (k.to_string(), Tensor::zeros(t.shape())))
        .collect()
}

/// `acc += scale * g`, elementwise over matching keys.
pub fn accumulate(acc: &mut GradMap, g: &GradMap, scale: f64) {
    for (k, t) in g {
        if let Some(a) = acc.get_mut(k) {
            let mut s = t.clone();
            s.scale_assign(scale);
            a.add_assign(&s);
        }
    }
}
