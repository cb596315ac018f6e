//! Named parameter storage with gradient accumulators and Adam state.

use std::collections::BTreeMap;

use crate::error::{NnError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Entry {
    value: Tensor,
    grad: Vec<f64>,
    moment1: Vec<f64>,
    moment2: Vec<f64>,
}

/// Map from parameter name to value, gradient accumulator, and optimizer
/// moments. The Adam step counter is shared across all parameters of one
/// model. Iteration order is the lexicographic name order (BTreeMap), which
/// keeps every pass over the set deterministic.
#[derive(Debug, Clone)]
pub struct ParameterSet {
    entries: BTreeMap<String, Entry>,
    step: u64,
    grads_populated: bool,
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet {
            entries: BTreeMap::new(),
            step: 0,
            grads_populated: false,
        }
    }

    pub fn define(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(NnError::DuplicateParameter(name.to_string()));
        }
        let n = value.len();
        self.entries.insert(
            name.to_string(),
            Entry {
                value,
                grad: vec![0.0; n],
                moment1: vec![0.0; n],
                moment2: vec![0.0; n],
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| NnError::UnknownParameter(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&[f64]> {
        self.entries
            .get(name)
            .map(|e| e.grad.as_slice())
            .ok_or_else(|| NnError::UnknownParameter(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply `f` to every value of one parameter (e.g. projection clamps).
    /// Resets that parameter's optimizer moments? No: moments are kept, the
    /// projection is treated as part of the update.
    pub fn apply(&mut self, name: &str, f: impl Fn(f64) -> f64) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParameter(name.to_string()))?;
        for v in entry.value.values_mut() {
            *v = f(*v);
        }
        Ok(())
    }

    /// Overwrite one stored value; used by finite-difference harnesses.
    pub fn set_value(&mut self, name: &str, idx: usize, v: f64) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParameter(name.to_string()))?;
        entry.value.values_mut()[idx] = v;
        Ok(())
    }

    /// Replace a parameter tensor wholesale, keeping shape.
    pub fn set_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParameter(name.to_string()))?;
        if entry.value.shape() != value.shape() {
            return Err(NnError::ShapeMismatch {
                op: "set_tensor",
                lhs: entry.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        entry.value = value;
        Ok(())
    }

    pub fn grads_populated(&self) -> bool {
        self.grads_populated
    }

    pub(crate) fn begin_backward(&mut self, accumulate: bool) -> Result<()> {
        if self.grads_populated && !accumulate {
            return Err(NnError::GradientsAlreadyPopulated);
        }
        if !accumulate {
            for entry in self.entries.values_mut() {
                entry.grad.iter_mut().for_each(|g| *g = 0.0);
            }
        }
        self.grads_populated = true;
        Ok(())
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, grad: &[f64]) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| NnError::UnknownParameter(name.to_string()))?;
        debug_assert_eq!(entry.grad.len(), grad.len());
        for (g, &d) in entry.grad.iter_mut().zip(grad) {
            *g += d;
        }
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        for entry in self.entries.values_mut() {
            entry.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.grads_populated = false;
    }

    /// Standard Adam update (β1=0.9, β2=0.999, ε=1e-8). Increments the shared
    /// step counter and clears gradients.
    pub fn adam_step(&mut self, learning_rate: f64) -> Result<()> {
        if !self.grads_populated {
            return Err(NnError::GradientsNotPopulated);
        }
        for (name, entry) in self.entries.iter() {
            if entry.grad.iter().any(|g| !g.is_finite()) {
                return Err(NnError::NonFiniteGradient(name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - ADAM_BETA1.powf(t);
        let bias2 = 1.0 - ADAM_BETA2.powf(t);
        for entry in self.entries.values_mut() {
            let values = entry.value.values_mut();
            for i in 0..values.len() {
                let g = entry.grad[i];
                entry.moment1[i] = ADAM_BETA1 * entry.moment1[i] + (1.0 - ADAM_BETA1) * g;
                entry.moment2[i] = ADAM_BETA2 * entry.moment2[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = entry.moment1[i] / bias1;
                let v_hat = entry.moment2[i] / bias2;
                values[i] -= learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
            }
            entry.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.grads_populated = false;
        Ok(())
    }

    /// Export (name, tensor) pairs in name order. Values only; optimizer
    /// state is run-local and not persisted.
    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.clone(), e.value.clone()))
            .collect()
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut set = ParameterSet::new();
        for (name, tensor) in entries {
            set.define(&name, tensor)?;
        }
        Ok(set)
    }
}

/// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(rng: &mut Rng, fan_in: usize, fan_out: usize, shape: Vec<usize>) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.uniform(-a, a)).collect();
    Tensor::with_shape_unchecked(shape, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_set() -> ParameterSet {
        let mut p = ParameterSet::new();
        p.define("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut p = simple_set();
        p.begin_backward(false).unwrap();
        p.adam_step(0.1).unwrap();
        assert_eq!(p.get("w").unwrap().values(), &[1.0, -2.0]);
        assert_eq!(p.step_count(), 1);
    }

    #[test]
    fn first_step_moves_against_gradient_sign_by_lr() {
        // Hand-evaluated Adam recurrence at t=1:
        //   m = (1-β1)g, v = (1-β2)g², m̂ = g, v̂ = g²
        //   Δ = -lr·g/(|g|+ε) ≈ -lr·sign(g)
        let mut p = simple_set();
        p.begin_backward(false).unwrap();
        p.accumulate_grad("w", &[0.5, -3.0]).unwrap();
        p.adam_step(0.01).unwrap();
        let w = p.get("w").unwrap().values();
        let expect0 = 1.0 - 0.01 * 0.5 / (0.5 + ADAM_EPSILON);
        let expect1 = -2.0 - 0.01 * (-3.0) / (3.0 + ADAM_EPSILON);
        assert!((w[0] - expect0).abs() < 1e-15);
        assert!((w[1] - expect1).abs() < 1e-15);
    }

    #[test]
    fn adam_requires_gradients() {
        let mut p = simple_set();
        assert!(matches!(
            p.adam_step(0.1),
            Err(NnError::GradientsNotPopulated)
        ));
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = simple_set();
        p.begin_backward(false).unwrap();
        p.accumulate_grad("w", &[f64::NAN, 0.0]).unwrap();
        match p.adam_step(0.1) {
            Err(NnError::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("expected NonFiniteGradient, got {:?}", other),
        }
    }

    #[test]
    fn duplicate_definition_rejected() {
        let mut p = simple_set();
        assert!(p.define("w", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn same_seed_identical_updates() {
        let run = || {
            let mut rng = Rng::new(5);
            let mut p = ParameterSet::new();
            p.define("w", glorot_uniform(&mut rng, 4, 4, vec![4, 4]))
                .unwrap();
            for step in 0..10 {
                p.begin_backward(false).unwrap();
                let g: Vec<f64> = (0..16).map(|i| ((i + step) as f64).sin()).collect();
                p.accumulate_grad("w", &g).unwrap();
                p.adam_step(0.01).unwrap();
            }
            p.get("w").unwrap().values().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "same seed must give bit-identical parameters");
    }
}
