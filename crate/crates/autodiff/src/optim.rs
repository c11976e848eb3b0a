use crate::error::{AutodiffError, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// A trainable tensor with its gradient buffer and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let n = value.len();
        Parameter {
            name: name.into(),
            value,
            grad: None,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the owning store, and in the output of [`ParamStore::bind`].
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter on `tape` as a variable; index `i` of the
    /// result corresponds to `ParamId(i)`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.variable(p.value.clone()))
            .collect()
    }

    /// Adds gradients produced by `backward` into each parameter's buffer.
    /// Parameters off the differentiable path keep their current state.
    pub fn accumulate(&mut self, grads: &Gradients, bound: &[Var]) {
        for (p, var) in self.params.iter_mut().zip(bound) {
            if let Some(g) = grads.get(*var) {
                match &mut p.grad {
                    Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
                    None => p.grad = Some(g.to_vec()),
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }
}

/// Bias-corrected Adam.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// Applies update number `step` (1-based) and clears the gradients.
    pub fn step(&self, params: &mut ParamStore, lr: f64, step: u64) -> Result<()> {
        if step == 0 {
            return Err(AutodiffError::invalid("adam", "step numbering starts at 1"));
        }
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(AutodiffError::MissingGradient(p.name.clone()));
        }
        let c1 = 1.0 - self.beta1.powi(step as i32);
        let c2 = 1.0 - self.beta2.powi(step as i32);
        for p in params.iter_mut() {
            let g = p.grad.take().expect("checked above");
            let values = p.value.data_mut();
            for i in 0..values.len() {
                p.adam_m[i] = self.beta1 * p.adam_m[i] + (1.0 - self.beta1) * g[i];
                p.adam_v[i] = self.beta2 * p.adam_v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = p.adam_m[i] / c1;
                let v_hat = p.adam_v[i] / c2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate: `initial · multipliers[i]`, where `i`
/// counts the boundaries already reached (`step >= boundary`).
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseConstant {
    pub initial: f64,
    pub boundaries: Vec<u64>,
    pub multipliers: Vec<f64>,
}

impl PiecewiseConstant {
    pub fn new(initial: f64, boundaries: Vec<u64>, multipliers: Vec<f64>) -> Result<Self> {
        if multipliers.len() != boundaries.len() + 1 {
            return Err(AutodiffError::invalid(
                "schedule",
                "need exactly one more multiplier than boundaries",
            ));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AutodiffError::invalid(
                "schedule",
                "boundaries must be strictly increasing",
            ));
        }
        Ok(PiecewiseConstant {
            initial,
            boundaries,
            multipliers,
        })
    }

    pub fn lr(&self, step: u64) -> f64 {
        let idx = self.boundaries.iter().take_while(|&&b| step >= b).count();
        self.initial * self.multipliers[idx]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(&[values.len()], values.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut s = store_with(&[0.5, -1.0]);
        let id = s.find("p").unwrap();
        s.get_mut(id).grad = Some(vec![0.0, 0.0]);
        Adam::default().step(&mut s, 1e-3, 1).unwrap();
        assert_eq!(s.get(id).value.data(), &[0.5, -1.0]);
        assert!(s.get(id).grad.is_none());
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // m̂ = g and v̂ = g², so the update is lr·g/(|g| + eps).
        let mut s = store_with(&[1.0, 1.0]);
        let id = s.find("p").unwrap();
        s.get_mut(id).grad = Some(vec![0.3, -2.0]);
        let lr = 1e-3;
        Adam::default().step(&mut s, lr, 1).unwrap();
        let v = s.get(id).value.data();
        let expect0 = 1.0 - lr * 0.3 / (0.3 + 1e-8);
        let expect1 = 1.0 + lr * 2.0 / (2.0 + 1e-8);
        assert!((v[0] - expect0).abs() < 1e-15);
        assert!((v[1] - expect1).abs() < 1e-15);
    }

    #[test]
    fn identical_inputs_stay_bit_identical() {
        let mut a = store_with(&[0.1, 0.2, 0.3]);
        let mut b = a.clone();
        for step in 1..=20 {
            let g: Vec<f64> = (0..3).map(|i| ((step * 7 + i) as f64).sin()).collect();
            for s in [&mut a, &mut b] {
                let id = s.find("p").unwrap();
                s.get_mut(id).grad = Some(g.clone());
                Adam::default().step(s, 1e-2, step as u64).unwrap();
            }
        }
        assert_eq!(a, b);
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut s = store_with(&[1.0]);
        assert!(matches!(
            Adam::default().step(&mut s, 1e-3, 1),
            Err(AutodiffError::MissingGradient(_))
        ));
    }

    #[test]
    fn schedule_boundaries() {
        let s = PiecewiseConstant::new(1e-3, vec![10_000, 50_000, 100_000], vec![1.0, 0.5, 0.1, 0.01])
            .unwrap();
        assert_eq!(s.lr(0), 1e-3);
        assert_eq!(s.lr(9_999), 1e-3);
        assert_eq!(s.lr(10_000), 5e-4);
        assert_eq!(s.lr(50_000), 1e-4);
        assert!((s.lr(100_000) - 1e-5).abs() < 1e-20);
        assert!(PiecewiseConstant::new(1e-3, vec![5, 5], vec![1.0, 1.0, 1.0]).is_err());
        assert!(PiecewiseConstant::new(1e-3, vec![5], vec![1.0]).is_err());
    }
}
