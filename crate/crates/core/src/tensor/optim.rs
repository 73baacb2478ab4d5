use std::sync::Arc;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    value: Arc<Tensor>,
    grad: Option<Vec<f32>>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Parameter { name: name.into(), value: Arc::new(value), grad: None }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Records the parameter as a graph leaf without copying its storage.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Var {
        g.shared(Arc::clone(&self.value), requires_grad)
    }

    /// Adds the gradient `g` computed for `var` into this parameter.
    pub fn accumulate(&mut self, g: &Graph, var: Var) {
        let Some(src) = g.grad(var) else { return };
        match &mut self.grad {
            Some(dst) => {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            None => self.grad = Some(src.to_vec()),
        }
    }

    pub fn set_grad(&mut self, grad: Vec<f32>) {
        assert_eq!(grad.len(), self.value.numel(), "gradient length mismatch for {}", self.name);
        self.grad = Some(grad);
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Plain gradient descent: `p ← p − lr·grad(p)`, then clears the gradients.
pub fn sgd_step(params: &mut [&mut Parameter], lr: f32) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::Numerical(format!("parameter {} has no gradient", p.name)));
    }
    for p in params.iter_mut() {
        let grad = p.grad.take().expect("checked above");
        let value = Arc::make_mut(&mut p.value);
        for (v, g) in value.data_mut().iter_mut().zip(&grad) {
            *v -= lr * g;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f32, g: f32) -> Parameter {
        let mut p = Parameter::new("p", Tensor::scalar(v));
        p.set_grad(vec![g]);
        p
    }

    #[test]
    fn single_step() {
        let mut p = param(1.0, 2.0);
        sgd_step(&mut [&mut p], 0.1).unwrap();
        assert!((p.value().item() - 0.8).abs() < 1e-7);
        assert!(p.grad().is_none());
    }

    #[test]
    fn zero_grad_is_noop() {
        let mut p = param(1.5, 0.0);
        sgd_step(&mut [&mut p], 0.3).unwrap();
        assert_eq!(p.value().item(), 1.5);
    }

    #[test]
    fn two_steps_equal_one_summed_step() {
        let mut a = param(1.0, 0.5);
        sgd_step(&mut [&mut a], 0.25).unwrap();
        a.set_grad(vec![0.5]);
        sgd_step(&mut [&mut a], 0.25).unwrap();
        let mut b = param(1.0, 1.0);
        sgd_step(&mut [&mut b], 0.25).unwrap();
        assert_eq!(a.value().item(), b.value().item());
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut p = Parameter::new("w", Tensor::scalar(1.0));
        let err = sgd_step(&mut [&mut p], 0.1).unwrap_err();
        assert!(err.to_string().contains('w'));
    }
}
