//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::module::Parameter;
use crate::tensor::Real;

#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from its accumulated gradient. The
    /// parameter list must be the same, in the same order, on every call.
    pub fn step(&mut self, params: Vec<&mut Parameter<T>>) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::invalid(
                "adam_step",
                format!("optimizer tracks {} parameters, got {}", self.m.len(), params.len()),
            ));
        }
        let grads = params
            .iter()
            .map(|p| p.grad().ok_or_else(|| Error::MissingGrad(p.name().to_string())))
            .collect::<Result<Vec<_>>>()?;
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let c1 = T::from_f64(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::from_f64(self.lr), T::from_f64(self.eps));
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if m.len() != g.len() {
                return Err(Error::shape("adam_step", &[m.len()], &[g.len()]));
            }
            let mut data = p.data().to_vec();
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.set_data(data)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn with_grad(value: f64, grad: f64) -> Parameter<f64> {
        let p = Parameter::new("w", vec![value], &[1]);
        p.tensor().scale(grad).sum().backward().unwrap();
        p
    }

    #[test]
    fn first_step_hand_computed() {
        // m = 0.1, v = 0.001, m_hat = 1, v_hat = 1: w -= 0.1 * 1 / (1 + 1e-8).
        let mut p = with_grad(0.5, 1.0);
        let mut opt = Adam::new(0.1);
        opt.step(vec![&mut p]).unwrap();
        assert!((p.data()[0] - (0.5 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_leaves_parameter() {
        let mut p = with_grad(0.5, 0.0);
        let mut opt = Adam::new(0.1);
        opt.step(vec![&mut p]).unwrap();
        assert_eq!(p.data()[0], 0.5);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut p = Parameter::<f64>::new("lonely", vec![1.0], &[1]);
        let err = Adam::new(0.1).step(vec![&mut p]).unwrap_err();
        assert!(matches!(err, Error::MissingGrad(n) if n == "lonely"));
    }

    #[test]
    fn decreases_a_quadratic() {
        let mut p = Parameter::<f64>::new("w", vec![3.0], &[1]);
        let mut opt = Adam::new(0.01);
        let loss = |t: &Tensor<f64>| t.add_scalar(-1.0).square().sum();
        let before = loss(p.tensor()).item();
        loss(p.tensor()).backward().unwrap();
        opt.step(vec![&mut p]).unwrap();
        assert!(loss(p.tensor()).item() < before);
    }
}
