//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::ParamSet;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParamSet, beta1: f32, beta2: f32, eps: f32) -> Self {
        let zeros = |_| Vec::new();
        let mut first: Vec<Vec<f32>> = (0..params.len()).map(zeros).collect();
        let mut second = first.clone();
        for (i, (_, t)) in params.iter().enumerate() {
            first[i] = vec![0.0; t.numel()];
            second[i] = vec![0.0; t.numel()];
        }
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.first, &self.second)
    }

    /// Rebuilds optimizer state from persisted moments.
    pub fn restore(step: u64, first: Vec<Vec<f32>>, second: Vec<Vec<f32>>, beta1: f32, beta2: f32, eps: f32) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step,
            first,
            second,
        }
    }

    /// One update over every parameter, then clears gradients.
    ///
    /// Fails before touching any parameter if one of them has no gradient.
    pub fn step(&mut self, params: &mut ParamSet, lr: f32) -> Result<()> {
        if let Some(id) = params.ids().find(|&id| params.get(id).grad().is_none()) {
            return Err(Error::MissingGrad(params.name(id).to_string()));
        }
        if self.first.len() != params.len() {
            return Err(Error::Invalid(format!(
                "optimizer tracks {} tensors, parameter set has {}",
                self.first.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in params.ids().collect::<Vec<_>>() {
            let i = id.index();
            let tensor = params.get_mut(id);
            let grad = tensor.take_grad().expect("checked above");
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((w, g), m), v) in tensor.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(w: f32) -> (ParamSet, crate::params::ParamId) {
        let mut p = ParamSet::new();
        let id = p.add("w", Tensor::vector(vec![w]));
        (p, id)
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let (mut p, id) = single(1.5);
        let mut adam = Adam::new(&p);
        p.get_mut(id).set_grad(Some(vec![0.0]));
        adam.step(&mut p, 0.1).unwrap();
        assert_eq!(p.get(id).data(), &[1.5]);
        assert!(p.get(id).grad().is_none());
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // m_hat = g, v_hat = g^2 after bias correction, so the step is
        // lr * g / (|g| + eps).
        for g in [0.37f32, -4.0, 1e-3] {
            let (mut p, id) = single(0.0);
            let mut adam = Adam::new(&p);
            p.get_mut(id).set_grad(Some(vec![g]));
            adam.step(&mut p, 0.01).unwrap();
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert!((p.get(id).data()[0] - expected).abs() < 1e-7, "g={g}");
        }
    }

    #[test]
    fn converges_on_quadratic() {
        let (mut p, id) = single(0.0);
        let mut adam = Adam::new(&p);
        for _ in 0..200 {
            let w = p.get(id).data()[0];
            p.get_mut(id).set_grad(Some(vec![2.0 * (w - 3.0)]));
            adam.step(&mut p, 0.1).unwrap();
        }
        assert!((p.get(id).data()[0] - 3.0).abs() < 0.05);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let (mut p, _) = single(0.0);
        let mut adam = Adam::new(&p);
        assert!(matches!(adam.step(&mut p, 0.1), Err(Error::MissingGrad(n)) if n == "w"));
        assert_eq!(adam.step_count(), 0);
    }
}
