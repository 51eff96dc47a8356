use crate::error::{ensure, Error, Result};

use super::{Param, Real, Tensor};

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> Default for AdamState<T> {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl<T: Real> AdamState<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step_count: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// Applies one update to `params` using their accumulated gradients.
    /// The parameter list must be presented in the same order every step.
    pub fn step(&mut self, params: &mut [&mut Param<T>], lr: f64) -> Result<()> {
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.second_moment = self.first_moment.clone();
        }
        ensure!(
            self.first_moment.len() == params.len(),
            Dimension,
            "optimizer tracks {} parameters, got {}",
            self.first_moment.len(),
            params.len()
        );
        for p in params.iter() {
            if let Some(pos) = p.grad.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} has non-finite entry at flat index {pos} (step {})",
                    p.name,
                    self.step_count + 1
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step = T::from_f64_lossy(lr / bc1);
        let inv_bc2_sqrt = T::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = T::from_f64_lossy(self.eps);
        for ((p, m), v) in params
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            ensure!(
                m.shape() == p.value.shape(),
                Dimension,
                "moment shape {:?} does not match parameter {} {:?}",
                m.shape(),
                p.name,
                p.value.shape()
            );
            let g = p.grad.data();
            for (((w, &gv), mv), vv) in p.value.data_mut().iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *w -= step * *mv / ((*vv).sqrt() * inv_bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}
