//! Per-channel batch normalization over `(batch, D, H, W)`.

use crate::error::{ensure, Error, Result};

use super::{Param, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

#[derive(Debug, Clone)]
pub struct BatchNormLayer<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: f64,
    pub momentum: f64,
    cache: Option<BnCache<T>>,
}

impl<T: Real> BatchNormLayer<T> {
    pub const DEFAULT_EPSILON: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: Self::DEFAULT_EPSILON,
            momentum: Self::DEFAULT_MOMENTUM,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode, keep_cache: bool) -> Result<Tensor<T>> {
        let (batch, c, spatial) = input.dims5()?;
        ensure!(
            c == self.channels(),
            Dimension,
            "batch norm has {} channels, input has {c}",
            self.channels()
        );
        let vox: usize = spatial.iter().product();
        let count = batch * vox;
        let x = input.data();
        let channel_values =
            |ch: usize| (0..batch).flat_map(move |b| x[(b * c + ch) * vox..(b * c + ch + 1) * vox].iter().copied());

        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            Mode::Train => {
                if batch < 2 {
                    return Err(Error::DegenerateBatch(format!(
                        "training-mode batch norm needs at least 2 samples, got {batch}"
                    )));
                }
                let mut mean = Vec::with_capacity(c);
                let mut var = Vec::with_capacity(c);
                for ch in 0..c {
                    let m = channel_values(ch).map(|v| v.to_f64_lossy()).sum::<f64>() / count as f64;
                    let v = channel_values(ch).map(|v| (v.to_f64_lossy() - m).powi(2)).sum::<f64>() / count as f64;
                    mean.push(m);
                    var.push(v);
                }
                let unbias = count as f64 / (count - 1) as f64;
                for ch in 0..c {
                    let rm = self.running_mean[ch].to_f64_lossy();
                    let rv = self.running_var[ch].to_f64_lossy();
                    self.running_mean[ch] = T::from_f64_lossy((1.0 - self.momentum) * rm + self.momentum * mean[ch]);
                    self.running_var[ch] =
                        T::from_f64_lossy((1.0 - self.momentum) * rv + self.momentum * var[ch] * unbias);
                }
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.iter().map(|v| v.to_f64_lossy()).collect(),
                self.running_var.iter().map(|v| v.to_f64_lossy()).collect(),
            ),
        };

        let inv_std: Vec<T> = var
            .iter()
            .map(|v| T::from_f64_lossy(1.0 / (v + self.epsilon).sqrt()))
            .collect();
        let mean: Vec<T> = mean.into_iter().map(T::from_f64_lossy).collect();
        let mut normalized = Tensor::zeros(input.shape());
        let mut out = Tensor::zeros(input.shape());
        for b in 0..batch {
            for ch in 0..c {
                let r = (b * c + ch) * vox..(b * c + ch + 1) * vox;
                let (g, bt) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
                let (m, s) = (mean[ch], inv_std[ch]);
                for ((n, o), &v) in normalized.data_mut()[r.clone()]
                    .iter_mut()
                    .zip(&mut out.data_mut()[r.clone()])
                    .zip(&x[r])
                {
                    *n = (v - m) * s;
                    *o = g * *n + bt;
                }
            }
        }
        self.cache = keep_cache.then(|| BnCache {
            normalized,
            inv_std,
            mode,
        });
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Usage("batch norm backward called without a cached forward pass".into()))?;
        ensure!(
            grad_out.shape() == cache.normalized.shape(),
            Dimension,
            "grad shape {:?} does not match forward {:?}",
            grad_out.shape(),
            cache.normalized.shape()
        );
        let (batch, c, spatial) = grad_out.dims5()?;
        let vox: usize = spatial.iter().product();
        let count = (batch * vox) as f64;
        let (g, xh) = (grad_out.data(), cache.normalized.data());
        let mut grad_in = Tensor::zeros(grad_out.shape());
        for ch in 0..c {
            let ranges = (0..batch).map(|b| (b * c + ch) * vox..(b * c + ch + 1) * vox);
            let mut sum_g = 0.0f64;
            let mut sum_gx = 0.0f64;
            for r in ranges.clone() {
                for (&gv, &xv) in g[r.clone()].iter().zip(&xh[r]) {
                    sum_g += gv.to_f64_lossy();
                    sum_gx += (gv * xv).to_f64_lossy();
                }
            }
            self.gamma.grad.data_mut()[ch] += T::from_f64_lossy(sum_gx);
            self.beta.grad.data_mut()[ch] += T::from_f64_lossy(sum_g);
            let scale = self.gamma.value.data()[ch] * cache.inv_std[ch];
            match cache.mode {
                Mode::Train => {
                    let mean_g = T::from_f64_lossy(sum_g / count);
                    let mean_gx = T::from_f64_lossy(sum_gx / count);
                    for r in ranges {
                        for ((d, &gv), &xv) in grad_in.data_mut()[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xh[r]) {
                            *d = scale * (gv - mean_g - xv * mean_gx);
                        }
                    }
                }
                Mode::Eval => {
                    for r in ranges {
                        for (d, &gv) in grad_in.data_mut()[r.clone()].iter_mut().zip(&g[r]) {
                            *d = scale * gv;
                        }
                    }
                }
            }
        }
        Ok(grad_in)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.gamma, &self.beta]
    }
}
