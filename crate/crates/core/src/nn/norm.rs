use rayon::prelude::*;

use super::{GradStore, Param, ParamRegistry, Tensor};

const EPS: f64 = 1e-5;
const MOMENTUM: f64 = 0.1;

/// Per-channel batch normalisation over batch and spatial positions.
#[derive(Debug, Clone)]
pub struct BatchNorm3d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub name: String,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    count: usize,
}

impl BatchNorm3d {
    pub fn new(reg: &mut ParamRegistry, name: &str, channels: usize) -> Self {
        BatchNorm3d {
            gamma: reg.param(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: reg.param(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            name: name.to_string(),
        }
    }

    fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Normalises with batch statistics.
    pub fn forward_train(&self, x: &Tensor) -> (Tensor, BatchNormCache) {
        let c = self.channels();
        let (b, s) = (x.batch(), x.spatial());
        let count = b * s;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (i, ch) in x.data().chunks(s).enumerate() {
            mean[i % c] += ch.iter().sum::<f64>();
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for (i, ch) in x.data().chunks(s).enumerate() {
            let m = mean[i % c];
            var[i % c] += ch.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + EPS).sqrt()).collect();

        let mut x_hat = x.clone();
        x_hat.data_mut().par_chunks_mut(s).enumerate().for_each(|(i, ch)| {
            let (m, is) = (mean[i % c], inv_std[i % c]);
            ch.iter_mut().for_each(|v| *v = (*v - m) * is);
        });
        let y = self.affine(&x_hat);
        (y, BatchNormCache { x_hat, inv_std, batch_mean: mean, batch_var: var, count })
    }

    /// Normalises with running statistics.
    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let c = self.channels();
        let s = x.spatial();
        let mut x_hat = x.clone();
        x_hat.data_mut().par_chunks_mut(s).enumerate().for_each(|(i, ch)| {
            let m = self.running_mean[i % c];
            let is = 1.0 / (self.running_var[i % c] + EPS).sqrt();
            ch.iter_mut().for_each(|v| *v = (*v - m) * is);
        });
        self.affine(&x_hat)
    }

    fn affine(&self, x_hat: &Tensor) -> Tensor {
        let c = self.channels();
        let s = x_hat.spatial();
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        let mut y = x_hat.clone();
        y.data_mut()
            .par_chunks_mut(s)
            .enumerate()
            .for_each(|(i, ch)| ch.iter_mut().for_each(|v| *v = g[i % c] * *v + b[i % c]));
        y
    }

    pub fn backward(&self, cache: &BatchNormCache, grad: &Tensor, grads: &mut GradStore) -> Tensor {
        let c = self.channels();
        let s = grad.spatial();
        let n = cache.count as f64;
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for (i, (gch, xch)) in grad.data().chunks(s).zip(cache.x_hat.data().chunks(s)).enumerate() {
            sum_g[i % c] += gch.iter().sum::<f64>();
            sum_gx[i % c] += gch.iter().zip(xch).map(|(g, x)| g * x).sum::<f64>();
        }
        grads.accumulate(self.gamma.id, Tensor::from_vec(&[c], sum_gx.clone()));
        grads.accumulate(self.beta.id, Tensor::from_vec(&[c], sum_g.clone()));

        let gamma = self.gamma.value.data();
        let mut dx = grad.clone();
        dx.data_mut()
            .par_chunks_mut(s)
            .zip(cache.x_hat.data().par_chunks(s))
            .enumerate()
            .for_each(|(i, (dch, xch))| {
                let ch = i % c;
                let k = gamma[ch] * cache.inv_std[ch] / n;
                for (d, x) in dch.iter_mut().zip(xch) {
                    *d = k * (n * *d - sum_g[ch] - x * sum_gx[ch]);
                }
            });
        dx
    }

    /// Exponential moving average of batch statistics (unbiased variance).
    pub fn update_running_stats(&mut self, cache: &BatchNormCache) {
        let n = cache.count as f64;
        let unbias = if cache.count > 1 { n / (n - 1.0) } else { 1.0 };
        for ch in 0..self.channels() {
            self.running_mean[ch] = (1.0 - MOMENTUM) * self.running_mean[ch] + MOMENTUM * cache.batch_mean[ch];
            self.running_var[ch] = (1.0 - MOMENTUM) * self.running_var[ch] + MOMENTUM * cache.batch_var[ch] * unbias;
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}
