//! Adam optimiser.

use serde::{Deserialize, Serialize};

use super::layers::Param;
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one pair per trainable parameter in
/// model order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn update(&mut self, params: &mut [&mut Param]) {
        let trainable: Vec<&mut &mut Param> = params.iter_mut().filter(|p| p.trainable).collect();
        if self.m.is_empty() {
            self.m = trainable.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let AdamConfig { learning_rate: lr, beta1: b1, beta2: b2, eps } = self.config;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for ((p, m), v) in trainable.into_iter().zip(&mut self.m).zip(&mut self.v) {
            let g = p.grad.data().to_vec();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                md[i] = b1 * md[i] + (1.0 - b1) * g[i];
                vd[i] = b2 * vd[i] + (1.0 - b2) * g[i] * g[i];
                *w -= lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Param::new("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(), true);
        p.grad = Tensor::new(vec![2], vec![0.5, -2.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.update(&mut [&mut p]);
        // Bias-corrected first step is lr * sign(g) up to eps.
        assert!((p.value.data()[0] - (1.0 - 1e-3)).abs() < 1e-10);
        assert!((p.value.data()[1] - (-1.0 + 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn zero_rate_and_buffers_are_untouched() {
        let mut p = Param::new("w", Tensor::filled(&[3], 0.25), true);
        p.grad = Tensor::filled(&[3], 7.0);
        let mut buf = Param::new("running_mean", Tensor::filled(&[3], 0.5), false);
        buf.grad = Tensor::filled(&[3], 1.0);
        let mut adam = Adam::new(AdamConfig { learning_rate: 0.0, ..Default::default() });
        adam.update(&mut [&mut p, &mut buf]);
        assert_eq!(p.value, Tensor::filled(&[3], 0.25));
        assert_eq!(buf.value, Tensor::filled(&[3], 0.5));
    }
}
