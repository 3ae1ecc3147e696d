//! AdamW with decoupled weight decay, and a warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::params::Parameters;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from its accumulated gradient:
    /// `p ← p − lr·wd·p`, then the bias-corrected Adam step. Parameters
    /// without a gradient are treated as having a zero gradient.
    pub fn step<T: Scalar, M: Parameters<T> + ?Sized>(&mut self, model: &mut M, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (wd, eps) = (self.weight_decay, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut offset = 0;
        model.visit_params_mut("", &mut |_, p| {
            let n = p.numel();
            if m.len() < offset + n {
                m.resize(offset + n, 0.0);
                v.resize(offset + n, 0.0);
            }
            let grad: Vec<f64> = match p.grad() {
                Some(g) => g.iter().map(|x| x.as_f64()).collect(),
                None => vec![0.0; n],
            };
            for (k, val) in p.data_mut().iter_mut().enumerate() {
                let g = grad[k];
                let i = offset + k;
                let mut w = val.as_f64();
                w -= lr * wd * w;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                w -= lr * mhat / (vhat.sqrt() + eps);
                *val = T::of(w);
            }
            offset += n;
        });
    }
}

/// Linear warmup from `warmup_start` to `peak` over `warmup` steps, then
/// cosine decay to `floor` at step `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub peak: f64,
    pub warmup_start: f64,
    pub floor: f64,
    pub warmup: usize,
    pub total: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.warmup_start + (self.peak - self.warmup_start) * step as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup);
        if span == 0 {
            return self.peak;
        }
        let progress = (step.min(self.total) - self.warmup) as f64 / span as f64;
        self.floor + 0.5 * (self.peak - self.floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::Linear;
    use crate::tensor::Tensor;

    #[test]
    fn single_parameter_update_by_hand() {
        let mut lin = Linear::<f64> {
            weight: Tensor::from_f64(&[1, 1], &[0.5]).unwrap().with_requires_grad(),
            bias: Tensor::from_f64(&[1], &[0.0]).unwrap().with_requires_grad(),
        };
        lin.weight.accumulate_grad(&[0.2]).unwrap();
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.01);
        opt.step(&mut lin, 0.1);
        // p = 0.5 − 0.1·0.01·0.5 = 0.4995; m̂ = 0.2, v̂ = 0.04; step = 0.1·0.2/(0.2+1e-8)
        let want = 0.4995 - 0.1 * 0.2 / (0.2 + 1e-8);
        assert!((lin.weight.data()[0] - want).abs() < 1e-12);
        assert_eq!(lin.bias.data()[0], 0.0);

        // Second step with the same gradient, hand-rolled.
        lin.weight.accumulate_grad(&[0.0]).unwrap();
        opt.step(&mut lin, 0.1);
        let m = 0.9 * 0.02 + 0.1 * 0.2;
        let v = 0.999 * 0.00004 + 0.001 * 0.04;
        let mhat = m / (1.0 - 0.81);
        let vhat = v / (1.0 - 0.999f64.powi(2));
        let mut p = want;
        p -= 0.1 * 0.01 * p;
        p -= 0.1 * mhat / (vhat.sqrt() + 1e-8);
        assert!((lin.weight.data()[0] - p).abs() < 1e-12);
    }

    #[test]
    fn schedule_shape() {
        let s = CosineSchedule {
            peak: 1e-3,
            warmup_start: 1e-5,
            floor: 1e-6,
            warmup: 10,
            total: 100,
        };
        assert_eq!(s.lr(0), 1e-5);
        assert!((s.lr(10) - 1e-3).abs() < 1e-18);
        assert!((s.lr(100) - 1e-6).abs() < 1e-18);
        for k in 10..100 {
            assert!(s.lr(k + 1) <= s.lr(k));
        }
        for k in 0..10 {
            assert!(s.lr(k + 1) > s.lr(k));
        }
    }
}
