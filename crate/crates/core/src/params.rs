//! Named traversal over model parameters.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// A model whose learnable tensors can be enumerated in a fixed order.
///
/// Names are dotted paths (`step1.block0.qkv.weight`) and are stable across
/// runs; checkpoints and the optimizer rely on the visiting order.
pub trait Parameters<T: Scalar> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>));

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, t| n += t.numel());
        n
    }

    fn named_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |name, t| out.push((name.to_string(), t.shape().to_vec())));
        out
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut("", &mut |_, t| t.zero_grad());
    }

    /// Adds the gradients a tape holds for these parameters into their
    /// `grad` buffers.
    fn collect_grads(&mut self, tape: &Tape<T>) -> Result<()> {
        let mut res = Ok(());
        self.visit_params_mut("", &mut |_, t| {
            if res.is_ok() {
                if let Some(g) = tape.param_grad(t).map(<[T]>::to_vec) {
                    res = t.accumulate_grad(&g);
                }
            }
        });
        res
    }

    /// All parameter values, flattened in visiting order.
    fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params("", &mut |_, t| out.extend(t.data().iter().map(|v| v.as_f64())));
        out
    }

    /// All accumulated gradients, flattened in visiting order (zeros where absent).
    fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_params("", &mut |_, t| match t.grad() {
            Some(g) => out.extend(g.iter().map(|v| v.as_f64())),
            None => out.extend(std::iter::repeat_n(0.0, t.numel())),
        });
        out
    }

    /// Overwrites parameter values from a flat vector in visiting order.
    fn set_flat_values(&mut self, values: &[f64]) {
        let mut offset = 0;
        self.visit_params_mut("", &mut |_, t| {
            let n = t.numel();
            for (d, &v) in t.data_mut().iter_mut().zip(&values[offset..offset + n]) {
                *d = T::of(v);
            }
            offset += n;
        });
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
