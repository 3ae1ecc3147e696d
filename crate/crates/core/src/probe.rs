//! Shortcut-ratio diagnostics.
//!
//! `σ` of a `[N×C]` stream is the population standard deviation over
//! channels, taken per token and averaged over tokens. The shortcut ratio of
//! block `l` is `γ_l = σ₀/σ_l`, where `σ₀` is measured on the stream
//! entering the block's stack (for step-by-step models, the step's own input
//! `[y_{i-1}, x_i]`).

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{ResidualStack, SeqContext};
use crate::error::{Error, Result};
use crate::network::{Inputs, Network};
use crate::scalar::Scalar;
use crate::steps::{StepTrace, StepsModel};
use crate::tensor::{kernels, Tape, Tensor};

pub const CSV_HEADER: &str = "block_index,step_index,width,sigma0,sigma_l,gamma";
pub const DEPTH_CSV_HEADER: &str = "block_index,step_index,width,depth_concat,depth_step,gamma";
pub const AXIS_CONVENTION: &str = "per-token std over channels, averaged over tokens";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GammaRecord {
    /// 1-based position among all blocks of the model.
    pub block_index: usize,
    /// 0-based step; always 0 for a plain stack.
    pub step_index: usize,
    pub width: usize,
    pub sigma0: f64,
    pub sigma_l: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaTrace {
    pub records: Vec<GammaRecord>,
    pub axis: String,
    /// Shape of the traced batch, e.g. `[256, 32]`.
    pub batch: Vec<usize>,
    /// Blocks per step, for the depth renderings.
    pub depths: Vec<usize>,
}

impl GammaTrace {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.block_index, r.step_index, r.width, r.sigma0, r.sigma_l, r.gamma
            );
        }
        out
    }

    /// Two normalized-depth renderings per block: over the whole model
    /// (steps concatenated) and within the block's own step.
    pub fn to_depth_csv(&self) -> String {
        let total = self.records.len().max(1) as f64;
        let mut out = format!("{DEPTH_CSV_HEADER}\n");
        let mut local = 0;
        let mut prev_step = usize::MAX;
        for r in &self.records {
            if r.step_index != prev_step {
                local = 0;
                prev_step = r.step_index;
            }
            local += 1;
            let d = self.depths.get(r.step_index).copied().unwrap_or(1).max(1) as f64;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.block_index,
                r.step_index,
                r.width,
                r.block_index as f64 / total,
                local as f64 / d,
                r.gamma
            );
        }
        out
    }

    pub fn gammas(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.gamma).collect()
    }

    /// Mean γ over the first `⌈len/4⌉` blocks.
    pub fn first_quarter_mean(&self) -> f64 {
        let k = self.records.len().div_ceil(4).max(1);
        self.records.iter().take(k).map(|r| r.gamma).sum::<f64>() / k as f64
    }
}

/// Per-token population std over the last axis, averaged over tokens.
pub fn sigma<T: Scalar>(t: &Tensor<T>) -> f64 {
    let c = t.last_dim();
    let rows = t.numel() / c.max(1);
    let mut acc = 0.0;
    for row in t.data().chunks(c) {
        let v: Vec<f64> = row.iter().map(|x| x.as_f64()).collect();
        let (_, var) = kernels::mean_var(&v);
        acc += var.sqrt();
    }
    acc / rows.max(1) as f64
}

fn record(block_index: usize, step_index: usize, sigma0: f64, out: &Tensor<impl Scalar>) -> GammaRecord {
    let sigma_l = sigma(out);
    GammaRecord {
        block_index,
        step_index,
        width: out.last_dim(),
        sigma0,
        sigma_l,
        gamma: sigma0 / sigma_l,
    }
}

fn check_sigma0(s: f64) -> Result<f64> {
    if s > 0.0 && s.is_finite() {
        Ok(s)
    } else {
        Err(Error::Degenerate {
            op: "shortcut_ratio_trace",
            detail: format!("input standard deviation is {s}"),
        })
    }
}

/// Builds a trace from per-step traced activations.
pub fn trace_from_steps<T: Scalar>(steps: &[StepTrace<T>], batch: &[usize]) -> Result<GammaTrace> {
    let mut records = Vec::new();
    let mut l = 0;
    for st in steps {
        let s0 = check_sigma0(sigma(&st.input))?;
        for b in &st.blocks {
            l += 1;
            records.push(record(l, st.index, s0, &b.output));
        }
    }
    Ok(GammaTrace {
        records,
        axis: AXIS_CONVENTION.into(),
        batch: batch.to_vec(),
        depths: steps.iter().map(|s| s.blocks.len()).collect(),
    })
}

/// Models whose per-block activations can be traced.
pub trait Traceable<T: Scalar> {
    fn shortcut_ratio_trace(&self, batch: &Tensor<T>, ctx: &SeqContext) -> Result<GammaTrace>;
}

impl<T: Scalar> Traceable<T> for ResidualStack<T> {
    fn shortcut_ratio_trace(&self, batch: &Tensor<T>, ctx: &SeqContext) -> Result<GammaTrace> {
        if batch.rank() == 0 || batch.last_dim() != self.width {
            return Err(Error::Dimension {
                op: "shortcut_ratio_trace",
                lhs: batch.shape().to_vec(),
                rhs: vec![self.width],
            });
        }
        let s0 = check_sigma0(sigma(batch))?;
        let (_, blocks) = self.apply_traced(batch, ctx)?;
        Ok(GammaTrace {
            records: blocks
                .iter()
                .enumerate()
                .map(|(i, b)| record(i + 1, 0, s0, &b.output))
                .collect(),
            axis: AXIS_CONVENTION.into(),
            batch: batch.shape().to_vec(),
            depths: vec![self.depth()],
        })
    }
}

impl<T: Scalar> Traceable<T> for StepsModel<T> {
    fn shortcut_ratio_trace(&self, batch: &Tensor<T>, ctx: &SeqContext) -> Result<GammaTrace> {
        let (_, steps) = self.apply_traced(batch, ctx)?;
        trace_from_steps(&steps, batch.shape())
    }
}

pub fn shortcut_ratio_trace<T: Scalar, M: Traceable<T>>(model: &M, batch: &Tensor<T>, ctx: &SeqContext) -> Result<GammaTrace> {
    model.shortcut_ratio_trace(batch, ctx)
}

impl<T: Scalar> Network<T> {
    /// Traces the body on the embedded `inputs`.
    pub fn gamma_trace(&self, inputs: Inputs<'_, T>) -> Result<GammaTrace> {
        let mut tape = Tape::inference();
        let x = self.embed(&mut tape, inputs)?;
        let (_, steps) = self.body.forward_traced(&mut tape, x, &self.context())?;
        trace_from_steps(&steps, tape.shape(x))
    }
}

/// Outcome of splitting a normalized stream into shortcut and residual parts.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    /// Token mean of `σ₀/σ_l`.
    pub gamma: f64,
    /// Token mean of `σ_r/σ_l`.
    pub rho: f64,
    pub gamma_per_token: Vec<f64>,
    pub rho_per_token: Vec<f64>,
    /// `max |norm(z₀+r) − (γ·ẑ₀ + ρ·r̂)|`.
    pub reconstruction_error: f64,
}

/// Checks `norm(z₀ + r) = γ·ẑ₀ + ρ·r̂` token by token, with every `σ`
/// taken as `√(var + eps)`. A residual with zero spread contributes `r̂ = 0`.
pub fn decompose_normalized(z0: &Tensor<f64>, rl: &Tensor<f64>, eps: f64) -> Result<Decomposition> {
    if z0.shape() != rl.shape() || z0.rank() == 0 {
        return Err(Error::Dimension {
            op: "decompose_normalized",
            lhs: z0.shape().to_vec(),
            rhs: rl.shape().to_vec(),
        });
    }
    let c = z0.last_dim();
    let mut out = Decomposition {
        gamma: 0.0,
        rho: 0.0,
        gamma_per_token: Vec::new(),
        rho_per_token: Vec::new(),
        reconstruction_error: 0.0,
    };
    for (a, r) in z0.data().chunks(c).zip(rl.data().chunks(c)) {
        let zl: Vec<f64> = a.iter().zip(r).map(|(x, y)| x + y).collect();
        let (m0, v0) = kernels::mean_var(a);
        let (mr, vr) = kernels::mean_var(r);
        let (ml, vl) = kernels::mean_var(&zl);
        let (s0, sr, sl) = ((v0 + eps).sqrt(), (vr + eps).sqrt(), (vl + eps).sqrt());
        if s0 == 0.0 || sl == 0.0 {
            return Err(Error::Degenerate {
                op: "decompose_normalized",
                detail: "zero variance with eps = 0".into(),
            });
        }
        let (gamma, rho) = (s0 / sl, sr / sl);
        for j in 0..c {
            let zhat_l = (zl[j] - ml) / sl;
            let zhat_0 = (a[j] - m0) / s0;
            let rhat = if sr == 0.0 { 0.0 } else { (r[j] - mr) / sr };
            let err = (zhat_l - (gamma * zhat_0 + rho * rhat)).abs();
            out.reconstruction_error = out.reconstruction_error.max(err);
        }
        out.gamma_per_token.push(gamma);
        out.rho_per_token.push(rho);
    }
    let n = out.gamma_per_token.len() as f64;
    out.gamma = out.gamma_per_token.iter().sum::<f64>() / n;
    out.rho = out.rho_per_token.iter().sum::<f64>() / n;
    Ok(out)
}

/// `γ_l = 1/√(1 + l·v)` for unit-variance input and independent zero-mean
/// residual additions of variance `v`.
pub fn variance_oracle(depth: usize, v: f64) -> Vec<f64> {
    (1..=depth).map(|l| 1.0 / (1.0 + l as f64 * v).sqrt()).collect()
}

/// Simulates `z_l = z_{l-1} + √v·ε_l` with Gaussian `z_0` and `ε_l` on a
/// `tokens×channels` stream and measures `γ_l` under the σ convention above.
pub fn monte_carlo_gamma(depth: usize, v: f64, tokens: usize, channels: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Tensor::<f64>::randn(&[tokens, channels], 1.0, &mut rng);
    let s0 = check_sigma0(sigma(&z))?;
    let mut out = Vec::with_capacity(depth);
    for _ in 0..depth {
        let eps = Tensor::<f64>::randn(&[tokens, channels], v.sqrt(), &mut rng);
        z.data_mut().iter_mut().zip(eps.data()).for_each(|(a, b)| *a += b);
        out.push(s0 / sigma(&z));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{BlockKind, Init};
    use crate::steps::StepsConfig;

    #[test]
    fn zero_branches_give_unit_gamma() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let stack = ResidualStack::<f64>::new(BlockKind::Transformer, 8, 6, 2, &Init::zero_branches(), &mut r).unwrap();
        let x = Tensor::randn(&[4, 8], 1.0, &mut r);
        let t = shortcut_ratio_trace(&stack, &x, &SeqContext::single()).unwrap();
        assert!(t.gammas().iter().all(|&g| g == 1.0));
        let cfg = StepsConfig::from_step_widths(BlockKind::Transformer, &[4, 8], &[2, 1], &[1, 2]).unwrap();
        let m = StepsModel::<f64>::new(cfg, &Init::zero_branches(), &mut r).unwrap();
        let t = shortcut_ratio_trace(&m, &x, &SeqContext::single()).unwrap();
        assert_eq!(t.records.len(), 3);
        assert!(t.gammas().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn csv_layout() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let stack = ResidualStack::<f64>::new(BlockKind::Mlp, 8, 3, 1, &Init::default(), &mut r).unwrap();
        let x = Tensor::randn(&[4, 8], 1.0, &mut r);
        let t = shortcut_ratio_trace(&stack, &x, &SeqContext::single()).unwrap();
        let csv = t.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(!csv.contains('\r'));
        for rec in &t.records {
            assert!(rec.gamma > 0.0);
            assert!((rec.gamma - rec.sigma0 / rec.sigma_l).abs() < 1e-12);
        }
        assert_eq!(t.to_depth_csv().lines().count(), 4);
    }

    #[test]
    fn zero_input_is_degenerate() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let stack = ResidualStack::<f64>::new(BlockKind::Mlp, 4, 1, 1, &Init::default(), &mut r).unwrap();
        let x = Tensor::zeros(&[2, 4]);
        assert!(matches!(
            shortcut_ratio_trace(&stack, &x, &SeqContext::single()),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn decomposition_special_cases() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let z = Tensor::randn(&[16, 32], 1.0, &mut r);
        let d = decompose_normalized(&z, &Tensor::zeros(&[16, 32]), 0.0).unwrap();
        assert_eq!((d.gamma, d.rho), (1.0, 0.0));
        assert!(d.reconstruction_error < 1e-15);
        let d = decompose_normalized(&z, &z, 0.0).unwrap();
        assert!((d.gamma - 0.5).abs() < 1e-14 && (d.rho - 0.5).abs() < 1e-14);
        let rl = Tensor::randn(&[16, 32], 2.0, &mut r);
        assert!(decompose_normalized(&z, &rl, 0.0).unwrap().reconstruction_error < 1e-10);
        assert!(decompose_normalized(&Tensor::ones(&[2, 3]), &Tensor::zeros(&[2, 3]), 0.0).is_err());
    }

    #[test]
    fn oracle_values() {
        assert!(variance_oracle(5, 0.0).iter().all(|&g| g == 1.0));
        assert_eq!(variance_oracle(3, 1.0)[2], 0.5);
    }

    #[test]
    fn depth_eight_monte_carlo() {
        let g = monte_carlo_gamma(8, 1.0, 100, 1000, 5).unwrap();
        assert!((g[7] - 1.0 / 3.0).abs() / (1.0 / 3.0) < 0.05, "{}", g[7]);
    }
}
