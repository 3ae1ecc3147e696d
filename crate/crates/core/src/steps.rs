//! Step-by-step networks: progressively widening sub-models over channel
//! slices of the input.
//!
//! The input `x[N×C]` is split by channel into `x_1..x_n` of widths
//! `d_1..d_n`. Then `y_1 = F_1(x_1)` and `y_i = F_i([y_{i-1}, x_i])`, where
//! `F_i` is a residual stack of width `C_i = d_1 + … + d_i`. The output is
//! `y_n`. The first slice (the slow path) passes through every step; later
//! slices (the fast path) enter directly into wider steps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockKind, BlockRecord, Init, ResidualStack, SeqContext};
use crate::error::{Error, Result};
use crate::params::{join, Parameters};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Macro-architecture of an n-step network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepsConfig {
    pub kind: BlockKind,
    /// Full model width `C`.
    pub width: usize,
    /// `d_1..d_n`; must sum to `width`.
    pub slice_widths: Vec<usize>,
    /// Blocks per step `D_1..D_n`.
    pub depths: Vec<usize>,
    /// Attention heads per step; ignored (and may be empty) for MLP blocks.
    #[serde(default)]
    pub heads: Vec<usize>,
}

impl StepsConfig {
    /// A 1-step configuration, i.e. a plain residual stack.
    pub fn residual(kind: BlockKind, width: usize, depth: usize, heads: usize) -> Self {
        Self {
            kind,
            width,
            slice_widths: vec![width],
            depths: vec![depth],
            heads: vec![heads],
        }
    }

    /// Builds a configuration from cumulative step widths `C_1 < … < C_n`.
    pub fn from_step_widths(
        kind: BlockKind,
        step_widths: &[usize],
        depths: &[usize],
        heads: &[usize],
    ) -> Result<Self> {
        let mut slices = Vec::with_capacity(step_widths.len());
        let mut prev = 0;
        for &w in step_widths {
            if w <= prev {
                return Err(Error::Config(format!(
                    "step_widths must be strictly increasing, got {step_widths:?}"
                )));
            }
            slices.push(w - prev);
            prev = w;
        }
        let cfg = Self {
            kind,
            width: prev,
            slice_widths: slices,
            depths: depths.to_vec(),
            heads: heads.to_vec(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn steps(&self) -> usize {
        self.slice_widths.len()
    }

    /// Cumulative widths `C_i`.
    pub fn step_widths(&self) -> Vec<usize> {
        self.slice_widths
            .iter()
            .scan(0, |acc, &d| {
                *acc += d;
                Some(*acc)
            })
            .collect()
    }

    pub fn total_blocks(&self) -> usize {
        self.depths.iter().sum()
    }

    /// Head count of step `i`, or 1 for MLP blocks.
    pub fn heads_at(&self, i: usize) -> usize {
        match self.kind {
            BlockKind::Transformer => self.heads[i],
            BlockKind::Mlp => self.heads.get(i).copied().unwrap_or(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.steps();
        if n == 0 {
            return Err(Error::Config("slice_widths: at least one step is required".into()));
        }
        if let Some(i) = self.slice_widths.iter().position(|&d| d == 0) {
            return Err(Error::Config(format!("slice_widths[{i}] must be positive")));
        }
        let sum: usize = self.slice_widths.iter().sum();
        if sum != self.width {
            return Err(Error::Config(format!(
                "slice_widths sum to {sum} but width is {}",
                self.width
            )));
        }
        if self.depths.len() != n {
            return Err(Error::Config(format!(
                "depths has {} entries for {n} steps",
                self.depths.len()
            )));
        }
        if self.kind == BlockKind::Transformer {
            if self.heads.len() != n {
                return Err(Error::Config(format!(
                    "heads has {} entries for {n} steps",
                    self.heads.len()
                )));
            }
            for (i, (&w, &h)) in self.step_widths().iter().zip(&self.heads).enumerate() {
                if h == 0 || w % h != 0 {
                    return Err(Error::Config(format!(
                        "heads[{i}] = {h} does not divide step width {w}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// The wide-to-narrow counterpart with step order reversed.
    pub fn mirrored(&self) -> MirroredConfig {
        let mut widths = self.step_widths();
        widths.reverse();
        let mut depths = self.depths.clone();
        depths.reverse();
        let mut heads = self.heads.clone();
        heads.reverse();
        MirroredConfig {
            kind: self.kind,
            widths,
            depths,
            heads,
        }
    }
}

/// Which side of the channel axis a mask removes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Path {
    /// The first channels (`x_1` side).
    Slow,
    /// The last channels.
    Fast,
}

impl std::fmt::Display for Path {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Path::Slow => f.write_str("slow"),
            Path::Fast => f.write_str("fast"),
        }
    }
}

/// Zeroes `k` channels of `x`: the first `k` for [`Path::Slow`], the last
/// `k` for [`Path::Fast`].
pub fn mask_path<T: Scalar>(x: &Tensor<T>, path: Path, k: usize) -> Result<Tensor<T>> {
    let c = x.last_dim();
    if k > c {
        return Err(Error::Range {
            what: "masked channel count",
            value: k,
            limit: c,
        });
    }
    let mut out = x.clone();
    let zeroed = match path {
        Path::Slow => 0..k,
        Path::Fast => c - k..c,
    };
    for row in out.data_mut().chunks_mut(c) {
        row[zeroed.clone()].iter_mut().for_each(|v| *v = T::zero());
    }
    Ok(out)
}

/// Tape version of [`mask_path`]; gradients flow only through kept channels.
pub fn mask_path_var<T: Scalar>(tape: &mut Tape<T>, x: Var, path: Path, k: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let c = *shape.last().unwrap_or(&0);
    if k > c {
        return Err(Error::Range {
            what: "masked channel count",
            value: k,
            limit: c,
        });
    }
    if k == 0 {
        return Ok(x);
    }
    if k == c {
        return Ok(tape.constant(Tensor::zeros(&shape)));
    }
    let (sizes, zero_first) = match path {
        Path::Slow => ([k, c - k], true),
        Path::Fast => ([c - k, k], false),
    };
    let parts = tape.split_last(x, &sizes)?;
    let mut zshape = shape.clone();
    *zshape.last_mut().unwrap() = k;
    let zeros = tape.constant(Tensor::zeros(&zshape));
    if zero_first {
        tape.concat_last(&[zeros, parts[1]])
    } else {
        tape.concat_last(&[parts[0], zeros])
    }
}

/// Activations recorded for one step of a traced forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace<T> {
    pub index: usize,
    pub width: usize,
    /// The stream entering `F_i`, i.e. `[y_{i-1}, x_i]` (or `x_1`).
    pub input: Tensor<T>,
    pub blocks: Vec<BlockRecord<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepsModel<T> {
    pub config: StepsConfig,
    pub steps: Vec<ResidualStack<T>>,
}

impl<T: Scalar> StepsModel<T> {
    pub fn new<R: Rng + ?Sized>(config: StepsConfig, init: &Init, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let steps = config
            .step_widths()
            .iter()
            .enumerate()
            .map(|(i, &w)| ResidualStack::new(config.kind, w, config.depths[i], config.heads_at(i), init, rng))
            .collect::<Result<_>>()?;
        Ok(Self { config, steps })
    }

    /// Assembles a model from existing sub-models, checking their shapes
    /// against `config`.
    pub fn from_stacks(config: StepsConfig, steps: Vec<ResidualStack<T>>) -> Result<Self> {
        config.validate()?;
        if steps.len() != config.steps() {
            return Err(Error::Config(format!(
                "{} sub-models for {} steps",
                steps.len(),
                config.steps()
            )));
        }
        for (i, (s, w)) in steps.iter().zip(config.step_widths()).enumerate() {
            if s.width != w || s.depth() != config.depths[i] {
                return Err(Error::Config(format!(
                    "sub-model {i} is {}×{}, config expects {w}×{}",
                    s.width,
                    s.depth(),
                    config.depths[i]
                )));
            }
        }
        Ok(Self { config, steps })
    }

    /// Wraps a plain residual stack as a 1-step model.
    pub fn from_residual(stack: ResidualStack<T>, heads: usize) -> Self {
        Self {
            config: StepsConfig::residual(stack.kind, stack.width, stack.depth(), heads),
            steps: vec![stack],
        }
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    fn check_input(&self, tape: &Tape<T>, x: Var) -> Result<()> {
        if tape.value(x).rank() == 0 || tape.value(x).last_dim() != self.width() {
            return Err(Error::Dimension {
                op: "steps_forward",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![self.width()],
            });
        }
        Ok(())
    }

    fn run(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        ctx: &SeqContext,
        mut trace: Option<&mut Vec<StepTrace<T>>>,
    ) -> Result<Var> {
        self.check_input(tape, x)?;
        let slices = tape.split_last(x, &self.config.slice_widths)?;
        let mut y: Option<Var> = None;
        for (i, (stack, &xi)) in self.steps.iter().zip(&slices).enumerate() {
            let input = match y {
                None => xi,
                Some(prev) => tape.concat_last(&[prev, xi])?,
            };
            let out = match trace.as_deref_mut() {
                Some(records) => {
                    let (out, blocks) = stack.forward_traced(tape, input, ctx)?;
                    records.push(StepTrace {
                        index: i,
                        width: stack.width,
                        input: tape.value(input).clone(),
                        blocks,
                    });
                    out
                }
                None => stack.forward(tape, input, ctx)?,
            };
            y = Some(out);
        }
        Ok(y.expect("at least one step"))
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, ctx: &SeqContext) -> Result<Var> {
        self.run(tape, x, ctx, None)
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        ctx: &SeqContext,
    ) -> Result<(Var, Vec<StepTrace<T>>)> {
        let mut records = Vec::with_capacity(self.steps.len());
        let out = self.run(tape, x, ctx, Some(&mut records))?;
        Ok((out, records))
    }

    pub fn apply(&self, x: &Tensor<T>, ctx: &SeqContext) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let v = tape.constant(x.clone());
        let out = self.forward(&mut tape, v, ctx)?;
        Ok(tape.value(out).clone())
    }

    pub fn apply_traced(&self, x: &Tensor<T>, ctx: &SeqContext) -> Result<(Tensor<T>, Vec<StepTrace<T>>)> {
        let mut tape = Tape::inference();
        let v = tape.constant(x.clone());
        let (out, trace) = self.forward_traced(&mut tape, v, ctx)?;
        Ok((tape.value(out).clone(), trace))
    }
}

impl<T: Scalar> Parameters<T> for StepsModel<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, s) in self.steps.iter().enumerate() {
            s.visit_params(&join(prefix, &format!("step{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, s) in self.steps.iter_mut().enumerate() {
            s.visit_params_mut(&join(prefix, &format!("step{i}")), f);
        }
    }
}

/// Removes the last `count` blocks of step `step` (0-based). Remaining
/// weights are unchanged.
pub fn drop_step_blocks<T: Scalar>(model: &StepsModel<T>, step: usize, count: usize) -> Result<StepsModel<T>> {
    let n = model.steps.len();
    if step >= n {
        return Err(Error::Range {
            what: "step index",
            value: step,
            limit: n.saturating_sub(1),
        });
    }
    let depth = model.steps[step].depth();
    if count > depth {
        return Err(Error::Range {
            what: "dropped block count",
            value: count,
            limit: depth,
        });
    }
    let mut out = model.clone();
    out.steps[step].blocks.truncate(depth - count);
    out.config.depths[step] = depth - count;
    Ok(out)
}

/// Wide-to-narrow stacking: `x_{i+1}, y_i = Split(F_i(x_i))`, `y_n =
/// F_n(x_n)`, output `[y_1, …, y_n]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MirroredConfig {
    pub kind: BlockKind,
    /// Strictly decreasing; the first entry is the model width.
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    #[serde(default)]
    pub heads: Vec<usize>,
}

impl MirroredConfig {
    pub fn width(&self) -> usize {
        self.widths.first().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.widths.len();
        if n == 0 {
            return Err(Error::Config("widths: at least one step is required".into()));
        }
        for pair in self.widths.windows(2) {
            if pair[1] == 0 || pair[1] >= pair[0] {
                return Err(Error::Partition {
                    op: "mirrored split",
                    expected: pair[0],
                    got: pair[1],
                });
            }
        }
        if self.depths.len() != n {
            return Err(Error::Config(format!("depths has {} entries for {n} steps", self.depths.len())));
        }
        if self.kind == BlockKind::Transformer && self.heads.len() != n {
            return Err(Error::Config(format!("heads has {} entries for {n} steps", self.heads.len())));
        }
        Ok(())
    }

    fn heads_at(&self, i: usize) -> usize {
        self.heads.get(i).copied().unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MirroredStepsModel<T> {
    pub config: MirroredConfig,
    pub steps: Vec<ResidualStack<T>>,
}

impl<T: Scalar> MirroredStepsModel<T> {
    pub fn new<R: Rng + ?Sized>(config: MirroredConfig, init: &Init, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let steps = config
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| ResidualStack::new(config.kind, w, config.depths[i], config.heads_at(i), init, rng))
            .collect::<Result<_>>()?;
        Ok(Self { config, steps })
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, ctx: &SeqContext) -> Result<Var> {
        let c = self.config.width();
        if tape.value(x).rank() == 0 || tape.value(x).last_dim() != c {
            return Err(Error::Dimension {
                op: "reverse_forward",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![c],
            });
        }
        let n = self.steps.len();
        let mut outputs = Vec::with_capacity(n);
        let mut xi = x;
        for (i, stack) in self.steps.iter().enumerate() {
            let h = stack.forward(tape, xi, ctx)?;
            if i + 1 == n {
                outputs.push(h);
            } else {
                let keep = self.config.widths[i + 1];
                let width = tape.value(h).last_dim();
                if keep >= width {
                    return Err(Error::Partition {
                        op: "reverse_forward",
                        expected: width,
                        got: keep,
                    });
                }
                let parts = tape.split_last(h, &[keep, width - keep])?;
                xi = parts[0];
                outputs.push(parts[1]);
            }
        }
        tape.concat_last(&outputs)
    }

    pub fn apply(&self, x: &Tensor<T>, ctx: &SeqContext) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let v = tape.constant(x.clone());
        let out = self.forward(&mut tape, v, ctx)?;
        Ok(tape.value(out).clone())
    }
}

impl<T: Scalar> Parameters<T> for MirroredStepsModel<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, s) in self.steps.iter().enumerate() {
            s.visit_params(&join(prefix, &format!("step{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, s) in self.steps.iter_mut().enumerate() {
            s.visit_params_mut(&join(prefix, &format!("step{i}")), f);
        }
    }
}

/// Source channel of every output channel of a mirrored model whose
/// sub-models are all identities.
pub fn mirrored_channel_map(widths: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    for (i, &w) in widths.iter().enumerate() {
        let keep = widths.get(i + 1).copied().unwrap_or(0);
        out.extend(keep..w);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn toy(kind: BlockKind) -> StepsConfig {
        StepsConfig::from_step_widths(kind, &[4, 8, 12], &[2, 1, 1], &[1, 2, 3]).unwrap()
    }

    #[test]
    fn config_validation() {
        let cfg = toy(BlockKind::Transformer);
        assert_eq!(cfg.slice_widths, [4, 4, 4]);
        assert_eq!(cfg.step_widths(), [4, 8, 12]);
        let mut bad = cfg.clone();
        bad.width = 13;
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("12") && msg.contains("13"), "{msg}");
        let mut bad = cfg.clone();
        bad.heads[1] = 3;
        assert!(bad.validate().is_err());
        assert!(StepsConfig::from_step_widths(BlockKind::Mlp, &[8, 8], &[1, 1], &[]).is_err());
    }

    #[test]
    fn two_step_hand_case() {
        let cfg = StepsConfig {
            kind: BlockKind::Mlp,
            width: 2,
            slice_widths: vec![1, 1],
            depths: vec![1, 1],
            heads: vec![],
        };
        let m = StepsModel::<f64>::from_stacks(
            cfg,
            vec![ResidualStack::scaled(1, &[1.0]), ResidualStack::scaled(2, &[0.0])],
        )
        .unwrap();
        let x = Tensor::from_f64(&[1, 2], &[3.0, 5.0]).unwrap();
        assert_eq!(m.apply(&x, &SeqContext::single()).unwrap().data(), [6.0, 5.0]);
    }

    #[test]
    fn one_step_matches_stack() {
        let mut r = rng(1);
        let stack = ResidualStack::<f64>::new(BlockKind::Transformer, 8, 3, 2, &Init::default(), &mut r).unwrap();
        let m = StepsModel::from_residual(stack.clone(), 2);
        let x = Tensor::randn(&[5, 8], 1.0, &mut r);
        let ctx = SeqContext::single();
        assert!(m.apply(&x, &ctx).unwrap().bit_eq(&stack.apply(&x, &ctx).unwrap()));
    }

    #[test]
    fn zero_branch_chain_is_identity() {
        let mut r = rng(2);
        for kind in [BlockKind::Transformer, BlockKind::Mlp] {
            let m = StepsModel::<f64>::new(toy(kind), &Init::zero_branches(), &mut r).unwrap();
            let x = Tensor::randn(&[3, 12], 1.0, &mut r);
            assert!(m.apply(&x, &SeqContext::single()).unwrap().bit_eq(&x));
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut r = rng(3);
        let m = StepsModel::<f64>::new(toy(BlockKind::Mlp), &Init::default(), &mut r).unwrap();
        let x = Tensor::zeros(&[2, 10]);
        assert!(matches!(m.apply(&x, &SeqContext::single()), Err(Error::Dimension { .. })));
    }

    #[test]
    fn step_inputs_carry_untouched_slices() {
        let mut r = rng(4);
        let m = StepsModel::<f64>::new(toy(BlockKind::Transformer), &Init::default(), &mut r).unwrap();
        let x = Tensor::randn(&[3, 12], 1.0, &mut r);
        let (_, trace) = m.apply_traced(&x, &SeqContext::single()).unwrap();
        let widths = m.config.step_widths();
        for (i, st) in trace.iter().enumerate() {
            let lo = widths[i] - m.config.slice_widths[i];
            for row in 0..3 {
                assert_eq!(&st.input.row(row)[lo..], &x.row(row)[lo..widths[i]]);
            }
        }
    }

    #[test]
    fn mask_path_definition() {
        let x = Tensor::<f64>::from_f64(&[1, 4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(mask_path(&x, Path::Slow, 2).unwrap().data(), [0.0, 0.0, 3.0, 4.0]);
        assert_eq!(mask_path(&x, Path::Fast, 1).unwrap().data(), [1.0, 2.0, 3.0, 0.0]);
        assert!(mask_path(&x, Path::Slow, 0).unwrap().bit_eq(&x));
        assert!(matches!(mask_path(&x, Path::Fast, 5), Err(Error::Range { .. })));
    }

    #[test]
    fn tape_mask_matches_tensor_mask() {
        let mut r = rng(5);
        let x = Tensor::<f64>::randn(&[3, 6], 1.0, &mut r);
        for path in [Path::Slow, Path::Fast] {
            for k in 0..=6 {
                let mut tape = Tape::inference();
                let v = tape.constant(x.clone());
                let m = mask_path_var(&mut tape, v, path, k).unwrap();
                assert!(tape.value(m).bit_eq(&mask_path(&x, path, k).unwrap()));
            }
        }
    }

    #[test]
    fn drop_blocks_from_tail() {
        let mut r = rng(6);
        let cfg = StepsConfig::from_step_widths(BlockKind::Mlp, &[4, 6, 8], &[12, 6, 6], &[]).unwrap();
        let m = StepsModel::<f32>::new(cfg, &Init::default(), &mut r).unwrap();
        assert!(drop_step_blocks(&m, 0, 0).unwrap() == m);
        let d = drop_step_blocks(&m, 0, 4).unwrap();
        assert_eq!(d.config.depths, [8, 6, 6]);
        assert_eq!(d.steps[0].blocks[..], m.steps[0].blocks[..8]);
        assert!(matches!(drop_step_blocks(&m, 1, 7), Err(Error::Range { .. })));
        assert!(matches!(drop_step_blocks(&m, 3, 0), Err(Error::Range { .. })));
    }

    #[test]
    fn mirrored_identity_is_channel_permutation() {
        let mut r = rng(7);
        let cfg = toy(BlockKind::Mlp).mirrored();
        assert_eq!(cfg.widths, [12, 8, 4]);
        let m = MirroredStepsModel::<f64>::new(cfg.clone(), &Init::zero_branches(), &mut r).unwrap();
        let x = Tensor::randn(&[2, 12], 1.0, &mut r);
        let y = m.apply(&x, &SeqContext::single()).unwrap();
        let map = mirrored_channel_map(&cfg.widths);
        assert_eq!(map, [8, 9, 10, 11, 4, 5, 6, 7, 0, 1, 2, 3]);
        for row in 0..2 {
            for (j, &src) in map.iter().enumerate() {
                assert_eq!(y.row(row)[j], x.row(row)[src]);
            }
        }
    }

    #[test]
    fn mirrored_two_step_hand_case() {
        // F_1(x) = 2x on width 2, split keeps channel 0 for F_2(x) = 1.5x.
        let cfg = MirroredConfig {
            kind: BlockKind::Mlp,
            widths: vec![2, 1],
            depths: vec![1, 1],
            heads: vec![],
        };
        let m = MirroredStepsModel::<f64> {
            config: cfg,
            steps: vec![ResidualStack::scaled(2, &[1.0]), ResidualStack::scaled(1, &[0.5])],
        };
        let x = Tensor::from_f64(&[1, 2], &[3.0, 5.0]).unwrap();
        assert_eq!(m.apply(&x, &SeqContext::single()).unwrap().data(), [10.0, 9.0]);
    }

    #[test]
    fn mirrored_rejects_non_decreasing_widths() {
        let cfg = MirroredConfig {
            kind: BlockKind::Mlp,
            widths: vec![4, 4],
            depths: vec![1, 1],
            heads: vec![],
        };
        assert!(matches!(cfg.validate(), Err(Error::Partition { .. })));
    }

    #[test]
    fn mirrored_parameter_count_matches_forward() {
        let mut r = rng(8);
        let cfg = toy(BlockKind::Transformer);
        let fwd = StepsModel::<f32>::new(cfg.clone(), &Init::default(), &mut r).unwrap();
        let rev = MirroredStepsModel::<f32>::new(cfg.mirrored(), &Init::default(), &mut r).unwrap();
        assert_eq!(fwd.param_count(), rev.param_count());
    }

    #[test]
    fn gradients_reach_every_slice_through_zero_branches() {
        let mut r = rng(9);
        let m = StepsModel::<f64>::new(toy(BlockKind::Transformer), &Init::zero_branches(), &mut r).unwrap();
        let x = Tensor::randn(&[3, 12], 1.0, &mut r);
        let w = Tensor::randn(&[3, 12], 1.0, &mut r);
        let mut tape = Tape::new();
        let v = tape.leaf(x, true);
        let y = m.forward(&mut tape, v, &SeqContext::single()).unwrap();
        let wv = tape.constant(w.clone());
        let p = tape.mul(y, wv).unwrap();
        let loss = tape.sum(p).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(v).unwrap(), w.data());
    }

    #[test]
    fn config_serde_rejects_unknown_fields() {
        let text = r#"{"kind":"mlp","width":4,"slice_widths":[4],"depths":[1],"hedas":[1]}"#;
        assert!(serde_json::from_str::<StepsConfig>(text).is_err());
        let cfg = toy(BlockKind::Transformer);
        let back: StepsConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
