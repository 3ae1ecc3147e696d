//! Pre-norm residual blocks and plain residual stacks.
//!
//! A block maps `z ↦ z + R(z)`. The transformer block applies two such
//! sub-residuals (attention, then MLP), each reading a layer-normalized copy
//! of the stream. The MLP block has a single `C → 4C → C` branch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{join, Parameters};
use crate::scalar::Scalar;
use crate::tensor::{AttentionMask, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Transformer,
    Mlp,
}

impl BlockKind {
    /// Linear layers per block under the layer-counting convention
    /// (QKV, attention, output, two MLP layers).
    pub fn layers_per_block(self) -> usize {
        match self {
            BlockKind::Transformer => 5,
            BlockKind::Mlp => 2,
        }
    }
}

impl std::fmt::Display for BlockKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BlockKind::Transformer => f.write_str("transformer"),
            BlockKind::Mlp => f.write_str("mlp"),
        }
    }
}

/// Parameter initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Init {
    /// Std of the truncated normal used for every projection.
    pub std: f64,
    /// Zero the last linear layer of every residual branch, making each
    /// block an exact identity.
    pub zero_branch_output: bool,
    pub ln_eps: f64,
}

impl Default for Init {
    fn default() -> Self {
        Self {
            std: 0.02,
            zero_branch_output: false,
            ln_eps: 1e-6,
        }
    }
}

impl Init {
    pub fn zero_branches() -> Self {
        Self {
            zero_branch_output: true,
            ..Self::default()
        }
    }
}

/// How rows of a `[R×C]` stream group into sequences for attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqContext {
    /// Tokens per sequence; `None` treats all rows as one sequence.
    pub seq_len: Option<usize>,
    pub causal: bool,
}

impl SeqContext {
    pub fn single() -> Self {
        Self {
            seq_len: None,
            causal: false,
        }
    }

    pub fn new(seq_len: usize, causal: bool) -> Self {
        Self {
            seq_len: Some(seq_len),
            causal,
        }
    }

    fn resolve(&self, rows: usize) -> usize {
        self.seq_len.unwrap_or(rows)
    }
}

impl Default for SeqContext {
    fn default() -> Self {
        Self::single()
    }
}

/// Lower-triangular admissibility mask for decoder attention.
pub fn causal_attention_mask(n: usize) -> AttentionMask {
    AttentionMask::causal(n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `[in × out]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, std: f64, zero: bool, rng: &mut R) -> Self {
        let weight = if zero {
            Tensor::zeros(&[fan_in, fan_out])
        } else {
            Tensor::trunc_normal(&[fan_in, fan_out], std, rng)
        };
        Self {
            weight: weight.with_requires_grad(),
            bias: Tensor::zeros(&[fan_out]).with_requires_grad(),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let h = tape.matmul(x, w)?;
        tape.add_tiled(h, b)
    }

    pub fn fan_out(&self) -> usize {
        self.weight.last_dim()
    }
}

impl<T: Scalar> Parameters<T> for Linear<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
    pub eps: T,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(width: usize, eps: f64) -> Self {
        Self {
            gain: Tensor::ones(&[width]).with_requires_grad(),
            bias: Tensor::zeros(&[width]).with_requires_grad(),
            eps: T::of(eps),
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let g = tape.param(&self.gain);
        let b = tape.param(&self.bias);
        tape.layer_norm(x, g, b, self.eps)
    }
}

impl<T: Scalar> Parameters<T> for LayerNorm<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Transformer block: `z + Attn(LN(z))`, then `+ MLP(LN(·))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock<T> {
    pub heads: usize,
    pub norm1: LayerNorm<T>,
    /// `C → 3C` fused query/key/value projection.
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// MLP-only block: `z + W₂·gelu(W₁·LN(z))`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBlock<T> {
    pub norm: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Block<T> {
    Transformer(TransformerBlock<T>),
    Mlp(MlpBlock<T>),
    /// Parameter-free branch `R(z) = s·z`; used to build hand-checkable
    /// compositions.
    Scaled(T),
}

/// Output of one traced block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockRecord<T> {
    pub output: Tensor<T>,
    /// Sum of the block's branch outputs, accumulated separately from the
    /// stream addition.
    pub residual: Tensor<T>,
}

impl<T: Scalar> Block<T> {
    pub fn new<R: Rng + ?Sized>(
        kind: BlockKind,
        width: usize,
        heads: usize,
        init: &Init,
        rng: &mut R,
    ) -> Result<Self> {
        let zero = init.zero_branch_output;
        let std = init.std;
        match kind {
            BlockKind::Transformer => {
                if heads == 0 || !width.is_multiple_of(heads) {
                    return Err(Error::Config(format!(
                        "width {width} is not divisible by head count {heads}"
                    )));
                }
                Ok(Block::Transformer(TransformerBlock {
                    heads,
                    norm1: LayerNorm::new(width, init.ln_eps),
                    qkv: Linear::new(width, 3 * width, std, false, rng),
                    proj: Linear::new(width, width, std, zero, rng),
                    norm2: LayerNorm::new(width, init.ln_eps),
                    fc1: Linear::new(width, 4 * width, std, false, rng),
                    fc2: Linear::new(4 * width, width, std, zero, rng),
                }))
            }
            BlockKind::Mlp => Ok(Block::Mlp(MlpBlock {
                norm: LayerNorm::new(width, init.ln_eps),
                fc1: Linear::new(width, 4 * width, std, false, rng),
                fc2: Linear::new(4 * width, width, std, zero, rng),
            })),
        }
    }

    /// Width the block operates at, if it has parameters.
    pub fn width(&self) -> Option<usize> {
        match self {
            Block::Transformer(b) => Some(b.proj.fan_out()),
            Block::Mlp(b) => Some(b.fc2.fan_out()),
            Block::Scaled(_) => None,
        }
    }

    /// Returns the block output and the summed branch values.
    fn forward_parts(&self, tape: &mut Tape<T>, z: Var, ctx: &SeqContext) -> Result<(Var, Vec<Var>)> {
        if let Some(w) = self.width() {
            if tape.value(z).last_dim() != w {
                return Err(Error::Dimension {
                    op: "block_forward",
                    lhs: tape.shape(z).to_vec(),
                    rhs: vec![w],
                });
            }
        }
        match self {
            Block::Transformer(b) => {
                let rows = tape.value(z).rows();
                let h = b.norm1.forward(tape, z)?;
                let qkv = b.qkv.forward(tape, h)?;
                let a = tape.attention(qkv, b.heads, ctx.resolve(rows), ctx.causal)?;
                let attn = b.proj.forward(tape, a)?;
                let z1 = tape.add(z, attn)?;
                let h2 = b.norm2.forward(tape, z1)?;
                let m = b.fc1.forward(tape, h2)?;
                let m = tape.gelu(m)?;
                let mlp = b.fc2.forward(tape, m)?;
                let out = tape.add(z1, mlp)?;
                Ok((out, vec![attn, mlp]))
            }
            Block::Mlp(b) => {
                let h = b.norm.forward(tape, z)?;
                let h = b.fc1.forward(tape, h)?;
                let h = tape.gelu(h)?;
                let r = b.fc2.forward(tape, h)?;
                Ok((tape.add(z, r)?, vec![r]))
            }
            Block::Scaled(s) => {
                let r = tape.scale(z, *s)?;
                Ok((tape.add(z, r)?, vec![r]))
            }
        }
    }

    /// `z + R(z)` on a `[N×C]` stream.
    pub fn forward(&self, tape: &mut Tape<T>, z: Var, ctx: &SeqContext) -> Result<Var> {
        Ok(self.forward_parts(tape, z, ctx)?.0)
    }
}

impl<T: Scalar> Parameters<T> for Block<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        match self {
            Block::Transformer(b) => {
                b.norm1.visit_params(&join(prefix, "norm1"), f);
                b.qkv.visit_params(&join(prefix, "qkv"), f);
                b.proj.visit_params(&join(prefix, "proj"), f);
                b.norm2.visit_params(&join(prefix, "norm2"), f);
                b.fc1.visit_params(&join(prefix, "fc1"), f);
                b.fc2.visit_params(&join(prefix, "fc2"), f);
            }
            Block::Mlp(b) => {
                b.norm.visit_params(&join(prefix, "norm"), f);
                b.fc1.visit_params(&join(prefix, "fc1"), f);
                b.fc2.visit_params(&join(prefix, "fc2"), f);
            }
            Block::Scaled(_) => {}
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        match self {
            Block::Transformer(b) => {
                b.norm1.visit_params_mut(&join(prefix, "norm1"), f);
                b.qkv.visit_params_mut(&join(prefix, "qkv"), f);
                b.proj.visit_params_mut(&join(prefix, "proj"), f);
                b.norm2.visit_params_mut(&join(prefix, "norm2"), f);
                b.fc1.visit_params_mut(&join(prefix, "fc1"), f);
                b.fc2.visit_params_mut(&join(prefix, "fc2"), f);
            }
            Block::Mlp(b) => {
                b.norm.visit_params_mut(&join(prefix, "norm"), f);
                b.fc1.visit_params_mut(&join(prefix, "fc1"), f);
                b.fc2.visit_params_mut(&join(prefix, "fc2"), f);
            }
            Block::Scaled(_) => {}
        }
    }
}

/// `D` blocks of a common width applied in sequence. Empty is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStack<T> {
    pub width: usize,
    pub kind: BlockKind,
    pub blocks: Vec<Block<T>>,
}

impl<T: Scalar> ResidualStack<T> {
    pub fn new<R: Rng + ?Sized>(
        kind: BlockKind,
        width: usize,
        depth: usize,
        heads: usize,
        init: &Init,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|_| Block::new(kind, width, heads, init, rng))
            .collect::<Result<_>>()?;
        Ok(Self { width, kind, blocks })
    }

    /// A stack made of parameter-free `R(z) = s·z` branches.
    pub fn scaled(width: usize, scales: &[T]) -> Self {
        Self {
            width,
            kind: BlockKind::Mlp,
            blocks: scales.iter().map(|&s| Block::Scaled(s)).collect(),
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    fn check_width(&self, tape: &Tape<T>, z: Var) -> Result<()> {
        if tape.value(z).last_dim() != self.width || tape.value(z).rank() == 0 {
            return Err(Error::Dimension {
                op: "stack_forward",
                lhs: tape.shape(z).to_vec(),
                rhs: vec![self.width],
            });
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape<T>, z0: Var, ctx: &SeqContext) -> Result<Var> {
        self.check_width(tape, z0)?;
        let mut z = z0;
        for b in &self.blocks {
            z = b.forward(tape, z, ctx)?;
        }
        Ok(z)
    }

    /// Like [`ResidualStack::forward`], also returning every block's output
    /// and branch sum.
    pub fn forward_traced(
        &self,
        tape: &mut Tape<T>,
        z0: Var,
        ctx: &SeqContext,
    ) -> Result<(Var, Vec<BlockRecord<T>>)> {
        self.check_width(tape, z0)?;
        let mut z = z0;
        let mut records = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (out, branches) = b.forward_parts(tape, z, ctx)?;
            let mut residual = tape.value(branches[0]).clone();
            for &br in &branches[1..] {
                let add = tape.value(br).data().to_vec();
                residual.data_mut().iter_mut().zip(add).for_each(|(r, a)| *r += a);
            }
            records.push(BlockRecord {
                output: tape.value(out).clone(),
                residual,
            });
            z = out;
        }
        Ok((z, records))
    }

    /// Evaluates on a plain tensor (no gradients).
    pub fn apply(&self, z0: &Tensor<T>, ctx: &SeqContext) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let z = tape.constant(z0.clone());
        let out = self.forward(&mut tape, z, ctx)?;
        Ok(tape.value(out).clone())
    }

    /// Evaluates on a plain tensor, returning per-block records.
    pub fn apply_traced(&self, z0: &Tensor<T>, ctx: &SeqContext) -> Result<(Tensor<T>, Vec<BlockRecord<T>>)> {
        let mut tape = Tape::inference();
        let z = tape.constant(z0.clone());
        let (out, rec) = self.forward_traced(&mut tape, z, ctx)?;
        Ok((tape.value(out).clone(), rec))
    }
}

impl<T: Scalar> Parameters<T> for ResidualStack<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("block{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("block{i}")), f);
        }
    }
}
