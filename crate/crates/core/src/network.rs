//! A complete model: stem, optional class token and position table, a
//! step-by-step body, final norm and linear head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockKind, Init, LayerNorm, Linear, SeqContext};
use crate::error::{Error, Result};
use crate::params::{join, Parameters};
use crate::scalar::Scalar;
use crate::steps::{mask_path_var, Path, StepsConfig, StepsModel};
use crate::tensor::{Tape, Tensor, Var};

/// What a sample looks like before the stem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum InputSpec {
    /// `tokens` real feature vectors of length `dim`, projected by a linear stem.
    Features { dim: usize },
    /// Integer token ids looked up in an embedding table.
    Tokens { vocab: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Classify from the class token (requires `cls_token`).
    Cls,
    /// One prediction per input token.
    #[default]
    PerToken,
}

/// Everything needed to build a [`Network`] and to cost it analytically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub body: StepsConfig,
    pub input: InputSpec,
    /// Tokens produced by the stem per sample (before any class token).
    pub tokens: usize,
    #[serde(default)]
    pub cls_token: bool,
    #[serde(default)]
    pub pos_embed: bool,
    #[serde(default)]
    pub causal: bool,
    pub classes: usize,
    #[serde(default)]
    pub readout: Readout,
    /// Layers outside the blocks under the layer-counting convention.
    /// Defaults to one per linear stem plus one for the head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra_layers: Option<usize>,
}

impl NetworkSpec {
    /// Sequence length seen by the body.
    pub fn seq_len(&self) -> usize {
        self.tokens + usize::from(self.cls_token)
    }

    pub fn width(&self) -> usize {
        self.body.width
    }

    pub fn extra_layers(&self) -> usize {
        self.extra_layers.unwrap_or_else(|| {
            usize::from(matches!(self.input, InputSpec::Features { .. })) + 1
        })
    }

    /// Rows of logits produced per sample.
    pub fn outputs_per_sample(&self) -> usize {
        match self.readout {
            Readout::Cls => 1,
            Readout::PerToken => self.tokens,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.body.validate()?;
        if self.tokens == 0 {
            return Err(Error::Config("tokens must be positive".into()));
        }
        if self.classes == 0 {
            return Err(Error::Config("classes must be positive".into()));
        }
        match self.input {
            InputSpec::Features { dim: 0 } => return Err(Error::Config("input.dim must be positive".into())),
            InputSpec::Tokens { vocab: 0 } => return Err(Error::Config("input.vocab must be positive".into())),
            _ => {}
        }
        if self.readout == Readout::Cls && !self.cls_token {
            return Err(Error::Config("readout = \"cls\" requires cls_token = true".into()));
        }
        if self.causal && self.body.kind != BlockKind::Transformer {
            return Err(Error::Config("causal = true requires transformer blocks".into()));
        }
        Ok(())
    }
}

/// Batch contents fed to [`Network::forward`]; rows are sample-major.
#[derive(Debug, Clone, Copy)]
pub enum Inputs<'a, T> {
    /// `[B·tokens × dim]`
    Features(&'a Tensor<T>),
    /// `B·tokens` ids
    Tokens(&'a [usize]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ForwardOptions {
    /// Zero channels of the body input before the first step.
    pub mask: Option<(Path, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stem<T> {
    Linear(Linear<T>),
    Embedding(Tensor<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub spec: NetworkSpec,
    pub stem: Stem<T>,
    /// `[1×C]`
    pub cls: Option<Tensor<T>>,
    /// `[seq_len×C]`
    pub pos: Option<Tensor<T>>,
    pub body: StepsModel<T>,
    pub norm: LayerNorm<T>,
    pub head: Linear<T>,
}

impl<T: Scalar> Network<T> {
    pub fn new<R: Rng + ?Sized>(spec: NetworkSpec, init: &Init, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let c = spec.width();
        let stem = match spec.input {
            InputSpec::Features { dim } => Stem::Linear(Linear::new(dim, c, init.std, false, rng)),
            InputSpec::Tokens { vocab } => Stem::Embedding(Tensor::trunc_normal(&[vocab, c], init.std, rng).with_requires_grad()),
        };
        let cls = spec
            .cls_token
            .then(|| Tensor::trunc_normal(&[1, c], init.std, rng).with_requires_grad());
        let pos = spec
            .pos_embed
            .then(|| Tensor::trunc_normal(&[spec.seq_len(), c], init.std, rng).with_requires_grad());
        let body = StepsModel::new(spec.body.clone(), init, rng)?;
        let norm = LayerNorm::new(c, init.ln_eps);
        let head = Linear::new(c, spec.classes, init.std, false, rng);
        Ok(Self {
            spec,
            stem,
            cls,
            pos,
            body,
            norm,
            head,
        })
    }

    pub fn context(&self) -> SeqContext {
        SeqContext::new(self.spec.seq_len(), self.spec.causal)
    }

    /// Stem output plus class token and positions: the body input.
    pub fn embed(&self, tape: &mut Tape<T>, inputs: Inputs<'_, T>) -> Result<Var> {
        let tokens = self.spec.tokens;
        let x = match (&self.stem, inputs) {
            (Stem::Linear(l), Inputs::Features(f)) => {
                if f.rank() != 2 || f.last_dim() != l.weight.shape()[0] || f.rows() % tokens != 0 {
                    return Err(Error::Dimension {
                        op: "network stem",
                        lhs: f.shape().to_vec(),
                        rhs: vec![tokens, l.weight.shape()[0]],
                    });
                }
                let v = tape.constant(f.clone());
                l.forward(tape, v)?
            }
            (Stem::Embedding(table), Inputs::Tokens(ids)) => {
                if ids.len() % tokens != 0 {
                    return Err(Error::Dimension {
                        op: "network stem",
                        lhs: vec![ids.len()],
                        rhs: vec![tokens],
                    });
                }
                let t = tape.param(table);
                tape.embedding(t, ids)?
            }
            _ => return Err(Error::Contract("input kind does not match the network stem".into())),
        };
        let x = match &self.cls {
            Some(cls) => {
                let c = tape.param(cls);
                tape.prepend_token(x, c, tokens)?
            }
            None => x,
        };
        match &self.pos {
            Some(pos) => {
                let p = tape.param(pos);
                tape.add_tiled(x, p)
            }
            None => Ok(x),
        }
    }

    /// Final norm, readout selection and head applied to body output.
    pub fn readout(&self, tape: &mut Tape<T>, z: Var) -> Result<Var> {
        let n = self.spec.seq_len();
        let rows = tape.value(z).rows();
        let z = match self.spec.readout {
            Readout::Cls => {
                let idx: Vec<usize> = (0..rows / n).map(|b| b * n).collect();
                tape.gather_rows(z, &idx)?
            }
            Readout::PerToken if self.spec.cls_token => {
                let idx: Vec<usize> = (0..rows).filter(|r| r % n != 0).collect();
                tape.gather_rows(z, &idx)?
            }
            Readout::PerToken => z,
        };
        let h = self.norm.forward(tape, z)?;
        self.head.forward(tape, h)
    }

    /// Logits: `[B×classes]` for class-token readout, `[B·tokens×classes]`
    /// otherwise.
    pub fn forward(&self, tape: &mut Tape<T>, inputs: Inputs<'_, T>, opts: &ForwardOptions) -> Result<Var> {
        let x = self.embed(tape, inputs)?;
        let x = match opts.mask {
            Some((path, k)) => mask_path_var(tape, x, path, k)?,
            None => x,
        };
        let z = self.body.forward(tape, x, &self.context())?;
        self.readout(tape, z)
    }

    /// Logits as a plain tensor, computed without gradient bookkeeping.
    pub fn predict(&self, inputs: Inputs<'_, T>, opts: &ForwardOptions) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, inputs, opts)?;
        Ok(tape.value(out).clone())
    }

    /// Multiply-accumulates of one forward pass over `batch` samples, as
    /// counted by the tape.
    pub fn count_macs(&self, inputs: Inputs<'_, T>) -> Result<u64> {
        let mut tape = Tape::inference();
        self.forward(&mut tape, inputs, &ForwardOptions::default())?;
        Ok(tape.macs())
    }

    /// Replaces the body, keeping stem and head; used by the ablations.
    pub fn with_body(&self, body: StepsModel<T>) -> Result<Self> {
        if body.width() != self.spec.width() {
            return Err(Error::Dimension {
                op: "with_body",
                lhs: vec![body.width()],
                rhs: vec![self.spec.width()],
            });
        }
        let mut out = self.clone();
        out.spec.body = body.config.clone();
        out.body = body;
        Ok(out)
    }
}

impl<T: Scalar> Parameters<T> for Network<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        match &self.stem {
            Stem::Linear(l) => l.visit_params(&join(prefix, "stem"), f),
            Stem::Embedding(t) => f(&join(prefix, "stem.table"), t),
        }
        if let Some(c) = &self.cls {
            f(&join(prefix, "cls"), c);
        }
        if let Some(p) = &self.pos {
            f(&join(prefix, "pos"), p);
        }
        self.body.visit_params(&join(prefix, "body"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        match &mut self.stem {
            Stem::Linear(l) => l.visit_params_mut(&join(prefix, "stem"), f),
            Stem::Embedding(t) => f(&join(prefix, "stem.table"), t),
        }
        if let Some(c) = &mut self.cls {
            f(&join(prefix, "cls"), c);
        }
        if let Some(p) = &mut self.pos {
            f(&join(prefix, "pos"), p);
        }
        self.body.visit_params_mut(&join(prefix, "body"), f);
        self.norm.visit_params_mut(&join(prefix, "norm"), f);
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }
}
