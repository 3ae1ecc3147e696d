//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{BlockKind, Init, ResidualStack, SeqContext};
use crate::error::Result;
use crate::network::{ForwardOptions, InputSpec, Inputs, Network, NetworkSpec, Readout};
use crate::params::Parameters;
use crate::steps::{MirroredConfig, MirroredStepsModel, StepsConfig, StepsModel};
use crate::tensor::{AttentionMask, Tape, Tensor, Var};

/// Step used by the gradient suites.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Below this magnitude the relative error is measured against the floor
/// instead. Some gradients are exactly zero (key biases under softmax shift
/// invariance) and the difference quotient returns rounding noise near
/// 1e-12 for them, so the floor sits well above that noise.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Five-point central difference
/// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h` for every coordinate.
/// Truncation error is O(h⁴), which keeps tiny gradients of deep
/// compositions resolvable at 1e-5 relative error.
pub fn central_difference<F>(mut f: F, point: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut at = |offset: f64| {
            x[i] = point[i] + offset;
            f(&x)
        };
        let (p2, p1, m1, m2) = (at(2.0 * step)?, at(step)?, at(-step)?, at(-2.0 * step)?);
        x[i] = point[i];
        out.push((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * step));
    }
    Ok(out)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst coordinate.
    pub worst: usize,
}

impl GradCheckReport {
    pub fn compare(analytic: &[f64], numeric: &[f64]) -> Self {
        assert_eq!(analytic.len(), numeric.len());
        let mut report = Self {
            checked: analytic.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst: 0,
        };
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let rel = relative_error(a, n);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = i;
            }
            report.max_abs_error = report.max_abs_error.max((a - n).abs());
        }
        report
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Checks the gradient of a scalar function of several tensors built on a
/// fresh f64 tape. `f` receives one leaf per input, in order.
pub fn check_tape_fn<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match tape.grad(*v) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }

    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let numeric = central_difference(
        |x| {
            let mut tape = Tape::inference();
            let mut offset = 0;
            let mut vars = Vec::with_capacity(inputs.len());
            for t in inputs {
                let n = t.numel();
                let v = Tensor::new(t.shape().to_vec(), x[offset..offset + n].to_vec())?;
                vars.push(tape.leaf(v, false));
                offset += n;
            }
            let loss = f(&mut tape, &vars)?;
            tape.value(loss).item()
        },
        &flat,
        step,
    )?;
    Ok(GradCheckReport::compare(&analytic, &numeric))
}

/// Checks the gradient of a scalar loss with respect to every parameter of
/// `model`. `f` builds the loss on the given tape; it is re-run on perturbed
/// clones for the numeric side.
pub fn check_params<M, F>(model: &M, step: f64, f: F) -> Result<GradCheckReport>
where
    M: Parameters<f64> + Clone,
    F: Fn(&M, &mut Tape<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(model, &mut tape)?;
    tape.backward(loss)?;
    let mut analytic = Vec::new();
    model.visit_params("", &mut |_, t| match tape.param_grad(t) {
        Some(g) => analytic.extend_from_slice(g),
        None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
    });

    let mut probe = model.clone();
    let numeric = central_difference(
        |x| {
            probe.set_flat_values(x);
            let mut tape = Tape::inference();
            let loss = f(&probe, &mut tape)?;
            tape.value(loss).item()
        },
        &model.flat_values(),
        step,
    )?;
    Ok(GradCheckReport::compare(&analytic, &numeric))
}

/// Tolerance on the maximum relative error for the built-in suite.
pub const SUITE_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

/// Values in `±[0.2, 2]`, away from the kinks of `relu`.
fn off_zero<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.2..2.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output coordinate carries a
/// distinct weight and normalizing ops do not get a zero gradient.
fn contract(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::uniform(tape.shape(out), -1.0, 1.0, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn unary(name: &'static str, x: Tensor<f64>, op: fn(&mut Tape<f64>, Var) -> Result<Var>) -> Result<SuiteCase> {
    let report = check_tape_fn(&[x], DEFAULT_STEP, |t, v| {
        let y = op(t, v[0])?;
        contract(t, y, 1)
    })?;
    Ok(SuiteCase { name, report })
}

fn binary(name: &'static str, a: Tensor<f64>, b: Tensor<f64>, op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Result<SuiteCase> {
    let report = check_tape_fn(&[a, b], DEFAULT_STEP, |t, v| {
        let y = op(t, v[0], v[1])?;
        contract(t, y, 2)
    })?;
    Ok(SuiteCase { name, report })
}

fn params_case<M: Parameters<f64> + Clone>(
    name: &'static str,
    model: &M,
    f: impl Fn(&M, &mut Tape<f64>) -> Result<Var>,
) -> Result<SuiteCase> {
    Ok(SuiteCase {
        name,
        report: check_params(model, DEFAULT_STEP, f)?,
    })
}

/// Finite-difference checks of every differentiable tape op, both block
/// kinds, a step model, its mirrored variant and a whole network, at f64.
pub fn suite(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut r;
    let mut out = vec![
        binary("matmul", off_zero(&[3, 4], rng), off_zero(&[4, 5], rng), |t, a, b| t.matmul(a, b))?,
        unary("transpose", off_zero(&[3, 4], rng), |t, x| t.transpose(x))?,
        binary("add", off_zero(&[3, 4], rng), off_zero(&[3, 4], rng), |t, a, b| t.add(a, b))?,
        binary("sub", off_zero(&[3, 4], rng), off_zero(&[3, 4], rng), |t, a, b| t.sub(a, b))?,
        binary("mul", off_zero(&[3, 4], rng), off_zero(&[3, 4], rng), |t, a, b| t.mul(a, b))?,
        unary("scale", off_zero(&[3, 4], rng), |t, x| t.scale(x, -1.7))?,
        binary("add_tiled_row", off_zero(&[6, 4], rng), off_zero(&[4], rng), |t, a, b| t.add_tiled(a, b))?,
        binary("add_tiled_table", off_zero(&[6, 4], rng), off_zero(&[3, 4], rng), |t, a, b| t.add_tiled(a, b))?,
        unary("relu", off_zero(&[3, 4], rng), |t, x| t.relu(x))?,
        unary("gelu", off_zero(&[3, 4], rng), |t, x| t.gelu(x))?,
        unary("softmax", off_zero(&[3, 5], rng), |t, x| t.softmax(x))?,
        unary("masked_softmax", off_zero(&[4, 4], rng), |t, x| t.masked_softmax(x, &AttentionMask::causal(4)))?,
        unary("split_concat", off_zero(&[3, 6], rng), |t, x| {
            let parts = t.split_last(x, &[1, 3, 2])?;
            let a = t.scale(parts[0], 2.0)?;
            t.concat_last(&[parts[2], a, parts[1]])
        })?,
        unary("gather_rows", off_zero(&[4, 3], rng), |t, x| t.gather_rows(x, &[3, 0, 3]))?,
        binary("prepend_token", off_zero(&[6, 3], rng), off_zero(&[1, 3], rng), |t, x, c| t.prepend_token(x, c, 3))?,
        unary("embedding", off_zero(&[5, 3], rng), |t, x| t.embedding(x, &[4, 0, 4, 2]))?,
        unary("attention", off_zero(&[6, 12], rng), |t, x| t.attention(x, 2, 3, false))?,
        unary("attention_causal", off_zero(&[6, 12], rng), |t, x| t.attention(x, 2, 3, true))?,
        unary("sum", off_zero(&[3, 4], rng), |t, x| t.sum(x))?,
        unary("mean", off_zero(&[3, 4], rng), |t, x| t.mean(x))?,
        unary("cross_entropy", off_zero(&[4, 5], rng), |t, x| t.cross_entropy(x, &[0, 4, 2, 2]))?,
    ];
    let ln = check_tape_fn(&[off_zero(&[3, 5], rng), off_zero(&[5], rng), off_zero(&[5], rng)], DEFAULT_STEP, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?;
        contract(t, y, 3)
    })?;
    out.push(SuiteCase { name: "layer_norm", report: ln });

    let init = Init { std: 0.3, ..Init::default() };
    let ctx = SeqContext::new(2, true);
    let x8 = Tensor::uniform(&[4, 8], -2.0, 2.0, rng);
    let block_loss = |x: &Tensor<f64>| {
        let x = x.clone();
        move |m: &ResidualStack<f64>, t: &mut Tape<f64>| {
            let v = t.constant(x.clone());
            let y = m.forward(t, v, &ctx)?;
            contract(t, y, 4)
        }
    };
    let tb = ResidualStack::new(BlockKind::Transformer, 8, 1, 2, &init, rng)?;
    out.push(params_case("transformer_block", &tb, block_loss(&x8))?);
    let mb = ResidualStack::new(BlockKind::Mlp, 8, 1, 0, &init, rng)?;
    out.push(params_case("mlp_block", &mb, block_loss(&x8))?);

    let steps = StepsModel::new(
        StepsConfig::from_step_widths(BlockKind::Transformer, &[4, 8], &[1, 1], &[1, 2])?,
        &init,
        rng,
    )?;
    out.push(params_case("steps_model", &steps, |m, t| {
        let v = t.constant(x8.clone());
        let y = m.forward(t, v, &ctx)?;
        contract(t, y, 5)
    })?);
    let mirrored = MirroredStepsModel::new(
        MirroredConfig {
            kind: BlockKind::Mlp,
            widths: vec![8, 4],
            depths: vec![1, 1],
            heads: Vec::new(),
        },
        &init,
        rng,
    )?;
    out.push(params_case("mirrored_model", &mirrored, |m, t| {
        let v = t.constant(x8.clone());
        let y = m.forward(t, v, &ctx)?;
        contract(t, y, 6)
    })?);

    let spec = NetworkSpec {
        body: StepsConfig::from_step_widths(BlockKind::Transformer, &[4, 6], &[1, 1], &[2, 2])?,
        input: InputSpec::Tokens { vocab: 5 },
        tokens: 3,
        cls_token: true,
        pos_embed: true,
        causal: false,
        classes: 3,
        readout: Readout::Cls,
        extra_layers: None,
    };
    let net = Network::new(spec, &init, rng)?;
    let ids = [1usize, 4, 0, 2, 2, 3];
    out.push(params_case("network", &net, |m, t| {
        let logits = m.forward(t, Inputs::Tokens(&ids), &ForwardOptions::default())?;
        t.cross_entropy(logits, &[2, 0])
    })?);
    Ok(out)
}
