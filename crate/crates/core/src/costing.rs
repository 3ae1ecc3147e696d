//! Analytical cost model: multiply-accumulate counts, parameter counts and
//! layer counts, plus the width and depth schedules used to derive
//! step-by-step configurations.
//!
//! One multiply-accumulate counts as one FLOP. A transformer block over `N`
//! tokens of width `C` costs `4NC²` (QKV and output projections), `2N²C`
//! (scores and weighted sum) and `8NC²` (MLP).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::blocks::BlockKind;
use crate::error::{Error, Result};
use crate::network::{InputSpec, NetworkSpec};
use crate::steps::{MirroredConfig, StepsConfig};

/// `12·N·C²·D + 2·N²·C·D`.
pub fn transformer_flops(n: u64, c: u64, d: u64) -> u64 {
    12 * n * c * c * d + 2 * n * n * c * d
}

/// Same as [`transformer_flops`] over reals, for reasoning about unrounded
/// widths.
pub fn transformer_flops_f64(n: f64, c: f64, d: f64) -> f64 {
    12.0 * n * c * c * d + 2.0 * n * n * c * d
}

pub fn mlp_block_flops(n: u64, c: u64, d: u64) -> u64 {
    8 * n * c * c * d
}

pub fn block_flops(kind: BlockKind, n: u64, c: u64, d: u64) -> u64 {
    match kind {
        BlockKind::Transformer => transformer_flops(n, c, d),
        BlockKind::Mlp => mlp_block_flops(n, c, d),
    }
}

/// Parameters of one block of width `c`.
pub fn block_params(kind: BlockKind, c: u64) -> u64 {
    match kind {
        BlockKind::Transformer => 12 * c * c + 13 * c,
        BlockKind::Mlp => 8 * c * c + 7 * c,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub qkv_out: u64,
    pub attention: u64,
    pub mlp: u64,
    pub stem: u64,
    pub head: u64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> u64 {
        self.qkv_out + self.attention + self.mlp + self.stem + self.head
    }

    fn add_blocks(&mut self, kind: BlockKind, n: u64, c: u64, d: u64) {
        match kind {
            BlockKind::Transformer => {
                self.qkv_out += 4 * n * c * c * d;
                self.attention += 2 * n * n * c * d;
                self.mlp += 8 * n * c * c * d;
            }
            BlockKind::Mlp => self.mlp += 8 * n * c * c * d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamsBreakdown {
    pub blocks: u64,
    pub stem: u64,
    /// Class token and position table.
    pub embeddings: u64,
    /// Final norm and classifier.
    pub head: u64,
}

/// Cost of one forward pass over a single sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Sequence length seen by the blocks.
    pub tokens: u64,
    pub flops_total: u64,
    pub flops_breakdown: FlopsBreakdown,
    pub params_total: u64,
    pub params_breakdown: ParamsBreakdown,
    pub layers_total: u64,
    pub blocks_total: u64,
    pub extra_layers: u64,
}

impl CostReport {
    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    /// Aligned two-column text rendering.
    pub fn to_table(&self) -> String {
        let rows: Vec<(&str, String)> = vec![
            ("model", self.name.clone().unwrap_or_else(|| "-".into())),
            ("tokens", self.tokens.to_string()),
            ("blocks", self.blocks_total.to_string()),
            ("layers", self.layers_total.to_string()),
            ("params", format!("{} ({})", self.params_total, human(self.params_total, "M"))),
            ("flops", format!("{} ({})", self.flops_total, human(self.flops_total, "G"))),
            ("  qkv_out", self.flops_breakdown.qkv_out.to_string()),
            ("  attention", self.flops_breakdown.attention.to_string()),
            ("  mlp", self.flops_breakdown.mlp.to_string()),
            ("  stem", self.flops_breakdown.stem.to_string()),
            ("  head", self.flops_breakdown.head.to_string()),
        ];
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<w$}  {v:>}");
        }
        out
    }
}

fn human(v: u64, unit: &str) -> String {
    let scale = if unit == "G" { 1e9 } else { 1e6 };
    format!("{:.2}{unit}", v as f64 / scale)
}

/// Block FLOPs of a step-by-step body over `n` tokens.
pub fn body_flops(cfg: &StepsConfig, n: u64) -> FlopsBreakdown {
    let mut f = FlopsBreakdown::default();
    for (&c, &d) in cfg.step_widths().iter().zip(&cfg.depths) {
        f.add_blocks(cfg.kind, n, c as u64, d as u64);
    }
    f
}

pub fn body_params(cfg: &StepsConfig) -> u64 {
    cfg.step_widths()
        .iter()
        .zip(&cfg.depths)
        .map(|(&c, &d)| d as u64 * block_params(cfg.kind, c as u64))
        .sum()
}

pub fn mirrored_flops(cfg: &MirroredConfig, n: u64) -> FlopsBreakdown {
    let mut f = FlopsBreakdown::default();
    for (&c, &d) in cfg.widths.iter().zip(&cfg.depths) {
        f.add_blocks(cfg.kind, n, c as u64, d as u64);
    }
    f
}

pub fn mirrored_params(cfg: &MirroredConfig) -> u64 {
    cfg.widths
        .iter()
        .zip(&cfg.depths)
        .map(|(&c, &d)| d as u64 * block_params(cfg.kind, c as u64))
        .sum()
}

/// Full cost of a network for one sample.
pub fn model_cost(spec: &NetworkSpec) -> Result<CostReport> {
    spec.validate()?;
    let c = spec.width() as u64;
    let n = spec.seq_len() as u64;
    let tokens = spec.tokens as u64;
    let classes = spec.classes as u64;
    let mut flops = body_flops(&spec.body, n);
    let stem_params = match spec.input {
        InputSpec::Features { dim } => {
            flops.stem = tokens * dim as u64 * c;
            dim as u64 * c + c
        }
        InputSpec::Tokens { vocab } => vocab as u64 * c,
    };
    flops.head = spec.outputs_per_sample() as u64 * c * classes;
    let embeddings = if spec.cls_token { c } else { 0 } + if spec.pos_embed { n * c } else { 0 };
    let params = ParamsBreakdown {
        blocks: body_params(&spec.body),
        stem: stem_params,
        embeddings,
        head: 2 * c + c * classes + classes,
    };
    let blocks = spec.body.total_blocks() as u64;
    let extra = spec.extra_layers() as u64;
    Ok(CostReport {
        name: None,
        tokens: n,
        flops_total: flops.total(),
        flops_breakdown: flops,
        params_total: params.blocks + params.stem + params.embeddings + params.head,
        params_breakdown: params,
        layers_total: blocks * spec.body.kind.layers_per_block() as u64 + extra,
        blocks_total: blocks,
        extra_layers: extra,
    })
}

/// Largest head count no greater than `width / head_dim` (at least 1)
/// that divides `width`.
pub fn head_count(width: usize, head_dim: usize) -> usize {
    let mut h = (width / head_dim.max(1)).max(1);
    while !width.is_multiple_of(h) {
        h -= 1;
    }
    h
}

fn round_to_8(x: f64) -> usize {
    ((x / 8.0).round() * 8.0) as usize
}

/// Step widths for `n` steps ending at `c`, each `√2` narrower than the
/// next, rounded to the nearest multiple of 8.
pub fn width_schedule(c: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    let smallest = c as f64 * 2f64.powf(-((n - 1) as f64) / 2.0);
    if smallest < 8.0 {
        return Err(Error::Config(format!(
            "width {c} is too small for {n} steps: the first step would be {smallest:.1} < 8 channels"
        )));
    }
    let mut widths: Vec<usize> = (1..n)
        .map(|i| round_to_8(c as f64 * 2f64.powf(-((n - i) as f64) / 2.0)))
        .collect();
    widths.push(c);
    if widths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "width {c} does not yield strictly increasing step widths for {n} steps: {widths:?}"
        )));
    }
    Ok(widths)
}

/// Depths for `n` steps from a `d`-block residual stack by repeated
/// splitting: at every level half the blocks stay at the current width and
/// the other half become twice as many blocks one level narrower.
///
/// The narrower level always ends up with an even count, so only the
/// widest step sees an odd split; there the half that stays is rounded up.
pub fn allocate_depths(d: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    if n > 1 && d < 2 {
        return Err(Error::Config(format!(
            "base depth {d} is too small for {n} steps (needs at least 2)"
        )));
    }
    let mut out = vec![0; n];
    let mut cur = d;
    for i in (1..n).rev() {
        out[i] = cur.div_ceil(2);
        cur = 2 * (cur / 2);
    }
    out[0] = cur;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetPoint {
    pub depth: usize,
    /// Largest multiple-of-8 width within budget; `None` when even width 8
    /// exceeds it.
    pub width: Option<usize>,
    pub flops: Option<u64>,
}

/// For every depth, the widest multiple-of-8 width whose block cost fits in
/// `budget`.
pub fn budget_frontier(budget: u64, n: u64, kind: BlockKind, depths: &[usize]) -> Result<Vec<BudgetPoint>> {
    if budget == 0 {
        return Err(Error::Config("budget must be positive".into()));
    }
    Ok(depths
        .iter()
        .map(|&d| {
            let cost = |c: u64| block_flops(kind, n, c, d as u64);
            if d == 0 {
                return BudgetPoint {
                    depth: d,
                    width: None,
                    flops: None,
                };
            }
            // Closed-form estimate, then settle on the exact integer answer.
            let (a, b) = match kind {
                BlockKind::Transformer => (12.0 * n as f64 * d as f64, 2.0 * (n * n) as f64 * d as f64),
                BlockKind::Mlp => (8.0 * n as f64 * d as f64, 0.0),
            };
            let root = (-b + (b * b + 4.0 * a * budget as f64).sqrt()) / (2.0 * a);
            let mut c = ((root / 8.0).floor() as u64) * 8;
            while c >= 8 && cost(c) > budget {
                c -= 8;
            }
            while cost(c + 8) <= budget {
                c += 8;
            }
            if c < 8 {
                BudgetPoint {
                    depth: d,
                    width: None,
                    flops: None,
                }
            } else {
                BudgetPoint {
                    depth: d,
                    width: Some(c as usize),
                    flops: Some(cost(c)),
                }
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deit_s_block_flops() {
        assert_eq!(transformer_flops(197, 384, 12), 4_540_695_552);
        assert_eq!(transformer_flops(197, 384, 0), 0);
        assert_eq!(transformer_flops(8, 16, 2), 53_248);
    }

    #[test]
    fn block_params_by_shape() {
        // norm (2C) + qkv (3C²+3C) + proj (C²+C) + norm (2C) + fc1 (4C²+4C) + fc2 (4C²+C)
        let c = 10;
        assert_eq!(block_params(BlockKind::Transformer, c), 2 * c + 3 * c * c + 3 * c + c * c + c + 2 * c + 4 * c * c + 4 * c + 4 * c * c + c);
        assert_eq!(block_params(BlockKind::Mlp, c), 2 * c + 4 * c * c + 4 * c + 4 * c * c + c);
    }

    #[test]
    fn schedules() {
        assert_eq!(width_schedule(384, 3).unwrap(), [192, 272, 384]);
        assert_eq!(width_schedule(768, 3).unwrap(), [384, 544, 768]);
        assert_eq!(width_schedule(100, 1).unwrap(), [100]);
        assert!(width_schedule(8, 2).unwrap_err().is_config());
        assert_eq!(allocate_depths(12, 3).unwrap(), [12, 6, 6]);
        assert_eq!(allocate_depths(12, 5).unwrap(), [12, 6, 6, 6, 6]);
        assert_eq!(allocate_depths(7, 1).unwrap(), [7]);
        assert_eq!(allocate_depths(7, 2).unwrap(), [6, 4]);
        assert!(allocate_depths(1, 3).is_err());
        assert_eq!(allocate_depths(2, 4).unwrap(), [2, 1, 1, 1]);
        assert!(allocate_depths(4, 0).is_err());
    }

    #[test]
    fn allocation_roughly_preserves_c_squared_cost() {
        // Each halving moves D/2 blocks of width C to D blocks of width C/√2.
        let widths = [192.0f64, 192.0 * 2f64.sqrt(), 384.0];
        let depths = allocate_depths(12, 3).unwrap();
        let split: f64 = widths.iter().zip(&depths).map(|(c, &d)| c * c * d as f64).sum();
        assert!((split - 12.0 * 384.0 * 384.0).abs() < 1e-6);
    }

    #[test]
    fn splitting_keeps_quadratic_term() {
        let (n, c, d) = (197.0, 384.0, 1.0);
        let narrow = c / 2f64.sqrt();
        let quad = |c: f64, d: f64| 12.0 * n * c * c * d;
        assert!((quad(c, d) - quad(narrow, 2.0 * d)).abs() < 1e-3);
        let per_block_attention = |c: f64| 2.0 * n * n * c;
        assert!(per_block_attention(narrow) < per_block_attention(c));
    }

    #[test]
    fn frontier_closed_form_and_monotone() {
        let n = 16u64;
        let budget = transformer_flops(n, 512, 4);
        let depths = [1, 2, 4, 8, 16, 32, 64];
        let pts = budget_frontier(budget, n, BlockKind::Transformer, &depths).unwrap();
        for p in &pts {
            let c = p.width.unwrap() as u64;
            assert!(transformer_flops(n, c, p.depth as u64) <= budget);
            assert!(transformer_flops(n, c + 8, p.depth as u64) > budget);
        }
        for w in pts.windows(2) {
            assert!(w[1].width <= w[0].width);
        }
        assert_eq!(pts[2].width, Some(512));
        for w in pts.windows(2) {
            let ratio = w[0].width.unwrap() as f64 / 2f64.sqrt();
            assert!((w[1].width.unwrap() as f64 - ratio).abs() <= 8.0, "{w:?}");
        }
        let tiny = budget_frontier(10, n, BlockKind::Transformer, &[1, 2]).unwrap();
        assert!(tiny.iter().all(|p| p.width.is_none()));
    }

    #[test]
    fn table_rendering_aligns() {
        let r = CostReport {
            name: Some("x".into()),
            tokens: 1,
            flops_total: 2,
            flops_breakdown: FlopsBreakdown::default(),
            params_total: 3,
            params_breakdown: ParamsBreakdown::default(),
            layers_total: 4,
            blocks_total: 5,
            extra_layers: 6,
        };
        let t = r.to_table();
        assert!(t.lines().all(|l| l.chars().nth(11) == Some(' ')));
    }
}
