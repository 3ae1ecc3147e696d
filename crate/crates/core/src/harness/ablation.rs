//! Masking, block-dropping, step-count and allocation sweeps.
//!
//! Masking and dropping act on a trained checkpoint without retraining.
//! The step-count and allocation sweeps retrain one model per row.

use std::fmt::Write as _;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::data::{make_task, Dataset};
use super::train::{evaluate_network, load_network, train_network, TrainConfig};
use crate::costing::{allocate_depths, head_count, model_cost, width_schedule};
use crate::error::{Error, Result};
use crate::network::{ForwardOptions, Network, NetworkSpec};
use crate::scalar::{ElementWidth, Scalar};
use crate::steps::{drop_step_blocks, Path, StepsConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    MaskTable6,
    DropTable7,
    StepsTable4,
    AllocTable5,
}

impl SweepKind {
    pub const ALL: [SweepKind; 4] = [
        SweepKind::MaskTable6,
        SweepKind::DropTable7,
        SweepKind::StepsTable4,
        SweepKind::AllocTable5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepKind::MaskTable6 => "mask_table6",
            SweepKind::DropTable7 => "drop_table7",
            SweepKind::StepsTable4 => "steps_table4",
            SweepKind::AllocTable5 => "alloc_table5",
        }
    }

    pub fn needs_checkpoint(self) -> bool {
        matches!(self, SweepKind::MaskTable6 | SweepKind::DropTable7)
    }

    fn header(self) -> &'static str {
        match self {
            SweepKind::MaskTable6 => "path,masked_channels,metric",
            SweepKind::DropTable7 => "step,dropped,depths,flops,metric",
            SweepKind::StepsTable4 => "steps,widths,depths,blocks,layers,params,flops,final_loss,metric",
            SweepKind::AllocTable5 => "depths,blocks,layers,params,flops,final_loss,metric",
        }
    }
}

impl std::str::FromStr for SweepKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let known: Vec<_> = SweepKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown sweep {s:?}; expected one of {}", known.join(", ")))
            })
    }
}

impl std::fmt::Display for SweepKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<Path>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masked_channels: Option<usize>,
    /// 0-based step whose tail was dropped; `None` for the intact model.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropped: Option<usize>,
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    pub blocks: u64,
    pub layers: u64,
    pub params: u64,
    pub flops: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    pub metric: f64,
}

impl AblationRow {
    fn from_spec(spec: &NetworkSpec, metric: f64) -> Result<Self> {
        let cost = model_cost(spec)?;
        Ok(Self {
            path: None,
            masked_channels: None,
            step: None,
            dropped: None,
            widths: spec.body.step_widths(),
            depths: spec.body.depths.clone(),
            blocks: cost.blocks_total,
            layers: cost.layers_total,
            params: cost.params_total,
            flops: cost.flops_total,
            final_loss: None,
            metric,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub kind: SweepKind,
    pub metric: String,
    pub rows: Vec<AblationRow>,
}

fn list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join("/")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl AblationReport {
    /// One header line, then one line per row. Lists are `/`-separated.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", self.kind.header());
        for r in &self.rows {
            let line = match self.kind {
                SweepKind::MaskTable6 => format!("{},{},{}", opt(r.path), opt(r.masked_channels), r.metric),
                SweepKind::DropTable7 => format!(
                    "{},{},{},{},{}",
                    opt(r.step),
                    opt(r.dropped),
                    list(&r.depths),
                    r.flops,
                    r.metric
                ),
                SweepKind::StepsTable4 => format!(
                    "{},{},{},{},{},{},{},{},{}",
                    r.widths.len(),
                    list(&r.widths),
                    list(&r.depths),
                    r.blocks,
                    r.layers,
                    r.params,
                    r.flops,
                    opt(r.final_loss),
                    r.metric
                ),
                SweepKind::AllocTable5 => format!(
                    "{},{},{},{},{},{},{}",
                    list(&r.depths),
                    r.blocks,
                    r.layers,
                    r.params,
                    r.flops,
                    opt(r.final_loss),
                    r.metric
                ),
            };
            writeln!(out, "{line}").expect("writing to a String");
        }
        out
    }

    /// The row masking `k` channels of `path`.
    pub fn mask_row(&self, path: Path, k: usize) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.path == Some(path) && r.masked_channels == Some(k))
    }
}

/// Mask counts `j·d_1/6` for `j = 0..=6`, so the last entry is the whole
/// slow path.
pub fn mask_grid(d1: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = (0..=6).map(|j| j * d1 / 6).collect();
    ks.dedup();
    ks
}

/// `(step, count)` pairs dropping `2^(n-1-i)` blocks from step `i`, so every
/// pair removes roughly the compute of one block of the widest step. Counts
/// are capped at the step depth.
pub fn drop_grid(depths: &[usize]) -> Vec<(usize, usize)> {
    let n = depths.len();
    depths
        .iter()
        .enumerate()
        .map(|(i, &d)| (i, (1usize << (n - 1 - i).min(63)).min(d)))
        .collect()
}

/// Allocations `(2a, a, D - a)` for `a` spread like 0, 1, 3, 6, 9, 11 of 12.
pub fn alloc_grid(base_depth: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = [0usize, 1, 3, 6, 9, 11]
        .iter()
        .map(|&j| {
            let a = (j * base_depth + 6) / 12;
            vec![2 * a, a, base_depth - a.min(base_depth)]
        })
        .collect();
    out.dedup();
    out
}

pub fn mask_sweep<T: Scalar>(net: &Network<T>, data: &Dataset) -> Result<AblationReport> {
    let d1 = net.spec.body.slice_widths[0];
    let mut rows = Vec::new();
    for path in [Path::Slow, Path::Fast] {
        for k in mask_grid(d1) {
            let opts = ForwardOptions { mask: Some((path, k)) };
            let metric = evaluate_network(net, data.task, &data.eval, &opts)?;
            let mut row = AblationRow::from_spec(&net.spec, metric)?;
            row.path = Some(path);
            row.masked_channels = Some(k);
            rows.push(row);
        }
    }
    Ok(AblationReport {
        kind: SweepKind::MaskTable6,
        metric: data.task.metric().into(),
        rows,
    })
}

pub fn drop_sweep<T: Scalar>(net: &Network<T>, data: &Dataset) -> Result<AblationReport> {
    let opts = ForwardOptions::default();
    let mut rows = vec![AblationRow::from_spec(
        &net.spec,
        evaluate_network(net, data.task, &data.eval, &opts)?,
    )?];
    for (step, count) in drop_grid(&net.spec.body.depths) {
        let cut = net.with_body(drop_step_blocks(&net.body, step, count)?)?;
        let metric = evaluate_network(&cut, data.task, &data.eval, &opts)?;
        let mut row = AblationRow::from_spec(&cut.spec, metric)?;
        row.step = Some(step);
        row.dropped = Some(count);
        rows.push(row);
    }
    Ok(AblationReport {
        kind: SweepKind::DropTable7,
        metric: data.task.metric().into(),
        rows,
    })
}

/// Largest head count dividing `width` with head size at least that of the
/// base model's widest step.
fn heads_for(body: &StepsConfig, width: usize) -> usize {
    let n = body.steps();
    head_count(width, (body.width / body.heads_at(n - 1).max(1)).max(1))
}

fn body_with(base: &StepsConfig, widths: &[usize], depths: &[usize]) -> Result<StepsConfig> {
    let heads: Vec<usize> = match base.kind {
        crate::blocks::BlockKind::Transformer => widths.iter().map(|&w| heads_for(base, w)).collect(),
        crate::blocks::BlockKind::Mlp => Vec::new(),
    };
    StepsConfig::from_step_widths(base.kind, widths, depths, &heads)
}

fn retrain_row<T: Scalar>(base: &TrainConfig, data: &Dataset, body: StepsConfig) -> Result<AblationRow> {
    let mut cfg = base.clone();
    cfg.model.body = body;
    cfg.output_dir = None;
    let (_, record) = train_network::<T>(&cfg, data)?;
    let metric = record
        .last_eval()
        .ok_or_else(|| Error::Precondition("run produced no evaluation".into()))?;
    let mut row = AblationRow::from_spec(&cfg.model, metric)?;
    row.final_loss = record.final_loss();
    Ok(row)
}

/// Retrains `base` with 1 to 5 steps; step `n` uses the width schedule of the
/// base width and depths allocated from the base model's first-step depth.
pub fn steps_sweep<T: Scalar>(base: &TrainConfig, data: &Dataset) -> Result<AblationReport> {
    let body = &base.model.body;
    let mut rows = Vec::new();
    for n in 1..=5 {
        let widths = width_schedule(body.width, n)?;
        let depths = allocate_depths(body.depths[0], n)?;
        rows.push(retrain_row::<T>(base, data, body_with(body, &widths, &depths)?)?);
    }
    Ok(AblationReport {
        kind: SweepKind::StepsTable4,
        metric: data.task.metric().into(),
        rows,
    })
}

/// Retrains `base` as a 3-step model under each allocation of
/// [`alloc_grid`].
pub fn alloc_sweep<T: Scalar>(base: &TrainConfig, data: &Dataset) -> Result<AblationReport> {
    let body = &base.model.body;
    let widths = width_schedule(body.width, 3)?;
    let mut rows = Vec::new();
    for depths in alloc_grid(body.depths[0]) {
        rows.push(retrain_row::<T>(base, data, body_with(body, &widths, &depths)?)?);
    }
    Ok(AblationReport {
        kind: SweepKind::AllocTable5,
        metric: data.task.metric().into(),
        rows,
    })
}

fn checkpoint_sweep<T: Scalar>(kind: SweepKind, base: &TrainConfig, path: &FsPath, data: &Dataset) -> Result<AblationReport> {
    let net = load_network::<T>(base, path)?;
    match kind {
        SweepKind::MaskTable6 => mask_sweep(&net, data),
        _ => drop_sweep(&net, data),
    }
}

/// Runs one sweep. Masking and dropping need the checkpoint trained from
/// `base`; the other two ignore it.
pub fn ablation_sweep(kind: SweepKind, base: &TrainConfig, checkpoint_path: Option<&FsPath>) -> Result<AblationReport> {
    base.validate()?;
    let data = make_task(base.task, base.seed)?;
    data.check_spec(&base.model)?;
    if kind.needs_checkpoint() {
        let path = checkpoint_path
            .ok_or_else(|| Error::Precondition(format!("{kind} evaluates a trained checkpoint; none was given")))?;
        if !path.is_file() {
            return Err(Error::Precondition(format!("checkpoint {} does not exist", path.display())));
        }
        return match checkpoint::read(path)?.width {
            ElementWidth::F32 => checkpoint_sweep::<f32>(kind, base, path, &data),
            ElementWidth::F64 => checkpoint_sweep::<f64>(kind, base, path, &data),
        };
    }
    match (kind, base.element_width) {
        (SweepKind::StepsTable4, ElementWidth::F32) => steps_sweep::<f32>(base, &data),
        (SweepKind::StepsTable4, ElementWidth::F64) => steps_sweep::<f64>(base, &data),
        (_, ElementWidth::F32) => alloc_sweep::<f32>(base, &data),
        (_, ElementWidth::F64) => alloc_sweep::<f64>(base, &data),
    }
}
