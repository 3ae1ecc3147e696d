//! Bundled architectures.
//!
//! Isotropic presets are complete [`NetworkSpec`]s for 224×224 images cut
//! into 16×16 patches (196 tokens of 768 features, plus a class token) and
//! 1000 classes. Hierarchical presets describe four-stage models only as
//! far as block and layer counting goes.

use serde::Serialize;

use crate::blocks::BlockKind;
use crate::costing::{model_cost, CostReport};
use crate::error::{Error, Result};
use crate::network::{InputSpec, NetworkSpec, Readout};
use crate::steps::StepsConfig;

/// Layers outside the blocks of a patch-embedding + classifier model.
pub const ISOTROPIC_EXTRA_LAYERS: usize = 2;
/// Layers outside the blocks of a four-stage model.
pub const HIERARCHICAL_EXTRA_LAYERS: usize = 5;

/// One run of identical blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Segment {
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
}

const fn seg(width: usize, heads: usize, depth: usize) -> Segment {
    Segment { width, heads, depth }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct HierarchicalPreset {
    pub name: &'static str,
    /// Each stage lists its steps narrow to wide.
    pub stages: Vec<Vec<Segment>>,
    pub extra_layers: usize,
}

impl HierarchicalPreset {
    pub fn blocks(&self) -> usize {
        self.stages.iter().flatten().map(|s| s.depth).sum()
    }

    pub fn layers(&self) -> usize {
        BlockKind::Transformer.layers_per_block() * self.blocks() + self.extra_layers
    }

    /// Widest width of each stage.
    pub fn stage_widths(&self) -> Vec<usize> {
        self.stages
            .iter()
            .map(|s| s.iter().map(|g| g.width).max().unwrap_or(0))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Preset {
    Isotropic(NetworkSpec),
    Hierarchical(HierarchicalPreset),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(untagged)]
pub enum PresetReport {
    Cost(CostReport),
    Layers {
        name: String,
        blocks_total: usize,
        layers_total: usize,
        extra_layers: usize,
        stage_widths: Vec<usize>,
    },
}

impl Preset {
    pub fn report(&self, name: &str) -> Result<PresetReport> {
        match self {
            Preset::Isotropic(spec) => Ok(PresetReport::Cost(model_cost(spec)?.with_name(name))),
            Preset::Hierarchical(h) => Ok(PresetReport::Layers {
                name: name.to_string(),
                blocks_total: h.blocks(),
                layers_total: h.layers(),
                extra_layers: h.extra_layers,
                stage_widths: h.stage_widths(),
            }),
        }
    }
}

pub const PRESET_NAMES: &[&str] = &[
    "deit-t",
    "deit-s",
    "deit-b",
    "steps-deit-t",
    "steps-deit-s",
    "steps-deit-b-302",
    "swin-t",
    "swin-s",
    "swin-b",
    "steps-swin-t",
    "steps-swin-s",
    "steps-swin-b",
    "toy-mlp-residual",
    "toy-mlp-steps3",
    "toy-lm-residual",
    "toy-lm-steps2",
];

fn image_spec(segments: &[Segment]) -> NetworkSpec {
    let widths: Vec<usize> = segments.iter().map(|s| s.width).collect();
    let depths: Vec<usize> = segments.iter().map(|s| s.depth).collect();
    let heads: Vec<usize> = segments.iter().map(|s| s.heads).collect();
    NetworkSpec {
        body: StepsConfig::from_step_widths(BlockKind::Transformer, &widths, &depths, &heads)
            .expect("bundled preset is valid"),
        input: InputSpec::Features { dim: 16 * 16 * 3 },
        tokens: 196,
        cls_token: true,
        pos_embed: true,
        causal: false,
        classes: 1000,
        readout: Readout::Cls,
        extra_layers: Some(ISOTROPIC_EXTRA_LAYERS),
    }
}

fn hierarchical(name: &'static str, stages: Vec<Vec<Segment>>) -> HierarchicalPreset {
    HierarchicalPreset {
        name,
        stages,
        extra_layers: HIERARCHICAL_EXTRA_LAYERS,
    }
}

/// Two-class, two-feature toy for MLP blocks.
pub fn toy_mlp(widths: &[usize], depths: &[usize]) -> Result<NetworkSpec> {
    let spec = NetworkSpec {
        body: StepsConfig::from_step_widths(BlockKind::Mlp, widths, depths, &[])?,
        input: InputSpec::Features { dim: 2 },
        tokens: 1,
        cls_token: false,
        pos_embed: false,
        causal: false,
        classes: 2,
        readout: Readout::PerToken,
        extra_layers: None,
    };
    spec.validate()?;
    Ok(spec)
}

/// Decoder-only character model.
pub fn toy_lm(widths: &[usize], depths: &[usize], heads: &[usize], vocab: usize, seq_len: usize) -> Result<NetworkSpec> {
    let spec = NetworkSpec {
        body: StepsConfig::from_step_widths(BlockKind::Transformer, widths, depths, heads)?,
        input: InputSpec::Tokens { vocab },
        tokens: seq_len,
        cls_token: false,
        pos_embed: true,
        causal: true,
        classes: vocab,
        readout: Readout::PerToken,
        extra_layers: None,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn preset(name: &str) -> Result<Preset> {
    let p = match name {
        "deit-t" => Preset::Isotropic(image_spec(&[seg(192, 3, 12)])),
        "deit-s" => Preset::Isotropic(image_spec(&[seg(384, 6, 12)])),
        "deit-b" => Preset::Isotropic(image_spec(&[seg(768, 12, 12)])),
        "steps-deit-t" => Preset::Isotropic(image_spec(&[seg(96, 2, 12), seg(136, 2, 6), seg(192, 3, 6)])),
        "steps-deit-s" => Preset::Isotropic(image_spec(&[seg(192, 3, 12), seg(272, 4, 6), seg(384, 6, 6)])),
        "steps-deit-b-302" => Preset::Isotropic(image_spec(&[
            seg(96, 2, 12),
            seg(136, 2, 12),
            seg(192, 3, 12),
            seg(272, 4, 12),
            seg(384, 6, 12),
        ])),
        "swin-t" => Preset::Hierarchical(hierarchical(
            "swin-t",
            vec![vec![seg(96, 3, 2)], vec![seg(192, 6, 2)], vec![seg(384, 12, 6)], vec![seg(768, 24, 2)]],
        )),
        "swin-s" => Preset::Hierarchical(hierarchical(
            "swin-s",
            vec![vec![seg(96, 3, 2)], vec![seg(192, 6, 2)], vec![seg(384, 12, 18)], vec![seg(768, 24, 2)]],
        )),
        "swin-b" => Preset::Hierarchical(hierarchical(
            "swin-b",
            vec![vec![seg(128, 4, 2)], vec![seg(256, 8, 2)], vec![seg(512, 16, 18)], vec![seg(1024, 32, 2)]],
        )),
        "steps-swin-t" => Preset::Hierarchical(hierarchical(
            "steps-swin-t",
            vec![
                vec![seg(96, 3, 2)],
                vec![seg(192, 6, 2)],
                vec![seg(192, 6, 6), seg(272, 8, 3), seg(384, 12, 3)],
                vec![seg(192, 6, 4), seg(272, 8, 2), seg(384, 12, 2), seg(544, 16, 2), seg(768, 24, 0)],
            ],
        )),
        "steps-swin-s" => Preset::Hierarchical(hierarchical(
            "steps-swin-s",
            vec![
                vec![seg(96, 3, 2)],
                vec![seg(192, 6, 2)],
                vec![seg(192, 6, 6), seg(272, 8, 3), seg(384, 12, 15)],
                vec![seg(192, 6, 4), seg(272, 8, 2), seg(384, 12, 2), seg(544, 16, 2), seg(768, 24, 0)],
            ],
        )),
        "steps-swin-b" => Preset::Hierarchical(hierarchical(
            "steps-swin-b",
            vec![
                vec![seg(128, 4, 2)],
                vec![seg(256, 8, 2)],
                vec![seg(256, 8, 6), seg(360, 12, 3), seg(512, 16, 15)],
                vec![seg(256, 8, 4), seg(360, 12, 2), seg(512, 16, 2), seg(720, 24, 2), seg(1024, 32, 0)],
            ],
        )),
        "toy-mlp-residual" => Preset::Isotropic(toy_mlp(&[32], &[4])?),
        "toy-mlp-steps3" => Preset::Isotropic(toy_mlp(&[16, 24, 32], &[4, 2, 2])?),
        "toy-lm-residual" => Preset::Isotropic(toy_lm(&[64], &[4], &[4], 128, 64)?),
        "toy-lm-steps2" => Preset::Isotropic(toy_lm(&[48, 64], &[4, 2], &[4, 4], 128, 64)?),
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; known presets: {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(p)
}

/// The network spec of an isotropic preset.
pub fn network_preset(name: &str) -> Result<NetworkSpec> {
    match preset(name)? {
        Preset::Isotropic(spec) => Ok(spec),
        Preset::Hierarchical(_) => Err(Error::Config(format!(
            "preset {name:?} is hierarchical and only supports layer accounting"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_name_resolves() {
        for name in PRESET_NAMES {
            let p = preset(name).unwrap();
            p.report(name).unwrap();
        }
        assert!(preset("deit-xl").unwrap_err().is_config());
    }

    #[test]
    fn hierarchical_layer_counts() {
        let layers = |n: &str| match preset(n).unwrap() {
            Preset::Hierarchical(h) => h.layers(),
            _ => unreachable!(),
        };
        assert_eq!(layers("swin-t"), 65);
        assert_eq!(layers("swin-s"), 125);
        assert_eq!(layers("swin-b"), 125);
        assert_eq!(layers("steps-swin-t"), 135);
        assert_eq!(layers("steps-swin-s"), 195);
        assert_eq!(layers("steps-swin-b"), 195);
    }

    #[test]
    fn deit_s_cost() {
        let r = model_cost(&network_preset("deit-s").unwrap()).unwrap();
        assert_eq!(r.layers_total, 62);
        assert_eq!(r.params_total, 22_050_664);
        assert_eq!(r.flops_breakdown.stem, 57_802_752);
        assert_eq!(r.flops_breakdown.head, 384_000);
        assert_eq!(r.flops_total, 4_540_695_552 + 57_802_752 + 384_000);
    }

    #[test]
    fn steps_presets_use_half_and_root_half_widths() {
        let s = network_preset("steps-deit-s").unwrap();
        assert_eq!(s.body.step_widths(), crate::costing::width_schedule(384, 3).unwrap());
        assert_eq!(s.body.depths, crate::costing::allocate_depths(12, 3).unwrap());
        assert_eq!(model_cost(&s).unwrap().layers_total, 122);
        let b = network_preset("steps-deit-b-302").unwrap();
        assert_eq!(model_cost(&b).unwrap().layers_total, 302);
    }
}
