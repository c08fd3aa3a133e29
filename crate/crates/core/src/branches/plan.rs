//! The stage graph of a semantic branch, shared by weight construction,
//! the forward pass and the cost model.

use super::config::{BranchConfig, Variant};
use crate::error::Result;

/// FPN levels in order P2..P5 and their strides.
pub const LEVELS: [(&str, usize); 4] = [("p2", 4), ("p3", 8), ("p4", 16), ("p5", 32)];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvOpKind {
    Standard,
    PyConv,
    VerConv,
    VerConvSep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    /// conv op -> group norm -> ReLU -> optional 2x upsample.
    ConvStage {
        op: ConvOpKind,
        in_ch: usize,
        out_ch: usize,
        upsample: bool,
    },
    /// Bias-free 1x1 channel reduction.
    Reduce { in_ch: usize, out_ch: usize },
    /// Lintention layer followed by 2x upsample.
    LintentionStage { channels: usize, groups: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelPlan {
    pub name: &'static str,
    pub stride: usize,
    pub blocks: Vec<Block>,
}

impl LevelPlan {
    /// Spatial extent at this level for an image of the given size.
    pub fn extent(&self, image_h: usize, image_w: usize) -> (usize, usize) {
        (image_h / self.stride, image_w / self.stride)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchPlan {
    pub levels: Vec<LevelPlan>,
    pub stage_channels: usize,
    pub num_classes: usize,
    /// Upsampling factor from the summed 1/4 map to the image.
    pub final_upsample: usize,
}

impl BranchPlan {
    pub fn from_config(cfg: &BranchConfig) -> Result<Self> {
        cfg.validate()?;
        let op = match cfg.variant {
            Variant::Baseline | Variant::Lintention => ConvOpKind::Standard,
            Variant::Pyconv => ConvOpKind::PyConv,
            Variant::Verconv => ConvOpKind::VerConv,
            Variant::Verconvsep => ConvOpKind::VerConvSep,
        };
        let (fpn, stage) = (cfg.fpn_channels, cfg.stage_channels);
        let levels = LEVELS
            .iter()
            .map(|&(name, stride)| {
                let ups = (stride / 4).trailing_zeros() as usize;
                let blocks = if cfg.variant == Variant::Lintention && name == "p5" {
                    std::iter::once(Block::Reduce { in_ch: fpn, out_ch: stage })
                        .chain((0..ups).map(|_| Block::LintentionStage {
                            channels: stage,
                            groups: cfg.groups,
                        }))
                        .collect()
                } else {
                    (0..ups.max(1))
                        .map(|i| Block::ConvStage {
                            op,
                            in_ch: if i == 0 { fpn } else { stage },
                            out_ch: stage,
                            upsample: ups > 0,
                        })
                        .collect()
                };
                LevelPlan { name, stride, blocks }
            })
            .collect();
        Ok(Self {
            levels,
            stage_channels: stage,
            num_classes: cfg.num_classes,
            final_upsample: 4,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_topology() {
        let plan = BranchPlan::from_config(&BranchConfig::new(Variant::Baseline, 64, 64)).unwrap();
        let counts: Vec<usize> = plan.levels.iter().map(|l| l.blocks.len()).collect();
        assert_eq!(counts, vec![1, 1, 2, 3]);
        assert!(matches!(plan.levels[0].blocks[0], Block::ConvStage { upsample: false, in_ch: 256, .. }));
        assert!(matches!(plan.levels[3].blocks[2], Block::ConvStage { upsample: true, in_ch: 128, .. }));
    }

    #[test]
    fn lintention_replaces_only_the_coarsest_path() {
        let plan = BranchPlan::from_config(&BranchConfig::new(Variant::Lintention, 64, 64)).unwrap();
        let p5 = &plan.levels[3].blocks;
        assert_eq!(p5[0], Block::Reduce { in_ch: 256, out_ch: 128 });
        assert_eq!(
            p5.iter().filter(|b| matches!(b, Block::LintentionStage { .. })).count(),
            3
        );
        assert!(plan.levels[..3]
            .iter()
            .flat_map(|l| &l.blocks)
            .all(|b| matches!(b, Block::ConvStage { op: ConvOpKind::Standard, .. })));
    }
}
