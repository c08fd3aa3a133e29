use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which operator family the semantic branch uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Pyconv,
    Verconv,
    Verconvsep,
    Lintention,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::Pyconv,
        Variant::Verconv,
        Variant::Verconvsep,
        Variant::Lintention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Pyconv => "pyconv",
            Variant::Verconv => "verconv",
            Variant::Verconvsep => "verconvsep",
            Variant::Lintention => "lintention",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown variant `{s}`")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One level of a convolution pyramid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyConvLevel {
    pub kernel: usize,
    pub groups: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyConvConfig {
    pub levels: Vec<PyConvLevel>,
}

impl PyConvConfig {
    /// Kernels 3/5/7/9 with groups 1/4/8/16 and equal output shares.
    pub fn default_for(out_channels: usize) -> Self {
        let share = out_channels / 4;
        Self {
            levels: [(3, 1), (5, 4), (7, 8), (9, 16)]
                .into_iter()
                .map(|(kernel, groups)| PyConvLevel {
                    kernel,
                    groups,
                    channels: share,
                })
                .collect(),
        }
    }

    /// A degenerate one-level pyramid: a plain 3x3 convolution.
    pub fn single(out_channels: usize) -> Self {
        Self {
            levels: vec![PyConvLevel {
                kernel: 3,
                groups: 1,
                channels: out_channels,
            }],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.levels.iter().map(|l| l.channels).sum()
    }

    pub fn shares(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.channels).collect()
    }

    /// Checks the pyramid against the input and output channel counts.
    pub fn validate(&self, in_channels: usize, out_channels: usize) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("pyramid needs at least one level".into()));
        }
        if self.out_channels() != out_channels {
            return Err(Error::Config(format!(
                "pyramid shares sum to {}, expected {out_channels}",
                self.out_channels()
            )));
        }
        for l in &self.levels {
            if l.groups == 0 || l.channels == 0 {
                return Err(Error::Config("pyramid level with zero groups or channels".into()));
            }
            if l.channels % l.groups != 0 || in_channels % l.groups != 0 {
                return Err(Error::Config(format!(
                    "pyramid level k={} groups={} does not divide {} inputs / {} outputs",
                    l.kernel, l.groups, in_channels, l.channels
                )));
            }
            if l.kernel % 2 == 0 {
                return Err(Error::Config(format!("pyramid kernel {} is even", l.kernel)));
            }
        }
        Ok(())
    }
}

fn default_classes() -> usize {
    54
}
fn default_stage_channels() -> usize {
    128
}
fn default_fpn_channels() -> usize {
    256
}
fn default_se_reduction() -> usize {
    16
}
fn default_groups() -> usize {
    crate::lintention::DEFAULT_GROUPS
}
fn default_norm_groups() -> usize {
    32
}

/// Everything needed to build one semantic branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub variant: Variant,
    pub image_height: usize,
    pub image_width: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_stage_channels")]
    pub stage_channels: usize,
    #[serde(default = "default_fpn_channels")]
    pub fpn_channels: usize,
    /// Defaults to [`PyConvConfig::default_for`] the stage width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pyconv: Option<PyConvConfig>,
    #[serde(default = "default_se_reduction")]
    pub se_reduction: usize,
    /// Semantic groups `P` of each Lintention layer.
    #[serde(default = "default_groups")]
    pub groups: usize,
    #[serde(default = "default_norm_groups")]
    pub norm_groups: usize,
    #[serde(default)]
    pub seed: u64,
}

impl BranchConfig {
    pub fn new(variant: Variant, image_height: usize, image_width: usize) -> Self {
        Self {
            variant,
            image_height,
            image_width,
            num_classes: default_classes(),
            stage_channels: default_stage_channels(),
            fpn_channels: default_fpn_channels(),
            pyconv: None,
            se_reduction: default_se_reduction(),
            groups: default_groups(),
            norm_groups: default_norm_groups(),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn pyconv_config(&self) -> PyConvConfig {
        self.pyconv
            .clone()
            .unwrap_or_else(|| PyConvConfig::default_for(self.stage_channels))
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.image_height, self.image_width);
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!("image {h}x{w} must be a positive multiple of 32 on both sides")));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if self.stage_channels == 0 || self.fpn_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.norm_groups == 0 || self.stage_channels % self.norm_groups != 0 {
            return Err(Error::Config(format!(
                "{} stage channels not divisible into {} norm groups",
                self.stage_channels, self.norm_groups
            )));
        }
        match self.variant {
            Variant::Baseline => {}
            Variant::Lintention => {
                if self.groups == 0 {
                    return Err(Error::Config("Lintention needs at least one semantic group".into()));
                }
            }
            Variant::Pyconv | Variant::Verconv | Variant::Verconvsep => {
                let py = self.pyconv_config();
                py.validate(self.fpn_channels, self.stage_channels)?;
                py.validate(self.stage_channels, self.stage_channels)?;
                let r = self.se_reduction;
                let gated: Vec<usize> = match self.variant {
                    Variant::Verconv => vec![self.stage_channels],
                    Variant::Verconvsep => py.shares(),
                    _ => vec![],
                };
                if gated.iter().any(|&c| r == 0 || c % r != 0) {
                    return Err(Error::Config(format!(
                        "SE reduction {r} does not divide gated channel counts {gated:?}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_defaults_fill_in() {
        let cfg: BranchConfig =
            serde_json::from_str(r#"{"variant":"lintention","image_height":64,"image_width":96}"#).unwrap();
        assert_eq!(cfg, BranchConfig::new(Variant::Lintention, 64, 96));
        assert_eq!(cfg.pyconv_config().shares(), vec![32; 4]);
    }

    #[test]
    fn validation_failures() {
        assert!(BranchConfig::new(Variant::Baseline, 100, 100).validate().is_err());
        let mut cfg = BranchConfig::new(Variant::Verconvsep, 64, 64);
        cfg.validate().unwrap();
        cfg.se_reduction = 64;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = BranchConfig::new(Variant::Pyconv, 64, 64);
        cfg.pyconv = Some(PyConvConfig {
            levels: vec![PyConvLevel { kernel: 3, groups: 3, channels: 128 }],
        });
        assert!(cfg.validate().is_err());
    }
}
