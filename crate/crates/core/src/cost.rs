//! Closed-form time (FLOPs), space (materialized scalars) and model
//! (parameter) complexity.
//!
//! FLOP accounting conventions vary between sources, so every constant is
//! explicit in [`CountingConvention`]. The defaults are chosen so that the
//! Lintention generators reproduce the standard closed forms exactly:
//!
//! * softmax costs one exponentiation plus one normalizing division per
//!   element; the max/sum reductions are free,
//! * scaling by `1/sqrt(C)` costs one FLOP per element,
//! * an einsum contraction costs two FLOPs per multiply-accumulate,
//! * convolutions cost one FLOP per multiply-accumulate by default
//!   ([`MacMode::Mac1`]); [`MacMode::Mac2`] doubles every MAC.
//!
//! Inside a segmentation branch all multiply-accumulate work (convs, dense
//! SE layers, bilinear taps and the Lintention contractions) is costed by
//! the conv mode, so the whole branch uses one unit.
//!
//! Space counts only materialized intermediates: transient softmax scratch
//! (raw logits, scaled scores) is never counted.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::branches::{Block, BranchConfig, BranchPlan, ConvOpKind, Variant};
use crate::error::{Error, Result};

/// FLOPs charged per multiply-accumulate by convolution-like operators.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MacMode {
    #[default]
    #[serde(rename = "mac=1")]
    Mac1,
    #[serde(rename = "mac=2")]
    Mac2,
}

impl MacMode {
    pub fn flops_per_mac(self) -> u64 {
        match self {
            MacMode::Mac1 => 1,
            MacMode::Mac2 => 2,
        }
    }
}

impl FromStr for MacMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "mac=1" | "mac1" => Ok(MacMode::Mac1),
            "2" | "mac=2" | "mac2" => Ok(MacMode::Mac2),
            _ => Err(Error::Usage(format!("unknown MAC mode `{s}` (expected 1 or 2)"))),
        }
    }
}

impl fmt::Display for MacMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mac={}", self.flops_per_mac())
    }
}

/// Per-element and per-MAC FLOP charges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CountingConvention {
    pub softmax_exp: u64,
    pub softmax_normalize: u64,
    pub scale: u64,
    /// Per multiply-accumulate in an einsum contraction.
    pub contraction: u64,
    pub conv_mode: MacMode,
    /// Group/layer norm: subtract, divide, scale, shift per element.
    pub norm: u64,
    /// ReLU per element.
    pub activation: u64,
    /// Elementwise sums, residuals and bias adds.
    pub add: u64,
    /// Logistic sigmoid per element (one exp, one division).
    pub sigmoid: u64,
    /// Bilinear taps per upsampled output element, each one MAC.
    pub upsample_taps: u64,
    /// Global average pooling per input element.
    pub pool: u64,
    /// Channelwise gate multiplication per element.
    pub gate: u64,
}

impl Default for CountingConvention {
    fn default() -> Self {
        Self {
            softmax_exp: 1,
            softmax_normalize: 1,
            scale: 1,
            contraction: 2,
            conv_mode: MacMode::Mac1,
            norm: 4,
            activation: 1,
            add: 1,
            sigmoid: 2,
            upsample_taps: 4,
            pool: 1,
            gate: 1,
        }
    }
}

impl CountingConvention {
    pub fn with_conv_mode(mut self, mode: MacMode) -> Self {
        self.conv_mode = mode;
        self
    }

    pub fn softmax(&self) -> u64 {
        self.softmax_exp + self.softmax_normalize
    }

    pub fn mac(&self) -> u64 {
        self.conv_mode.flops_per_mac()
    }

    /// The convention applied to Lintention inside a branch: contractions
    /// are costed like every other MAC in the branch.
    pub fn for_branch(&self) -> Self {
        Self {
            contraction: self.mac(),
            ..*self
        }
    }
}

impl fmt::Display for CountingConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "softmax exp={} norm={}, scale={}, contraction={}/MAC, conv {}",
            self.softmax_exp, self.softmax_normalize, self.scale, self.contraction, self.conv_mode
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCost {
    pub name: String,
    pub flops: u64,
    pub scalars: u64,
    pub params: u64,
}

impl StageCost {
    pub fn new(name: impl Into<String>, flops: u64, scalars: u64, params: u64) -> Self {
        Self {
            name: name.into(),
            flops,
            scalars,
            params,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTotals {
    pub flops: u64,
    pub params: u64,
    pub peak_scalars: u64,
}

/// A cost breakdown. Totals always equal the sum over `stages`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub variant: String,
    pub image: [usize; 2],
    pub convention: CountingConvention,
    pub totals: CostTotals,
    pub stages: Vec<StageCost>,
}

impl CostReport {
    pub fn new(variant: impl Into<String>, image: [usize; 2], convention: CountingConvention, stages: Vec<StageCost>) -> Self {
        let totals = stages.iter().fold(CostTotals::default(), |t, s| CostTotals {
            flops: t.flops + s.flops,
            params: t.params + s.params,
            peak_scalars: t.peak_scalars + s.scalars,
        });
        Self {
            variant: variant.into(),
            image,
            convention,
            totals,
            stages,
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageCost> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Sums stages whose name contains `pattern`.
    pub fn sum_matching(&self, pattern: &str) -> CostTotals {
        self.stages
            .iter()
            .filter(|s| s.name.contains(pattern))
            .fold(CostTotals::default(), |t, s| CostTotals {
                flops: t.flops + s.flops,
                params: t.params + s.params,
                peak_scalars: t.peak_scalars + s.scalars,
            })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// The five Lintention generators in execution order.
pub const GENERATORS: [&str; 5] = ["QG", "KG", "VG", "ASG", "RG"];

fn dims_u64(n: usize, h: usize, w: usize, c: usize, p: usize) -> Result<[u64; 5]> {
    if [n, h, w, c, p].contains(&0) {
        return Err(Error::Config(format!("all extents must be >= 1, got n={n} h={h} w={w} c={c} p={p}")));
    }
    Ok([n, h, w, c, p].map(|v| v as u64))
}

/// Per-generator costs of one Lintention mechanism under `conv`, named
/// `prefix` + generator.
pub fn lintention_stages(
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    p: usize,
    conv: &CountingConvention,
    prefix: &str,
) -> Result<Vec<StageCost>> {
    let [n, h, w, c, p] = dims_u64(n, h, w, c, p)?;
    let px = n * h * w;
    let t = conv.contraction;
    Ok(vec![
        StageCost::new(format!("{prefix}QG"), t * px * c * c, px * c, c * c),
        StageCost::new(
            format!("{prefix}KG"),
            t * 2 * px * c * p + conv.softmax() * px * p,
            px * p + n * p * c,
            c * p,
        ),
        StageCost::new(format!("{prefix}VG"), t * n * p * c * c, n * p * c, c * c),
        StageCost::new(
            format!("{prefix}ASG"),
            t * px * p * c + (conv.scale + conv.softmax()) * px * p,
            px * p,
            0,
        ),
        StageCost::new(format!("{prefix}RG"), t * px * p * c, px * c, 0),
    ])
}

/// Lintention mechanism cost under the default convention.
pub fn lintention_cost(n: usize, h: usize, w: usize, c: usize, p: usize) -> Result<CostReport> {
    lintention_cost_with(n, h, w, c, p, &CountingConvention::default())
}

pub fn lintention_cost_with(n: usize, h: usize, w: usize, c: usize, p: usize, conv: &CountingConvention) -> Result<CostReport> {
    Ok(CostReport::new(
        "lintention_mechanism",
        [h, w],
        *conv,
        lintention_stages(n, h, w, c, p, conv, "")?,
    ))
}

/// Literal closed forms per generator: `(flops, scalars, params)`.
pub fn closed_form(generator: &str, n: u64, h: u64, w: u64, c: u64, p: u64) -> Option<(u64, u64, u64)> {
    Some(match generator {
        "QG" => (2 * n * h * w * c * c, n * h * w * c, c * c),
        "KG" => (4 * n * h * w * c * p + 2 * n * h * w * p, n * h * w * p + n * p * c, c * p),
        "VG" => (2 * n * p * c * c, n * p * c, c * c),
        "ASG" => (2 * n * h * w * p * c + 3 * n * h * w * p, n * h * w * p, 0),
        "RG" => (2 * n * h * w * p * c, n * h * w * c, 0),
        _ => return None,
    })
}

/// Literal closed-form totals `(T, S, M)` of the whole mechanism.
pub fn closed_form_totals(n: u64, h: u64, w: u64, c: u64, p: u64) -> (u64, u64, u64) {
    let hw = h * w;
    (
        n * hw * (2 * c * c + 8 * p * c + 5 * p) + 2 * n * p * c * c,
        2 * n * hw * p + 2 * n * hw * c + 2 * n * p * c,
        2 * c * c + c * p,
    )
}

/// Standard scaled dot-product self-attention over all `h*w` pixels with
/// square `c x c` projections.
pub fn self_attention_cost_with(n: usize, h: usize, w: usize, c: usize, conv: &CountingConvention) -> Result<CostReport> {
    let [n, h, w, c, _] = dims_u64(n, h, w, c, 1)?;
    let px = n * h * w;
    let pairs = n * (h * w) * (h * w);
    let t = conv.contraction;
    let stages = vec![
        StageCost::new("projections", t * 3 * px * c * c, 3 * px * c, 3 * c * c),
        StageCost::new("scores", t * pairs * c + (conv.scale + conv.softmax()) * pairs, pairs, 0),
        StageCost::new("result", t * pairs * c, px * c, 0),
    ];
    Ok(CostReport::new("self_attention", [h as usize, w as usize], *conv, stages))
}

pub fn self_attention_cost(n: usize, h: usize, w: usize, c: usize) -> Result<CostReport> {
    self_attention_cost_with(n, h, w, c, &CountingConvention::default())
}

fn conv_flops(conv: &CountingConvention, px: u64, out_ch: u64, in_per_group: u64, k: u64) -> u64 {
    conv.mac() * px * out_ch * in_per_group * k * k
}

fn se_stage(name: String, conv: &CountingConvention, px: u64, c: u64, r: u64) -> StageCost {
    let hidden = c / r;
    let flops = conv.pool * px * c
        + conv.mac() * c * hidden
        + conv.add * hidden
        + conv.activation * hidden
        + conv.mac() * hidden * c
        + conv.add * c
        + conv.sigmoid * c
        + conv.gate * px * c;
    // pooled vector, hidden, gates, gated map
    StageCost::new(name, flops, c + hidden + c + px * c, c * hidden + hidden + hidden * c + c)
}

fn upsample_stage(name: String, conv: &CountingConvention, out_px: u64, c: u64) -> StageCost {
    StageCost::new(name, conv.upsample_taps * conv.mac() * out_px * c, out_px * c, 0)
}

/// Cost of a full segmentation branch, following the same stage graph as
/// [`crate::branches::build_branch`]. Batch size is one.
pub fn branch_cost(cfg: &BranchConfig, conv: &CountingConvention) -> Result<CostReport> {
    let plan = BranchPlan::from_config(cfg)?;
    let py = cfg.pyconv_config();
    let r = cfg.se_reduction as u64;
    let lin_conv = conv.for_branch();
    let mut stages = Vec::new();
    for level in &plan.levels {
        let (mut h, mut w) = level.extent(cfg.image_height, cfg.image_width);
        for (bi, block) in level.blocks.iter().enumerate() {
            let tag = format!("{}.{bi}", level.name);
            let px = (h * w) as u64;
            match *block {
                Block::ConvStage { op, in_ch, out_ch, upsample } => {
                    let (i, o) = (in_ch as u64, out_ch as u64);
                    match op {
                        ConvOpKind::Standard => {
                            stages.push(StageCost::new(format!("{tag}.conv"), conv_flops(conv, px, o, i, 3), px * o, o * i * 9));
                        }
                        ConvOpKind::PyConv | ConvOpKind::VerConv | ConvOpKind::VerConvSep => {
                            for (li, l) in py.levels.iter().enumerate() {
                                let (ch, ipg, k) = (l.channels as u64, i / l.groups as u64, l.kernel as u64);
                                stages.push(StageCost::new(
                                    format!("{tag}.pyconv{li}"),
                                    conv_flops(conv, px, ch, ipg, k),
                                    px * ch,
                                    ch * ipg * k * k,
                                ));
                                if op == ConvOpKind::VerConvSep {
                                    stages.push(se_stage(format!("{tag}.se{li}"), conv, px, ch, r));
                                }
                            }
                            if op == ConvOpKind::VerConv {
                                stages.push(se_stage(format!("{tag}.se"), conv, px, o, r));
                            }
                        }
                    }
                    stages.push(StageCost::new(format!("{tag}.norm"), conv.norm * px * o, px * o, 2 * o));
                    stages.push(StageCost::new(format!("{tag}.relu"), conv.activation * px * o, px * o, 0));
                    if upsample {
                        h *= 2;
                        w *= 2;
                        stages.push(upsample_stage(format!("{tag}.upsample"), conv, (h * w) as u64, o));
                    }
                }
                Block::Reduce { in_ch, out_ch } => {
                    let (i, o) = (in_ch as u64, out_ch as u64);
                    stages.push(StageCost::new(format!("{tag}.reduce"), conv_flops(conv, px, o, i, 1), px * o, o * i));
                }
                Block::LintentionStage { channels, groups } => {
                    let c = channels as u64;
                    stages.extend(lintention_stages(1, h, w, channels, groups, &lin_conv, &format!("{tag}."))?);
                    stages.push(StageCost::new(format!("{tag}.residual"), conv.add * px * c, px * c, 0));
                    stages.push(StageCost::new(format!("{tag}.layer_norm"), conv.norm * px * c, px * c, 2 * c));
                    h *= 2;
                    w *= 2;
                    stages.push(upsample_stage(format!("{tag}.upsample"), conv, (h * w) as u64, c));
                }
            }
        }
    }
    let (qh, qw) = (cfg.image_height / 4, cfg.image_width / 4);
    let qpx = (qh * qw) as u64;
    let s = plan.stage_channels as u64;
    let k = plan.num_classes as u64;
    let maps = plan.levels.len() as u64;
    stages.push(StageCost::new("sum", conv.add * (maps - 1) * qpx * s, qpx * s, 0));
    stages.push(StageCost::new(
        "classifier",
        conv_flops(conv, qpx, k, s, 1) + conv.add * qpx * k,
        qpx * k,
        k * s + k,
    ));
    stages.push(upsample_stage(
        "upsample".into(),
        conv,
        (cfg.image_height * cfg.image_width) as u64,
        k,
    ));
    Ok(CostReport::new(
        cfg.variant.name(),
        [cfg.image_height, cfg.image_width],
        *conv,
        stages,
    ))
}

/// One row of a variant comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: Variant,
    pub flops: u64,
    pub params: u64,
    pub peak_scalars: u64,
    /// Percentage change against the baseline row.
    pub flops_delta_pct: f64,
    pub params_delta_pct: f64,
    /// Set for variants whose operator configuration is a documented guess.
    pub approximate: bool,
}

/// Costs every variant on the same geometry and reports deltas against
/// the baseline. `template` supplies everything but the variant.
pub fn compare_variants(template: &BranchConfig, conv: &CountingConvention) -> Result<Vec<ComparisonRow>> {
    let reports = Variant::ALL
        .iter()
        .map(|&v| {
            let mut cfg = template.clone();
            cfg.variant = v;
            branch_cost(&cfg, conv).map(|r| (v, r))
        })
        .collect::<Result<Vec<_>>>()?;
    let base = reports[0].1.totals;
    let pct = |x: u64, b: u64| 100.0 * (x as f64 - b as f64) / b as f64;
    Ok(reports
        .into_iter()
        .map(|(variant, r)| ComparisonRow {
            variant,
            flops: r.totals.flops,
            params: r.totals.params,
            peak_scalars: r.totals.peak_scalars,
            flops_delta_pct: pct(r.totals.flops, base.flops),
            params_delta_pct: pct(r.totals.params, base.params),
            approximate: matches!(variant, Variant::Pyconv | Variant::Verconv | Variant::Verconvsep),
        })
        .collect())
}
