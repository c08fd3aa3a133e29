//! Semantic segmentation branches over FPN features.
//!
//! Five variants share one topology: every FPN level is brought to 1/4
//! scale by conv stages (conv op, group norm, ReLU, 2x upsample), the four
//! 1/4 maps are summed, classified by a biased 1x1 conv and upsampled 4x.
//! The variants differ in the conv op (plain 3x3, PyConv, PyConv with
//! collective or per-level SE gating) or, for `lintention`, replace the
//! 1/32 path by a 1x1 reduction and three Lintention layer + upsample
//! stages.

mod config;
mod ops;
mod plan;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use config::{BranchConfig, PyConvConfig, PyConvLevel, Variant};
pub use ops::{init_pyconv, pyconv_forward, se_gate, verconv_forward, GateMode, SeWeights};
pub use plan::{Block, BranchPlan, ConvOpKind, LevelPlan, LEVELS};

use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::lintention::{init_params_from, lintention_layer_forward, LintentionLayerParams, DEFAULT_EPS};
use crate::ops::{
    bilinear_upsample, bilinear_upsample2x, conv2d, expect_nchw, group_norm, nchw_to_nhwc, nhwc_to_nchw, relu,
    ConvKernel,
};
use crate::rng::SplitMix64Stream;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// Multi-scale features at strides 4, 8, 16 and 32, each `(n, c, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FpnFeatures {
    pub p2: Tensor,
    pub p3: Tensor,
    pub p4: Tensor,
    pub p5: Tensor,
}

impl FpnFeatures {
    pub fn new(p2: Tensor, p3: Tensor, p4: Tensor, p5: Tensor) -> Result<Self> {
        let f = Self { p2, p3, p4, p5 };
        f.validate()?;
        Ok(f)
    }

    pub fn levels(&self) -> [&Tensor; 4] {
        [&self.p2, &self.p3, &self.p4, &self.p5]
    }

    fn validate(&self) -> Result<()> {
        let (n, c, h, w) = expect_nchw(&self.p2)?;
        for (i, t) in self.levels().iter().enumerate().skip(1) {
            let (tn, tc, th, tw) = expect_nchw(t)?;
            let (eh, ew) = (h >> i, w >> i);
            if tn != n || tc != c {
                return Err(Error::dim("c", format!("level p{} has n={tn}, c={tc}; expected {n}, {c}", i + 2)));
            }
            if th != eh || tw != ew || eh << i != h || ew << i != w {
                return Err(Error::dim(
                    "h",
                    format!("level p{} is {th}x{tw}, expected {eh}x{ew} (halving from p2)", i + 2),
                ));
            }
        }
        Ok(())
    }

    /// Image size implied by the feature geometry.
    pub fn image_size(&self) -> (usize, usize) {
        let e = self.p2.extents();
        (e[2] * 4, e[3] * 4)
    }

    /// Uniform random features in `[-1, 1)` for an `image_h x image_w` image.
    pub fn synthetic(seed: u64, batch: usize, channels: usize, image_h: usize, image_w: usize) -> Result<Self> {
        if image_h % 32 != 0 || image_w % 32 != 0 || image_h == 0 || image_w == 0 {
            return Err(Error::Config(format!("image {image_h}x{image_w} is not a multiple of 32")));
        }
        let mut rng = SplitMix64Stream::new(seed);
        let mut level = |s: usize| {
            rng.tensor(&[("n", batch), ("c", channels), ("h", image_h / s), ("w", image_w / s)], 1.0)
        };
        Self::new(level(4)?, level(8)?, level(16)?, level(32)?)
    }

    /// Stand-in backbone: average-pools a `(c, h, w)` image to each stride
    /// and lifts it to `channels` with a seeded random 1x1 projection.
    pub fn from_image(image: &Tensor, seed: u64, channels: usize) -> Result<Self> {
        let img = if image.rank() == 3 {
            let e = image.extents();
            image.clone().reshape(&[("n", 1), ("c", e[0]), ("h", e[1]), ("w", e[2])])?
        } else {
            image.clone().with_names(&["n", "c", "h", "w"])?
        };
        let (n, c, h, w) = expect_nchw(&img)?;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!("image {h}x{w} is not a multiple of 32")));
        }
        let mut rng = SplitMix64Stream::new(seed);
        let proj = ConvKernel::new(
            rng.tensor(&[("o", channels), ("i", c), ("kh", 1), ("kw", 1)], 1.0 / (c as f64).sqrt())?,
            1,
            None,
        )?;
        let level = |s: usize| -> Result<Tensor> {
            let (lh, lw) = (h / s, w / s);
            let src = img.data();
            let mut pooled = vec![0.0; n * c * lh * lw];
            for (i, v) in pooled.iter_mut().enumerate() {
                let (x, rest) = (i % lw, i / lw);
                let (y, plane) = (rest % lh, rest / lh);
                let mut acc = 0.0;
                for dy in 0..s {
                    for dx in 0..s {
                        acc += src[(plane * h + y * s + dy) * w + x * s + dx];
                    }
                }
                *v = acc / (s * s) as f64;
            }
            conv2d(&Tensor::new(&[("n", n), ("c", c), ("h", lh), ("w", lw)], pooled)?, &proj)
        };
        Self::new(level(4)?, level(8)?, level(16)?, level(32)?)
    }
}

/// Weights of one convolution operator (plain, pyramid, or gated pyramid).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvOpWeights {
    pub kind: ConvOpKind,
    pub kernels: Vec<ConvKernel>,
    pub gates: Vec<SeWeights>,
}

impl ConvOpWeights {
    pub fn param_count(&self) -> usize {
        self.kernels.iter().map(ConvKernel::param_count).sum::<usize>()
            + self.gates.iter().map(SeWeights::param_count).sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlockWeights {
    ConvStage {
        op: ConvOpWeights,
        gamma: Vec<f64>,
        beta: Vec<f64>,
        upsample: bool,
    },
    Reduce {
        kernel: ConvKernel,
    },
    LintentionStage {
        layer: LintentionLayerParams,
    },
}

impl BlockWeights {
    pub fn param_count(&self) -> usize {
        match self {
            BlockWeights::ConvStage { op, gamma, beta, .. } => op.param_count() + gamma.len() + beta.len(),
            BlockWeights::Reduce { kernel } => kernel.param_count(),
            BlockWeights::LintentionStage { layer } => layer.param_count(),
        }
    }
}

/// All weights of a branch, in plan order.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchWeights {
    pub config: BranchConfig,
    /// One block list per level, P2 first.
    pub levels: Vec<Vec<BlockWeights>>,
    pub classifier: ConvKernel,
}

impl BranchWeights {
    pub fn param_count(&self) -> usize {
        self.levels.iter().flatten().map(BlockWeights::param_count).sum::<usize>() + self.classifier.param_count()
    }

    /// Parameters of group/layer norm affines only.
    pub fn norm_param_count(&self) -> usize {
        self.levels
            .iter()
            .flatten()
            .map(|b| match b {
                BlockWeights::ConvStage { gamma, beta, .. } => gamma.len() + beta.len(),
                BlockWeights::LintentionStage { layer } => layer.gamma.len() + layer.beta.len(),
                BlockWeights::Reduce { .. } => 0,
            })
            .sum()
    }

    /// Number of Lintention layers in the branch.
    pub fn lintention_layers(&self) -> Vec<&LintentionLayerParams> {
        self.levels
            .iter()
            .flatten()
            .filter_map(|b| match b {
                BlockWeights::LintentionStage { layer } => Some(layer),
                _ => None,
            })
            .collect()
    }
}

fn init_conv(rng: &mut SplitMix64Stream, in_ch: usize, out_ch: usize, k: usize, bias: bool) -> Result<ConvKernel> {
    let bound = 1.0 / ((in_ch * k * k) as f64).sqrt();
    let w = rng.tensor(&[("o", out_ch), ("i", in_ch), ("kh", k), ("kw", k)], bound)?;
    let b = bias.then(|| rng.symmetric_vec(out_ch, bound));
    ConvKernel::new(w, 1, b)
}

fn init_conv_op(rng: &mut SplitMix64Stream, cfg: &BranchConfig, kind: ConvOpKind, in_ch: usize, out_ch: usize) -> Result<ConvOpWeights> {
    let (kernels, gates) = match kind {
        ConvOpKind::Standard => (vec![init_conv(rng, in_ch, out_ch, 3, false)?], vec![]),
        ConvOpKind::PyConv | ConvOpKind::VerConv | ConvOpKind::VerConvSep => {
            let py = cfg.pyconv_config();
            let kernels = init_pyconv(rng, &py, in_ch)?;
            let gates = match kind {
                ConvOpKind::VerConv => vec![SeWeights::init(rng, out_ch, cfg.se_reduction)?],
                ConvOpKind::VerConvSep => py
                    .levels
                    .iter()
                    .map(|l| SeWeights::init(rng, l.channels, cfg.se_reduction))
                    .collect::<Result<_>>()?,
                _ => vec![],
            };
            (kernels, gates)
        }
    };
    Ok(ConvOpWeights { kind, kernels, gates })
}

/// Builds seeded weights for every stage of the configured branch.
///
/// Draw order: levels P2..P5, blocks in order, then the classifier.
pub fn build_branch(cfg: &BranchConfig) -> Result<BranchWeights> {
    let plan = BranchPlan::from_config(cfg)?;
    let mut rng = SplitMix64Stream::new(cfg.seed);
    let mut levels = Vec::with_capacity(plan.levels.len());
    for level in &plan.levels {
        let mut blocks = Vec::with_capacity(level.blocks.len());
        for block in &level.blocks {
            blocks.push(match *block {
                Block::ConvStage { op, in_ch, out_ch, upsample } => BlockWeights::ConvStage {
                    op: init_conv_op(&mut rng, cfg, op, in_ch, out_ch)?,
                    gamma: vec![1.0; out_ch],
                    beta: vec![0.0; out_ch],
                    upsample,
                },
                Block::Reduce { in_ch, out_ch } => BlockWeights::Reduce {
                    kernel: init_conv(&mut rng, in_ch, out_ch, 1, false)?,
                },
                Block::LintentionStage { channels, groups } => BlockWeights::LintentionStage {
                    layer: LintentionLayerParams::new(
                        init_params_from(&mut rng, channels, groups)?,
                        vec![1.0; channels],
                        vec![0.0; channels],
                        DEFAULT_EPS,
                    )?,
                },
            });
        }
        levels.push(blocks);
    }
    let classifier = init_conv(&mut rng, plan.stage_channels, plan.num_classes, 1, true)?;
    Ok(BranchWeights {
        config: cfg.clone(),
        levels,
        classifier,
    })
}

/// Applies one conv operator.
pub fn conv_op_forward(x: &Tensor, op: &ConvOpWeights, cfg: &BranchConfig) -> Result<Tensor> {
    match op.kind {
        ConvOpKind::Standard => conv2d(x, &op.kernels[0]),
        ConvOpKind::PyConv => pyconv_forward(x, &cfg.pyconv_config(), &op.kernels),
        ConvOpKind::VerConv => verconv_forward(x, &cfg.pyconv_config(), &op.kernels, &op.gates, cfg.se_reduction, GateMode::Collective),
        ConvOpKind::VerConvSep => verconv_forward(x, &cfg.pyconv_config(), &op.kernels, &op.gates, cfg.se_reduction, GateMode::Separate),
    }
}

/// Applies one block of a level path.
pub fn block_forward(x: &Tensor, block: &BlockWeights, cfg: &BranchConfig) -> Result<Tensor> {
    match block {
        BlockWeights::ConvStage { op, gamma, beta, upsample } => {
            let y = conv_op_forward(x, op, cfg)?;
            let y = relu(&group_norm(&y, cfg.norm_groups, gamma, beta, NORM_EPS)?);
            if *upsample {
                bilinear_upsample2x(&y)
            } else {
                Ok(y)
            }
        }
        BlockWeights::Reduce { kernel } => conv2d(x, kernel),
        BlockWeights::LintentionStage { layer } => {
            let y = lintention_layer_forward(&nchw_to_nhwc(x)?, layer)?;
            bilinear_upsample2x(&nhwc_to_nchw(&y)?)
        }
    }
}

/// Per-pixel class logits `(n, num_classes, image_h, image_w)`.
pub fn branch_forward(features: &FpnFeatures, weights: &BranchWeights) -> Result<Tensor> {
    let cfg = &weights.config;
    let (h, w) = features.image_size();
    if (h, w) != (cfg.image_height, cfg.image_width) {
        return Err(Error::dim(
            "h",
            format!("features imply a {h}x{w} image, weights were built for {}x{}", cfg.image_height, cfg.image_width),
        ));
    }
    let c = features.p2.extents()[1];
    if c != cfg.fpn_channels {
        return Err(Error::dim("c", format!("features have {c} channels, branch expects {}", cfg.fpn_channels)));
    }
    let mut sum: Option<Tensor> = None;
    for (x, blocks) in features.levels().into_iter().zip(&weights.levels) {
        let mut y = x.clone();
        for block in blocks {
            y = block_forward(&y, block, cfg)?;
        }
        sum = Some(match sum {
            None => y,
            Some(s) => s.add(&y)?,
        });
    }
    let sum = sum.ok_or_else(|| Error::Config("branch has no levels".into()))?;
    let logits = conv2d(&sum, &weights.classifier)?;
    bilinear_upsample(&logits, 4)
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsManifest {
    config: BranchConfig,
    tensors: Vec<String>,
}

fn named_tensors(weights: &BranchWeights) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    let vec_t = |v: &[f64]| Tensor::new(&[("c", v.len())], v.to_vec());
    for (li, blocks) in weights.levels.iter().enumerate() {
        let level = LEVELS[li].0;
        for (bi, block) in blocks.iter().enumerate() {
            let p = format!("{level}.{bi}");
            match block {
                BlockWeights::ConvStage { op, gamma, beta, .. } => {
                    for (ki, k) in op.kernels.iter().enumerate() {
                        out.push((format!("{p}.conv{ki}"), k.weights().clone()));
                    }
                    for (gi, g) in op.gates.iter().enumerate() {
                        out.push((format!("{p}.se{gi}.reduce"), g.reduce.clone()));
                        out.push((format!("{p}.se{gi}.reduce_bias"), vec_t(&g.reduce_bias)?));
                        out.push((format!("{p}.se{gi}.expand"), g.expand.clone()));
                        out.push((format!("{p}.se{gi}.expand_bias"), vec_t(&g.expand_bias)?));
                    }
                    out.push((format!("{p}.gn_gamma"), vec_t(gamma)?));
                    out.push((format!("{p}.gn_beta"), vec_t(beta)?));
                }
                BlockWeights::Reduce { kernel } => out.push((format!("{p}.reduce"), kernel.weights().clone())),
                BlockWeights::LintentionStage { layer } => {
                    out.push((format!("{p}.wq"), layer.core.wq().clone()));
                    out.push((format!("{p}.wk"), layer.core.wk().clone()));
                    out.push((format!("{p}.wv"), layer.core.wv().clone()));
                    out.push((format!("{p}.ln_gamma"), vec_t(&layer.gamma)?));
                    out.push((format!("{p}.ln_beta"), vec_t(&layer.beta)?));
                }
            }
        }
    }
    out.push(("classifier.weight".into(), weights.classifier.weights().clone()));
    if let Some(b) = weights.classifier.bias() {
        out.push(("classifier.bias".into(), vec_t(b)?));
    }
    Ok(out)
}

impl BranchWeights {
    /// Writes one LTNT file per tensor plus `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tensors = named_tensors(self)?;
        for (name, t) in &tensors {
            write_tensor(&dir.join(format!("{name}.ltnt")), t)?;
        }
        let manifest = WeightsManifest {
            config: self.config.clone(),
            tensors: tensors.into_iter().map(|(n, _)| format!("{n}.ltnt")).collect(),
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    /// Loads weights written by [`BranchWeights::save`]. The manifest's
    /// config fixes the structure; every tensor is read back from disk.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: WeightsManifest =
            serde_json::from_slice(&raw).map_err(|e| Error::format(&path, e.to_string()))?;
        let mut weights = build_branch(&manifest.config)?;
        let expected = named_tensors(&weights)?;
        let listed: Vec<String> = expected.iter().map(|(n, _)| format!("{n}.ltnt")).collect();
        if listed != manifest.tensors {
            return Err(Error::format(&path, "tensor list does not match the configured branch"));
        }
        let mut loaded = Vec::with_capacity(expected.len());
        for (name, template) in &expected {
            let t = read_tensor(&dir.join(format!("{name}.ltnt")))?;
            if t.extents() != template.extents() {
                return Err(Error::format(dir.join(format!("{name}.ltnt")), "unexpected tensor shape"));
            }
            loaded.push(t);
        }
        overwrite(&mut weights, loaded)?;
        Ok(weights)
    }
}

/// Replaces every tensor in `weights`, consuming `src` in `named_tensors` order.
fn overwrite(weights: &mut BranchWeights, src: Vec<Tensor>) -> Result<()> {
    let mut it = src.into_iter();
    let mut next = || it.next().ok_or_else(|| Error::Usage("too few tensors".into()));
    for block in weights.levels.iter_mut().flatten() {
        match block {
            BlockWeights::ConvStage { op, gamma, beta, .. } => {
                for k in op.kernels.iter_mut() {
                    *k = ConvKernel::new(next()?, k.groups(), None)?;
                }
                for g in op.gates.iter_mut() {
                    g.reduce = next()?.with_names(&["o", "i"])?;
                    g.reduce_bias = next()?.into_data();
                    g.expand = next()?.with_names(&["o", "i"])?;
                    g.expand_bias = next()?.into_data();
                }
                *gamma = next()?.into_data();
                *beta = next()?.into_data();
            }
            BlockWeights::Reduce { kernel } => *kernel = ConvKernel::new(next()?, 1, None)?,
            BlockWeights::LintentionStage { layer } => {
                let core = crate::lintention::LintentionParams::new(next()?, next()?, next()?)?;
                *layer = LintentionLayerParams::new(core, next()?.into_data(), next()?.into_data(), layer.eps)?;
            }
        }
    }
    let w = next()?;
    let b = weights.classifier.bias().map(|_| next()).transpose()?.map(Tensor::into_data);
    weights.classifier = ConvKernel::new(w, 1, b)?;
    Ok(())
}
