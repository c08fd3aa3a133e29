//! Pyramidal convolution and squeeze-and-excitation gating.

use crate::einsum::{contract, EinsumSpec};
use crate::error::{Error, Result};
use crate::ops::{conv2d, expect_nchw, global_avg_pool, scale_channels, sigmoid, ConvKernel};
use crate::rng::SplitMix64Stream;
use crate::tensor::Tensor;

use super::config::PyConvConfig;

/// Where SE gating is applied relative to the pyramid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    /// One gate over the concatenated pyramid output.
    Collective,
    /// One gate per pyramid level, before concatenation.
    Separate,
}

/// Bottleneck weights of one SE gate over `c` channels with reduction `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeWeights {
    /// `(c / r) x c`, axes `(o, i)`.
    pub reduce: Tensor,
    pub reduce_bias: Vec<f64>,
    /// `c x (c / r)`, axes `(o, i)`.
    pub expand: Tensor,
    pub expand_bias: Vec<f64>,
}

impl SeWeights {
    pub fn init(rng: &mut SplitMix64Stream, channels: usize, reduction: usize) -> Result<Self> {
        check_reduction(channels, reduction)?;
        let hidden = channels / reduction;
        let b1 = 1.0 / (channels as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            reduce: rng.tensor(&[("o", hidden), ("i", channels)], b1)?,
            reduce_bias: rng.symmetric_vec(hidden, b1),
            expand: rng.tensor(&[("o", channels), ("i", hidden)], b2)?,
            expand_bias: rng.symmetric_vec(channels, b2),
        })
    }

    pub fn channels(&self) -> usize {
        self.expand.extents()[0]
    }

    pub fn param_count(&self) -> usize {
        self.reduce.len() + self.reduce_bias.len() + self.expand.len() + self.expand_bias.len()
    }
}

fn check_reduction(channels: usize, reduction: usize) -> Result<()> {
    if reduction == 0 || channels % reduction != 0 {
        return Err(Error::Config(format!(
            "{channels} channels not divisible by SE reduction {reduction}"
        )));
    }
    Ok(())
}

fn dense(x: &Tensor, w: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let spec: EinsumSpec = "ni,oi->no".parse()?;
    let y = contract(&spec, x, w)?;
    let o = bias.len();
    let data = y
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + bias[i % o])
        .collect();
    Tensor::new(&[("n", y.extents()[0]), ("c", o)], data)
}

/// Squeeze-and-excitation: average pool, reduce, ReLU, expand, sigmoid,
/// then channelwise rescale of `x`.
pub fn se_gate(x: &Tensor, reduction: usize, w: &SeWeights) -> Result<Tensor> {
    let (_, c, _, _) = expect_nchw(x)?;
    check_reduction(c, reduction)?;
    if w.channels() != c || w.reduce.extents()[0] != c / reduction {
        return Err(Error::dim("c", "SE weights do not match the input channels / reduction"));
    }
    let pooled = global_avg_pool(x)?;
    let hidden = dense(&pooled, &w.reduce, &w.reduce_bias)?.map(|v| v.max(0.0));
    let gates = dense(&hidden, &w.expand, &w.expand_bias)?.map(sigmoid);
    scale_channels(x, &gates)
}

/// Kernels for each pyramid level, fan-in scaled uniform init.
pub fn init_pyconv(rng: &mut SplitMix64Stream, cfg: &PyConvConfig, in_channels: usize) -> Result<Vec<ConvKernel>> {
    cfg.validate(in_channels, cfg.out_channels())?;
    cfg.levels
        .iter()
        .map(|l| {
            let ipg = in_channels / l.groups;
            let bound = 1.0 / ((ipg * l.kernel * l.kernel) as f64).sqrt();
            let w = rng.tensor(&[("o", l.channels), ("i", ipg), ("kh", l.kernel), ("kw", l.kernel)], bound)?;
            ConvKernel::new(w, l.groups, None)
        })
        .collect()
}

fn check_pyramid(x: &Tensor, cfg: &PyConvConfig, kernels: &[ConvKernel]) -> Result<()> {
    let (_, c, _, _) = expect_nchw(x)?;
    cfg.validate(c, cfg.out_channels())?;
    if kernels.len() != cfg.levels.len() {
        return Err(Error::Config(format!(
            "{} pyramid kernels for {} levels",
            kernels.len(),
            cfg.levels.len()
        )));
    }
    for (k, l) in kernels.iter().zip(&cfg.levels) {
        if k.kernel_size() != l.kernel || k.groups() != l.groups || k.out_channels() != l.channels {
            return Err(Error::Config("pyramid kernel disagrees with its level config".into()));
        }
    }
    Ok(())
}

fn pyramid_levels(x: &Tensor, cfg: &PyConvConfig, kernels: &[ConvKernel]) -> Result<Vec<Tensor>> {
    check_pyramid(x, cfg, kernels)?;
    kernels.iter().map(|k| conv2d(x, k)).collect()
}

/// Independent grouped convolutions at every pyramid level, concatenated
/// along channels.
pub fn pyconv_forward(x: &Tensor, cfg: &PyConvConfig, kernels: &[ConvKernel]) -> Result<Tensor> {
    Tensor::concat(&pyramid_levels(x, cfg, kernels)?, "c")
}

/// PyConv with SE gating, collective or per level. `gates` holds one entry
/// for collective mode and one per level for separate mode.
pub fn verconv_forward(
    x: &Tensor,
    cfg: &PyConvConfig,
    kernels: &[ConvKernel],
    gates: &[SeWeights],
    reduction: usize,
    mode: GateMode,
) -> Result<Tensor> {
    let levels = pyramid_levels(x, cfg, kernels)?;
    match mode {
        GateMode::Collective => {
            let [gate] = gates else {
                return Err(Error::Config(format!("collective gating needs 1 SE block, got {}", gates.len())));
            };
            se_gate(&Tensor::concat(&levels, "c")?, reduction, gate)
        }
        GateMode::Separate => {
            if gates.len() != levels.len() {
                return Err(Error::Config(format!(
                    "separate gating needs {} SE blocks, got {}",
                    levels.len(),
                    gates.len()
                )));
            }
            let gated = levels
                .iter()
                .zip(gates)
                .map(|(t, g)| se_gate(t, reduction, g))
                .collect::<Result<Vec<_>>>()?;
            Tensor::concat(&gated, "c")
        }
    }
}
