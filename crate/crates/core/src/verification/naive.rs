//! Loop-level reference implementations. These read raw buffers and
//! re-derive every operator with explicit indexing; they never call the
//! einsum engine or the dense operators they are checked against.

use crate::branches::{BlockWeights, BranchWeights, ConvOpKind, FpnFeatures, GateMode, SeWeights, NORM_EPS};
use crate::error::{Error, Result};
use crate::lintention::{LintentionLayerParams, LintentionParams};
use crate::ops::ConvKernel;
use crate::tensor::Tensor;

fn shape4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match t.extents()[..] {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::dim("<rank>", format!("{what} must be rank 4, got rank {}", t.rank()))),
    }
}

fn softmax_row(row: &mut [f64]) {
    let mut m = f64::NEG_INFINITY;
    for &v in row.iter() {
        if v > m {
            m = v;
        }
    }
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Lintention on `x: (n, h, w, c)` by nested loops.
pub fn naive_lintention(x: &Tensor, p: &LintentionParams) -> Result<Tensor> {
    let [n, h, w, c] = shape4(x, "input")?;
    if c != p.channels() {
        return Err(Error::dim("c", format!("input has {c} channels, parameters expect {}", p.channels())));
    }
    let g = p.groups();
    let hw = h * w;
    let xs = x.data();
    let (wq, wk, wv) = (p.wq().data(), p.wk().data(), p.wv().data());

    // query and group assignment per pixel
    let mut q = vec![0.0; n * hw * c];
    let mut l = vec![0.0; n * hw * g];
    for pix in 0..n * hw {
        for d in 0..c {
            let mut acc = 0.0;
            for i in 0..c {
                acc += xs[pix * c + i] * wq[i * c + d];
            }
            q[pix * c + d] = acc;
        }
        for j in 0..g {
            let mut acc = 0.0;
            for i in 0..c {
                acc += xs[pix * c + i] * wk[i * g + j];
            }
            l[pix * g + j] = acc;
        }
        softmax_row(&mut l[pix * g..(pix + 1) * g]);
    }

    // group keys and values
    let mut k = vec![0.0; n * g * c];
    let mut v = vec![0.0; n * g * c];
    for b in 0..n {
        for j in 0..g {
            for d in 0..c {
                let mut acc = 0.0;
                for s in 0..hw {
                    let pix = b * hw + s;
                    acc += l[pix * g + j] * q[pix * c + d];
                }
                k[(b * g + j) * c + d] = acc;
            }
        }
        for j in 0..g {
            for d in 0..c {
                let mut acc = 0.0;
                for i in 0..c {
                    acc += k[(b * g + j) * c + i] * wv[i * c + d];
                }
                v[(b * g + j) * c + d] = acc;
            }
        }
    }

    // scores against the keys, then mix the values
    let scale = 1.0 / (c as f64).sqrt();
    let mut y = vec![0.0; n * hw * c];
    let mut row = vec![0.0; g];
    for b in 0..n {
        for s in 0..hw {
            let pix = b * hw + s;
            for (j, r) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for d in 0..c {
                    acc += k[(b * g + j) * c + d] * q[pix * c + d];
                }
                *r = acc * scale;
            }
            softmax_row(&mut row);
            for d in 0..c {
                let mut acc = 0.0;
                for (j, r) in row.iter().enumerate() {
                    acc += r * v[(b * g + j) * c + d];
                }
                y[pix * c + d] = acc;
            }
        }
    }
    Tensor::new(&[("n", n), ("h", h), ("w", w), ("c", c)], y)
}

/// Layer norm over the last axis, biased variance.
pub fn naive_layer_norm(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Tensor> {
    let c = *x.extents().last().ok_or_else(|| Error::dim("<rank>", "rank 0"))?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::dim("c", "affine length mismatch"));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let mut mean = 0.0;
        for &v in row.iter() {
            mean += v;
        }
        mean /= c as f64;
        let mut var = 0.0;
        for &v in row.iter() {
            var += (v - mean) * (v - mean);
        }
        var /= c as f64;
        let sd = (var + eps).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            *v = gamma[i] * (*v - mean) / sd + beta[i];
        }
    }
    x.with_data(out)
}

/// `layer_norm(x + lintention(x))` on `(n, h, w, c)`.
pub fn naive_lintention_layer(x: &Tensor, p: &LintentionLayerParams) -> Result<Tensor> {
    let y = naive_lintention(x, &p.core)?;
    let sum: Vec<f64> = x.data().iter().zip(y.data()).map(|(a, b)| a + b).collect();
    naive_layer_norm(&y.with_data(sum)?, &p.gamma, &p.beta, p.eps)
}

/// Zero-padded "same" convolution of `(n, c, h, w)` with `(o, i, k, k)`
/// weights split into `groups`.
pub fn naive_conv2d(x: &Tensor, weights: &Tensor, groups: usize, bias: Option<&[f64]>) -> Result<Tensor> {
    let [n, c, h, w] = shape4(x, "input")?;
    let [o, ipg, kh, kw] = shape4(weights, "weights")?;
    if groups == 0 || c != ipg * groups || o % groups != 0 {
        return Err(Error::Config(format!("{c} inputs / {o} outputs do not fit {groups} groups of {ipg}")));
    }
    let opg = o / groups;
    let pad = (kh / 2) as isize;
    let (xs, ws) = (x.data(), weights.data());
    let mut out = vec![0.0; n * o * h * w];
    for b in 0..n {
        for oc in 0..o {
            let grp = oc / opg;
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias.map_or(0.0, |bs| bs[oc]);
                    for ic in 0..ipg {
                        let cin = grp * ipg + ic;
                        for ky in 0..kh {
                            let sy = y as isize + ky as isize - pad;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let sx = xx as isize + kx as isize - pad;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let xv = xs[((b * c + cin) * h + sy as usize) * w + sx as usize];
                                let wv = ws[((oc * ipg + ic) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * o + oc) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    Tensor::new(&[("n", n), ("c", o), ("h", h), ("w", w)], out)
}

pub fn naive_conv_kernel(x: &Tensor, k: &ConvKernel) -> Result<Tensor> {
    naive_conv2d(x, k.weights(), k.groups(), k.bias())
}

pub fn naive_group_norm(x: &Tensor, groups: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Tensor> {
    let [n, c, h, w] = shape4(x, "input")?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!("{c} channels not divisible into {groups} groups")));
    }
    let cpg = c / groups;
    let xs = x.data();
    let mut out = vec![0.0; xs.len()];
    for b in 0..n {
        for g in 0..groups {
            let idx = |ch: usize, y: usize, xx: usize| ((b * c + g * cpg + ch) * h + y) * w + xx;
            let count = (cpg * h * w) as f64;
            let mut mean = 0.0;
            for ch in 0..cpg {
                for y in 0..h {
                    for xx in 0..w {
                        mean += xs[idx(ch, y, xx)];
                    }
                }
            }
            mean /= count;
            let mut var = 0.0;
            for ch in 0..cpg {
                for y in 0..h {
                    for xx in 0..w {
                        let d = xs[idx(ch, y, xx)] - mean;
                        var += d * d;
                    }
                }
            }
            var /= count;
            let sd = (var + eps).sqrt();
            for ch in 0..cpg {
                let full = g * cpg + ch;
                for y in 0..h {
                    for xx in 0..w {
                        let i = idx(ch, y, xx);
                        out[i] = gamma[full] * (xs[i] - mean) / sd + beta[full];
                    }
                }
            }
        }
    }
    x.with_data(out)
}

pub fn naive_relu(x: &Tensor) -> Result<Tensor> {
    let out = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    x.with_data(out)
}

fn source_coord(dst: usize, factor: usize, len: usize) -> (usize, usize, f64) {
    let mut src = (dst as f64 + 0.5) / factor as f64 - 0.5;
    if src < 0.0 {
        src = 0.0;
    }
    let mut lo = src.floor() as usize;
    if lo > len - 1 {
        lo = len - 1;
    }
    let hi = if lo + 1 < len { lo + 1 } else { len - 1 };
    (lo, hi, src - lo as f64)
}

/// Bilinear upsampling of `(n, c, h, w)`, half-pixel centers.
pub fn naive_upsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    let [n, c, h, w] = shape4(x, "input")?;
    let (oh, ow) = (h * factor, w * factor);
    let xs = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let at = |y: usize, xx: usize| xs[(plane * h + y) * w + xx];
        for y in 0..oh {
            let (y0, y1, fy) = source_coord(y, factor, h);
            for xx in 0..ow {
                let (x0, x1, fx) = source_coord(xx, factor, w);
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(plane * oh + y) * ow + xx] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(&[("n", n), ("c", c), ("h", oh), ("w", ow)], out)
}

/// Squeeze-and-excitation gating of `(n, c, h, w)`.
pub fn naive_se_gate(x: &Tensor, reduction: usize, se: &SeWeights) -> Result<Tensor> {
    let [n, c, h, w] = shape4(x, "input")?;
    if reduction == 0 || c % reduction != 0 {
        return Err(Error::Config(format!("{c} channels not divisible by {reduction}")));
    }
    let hidden = c / reduction;
    let (r, e) = (se.reduce.data(), se.expand.data());
    let xs = x.data();
    let mut out = xs.to_vec();
    let hw = h * w;
    for b in 0..n {
        let mut pooled = vec![0.0; c];
        for (ch, p) in pooled.iter_mut().enumerate() {
            for i in 0..hw {
                *p += xs[(b * c + ch) * hw + i];
            }
            *p /= hw as f64;
        }
        let mut mid = vec![0.0; hidden];
        for (j, m) in mid.iter_mut().enumerate() {
            let mut acc = se.reduce_bias[j];
            for (ch, p) in pooled.iter().enumerate() {
                acc += r[j * c + ch] * p;
            }
            *m = if acc > 0.0 { acc } else { 0.0 };
        }
        for ch in 0..c {
            let mut acc = se.expand_bias[ch];
            for (j, m) in mid.iter().enumerate() {
                acc += e[ch * hidden + j] * m;
            }
            let gate = 1.0 / (1.0 + (-acc).exp());
            for i in 0..hw {
                out[(b * c + ch) * hw + i] *= gate;
            }
        }
    }
    x.with_data(out)
}

fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
    let [n, _, h, w] = shape4(&parts[0], "part")?;
    let total: usize = parts.iter().map(|p| p.extents()[1]).sum();
    let mut out = Vec::with_capacity(n * total * h * w);
    for b in 0..n {
        for p in parts {
            let c = p.extents()[1];
            out.extend_from_slice(&p.data()[b * c * h * w..(b + 1) * c * h * w]);
        }
    }
    Tensor::new(&[("n", n), ("c", total), ("h", h), ("w", w)], out)
}

/// Pyramid of grouped convolutions, concatenated along channels.
pub fn naive_pyconv(x: &Tensor, kernels: &[ConvKernel]) -> Result<Tensor> {
    let levels = kernels.iter().map(|k| naive_conv_kernel(x, k)).collect::<Result<Vec<_>>>()?;
    concat_channels(&levels)
}

pub fn naive_verconv(x: &Tensor, kernels: &[ConvKernel], gates: &[SeWeights], reduction: usize, mode: GateMode) -> Result<Tensor> {
    match mode {
        GateMode::Collective => naive_se_gate(&naive_pyconv(x, kernels)?, reduction, &gates[0]),
        GateMode::Separate => {
            let levels = kernels
                .iter()
                .zip(gates)
                .map(|(k, g)| naive_se_gate(&naive_conv_kernel(x, k)?, reduction, g))
                .collect::<Result<Vec<_>>>()?;
            concat_channels(&levels)
        }
    }
}

fn nchw_to_nhwc(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = shape4(x, "input")?;
    let xs = x.data();
    let mut out = vec![0.0; xs.len()];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[((b * h + y) * w + xx) * c + ch] = xs[((b * c + ch) * h + y) * w + xx];
                }
            }
        }
    }
    Tensor::new(&[("n", n), ("h", h), ("w", w), ("c", c)], out)
}

fn nhwc_to_nchw(x: &Tensor) -> Result<Tensor> {
    let [n, h, w, c] = shape4(x, "input")?;
    let xs = x.data();
    let mut out = vec![0.0; xs.len()];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[((b * c + ch) * h + y) * w + xx] = xs[((b * h + y) * w + xx) * c + ch];
                }
            }
        }
    }
    Tensor::new(&[("n", n), ("c", c), ("h", h), ("w", w)], out)
}

/// One branch block by loops.
pub fn naive_block(x: &Tensor, block: &BlockWeights, weights: &BranchWeights) -> Result<Tensor> {
    let cfg = &weights.config;
    match block {
        BlockWeights::ConvStage { op, gamma, beta, upsample } => {
            let y = match op.kind {
                ConvOpKind::Standard => naive_conv_kernel(x, &op.kernels[0])?,
                ConvOpKind::PyConv => naive_pyconv(x, &op.kernels)?,
                ConvOpKind::VerConv => naive_verconv(x, &op.kernels, &op.gates, cfg.se_reduction, GateMode::Collective)?,
                ConvOpKind::VerConvSep => naive_verconv(x, &op.kernels, &op.gates, cfg.se_reduction, GateMode::Separate)?,
            };
            let y = naive_relu(&naive_group_norm(&y, cfg.norm_groups, gamma, beta, NORM_EPS)?)?;
            if *upsample {
                naive_upsample(&y, 2)
            } else {
                Ok(y)
            }
        }
        BlockWeights::Reduce { kernel } => naive_conv_kernel(x, kernel),
        BlockWeights::LintentionStage { layer } => {
            let y = naive_lintention_layer(&nchw_to_nhwc(x)?, layer)?;
            naive_upsample(&nhwc_to_nchw(&y)?, 2)
        }
    }
}

/// A whole segmentation branch composed from the loop oracles.
pub fn naive_branch_forward(features: &FpnFeatures, weights: &BranchWeights) -> Result<Tensor> {
    let mut total: Option<Vec<f64>> = None;
    let mut shape = [0; 4];
    for (x, blocks) in features.levels().into_iter().zip(&weights.levels) {
        let mut y = x.clone();
        for block in blocks {
            y = naive_block(&y, block, weights)?;
        }
        shape = shape4(&y, "level output")?;
        total = Some(match total {
            None => y.into_data(),
            Some(mut acc) => {
                for (a, b) in acc.iter_mut().zip(y.data()) {
                    *a += b;
                }
                acc
            }
        });
    }
    let [n, c, h, w] = shape;
    let sum = Tensor::new(&[("n", n), ("c", c), ("h", h), ("w", w)], total.unwrap_or_default())?;
    naive_upsample(&naive_conv_kernel(&sum, &weights.classifier)?, 4)
}

/// Textbook scaled dot-product self-attention on `x: (n, h, w, c)`: every
/// pixel attends to every pixel.
pub fn standard_self_attention(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Result<Tensor> {
    let [n, h, w, c] = shape4(x, "input")?;
    for m in [wq, wk, wv] {
        if m.extents() != [c, c] {
            return Err(Error::dim("c", format!("projection {:?} is not {c}x{c}", m.extents())));
        }
    }
    let t = h * w;
    let xs = x.data();
    let project = |m: &[f64]| {
        let mut out = vec![0.0; n * t * c];
        for pix in 0..n * t {
            for d in 0..c {
                let mut acc = 0.0;
                for i in 0..c {
                    acc += xs[pix * c + i] * m[i * c + d];
                }
                out[pix * c + d] = acc;
            }
        }
        out
    };
    let (q, k, v) = (project(wq.data()), project(wk.data()), project(wv.data()));
    let scale = 1.0 / (c as f64).sqrt();
    let mut y = vec![0.0; n * t * c];
    let mut row = vec![0.0; t];
    for b in 0..n {
        for i in 0..t {
            for (j, r) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for d in 0..c {
                    acc += q[(b * t + i) * c + d] * k[(b * t + j) * c + d];
                }
                *r = acc * scale;
            }
            softmax_row(&mut row);
            for d in 0..c {
                let mut acc = 0.0;
                for (j, r) in row.iter().enumerate() {
                    acc += r * v[(b * t + j) * c + d];
                }
                y[(b * t + i) * c + d] = acc;
            }
        }
    }
    Tensor::new(&[("n", n), ("h", h), ("w", w), ("c", c)], y)
}
