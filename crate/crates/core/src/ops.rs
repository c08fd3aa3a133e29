//! Dense operators over [`Tensor`]: softmax, normalization, bilinear
//! resampling, grouped convolution and a few pointwise helpers.
//!
//! Convolution and group norm expect `(n, c, h, w)` axes; upsampling looks
//! up the `h` and `w` axes by name and works in any layout.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Softmax along the last axis, with max-subtraction.
pub fn softmax_lastdim(t: &Tensor) -> Result<Tensor> {
    let last = t
        .axes()
        .last()
        .ok_or_else(|| Error::dim("<rank>", "softmax needs rank >= 1"))?
        .extent;
    if !t.all_finite() {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(last) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    t.with_data(out)
}

fn check_affine(t: &Tensor, gamma: &[f64], beta: &[f64]) -> Result<usize> {
    let last = t
        .axes()
        .last()
        .ok_or_else(|| Error::dim("<rank>", "layer norm needs rank >= 1"))?;
    if gamma.len() != last.extent || beta.len() != last.extent {
        return Err(Error::dim(
            &last.name,
            format!(
                "gamma/beta lengths {}/{} differ from extent {}",
                gamma.len(),
                beta.len(),
                last.extent
            ),
        ));
    }
    Ok(last.extent)
}

/// Layer normalization over the last axis (biased variance).
pub fn layer_norm(t: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Tensor> {
    let c = check_affine(t, gamma, beta)?;
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer norm eps must be positive, got {eps}")));
    }
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gamma[i] + beta[i];
        }
    }
    t.with_data(out)
}

/// One output coordinate of half-pixel bilinear resampling: the two source
/// taps and the weight on the second.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub(crate) fn taps(input: usize, factor: usize) -> Vec<Tap> {
    (0..input * factor)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Geometry of a tensor around its `h` and `w` axes.
struct Spatial {
    outer: usize,
    h: usize,
    mid: usize,
    w: usize,
    inner: usize,
    h_axis: usize,
    w_axis: usize,
}

fn spatial(t: &Tensor) -> Result<Spatial> {
    let h_axis = t.axis_index("h")?;
    let w_axis = t.axis_index("w")?;
    if w_axis < h_axis {
        return Err(Error::dim("w", "axis `w` must follow axis `h`"));
    }
    let ext = t.extents();
    Ok(Spatial {
        outer: ext[..h_axis].iter().product(),
        h: ext[h_axis],
        mid: ext[h_axis + 1..w_axis].iter().product(),
        w: ext[w_axis],
        inner: ext[w_axis + 1..].iter().product(),
        h_axis,
        w_axis,
    })
}

/// Bilinear upsampling of the `h` and `w` axes by an integer factor,
/// half-pixel centers, edge clamped.
pub fn bilinear_upsample(t: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::Config("upsample factor must be positive".into()));
    }
    let g = spatial(t)?;
    let ty = taps(g.h, factor);
    let tx = taps(g.w, factor);
    let (oh, ow) = (g.h * factor, g.w * factor);
    let src = t.data();
    let mut out = Vec::with_capacity(g.outer * oh * g.mid * ow * g.inner);
    let at = |o: usize, y: usize, m: usize, x: usize, i: usize| {
        src[(((o * g.h + y) * g.mid + m) * g.w + x) * g.inner + i]
    };
    for o in 0..g.outer {
        for yt in &ty {
            for m in 0..g.mid {
                for xt in &tx {
                    for i in 0..g.inner {
                        let top = (1.0 - xt.frac) * at(o, yt.lo, m, xt.lo, i)
                            + xt.frac * at(o, yt.lo, m, xt.hi, i);
                        let bottom = (1.0 - xt.frac) * at(o, yt.hi, m, xt.lo, i)
                            + xt.frac * at(o, yt.hi, m, xt.hi, i);
                        out.push((1.0 - yt.frac) * top + yt.frac * bottom);
                    }
                }
            }
        }
    }
    let mut axes = t.axes().to_vec();
    axes[g.h_axis].extent = oh;
    axes[g.w_axis].extent = ow;
    Tensor::from_axes(axes, out)
}

pub fn bilinear_upsample2x(t: &Tensor) -> Result<Tensor> {
    bilinear_upsample(t, 2)
}

/// Adjoint of [`bilinear_upsample`]: scatters `upstream` back onto the input grid.
pub(crate) fn bilinear_upsample_adjoint(input: &Tensor, upstream: &Tensor, factor: usize) -> Result<Tensor> {
    let g = spatial(input)?;
    let ty = taps(g.h, factor);
    let tx = taps(g.w, factor);
    let (oh, ow) = (g.h * factor, g.w * factor);
    let expect = g.outer * oh * g.mid * ow * g.inner;
    if upstream.len() != expect {
        return Err(Error::dim("<shape>", "upstream does not match upsampled shape"));
    }
    let mut grad = vec![0.0; input.len()];
    let idx = |o: usize, y: usize, m: usize, x: usize, i: usize| {
        (((o * g.h + y) * g.mid + m) * g.w + x) * g.inner + i
    };
    let up = upstream.data();
    let mut k = 0;
    for o in 0..g.outer {
        for yt in &ty {
            for m in 0..g.mid {
                for xt in &tx {
                    for i in 0..g.inner {
                        let u = up[k];
                        k += 1;
                        grad[idx(o, yt.lo, m, xt.lo, i)] += u * (1.0 - yt.frac) * (1.0 - xt.frac);
                        grad[idx(o, yt.lo, m, xt.hi, i)] += u * (1.0 - yt.frac) * xt.frac;
                        grad[idx(o, yt.hi, m, xt.lo, i)] += u * yt.frac * (1.0 - xt.frac);
                        grad[idx(o, yt.hi, m, xt.hi, i)] += u * yt.frac * xt.frac;
                    }
                }
            }
        }
    }
    input.with_data(grad)
}

/// Convolution weights with group structure and same padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    weights: Tensor,
    groups: usize,
    padding: usize,
    bias: Option<Vec<f64>>,
}

impl ConvKernel {
    /// `weights` has axes `(o, i, kh, kw)` where `i` is the per-group input
    /// channel count. Padding is derived from the (square, odd) kernel size.
    pub fn new(weights: Tensor, groups: usize, bias: Option<Vec<f64>>) -> Result<Self> {
        if weights.rank() != 4 {
            return Err(Error::dim("<rank>", "conv weights must have rank 4 (o, i, kh, kw)"));
        }
        let ext = weights.extents();
        let (out_ch, kh, kw) = (ext[0], ext[2], ext[3]);
        if groups == 0 || out_ch % groups != 0 {
            return Err(Error::Config(format!(
                "{out_ch} output channels not divisible into {groups} groups"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 || kh != kw {
            return Err(Error::Config(format!("kernel {kh}x{kw} must be square and odd")));
        }
        if let Some(b) = &bias {
            if b.len() != out_ch {
                return Err(Error::dim("o", format!("bias length {} vs {out_ch} outputs", b.len())));
            }
        }
        let weights = weights.with_names(&["o", "i", "kh", "kw"])?;
        Ok(Self {
            weights,
            groups,
            padding: kh / 2,
            bias,
        })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn out_channels(&self) -> usize {
        self.weights.axes()[0].extent
    }

    pub fn in_channels(&self) -> usize {
        self.weights.axes()[1].extent * self.groups
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.axes()[2].extent
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Vec::len)
    }
}

pub(crate) fn expect_nchw(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if t.axis_names() != ["n", "c", "h", "w"] {
        return Err(Error::dim(
            "<layout>",
            format!("expected axes (n, c, h, w), got {:?}", t.axis_names()),
        ));
    }
    let e = t.extents();
    Ok((e[0], e[1], e[2], e[3]))
}

/// Grouped 2-D cross-correlation with same padding and unit stride.
pub fn conv2d(t: &Tensor, k: &ConvKernel) -> Result<Tensor> {
    let (n, c, h, w) = expect_nchw(t)?;
    if c != k.in_channels() {
        return Err(Error::Config(format!(
            "input has {c} channels, kernel expects {} ({} groups x {})",
            k.in_channels(),
            k.groups,
            k.weights.axes()[1].extent
        )));
    }
    let oc = k.out_channels();
    let ipg = c / k.groups;
    let opg = oc / k.groups;
    let ks = k.kernel_size();
    let pad = k.padding as isize;
    let x = t.data();
    let wt = k.weights.data();
    let mut out = vec![0.0; n * oc * h * w];
    for b in 0..n {
        for o in 0..oc {
            let g = o / opg;
            let plane = &mut out[(b * oc + o) * h * w..(b * oc + o + 1) * h * w];
            if let Some(bias) = &k.bias {
                plane.iter_mut().for_each(|v| *v = bias[o]);
            }
            for ic in 0..ipg {
                let src = &x[(b * c + g * ipg + ic) * h * w..][..h * w];
                for ky in 0..ks {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..ks {
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(w, dx);
                        let wv = wt[((o * ipg + ic) * ks + ky) * ks + kx];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let srow = &src[sy * w..];
                            let orow = &mut plane[y * w..];
                            for xx in x0..x1 {
                                orow[xx] += wv * srow[(xx as isize + dx) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[("n", n), ("c", oc), ("h", h), ("w", w)], out)
}

/// Output positions `[lo, hi)` whose tap at offset `d` lands inside `0..len`.
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

/// Gradients of [`conv2d`] w.r.t. input, weights and (if present) bias.
pub(crate) fn conv2d_vjp(t: &Tensor, k: &ConvKernel, upstream: &Tensor) -> Result<(Tensor, Tensor, Option<Vec<f64>>)> {
    let (n, c, h, w) = expect_nchw(t)?;
    let oc = k.out_channels();
    if upstream.extents() != [n, oc, h, w] {
        return Err(Error::dim("<shape>", "upstream does not match conv output"));
    }
    let ipg = c / k.groups;
    let opg = oc / k.groups;
    let ks = k.kernel_size();
    let pad = k.padding as isize;
    let x = t.data();
    let wt = k.weights.data();
    let up = upstream.data();
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wt.len()];
    for b in 0..n {
        for o in 0..oc {
            let g = o / opg;
            let uplane = &up[(b * oc + o) * h * w..][..h * w];
            for ic in 0..ipg {
                let base = (b * c + g * ipg + ic) * h * w;
                for ky in 0..ks {
                    let dy = ky as isize - pad;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..ks {
                        let dx = kx as isize - pad;
                        let (x0, x1) = valid_range(w, dx);
                        let wi = ((o * ipg + ic) * ks + ky) * ks + kx;
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            for xx in x0..x1 {
                                let si = base + sy * w + (xx as isize + dx) as usize;
                                let u = uplane[y * w + xx];
                                acc += u * x[si];
                                gx[si] += u * wt[wi];
                            }
                        }
                        gw[wi] += acc;
                    }
                }
            }
        }
    }
    let gb = k.bias.as_ref().map(|_| {
        (0..oc)
            .map(|o| (0..n).map(|b| up[(b * oc + o) * h * w..][..h * w].iter().sum::<f64>()).sum())
            .collect()
    });
    Ok((t.with_data(gx)?, k.weights.with_data(gw)?, gb))
}

/// Group normalization over `(n, c, h, w)`; statistics per (sample, group).
pub fn group_norm(t: &Tensor, groups: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Tensor> {
    let (n, c, h, w) = expect_nchw(t)?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::Config(format!("{c} channels not divisible into {groups} groups")));
    }
    if gamma.len() != c || beta.len() != c {
        return Err(Error::dim("c", "group norm affine length differs from channels"));
    }
    let cpg = c / groups;
    let block = cpg * h * w;
    let mut out = t.data().to_vec();
    for b in 0..n {
        for g in 0..groups {
            let start = (b * c + g * cpg) * h * w;
            let slice = &mut out[start..start + block];
            let mean = slice.iter().sum::<f64>() / block as f64;
            let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / block as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in slice.iter_mut().enumerate() {
                let ch = g * cpg + j / (h * w);
                *v = (*v - mean) * inv * gamma[ch] + beta[ch];
            }
        }
    }
    t.with_data(out)
}

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Mean over `h` and `w` of an `(n, c, h, w)` tensor, as `(n, c)`.
pub fn global_avg_pool(t: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = expect_nchw(t)?;
    let hw = h * w;
    let data = t
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().sum::<f64>() / hw as f64)
        .collect();
    Tensor::new(&[("n", n), ("c", c)], data)
}

/// Multiplies each `(n, c)` plane of an `(n, c, h, w)` tensor by a gate.
pub fn scale_channels(t: &Tensor, gates: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = expect_nchw(t)?;
    if gates.extents() != [n, c] {
        return Err(Error::dim("c", "gate shape differs from (n, c)"));
    }
    let hw = h * w;
    let mut out = t.data().to_vec();
    for (plane, &g) in out.chunks_mut(hw).zip(gates.data()) {
        plane.iter_mut().for_each(|v| *v *= g);
    }
    t.with_data(out)
}

/// Renames an `(n, h, w, c)` tensor's layout to `(n, c, h, w)` or back.
pub fn nhwc_to_nchw(t: &Tensor) -> Result<Tensor> {
    t.permute(&["n", "c", "h", "w"])
}

pub fn nchw_to_nhwc(t: &Tensor) -> Result<Tensor> {
    t.permute(&["n", "h", "w", "c"])
}
