//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use lintention::branches::{
    build_branch, init_pyconv, pyconv_forward, se_gate, verconv_forward, BranchConfig, FpnFeatures, GateMode,
    PyConvConfig, PyConvLevel, SeWeights, Variant, branch_forward,
};
use lintention::lintention::{init_layer_params, init_params, lintention_forward, lintention_layer_forward};
use lintention::metrics::PanopticMap;
use lintention::ops::{bilinear_upsample, conv2d, group_norm, relu, ConvKernel};
use lintention::rng::SplitMix64Stream;
use lintention::verification::*;
use lintention::Tensor;

/// A branch small enough to run many times, with a two-level pyramid.
pub fn small_config(variant: Variant, seed: u64) -> BranchConfig {
    let mut cfg = BranchConfig::new(variant, 64, 64).with_seed(seed);
    cfg.fpn_channels = 16;
    cfg.stage_channels = 8;
    cfg.norm_groups = 4;
    cfg.se_reduction = 2;
    cfg.groups = 3;
    cfg.num_classes = 5;
    cfg.pyconv = Some(PyConvConfig {
        levels: vec![
            PyConvLevel { kernel: 3, groups: 1, channels: 4 },
            PyConvLevel { kernel: 5, groups: 2, channels: 4 },
        ],
    });
    cfg
}

fn extent(rng: &mut SplitMix64Stream, max: u64) -> usize {
    1 + rng.below(max) as usize
}

/// Max deviation of the loop oracle from `lintention_forward` on a random
/// instance with extents up to 4.
pub fn lintention_oracle_gap(seed: u64) -> f64 {
    let mut rng = SplitMix64Stream::new(seed);
    let (n, h, w, c, p) = (
        extent(&mut rng, 4),
        extent(&mut rng, 4),
        extent(&mut rng, 4),
        extent(&mut rng, 4),
        extent(&mut rng, 4),
    );
    let params = init_params(rng.next_u64(), c, p).unwrap();
    let x = rng.tensor(&[("n", n), ("h", h), ("w", w), ("c", c)], 1.0).unwrap();
    let fast = lintention_forward(&x, &params).unwrap().0;
    let slow = naive_lintention(&x, &params).unwrap();
    fast.max_abs_diff(&slow).unwrap()
}

fn nchw(rng: &mut SplitMix64Stream, n: usize, c: usize, h: usize, w: usize) -> Tensor {
    rng.tensor(&[("n", n), ("c", c), ("h", h), ("w", w)], 1.0).unwrap()
}

/// Max deviation over every branch stage operator on one random 8x8
/// instance: conv, group norm, ReLU, upsampling, SE, both pyramid forms,
/// the Lintention layer and the 1x1 reduction.
pub fn stage_oracle_gaps(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = SplitMix64Stream::new(seed);
    let batch = 1 + rng.below(2) as usize;
    let x = nchw(&mut rng, batch, 8, 8, 8);
    let mut out = Vec::new();

    let k = ConvKernel::new(
        rng.tensor(&[("o", 6), ("i", 4), ("kh", 3), ("kw", 3)], 0.5).unwrap(),
        2,
        Some(rng.symmetric_vec(6, 0.5)),
    )
    .unwrap();
    out.push(("conv2d", conv2d(&x, &k).unwrap().max_abs_diff(&naive_conv_kernel(&x, &k).unwrap()).unwrap()));

    let reduce = ConvKernel::new(rng.tensor(&[("o", 4), ("i", 8), ("kh", 1), ("kw", 1)], 0.5).unwrap(), 1, None).unwrap();
    out.push(("reduce", conv2d(&x, &reduce).unwrap().max_abs_diff(&naive_conv_kernel(&x, &reduce).unwrap()).unwrap()));

    let (gamma, beta) = (rng.symmetric_vec(8, 1.0), rng.symmetric_vec(8, 1.0));
    let gn = group_norm(&x, 4, &gamma, &beta, 1e-5).unwrap();
    out.push(("group_norm", gn.max_abs_diff(&naive_group_norm(&x, 4, &gamma, &beta, 1e-5).unwrap()).unwrap()));
    out.push(("relu", relu(&x).max_abs_diff(&naive_relu(&x).unwrap()).unwrap()));
    for f in [2, 4] {
        let name = if f == 2 { "upsample2x" } else { "upsample4x" };
        out.push((name, bilinear_upsample(&x, f).unwrap().max_abs_diff(&naive_upsample(&x, f).unwrap()).unwrap()));
    }

    let se = SeWeights::init(&mut rng, 8, 2).unwrap();
    out.push(("se_gate", se_gate(&x, 2, &se).unwrap().max_abs_diff(&naive_se_gate(&x, 2, &se).unwrap()).unwrap()));

    let py = PyConvConfig {
        levels: vec![
            PyConvLevel { kernel: 3, groups: 1, channels: 4 },
            PyConvLevel { kernel: 5, groups: 4, channels: 4 },
        ],
    };
    let kernels = init_pyconv(&mut rng, &py, 8).unwrap();
    out.push((
        "pyconv",
        pyconv_forward(&x, &py, &kernels).unwrap().max_abs_diff(&naive_pyconv(&x, &kernels).unwrap()).unwrap(),
    ));
    let collective = [SeWeights::init(&mut rng, 8, 2).unwrap()];
    let separate = [SeWeights::init(&mut rng, 4, 2).unwrap(), SeWeights::init(&mut rng, 4, 2).unwrap()];
    for (name, gates, mode) in [
        ("verconv", &collective[..], GateMode::Collective),
        ("verconvsep", &separate[..], GateMode::Separate),
    ] {
        let a = verconv_forward(&x, &py, &kernels, gates, 2, mode).unwrap();
        let b = naive_verconv(&x, &kernels, gates, 2, mode).unwrap();
        out.push((name, a.max_abs_diff(&b).unwrap()));
    }

    let layer = init_layer_params(rng.next_u64(), 8, 3).unwrap();
    let xh = rng.tensor(&[("n", 1), ("h", 8), ("w", 8), ("c", 8)], 1.0).unwrap();
    let a = lintention_layer_forward(&xh, &layer).unwrap();
    out.push(("lintention_layer", a.max_abs_diff(&naive_lintention_layer(&xh, &layer).unwrap()).unwrap()));
    out
}

/// Max deviation of a seeded small branch from the composed loop oracles.
pub fn branch_oracle_gap(variant: Variant, seed: u64) -> f64 {
    let cfg = small_config(variant, seed);
    let weights = build_branch(&cfg).unwrap();
    let feats = FpnFeatures::synthetic(seed.wrapping_mul(31).wrapping_add(7), 1, 16, 64, 64).unwrap();
    let fast = branch_forward(&feats, &weights).unwrap();
    let slow = naive_branch_forward(&feats, &weights).unwrap();
    fast.max_abs_diff(&slow).unwrap()
}

/// A random 8x8 ground truth over classes 1..=3 and a prediction made by
/// relabeling roughly a fifth of its pixels.
pub fn random_panoptic_pair(seed: u64) -> (PanopticMap, PanopticMap) {
    let mut rng = SplitMix64Stream::new(seed);
    let n = 64;
    let mut gc = vec![0u16; n];
    let mut gi = vec![0u16; n];
    // blocky ground truth so segments are large enough to match
    for i in 0..n {
        let block = (i / 8 / 4) * 2 + (i % 8) / 4;
        if block == 0 || rng.below(8) == 0 {
            gc[i] = 1 + rng.below(3) as u16;
            gi[i] = rng.below(4) as u16;
        } else {
            gc[i] = 1 + (block as u16 % 3);
            gi[i] = 1 + (block as u16 / 3);
        }
    }
    let (mut pc, mut pi) = (gc.clone(), gi.clone());
    for i in 0..n {
        if rng.below(5) == 0 {
            pc[i] = 1 + rng.below(3) as u16;
            pi[i] = rng.below(4) as u16;
        }
    }
    (
        PanopticMap::new(8, 8, pc, pi).unwrap(),
        PanopticMap::new(8, 8, gc, gi).unwrap(),
    )
}

pub fn things() -> BTreeSet<u16> {
    BTreeSet::from([1, 2])
}

pub fn stuff() -> BTreeSet<u16> {
    BTreeSet::from([3])
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BruteClass {
    pub tp: usize,
    pub fp: usize,
    pub fneg: usize,
    pub iou_sum: f64,
}

/// Exhaustive matcher: every same-class pair, IoU by pixel scan, threshold
/// applied directly.
pub fn brute_force_pq(pred: &PanopticMap, gt: &PanopticMap) -> BTreeMap<u16, BruteClass> {
    let n = gt.class.len();
    let gt_valid: Vec<bool> = (0..n).map(|i| gt.instance[i] != 0).collect();
    let segs = |m: &PanopticMap| -> BTreeSet<(u16, u16)> {
        (0..n).filter(|&i| m.instance[i] != 0).map(|i| (m.class[i], m.instance[i])).collect()
    };
    let in_seg = |m: &PanopticMap, s: (u16, u16), i: usize| m.instance[i] != 0 && (m.class[i], m.instance[i]) == s;
    let mut stats: BTreeMap<u16, BruteClass> = BTreeMap::new();
    let pred_segs: Vec<_> = segs(pred)
        .into_iter()
        .filter(|&s| (0..n).any(|i| gt_valid[i] && in_seg(pred, s, i)))
        .collect();
    let gt_segs: Vec<_> = segs(gt).into_iter().collect();
    let mut pred_hit = vec![false; pred_segs.len()];
    let mut gt_hit = vec![false; gt_segs.len()];
    for (a, &ps) in pred_segs.iter().enumerate() {
        for (b, &gs) in gt_segs.iter().enumerate() {
            if ps.0 != gs.0 {
                continue;
            }
            let (mut inter, mut union) = (0usize, 0usize);
            for i in 0..n {
                let p = gt_valid[i] && in_seg(pred, ps, i);
                let g = in_seg(gt, gs, i);
                inter += (p && g) as usize;
                union += (p || g) as usize;
            }
            let iou = inter as f64 / union as f64;
            if iou > 0.5 {
                let e = stats.entry(ps.0).or_default();
                e.tp += 1;
                e.iou_sum += iou;
                pred_hit[a] = true;
                gt_hit[b] = true;
            }
        }
    }
    for (a, s) in pred_segs.iter().enumerate() {
        if !pred_hit[a] {
            stats.entry(s.0).or_default().fp += 1;
        }
    }
    for (b, s) in gt_segs.iter().enumerate() {
        if !gt_hit[b] {
            stats.entry(s.0).or_default().fneg += 1;
        }
    }
    stats
}
