mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;

use lintention::branches::{branch_forward, build_branch, BlockWeights, BranchConfig, ConvOpKind, FpnFeatures, PyConvConfig, Variant};
use lintention::cost::{branch_cost, closed_form, lintention_cost, self_attention_cost, CountingConvention, GENERATORS};
use lintention::io::{decode_ltnt, encode_ltnt};
use lintention::lintention::init_params;
use lintention::metrics::{pq_stats, PanopticMap};
use lintention::rng::SplitMix64Stream;
use lintention::verification::counted_lintention;
use lintention::Tensor;

proptest! {
    #[test]
    fn lintention_flops_are_affine_in_pixels(n in 1usize..4, h in 1usize..8, w in 1usize..8, c in 1usize..32, p in 1usize..32) {
        let t = |w| lintention_cost(n, h, w, c, p).unwrap().totals.flops;
        let fixed = 2 * (n * p * c * c) as u64;
        prop_assert_eq!(t(2 * w), 2 * t(w) - fixed);
    }

    #[test]
    fn counted_run_equals_closed_forms(n in 1usize..=4, h in 1usize..=4, w in 1usize..=4, c in 1usize..=4, p in 1usize..=4, seed: u64) {
        let mut rng = SplitMix64Stream::new(seed);
        let params = init_params(rng.next_u64(), c, p).unwrap();
        let x = rng.tensor(&[("n", n), ("h", h), ("w", w), ("c", c)], 1.0).unwrap();
        let run = counted_lintention(&x, &params, &CountingConvention::default()).unwrap();
        let d = [n, h, w, c, p].map(|v| v as u64);
        for g in GENERATORS {
            let (f, s, _) = closed_form(g, d[0], d[1], d[2], d[3], d[4]).unwrap();
            prop_assert_eq!(run.stage_totals(g), (f, s), "{}", g);
        }
    }

    #[test]
    fn attention_ratio_falls_with_pixels(c in 1usize..16, p in 1usize..16, hw in 1usize..64) {
        let ratio = |hw| {
            lintention_cost(1, 1, hw, c, p).unwrap().totals.flops as f64
                / self_attention_cost(1, 1, hw, c).unwrap().totals.flops as f64
        };
        prop_assert!(ratio(hw + 1) < ratio(hw));
    }

    #[test]
    fn ltnt_round_trip(extents in prop::collection::vec(1usize..5, 0..4), seed: u64) {
        let shape: Vec<(String, usize)> = extents.iter().enumerate().map(|(i, &e)| (format!("d{i}"), e)).collect();
        let t = SplitMix64Stream::new(seed).tensor(&shape, 1e6).unwrap();
        let back = decode_ltnt(&encode_ltnt(&t), None, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn pq_ignores_instance_relabeling(seed in 0u64..10_000, shift in 1u16..100) {
        let (pred, gt) = common::random_panoptic_pair(seed);
        let base = pq_stats(&pred, &gt, &common::things(), &common::stuff()).unwrap();
        // a bijection on nonzero ids that keeps 0 as void
        let relabel = |m: &PanopticMap| {
            let inst = m.instance.iter().map(|&i| if i == 0 { 0 } else { (i * 7 + shift) % 1000 + 1 }).collect();
            PanopticMap::new(m.height, m.width, m.class.clone(), inst).unwrap()
        };
        let moved = pq_stats(&relabel(&pred), &relabel(&gt), &common::things(), &common::stuff()).unwrap();
        prop_assert_eq!(base, moved);
    }

    #[test]
    fn perfect_prediction_scores_one(seed in 0u64..10_000) {
        let (_, gt) = common::random_panoptic_pair(seed);
        let s = pq_stats(&gt, &gt, &common::things(), &common::stuff()).unwrap();
        for c in s.per_class.values() {
            prop_assert_eq!((c.pq, c.sq, c.rq), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn lintention_branch_is_smaller(classes in 1usize..200, stage in 1usize..5, groups in 1usize..64) {
        let conv = CountingConvention::default();
        let mut cfg = BranchConfig::new(Variant::Baseline, 32, 32);
        cfg.num_classes = classes;
        cfg.stage_channels = 32 * stage;
        cfg.groups = groups;
        let base = branch_cost(&cfg, &conv).unwrap().totals;
        cfg.variant = Variant::Lintention;
        let lin = branch_cost(&cfg, &conv).unwrap().totals;
        prop_assert!(lin.params < base.params);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn output_covers_the_image(hb in 1usize..4, wb in 1usize..4, v in 0usize..5, seed: u64) {
        let variant = Variant::ALL[v];
        let mut cfg = common::small_config(variant, seed);
        (cfg.image_height, cfg.image_width) = (32 * hb, 32 * wb);
        let w = build_branch(&cfg).unwrap();
        let f = FpnFeatures::synthetic(seed, 1, 16, 32 * hb, 32 * wb).unwrap();
        prop_assert_eq!(branch_forward(&f, &w).unwrap().extents(), vec![1, 5, 32 * hb, 32 * wb]);
    }
}

#[test]
fn flops_are_below_baseline_at_full_size() {
    let conv = CountingConvention::default();
    let cost = |v| branch_cost(&BranchConfig::new(v, 960, 1280), &conv).unwrap().totals.flops;
    assert!(cost(Variant::Lintention) < cost(Variant::Baseline));
}

#[test]
fn single_level_pyramid_branch_equals_baseline() {
    let mut cfg = common::small_config(Variant::Pyconv, 3);
    cfg.pyconv = Some(PyConvConfig::single(cfg.stage_channels));
    let py = build_branch(&cfg).unwrap();
    let mut base = py.clone();
    base.config.variant = Variant::Baseline;
    for b in base.levels.iter_mut().flatten() {
        if let BlockWeights::ConvStage { op, .. } = b {
            op.kind = ConvOpKind::Standard;
        }
    }
    let f = FpnFeatures::synthetic(5, 1, 16, 64, 64).unwrap();
    assert_eq!(branch_forward(&f, &py).unwrap(), branch_forward(&f, &base).unwrap());
}

#[test]
fn gating_modes_coincide_on_single_level_branches() {
    let mut cfg = common::small_config(Variant::Verconv, 4);
    cfg.pyconv = Some(PyConvConfig::single(cfg.stage_channels));
    let collective = build_branch(&cfg).unwrap();
    let mut separate = collective.clone();
    separate.config.variant = Variant::Verconvsep;
    for b in separate.levels.iter_mut().flatten() {
        if let BlockWeights::ConvStage { op, .. } = b {
            op.kind = ConvOpKind::VerConvSep;
        }
    }
    let f = FpnFeatures::synthetic(6, 1, 16, 64, 64).unwrap();
    assert_eq!(branch_forward(&f, &collective).unwrap(), branch_forward(&f, &separate).unwrap());
}

#[test]
fn pq_matches_brute_force_on_many_maps() {
    for seed in 0..300 {
        let (pred, gt) = common::random_panoptic_pair(seed);
        let fast = pq_stats(&pred, &gt, &common::things(), &common::stuff()).unwrap();
        let brute = common::brute_force_pq(&pred, &gt);
        let fast: BTreeMap<u16, (usize, usize, usize)> =
            fast.per_class.iter().map(|(c, s)| (*c, (s.tp, s.fp, s.fneg))).collect();
        let brute: BTreeMap<u16, (usize, usize, usize)> = brute.iter().map(|(c, s)| (*c, (s.tp, s.fp, s.fneg))).collect();
        assert_eq!(fast, brute, "seed {seed}");
    }
}

#[test]
fn tensor_names_survive_round_trip() {
    let t = Tensor::new(&[("k", 2), ("h", 1)], vec![1.0, -2.5]).unwrap();
    let names = ["k".to_string(), "h".to_string()];
    let back = decode_ltnt(&encode_ltnt(&t), Some(&names), std::path::Path::new("mem")).unwrap();
    assert_eq!(back.axis_names(), vec!["k", "h"]);
}
