//! Independent oracles: loop-level references, a quadratic self-attention
//! foil, an instrumented executor and gradient checking.

mod counted;
mod gradcheck;
mod naive;
mod scaling;

pub use counted::{
    counted_lintention, counted_run, counted_self_attention, lintention_program, run_uncounted, self_attention_program,
    CountedExecution, CountedOp, Node, OpLog, Program,
};
pub use gradcheck::{gradcheck, gradcheck_suite, GradReport, DEFAULT_STEP, DEFAULT_TOL};
pub use naive::{
    naive_block, naive_branch_forward, naive_conv2d, naive_conv_kernel, naive_group_norm, naive_layer_norm,
    naive_lintention, naive_lintention_layer, naive_pyconv, naive_relu, naive_se_gate, naive_upsample, naive_verconv,
    standard_self_attention,
};
pub use scaling::{factor_hw, loglog_slope, scaling_point, Mechanism, ScalingPoint};

use serde::Serialize;

use crate::cost::{closed_form, closed_form_totals, CountingConvention, GENERATORS};
use crate::error::Result;
use crate::lintention::init_params;
use crate::rng::SplitMix64Stream;

/// The first disagreement between counted and closed-form complexity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Mismatch {
    /// A generator name or `total`.
    pub generator: String,
    /// `[n, h, w, c, p]`.
    pub dims: [usize; 5],
    /// `flops` or `scalars`.
    pub metric: String,
    pub expected: u64,
    pub counted: u64,
}

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let [n, h, w, c, p] = self.dims;
        write!(
            f,
            "{} at n={n} h={h} w={w} c={c} p={p}: counted {} {} but closed form gives {}",
            self.generator, self.metric, self.counted, self.expected
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ClosedFormReport {
    pub max_extent: usize,
    pub checked: usize,
    pub passed: usize,
    pub first_failure: Option<Mismatch>,
}

impl ClosedFormReport {
    pub fn ok(&self) -> bool {
        self.passed == self.checked
    }
}

fn compare(generator: &str, dims: [usize; 5], got: (u64, u64), expected: (u64, u64)) -> Option<Mismatch> {
    let mk = |metric: &str, counted, expected| Mismatch {
        generator: generator.into(),
        dims,
        metric: metric.into(),
        expected,
        counted,
    };
    if got.0 != expected.0 {
        Some(mk("flops", got.0, expected.0))
    } else if got.1 != expected.1 {
        Some(mk("scalars", got.1, expected.1))
    } else {
        None
    }
}

/// Runs the counted Lintention program for every `(n, h, w, c, p)` with
/// extents in `1..=max_extent` and compares per-generator FLOPs and
/// scalars, then totals, against the closed forms.
pub fn verify_closed_forms(max_extent: usize, conv: &CountingConvention) -> Result<ClosedFormReport> {
    if max_extent == 0 {
        return Err(crate::Error::Config("max extent must be at least 1".into()));
    }
    let mut rng = SplitMix64Stream::new(0);
    let mut report = ClosedFormReport {
        max_extent,
        checked: 0,
        passed: 0,
        first_failure: None,
    };
    let range = 1..=max_extent;
    for n in range.clone() {
        for h in range.clone() {
            for w in range.clone() {
                for c in range.clone() {
                    for p in range.clone() {
                        let dims = [n, h, w, c, p];
                        let params = init_params(rng.next_u64(), c, p)?;
                        let x = rng.tensor(&[("n", n), ("h", h), ("w", w), ("c", c)], 1.0)?;
                        let run = counted_lintention(&x, &params, conv)?;
                        let d = dims.map(|v| v as u64);
                        let mut failure = GENERATORS.iter().find_map(|g| {
                            let (f, s, _) = closed_form(g, d[0], d[1], d[2], d[3], d[4])?;
                            compare(g, dims, run.stage_totals(g), (f, s))
                        });
                        if failure.is_none() {
                            let (t, s, _) = closed_form_totals(d[0], d[1], d[2], d[3], d[4]);
                            failure = compare("total", dims, (run.flops, run.peak_scalars), (t, s));
                        }
                        report.checked += 1;
                        match failure {
                            None => report.passed += 1,
                            Some(m) => {
                                report.first_failure.get_or_insert(m);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extent_three_covers_243_cases() {
        let r = verify_closed_forms(3, &CountingConvention::default()).unwrap();
        assert_eq!((r.checked, r.passed), (243, 243));
    }

    #[test]
    fn corrupted_convention_names_generator() {
        let conv = CountingConvention {
            softmax_exp: 2,
            ..CountingConvention::default()
        };
        let r = verify_closed_forms(1, &conv).unwrap();
        assert!(!r.ok());
        let m = r.first_failure.unwrap();
        assert_eq!((m.generator.as_str(), m.metric.as_str()), ("KG", "flops"));
        assert!(m.to_string().starts_with("KG at n=1"));
    }
}
