//! Counted runs at growing pixel counts and a log-log slope fit.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::cost::CountingConvention;
use crate::error::{Error, Result};
use crate::lintention::init_params;
use crate::rng::SplitMix64Stream;

use super::counted::{counted_lintention, counted_self_attention};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mechanism {
    Lintention,
    SelfAttention,
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lintention" => Ok(Mechanism::Lintention),
            "selfatt" => Ok(Mechanism::SelfAttention),
            _ => Err(Error::Usage(format!("unknown mechanism `{s}` (expected lintention or selfatt)"))),
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::Lintention => "lintention",
            Mechanism::SelfAttention => "selfatt",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ScalingPoint {
    pub hw: usize,
    pub counted_flops: u64,
    pub wall_ns: u128,
    pub peak_scalars: u64,
}

/// Splits `hw` into the most square `(h, w)` with `h <= w`.
pub fn factor_hw(hw: usize) -> (usize, usize) {
    let mut h = (hw as f64).sqrt() as usize;
    while h > 1 && hw % h != 0 {
        h -= 1;
    }
    let h = h.max(1);
    (h, hw / h)
}

/// One counted run of `mechanism` on a seeded `(1, h, w, channels)` input.
pub fn scaling_point(
    mechanism: Mechanism,
    hw: usize,
    channels: usize,
    groups: usize,
    seed: u64,
    conv: &CountingConvention,
) -> Result<ScalingPoint> {
    if hw == 0 || channels == 0 || groups == 0 {
        return Err(Error::Config("sizes, channels and groups must be positive".into()));
    }
    let (h, w) = factor_hw(hw);
    let mut rng = SplitMix64Stream::new(seed);
    let x = rng.tensor(&[("n", 1), ("h", h), ("w", w), ("c", channels)], 1.0)?;
    let start = Instant::now();
    let run = match mechanism {
        Mechanism::Lintention => {
            let params = init_params(rng.next_u64(), channels, groups)?;
            counted_lintention(&x, &params, conv)?
        }
        Mechanism::SelfAttention => {
            let bound = 1.0 / (channels as f64).sqrt();
            let mut m = || rng.tensor(&[("c", channels), ("d", channels)], bound);
            let (wq, wk, wv) = (m()?, m()?, m()?);
            counted_self_attention(&x, &wq, &wk, &wv, conv)?
        }
    };
    Ok(ScalingPoint {
        hw,
        counted_flops: run.flops,
        wall_ns: start.elapsed().as_nanos(),
        peak_scalars: run.peak_scalars,
    })
}

/// Least-squares slope of `ln y` against `ln x`; `None` for fewer than two
/// distinct `x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        return None;
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (logs.len() >= 2 && sxx > 0.0).then(|| sxy / sxx)
}
