//! Central-difference gradient checking of [`Differentiable`] ops.
//!
//! The scalar probe is `<f(inputs), u>` for a seeded random upstream `u`.
//! Analytic gradients come from the op's vector-Jacobian product. Error
//! per input is norm-wise: `|a - d| / max(|a| + |d|, 1e-12)`.

use serde::Serialize;

use crate::autodiff::{Differentiable, Op};
use crate::error::{Error, Result};
use crate::lintention::{init_layer_params, LintentionLayerOp, LintentionOp, DEFAULT_EPS};
use crate::rng::SplitMix64Stream;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub op: String,
    /// Relative error for each input, in input order.
    pub input_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Checks every input's gradient of `op` at `inputs`.
pub fn gradcheck(op: &dyn Differentiable, inputs: &[Tensor], step: f64, tol: f64, seed: u64) -> Result<GradReport> {
    if !(step > 0.0 && tol > 0.0) {
        return Err(Error::Config(format!("step and tol must be positive, got {step} and {tol}")));
    }
    if inputs.iter().any(|t| !t.all_finite()) {
        return Err(Error::Numeric(format!("{}: non-finite input", op.name())));
    }
    let out = op.forward(inputs)?;
    let upstream = SplitMix64Stream::new(seed).tensor(
        &out.axes().iter().map(|a| (a.name.as_str(), a.extent)).collect::<Vec<_>>(),
        1.0,
    )?;
    let grads = op.vjp(inputs, &upstream)?;
    if grads.len() != inputs.len() {
        return Err(Error::Usage(format!(
            "{}: vjp returned {} gradients for {} inputs",
            op.name(),
            grads.len(),
            inputs.len()
        )));
    }
    let probe = |xs: &[Tensor]| -> Result<f64> {
        let y = op.forward(xs)?;
        let v = y.dot(&upstream)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric(format!("{}: non-finite output", op.name())))
        }
    };
    let mut work = inputs.to_vec();
    let mut input_errors = Vec::with_capacity(inputs.len());
    for (i, analytic) in grads.iter().enumerate() {
        if analytic.len() != inputs[i].len() || !analytic.all_finite() {
            return Err(Error::Numeric(format!("{}: gradient {i} is malformed or non-finite", op.name())));
        }
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, g) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = probe(&work)?;
            work[i].data_mut()[j] = orig - step;
            let down = probe(&work)?;
            work[i].data_mut()[j] = orig;
            *g = (up - down) / (2.0 * step);
        }
        let diff: Vec<f64> = analytic.data().iter().zip(&numeric).map(|(a, d)| a - d).collect();
        let denom = (norm(analytic.data()) + norm(&numeric)).max(1e-12);
        input_errors.push(norm(&diff) / denom);
    }
    let max_rel_error = input_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradReport {
        op: op.name(),
        input_errors,
        max_rel_error,
        tol,
        passed: max_rel_error < tol,
    })
}

/// Gradient checks of every differentiable op on small seeded inputs in
/// `[-1, 1]`.
pub fn gradcheck_suite(seed: u64, step: f64, tol: f64) -> Result<Vec<GradReport>> {
    let mut rng = SplitMix64Stream::new(seed);
    let mut cases: Vec<(Box<dyn Differentiable>, Vec<Tensor>)> = Vec::new();

    cases.push((
        Box::new(Op::Contract("nhwc,cd->nhwd".parse()?)),
        vec![
            rng.tensor(&[("n", 2), ("h", 2), ("w", 2), ("c", 3)], 1.0)?,
            rng.tensor(&[("c", 3), ("d", 2)], 1.0)?,
        ],
    ));
    cases.push((
        Box::new(Op::Contract("npc,nhwc->nhwp".parse()?)),
        vec![
            rng.tensor(&[("n", 2), ("p", 2), ("c", 3)], 1.0)?,
            rng.tensor(&[("n", 2), ("h", 2), ("w", 1), ("c", 3)], 1.0)?,
        ],
    ));
    cases.push((Box::new(Op::Softmax), vec![rng.tensor(&[("r", 3), ("p", 3)], 1.0)?]));
    cases.push((
        Box::new(Op::LayerNorm { eps: DEFAULT_EPS }),
        vec![
            rng.tensor(&[("r", 3), ("c", 3)], 1.0)?,
            rng.tensor(&[("c", 3)], 1.0)?,
            rng.tensor(&[("c", 3)], 1.0)?,
        ],
    ));
    cases.push((Box::new(Op::Upsample2x), vec![rng.tensor(&[("n", 1), ("c", 2), ("h", 3), ("w", 3)], 1.0)?]));
    cases.push((
        Box::new(Op::Conv2d { groups: 2 }),
        vec![
            rng.tensor(&[("n", 1), ("c", 4), ("h", 3), ("w", 3)], 1.0)?,
            rng.tensor(&[("o", 4), ("i", 2), ("kh", 3), ("kw", 3)], 1.0)?,
            rng.tensor(&[("o", 4)], 1.0)?,
        ],
    ));
    let layer = init_layer_params(rng.next_u64(), 2, 2)?;
    let x = rng.tensor(&[("n", 2), ("h", 2), ("w", 2), ("c", 2)], 1.0)?;
    cases.push((
        Box::new(LintentionOp),
        vec![x, layer.core.wq().clone(), layer.core.wk().clone(), layer.core.wv().clone()],
    ));
    // two-channel layer norm squashes every pixel to about +-1, which
    // makes the probe ill-conditioned, so the layer is checked at c = 4
    let layer = init_layer_params(rng.next_u64(), 4, 2)?;
    cases.push((
        Box::new(LintentionLayerOp { eps: DEFAULT_EPS }),
        vec![
            rng.tensor(&[("n", 2), ("h", 2), ("w", 2), ("c", 4)], 1.0)?,
            layer.core.wq().clone(),
            layer.core.wk().clone(),
            layer.core.wv().clone(),
            rng.tensor(&[("c", 4)], 1.0)?,
            rng.tensor(&[("c", 4)], 1.0)?,
        ],
    ));

    cases
        .iter()
        .enumerate()
        .map(|(i, (op, inputs))| gradcheck(op.as_ref(), inputs, step, tol, seed.wrapping_add(i as u64 + 1)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_near_exact() {
        let mut rng = SplitMix64Stream::new(0);
        let op = Op::Contract("ab,bc->ac".parse().unwrap());
        let inputs = vec![rng.tensor(&[("a", 2), ("b", 3)], 1.0).unwrap(), rng.tensor(&[("b", 3), ("c", 2)], 1.0).unwrap()];
        let r = gradcheck(&op, &inputs, DEFAULT_STEP, DEFAULT_TOL, 1).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn bad_step_is_rejected() {
        let t = Tensor::zeros(&[("r", 1), ("p", 2)]).unwrap();
        assert!(matches!(gradcheck(&Op::Softmax, &[t.clone()], 0.0, 1e-6, 0), Err(Error::Config(_))));
        let nan = t.with_data(vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(gradcheck(&Op::Softmax, &[nan], 1e-5, 1e-6, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn wrong_gradient_is_caught() {
        struct Broken;
        impl Differentiable for Broken {
            fn name(&self) -> String {
                "broken".into()
            }
            fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
                Ok(inputs[0].map(|v| v * v))
            }
            fn vjp(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
                Ok(vec![inputs[0].zip_with(upstream, |x, u| x * u)?])
            }
        }
        let x = SplitMix64Stream::new(4).tensor(&[("r", 5)], 1.0).unwrap();
        let r = gradcheck(&Broken, &[x], DEFAULT_STEP, DEFAULT_TOL, 2).unwrap();
        assert!(!r.passed);
    }
}
