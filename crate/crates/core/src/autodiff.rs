//! Reverse-mode vector-Jacobian products for the tensor operators.

use std::fmt;
use std::str::FromStr;

use crate::einsum::{broadcast_to, contract, EinsumSpec};
use crate::error::{Error, Result};
use crate::ops::{self, ConvKernel};
use crate::tensor::Tensor;

/// Anything with a forward pass and a matching vector-Jacobian product.
pub trait Differentiable {
    fn name(&self) -> String;

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor>;

    /// Gradient of `<forward(inputs), upstream>` w.r.t. each input.
    fn vjp(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>>;
}

/// The primitive operators that support `vjp`.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Contract(EinsumSpec),
    Softmax,
    /// Inputs: tensor, gamma, beta (the latter two rank 1).
    LayerNorm { eps: f64 },
    Upsample2x,
    /// Inputs: `(n, c, h, w)` tensor, `(o, i, kh, kw)` weights, optional bias.
    Conv2d { groups: usize },
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Contract(spec) => write!(f, "contract:{spec}"),
            Op::Softmax => write!(f, "softmax"),
            Op::LayerNorm { eps } => write!(f, "layer_norm:{eps}"),
            Op::Upsample2x => write!(f, "upsample2x"),
            Op::Conv2d { groups } => write!(f, "conv2d:{groups}"),
        }
    }
}

impl FromStr for Op {
    type Err = Error;

    /// Parses ids such as `contract:nhwc,cd->nhwd`, `softmax`,
    /// `layer_norm:1e-5`, `upsample2x`, `conv2d:2`.
    fn from_str(s: &str) -> Result<Self> {
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let bad_arg = || Error::Usage(format!("bad argument in op id `{s}`"));
        match (head, arg) {
            ("contract", Some(spec)) => Ok(Op::Contract(spec.parse()?)),
            ("softmax", None) => Ok(Op::Softmax),
            ("layer_norm", None) => Ok(Op::LayerNorm { eps: 1e-5 }),
            ("layer_norm", Some(e)) => Ok(Op::LayerNorm {
                eps: e.parse().map_err(|_| bad_arg())?,
            }),
            ("upsample2x", None) => Ok(Op::Upsample2x),
            ("conv2d", None) => Ok(Op::Conv2d { groups: 1 }),
            ("conv2d", Some(g)) => Ok(Op::Conv2d {
                groups: g.parse().map_err(|_| bad_arg())?,
            }),
            _ => Err(Error::Usage(format!("unknown op id `{s}`"))),
        }
    }
}

fn arity(op: &Op, inputs: &[Tensor], allowed: &[usize]) -> Result<()> {
    if allowed.contains(&inputs.len()) {
        Ok(())
    } else {
        Err(Error::Usage(format!(
            "{op} takes {allowed:?} inputs, got {}",
            inputs.len()
        )))
    }
}

fn conv_kernel(groups: usize, inputs: &[Tensor]) -> Result<ConvKernel> {
    let bias = inputs.get(2).map(|b| b.data().to_vec());
    ConvKernel::new(inputs[1].clone(), groups, bias)
}

/// Applies `op` to `inputs`.
pub fn apply(op: &Op, inputs: &[Tensor]) -> Result<Tensor> {
    match op {
        Op::Contract(spec) => {
            arity(op, inputs, &[2])?;
            contract(spec, &inputs[0], &inputs[1])
        }
        Op::Softmax => {
            arity(op, inputs, &[1])?;
            ops::softmax_lastdim(&inputs[0])
        }
        Op::LayerNorm { eps } => {
            arity(op, inputs, &[3])?;
            ops::layer_norm(&inputs[0], inputs[1].data(), inputs[2].data(), *eps)
        }
        Op::Upsample2x => {
            arity(op, inputs, &[1])?;
            ops::bilinear_upsample2x(&inputs[0])
        }
        Op::Conv2d { groups } => {
            arity(op, inputs, &[2, 3])?;
            ops::conv2d(&inputs[0], &conv_kernel(*groups, inputs)?)
        }
    }
}

/// Vector-Jacobian product of `op` at `inputs`, one gradient per input.
pub fn vjp(op: &Op, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
    match op {
        Op::Contract(spec) => {
            arity(op, inputs, &[2])?;
            let (a, b) = (&inputs[0], &inputs[1]);
            let out_axes = spec.output_axes(a, b)?;
            if upstream.extents() != out_axes.iter().map(|x| x.extent).collect::<Vec<_>>() {
                return Err(Error::dim("<shape>", "upstream does not match contraction output"));
            }
            let ga = contract(&spec.lhs_grad_spec(), upstream, b)?;
            let gb = contract(&spec.rhs_grad_spec(), upstream, a)?;
            Ok(vec![
                broadcast_to(&ga, a.axes(), spec.lhs())?,
                broadcast_to(&gb, b.axes(), spec.rhs())?,
            ])
        }
        Op::Softmax => {
            arity(op, inputs, &[1])?;
            let s = ops::softmax_lastdim(&inputs[0])?;
            s.check_same_shape(upstream)?;
            Ok(vec![softmax_vjp(&s, upstream)?])
        }
        Op::LayerNorm { eps } => {
            arity(op, inputs, &[3])?;
            inputs[0].check_same_shape(upstream)?;
            let (gx, gg, gb) = layer_norm_vjp(&inputs[0], inputs[1].data(), *eps, upstream)?;
            Ok(vec![gx, inputs[1].with_data(gg)?, inputs[2].with_data(gb)?])
        }
        Op::Upsample2x => {
            arity(op, inputs, &[1])?;
            Ok(vec![ops::bilinear_upsample_adjoint(&inputs[0], upstream, 2)?])
        }
        Op::Conv2d { groups } => {
            arity(op, inputs, &[2, 3])?;
            let k = conv_kernel(*groups, inputs)?;
            let (gx, gw, gb) = ops::conv2d_vjp(&inputs[0], &k, upstream)?;
            let mut grads = vec![gx, inputs[1].with_data(gw.into_data())?];
            if let Some(gb) = gb {
                grads.push(inputs[2].with_data(gb)?);
            }
            Ok(grads)
        }
    }
}

impl Differentiable for Op {
    fn name(&self) -> String {
        self.to_string()
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        apply(self, inputs)
    }

    fn vjp(&self, inputs: &[Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        vjp(self, inputs, upstream)
    }
}

/// Backward of softmax given its output `s`: `s * (u - <u, s>)` per row.
pub(crate) fn softmax_vjp(s: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    let p = s.axes().last().map(|a| a.extent).unwrap_or(1);
    let mut g = Vec::with_capacity(s.len());
    for (srow, urow) in s.data().chunks(p).zip(upstream.data().chunks(p)) {
        let dot: f64 = srow.iter().zip(urow).map(|(a, b)| a * b).sum();
        g.extend(srow.iter().zip(urow).map(|(si, ui)| si * (ui - dot)));
    }
    s.with_data(g)
}

/// Backward of layer norm: gradients for input, gamma and beta.
pub(crate) fn layer_norm_vjp(
    x: &Tensor,
    gamma: &[f64],
    eps: f64,
    upstream: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let c = gamma.len();
    let mut gx = Vec::with_capacity(x.len());
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    for (row, urow) in x.data().chunks(c).zip(upstream.data().chunks(c)) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
        let dxhat: Vec<f64> = urow.iter().zip(gamma).map(|(u, g)| u * g).collect();
        let sum_d: f64 = dxhat.iter().sum();
        let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum();
        for i in 0..c {
            gg[i] += urow[i] * xhat[i];
            gb[i] += urow[i];
            gx.push(inv / c as f64 * (c as f64 * dxhat[i] - sum_d - xhat[i] * sum_dx));
        }
    }
    Ok((x.with_data(gx)?, gg, gb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_contract_passes_upstream_through() {
        let x = Tensor::from_fn(&[("n", 1), ("h", 2), ("w", 2), ("c", 3)], |i| i as f64).unwrap();
        let eye = Tensor::from_fn(&[("c", 3), ("d", 3)], |i| if i % 4 == 0 { 1.0 } else { 0.0 }).unwrap();
        let u = Tensor::from_fn(&[("n", 1), ("h", 2), ("w", 2), ("d", 3)], |i| (i as f64).cos()).unwrap();
        let op: Op = "contract:nhwc,cd->nhwd".parse().unwrap();
        let g = vjp(&op, &[x, eye], &u).unwrap();
        assert_eq!(g[0].data(), u.data());
        assert_eq!(g[0].axis_names(), vec!["n", "h", "w", "c"]);
    }

    #[test]
    fn softmax_uniform_jacobian() {
        let t = Tensor::new(&[("p", 2)], vec![0.3, 0.3]).unwrap();
        let u = Tensor::new(&[("p", 2)], vec![1.0, 0.0]).unwrap();
        let g = vjp(&Op::Softmax, &[t], &u).unwrap();
        assert!((g[0].data()[0] - 0.25).abs() < 1e-15);
        assert!((g[0].data()[1] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn unknown_op_id_is_usage_error() {
        assert!(matches!("gelu".parse::<Op>(), Err(Error::Usage(_))));
        assert!(matches!("conv2d:x".parse::<Op>(), Err(Error::Usage(_))));
        let op: Op = "layer_norm:1e-6".parse().unwrap();
        assert_eq!(op, Op::LayerNorm { eps: 1e-6 });
    }

    #[test]
    fn wrong_arity_is_usage_error() {
        let t = Tensor::zeros(&[("p", 2)]).unwrap();
        assert!(matches!(vjp(&Op::Softmax, &[t.clone(), t.clone()], &t), Err(Error::Usage(_))));
    }
}
