//! Binary tensor contraction in extended Einstein notation.
//!
//! A spec such as `nhwc,cd->nhwd` labels the axes of both operands
//! positionally. Labels missing from the output are summed; labels present
//! in the output and in both inputs are batched. Summation runs over the
//! contracted labels in ascending row-major order so results are
//! reproducible bit for bit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Axis, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct EinsumSpec {
    lhs: Vec<char>,
    rhs: Vec<char>,
    out: Vec<char>,
}

impl EinsumSpec {
    pub fn new(lhs: &str, rhs: &str, out: &str) -> Result<Self> {
        let spec = Self {
            lhs: lhs.chars().collect(),
            rhs: rhs.chars().collect(),
            out: out.chars().collect(),
        };
        spec.check_labels()?;
        Ok(spec)
    }

    pub fn lhs(&self) -> &[char] {
        &self.lhs
    }

    pub fn rhs(&self) -> &[char] {
        &self.rhs
    }

    pub fn out(&self) -> &[char] {
        &self.out
    }

    fn check_labels(&self) -> Result<()> {
        for (what, labels) in [("lhs", &self.lhs), ("rhs", &self.rhs), ("output", &self.out)] {
            for (i, c) in labels.iter().enumerate() {
                if !c.is_ascii_alphabetic() {
                    return Err(Error::Usage(format!("bad label {c:?} in {what} subscripts")));
                }
                if labels[..i].contains(c) {
                    return Err(Error::Usage(format!(
                        "label `{c}` repeated in {what} subscripts (traces are not supported)"
                    )));
                }
            }
        }
        if let Some(c) = self
            .out
            .iter()
            .find(|c| !self.lhs.contains(c) && !self.rhs.contains(c))
        {
            return Err(Error::Usage(format!("output label `{c}` appears in no input")));
        }
        Ok(())
    }

    /// Labels summed over: present in an input but not in the output, in
    /// order of first appearance.
    pub fn contracted(&self) -> Vec<char> {
        let mut labels = Vec::new();
        for &c in self.lhs.iter().chain(&self.rhs) {
            if !self.out.contains(&c) && !labels.contains(&c) {
                labels.push(c);
            }
        }
        labels
    }

    /// Extent of every label, checked for consistency across both operands.
    fn label_extents(&self, a: &Tensor, b: &Tensor) -> Result<Vec<(char, usize)>> {
        for (labels, t, side) in [(&self.lhs, a, "lhs"), (&self.rhs, b, "rhs")] {
            if labels.len() != t.rank() {
                return Err(Error::dim(
                    "<rank>",
                    format!(
                        "{side} subscripts have {} labels but the tensor has rank {} ({:?})",
                        labels.len(),
                        t.rank(),
                        t.axis_names()
                    ),
                ));
            }
        }
        let mut extents: Vec<(char, usize, String)> = Vec::new();
        for (labels, t) in [(&self.lhs, a), (&self.rhs, b)] {
            for (c, axis) in labels.iter().zip(t.axes()) {
                match extents.iter().find(|(l, _, _)| l == c) {
                    Some((_, e, name)) if *e != axis.extent => {
                        return Err(Error::dim(
                            format!("{c}"),
                            format!(
                                "extent {} (axis `{}`) disagrees with {} (axis `{}`)",
                                axis.extent, axis.name, e, name
                            ),
                        ));
                    }
                    Some(_) => {}
                    None => extents.push((*c, axis.extent, axis.name.clone())),
                }
            }
        }
        Ok(extents.into_iter().map(|(c, e, _)| (c, e)).collect())
    }

    /// Output shape for operands `a` and `b`.
    pub fn output_axes(&self, a: &Tensor, b: &Tensor) -> Result<Vec<Axis>> {
        let extents = self.label_extents(a, b)?;
        Ok(self
            .out
            .iter()
            .map(|c| {
                let e = extents.iter().find(|(l, _)| l == c).map(|(_, e)| *e).unwrap_or(1);
                Axis::new(c.to_string(), e)
            })
            .collect())
    }

    /// Number of multiply-accumulates the contraction performs.
    pub fn mac_count(&self, a: &Tensor, b: &Tensor) -> Result<u64> {
        let extents = self.label_extents(a, b)?;
        Ok(extents.iter().map(|(_, e)| *e as u64).product())
    }

    /// The spec computing the gradient of the lhs operand from the upstream
    /// gradient and the rhs, restricted to labels that survive.
    pub(crate) fn lhs_grad_spec(&self) -> Self {
        let target: Vec<char> = self
            .lhs
            .iter()
            .copied()
            .filter(|c| self.out.contains(c) || self.rhs.contains(c))
            .collect();
        Self {
            lhs: self.out.clone(),
            rhs: self.rhs.clone(),
            out: target,
        }
    }

    pub(crate) fn rhs_grad_spec(&self) -> Self {
        let target: Vec<char> = self
            .rhs
            .iter()
            .copied()
            .filter(|c| self.out.contains(c) || self.lhs.contains(c))
            .collect();
        Self {
            lhs: self.out.clone(),
            rhs: self.lhs.clone(),
            out: target,
        }
    }
}

impl fmt::Display for EinsumSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = |v: &[char]| v.iter().collect::<String>();
        write!(f, "{},{}->{}", s(&self.lhs), s(&self.rhs), s(&self.out))
    }
}

impl FromStr for EinsumSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (inputs, out) = s
            .split_once("->")
            .ok_or_else(|| Error::Usage(format!("einsum spec `{s}` lacks `->`")))?;
        let (lhs, rhs) = inputs
            .split_once(',')
            .ok_or_else(|| Error::Usage(format!("einsum spec `{s}` needs two operands")))?;
        if rhs.contains(',') {
            return Err(Error::Usage(format!("einsum spec `{s}` has more than two operands")));
        }
        Self::new(lhs.trim(), rhs.trim(), out.trim())
    }
}

impl TryFrom<String> for EinsumSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EinsumSpec> for String {
    fn from(spec: EinsumSpec) -> String {
        spec.to_string()
    }
}

/// Contracts `a` and `b` according to `spec`.
///
/// The result's axes are named after the output labels.
pub fn contract(spec: &EinsumSpec, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let extents = spec.label_extents(a, b)?;
    let extent_of = |c: char| extents.iter().find(|(l, _)| *l == c).map(|(_, e)| *e).unwrap();
    let stride_in = |labels: &[char], t: &Tensor, c: char| -> usize {
        labels
            .iter()
            .position(|&l| l == c)
            .map(|i| t.strides()[i])
            .unwrap_or(0)
    };

    let out_ext: Vec<usize> = spec.out.iter().map(|&c| extent_of(c)).collect();
    let out_sa: Vec<usize> = spec.out.iter().map(|&c| stride_in(&spec.lhs, a, c)).collect();
    let out_sb: Vec<usize> = spec.out.iter().map(|&c| stride_in(&spec.rhs, b, c)).collect();

    let summed = spec.contracted();
    let sum_ext: Vec<usize> = summed.iter().map(|&c| extent_of(c)).collect();
    let sum_sa: Vec<usize> = summed.iter().map(|&c| stride_in(&spec.lhs, a, c)).collect();
    let sum_sb: Vec<usize> = summed.iter().map(|&c| stride_in(&spec.rhs, b, c)).collect();
    let sum_len: usize = sum_ext.iter().product();

    let out_len: usize = out_ext.iter().product();
    let ad = a.data();
    let bd = b.data();
    let mut data = Vec::with_capacity(out_len);

    let mut oidx = vec![0usize; out_ext.len()];
    let (mut obase_a, mut obase_b) = (0usize, 0usize);
    let mut sidx = vec![0usize; sum_ext.len()];
    for _ in 0..out_len {
        let mut acc = 0.0;
        let (mut oa, mut ob) = (obase_a, obase_b);
        for _ in 0..sum_len {
            acc += ad[oa] * bd[ob];
            odometer_step(&mut sidx, &sum_ext, &sum_sa, &sum_sb, &mut oa, &mut ob);
        }
        data.push(acc);
        odometer_step(&mut oidx, &out_ext, &out_sa, &out_sb, &mut obase_a, &mut obase_b);
    }

    let axes = spec
        .out
        .iter()
        .zip(&out_ext)
        .map(|(c, &e)| Axis::new(c.to_string(), e))
        .collect();
    Tensor::from_axes(axes, data)
}

/// Advances a row-major multi-index, keeping two linear offsets in sync.
/// Wraps to all zeros after the last position.
#[inline]
fn odometer_step(
    idx: &mut [usize],
    ext: &[usize],
    sa: &[usize],
    sb: &[usize],
    oa: &mut usize,
    ob: &mut usize,
) {
    for d in (0..idx.len()).rev() {
        idx[d] += 1;
        *oa += sa[d];
        *ob += sb[d];
        if idx[d] < ext[d] {
            return;
        }
        *oa -= sa[d] * ext[d];
        *ob -= sb[d] * ext[d];
        idx[d] = 0;
    }
}

/// Repeats `t` along axes of `target` it lacks. `t`'s axes must appear in
/// `target` in the same relative order.
pub(crate) fn broadcast_to(t: &Tensor, target: &[Axis], labels: &[char]) -> Result<Tensor> {
    let present: Vec<char> = t
        .axis_names()
        .iter()
        .map(|n| n.chars().next().unwrap_or('?'))
        .collect();
    if present.len() == labels.len() {
        return Tensor::from_axes(target.to_vec(), t.data().to_vec());
    }
    let strides = t.strides();
    let src_strides: Vec<usize> = labels
        .iter()
        .map(|c| present.iter().position(|p| p == c).map(|i| strides[i]).unwrap_or(0))
        .collect();
    let ext: Vec<usize> = target.iter().map(|a| a.extent).collect();
    let len: usize = ext.iter().product();
    let mut data = Vec::with_capacity(len);
    let mut idx = vec![0usize; ext.len()];
    let (mut off, mut dummy) = (0usize, 0usize);
    let zeros = vec![0usize; ext.len()];
    for _ in 0..len {
        data.push(t.data()[off]);
        odometer_step(&mut idx, &ext, &src_strides, &zeros, &mut off, &mut dummy);
    }
    Tensor::from_axes(target.to_vec(), data)
}
