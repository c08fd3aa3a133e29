//! Dense row-major tensors with named axes.
//!
//! Axis names are metadata: operations address axes either positionally
//! (contractions) or by name (`h`/`w` for spatial ops). Names within one
//! tensor are unique and every extent is at least one.

use std::fmt;

use crate::error::{Error, Result};

/// One named axis of a tensor.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Axis {
    pub name: String,
    pub extent: usize,
}

impl Axis {
    pub fn new(name: impl Into<String>, extent: usize) -> Self {
        Self {
            name: name.into(),
            extent,
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    axes: Vec<Axis>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shape: Vec<String> = self
            .axes
            .iter()
            .map(|a| format!("{}={}", a.name, a.extent))
            .collect();
        write!(f, "Tensor[{}]", shape.join(", "))?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn validate_axes(axes: &[Axis]) -> Result<usize> {
    let mut len = 1usize;
    for (i, axis) in axes.iter().enumerate() {
        if axis.extent == 0 {
            return Err(Error::dim(&axis.name, "extent must be at least 1"));
        }
        if axes[..i].iter().any(|a| a.name == axis.name) {
            return Err(Error::dim(&axis.name, "axis name appears twice"));
        }
        len = len
            .checked_mul(axis.extent)
            .ok_or_else(|| Error::dim(&axis.name, "element count overflows usize"))?;
    }
    Ok(len)
}

impl Tensor {
    /// Builds a tensor from `(name, extent)` pairs and row-major data.
    pub fn new<S: AsRef<str>>(shape: &[(S, usize)], data: Vec<f64>) -> Result<Self> {
        let axes = shape
            .iter()
            .map(|(n, e)| Axis::new(n.as_ref(), *e))
            .collect();
        Self::from_axes(axes, data)
    }

    pub fn from_axes(axes: Vec<Axis>, data: Vec<f64>) -> Result<Self> {
        let len = validate_axes(&axes)?;
        if len != data.len() {
            return Err(Error::dim(
                axes.last().map(|a| a.name.as_str()).unwrap_or("<scalar>"),
                format!("shape implies {len} elements, got {}", data.len()),
            ));
        }
        Ok(Self { axes, data })
    }

    pub fn zeros<S: AsRef<str>>(shape: &[(S, usize)]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn full<S: AsRef<str>>(shape: &[(S, usize)], value: f64) -> Result<Self> {
        let len = shape.iter().map(|(_, e)| *e).product();
        Self::new(shape, vec![value; len])
    }

    /// Builds a tensor whose entries are `f(flat_index)`.
    pub fn from_fn<S: AsRef<str>>(shape: &[(S, usize)], f: impl FnMut(usize) -> f64) -> Result<Self> {
        let len = shape.iter().map(|(_, e)| *e).product();
        Self::new(shape, (0..len).map(f).collect())
    }

    /// A tensor with the same axes and fresh data.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::from_axes(self.axes.clone(), data)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            axes: self.axes.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn rank(&self) -> usize {
        self.axes.len()
    }

    pub fn extents(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.extent).collect()
    }

    pub fn axis_names(&self) -> Vec<&str> {
        self.axes.iter().map(|a| a.name.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Position of the axis called `name`.
    pub fn axis_index(&self, name: &str) -> Result<usize> {
        self.axes
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| Error::dim(name, format!("no such axis in {:?}", self.axis_names())))
    }

    pub fn extent(&self, name: &str) -> Result<usize> {
        Ok(self.axes[self.axis_index(name)?].extent)
    }

    /// Row-major strides, in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.axes.len()];
        for i in (0..self.axes.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.axes[i + 1].extent;
        }
        strides
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.axes.len());
        index
            .iter()
            .zip(self.strides())
            .map(|(i, s)| i * s)
            .sum()
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    /// Renames a single axis in place. The new name must not already exist.
    pub fn rename(mut self, from: &str, to: &str) -> Result<Self> {
        let i = self.axis_index(from)?;
        if from != to && self.axes.iter().any(|a| a.name == to) {
            return Err(Error::dim(to, "rename target already present"));
        }
        self.axes[i].name = to.to_string();
        Ok(self)
    }

    /// Replaces all axis names, keeping extents.
    pub fn with_names<S: AsRef<str>>(mut self, names: &[S]) -> Result<Self> {
        if names.len() != self.axes.len() {
            return Err(Error::dim(
                "<rank>",
                format!("expected {} names, got {}", self.axes.len(), names.len()),
            ));
        }
        for (axis, name) in self.axes.iter_mut().zip(names) {
            axis.name = name.as_ref().to_string();
        }
        validate_axes(&self.axes)?;
        Ok(self)
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape<S: AsRef<str>>(self, shape: &[(S, usize)]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Reorders axes to match `order` (a permutation of the current names).
    pub fn permute<S: AsRef<str>>(&self, order: &[S]) -> Result<Self> {
        if order.len() != self.rank() {
            return Err(Error::dim(
                "<rank>",
                format!("permutation of length {} for rank {}", order.len(), self.rank()),
            ));
        }
        let perm: Vec<usize> = order
            .iter()
            .map(|n| self.axis_index(n.as_ref()))
            .collect::<Result<_>>()?;
        let axes: Vec<Axis> = perm.iter().map(|&i| self.axes[i].clone()).collect();
        validate_axes(&axes)?;
        let src_strides = self.strides();
        let strides: Vec<usize> = perm.iter().map(|&i| src_strides[i]).collect();
        let extents: Vec<usize> = axes.iter().map(|a| a.extent).collect();
        let mut out = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; extents.len()];
        let mut off = 0usize;
        for _ in 0..self.len() {
            out.push(self.data[off]);
            for d in (0..extents.len()).rev() {
                idx[d] += 1;
                off += strides[d];
                if idx[d] < extents[d] {
                    break;
                }
                off -= strides[d] * extents[d];
                idx[d] = 0;
            }
        }
        Self::from_axes(axes, out)
    }

    /// Elementwise map into a tensor of the same shape.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            axes: self.axes.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|v| alpha * v)
    }

    /// Elementwise combination of two same-shaped tensors.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        Ok(Self {
            axes: self.axes.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Sum of elementwise products.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.extents() != other.extents() {
            return Err(Error::dim(
                "<shape>",
                format!("{:?} vs {:?}", self.axes, other.axes),
            ));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Concatenates tensors along the named axis. All other axes must agree.
    pub fn concat(parts: &[Tensor], axis: &str) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let ax = first.axis_index(axis)?;
        for p in parts {
            if p.rank() != first.rank() || p.axis_index(axis)? != ax {
                return Err(Error::dim(axis, "concat operands have different layouts"));
            }
            for (i, (a, b)) in p.axes.iter().zip(&first.axes).enumerate() {
                if i != ax && a.extent != b.extent {
                    return Err(Error::dim(&a.name, "concat operands disagree off-axis"));
                }
            }
        }
        let outer: usize = first.axes[..ax].iter().map(|a| a.extent).product();
        let inner: usize = first.axes[ax + 1..].iter().map(|a| a.extent).product();
        let total: usize = parts.iter().map(|p| p.axes[ax].extent).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let block = p.axes[ax].extent * inner;
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        let mut axes = first.axes.clone();
        axes[ax].extent = total;
        Tensor::from_axes(axes, data)
    }

    /// Splits along the named axis into consecutive pieces of the given extents.
    pub fn split(&self, axis: &str, sizes: &[usize]) -> Result<Vec<Tensor>> {
        let ax = self.axis_index(axis)?;
        if sizes.iter().sum::<usize>() != self.axes[ax].extent {
            return Err(Error::dim(axis, "split sizes do not sum to the extent"));
        }
        let outer: usize = self.axes[..ax].iter().map(|a| a.extent).product();
        let inner: usize = self.axes[ax + 1..].iter().map(|a| a.extent).product();
        let full = self.axes[ax].extent * inner;
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            let mut data = Vec::with_capacity(outer * s * inner);
            for o in 0..outer {
                let base = o * full + start * inner;
                data.extend_from_slice(&self.data[base..base + s * inner]);
            }
            let mut axes = self.axes.clone();
            axes[ax].extent = s;
            out.push(Tensor::from_axes(axes, data)?);
            start += s;
        }
        Ok(out)
    }
}
