//! Strided N-d tensors of [`Scalar`] values and the primitive kernels built on them.
//!
//! Feature maps are channel-last (`H×W×C` or `D×H×W×C`); token matrices are
//! `L×C`. View operations (reshape of contiguous data, permute, slice) share
//! the underlying buffer; anything else materializes a fresh row-major copy.

mod io;
pub mod kernels;

use std::borrow::Cow;
use std::fmt;
use std::sync::Arc;

use crate::error::{arg_err, shape_err, Result};
use crate::scalar::Scalar;

pub use io::{read_ndt1, read_ndt1_file, write_ndt1, write_ndt1_file};

#[derive(Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    strides: Vec<usize>,
    offset: usize,
    data: Arc<Vec<T>>,
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &n) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= n;
    }
    strides
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {shape:?} holds {n} elements but buffer has {}",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            strides: row_major_strides(shape),
            offset: 0,
            data: Arc::new(data),
        })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).unwrap()
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::new(&[], vec![value]).unwrap()
    }

    /// Builds a tensor by evaluating `f` at every multi-index in row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            advance(&mut idx, shape);
        }
        Self::new(shape, data).unwrap()
    }

    /// Converts from `f64` values, e.g. frozen expected results.
    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Extent of the trailing (channel) axis; 1 for rank-0 tensors.
    pub fn channels(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn is_contiguous(&self) -> bool {
        let mut expected = 1;
        for (&n, &s) in self.shape.iter().zip(&self.strides).rev() {
            if n != 1 && s != expected {
                return false;
            }
            expected *= n;
        }
        true
    }

    /// True when `self` and `other` are views of the same allocation.
    pub fn shares_buffer(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    fn buffer_offset(&self, index: &[usize]) -> Option<usize> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut off = self.offset;
        for ((&i, &n), &s) in index.iter().zip(&self.shape).zip(&self.strides) {
            if i >= n {
                return None;
            }
            off += i * s;
        }
        Some(off)
    }

    pub fn get(&self, index: &[usize]) -> Option<T> {
        self.buffer_offset(index).map(|o| self.data[o])
    }

    /// Element at `index`; panics when out of range.
    pub fn at(&self, index: &[usize]) -> T {
        match self.get(index) {
            Some(v) => v,
            None => panic!("index {index:?} out of range for shape {:?}", self.shape),
        }
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(shape_err!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[self.offset])
    }

    /// Contiguous row-major buffer slice, if the view is contiguous.
    pub fn as_slice(&self) -> Option<&[T]> {
        self.is_contiguous()
            .then(|| &self.data[self.offset..self.offset + self.numel()])
    }

    /// Row-major values, borrowed when the view is already contiguous.
    pub fn values(&self) -> Cow<'_, [T]> {
        match self.as_slice() {
            Some(s) => Cow::Borrowed(s),
            None => Cow::Owned(self.iter().collect()),
        }
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.values().into_owned()
    }

    /// Row-major element iterator that honours strides.
    pub fn iter(&self) -> impl Iterator<Item = T> + '_ {
        let n = self.numel();
        let mut idx = vec![0usize; self.shape.len()];
        (0..n).map(move |_| {
            let off = self.offset
                + idx
                    .iter()
                    .zip(&self.strides)
                    .map(|(i, s)| i * s)
                    .sum::<usize>();
            advance(&mut idx, &self.shape);
            self.data[off]
        })
    }

    /// A row-major copy when strides require it; otherwise a cheap clone.
    pub fn contiguous(&self) -> Self {
        if self.is_contiguous() && self.offset == 0 && self.data.len() == self.numel() {
            self.clone()
        } else {
            Self::new(&self.shape, self.to_vec()).unwrap()
        }
    }

    /// Consumes the tensor and returns its row-major buffer, copying only if shared or strided.
    pub fn into_vec(self) -> Vec<T> {
        if self.is_contiguous() && self.offset == 0 && self.data.len() == self.numel() {
            Arc::try_unwrap(self.data).unwrap_or_else(|rc| (*rc).clone())
        } else {
            self.to_vec()
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(shape_err!(
                "cannot reshape {:?} ({} elements) into {shape:?}",
                self.shape,
                self.numel()
            ));
        }
        let base = if self.is_contiguous() {
            self.clone()
        } else {
            self.contiguous()
        };
        Ok(Self {
            shape: shape.to_vec(),
            strides: row_major_strides(shape),
            offset: base.offset,
            data: base.data,
        })
    }

    /// Merges axes `start..=end` into one.
    pub fn flatten(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end >= self.ndim() {
            return Err(arg_err!("flatten range {start}..={end} for rank {}", self.ndim()));
        }
        let mut shape = self.shape[..start].to_vec();
        shape.push(self.shape[start..=end].iter().product());
        shape.extend_from_slice(&self.shape[end + 1..]);
        self.reshape(&shape)
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.ndim()];
        if axes.len() != self.ndim() {
            return Err(arg_err!("permutation {axes:?} for rank {}", self.ndim()));
        }
        for &a in axes {
            if a >= self.ndim() || seen[a] {
                return Err(arg_err!("invalid permutation {axes:?}"));
            }
            seen[a] = true;
        }
        Ok(Self {
            shape: axes.iter().map(|&a| self.shape[a]).collect(),
            strides: axes.iter().map(|&a| self.strides[a]).collect(),
            offset: self.offset,
            data: Arc::clone(&self.data),
        })
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Self> {
        let mut axes: Vec<usize> = (0..self.ndim()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(arg_err!("transpose axes ({a},{b}) for rank {}", self.ndim()));
        }
        axes.swap(a, b);
        self.permute(&axes)
    }

    /// View of `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Self> {
        if axis >= self.ndim() || start > end || end > self.shape[axis] {
            return Err(shape_err!(
                "slice {start}..{end} on axis {axis} of shape {:?}",
                self.shape
            ));
        }
        let mut shape = self.shape.clone();
        shape[axis] = end - start;
        Ok(Self {
            shape,
            strides: self.strides.clone(),
            offset: self.offset + start * self.strides[axis],
            data: Arc::clone(&self.data),
        })
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| arg_err!("concat of zero tensors"))?;
        if axis >= first.ndim() {
            return Err(arg_err!("concat axis {axis} for rank {}", first.ndim()));
        }
        for p in parts {
            let ok = p.ndim() == first.ndim()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err!(
                    "concat along {axis}: {:?} vs {:?}",
                    first.shape,
                    p.shape
                ));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let vals: Vec<Cow<'_, [T]>> = parts.iter().map(|p| p.values()).collect();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for (p, v) in parts.iter().zip(&vals) {
                let block = p.shape[axis] * inner;
                data.extend_from_slice(&v[o * block..(o + 1) * block]);
            }
        }
        Self::new(&shape, data)
    }

    /// Constant padding: `(before, after)` per axis.
    pub fn pad(&self, widths: &[(usize, usize)], value: T) -> Result<Self> {
        if widths.len() != self.ndim() {
            return Err(arg_err!("pad widths {widths:?} for rank {}", self.ndim()));
        }
        let shape: Vec<usize> = self
            .shape
            .iter()
            .zip(widths)
            .map(|(n, (a, b))| n + a + b)
            .collect();
        Ok(Self::from_fn(&shape, |idx| {
            let mut src = Vec::with_capacity(idx.len());
            for ((&i, &(a, _)), &n) in idx.iter().zip(widths).zip(&self.shape) {
                if i < a || i - a >= n {
                    return value;
                }
                src.push(i - a);
            }
            self.at(&src)
        }))
    }

    pub fn map(&self, f: impl FnMut(T) -> T) -> Self {
        Self::new(&self.shape, self.iter().map(f).collect()).unwrap()
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err!("elementwise {:?} vs {:?}", self.shape, other.shape));
        }
        let a = self.values();
        let b = other.values();
        Self::new(
            &self.shape,
            a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn sum(&self) -> T {
        self.values().iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        let d = self.zip_map(other, |a, b| (a - b).abs())?;
        Ok(d.values().iter().fold(T::zero(), |m, &v| m.max(v)))
    }

    /// Casts every element to another scalar type through `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::new(
            &self.shape,
            self.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        )
        .unwrap()
    }
}

/// Row-major multi-index increment; wraps to all-zeros after the last index.
pub(crate) fn advance(idx: &mut [usize], shape: &[usize]) {
    for (i, &n) in idx.iter_mut().zip(shape).rev() {
        *i += 1;
        if *i < n {
            return;
        }
        *i = 0;
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.values() == other.values()
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let vals = self.values();
        write!(f, "Tensor{:?}", self.shape)?;
        if vals.len() <= 16 {
            write!(f, " {:?}", &vals[..])
        } else {
            write!(f, " [{:?}, {:?}, .. {} more]", vals[0], vals[1], vals.len() - 2)
        }
    }
}
