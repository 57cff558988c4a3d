//! Dense row-major tensors and the reverse-mode tape built on them.

mod io;
mod tape;

pub use io::{read_tensor, read_tensors, write_tensor, TENSOR_MAGIC};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Contiguous row-major buffer with an optional gradient of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let data = vec![S::zero(); numel(&shape)];
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let data = vec![value; numel(&shape)];
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn scalar(value: S) -> Self {
        Tensor { shape: Vec::new(), data: vec![value], requires_grad: false, grad: None }
    }

    /// Builds a tensor by evaluating `f` at every flat (row-major) index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> S) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[S]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), self.data.len());
        }
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Converts element type; gradients are dropped.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<S>) -> Result<S> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(S::zero(), S::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates along `axis`. Shapes must agree on every other axis.
    pub fn concat(parts: &[&Tensor<S>], axis: usize) -> Result<Self> {
        let shape = concat_shape(parts.iter().map(|t| t.shape()), axis)?;
        let mut data = Vec::with_capacity(numel(&shape));
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        for o in 0..outer {
            for t in parts {
                let chunk = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor::new(shape, data)
    }

    /// Slices `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return Err(Error::shape("narrow", &self.shape, &[axis, start, len]));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::new(shape, data)
    }

    /// Splits along `axis` into consecutive pieces of the given lengths.
    pub fn split(&self, axis: usize, lengths: &[usize]) -> Result<Vec<Self>> {
        if axis >= self.rank() || lengths.iter().sum::<usize>() != self.shape[axis] {
            return Err(Error::shape("split", &self.shape, lengths));
        }
        let mut start = 0;
        lengths
            .iter()
            .map(|&len| {
                let piece = self.narrow(axis, start, len);
                start += len;
                piece
            })
            .collect()
    }
}

pub(crate) fn concat_shape<'a>(
    mut shapes: impl Iterator<Item = &'a [usize]>,
    axis: usize,
) -> Result<Vec<usize>> {
    let first = shapes
        .next()
        .ok_or_else(|| Error::contract("concat of an empty list"))?;
    if axis >= first.len() {
        return Err(Error::shape("concat", first, &[axis]));
    }
    let mut out = first.to_vec();
    for s in shapes {
        let compatible = s.len() == first.len()
            && s.iter()
                .zip(first)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::shape("concat", first, s));
        }
        out[axis] += s[axis];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::<f32>::new([2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn concat_single_input_is_identity() {
        let a = Tensor::<f64>::from_fn([2, 3], |i| i as f64);
        assert_eq!(Tensor::concat(&[&a], 1).unwrap(), a);
    }

    #[test]
    fn concat_axis0_preserves_order() {
        let a = Tensor::<f64>::from_fn([2, 3], |i| i as f64);
        let b = Tensor::<f64>::from_fn([2, 3], |i| 10.0 + i as f64);
        let c = Tensor::concat(&[&a, &b], 0).unwrap();
        assert_eq!(c.shape(), &[4, 3]);
        assert_eq!(&c.data()[..6], a.data());
        assert_eq!(&c.data()[6..], b.data());
    }

    #[test]
    fn concat_rejects_incompatible() {
        let a = Tensor::<f64>::zeros([2, 3]);
        let b = Tensor::<f64>::zeros([2, 4]);
        assert!(Tensor::concat(&[&a, &b], 0).is_err());
    }

    proptest! {
        #[test]
        fn concat_split_round_trip(
            rows in prop::collection::vec(1usize..5, 3),
            cols in 1usize..5,
            depth in 1usize..3,
            axis in 0usize..3,
            seed in any::<u64>(),
        ) {
            let mut state = seed;
            let mut next = move || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            };
            let parts: Vec<Tensor<f64>> = rows
                .iter()
                .map(|&r| {
                    let mut shape = vec![depth, cols, 2];
                    shape[axis] = r;
                    Tensor::from_fn(shape, |_| next())
                })
                .collect();
            let refs: Vec<&Tensor<f64>> = parts.iter().collect();
            let joined = Tensor::concat(&refs, axis).unwrap();
            let back = joined.split(axis, &rows).unwrap();
            prop_assert_eq!(back, parts);
        }
    }
}
