//! Dense row-major tensors over `f32` or `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use crate::error::{Error, Result};

/// Element type tag used by the checkpoint format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn tag(self) -> u8 {
        self.size() as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            4 => Some(DType::F32),
            8 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Scalar element. Training runs in `f32`; gradient checks run in `f64`.
pub trait Float:
    num_traits::Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    fn cast(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// `bytes` must hold exactly `DTYPE.size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Float for f32 {
    const DTYPE: DType = DType::F32;

    fn cast(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Float for f64 {
    const DTYPE: DType = DType::F64;

    fn cast(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(&[], value)
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::cast(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::Rank {
                op: "item",
                expected: 0,
                got: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(batch, channels, height, width)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::Rank {
                op: "dims4",
                expected: 4,
                got: self.shape.clone(),
            }),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::cast(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::cast(v.as_f64())).collect()),
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) -> Result<()> {
        if delta.len() != self.numel() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[delta.len()]));
        }
        let n = self.numel();
        let g = self.grad.get_or_insert_with(|| vec![T::zero(); n]);
        for (a, &d) in g.iter_mut().zip(delta) {
            *a += d;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sub-tensor along the leading axis, `[start, start + len)`.
    pub fn slice_outer(&self, start: usize, len: usize) -> Result<Self> {
        let outer = *self.shape.first().ok_or_else(|| Error::Rank {
            op: "slice_outer",
            expected: 1,
            got: vec![],
        })?;
        if start + len > outer {
            return Err(Error::shape("slice_outer", &self.shape, &[start + len]));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Tensor::new(
            &shape,
            self.data[start * inner..(start + len) * inner].to_vec(),
        )
    }

    /// Gathers rows of the leading axis.
    pub fn select_outer(&self, rows: &[usize]) -> Result<Self> {
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= self.shape[0] {
                return Err(Error::Contract(format!(
                    "row {r} out of range for leading extent {}",
                    self.shape[0]
                )));
            }
            data.extend_from_slice(&self.data[r * inner..(r + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor::new(&shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert!(t.grad().is_none());
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::<f64>::zeros(&[3]).with_grad();
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0; 3]);
    }

    #[test]
    fn select_rows() {
        let t = Tensor::<f32>::from_f64(&[3, 2], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let s = t.select_outer(&[2, 0]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[5., 6., 1., 2.]);
    }

    #[test]
    fn dtype_tags_round_trip() {
        for d in [DType::F32, DType::F64] {
            assert_eq!(DType::from_tag(d.tag()), Some(d));
        }
        let mut buf = Vec::new();
        1.5f32.write_le(&mut buf);
        assert_eq!(f32::read_le(&buf), 1.5);
    }
}
