//! Dense row-major tensors and the numeric kernels everything else is built on.
//!
//! Storage is a flat `Vec` plus an explicit shape. There is no implicit
//! broadcasting: every binary op requires identical shapes, and the few
//! broadcasting patterns the models need (bias over a trailing axis, gains
//! over a channel axis) are separate, explicitly named operations.

mod io;
mod ops;
mod scalar;

pub(crate) mod io_util {
    pub(crate) use super::io::{read_exact, read_u32};
}
pub use io::{read_wvt, read_wvt_body, write_wvt, write_wvt_body, WVT_MAGIC};
pub use ops::{
    attention, attention_batched, attention_weights, conv3d, conv3d_padded, linear, matmul,
    rms_norm, silu,
    softmax_rows, ConvSpec, Padding3d,
};
pub(crate) use ops::{
    attention_batched_backward, attention_forward, conv3d_backward, linear_backward,
    rms_norm_backward, AttentionSaved,
};
pub use scalar::Scalar;

use crate::error::{ensure, Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(op: &'static str, shape: &[usize]) -> Result<usize> {
    ensure!(!shape.is_empty(), Error::invalid(op, "rank-0 shape"));
    for (axis, &d) in shape.iter().enumerate() {
        ensure!(d >= 1, Error::shape(op, format!("axis {axis}"), ">= 1", d));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n = check_shape("Tensor::new", &shape)?;
        ensure!(
            n == data.len(),
            Error::shape("Tensor::new", "data length", n, data.len())
        );
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = check_shape("Tensor::full", shape).expect("dimension sizes must be >= 1");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = check_shape("Tensor::from_fn", shape).expect("dimension sizes must be >= 1");
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Standard-normal entries drawn from `rng`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64(z).unwrap()
        })
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::from_f64(rng.random_range(lo..hi)).unwrap())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn into_parts(self) -> (Vec<usize>, Vec<T>) {
        (self.shape, self.data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap()).collect()
    }

    pub fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        ensure!(
            self.rank() == rank,
            Error::shape(op, "rank", rank, format!("{} (shape {:?})", self.rank(), self.shape))
        );
        Ok(())
    }

    pub fn expect_same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        ensure!(
            self.rank() == other.rank(),
            Error::shape(op, "rank", self.rank(), other.rank())
        );
        for (axis, (a, b)) in self.shape.iter().zip(&other.shape).enumerate() {
            ensure!(a == b, Error::shape(op, format!("axis {axis}"), a, b));
        }
        Ok(())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n = check_shape("reshape", shape)?;
        ensure!(
            n == self.numel(),
            Error::shape("reshape", "element count", self.numel(), n)
        );
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn into_reshape(self, shape: &[usize]) -> Result<Self> {
        let n = check_shape("reshape", shape)?;
        ensure!(
            n == self.numel(),
            Error::shape("reshape", "element count", self.numel(), n)
        );
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        ensure!(
            perm.len() == rank,
            Error::shape("permute", "permutation length", rank, perm.len())
        );
        let mut seen = vec![false; rank];
        for &p in perm {
            ensure!(
                p < rank && !seen[p],
                Error::invalid("permute", format!("{perm:?} is not a permutation"))
            );
            seen[p] = true;
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = self.numel();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..n {
            data.push(self.data[offset]);
            // odometer increment over the output index
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                offset += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                offset -= src_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Self {
            shape: out_shape,
            data,
        })
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        ensure!(
            axis < self.rank(),
            Error::invalid("narrow", format!("axis {axis} out of range for rank {}", self.rank()))
        );
        ensure!(
            len >= 1 && start + len <= self.shape[axis],
            Error::shape(
                "narrow",
                format!("axis {axis}"),
                format!("range within 0..{}", self.shape[axis]),
                format!("{start}..{}", start + len)
            )
        );
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let dim = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data })
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn cat(parts: &[&Self], axis: usize) -> Result<Self> {
        ensure!(!parts.is_empty(), Error::invalid("cat", "no tensors"));
        let first = parts[0];
        ensure!(
            axis < first.rank(),
            Error::invalid("cat", format!("axis {axis} out of range for rank {}", first.rank()))
        );
        let mut total = 0;
        for p in parts {
            ensure!(
                p.rank() == first.rank(),
                Error::shape("cat", "rank", first.rank(), p.rank())
            );
            for ax in 0..first.rank() {
                if ax != axis {
                    ensure!(
                        p.shape[ax] == first.shape[ax],
                        Error::shape("cat", format!("axis {ax}"), first.shape[ax], p.shape[ax])
                    );
                }
            }
            total += p.shape[axis];
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self { shape, data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(op, other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape("add_assign", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: T, other: &Self) -> Result<()> {
        self.expect_same_shape("axpy", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64().unwrap()).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn abs_max(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.to_f64().unwrap().abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.to_f64().unwrap();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.expect_same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64().unwrap() - b.to_f64().unwrap()).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Self]) -> Result<Self> {
        ensure!(!parts.is_empty(), Error::invalid("stack", "no tensors"));
        let first = parts[0];
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            p.expect_same_shape("stack", first)?;
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Split along the leading axis, dropping it.
    pub fn unstack(&self) -> Vec<Self> {
        let n = self.shape[0];
        let inner = self.numel() / n;
        let shape = if self.rank() > 1 {
            self.shape[1..].to_vec()
        } else {
            vec![1]
        };
        (0..n)
            .map(|i| Self {
                shape: shape.clone(),
                data: self.data[i * inner..(i + 1) * inner].to_vec(),
            })
            .collect()
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_zero_dims_and_length_mismatch() {
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn permute_matches_index_formula() {
        let t = Tensor::<f32>::from_fn(&[2, 3, 4], |i| i as f32);
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(p.data()[(c * 2 + a) * 3 + b], t.data()[(a * 3 + b) * 4 + c]);
                }
            }
        }
        assert!(t.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn narrow_and_cat_are_inverse() {
        let t = Tensor::<f32>::from_fn(&[2, 5, 3], |i| i as f32);
        let a = t.narrow(1, 0, 2).unwrap();
        let b = t.narrow(1, 2, 3).unwrap();
        assert_eq!(Tensor::cat(&[&a, &b], 1).unwrap(), t);
        assert!(t.narrow(1, 4, 2).is_err());
    }

    proptest! {
        #[test]
        fn permute_roundtrip(d0 in 1usize..4, d1 in 1usize..4, d2 in 1usize..4, d3 in 1usize..4) {
            let t = Tensor::<f32>::from_fn(&[d0, d1, d2, d3], |i| i as f32);
            let p = t.permute(&[3, 1, 0, 2]).unwrap();
            // inverse of [3,1,0,2] is [2,1,3,0]
            prop_assert_eq!(p.permute(&[2, 1, 3, 0]).unwrap(), t);
        }
    }
}
