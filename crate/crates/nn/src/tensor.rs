//! Dense 4-D activations stored channels-last (NHWC).
//!
//! The public input convention is NCHW (`[batch, channels, height, width]`);
//! [`Tensor::from_nchw`] transposes once at the model boundary and every
//! layer works on the channels-last buffer, which keeps pointwise convolutions
//! a single GEMM and lets per-pixel reductions run over contiguous memory.

use crate::error::{ModelError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Self {
            n,
            h,
            w,
            c,
            data: vec![0.0; n * h * w * c],
        }
    }

    pub fn from_nhwc(n: usize, h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * h * w * c {
            return Err(ModelError::ShapeMismatch(format!(
                "buffer of {} values does not match [{n}, {h}, {w}, {c}]",
                data.len()
            )));
        }
        Ok(Self { n, h, w, c, data })
    }

    /// Builds a tensor from an NCHW buffer (`shape = [batch, channels, height, width]`).
    pub fn from_nchw(shape: [usize; 4], data: &[f32]) -> Result<Self> {
        let [n, c, h, w] = shape;
        if data.len() != n * c * h * w {
            return Err(ModelError::ShapeMismatch(format!(
                "buffer of {} values does not match NCHW {shape:?}",
                data.len()
            )));
        }
        let mut out = Self::zeros(n, h, w, c);
        for b in 0..n {
            for ch in 0..c {
                let plane = &data[(b * c + ch) * h * w..][..h * w];
                for (p, &v) in plane.iter().enumerate() {
                    out.data[(b * h * w + p) * c + ch] = v;
                }
            }
        }
        Ok(out)
    }

    pub fn to_nchw(&self) -> Vec<f32> {
        let (n, h, w, c) = self.dims();
        let mut out = vec![0.0; self.data.len()];
        for b in 0..n {
            for p in 0..h * w {
                for ch in 0..c {
                    out[(b * c + ch) * h * w + p] = self.data[(b * h * w + p) * c + ch];
                }
            }
        }
        out
    }

    /// `(batch, height, width, channels)`
    #[inline]
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.h, self.w, self.c)
    }

    /// NCHW shape, matching the public input convention.
    pub fn shape_nchw(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.c
    }

    /// Number of spatial positions across the whole batch (rows of the NHWC matrix).
    #[inline]
    pub fn rows(&self) -> usize {
        self.n * self.h * self.w
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub(crate) fn same_shape_zeros(&self) -> Self {
        Self::zeros(self.n, self.h, self.w, self.c)
    }

    pub(crate) fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            n: self.n,
            h: self.h,
            w: self.w,
            c: self.c,
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.dims(), other.dims());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Add for &Tensor {
    type Output = Tensor;

    fn add(self, rhs: &Tensor) -> Tensor {
        let mut out = self.clone();
        out.add_assign(rhs);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nchw_roundtrip() {
        let data: Vec<f32> = (0..2 * 3 * 4 * 5).map(|v| v as f32).collect();
        let t = Tensor::from_nchw([2, 3, 4, 5], &data).unwrap();
        assert_eq!(t.dims(), (2, 4, 5, 3));
        assert_eq!(t.shape_nchw(), [2, 3, 4, 5]);
        assert_eq!(t.to_nchw(), data);
        // element (b=1, c=2, y=3, x=4)
        let nchw = ((1 * 3 + 2) * 4 + 3) * 5 + 4;
        let nhwc = ((1 * 4 + 3) * 5 + 4) * 3 + 2;
        assert_eq!(t.data()[nhwc], data[nchw]);
    }

    #[test]
    fn wrong_buffer_length_is_rejected() {
        assert!(matches!(
            Tensor::from_nchw([1, 1, 2, 2], &[0.0; 3]),
            Err(ModelError::ShapeMismatch(_))
        ));
    }
}
