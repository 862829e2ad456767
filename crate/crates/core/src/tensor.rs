//! Dense channel-major (C×H×W) `f64` tensors.

use std::fmt;

use crate::error::{Result, TcvcError};

/// Spatial and channel dimensions of a [`Tensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Dims { c, h, w }
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn same_plane(&self, other: &Dims) -> bool {
        self.h == other.h && self.w == other.w
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

/// A C×H×W array stored row-major within each channel plane.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Dims,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .finish_non_exhaustive()
    }
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            dims: Dims::new(c, h, w),
            data: vec![0.0; c * h * w],
        }
    }

    pub fn filled(c: usize, h: usize, w: usize, value: f64) -> Self {
        Tensor {
            dims: Dims::new(c, h, w),
            data: vec![value; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(TcvcError::shape(
                "Tensor::from_vec",
                c * h * w,
                data.len(),
            ));
        }
        Ok(Tensor {
            dims: Dims::new(c, h, w),
            data,
        })
    }

    pub fn from_fn(
        c: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    data.push(f(ch, r, col));
                }
            }
        }
        Tensor {
            dims: Dims::new(c, h, w),
            data,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.dims.c
    }

    pub fn height(&self) -> usize {
        self.dims.h
    }

    pub fn width(&self) -> usize {
        self.dims.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, r: usize, col: usize) -> f64 {
        self.data[(c * self.dims.h + r) * self.dims.w + col]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, r: usize, col: usize) -> &mut f64 {
        let idx = (c * self.dims.h + r) * self.dims.w + col;
        &mut self.data[idx]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.dims.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.dims.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn ensure_dims(&self, expected: Dims, context: &'static str) -> Result<()> {
        if self.dims != expected {
            return Err(TcvcError::shape(context, expected, self.dims));
        }
        Ok(())
    }

    pub fn ensure_plane(&self, h: usize, w: usize, context: &'static str) -> Result<()> {
        if self.dims.h != h || self.dims.w != w {
            return Err(TcvcError::shape(
                context,
                format!("{h}x{w} plane"),
                format!("{}x{} plane", self.dims.h, self.dims.w),
            ));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        other.ensure_dims(self.dims, "Tensor::zip_map")?;
        Ok(Tensor {
            dims: self.dims,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        other.ensure_dims(self.dims, "Tensor::add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.dims, other.dims);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Stacks tensors with equal planes along the channel axis.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TcvcError::InvalidArgument("concat of zero tensors".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut c = 0;
        for p in parts {
            p.ensure_plane(h, w, "Tensor::concat")?;
            c += p.channels();
        }
        let mut data = Vec::with_capacity(c * h * w);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            dims: Dims::new(c, h, w),
            data,
        })
    }

    /// Copies channels `[start, start + count)`.
    pub fn slice_channels(&self, start: usize, count: usize) -> Tensor {
        let p = self.dims.plane();
        Tensor {
            dims: Dims::new(count, self.dims.h, self.dims.w),
            data: self.data[start * p..(start + count) * p].to_vec(),
        }
    }

    /// Copies the window with top-left corner `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor> {
        if top + h > self.dims.h || left + w > self.dims.w {
            return Err(TcvcError::shape(
                "Tensor::crop",
                format!("window inside {}x{}", self.dims.h, self.dims.w),
                format!("{h}x{w} at ({top},{left})"),
            ));
        }
        Ok(Tensor::from_fn(self.dims.c, h, w, |c, r, col| {
            self.at(c, top + r, left + col)
        }))
    }
}

/// Types that wrap a single [`Tensor`] with a domain meaning.
pub trait Planar: Sized {
    fn tensor(&self) -> &Tensor;
    fn from_tensor_unchecked(t: Tensor) -> Self;
    fn into_tensor(self) -> Tensor;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_channel_major() {
        let t = Tensor::from_fn(2, 3, 4, |c, r, col| (c * 100 + r * 10 + col) as f64);
        assert_eq!(t.at(1, 2, 3), 123.0);
        assert_eq!(t.data()[12], 100.0);
        assert_eq!(t.channel(1)[0], 100.0);
    }

    #[test]
    fn concat_and_slice_invert() {
        let a = Tensor::filled(2, 3, 3, 1.0);
        let b = Tensor::filled(1, 3, 3, 2.0);
        let ab = Tensor::concat(&[&a, &b]).unwrap();
        assert_eq!(ab.channels(), 3);
        assert_eq!(ab.slice_channels(2, 1), b);
        assert_eq!(ab.slice_channels(0, 2), a);
    }

    #[test]
    fn concat_rejects_plane_mismatch() {
        let a = Tensor::zeros(1, 3, 3);
        let b = Tensor::zeros(1, 3, 4);
        assert!(Tensor::concat(&[&a, &b]).is_err());
    }

    #[test]
    fn crop_bounds() {
        let t = Tensor::from_fn(1, 4, 4, |_, r, c| (r * 4 + c) as f64);
        let w = t.crop(1, 2, 2, 2).unwrap();
        assert_eq!(w.data(), &[6.0, 7.0, 10.0, 11.0]);
        assert!(t.crop(3, 3, 2, 2).is_err());
    }
}
