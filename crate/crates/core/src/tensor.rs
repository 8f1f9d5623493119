//! Dense channel-major feature arrays.

use crate::error::{mismatch, Result};

/// A `channels × height × width` array stored row-major per channel.
///
/// `Tensor` (the default, `f32`) is the storage and interchange type. The
/// network and gradient code run on `Tensor<f64>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

pub type Tensor64 = Tensor<f64>;

impl<T: Copy + Default> Tensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::default(); channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(mismatch(format!(
                "{} values cannot fill a {channels}x{height}x{width} tensor",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> T {
        self.data[(c * self.height + i) * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, v: T) {
        self.data[(c * self.height + i) * self.width + j] = v;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Stacks the channels of `self` followed by those of `other`.
    pub fn concat_channels(&self, other: &Self) -> Result<Self> {
        if self.height != other.height || self.width != other.width {
            return Err(mismatch(format!(
                "cannot concatenate {:?} with {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Self {
            channels: self.channels + other.channels,
            height: self.height,
            width: self.width,
            data,
        })
    }

    /// Splits off channels `[from, from + count)` into a new tensor.
    pub fn slice_channels(&self, from: usize, count: usize) -> Self {
        let n = self.plane_len();
        Self {
            channels: count,
            height: self.height,
            width: self.width,
            data: self.data[from * n..(from + count) * n].to_vec(),
        }
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl Tensor<f32> {
    pub fn to_f64(&self) -> Tensor<f64> {
        self.map(f64::from)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Tensor<f64> {
    pub fn to_f32(&self) -> Tensor<f32> {
        self.map(|v| v as f32)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Relative L2 distance `‖a − b‖ / ‖b‖` (absolute when `b` is zero).
pub fn relative_l2(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        num += d * d;
        den += (y as f64) * (y as f64);
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}
