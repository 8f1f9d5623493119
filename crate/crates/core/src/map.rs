use crate::error::{mismatch, Result};

/// A single-channel `height × width` field of reals, row-major.
///
/// Used for perspective maps, blur (sigma) maps and density maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Map2 {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

pub type PerspectiveMap = Map2;
pub type BlurMap = Map2;
pub type DensityMap = Map2;

impl Map2 {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(mismatch(format!(
                "{} values cannot fill a {height}x{width} map",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                values.push(f(i, j));
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.width + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.values.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// True when every row holds a single repeated value (bitwise).
    pub fn is_row_constant(&self) -> bool {
        (0..self.height).all(|i| {
            let row = self.row(i);
            row.iter().all(|v| v.to_bits() == row[0].to_bits())
        })
    }

    /// Sums `factor × factor` blocks; totals are preserved exactly up to rounding.
    pub fn block_sum(&self, factor: usize) -> Result<Self> {
        self.check_divisible(factor)?;
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Self::zeros(h, w);
        for i in 0..self.height {
            for j in 0..self.width {
                out.values[(i / factor) * w + j / factor] += self.get(i, j);
            }
        }
        Ok(out)
    }

    /// Averages `factor × factor` blocks.
    pub fn area_downsample(&self, factor: usize) -> Result<Self> {
        let inv = 1.0 / (factor * factor) as f64;
        Ok(self.block_sum(factor)?.map(|v| v * inv))
    }

    /// Adjoint of [`Map2::area_downsample`]: spreads each coarse value evenly
    /// over its block.
    pub fn area_downsample_adjoint(&self, factor: usize) -> Self {
        let inv = 1.0 / (factor * factor) as f64;
        Self::from_fn(self.height * factor, self.width * factor, |i, j| {
            self.get(i / factor, j / factor) * inv
        })
    }

    fn check_divisible(&self, factor: usize) -> Result<()> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(mismatch(format!(
                "{}x{} map is not divisible by {factor}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_sum_preserves_total() {
        let m = Map2::from_fn(6, 4, |i, j| (i * 7 + j) as f64 * 0.3);
        let s = m.block_sum(2).unwrap();
        assert_eq!(s.dims(), (3, 2));
        assert!((s.sum() - m.sum()).abs() < 1e-12);
        assert!(m.block_sum(4).is_err());
    }

    #[test]
    fn area_downsample_adjoint_identity() {
        let m = Map2::from_fn(4, 6, |i, j| (i as f64).sin() + j as f64);
        let g = Map2::from_fn(2, 3, |i, j| (i + 2 * j) as f64 - 1.5);
        let lhs: f64 = m
            .area_downsample(2)
            .unwrap()
            .values
            .iter()
            .zip(&g.values)
            .map(|(a, b)| a * b)
            .sum();
        let adj = g.area_downsample_adjoint(2);
        let rhs: f64 = m.values.iter().zip(&adj.values).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
