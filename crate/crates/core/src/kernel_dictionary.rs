//! Sampled Gaussian kernel families and their low-rank eigen-basis.
//!
//! A [`KernelDictionary`] holds `N` Gaussian candidates sampled on a sigma
//! grid, flattened into an `N × K²` matrix. Its top right-singular vectors are
//! the eigen-kernels; projecting any in-range Gaussian onto them gives the
//! per-pixel coefficients used by the fast smoothing path.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Standard deviations at or below this are treated as a Dirac impulse.
pub const SIGMA_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum NormalizationMode {
    /// Literal `1 / (sqrt(2π) σ)` prefactor. Does not sum to one on a 2-D grid.
    Analytic1d,
    /// Rescaled so the `K × K` weights sum to one.
    #[default]
    UnitSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DictionaryConfig {
    pub kernel_size: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_step: f64,
    #[serde(default)]
    pub mode: NormalizationMode,
    pub energy_threshold: f64,
    /// Forces the retained count instead of deriving it from the threshold.
    #[serde(default)]
    pub components: Option<usize>,
}

impl Default for DictionaryConfig {
    fn default() -> Self {
        Self {
            kernel_size: 7,
            sigma_min: 0.25,
            sigma_max: 1.75,
            sigma_step: 0.05,
            mode: NormalizationMode::UnitSum,
            energy_threshold: 0.999,
            components: None,
        }
    }
}

impl DictionaryConfig {
    pub fn validate(&self) -> Result<()> {
        check_kernel_size(self.kernel_size)?;
        if !(self.sigma_min > 0.0 && self.sigma_min.is_finite()) {
            return Err(invalid(format!("sigma_min must be positive, got {}", self.sigma_min)));
        }
        if !(self.sigma_max >= self.sigma_min && self.sigma_max.is_finite()) {
            return Err(invalid(format!(
                "sigma_max ({}) must be >= sigma_min ({})",
                self.sigma_max, self.sigma_min
            )));
        }
        if !(self.sigma_step > 0.0 && self.sigma_step.is_finite()) {
            return Err(invalid(format!("sigma_step must be positive, got {}", self.sigma_step)));
        }
        if !(self.energy_threshold > 0.0 && self.energy_threshold <= 1.0) {
            return Err(invalid(format!(
                "energy_threshold must lie in (0, 1], got {}",
                self.energy_threshold
            )));
        }
        if self.components == Some(0) {
            return Err(invalid("components must be at least 1"));
        }
        Ok(())
    }

    /// Number of grid samples, `floor((d − c) / s) + 1`.
    pub fn sample_count(&self) -> usize {
        // The small slack keeps e.g. (1.75 - 0.25) / 0.05 from landing just below 30.
        ((self.sigma_max - self.sigma_min) / self.sigma_step + 1e-9).floor() as usize + 1
    }

    pub fn sigma_grid(&self) -> Vec<f64> {
        (0..self.sample_count())
            .map(|k| self.sigma_min + k as f64 * self.sigma_step)
            .collect()
    }
}

fn check_kernel_size(k: usize) -> Result<()> {
    if k == 0 || k % 2 == 0 {
        return Err(invalid(format!("kernel size must be odd and >= 1, got {k}")));
    }
    Ok(())
}

/// A square `size × size` kernel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub size: usize,
    pub weights: Vec<f64>,
}

impl Kernel {
    pub fn dirac(size: usize) -> Self {
        let mut weights = vec![0.0; size * size];
        weights[size * size / 2] = 1.0;
        Self { size, weights }
    }

    #[inline]
    pub fn at(&self, dk: isize, dl: isize) -> f64 {
        let r = (self.size / 2) as isize;
        self.weights[((dk + r) as usize) * self.size + (dl + r) as usize]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }
}

/// Squared distance from the kernel center for each flattened tap.
fn squared_radii(size: usize) -> impl Iterator<Item = f64> {
    let r = (size / 2) as isize;
    (0..size * size).map(move |idx| {
        let dk = (idx / size) as isize - r;
        let dl = (idx % size) as isize - r;
        (dk * dk + dl * dl) as f64
    })
}

pub fn gaussian_kernel(size: usize, sigma: f64, mode: NormalizationMode) -> Result<Kernel> {
    check_kernel_size(size)?;
    if sigma.is_nan() || sigma < 0.0 {
        return Err(invalid(format!("sigma must be nonnegative, got {sigma}")));
    }
    Ok(gaussian_unchecked(size, sigma, mode))
}

pub(crate) fn gaussian_unchecked(size: usize, sigma: f64, mode: NormalizationMode) -> Kernel {
    if sigma <= SIGMA_EPS {
        return Kernel::dirac(size);
    }
    let two_var = 2.0 * sigma * sigma;
    let mut weights: Vec<f64> = squared_radii(size).map(|r2| (-r2 / two_var).exp()).collect();
    let scale = match mode {
        NormalizationMode::Analytic1d => 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma),
        NormalizationMode::UnitSum => 1.0 / weights.iter().sum::<f64>(),
    };
    weights.iter_mut().for_each(|w| *w *= scale);
    Kernel { size, weights }
}

/// Derivative of every tap of `gaussian_kernel(size, sigma, mode)` with
/// respect to `sigma`. Zero at and below the Dirac threshold.
pub fn gaussian_kernel_dsigma(size: usize, sigma: f64, mode: NormalizationMode) -> Kernel {
    if sigma <= SIGMA_EPS {
        return Kernel {
            size,
            weights: vec![0.0; size * size],
        };
    }
    let g = gaussian_unchecked(size, sigma, mode);
    let s3 = sigma * sigma * sigma;
    let radii: Vec<f64> = squared_radii(size).collect();
    let shift = match mode {
        NormalizationMode::Analytic1d => 1.0 / sigma,
        NormalizationMode::UnitSum => {
            g.weights.iter().zip(&radii).map(|(w, r2)| w * r2).sum::<f64>() / s3
        }
    };
    let weights = g
        .weights
        .iter()
        .zip(&radii)
        .map(|(w, r2)| w * (r2 / s3 - shift))
        .collect();
    Kernel { size, weights }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelDictionary {
    pub config: DictionaryConfig,
    pub sigma_grid: Vec<f64>,
    /// `N × K²`, one flattened candidate per row.
    pub candidates: Vec<f32>,
    /// `C × K²`, one flattened orthonormal eigen-kernel per row.
    pub eigen_kernels: Vec<f32>,
    /// Length `N`, nonincreasing. Zero-padded when `N > K²`.
    pub singular_values: Vec<f64>,
    pub retained: usize,
    pub energy_ratio: f64,
}

pub fn build_dictionary(config: &DictionaryConfig) -> Result<KernelDictionary> {
    config.validate()?;
    let grid = config.sigma_grid();
    let n = grid.len();
    if n == 0 {
        return Err(invalid("sigma grid is empty"));
    }
    let k = config.kernel_size;
    let taps = k * k;

    let mut candidates = DMatrix::<f64>::zeros(n, taps);
    for (row, &sigma) in grid.iter().enumerate() {
        let g = gaussian_unchecked(k, sigma, config.mode);
        for (col, w) in g.weights.iter().enumerate() {
            candidates[(row, col)] = *w;
        }
    }

    let svd = candidates.clone().svd(false, true);
    let v_t = svd
        .v_t
        .as_ref()
        .expect("right singular vectors were requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let mut singular_values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    singular_values.resize(n, 0.0);

    let retained = match config.components {
        Some(c) => {
            if c > n.min(taps) {
                return Err(invalid(format!(
                    "components = {c} exceeds the available rank {}",
                    n.min(taps)
                )));
            }
            c
        }
        None => choose_retained(&singular_values, config.energy_threshold, k, taps),
    };

    let mut eigen_kernels = Vec::with_capacity(retained * taps);
    for &src in order.iter().take(retained) {
        let mut row: Vec<f64> = v_t.row(src).iter().copied().collect();
        // SVD sign is arbitrary; pin it so identical configs give identical bits.
        let pivot = row
            .iter()
            .copied()
            .fold(0.0f64, |best, v| if v.abs() > best.abs() + 1e-12 { v } else { best });
        if pivot < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        eigen_kernels.extend(row.iter().map(|&v| v as f32));
    }

    let energy_ratio = energy_of(&singular_values, retained);
    Ok(KernelDictionary {
        config: config.clone(),
        sigma_grid: grid,
        candidates: candidates.transpose().iter().map(|&v| v as f32).collect(),
        eigen_kernels,
        singular_values,
        retained,
        energy_ratio,
    })
}

/// Smallest count whose energy reaches `threshold`, raised to `(K + 1) / 2`
/// when the rank allows it.
fn choose_retained(singular_values: &[f64], threshold: f64, k: usize, taps: usize) -> usize {
    let n = singular_values.len();
    let available = n.min(taps);
    let mut needed = available;
    for c in 1..=available {
        if energy_of(singular_values, c) >= threshold {
            needed = c;
            break;
        }
    }
    needed.max(((k + 1) / 2).min(available))
}

/// Energy captured by the top `c` components: the share of the candidate
/// matrix's squared Frobenius norm, i.e. `Σ_{q≤c} s_q² / Σ s_q²`.
fn energy_of(singular_values: &[f64], c: usize) -> f64 {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return 1.0;
    }
    let kept: f64 = singular_values.iter().take(c).map(|s| s * s).sum();
    (kept / total).min(1.0)
}

impl KernelDictionary {
    pub fn kernel_size(&self) -> usize {
        self.config.kernel_size
    }

    pub fn sample_count(&self) -> usize {
        self.sigma_grid.len()
    }

    pub fn eigen_kernel(&self, q: usize) -> &[f32] {
        let taps = self.kernel_size() * self.kernel_size();
        &self.eigen_kernels[q * taps..(q + 1) * taps]
    }

    pub fn candidate(&self, n: usize) -> &[f32] {
        let taps = self.kernel_size() * self.kernel_size();
        &self.candidates[n * taps..(n + 1) * taps]
    }

    pub fn energy_preserved(&self, c: usize) -> Result<f64> {
        if c == 0 || c > self.sample_count() {
            return Err(invalid(format!(
                "component count {c} outside [1, {}]",
                self.sample_count()
            )));
        }
        Ok(energy_of(&self.singular_values, c))
    }

    pub fn clamp_sigma(&self, sigma: f64) -> f64 {
        sigma.clamp(self.config.sigma_min, self.config.sigma_max)
    }

    /// Projection coefficients `⟨G_q, G_σ⟩` for the clamped sigma.
    pub fn coefficients(&self, sigma: f64) -> Vec<f64> {
        let g = gaussian_unchecked(self.kernel_size(), self.clamp_sigma(sigma), self.config.mode);
        (0..self.retained)
            .map(|q| dot(self.eigen_kernel(q), &g.weights))
            .collect()
    }

    /// `d⟨G_q, G_σ⟩ / dσ`; zero where the clamp is active.
    pub fn coefficient_derivatives(&self, sigma: f64) -> Vec<f64> {
        if sigma <= self.config.sigma_min || sigma >= self.config.sigma_max {
            return vec![0.0; self.retained];
        }
        let dg = gaussian_kernel_dsigma(self.kernel_size(), sigma, self.config.mode);
        (0..self.retained)
            .map(|q| dot(self.eigen_kernel(q), &dg.weights))
            .collect()
    }

    /// `Σ_q ⟨G_q, G_σ⟩ G_q` with sigma clamped into the sampled range.
    pub fn reconstruct_kernel(&self, sigma: f64) -> Result<Kernel> {
        if sigma.is_nan() || sigma < 0.0 {
            return Err(invalid(format!("sigma must be nonnegative, got {sigma}")));
        }
        let k = self.kernel_size();
        let coeffs = self.coefficients(sigma);
        let mut weights = vec![0.0; k * k];
        for (q, u) in coeffs.iter().enumerate() {
            for (w, g) in weights.iter_mut().zip(self.eigen_kernel(q)) {
                *w += u * f64::from(*g);
            }
        }
        Ok(Kernel { size: k, weights })
    }
}

fn dot(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(*x) * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_is_dirac() {
        let g = gaussian_kernel(3, 0.0, NormalizationMode::UnitSum).unwrap();
        assert_eq!(g.weights, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let g = gaussian_kernel(3, 0.0, NormalizationMode::Analytic1d).unwrap();
        assert_eq!(g.at(0, 0), 1.0);
    }

    #[test]
    fn unit_sum_kernel_sums_to_one() {
        for sigma in [0.3, 0.9, 1.75, 4.0] {
            let g = gaussian_kernel(7, sigma, NormalizationMode::UnitSum).unwrap();
            assert!((g.sum() - 1.0).abs() < 1e-12);
            assert!(g.weights.iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn analytic_mode_uses_one_dimensional_prefactor() {
        let sigma = 0.8;
        let g = gaussian_kernel(5, sigma, NormalizationMode::Analytic1d).unwrap();
        let expected = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * sigma);
        assert!((g.at(0, 0) - expected).abs() < 1e-15);
    }

    #[test]
    fn rejects_even_size_and_negative_sigma() {
        assert!(gaussian_kernel(4, 1.0, NormalizationMode::UnitSum).is_err());
        assert!(gaussian_kernel(3, -0.1, NormalizationMode::UnitSum).is_err());
        assert!(gaussian_kernel(0, 1.0, NormalizationMode::UnitSum).is_err());
    }

    #[test]
    fn sigma_derivative_matches_central_difference() {
        for mode in [NormalizationMode::UnitSum, NormalizationMode::Analytic1d] {
            for sigma in [0.3, 0.77, 1.6] {
                let h = 1e-6;
                let plus = gaussian_unchecked(7, sigma + h, mode);
                let minus = gaussian_unchecked(7, sigma - h, mode);
                let d = gaussian_kernel_dsigma(7, sigma, mode);
                for idx in 0..49 {
                    let fd = (plus.weights[idx] - minus.weights[idx]) / (2.0 * h);
                    assert!((fd - d.weights[idx]).abs() < 1e-7, "{mode:?} {sigma} {idx}");
                }
            }
        }
    }

    #[test]
    fn grid_is_inclusive() {
        let cfg = DictionaryConfig::default();
        assert_eq!(cfg.sample_count(), 31);
        let grid = cfg.sigma_grid();
        assert!((grid[30] - 1.75).abs() < 1e-12);
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        let mut cfg = DictionaryConfig::default();
        cfg.sigma_max = 0.1;
        assert!(build_dictionary(&cfg).is_err());
        let mut cfg = DictionaryConfig::default();
        cfg.sigma_step = 0.0;
        assert!(build_dictionary(&cfg).is_err());
        let mut cfg = DictionaryConfig::default();
        cfg.kernel_size = 6;
        assert!(build_dictionary(&cfg).is_err());
    }

    #[test]
    fn rank_one_family() {
        let cfg = DictionaryConfig {
            kernel_size: 3,
            sigma_min: 1.0,
            sigma_max: 1.0,
            sigma_step: 0.05,
            ..Default::default()
        };
        let dict = build_dictionary(&cfg).unwrap();
        assert_eq!(dict.sample_count(), 1);
        assert_eq!(dict.retained, 1);
        assert_eq!(dict.energy_ratio, 1.0);
        let cand: Vec<f64> = dict.candidate(0).iter().map(|&v| v as f64).collect();
        let norm = cand.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (e, c) in dict.eigen_kernel(0).iter().zip(&cand) {
            assert!((*e as f64 - c / norm).abs() < 1e-6);
        }
        let rec = dict.reconstruct_kernel(1.0).unwrap();
        for (r, c) in rec.weights.iter().zip(&cand) {
            assert!((r - c).abs() < 1e-6);
        }
    }

    #[test]
    fn energy_out_of_range_is_an_error() {
        let dict = build_dictionary(&DictionaryConfig::default()).unwrap();
        assert!(dict.energy_preserved(0).is_err());
        assert!(dict.energy_preserved(32).is_err());
        assert_eq!(dict.energy_preserved(31).unwrap(), 1.0);
    }

    #[test]
    fn forced_component_count() {
        let cfg = DictionaryConfig {
            components: Some(6),
            ..Default::default()
        };
        let dict = build_dictionary(&cfg).unwrap();
        assert_eq!(dict.retained, 6);
        assert_eq!(dict.eigen_kernels.len(), 6 * 49);
    }
}
