//! Spatially variant Gaussian smoothing.
//!
//! [`filter_exact`] evaluates a fresh Gaussian for every output element and
//! is the reference. [`filter_approx`] replaces it with `C` ordinary
//! correlations against the dictionary's eigen-kernels, each gated by a
//! per-pixel coefficient map.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{correlate_padded_acc, pad_plane, PaddingMode};
use crate::error::{mismatch, Result};
use crate::kernel_dictionary::{gaussian_unchecked, KernelDictionary, NormalizationMode, SIGMA_EPS};
use crate::map::{BlurMap, Map2};
use crate::tensor::{Tensor, Tensor64};

fn check_dims(x: (usize, usize, usize), sigma: &BlurMap) -> Result<()> {
    if (x.1, x.2) != sigma.dims() {
        return Err(mismatch(format!(
            "blur map is {}x{} but features are {}x{}",
            sigma.height, sigma.width, x.1, x.2
        )));
    }
    Ok(())
}

pub fn filter_exact(
    x: &Tensor,
    sigma: &BlurMap,
    kernel_size: usize,
    mode: NormalizationMode,
    padding: PaddingMode,
) -> Result<Tensor> {
    check_dims(x.shape(), sigma)?;
    crate::kernel_dictionary::gaussian_kernel(kernel_size, 0.0, mode)?;
    let (ch, h, w) = x.shape();
    let r = (kernel_size / 2) as isize;
    let mut out = Tensor::zeros(ch, h, w);
    for c in 0..ch {
        let plane = x.channel(c);
        for i in 0..h {
            for j in 0..w {
                let kernel = gaussian_unchecked(kernel_size, sigma.get(i, j).max(0.0), mode);
                let mut acc = 0.0f64;
                for dk in -r..=r {
                    let si = i as isize + dk;
                    let row_inside = si >= 0 && si < h as isize;
                    if !row_inside && padding == PaddingMode::Zero {
                        continue;
                    }
                    let si = si.clamp(0, h as isize - 1) as usize;
                    for dl in -r..=r {
                        let sj = j as isize + dl;
                        let col_inside = sj >= 0 && sj < w as isize;
                        if !col_inside && padding == PaddingMode::Zero {
                            continue;
                        }
                        let sj = sj.clamp(0, w as isize - 1) as usize;
                        acc += kernel.at(dk, dl) * f64::from(plane[si * w + sj]);
                    }
                }
                out.set(c, i, j, acc as f32);
            }
        }
    }
    Ok(out)
}

/// Per-pixel projections of the local Gaussian onto each eigen-kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientMaps {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// `count × height × width`.
    pub maps: Vec<f64>,
    /// Pixels whose sigma is at or below the Dirac threshold; these bypass
    /// the dictionary and pass the input through.
    pub identity: Vec<bool>,
    /// Number of distinct coefficient vectors that were evaluated.
    pub evaluations: usize,
}

impl CoefficientMaps {
    #[inline]
    pub fn get(&self, q: usize, i: usize, j: usize) -> f64 {
        self.maps[(q * self.height + i) * self.width + j]
    }

    pub fn plane(&self, q: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.maps[q * n..(q + 1) * n]
    }
}

pub fn coefficient_maps(sigma: &BlurMap, dict: &KernelDictionary) -> CoefficientMaps {
    let (h, w) = sigma.dims();
    let n = h * w;
    let count = dict.retained;
    let mut maps = vec![0.0; count * n];
    let mut identity = vec![false; n];
    let mut evaluations = 0;

    let mut fill = |idx: usize, s: f64, coeffs: Option<&[f64]>| {
        if s <= SIGMA_EPS {
            identity[idx] = true;
        } else if let Some(u) = coeffs {
            for (q, v) in u.iter().enumerate() {
                maps[q * n + idx] = *v;
            }
        }
    };

    if sigma.is_row_constant() {
        for i in 0..h {
            let s = sigma.get(i, 0);
            let coeffs = if s > SIGMA_EPS {
                evaluations += 1;
                Some(dict.coefficients(s))
            } else {
                None
            };
            for j in 0..w {
                fill(i * w + j, s, coeffs.as_deref());
            }
        }
    } else {
        for idx in 0..n {
            let s = sigma.values[idx];
            let coeffs = if s > SIGMA_EPS {
                evaluations += 1;
                Some(dict.coefficients(s))
            } else {
                None
            };
            fill(idx, s, coeffs.as_deref());
        }
    }

    CoefficientMaps {
        count,
        height: h,
        width: w,
        maps,
        identity,
        evaluations,
    }
}

/// Eigen-kernels widened to `f64` once.
pub(crate) fn eigen_kernels_f64(dict: &KernelDictionary) -> Vec<Vec<f64>> {
    (0..dict.retained)
        .map(|q| dict.eigen_kernel(q).iter().map(|&v| f64::from(v)).collect())
        .collect()
}

/// Fast-path forward on `f64` features. When `keep_responses` is set, the
/// per-eigen-kernel responses `x ∗ G_q` are returned (`q`-major) for reuse in
/// the backward pass.
pub(crate) fn approx_forward64(
    x: &Tensor64,
    coeffs: &CoefficientMaps,
    kernels: &[Vec<f64>],
    ksize: usize,
    padding: PaddingMode,
    keep_responses: bool,
) -> (Tensor64, Vec<Tensor64>) {
    let (ch, h, w) = x.shape();
    let n = h * w;
    let mut out = Tensor64::zeros(ch, h, w);
    let mut responses: Vec<Tensor64> = if keep_responses {
        (0..kernels.len()).map(|_| Tensor64::zeros(ch, h, w)).collect()
    } else {
        Vec::new()
    };
    let mut padded = Vec::new();
    let mut scratch = vec![0.0; n];
    for c in 0..ch {
        let plane = x.channel(c);
        pad_plane(plane, h, w, ksize / 2, padding, &mut padded);
        let dst = out.channel_mut(c);
        for (q, kernel) in kernels.iter().enumerate() {
            scratch.fill(0.0);
            correlate_padded_acc(&padded, h, w, kernel, ksize, &mut scratch);
            let u = coeffs.plane(q);
            for idx in 0..n {
                dst[idx] += u[idx] * scratch[idx];
            }
            if keep_responses {
                responses[q].channel_mut(c).copy_from_slice(&scratch);
            }
        }
        for idx in 0..n {
            if coeffs.identity[idx] {
                dst[idx] = plane[idx];
            }
        }
    }
    (out, responses)
}

pub fn filter_approx(
    x: &Tensor,
    sigma: &BlurMap,
    dict: &KernelDictionary,
    padding: PaddingMode,
) -> Result<Tensor> {
    check_dims(x.shape(), sigma)?;
    let coeffs = coefficient_maps(sigma, dict);
    let kernels = eigen_kernels_f64(dict);
    let (out, _) = approx_forward64(&x.to_f64(), &coeffs, &kernels, dict.kernel_size(), padding, false);
    Ok(out.to_f32())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub samples_ms: Vec<f64>,
}

impl TimingStats {
    fn from_samples(mut samples_ms: Vec<f64>) -> Self {
        let mut sorted = samples_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let mid = sorted.len() / 2;
        let median_ms = if sorted.len() % 2 == 1 {
            sorted[mid]
        } else {
            0.5 * (sorted[mid - 1] + sorted[mid])
        };
        samples_ms.shrink_to_fit();
        Self {
            median_ms,
            min_ms: sorted[0],
            max_ms: *sorted.last().unwrap(),
            samples_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub shape: [usize; 3],
    pub kernel_size: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_step: f64,
    pub retained: usize,
    pub reps: usize,
    pub seed: u64,
    pub exact: TimingStats,
    pub approx: TimingStats,
    pub speedup: f64,
    pub input_checksum: String,
    pub relative_l2_error: f64,
}

impl BenchReport {
    /// `rep,exact_ms,approx_ms` rows.
    pub fn timings_csv(&self) -> String {
        let mut s = String::from("rep,exact_ms,approx_ms\n");
        for (i, (e, a)) in self.exact.samples_ms.iter().zip(&self.approx.samples_ms).enumerate() {
            s.push_str(&format!("{i},{e},{a}\n"));
        }
        s
    }
}

/// FNV-1a over the little-endian bytes of every value.
pub fn checksum(values: &[f32]) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_le_bytes() {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{hash:016x}")
}

/// Deterministic benchmark input: uniform features in `[-1, 1]` and a
/// row-constant blur map drawn from the dictionary range.
pub fn bench_inputs(shape: (usize, usize, usize), dict: &KernelDictionary, seed: u64) -> (Tensor, BlurMap) {
    let (ch, h, w) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..ch * h * w).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
    let (lo, hi) = (dict.config.sigma_min, dict.config.sigma_max);
    let rows: Vec<f64> = (0..h).map(|_| rng.random_range(lo..=hi)).collect();
    let sigma = Map2::from_fn(h, w, |i, _| rows[i]);
    (Tensor::from_vec(ch, h, w, data).expect("sized above"), sigma)
}

pub fn bench_filter(
    shape: (usize, usize, usize),
    dict: &KernelDictionary,
    reps: usize,
    seed: u64,
) -> Result<BenchReport> {
    if reps < 3 {
        return Err(crate::error::invalid("bench needs at least 3 repetitions"));
    }
    let (x, sigma) = bench_inputs(shape, dict, seed);
    let padding = PaddingMode::Replicate;
    let mut exact_ms = Vec::with_capacity(reps);
    let mut approx_ms = Vec::with_capacity(reps);
    let mut exact_out = None;
    let mut approx_out = None;
    for _ in 0..reps {
        let t = Instant::now();
        let y = filter_exact(&x, &sigma, dict.kernel_size(), dict.config.mode, padding)?;
        exact_ms.push(t.elapsed().as_secs_f64() * 1e3);
        exact_out = Some(y);

        let t = Instant::now();
        let y = filter_approx(&x, &sigma, dict, padding)?;
        approx_ms.push(t.elapsed().as_secs_f64() * 1e3);
        approx_out = Some(y);
    }
    let exact = TimingStats::from_samples(exact_ms);
    let approx = TimingStats::from_samples(approx_ms);
    let err = crate::tensor::relative_l2(
        approx_out.expect("reps >= 3").data(),
        exact_out.expect("reps >= 3").data(),
    );
    Ok(BenchReport {
        shape: [shape.0, shape.1, shape.2],
        kernel_size: dict.kernel_size(),
        sigma_min: dict.config.sigma_min,
        sigma_max: dict.config.sigma_max,
        sigma_step: dict.config.sigma_step,
        retained: dict.retained,
        reps,
        seed,
        speedup: exact.median_ms / approx.median_ms.max(1e-9),
        exact,
        approx,
        input_checksum: checksum(x.data()),
        relative_l2_error: err,
    })
}
