//! One perspective-guided convolution block:
//! perspective → blur map → low-rank smoothing → dilated 3×3 convolution,
//! with the block input concatenated in front of the convolution output.

use crate::conv::PaddingMode;
use crate::error::{mismatch, Result};
use crate::kernel_dictionary::{KernelDictionary, SIGMA_EPS};
use crate::map::{Map2, PerspectiveMap};
use crate::nn::{hash_signs, Conv2d, ConvGrads};
use crate::perspective::{blur_backward, blur_forward, BlurForward, PerspectiveParams};
use crate::tensor::Tensor64;
use crate::variant_filter::{approx_forward64, coefficient_maps, CoefficientMaps};

pub const BLOCK_DILATION: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct PgcBlockParams {
    pub perspective: PerspectiveParams,
    /// 3×3, dilation 2, zero padding 2 (same spatial size).
    pub conv: Conv2d,
}

impl PgcBlockParams {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        Self {
            perspective: PerspectiveParams::default(),
            conv: Conv2d::zeros(in_ch, out_ch, 3, 1, BLOCK_DILATION, BLOCK_DILATION),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.in_ch + self.conv.out_ch
    }

    pub fn param_count(&self) -> usize {
        4 + self.conv.param_count()
    }
}

#[derive(Debug, Clone)]
pub struct PgcBlockGrads {
    pub perspective: PerspectiveParams,
    pub conv: ConvGrads,
}

/// Forward intermediates needed by [`pgc_block_backward`].
#[derive(Debug, Clone)]
pub struct BlockCache {
    pub blur: BlurForward,
    pub coeffs: CoefficientMaps,
    /// `x ∗ G_q` per eigen-kernel.
    pub responses: Vec<Tensor64>,
    pub smoothed: Tensor64,
}

pub(crate) fn smoothing_kernels(dict: &KernelDictionary) -> Vec<Vec<f64>> {
    crate::variant_filter::eigen_kernels_f64(dict)
}

pub fn pgc_block_forward(
    x: &Tensor64,
    p: &PerspectiveMap,
    params: &PgcBlockParams,
    dict: &KernelDictionary,
) -> Result<Tensor64> {
    let kernels = smoothing_kernels(dict);
    Ok(forward_cached(x, p, params, dict, &kernels)?.0)
}

pub(crate) fn forward_cached(
    x: &Tensor64,
    p: &PerspectiveMap,
    params: &PgcBlockParams,
    dict: &KernelDictionary,
    kernels: &[Vec<f64>],
) -> Result<(Tensor64, BlockCache)> {
    let (ch, h, w) = x.shape();
    if ch != params.conv.in_ch {
        return Err(mismatch(format!(
            "block expects {} channels, got {ch}",
            params.conv.in_ch
        )));
    }
    if p.dims() != (h, w) {
        return Err(mismatch(format!(
            "perspective map is {}x{}, features are {h}x{w}",
            p.height, p.width
        )));
    }
    let blur = blur_forward(p, &params.perspective);
    let coeffs = coefficient_maps(&blur.sigma, dict);
    let (smoothed, responses) =
        approx_forward64(x, &coeffs, kernels, dict.kernel_size(), PaddingMode::Replicate, true);
    let y = params.conv.forward(&smoothed)?;
    let out = x.concat_channels(&y)?;
    Ok((
        out,
        BlockCache {
            blur,
            coeffs,
            responses,
            smoothed,
        },
    ))
}

/// Returns the gradient with respect to the block input, the parameter
/// gradients, and the gradient with respect to the perspective map.
pub fn pgc_block_backward(
    x: &Tensor64,
    p: &PerspectiveMap,
    params: &PgcBlockParams,
    dict: &KernelDictionary,
    grad_out: &Tensor64,
) -> Result<(Tensor64, PgcBlockGrads, Map2)> {
    let kernels = smoothing_kernels(dict);
    let (_, cache) = forward_cached(x, p, params, dict, &kernels)?;
    backward_cached(x, p, params, dict, &kernels, &cache, grad_out)
}

pub(crate) fn backward_cached(
    x: &Tensor64,
    p: &PerspectiveMap,
    params: &PgcBlockParams,
    dict: &KernelDictionary,
    kernels: &[Vec<f64>],
    cache: &BlockCache,
    grad_out: &Tensor64,
) -> Result<(Tensor64, PgcBlockGrads, Map2)> {
    let (ch, h, w) = x.shape();
    let n = h * w;
    if grad_out.shape() != (params.out_channels(), h, w) {
        return Err(mismatch("block output gradient has the wrong shape"));
    }
    let mut grad_x = grad_out.slice_channels(0, ch);
    let grad_y = grad_out.slice_channels(ch, params.conv.out_ch);

    let mut conv_grads = params.conv.zero_grads();
    let grad_smoothed = params.conv.backward(&cache.smoothed, &grad_y, &mut conv_grads);

    // Coefficient-map gradients: Σ_c ∂L/∂x̃_c · (x_c ∗ G_q).
    let count = cache.coeffs.count;
    let mut grad_u = vec![0.0; count * n];
    for q in 0..count {
        let resp = &cache.responses[q];
        let gu = &mut grad_u[q * n..(q + 1) * n];
        for c in 0..ch {
            let r = resp.channel(c);
            let g = grad_smoothed.channel(c);
            for idx in 0..n {
                if !cache.coeffs.identity[idx] {
                    gu[idx] += g[idx] * r[idx];
                }
            }
        }
    }

    // Input gradient through the eigen-kernel correlations.
    let ksize = dict.kernel_size();
    let mut gated = vec![0.0; n];
    for c in 0..ch {
        let g = grad_smoothed.channel(c);
        let gx = grad_x.channel_mut(c);
        for (q, kernel) in kernels.iter().enumerate() {
            let u = cache.coeffs.plane(q);
            for idx in 0..n {
                gated[idx] = if cache.coeffs.identity[idx] { 0.0 } else { u[idx] * g[idx] };
            }
            crate::conv::correlate_plane_adjoint_acc(&gated, h, w, kernel, ksize, PaddingMode::Replicate, gx);
        }
        for idx in 0..n {
            if cache.coeffs.identity[idx] {
                gx[idx] += g[idx];
            }
        }
    }

    // Blur-map gradient via d⟨G_q, G_σ⟩/dσ, evaluated once per distinct sigma row
    // when the map is row-constant.
    let sigma = &cache.blur.sigma;
    let mut grad_sigma = Map2::zeros(h, w);
    let row_constant = sigma.is_row_constant();
    let mut row_derivs: Option<(usize, Vec<f64>)> = None;
    for idx in 0..n {
        let s = sigma.values[idx];
        if s <= SIGMA_EPS {
            continue;
        }
        let derivs = if row_constant {
            let row = idx / w;
            if row_derivs.as_ref().map(|(r, _)| *r) != Some(row) {
                row_derivs = Some((row, dict.coefficient_derivatives(s)));
            }
            row_derivs.as_ref().map(|(_, d)| d.clone()).unwrap_or_default()
        } else {
            dict.coefficient_derivatives(s)
        };
        grad_sigma.values[idx] = derivs
            .iter()
            .enumerate()
            .map(|(q, d)| d * grad_u[q * n + idx])
            .sum();
    }
    let (persp_grads, grad_p) = blur_backward(p, &params.perspective, &cache.blur, &grad_sigma)?;

    Ok((
        grad_x,
        PgcBlockGrads {
            perspective: persp_grads,
            conv: conv_grads,
        },
        grad_p,
    ))
}

impl BlockCache {
    /// Folds every discrete branch decision (hinge, Dirac bypass, sigma clamp,
    /// sigmoid saturation) into `hash`.
    pub(crate) fn hash_branches(&self, hash: &mut u64, dict: &KernelDictionary) {
        hash_signs(hash, &self.blur.pre_hinge.values);
        let (lo, hi) = (dict.config.sigma_min, dict.config.sigma_max);
        let codes: Vec<f64> = self
            .blur
            .sigma
            .values
            .iter()
            .flat_map(|&s| [s - SIGMA_EPS, s - lo, hi - s])
            .collect();
        hash_signs(hash, &codes);
        let sat: Vec<f64> = self
            .blur
            .p_norm
            .values
            .iter()
            .map(|&v| if v > 1.0 - 1e-12 || v < 1e-12 { 1.0 } else { -1.0 })
            .collect();
        hash_signs(hash, &sat);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel_dictionary::{build_dictionary, DictionaryConfig};
    use crate::perspective::{blur_from_perspective, normalize_perspective};
    use crate::variant_filter::filter_approx;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(ch: usize, h: usize, w: usize, seed: u64) -> Tensor64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = ch * h * w;
        Tensor64::from_vec(ch, h, w, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn ramp(h: usize, w: usize) -> Map2 {
        Map2::from_fn(h, w, |i, j| 1.0 + 0.3 * i as f64 + 0.01 * j as f64)
    }

    fn block(in_ch: usize, out_ch: usize, seed: u64) -> PgcBlockParams {
        let mut b = PgcBlockParams::zeros(in_ch, out_ch);
        b.conv.init_normal(0.5, &mut ChaCha8Rng::seed_from_u64(seed));
        b.conv.bias.iter_mut().enumerate().for_each(|(k, v)| *v = 0.1 * k as f64);
        b.perspective = PerspectiveParams {
            alpha: 0.8,
            beta: 2.0,
            a: 1.5,
            p0: 0.1,
        };
        b
    }

    #[test]
    fn zero_conv_appends_zero_channels() {
        let dict = build_dictionary(&DictionaryConfig::default()).unwrap();
        let x = random(3, 8, 9, 1);
        let params = PgcBlockParams::zeros(3, 2);
        let out = pgc_block_forward(&x, &ramp(8, 9), &params, &dict).unwrap();
        assert_eq!(out.shape(), (5, 8, 9));
        assert_eq!(&out.data()[..x.data().len()], x.data());
        assert!(out.data()[x.data().len()..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn no_blur_reduces_to_plain_dilated_conv() {
        let dict = build_dictionary(&DictionaryConfig::default()).unwrap();
        let x = random(2, 7, 8, 2);
        let mut params = block(2, 3, 3);
        params.perspective.a = 0.0;
        let out = pgc_block_forward(&x, &ramp(7, 8), &params, &dict).unwrap();
        let expect = x.concat_channels(&params.conv.forward(&x).unwrap()).unwrap();
        assert_eq!(out, expect);
    }

    #[test]
    fn matches_composition_of_parts() {
        let dict = build_dictionary(&DictionaryConfig::default()).unwrap();
        let x = random(2, 9, 10, 4);
        let p = ramp(9, 10);
        let params = block(2, 3, 5);
        let sigma = blur_from_perspective(&normalize_perspective(&p, &params.perspective), &params.perspective);
        let smoothed = filter_approx(&x.to_f32(), &sigma, &dict, PaddingMode::Replicate).unwrap().to_f64();
        let y = params.conv.forward(&smoothed).unwrap();
        let out = pgc_block_forward(&x, &p, &params, &dict).unwrap();
        assert_eq!(&out.data()[..x.data().len()], x.data());
        for (a, b) in out.data()[x.data().len()..].iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let dict = build_dictionary(&DictionaryConfig::default()).unwrap();
        let x = random(2, 6, 6, 6);
        let p = ramp(6, 6);
        let params = block(2, 2, 7);
        let g = random(4, 6, 6, 8);
        let objective = |x: &Tensor64, p: &Map2, params: &PgcBlockParams| -> f64 {
            let out = pgc_block_forward(x, p, params, &dict).unwrap();
            out.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
        };
        let (gx, grads, gp) = pgc_block_backward(&x, &p, &params, &dict, &g).unwrap();
        let h = 1e-4;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(err <= 1e-4, "analytic {analytic} numeric {numeric}");
        };
        for i in (0..x.data().len()).step_by(5) {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            check(gx.data()[i], objective(&xp, &p, &params), objective(&xm, &p, &params));
        }
        for i in (0..params.conv.weight.len()).step_by(3) {
            let (mut pp, mut pm) = (params.clone(), params.clone());
            pp.conv.weight[i] += h;
            pm.conv.weight[i] -= h;
            check(grads.conv.weight[i], objective(&x, &p, &pp), objective(&x, &p, &pm));
        }
        let analytic = grads.perspective.to_array();
        for k in 0..4 {
            let mut a = params.perspective.to_array();
            let mut b = a;
            a[k] += h;
            b[k] -= h;
            let (mut pp, mut pm) = (params.clone(), params.clone());
            pp.perspective = PerspectiveParams::from_array(a);
            pm.perspective = PerspectiveParams::from_array(b);
            check(analytic[k], objective(&x, &p, &pp), objective(&x, &p, &pm));
        }
        for i in 0..p.values.len() {
            let (mut pp, mut pm) = (p.clone(), p.clone());
            pp.values[i] += h;
            pm.values[i] -= h;
            check(gp.values[i], objective(&x, &pp, &params), objective(&x, &pm, &params));
        }
    }
}
