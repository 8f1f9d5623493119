//! Perspective normalization, blur maps and synthetic perspective fields.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::map::{BlurMap, Map2, PerspectiveMap};

/// Sigmoid shape (`alpha`, `beta`) and affine hinge (`a`, `p0`) that turn a
/// raw perspective map into a blur map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerspectiveParams {
    pub alpha: f64,
    pub beta: f64,
    pub a: f64,
    pub p0: f64,
}

impl Default for PerspectiveParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.0,
            a: 1.0,
            p0: 0.0,
        }
    }
}

impl PerspectiveParams {
    /// Places the sigmoid's near-linear region over the observed range:
    /// `beta = mean(p)`, `alpha = 4 / (max − min)`; `a = 1`, `p0 = 0`.
    pub fn from_observed(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let alpha = if span.is_finite() && span > 1e-12 { 4.0 / span } else { 1.0 };
        Self {
            alpha,
            beta: if mean.is_finite() { mean } else { 0.0 },
            a: 1.0,
            p0: 0.0,
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.alpha, self.beta, self.a, self.p0]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self {
            alpha: v[0],
            beta: v[1],
            a: v[2],
            p0: v[3],
        }
    }
}

const EXP_LIMIT: f64 = 30.0;

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z.clamp(-EXP_LIMIT, EXP_LIMIT)).exp())
}

pub fn normalize_perspective(p: &PerspectiveMap, params: &PerspectiveParams) -> PerspectiveMap {
    p.map(|v| sigmoid(params.alpha * (v - params.beta)))
}

pub fn blur_from_perspective(p_norm: &PerspectiveMap, params: &PerspectiveParams) -> BlurMap {
    p_norm.map(|v| (params.a * (v - params.p0)).max(0.0))
}

/// Replaces every row by its mean. Rows that are already constant are kept
/// bit-for-bit, so the operation is exactly idempotent.
pub fn row_mean_collapse(m: &PerspectiveMap) -> PerspectiveMap {
    let mut out = m.clone();
    for i in 0..m.height {
        let row = m.row(i);
        if row.iter().all(|v| v.to_bits() == row[0].to_bits()) {
            continue;
        }
        let mean = row.iter().sum::<f64>() / m.width as f64;
        out.values[i * m.width..(i + 1) * m.width].fill(mean);
    }
    out
}

/// Linear row ramp `base + slope · i` plus seeded uniform noise.
pub fn synth_perspective(
    height: usize,
    width: usize,
    base: f64,
    slope: f64,
    noise_amp: f64,
    seed: u64,
) -> Result<PerspectiveMap> {
    if height == 0 || width == 0 {
        return Err(invalid("perspective map dims must be >= 1"));
    }
    if !(base > 0.0) || base + slope * (height as f64 - 1.0) <= 0.0 {
        return Err(invalid(format!(
            "ramp base={base} slope={slope} yields nonpositive perspective values"
        )));
    }
    if noise_amp < 0.0 {
        return Err(invalid("noise amplitude must be nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(height * width);
    for i in 0..height {
        for _ in 0..width {
            let noise = if noise_amp > 0.0 {
                rng.random_range(-noise_amp..=noise_amp)
            } else {
                0.0
            };
            values.push(base + slope * i as f64 + noise);
        }
    }
    if values.iter().any(|&v| v <= 0.0) {
        return Err(invalid("noise pushed perspective values to nonpositive"));
    }
    Map2::from_vec(height, width, values)
}

/// Intermediates of the perspective → blur chain, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BlurForward {
    pub p_norm: Map2,
    /// `a · (p̃ − p0)` before the hinge.
    pub pre_hinge: Map2,
    pub sigma: BlurMap,
}

pub fn blur_forward(p: &PerspectiveMap, params: &PerspectiveParams) -> BlurForward {
    let p_norm = normalize_perspective(p, params);
    let pre_hinge = p_norm.map(|v| params.a * (v - params.p0));
    let sigma = pre_hinge.map(|v| v.max(0.0));
    BlurForward {
        p_norm,
        pre_hinge,
        sigma,
    }
}

/// Back-propagates a blur-map gradient to the four parameters and to `p`.
/// The hinge subgradient at zero is zero.
pub fn blur_backward(
    p: &PerspectiveMap,
    params: &PerspectiveParams,
    fwd: &BlurForward,
    grad_sigma: &Map2,
) -> Result<(PerspectiveParams, Map2)> {
    if grad_sigma.dims() != p.dims() {
        return Err(mismatch("blur gradient does not match perspective map"));
    }
    let mut grads = PerspectiveParams {
        alpha: 0.0,
        beta: 0.0,
        a: 0.0,
        p0: 0.0,
    };
    let mut grad_p = Map2::zeros(p.height, p.width);
    for idx in 0..p.values.len() {
        if fwd.pre_hinge.values[idx] <= 0.0 {
            continue;
        }
        let gs = grad_sigma.values[idx];
        let pn = fwd.p_norm.values[idx];
        grads.a += gs * (pn - params.p0);
        grads.p0 -= gs * params.a;
        let z = params.alpha * (p.values[idx] - params.beta);
        // Saturated exponent means the forward value did not move.
        let gz = if z.abs() >= EXP_LIMIT { 0.0 } else { gs * params.a * pn * (1.0 - pn) };
        grads.alpha += gz * (p.values[idx] - params.beta);
        grads.beta -= gz * params.alpha;
        grad_p.values[idx] = gz * params.alpha;
    }
    Ok((grads, grad_p))
}

/// Adjoint of [`row_mean_collapse`] (it is self-adjoint).
pub fn row_mean_collapse_adjoint(g: &Map2) -> Map2 {
    row_mean_collapse(g)
}
