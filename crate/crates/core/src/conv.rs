//! Plane-level correlation primitives shared by the smoothing paths and the
//! network layers. All accumulation is in `f64` with a fixed summation order.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum PaddingMode {
    #[default]
    Replicate,
    Zero,
}

/// Copies `plane` into a `(h + 2r) × (w + 2r)` buffer with the requested border.
pub fn pad_plane(plane: &[f64], h: usize, w: usize, r: usize, padding: PaddingMode, out: &mut Vec<f64>) {
    let pw = w + 2 * r;
    let ph = h + 2 * r;
    out.clear();
    out.resize(ph * pw, 0.0);
    for pi in 0..ph {
        let src_i = pi as isize - r as isize;
        let row_inside = src_i >= 0 && (src_i as usize) < h;
        if !row_inside && padding == PaddingMode::Zero {
            continue;
        }
        let si = src_i.clamp(0, h as isize - 1) as usize;
        let src = &plane[si * w..(si + 1) * w];
        let dst = &mut out[pi * pw..(pi + 1) * pw];
        dst[r..r + w].copy_from_slice(src);
        if padding == PaddingMode::Replicate {
            dst[..r].fill(src[0]);
            dst[r + w..].fill(src[w - 1]);
        }
    }
}

/// `out(i,j) += Σ kernel(dk,dl) · in(i+dk, j+dl)` over a `ksize × ksize`
/// window centered at `(i,j)`, reading from an already padded plane.
pub fn correlate_padded_acc(padded: &[f64], h: usize, w: usize, kernel: &[f64], ksize: usize, out: &mut [f64]) {
    let pw = w + ksize - 1;
    for dk in 0..ksize {
        for dl in 0..ksize {
            let wgt = kernel[dk * ksize + dl];
            if wgt == 0.0 {
                continue;
            }
            for i in 0..h {
                let src = &padded[(i + dk) * pw + dl..(i + dk) * pw + dl + w];
                let dst = &mut out[i * w..(i + 1) * w];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wgt * s;
                }
            }
        }
    }
}

/// Same-size correlation of a single plane.
pub fn correlate_plane(plane: &[f64], h: usize, w: usize, kernel: &[f64], ksize: usize, padding: PaddingMode) -> Vec<f64> {
    let mut padded = Vec::new();
    pad_plane(plane, h, w, ksize / 2, padding, &mut padded);
    let mut out = vec![0.0; h * w];
    correlate_padded_acc(&padded, h, w, kernel, ksize, &mut out);
    out
}

/// Accumulates the adjoint of [`correlate_plane`] applied to `grad_out`
/// into `grad_in`.
pub fn correlate_plane_adjoint_acc(
    grad_out: &[f64],
    h: usize,
    w: usize,
    kernel: &[f64],
    ksize: usize,
    padding: PaddingMode,
    grad_in: &mut [f64],
) {
    let r = ksize / 2;
    let pw = w + 2 * r;
    let ph = h + 2 * r;
    let mut gpad = vec![0.0; ph * pw];
    for dk in 0..ksize {
        for dl in 0..ksize {
            let wgt = kernel[dk * ksize + dl];
            if wgt == 0.0 {
                continue;
            }
            for i in 0..h {
                let src = &grad_out[i * w..(i + 1) * w];
                let dst = &mut gpad[(i + dk) * pw + dl..(i + dk) * pw + dl + w];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wgt * s;
                }
            }
        }
    }
    for pi in 0..ph {
        let src_i = pi as isize - r as isize;
        let inside_i = src_i >= 0 && (src_i as usize) < h;
        if !inside_i && padding == PaddingMode::Zero {
            continue;
        }
        let si = src_i.clamp(0, h as isize - 1) as usize;
        for pj in 0..pw {
            let src_j = pj as isize - r as isize;
            let inside_j = src_j >= 0 && (src_j as usize) < w;
            if !inside_j && padding == PaddingMode::Zero {
                continue;
            }
            let sj = src_j.clamp(0, w as isize - 1) as usize;
            grad_in[si * w + sj] += gpad[pi * pw + pj];
        }
    }
}
