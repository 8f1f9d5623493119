//! Minimal layers with hand-written backward passes, shared by the density
//! network and the perspective estimator. Everything runs in `f64`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{mismatch, Result};
use crate::tensor::Tensor64;

/// 2-D convolution (cross-correlation) with zero padding.
/// Weights are laid out `[out][in][k][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_ch: usize, out_ch: usize, ksize: usize, stride: usize, dilation: usize, pad: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            ksize,
            stride,
            dilation,
            pad,
            weight: vec![0.0; out_ch * in_ch * ksize * ksize],
            bias: vec![0.0; out_ch],
        }
    }

    /// Weights drawn from `N(0, std²)`, zero bias.
    pub fn init_normal<R: Rng>(&mut self, std: f64, rng: &mut R) {
        let normal = Normal::new(0.0, std).expect("finite std");
        self.weight.iter_mut().for_each(|w| *w = normal.sample(rng));
        self.bias.fill(0.0);
    }

    /// He initialization for rectifier layers.
    pub fn init_he<R: Rng>(&mut self, rng: &mut R) {
        let fan_in = (self.in_ch * self.ksize * self.ksize) as f64;
        self.init_normal((2.0 / fan_in).sqrt(), rng);
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    #[inline]
    fn widx(&self, o: usize, c: usize, ki: usize, kj: usize) -> usize {
        ((o * self.in_ch + c) * self.ksize + ki) * self.ksize + kj
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.ksize - 1) + 1;
        let oh = (h + 2 * self.pad - span) / self.stride + 1;
        let ow = (w + 2 * self.pad - span) / self.stride + 1;
        (oh, ow)
    }

    /// Output columns `j` whose source column `j·stride + off − pad` is in `[0, w)`.
    fn valid_cols(&self, off: usize, w: usize, ow: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = off as isize - self.pad as isize;
        // j·s + shift >= 0  and  j·s + shift <= w − 1
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        let hi_excl = if (w as isize - 1 - shift) < 0 {
            0
        } else {
            (w as isize - 1 - shift) / s + 1
        };
        (lo.max(0) as usize, (hi_excl.max(0) as usize).min(ow))
    }

    pub fn forward(&self, x: &Tensor64) -> Result<Tensor64> {
        let (ch, h, w) = x.shape();
        if ch != self.in_ch {
            return Err(mismatch(format!("conv expects {} input channels, got {ch}", self.in_ch)));
        }
        let (oh, ow) = self.output_dims(h, w);
        let mut out = Tensor64::zeros(self.out_ch, oh, ow);
        for o in 0..self.out_ch {
            let dst = out.channel_mut(o);
            dst.fill(self.bias[o]);
            for c in 0..self.in_ch {
                let src = x.channel(c);
                for ki in 0..self.ksize {
                    for kj in 0..self.ksize {
                        let wgt = self.weight[self.widx(o, c, ki, kj)];
                        if wgt == 0.0 {
                            continue;
                        }
                        let (j0, j1) = self.valid_cols(kj * self.dilation, w, ow);
                        for i in 0..oh {
                            let si = (i * self.stride + ki * self.dilation) as isize - self.pad as isize;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            let srow = &src[si as usize * w..(si as usize + 1) * w];
                            let drow = &mut dst[i * ow..(i + 1) * ow];
                            let base = kj * self.dilation;
                            for j in j0..j1 {
                                drow[j] += wgt * srow[j * self.stride + base - self.pad];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Returns the input gradient and accumulates parameter gradients.
    pub fn backward(&self, x: &Tensor64, grad_out: &Tensor64, grads: &mut ConvGrads) -> Tensor64 {
        let (_, h, w) = x.shape();
        let (_, oh, ow) = grad_out.shape();
        let mut grad_x = Tensor64::zeros(self.in_ch, h, w);
        for o in 0..self.out_ch {
            let g = grad_out.channel(o);
            grads.bias[o] += g.iter().sum::<f64>();
            for c in 0..self.in_ch {
                let src = x.channel(c);
                for ki in 0..self.ksize {
                    for kj in 0..self.ksize {
                        let widx = self.widx(o, c, ki, kj);
                        let wgt = self.weight[widx];
                        let (j0, j1) = self.valid_cols(kj * self.dilation, w, ow);
                        let base = kj * self.dilation;
                        let mut gw = 0.0;
                        for i in 0..oh {
                            let si = (i * self.stride + ki * self.dilation) as isize - self.pad as isize;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            let si = si as usize;
                            let grow = &g[i * ow..(i + 1) * ow];
                            for j in j0..j1 {
                                let sj = j * self.stride + base - self.pad;
                                gw += grow[j] * src[si * w + sj];
                            }
                            if wgt != 0.0 {
                                let gx = grad_x.channel_mut(c);
                                for j in j0..j1 {
                                    let sj = j * self.stride + base - self.pad;
                                    gx[si * w + sj] += wgt * grow[j];
                                }
                            }
                        }
                        grads.weight[widx] += gw;
                    }
                }
            }
        }
        grad_x
    }

    pub fn zero_grads(&self) -> ConvGrads {
        ConvGrads {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }
}

/// Transposed convolution, `k = 3`, stride 2, padding 1, output padding 1:
/// doubles both spatial dims. Weights are laid out `[in][out][k][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

const UP_K: usize = 3;
const UP_PAD: isize = 1;

impl ConvTranspose2d {
    pub fn zeros(in_ch: usize, out_ch: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            weight: vec![0.0; in_ch * out_ch * UP_K * UP_K],
            bias: vec![0.0; out_ch],
        }
    }

    pub fn init_he<R: Rng>(&mut self, rng: &mut R) {
        // Each output sees about in_ch · k² / stride² inputs.
        let fan_in = (self.in_ch * UP_K * UP_K) as f64 / 4.0;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        self.weight.iter_mut().for_each(|w| *w = normal.sample(rng));
        self.bias.fill(0.0);
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    #[inline]
    fn widx(&self, c: usize, o: usize, ki: usize, kj: usize) -> usize {
        ((c * self.out_ch + o) * UP_K + ki) * UP_K + kj
    }

    pub fn forward(&self, x: &Tensor64) -> Result<Tensor64> {
        let (ch, h, w) = x.shape();
        if ch != self.in_ch {
            return Err(mismatch(format!(
                "transposed conv expects {} input channels, got {ch}",
                self.in_ch
            )));
        }
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor64::zeros(self.out_ch, oh, ow);
        for o in 0..self.out_ch {
            out.channel_mut(o).fill(self.bias[o]);
        }
        for c in 0..self.in_ch {
            let src = x.channel(c);
            for o in 0..self.out_ch {
                for ki in 0..UP_K {
                    for kj in 0..UP_K {
                        let wgt = self.weight[self.widx(c, o, ki, kj)];
                        if wgt == 0.0 {
                            continue;
                        }
                        let dst = out.channel_mut(o);
                        for i in 0..h {
                            let ti = 2 * i as isize + ki as isize - UP_PAD;
                            if ti < 0 || ti >= oh as isize {
                                continue;
                            }
                            for j in 0..w {
                                let tj = 2 * j as isize + kj as isize - UP_PAD;
                                if tj < 0 || tj >= ow as isize {
                                    continue;
                                }
                                dst[ti as usize * ow + tj as usize] += wgt * src[i * w + j];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor64, grad_out: &Tensor64, grads: &mut ConvGrads) -> Tensor64 {
        let (_, h, w) = x.shape();
        let (oh, ow) = (2 * h, 2 * w);
        let mut grad_x = Tensor64::zeros(self.in_ch, h, w);
        for o in 0..self.out_ch {
            grads.bias[o] += grad_out.channel(o).iter().sum::<f64>();
        }
        for c in 0..self.in_ch {
            let src = x.channel(c);
            for o in 0..self.out_ch {
                let g = grad_out.channel(o);
                for ki in 0..UP_K {
                    for kj in 0..UP_K {
                        let widx = self.widx(c, o, ki, kj);
                        let wgt = self.weight[widx];
                        let mut gw = 0.0;
                        let gx = grad_x.channel_mut(c);
                        for i in 0..h {
                            let ti = 2 * i as isize + ki as isize - UP_PAD;
                            if ti < 0 || ti >= oh as isize {
                                continue;
                            }
                            for j in 0..w {
                                let tj = 2 * j as isize + kj as isize - UP_PAD;
                                if tj < 0 || tj >= ow as isize {
                                    continue;
                                }
                                let gv = g[ti as usize * ow + tj as usize];
                                gw += gv * src[i * w + j];
                                gx[i * w + j] += wgt * gv;
                            }
                        }
                        grads.weight[widx] += gw;
                    }
                }
            }
        }
        grad_x
    }

    pub fn zero_grads(&self) -> ConvGrads {
        ConvGrads {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }
}

pub fn relu(x: &Tensor64) -> Tensor64 {
    x.map(|v| v.max(0.0))
}

/// Gradient through a rectifier given its pre-activation.
pub fn relu_backward(pre: &Tensor64, grad: &Tensor64) -> Tensor64 {
    let mut g = grad.clone();
    for (gv, &p) in g.data_mut().iter_mut().zip(pre.data()) {
        if p <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

pub fn leaky_relu(x: &Tensor64, slope: f64) -> Tensor64 {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(pre: &Tensor64, grad: &Tensor64, slope: f64) -> Tensor64 {
    let mut g = grad.clone();
    for (gv, &p) in g.data_mut().iter_mut().zip(pre.data()) {
        if p <= 0.0 {
            *gv *= slope;
        }
    }
    g
}

/// 2×2 average pooling, stride 2.
pub fn avg_pool2(x: &Tensor64) -> Result<Tensor64> {
    let (ch, h, w) = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(mismatch(format!("cannot 2x pool a {h}x{w} map")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor64::zeros(ch, oh, ow);
    for c in 0..ch {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for i in 0..oh {
            for j in 0..ow {
                let a = src[2 * i * w + 2 * j] + src[2 * i * w + 2 * j + 1];
                let b = src[(2 * i + 1) * w + 2 * j] + src[(2 * i + 1) * w + 2 * j + 1];
                dst[i * ow + j] = 0.25 * (a + b);
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_backward(grad: &Tensor64) -> Tensor64 {
    let (ch, oh, ow) = grad.shape();
    let (h, w) = (2 * oh, 2 * ow);
    let mut out = Tensor64::zeros(ch, h, w);
    for c in 0..ch {
        let g = grad.channel(c);
        let dst = out.channel_mut(c);
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = 0.25 * g[(i / 2) * ow + j / 2];
            }
        }
    }
    out
}

/// Sign pattern of a pre-activation; used to detect when a finite-difference
/// probe crossed a kink.
pub(crate) fn hash_signs(hash: &mut u64, values: &[f64]) {
    for &v in values {
        let bit = u64::from(v > 0.0);
        *hash = (*hash ^ bit).wrapping_mul(0x0000_0100_0000_01b3);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(c: usize, h: usize, w: usize, seed: u64) -> Tensor64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor64::from_vec(c, h, w, data).unwrap()
    }

    fn brute_conv(conv: &Conv2d, x: &Tensor64) -> Tensor64 {
        let (_, h, w) = x.shape();
        let (oh, ow) = conv.output_dims(h, w);
        let mut out = Tensor64::zeros(conv.out_ch, oh, ow);
        for o in 0..conv.out_ch {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = conv.bias[o];
                    for c in 0..conv.in_ch {
                        for ki in 0..conv.ksize {
                            for kj in 0..conv.ksize {
                                let si = (i * conv.stride + ki * conv.dilation) as isize - conv.pad as isize;
                                let sj = (j * conv.stride + kj * conv.dilation) as isize - conv.pad as isize;
                                if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                    continue;
                                }
                                acc += conv.weight[conv.widx(o, c, ki, kj)] * x.get(c, si as usize, sj as usize);
                            }
                        }
                    }
                    out.set(o, i, j, acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_brute_force_for_strides_and_dilations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (stride, dilation, pad, k) in [(1, 1, 1, 3), (1, 2, 2, 3), (2, 1, 1, 3), (1, 1, 0, 1)] {
            let mut conv = Conv2d::zeros(3, 4, k, stride, dilation, pad);
            conv.init_normal(0.5, &mut rng);
            conv.bias.iter_mut().enumerate().for_each(|(i, b)| *b = i as f64 * 0.1);
            let x = random_tensor(3, 8, 6, 5);
            let fast = conv.forward(&x).unwrap();
            let slow = brute_conv(&conv, &x);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_backward_is_the_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (stride, dilation, pad) in [(1, 2, 2), (2, 1, 1)] {
            let mut conv = Conv2d::zeros(2, 3, 3, stride, dilation, pad);
            conv.init_normal(1.0, &mut rng);
            let x = random_tensor(2, 8, 8, 1);
            let y = conv.forward(&x).unwrap();
            let g = random_tensor(3, y.height(), y.width(), 2);
            let mut grads = conv.zero_grads();
            let gx = conv.backward(&x, &g, &mut grads);
            // <conv(x) - b, g> = <x, conv^T g>
            let mut nobias = conv.clone();
            nobias.bias.fill(0.0);
            let lhs = dot(nobias.forward(&x).unwrap().data(), g.data());
            assert!((lhs - dot(x.data(), gx.data())).abs() < 1e-10);
            // d<conv(x), g>/dW = grads.weight, checked on one tap
            let h = 1e-6;
            let mut plus = conv.clone();
            plus.weight[5] += h;
            let mut minus = conv.clone();
            minus.weight[5] -= h;
            let fd = (dot(plus.forward(&x).unwrap().data(), g.data())
                - dot(minus.forward(&x).unwrap().data(), g.data()))
                / (2.0 * h);
            assert!((fd - grads.weight[5]).abs() < 1e-6);
        }
    }

    #[test]
    fn transposed_conv_doubles_and_is_adjoint_of_strided_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut up = ConvTranspose2d::zeros(2, 3);
        up.init_he(&mut rng);
        let x = random_tensor(2, 4, 5, 6);
        let y = up.forward(&x).unwrap();
        assert_eq!(y.shape(), (3, 8, 10));
        // Same weights as a stride-2 conv from 3 to 2 channels.
        let mut down = Conv2d::zeros(3, 2, 3, 2, 1, 1);
        for c in 0..2 {
            for o in 0..3 {
                for ki in 0..3 {
                    for kj in 0..3 {
                        let dst = down.widx(c, o, ki, kj);
                        down.weight[dst] = up.weight[up.widx(c, o, ki, kj)];
                    }
                }
            }
        }
        let z = random_tensor(3, 8, 10, 7);
        let lhs = dot(y.data(), z.data());
        let rhs = dot(x.data(), down.forward(&z).unwrap().data());
        assert!((lhs - rhs).abs() < 1e-10);
        let mut grads = up.zero_grads();
        let gx = up.backward(&x, &z, &mut grads);
        assert!((dot(gx.data(), x.data()) - lhs).abs() < 1e-10);
    }

    #[test]
    fn pooling_backward_is_adjoint() {
        let x = random_tensor(2, 6, 4, 1);
        let g = random_tensor(2, 3, 2, 2);
        let lhs = dot(avg_pool2(&x).unwrap().data(), g.data());
        let rhs = dot(x.data(), avg_pool2_backward(&g).data());
        assert!((lhs - rhs).abs() < 1e-12);
        assert!(avg_pool2(&random_tensor(1, 3, 4, 0)).is_err());
    }
}
