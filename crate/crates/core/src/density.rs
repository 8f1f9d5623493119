//! Ground-truth density maps, counting metrics and synthetic crowd scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::map::{DensityMap, Map2, PerspectiveMap};
use crate::perspective::synth_perspective;
use crate::tensor::Tensor;

/// Fixed standard deviation of the per-head Gaussian.
pub const GT_SIGMA: f64 = 0.5;

/// Head position in image coordinates. Pixel `(i, j)` covers
/// `[j, j + 1) × [i, i + 1)`, so its center sits at `(j + 0.5, i + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dot {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

impl RoiMask {
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut mask = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                mask.push(f(i, j));
            }
        }
        Self { height, width, mask }
    }

    pub fn as_map(&self) -> Map2 {
        Map2 {
            height: self.height,
            width: self.width,
            values: self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        }
    }
}

fn check_dot(dot: &Dot, h: usize, w: usize) -> Result<()> {
    if !(dot.x >= 0.0 && dot.x < w as f64 && dot.y >= 0.0 && dot.y < h as f64) {
        return Err(invalid(format!(
            "dot ({}, {}) lies outside the {h}x{w} image",
            dot.x, dot.y
        )));
    }
    Ok(())
}

/// Sum of unit-mass Gaussians, one per dot. Each Gaussian is renormalized
/// over the pixels it actually covers, so the map integrates to the dot count.
pub fn make_density(dots: &[Dot], height: usize, width: usize, sigma: f64) -> Result<DensityMap> {
    if !(sigma > 0.0) {
        return Err(invalid("density sigma must be positive"));
    }
    let mut out = Map2::zeros(height, width);
    let radius = (4.0 * sigma).ceil() as isize;
    let two_var = 2.0 * sigma * sigma;
    let mut weights = Vec::new();
    for dot in dots {
        check_dot(dot, height, width)?;
        let ci = dot.y.floor() as isize;
        let cj = dot.x.floor() as isize;
        let i0 = (ci - radius).max(0) as usize;
        let i1 = ((ci + radius) as usize).min(height - 1);
        let j0 = (cj - radius).max(0) as usize;
        let j1 = ((cj + radius) as usize).min(width - 1);
        weights.clear();
        let mut total = 0.0;
        for i in i0..=i1 {
            for j in j0..=j1 {
                let dy = i as f64 + 0.5 - dot.y;
                let dx = j as f64 + 0.5 - dot.x;
                let g = (-(dx * dx + dy * dy) / two_var).exp();
                weights.push(g);
                total += g;
            }
        }
        let mut k = 0;
        for i in i0..=i1 {
            for j in j0..=j1 {
                out.values[i * width + j] += weights[k] / total;
                k += 1;
            }
        }
    }
    Ok(out)
}

pub fn count(d: &DensityMap, roi: Option<&RoiMask>) -> Result<f64> {
    match roi {
        None => Ok(d.sum()),
        Some(r) => {
            if (r.height, r.width) != d.dims() {
                return Err(mismatch("roi does not match density map"));
            }
            Ok(d.values
                .iter()
                .zip(&r.mask)
                .filter(|(_, &m)| m)
                .map(|(v, _)| v)
                .sum())
        }
    }
}

/// Mean absolute count error and root mean squared count error.
pub fn mae_mse(pred: &[f64], gt: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(mismatch(format!(
            "{} predictions vs {} ground-truth counts",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(invalid("need at least one count"));
    }
    let n = pred.len() as f64;
    let (abs, sq) = pred.iter().zip(gt).fold((0.0, 0.0), |(a, s), (p, g)| {
        let d = p - g;
        (a + d.abs(), s + d * d)
    });
    Ok((abs / n, (sq / n).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadScaleLaw {
    /// Head radius in pixels per unit of perspective.
    pub k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub seed: u64,
    /// Perspective at row 0 (the far end of the scene).
    pub perspective_base: f64,
    /// Perspective increase per row.
    pub perspective_slope: f64,
    pub head_scale: HeadScaleLaw,
    /// Uniform background noise amplitude.
    pub background_noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self::new(32, 32, 20, 0)
    }
}

impl SceneConfig {
    /// Heads grow from radius 1 at the top row to 4.5 at the bottom, over a
    /// noisy background.
    pub fn new(height: usize, width: usize, count: usize, seed: u64) -> Self {
        let span = (height.max(2) - 1) as f64;
        Self {
            height,
            width,
            count,
            seed,
            perspective_base: 1.0,
            perspective_slope: 3.5 / span,
            head_scale: HeadScaleLaw { k: 1.0 },
            background_noise: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub config: SceneConfig,
    pub requested: usize,
    pub placed: usize,
    pub heads: Vec<Head>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `3 × H × W`.
    pub image: Tensor,
    pub dots: Vec<Dot>,
    pub gt_density: DensityMap,
    pub gt_perspective: PerspectiveMap,
    pub roi: Option<RoiMask>,
    pub meta: SceneMeta,
}

impl Scene {
    pub fn gt_count(&self) -> f64 {
        self.dots.len() as f64
    }
}

const PLACEMENT_ATTEMPTS: usize = 200;

/// Renders non-overlapping disc-shaped heads whose radius follows the local
/// perspective. Rows are drawn with weight `1 / p(row)²`, so far rows hold
/// more (and smaller) people. Heads that cannot be placed are dropped and the
/// shortfall is recorded in the metadata.
pub fn synth_scene(config: &SceneConfig) -> Result<Scene> {
    let (h, w) = (config.height, config.width);
    if h < 32 || w < 32 {
        return Err(invalid(format!("scenes must be at least 32x32, got {h}x{w}")));
    }
    if !(config.head_scale.k > 0.0) {
        return Err(invalid("head scale must be positive"));
    }
    let perspective = synth_perspective(h, w, config.perspective_base, config.perspective_slope, 0.0, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed_5eed_5eed);

    let row_weight: Vec<f64> = (0..h).map(|i| 1.0 / perspective.get(i, 0).powi(2)).collect();
    let total_weight: f64 = row_weight.iter().sum();

    let mut heads: Vec<Head> = Vec::with_capacity(config.count);
    for _ in 0..config.count {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let mut pick = rng.random_range(0.0..total_weight);
            let mut row = h - 1;
            for (i, wgt) in row_weight.iter().enumerate() {
                if pick < *wgt {
                    row = i;
                    break;
                }
                pick -= wgt;
            }
            let y = row as f64 + rng.random_range(0.0..1.0);
            let x = rng.random_range(0.0..w as f64);
            let radius = config.head_scale.k * perspective.get(row, 0);
            let clear = heads.iter().all(|o| {
                let (dx, dy) = (o.x - x, o.y - y);
                (dx * dx + dy * dy).sqrt() >= o.radius + radius + 0.5
            });
            if clear {
                heads.push(Head { x, y, radius });
                break;
            }
        }
    }

    let mut image = Tensor::zeros(3, h, w);
    if config.background_noise > 0.0 {
        for v in image.data_mut() {
            *v = rng.random_range(0.0..config.background_noise) as f32;
        }
    }
    for head in &heads {
        let tint: [f64; 3] = [
            rng.random_range(0.7..1.0),
            rng.random_range(0.5..0.9),
            rng.random_range(0.4..0.8),
        ];
        let reach = head.radius + 1.0;
        let i0 = (head.y - reach).floor().max(0.0) as usize;
        let i1 = ((head.y + reach).ceil() as usize).min(h - 1);
        let j0 = (head.x - reach).floor().max(0.0) as usize;
        let j1 = ((head.x + reach).ceil() as usize).min(w - 1);
        for i in i0..=i1 {
            for j in j0..=j1 {
                let coverage = disc_coverage(head, i, j);
                if coverage <= 0.0 {
                    continue;
                }
                for (c, t) in tint.iter().enumerate() {
                    let old = f64::from(image.get(c, i, j));
                    image.set(c, i, j, (old * (1.0 - coverage) + t * coverage) as f32);
                }
            }
        }
    }

    let dots: Vec<Dot> = heads.iter().map(|hd| Dot { x: hd.x, y: hd.y }).collect();
    let gt_density = make_density(&dots, h, w, GT_SIGMA)?;
    Ok(Scene {
        image,
        dots,
        gt_density,
        gt_perspective: perspective,
        roi: None,
        meta: SceneMeta {
            config: config.clone(),
            requested: config.count,
            placed: heads.len(),
            heads,
        },
    })
}

/// Fraction of pixel `(i, j)` inside the head's disc, from a 4×4 supersample.
pub fn disc_coverage(head: &Head, i: usize, j: usize) -> f64 {
    const S: usize = 4;
    let mut inside = 0;
    for a in 0..S {
        for b in 0..S {
            let py = i as f64 + (a as f64 + 0.5) / S as f64;
            let px = j as f64 + (b as f64 + 0.5) / S as f64;
            let (dx, dy) = (px - head.x, py - head.y);
            if dx * dx + dy * dy <= head.radius * head.radius {
                inside += 1;
            }
        }
    }
    inside as f64 / (S * S) as f64
}
