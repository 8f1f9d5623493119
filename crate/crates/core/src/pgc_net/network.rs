//! The toy density network: a small rectified backbone with one 2× pooling
//! stage, a stack of PGC blocks sharing one dictionary, and a rectified 1×1
//! head producing a single density channel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::block::{backward_cached, forward_cached, smoothing_kernels, BlockCache, PgcBlockParams};
use crate::error::{invalid, mismatch, Result};
use crate::kernel_dictionary::{build_dictionary, DictionaryConfig, KernelDictionary};
use crate::map::{DensityMap, Map2, PerspectiveMap};
use crate::nn::{avg_pool2, avg_pool2_backward, hash_signs, relu, relu_backward, Conv2d};
use crate::perspective::PerspectiveParams;
use crate::tensor::Tensor64;

/// Spatial reduction between the input image and the density map.
pub const FEATURE_STRIDE: usize = 2;

/// Standard deviation of the PGC convolution initialization.
pub const PGC_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    /// Output channels of each backbone convolution. The first runs at image
    /// resolution and is followed by 2× average pooling.
    pub backbone_channels: Vec<usize>,
    pub num_pgc_blocks: usize,
    pub block_out_channels: usize,
    pub dictionary: DictionaryConfig,
    /// When false every block starts (and stays) with `a = 0`, so smoothing
    /// is the identity and the stack is a plain dilated-convolution network.
    pub smoothing: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            backbone_channels: vec![8, 8],
            num_pgc_blocks: 5,
            block_out_channels: 4,
            dictionary: DictionaryConfig::default(),
            smoothing: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(invalid("in_channels must be >= 1"));
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return Err(invalid("backbone needs at least one layer and nonzero widths"));
        }
        if self.num_pgc_blocks > 0 && self.block_out_channels == 0 {
            return Err(invalid("block_out_channels must be >= 1"));
        }
        self.dictionary.validate()
    }

    pub fn backbone_out(&self) -> usize {
        *self.backbone_channels.last().unwrap_or(&0)
    }

    /// Feature channels after `k` blocks.
    pub fn channels_after(&self, k: usize) -> usize {
        self.backbone_out() + k * self.block_out_channels
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut prev = self.in_channels;
        for &c in &self.backbone_channels {
            total += prev * c * 9 + c;
            prev = c;
        }
        for k in 0..self.num_pgc_blocks {
            total += 4 + self.channels_after(k) * self.block_out_channels * 9 + self.block_out_channels;
        }
        total + self.channels_after(self.num_pgc_blocks) + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub dict: KernelDictionary,
    pub backbone: Vec<Conv2d>,
    pub blocks: Vec<PgcBlockParams>,
    pub head: Conv2d,
}

/// Forward intermediates for [`Network::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    backbone_inputs: Vec<Tensor64>,
    backbone_pre: Vec<Tensor64>,
    block_inputs: Vec<Tensor64>,
    block_caches: Vec<BlockCache>,
    feature_perspective: PerspectiveMap,
    head_input: Tensor64,
    head_pre: Tensor64,
}

pub fn build_toy_net(config: &NetworkConfig, seed: u64) -> Result<Network> {
    config.validate()?;
    let dict = build_dictionary(&config.dictionary)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut backbone = Vec::with_capacity(config.backbone_channels.len());
    let mut prev = config.in_channels;
    for &c in &config.backbone_channels {
        let mut conv = Conv2d::zeros(prev, c, 3, 1, 1, 1);
        conv.init_he(&mut rng);
        backbone.push(conv);
        prev = c;
    }

    let mut blocks = Vec::with_capacity(config.num_pgc_blocks);
    for k in 0..config.num_pgc_blocks {
        let mut block = PgcBlockParams::zeros(config.channels_after(k), config.block_out_channels);
        block.conv.init_normal(PGC_INIT_STD, &mut rng);
        if !config.smoothing {
            block.perspective.a = 0.0;
        }
        blocks.push(block);
    }

    let mut head = Conv2d::zeros(config.channels_after(config.num_pgc_blocks), 1, 1, 1, 1, 0);
    head.init_normal(0.1, &mut rng);

    Ok(Network {
        config: config.clone(),
        dict,
        backbone,
        blocks,
        head,
    })
}

impl Network {
    pub fn param_count(&self) -> usize {
        self.backbone.iter().map(Conv2d::param_count).sum::<usize>()
            + self.blocks.iter().map(PgcBlockParams::param_count).sum::<usize>()
            + self.head.param_count()
    }

    /// Sets every block's sigmoid from observed perspective values and puts
    /// `a` at the top of the dictionary range, so the blur spans most of it
    /// across the scene. A net built without smoothing keeps `a = 0`.
    pub fn init_perspective(&mut self, observed: &[f64]) {
        let init = PerspectiveParams::from_observed(observed);
        let a = if self.config.smoothing { self.dict.config.sigma_max } else { 0.0 };
        for b in &mut self.blocks {
            b.perspective.alpha = init.alpha;
            b.perspective.beta = init.beta;
            b.perspective.a = a;
        }
    }

    /// Parameter groups in a fixed order: backbone layers, blocks
    /// (perspective, conv weight, conv bias), head.
    pub fn named_groups(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, c) in self.backbone.iter().enumerate() {
            out.push((format!("backbone{i}.weight"), c.weight.clone()));
            out.push((format!("backbone{i}.bias"), c.bias.clone()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.perspective"), b.perspective.to_array().to_vec()));
            out.push((format!("block{i}.weight"), b.conv.weight.clone()));
            out.push((format!("block{i}.bias"), b.conv.bias.clone()));
        }
        out.push(("head.weight".into(), self.head.weight.clone()));
        out.push(("head.bias".into(), self.head.bias.clone()));
        out
    }

    pub fn load_groups(&mut self, groups: &[(String, Vec<f64>)]) -> Result<()> {
        let expected = self.named_groups();
        if groups.len() != expected.len() {
            return Err(mismatch(format!(
                "{} parameter groups given, network has {}",
                groups.len(),
                expected.len()
            )));
        }
        for ((name, vals), (ename, evals)) in groups.iter().zip(&expected) {
            if name != ename || vals.len() != evals.len() {
                return Err(mismatch(format!("parameter group {name} does not match {ename}")));
            }
        }
        let flat: Vec<f64> = groups.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        self.set_params(&flat)
    }

    pub fn params(&self) -> Vec<f64> {
        self.named_groups().into_iter().flat_map(|(_, v)| v).collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(mismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut it = flat.iter().copied();
        let mut fill = |dst: &mut [f64]| dst.iter_mut().for_each(|d| *d = it.next().expect("length checked"));
        for c in &mut self.backbone {
            fill(&mut c.weight);
            fill(&mut c.bias);
        }
        for b in &mut self.blocks {
            let mut arr = [0.0; 4];
            fill(&mut arr);
            b.perspective = PerspectiveParams::from_array(arr);
            fill(&mut b.conv.weight);
            fill(&mut b.conv.bias);
        }
        fill(&mut self.head.weight);
        fill(&mut self.head.bias);
        Ok(())
    }

    /// Backbone features at feature resolution.
    pub fn backbone_forward(&self, image: &Tensor64) -> Result<Tensor64> {
        let mut x = image.clone();
        for (i, conv) in self.backbone.iter().enumerate() {
            x = relu(&conv.forward(&x)?);
            if i == 0 {
                x = avg_pool2(&x)?;
            }
        }
        Ok(x)
    }

    pub fn head_forward(&self, features: &Tensor64) -> Result<DensityMap> {
        let out = relu(&self.head.forward(features)?);
        Map2::from_vec(out.height(), out.width(), out.into_vec())
    }

    pub fn forward(&self, image: &Tensor64, perspective: &PerspectiveMap) -> Result<DensityMap> {
        Ok(self.forward_cached(image, perspective)?.0)
    }

    pub fn forward_cached(&self, image: &Tensor64, perspective: &PerspectiveMap) -> Result<(DensityMap, ForwardCache)> {
        let (ch, h, w) = image.shape();
        if ch != self.config.in_channels {
            return Err(mismatch(format!(
                "network expects {} image channels, got {ch}",
                self.config.in_channels
            )));
        }
        if perspective.dims() != (h, w) {
            return Err(mismatch(format!(
                "perspective map is {}x{}, image is {h}x{w}",
                perspective.height, perspective.width
            )));
        }
        let feature_perspective = perspective.area_downsample(FEATURE_STRIDE)?;

        let mut backbone_inputs = Vec::new();
        let mut backbone_pre = Vec::new();
        let mut x = image.clone();
        for (i, conv) in self.backbone.iter().enumerate() {
            let pre = conv.forward(&x)?;
            backbone_inputs.push(std::mem::replace(&mut x, relu(&pre)));
            backbone_pre.push(pre);
            if i == 0 {
                x = avg_pool2(&x)?;
            }
        }

        let kernels = smoothing_kernels(&self.dict);
        let mut block_inputs = Vec::with_capacity(self.blocks.len());
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, cache) = forward_cached(&x, &feature_perspective, block, &self.dict, &kernels)?;
            block_inputs.push(std::mem::replace(&mut x, out));
            block_caches.push(cache);
        }

        let head_pre = self.head.forward(&x)?;
        let density = relu(&head_pre);
        let density = Map2::from_vec(density.height(), density.width(), density.into_vec())?;
        Ok((
            density,
            ForwardCache {
                backbone_inputs,
                backbone_pre,
                block_inputs,
                block_caches,
                feature_perspective,
                head_input: x,
                head_pre,
            },
        ))
    }

    /// Flat parameter gradient (in [`Network::params`] order) and the
    /// gradient with respect to the image-resolution perspective map.
    pub fn backward(&self, cache: &ForwardCache, grad_density: &Map2) -> Result<(Vec<f64>, Map2)> {
        let (_, fh, fw) = cache.head_pre.shape();
        if grad_density.dims() != (fh, fw) {
            return Err(mismatch("density gradient has the wrong shape"));
        }
        let g = Tensor64::from_vec(1, fh, fw, grad_density.values.clone())?;
        let g = relu_backward(&cache.head_pre, &g);
        let mut head_grads = self.head.zero_grads();
        let mut grad = self.head.backward(&cache.head_input, &g, &mut head_grads);

        let kernels = smoothing_kernels(&self.dict);
        let mut grad_p_feat = Map2::zeros(fh, fw);
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (k, block) in self.blocks.iter().enumerate().rev() {
            let (gx, gb, gp) = backward_cached(
                &cache.block_inputs[k],
                &cache.feature_perspective,
                block,
                &self.dict,
                &kernels,
                &cache.block_caches[k],
                &grad,
            )?;
            grad = gx;
            for (a, b) in grad_p_feat.values.iter_mut().zip(&gp.values) {
                *a += b;
            }
            block_grads.push(gb);
        }
        block_grads.reverse();

        let mut backbone_grads = Vec::with_capacity(self.backbone.len());
        for (i, conv) in self.backbone.iter().enumerate().rev() {
            if i == 0 {
                grad = avg_pool2_backward(&grad);
            }
            let g_pre = relu_backward(&cache.backbone_pre[i], &grad);
            let mut cg = conv.zero_grads();
            grad = conv.backward(&cache.backbone_inputs[i], &g_pre, &mut cg);
            backbone_grads.push(cg);
        }
        backbone_grads.reverse();

        let mut flat = Vec::with_capacity(self.param_count());
        for cg in &backbone_grads {
            flat.extend_from_slice(&cg.weight);
            flat.extend_from_slice(&cg.bias);
        }
        for bg in &block_grads {
            flat.extend_from_slice(&bg.perspective.to_array());
            flat.extend_from_slice(&bg.conv.weight);
            flat.extend_from_slice(&bg.conv.bias);
        }
        flat.extend_from_slice(&head_grads.weight);
        flat.extend_from_slice(&head_grads.bias);
        Ok((flat, grad_p_feat.area_downsample_adjoint(FEATURE_STRIDE)))
    }

    /// Sum-of-squares loss `½‖Φ − Y‖²` for one sample with its gradients.
    pub fn loss_and_grad(
        &self,
        image: &Tensor64,
        perspective: &PerspectiveMap,
        target: &DensityMap,
    ) -> Result<(f64, Vec<f64>, Map2)> {
        let (pred, cache) = self.forward_cached(image, perspective)?;
        if pred.dims() != target.dims() {
            return Err(mismatch(format!(
                "target is {}x{}, prediction is {}x{}",
                target.height, target.width, pred.height, pred.width
            )));
        }
        let resid = Map2 {
            height: pred.height,
            width: pred.width,
            values: pred.values.iter().zip(&target.values).map(|(p, t)| p - t).collect(),
        };
        let loss = 0.5 * resid.values.iter().map(|r| r * r).sum::<f64>();
        let (grads, grad_p) = self.backward(&cache, &resid)?;
        Ok((loss, grads, grad_p))
    }

    pub fn loss(&self, image: &Tensor64, perspective: &PerspectiveMap, target: &DensityMap) -> Result<f64> {
        let pred = self.forward(image, perspective)?;
        if pred.dims() != target.dims() {
            return Err(mismatch("target does not match prediction"));
        }
        Ok(0.5 * pred.values.iter().zip(&target.values).map(|(p, t)| (p - t) * (p - t)).sum::<f64>())
    }

    /// Hash of every rectifier and branch decision taken by a forward pass.
    pub fn branch_signature(&self, cache: &ForwardCache) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for pre in &cache.backbone_pre {
            hash_signs(&mut hash, pre.data());
        }
        for bc in &cache.block_caches {
            bc.hash_branches(&mut hash, &self.dict);
        }
        hash_signs(&mut hash, cache.head_pre.data());
        hash
    }
}
