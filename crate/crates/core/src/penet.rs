//! Perspective estimator: a four-stage strided encoder and a four-stage
//! transposed-convolution decoder, trained in three phases.
//!
//! 1. Auto-encode perspective maps (`P` encoder + decoder).
//! 2. Freeze the decoder and train the image (`I`) encoder to hit the same
//!    latent codes through the reconstruction loss.
//! 3. Fine-tune with the density network, either with the estimator frozen
//!    ([`Phase3Mode::FrozenEstimator`]) or with the image encoder updated jointly
//!    ([`Phase3Mode::JointEstimator`]).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::map::{Map2, PerspectiveMap};
use crate::nn::{hash_signs, leaky_relu, leaky_relu_backward, relu, relu_backward, Conv2d, ConvTranspose2d};
use crate::perspective::{row_mean_collapse, row_mean_collapse_adjoint};
use crate::pgc_net::gradcheck::{relative_error, GradReport};
use crate::pgc_net::network::Network;
use crate::pgc_net::trainer::{check_finite, Sgd, TrainSample, TrainerConfig};
use crate::tensor::{Tensor, Tensor64};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenetConfig {
    /// Output channels of the four stride-2 encoder convolutions.
    pub encoder_channels: [usize; STAGES],
    /// Output channels of the four stride-2 transposed convolutions; the last
    /// one must be 1.
    pub decoder_channels: [usize; STAGES],
    pub image_channels: usize,
}

impl Default for PenetConfig {
    /// A quarter of the full 64/128/256/512 widths.
    fn default() -> Self {
        Self {
            encoder_channels: [16, 32, 64, 128],
            decoder_channels: [64, 32, 16, 1],
            image_channels: 3,
        }
    }
}

impl PenetConfig {
    pub fn full_width() -> Self {
        Self {
            encoder_channels: [64, 128, 256, 512],
            decoder_channels: [256, 128, 64, 1],
            image_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.contains(&0) || self.decoder_channels.contains(&0) || self.image_channels == 0 {
            return Err(invalid("PENet widths must be nonzero"));
        }
        if self.decoder_channels[STAGES - 1] != 1 {
            return Err(invalid("the last decoder stage must output one channel"));
        }
        Ok(())
    }
}

/// Optimizer settings that train the estimator phases at toy scale. The
/// reconstruction loss is a per-pixel mean, hence the large rate.
pub fn phase_trainer_defaults() -> TrainerConfig {
    TrainerConfig {
        learning_rate: 3e-2,
        momentum: 0.9,
        weight_decay: 0.0,
        epochs: 60,
        seed: 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderPath {
    /// Perspective map in (auto-encoder).
    P,
    /// Image in.
    I,
}

/// Affine map between raw perspective values and the `[0, 1]` range the
/// estimator works in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerspectiveScale {
    pub lo: f64,
    pub hi: f64,
}

impl PerspectiveScale {
    pub fn fit<'a>(maps: impl IntoIterator<Item = &'a Map2>) -> Self {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for m in maps {
            lo = lo.min(m.min());
            hi = hi.max(m.max());
        }
        if !(hi > lo) {
            hi = lo + 1.0;
        }
        Self { lo, hi }
    }

    pub fn normalize(&self, m: &Map2) -> Map2 {
        let span = self.hi - self.lo;
        m.map(|v| (v - self.lo) / span)
    }

    pub fn denormalize(&self, m: &Map2) -> Map2 {
        let span = self.hi - self.lo;
        m.map(|v| self.lo + v * span)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenetParams {
    pub config: PenetConfig,
    pub encoder_p: Vec<Conv2d>,
    pub encoder_i: Vec<Conv2d>,
    pub decoder: Vec<ConvTranspose2d>,
    pub scale: PerspectiveScale,
    /// Set once phase 1 has produced a decoder.
    pub decoder_ready: bool,
}

fn encoder(in_ch: usize, widths: &[usize; STAGES]) -> Vec<Conv2d> {
    let mut prev = in_ch;
    widths
        .iter()
        .map(|&c| {
            let conv = Conv2d::zeros(prev, c, 3, 2, 1, 1);
            prev = c;
            conv
        })
        .collect()
}

impl PenetParams {
    pub fn zeros(config: &PenetConfig) -> Result<Self> {
        config.validate()?;
        let mut prev = config.encoder_channels[STAGES - 1];
        let decoder = config
            .decoder_channels
            .iter()
            .map(|&c| {
                let up = ConvTranspose2d::zeros(prev, c);
                prev = c;
                up
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            encoder_p: encoder(1, &config.encoder_channels),
            encoder_i: encoder(config.image_channels, &config.encoder_channels),
            decoder,
            scale: PerspectiveScale { lo: 0.0, hi: 1.0 },
            decoder_ready: false,
        })
    }

    pub fn init(config: &PenetConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in p.encoder_p.iter_mut().chain(p.encoder_i.iter_mut()) {
            c.init_he(&mut rng);
        }
        for u in &mut p.decoder {
            u.init_he(&mut rng);
        }
        // A small positive output bias keeps the final rectifier alive at the start.
        if let Some(last) = p.decoder.last_mut() {
            last.bias.fill(0.1);
        }
        Ok(p)
    }

    pub fn encoder(&self, path: EncoderPath) -> &[Conv2d] {
        match path {
            EncoderPath::P => &self.encoder_p,
            EncoderPath::I => &self.encoder_i,
        }
    }

    fn encoder_mut(&mut self, path: EncoderPath) -> &mut [Conv2d] {
        match path {
            EncoderPath::P => &mut self.encoder_p,
            EncoderPath::I => &mut self.encoder_i,
        }
    }

    pub fn encoder_params(&self, path: EncoderPath) -> Vec<f64> {
        self.encoder(path)
            .iter()
            .flat_map(|c| c.weight.iter().chain(&c.bias).copied())
            .collect()
    }

    pub fn set_encoder_params(&mut self, path: EncoderPath, flat: &[f64]) -> Result<()> {
        let need: usize = self.encoder(path).iter().map(Conv2d::param_count).sum();
        if flat.len() != need {
            return Err(mismatch(format!("{} values for {need} encoder parameters", flat.len())));
        }
        let mut it = flat.iter().copied();
        for c in self.encoder_mut(path) {
            c.weight.iter_mut().chain(c.bias.iter_mut()).for_each(|v| *v = it.next().expect("checked"));
        }
        Ok(())
    }

    pub fn decoder_params(&self) -> Vec<f64> {
        self.decoder
            .iter()
            .flat_map(|c| c.weight.iter().chain(&c.bias).copied())
            .collect()
    }

    pub fn set_decoder_params(&mut self, flat: &[f64]) -> Result<()> {
        let need: usize = self.decoder.iter().map(ConvTranspose2d::param_count).sum();
        if flat.len() != need {
            return Err(mismatch(format!("{} values for {need} decoder parameters", flat.len())));
        }
        let mut it = flat.iter().copied();
        for c in &mut self.decoder {
            c.weight.iter_mut().chain(c.bias.iter_mut()).for_each(|v| *v = it.next().expect("checked"));
        }
        Ok(())
    }

    pub fn named_groups(&self) -> Vec<(String, Vec<f64>)> {
        vec![
            ("encoder_p".into(), self.encoder_params(EncoderPath::P)),
            ("encoder_i".into(), self.encoder_params(EncoderPath::I)),
            ("decoder".into(), self.decoder_params()),
            ("scale".into(), vec![self.scale.lo, self.scale.hi]),
        ]
    }

    pub fn load_groups(&mut self, groups: &[(String, Vec<f64>)]) -> Result<()> {
        for (name, values) in groups {
            match name.as_str() {
                "encoder_p" => self.set_encoder_params(EncoderPath::P, values)?,
                "encoder_i" => self.set_encoder_params(EncoderPath::I, values)?,
                "decoder" => self.set_decoder_params(values)?,
                "scale" if values.len() == 2 => {
                    self.scale = PerspectiveScale {
                        lo: values[0],
                        hi: values[1],
                    }
                }
                other => return Err(mismatch(format!("unknown PENet parameter group {other}"))),
            }
        }
        self.decoder_ready = true;
        Ok(())
    }
}

/// Intermediates of one estimator pass.
#[derive(Debug, Clone)]
pub struct PenetCache {
    path: EncoderPath,
    enc_inputs: Vec<Tensor64>,
    enc_pre: Vec<Tensor64>,
    dec_inputs: Vec<Tensor64>,
    dec_pre: Vec<Tensor64>,
}

impl PenetCache {
    pub fn signature(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for t in self.enc_pre.iter().chain(&self.dec_pre) {
            hash_signs(&mut h, t.data());
        }
        h
    }
}

fn check_divisible(h: usize, w: usize) -> Result<()> {
    let f = 1 << STAGES;
    if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
        return Err(invalid(format!("PENet input {h}x{w} is not divisible by {f}")));
    }
    Ok(())
}

pub fn penet_forward(params: &PenetParams, input: &Tensor, path: EncoderPath) -> Result<PerspectiveMap> {
    Ok(forward_cached(params, &input.to_f64(), path)?.0)
}

pub fn forward_cached(params: &PenetParams, input: &Tensor64, path: EncoderPath) -> Result<(Map2, PenetCache)> {
    let (_, h, w) = input.shape();
    check_divisible(h, w)?;
    let mut x = input.clone();
    let mut enc_inputs = Vec::with_capacity(STAGES);
    let mut enc_pre = Vec::with_capacity(STAGES);
    for conv in params.encoder(path) {
        let pre = conv.forward(&x)?;
        enc_inputs.push(std::mem::replace(&mut x, leaky_relu(&pre, LEAKY_SLOPE)));
        enc_pre.push(pre);
    }
    let mut dec_inputs = Vec::with_capacity(STAGES);
    let mut dec_pre = Vec::with_capacity(STAGES);
    for up in &params.decoder {
        let pre = up.forward(&x)?;
        dec_inputs.push(std::mem::replace(&mut x, relu(&pre)));
        dec_pre.push(pre);
    }
    let out = Map2::from_vec(x.height(), x.width(), x.into_vec())?;
    Ok((
        out,
        PenetCache {
            path,
            enc_inputs,
            enc_pre,
            dec_inputs,
            dec_pre,
        },
    ))
}

/// Flat gradients of the encoder used in the pass and of the decoder.
pub fn backward(params: &PenetParams, cache: &PenetCache, grad_out: &Map2) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Tensor64::from_vec(1, grad_out.height, grad_out.width, grad_out.values.clone())?;
    let mut dec_grads = Vec::with_capacity(STAGES);
    for (k, up) in params.decoder.iter().enumerate().rev() {
        let gp = relu_backward(&cache.dec_pre[k], &g);
        let mut cg = up.zero_grads();
        g = up.backward(&cache.dec_inputs[k], &gp, &mut cg);
        dec_grads.push(cg);
    }
    dec_grads.reverse();
    let enc = params.encoder(cache.path);
    let mut enc_grads = Vec::with_capacity(STAGES);
    for (k, conv) in enc.iter().enumerate().rev() {
        let gp = leaky_relu_backward(&cache.enc_pre[k], &g, LEAKY_SLOPE);
        let mut cg = conv.zero_grads();
        g = conv.backward(&cache.enc_inputs[k], &gp, &mut cg);
        enc_grads.push(cg);
    }
    enc_grads.reverse();
    let flatten = |gs: &[crate::nn::ConvGrads]| -> Vec<f64> {
        gs.iter().flat_map(|c| c.weight.iter().chain(&c.bias).copied()).collect()
    };
    Ok((flatten(&enc_grads), flatten(&dec_grads)))
}

/// `½‖pred − target‖²` averaged over pixels.
pub fn reconstruction_loss(pred: &Map2, target: &Map2) -> f64 {
    0.5 * sum_sq(pred, target) / pred.values.len().max(1) as f64
}

fn sum_sq(pred: &Map2, target: &Map2) -> f64 {
    pred.values
        .iter()
        .zip(&target.values)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
}

/// Gradient of [`reconstruction_loss`] with respect to `pred`.
fn reconstruction_grad(pred: &Map2, target: &Map2) -> Map2 {
    let n = pred.values.len().max(1) as f64;
    Map2 {
        height: pred.height,
        width: pred.width,
        values: pred.values.iter().zip(&target.values).map(|(p, t)| (p - t) / n).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: u8,
    pub epochs: usize,
    /// Mean absolute per-pixel error on normalized maps.
    pub final_mae: f64,
    /// Root mean squared per-pixel error on normalized maps.
    pub final_mse: f64,
    pub loss_curve: Vec<f64>,
}

fn map_errors(pairs: &[(Map2, Map2)]) -> (f64, f64) {
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut n = 0usize;
    for (p, t) in pairs {
        for (a, b) in p.values.iter().zip(&t.values) {
            abs += (a - b).abs();
            sq += (a - b) * (a - b);
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    (abs / n, (sq / n).sqrt())
}

fn as_input(m: &Map2) -> Tensor64 {
    Tensor64::from_vec(1, m.height, m.width, m.values.clone()).expect("map dims")
}

/// Phase 1: perspective auto-encoder. Returns initialized-and-trained
/// parameters; the image encoder keeps its initialization.
pub fn train_phase1(
    maps: &[PerspectiveMap],
    config: &PenetConfig,
    hyper: &TrainerConfig,
) -> Result<(PenetParams, PhaseReport)> {
    if maps.is_empty() {
        return Err(invalid("phase 1 needs at least one perspective map"));
    }
    hyper.validate()?;
    let mut params = PenetParams::init(config, hyper.seed)?;
    params.scale = PerspectiveScale::fit(maps);
    let targets: Vec<Map2> = maps.iter().map(|m| params.scale.normalize(m)).collect();
    for t in &targets {
        check_divisible(t.height, t.width)?;
    }
    let inputs: Vec<Tensor64> = targets.iter().map(as_input).collect();

    let mut enc = params.encoder_params(EncoderPath::P);
    let mut dec = params.decoder_params();
    let mut opt_e = Sgd::new(hyper.learning_rate, hyper.momentum, hyper.weight_decay, enc.len());
    let mut opt_d = Sgd::new(hyper.learning_rate, hyper.momentum, hyper.weight_decay, dec.len());
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..targets.len()).collect();
    let mut curve = Vec::with_capacity(hyper.epochs);
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (pred, cache) = forward_cached(&params, &inputs[i], EncoderPath::P)?;
            let loss = reconstruction_loss(&pred, &targets[i]);
            let resid = reconstruction_grad(&pred, &targets[i]);
            let (ge, gd) = backward(&params, &cache, &resid)?;
            check_finite(loss, &ge)?;
            total += loss;
            opt_e.step(&mut enc, &ge, None);
            opt_d.step(&mut dec, &gd, None);
            params.set_encoder_params(EncoderPath::P, &enc)?;
            params.set_decoder_params(&dec)?;
        }
        curve.push(total / targets.len() as f64);
    }
    params.decoder_ready = true;

    let mut pairs = Vec::with_capacity(targets.len());
    for (x, t) in inputs.iter().zip(&targets) {
        pairs.push((forward_cached(&params, x, EncoderPath::P)?.0, t.clone()));
    }
    let (mae, mse) = map_errors(&pairs);
    Ok((
        params,
        PhaseReport {
            phase: 1,
            epochs: hyper.epochs,
            final_mae: mae,
            final_mse: mse,
            loss_curve: curve,
        },
    ))
}

/// Mean absolute / root mean squared error of the image path on normalized maps.
pub fn image_path_errors(params: &PenetParams, pairs: &[(Tensor, PerspectiveMap)]) -> Result<(f64, f64)> {
    let mut out = Vec::with_capacity(pairs.len());
    for (img, p) in pairs {
        let pred = penet_forward(params, img, EncoderPath::I)?;
        out.push((pred, params.scale.normalize(p)));
    }
    Ok(map_errors(&out))
}

/// Phase 2: trains only the image encoder against the frozen decoder.
pub fn train_phase2(
    pairs: &[(Tensor, PerspectiveMap)],
    params: &PenetParams,
    hyper: &TrainerConfig,
) -> Result<(PenetParams, PhaseReport)> {
    if !params.decoder_ready {
        return Err(invalid("phase 2 requires the phase-1 decoder"));
    }
    if pairs.is_empty() {
        return Err(invalid("phase 2 needs at least one image/perspective pair"));
    }
    hyper.validate()?;
    let mut params = params.clone();
    let inputs: Vec<Tensor64> = pairs.iter().map(|(img, _)| img.to_f64()).collect();
    let targets: Vec<Map2> = pairs.iter().map(|(_, p)| params.scale.normalize(p)).collect();
    let mut enc = params.encoder_params(EncoderPath::I);
    let mut opt = Sgd::new(hyper.learning_rate, hyper.momentum, hyper.weight_decay, enc.len());
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(2));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut curve = Vec::with_capacity(hyper.epochs);
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (pred, cache) = forward_cached(&params, &inputs[i], EncoderPath::I)?;
            let loss = reconstruction_loss(&pred, &targets[i]);
            let resid = reconstruction_grad(&pred, &targets[i]);
            let (ge, _) = backward(&params, &cache, &resid)?;
            check_finite(loss, &ge)?;
            total += loss;
            opt.step(&mut enc, &ge, None);
            params.set_encoder_params(EncoderPath::I, &enc)?;
        }
        curve.push(total / pairs.len() as f64);
    }
    let (mae, mse) = image_path_errors(&params, pairs)?;
    Ok((
        params,
        PhaseReport {
            phase: 2,
            epochs: hyper.epochs,
            final_mae: mae,
            final_mse: mse,
            loss_curve: curve,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase3Mode {
    /// Estimator frozen; its row-mean-collapsed prediction is fixed guidance.
    FrozenEstimator,
    /// Image encoder trained jointly through the density loss.
    JointEstimator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase3Config {
    pub mode: Phase3Mode,
    pub trainer: TrainerConfig,
    /// Weight of the image-to-perspective loss in joint mode when ground-truth
    /// perspective is available. Zero disables it.
    pub i2p_weight: f64,
}

#[derive(Debug, Clone)]
pub struct Phase3Result {
    pub net: Network,
    pub penet: PenetParams,
    /// Per-epoch mean density loss.
    pub loss_curve: Vec<f64>,
}

/// Perspective guidance as the density network sees it: image path,
/// row-mean collapse, back to raw units.
pub fn estimate_perspective(params: &PenetParams, image: &Tensor64) -> Result<PerspectiveMap> {
    let (pred, _) = forward_cached(params, image, EncoderPath::I)?;
    Ok(params.scale.denormalize(&row_mean_collapse(&pred)))
}

/// One joint step's objective: density loss plus `i2p_weight` times the
/// image-to-perspective loss. Returns the loss, the network gradient and
/// the image-encoder gradient.
pub fn joint_loss_and_grad(
    net: &Network,
    penet: &PenetParams,
    sample: &TrainSample,
    i2p_weight: f64,
) -> Result<(f64, f64, Vec<f64>, Vec<f64>)> {
    let (pred, cache) = forward_cached(penet, &sample.image, EncoderPath::I)?;
    let guidance = penet.scale.denormalize(&row_mean_collapse(&pred));
    let (density_loss, net_grads, grad_p) = net.loss_and_grad(&sample.image, &guidance, &sample.target)?;
    let span = penet.scale.hi - penet.scale.lo;
    let mut grad_pred = row_mean_collapse_adjoint(&grad_p).map(|g| g * span);
    let mut loss = density_loss;
    if i2p_weight > 0.0 {
        let target = penet.scale.normalize(&sample.perspective);
        loss += i2p_weight * reconstruction_loss(&pred, &target);
        for (g, r) in grad_pred.values.iter_mut().zip(reconstruction_grad(&pred, &target).values) {
            *g += i2p_weight * r;
        }
    }
    let (enc_grads, _) = backward(penet, &cache, &grad_pred)?;
    Ok((loss, density_loss, net_grads, enc_grads))
}

pub fn finetune_phase3(
    net: &Network,
    penet: &PenetParams,
    samples: &[TrainSample],
    config: &Phase3Config,
) -> Result<Phase3Result> {
    if samples.is_empty() {
        return Err(invalid("phase 3 needs a nonempty dataset"));
    }
    let hyper = &config.trainer;
    hyper.validate()?;
    match config.mode {
        Phase3Mode::FrozenEstimator => {
            let guided = samples
                .iter()
                .map(|s| {
                    Ok(TrainSample {
                        perspective: estimate_perspective(penet, &s.image)?,
                        ..s.clone()
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let (net, curve) = crate::pgc_net::trainer::train_samples(net, &guided, hyper)?;
            Ok(Phase3Result {
                net,
                penet: penet.clone(),
                loss_curve: curve,
            })
        }
        Phase3Mode::JointEstimator => {
            let mut net = net.clone();
            let mut penet = penet.clone();
            let mut net_params = net.params();
            let mut enc = penet.encoder_params(EncoderPath::I);
            let mut opt_net = Sgd::new(hyper.learning_rate, hyper.momentum, hyper.weight_decay, net_params.len());
            let mut opt_enc = Sgd::new(hyper.learning_rate, hyper.momentum, hyper.weight_decay, enc.len());
            let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
            let mut order: Vec<usize> = (0..samples.len()).collect();
            let mut curve = Vec::with_capacity(hyper.epochs);
            for _ in 0..hyper.epochs {
                order.shuffle(&mut rng);
                let mut total = 0.0;
                for &i in &order {
                    let (loss, density_loss, gn, ge) = joint_loss_and_grad(&net, &penet, &samples[i], config.i2p_weight)?;
                    check_finite(loss, &gn)?;
                    check_finite(loss, &ge)?;
                    total += density_loss;
                    opt_net.step(&mut net_params, &gn, None);
                    opt_enc.step(&mut enc, &ge, None);
                    net.set_params(&net_params)?;
                    penet.set_encoder_params(EncoderPath::I, &enc)?;
                }
                curve.push(total / samples.len() as f64);
            }
            Ok(Phase3Result {
                net,
                penet,
                loss_curve: curve,
            })
        }
    }
}

/// Mean density loss of a phase-3 system on `samples`, using the
/// estimator's guidance.
pub fn phase3_density_loss(net: &Network, penet: &PenetParams, samples: &[TrainSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let guidance = estimate_perspective(penet, &s.image)?;
        total += net.loss(&s.image, &guidance, &s.target)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Central-difference check of [`joint_loss_and_grad`] over the density
/// network parameters followed by the image-encoder parameters.
pub fn gradcheck_joint(
    net: &Network,
    penet: &PenetParams,
    sample: &TrainSample,
    i2p_weight: f64,
    step: f64,
    tolerance: f64,
) -> Result<GradReport> {
    let (_, _, gn, ge) = joint_loss_and_grad(net, penet, sample, i2p_weight)?;
    let analytic: Vec<f64> = gn.into_iter().chain(ge).collect();
    let net_base = net.params();
    let enc_base = penet.encoder_params(EncoderPath::I);
    let split = net_base.len();

    let mut probe_net = net.clone();
    let mut probe_pe = penet.clone();
    let mut eval = |theta: &[f64]| -> Result<(f64, u64)> {
        probe_net.set_params(&theta[..split])?;
        probe_pe.set_encoder_params(EncoderPath::I, &theta[split..])?;
        let (pred, pcache) = forward_cached(&probe_pe, &sample.image, EncoderPath::I)?;
        let guidance = probe_pe.scale.denormalize(&row_mean_collapse(&pred));
        let (density, ncache) = probe_net.forward_cached(&sample.image, &guidance)?;
        let mut loss = 0.5 * sum_sq(&density, &sample.target);
        if i2p_weight > 0.0 {
            loss += i2p_weight * reconstruction_loss(&pred, &probe_pe.scale.normalize(&sample.perspective));
        }
        let sig = probe_net.branch_signature(&ncache) ^ pcache.signature().rotate_left(17);
        Ok((loss, sig))
    };

    let base: Vec<f64> = net_base.into_iter().chain(enc_base).collect();
    let (_, base_sig) = eval(&base)?;
    let mut report = GradReport {
        step,
        tolerance,
        checked: 0,
        kink_adjacent: 0,
        max_rel_error: 0.0,
        mean_rel_error: 0.0,
        max_abs_grad: 0.0,
        worst_param: None,
        pass: true,
    };
    let mut sum_err = 0.0;
    let mut theta = base.clone();
    for i in 0..base.len() {
        theta[i] = base[i] + step;
        let (plus, sp) = eval(&theta)?;
        theta[i] = base[i] - step;
        let (minus, sm) = eval(&theta)?;
        theta[i] = base[i];
        if sp != base_sig || sm != base_sig {
            report.kink_adjacent += 1;
            continue;
        }
        let err = relative_error(analytic[i], (plus - minus) / (2.0 * step));
        report.checked += 1;
        sum_err += err;
        report.max_abs_grad = report.max_abs_grad.max(analytic[i].abs());
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_param = Some(i);
        }
    }
    report.mean_rel_error = if report.checked > 0 { sum_err / report.checked as f64 } else { 0.0 };
    report.pass = report.max_rel_error <= tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::{synth_scene, SceneConfig};
    use crate::perspective::synth_perspective;
    use crate::pgc_net::network::{build_toy_net, NetworkConfig};

    fn tiny() -> PenetConfig {
        PenetConfig {
            encoder_channels: [2, 3, 3, 4],
            decoder_channels: [3, 2, 2, 1],
            image_channels: 3,
        }
    }

    fn naive_conv_s2(x: &Tensor64, c: &Conv2d) -> Tensor64 {
        let (ch, h, w) = x.shape();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor64::zeros(c.out_ch, oh, ow);
        for o in 0..c.out_ch {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = c.bias[o];
                    for k in 0..ch {
                        for di in 0..3 {
                            for dj in 0..3 {
                                let si = (2 * i + di) as isize - 1;
                                let sj = (2 * j + dj) as isize - 1;
                                if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                    continue;
                                }
                                acc += c.weight[((o * ch + k) * 3 + di) * 3 + dj] * x.get(k, si as usize, sj as usize);
                            }
                        }
                    }
                    out.set(o, i, j, acc);
                }
            }
        }
        out
    }

    // Gather form: out[t] = Σ w · x[s] over sources s with 2s + k − 1 = t.
    fn naive_up(x: &Tensor64, u: &ConvTranspose2d) -> Tensor64 {
        let (ch, h, w) = x.shape();
        let mut out = Tensor64::zeros(u.out_ch, 2 * h, 2 * w);
        for o in 0..u.out_ch {
            for ti in 0..2 * h {
                for tj in 0..2 * w {
                    let mut acc = u.bias[o];
                    for k in 0..ch {
                        for di in 0..3 {
                            for dj in 0..3 {
                                let ni = ti as isize + 1 - di as isize;
                                let nj = tj as isize + 1 - dj as isize;
                                if ni < 0 || nj < 0 || ni % 2 != 0 || nj % 2 != 0 {
                                    continue;
                                }
                                let (si, sj) = ((ni / 2) as usize, (nj / 2) as usize);
                                if si >= h || sj >= w {
                                    continue;
                                }
                                acc += u.weight[((k * u.out_ch + o) * 3 + di) * 3 + dj] * x.get(k, si, sj);
                            }
                        }
                    }
                    out.set(o, ti, tj, acc);
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_layerwise_oracle() {
        let params = PenetParams::init(&tiny(), 3).unwrap();
        let scene = synth_scene(&SceneConfig::new(32, 32, 6, 1)).unwrap();
        let image = scene.image.to_f64();
        let img16 = Tensor64::from_vec(3, 16, 16, {
            let mut v = Vec::new();
            for c in 0..3 {
                for i in 0..16 {
                    for j in 0..16 {
                        v.push(image.get(c, i, j));
                    }
                }
            }
            v
        })
        .unwrap();
        let mut x = img16.clone();
        for c in &params.encoder_i {
            x = naive_conv_s2(&x, c).map(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v });
        }
        for u in &params.decoder {
            x = naive_up(&x, u).map(|v| v.max(0.0));
        }
        let (got, _) = forward_cached(&params, &img16, EncoderPath::I).unwrap();
        assert_eq!(got.dims(), (16, 16));
        for (a, b) in got.values.iter().zip(x.data()) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn rejects_non_divisible_input() {
        let params = PenetParams::init(&tiny(), 0).unwrap();
        let x = Tensor::zeros(1, 24, 32);
        assert!(penet_forward(&params, &x, EncoderPath::P).is_err());
        assert!(PenetConfig { decoder_channels: [3, 2, 2, 2], ..tiny() }.validate().is_err());
    }

    #[test]
    fn phase2_requires_decoder() {
        let params = PenetParams::init(&tiny(), 0).unwrap();
        let scene = synth_scene(&SceneConfig::new(32, 32, 4, 0)).unwrap();
        let pairs = vec![(scene.image.clone(), scene.gt_perspective.clone())];
        let err = train_phase2(&pairs, &params, &TrainerConfig::default()).unwrap_err();
        assert!(matches!(err, crate::error::PgcError::InvalidArgument(_)));
    }

    #[test]
    fn phase1_reduces_loss_and_phase2_freezes_decoder() {
        let maps: Vec<Map2> = (0..4)
            .map(|s| synth_perspective(32, 32, 1.0 + 0.2 * s as f64, 0.1, 0.0, s).unwrap())
            .collect();
        let hyper = TrainerConfig {
            learning_rate: 3e-2,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 15,
            seed: 4,
        };
        let (p1, rep) = train_phase1(&maps, &tiny(), &hyper).unwrap();
        assert!(rep.loss_curve.last().unwrap() < &rep.loss_curve[0]);
        assert!(p1.decoder_ready);

        let pairs: Vec<(Tensor, Map2)> = (0..2)
            .map(|s| {
                let sc = synth_scene(&SceneConfig::new(32, 32, 5, s)).unwrap();
                (sc.image, sc.gt_perspective)
            })
            .collect();
        let (p2, rep2) = train_phase2(&pairs, &p1, &TrainerConfig { epochs: 2, ..hyper }).unwrap();
        assert_eq!(rep2.phase, 2);
        let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(p2.decoder_params()), bits(p1.decoder_params()));
        assert_eq!(bits(p2.encoder_params(EncoderPath::P)), bits(p1.encoder_params(EncoderPath::P)));
        assert_ne!(bits(p2.encoder_params(EncoderPath::I)), bits(p1.encoder_params(EncoderPath::I)));
    }

    fn phase3_fixture() -> (Network, PenetParams, Vec<TrainSample>) {
        let cfg = NetworkConfig {
            backbone_channels: vec![3],
            num_pgc_blocks: 1,
            block_out_channels: 2,
            ..Default::default()
        };
        let net = build_toy_net(&cfg, 2).unwrap();
        let mut pe = PenetParams::init(&tiny(), 5).unwrap();
        pe.scale = PerspectiveScale { lo: 1.0, hi: 4.5 };
        pe.decoder_ready = true;
        let samples = (0..2)
            .map(|s| TrainSample::from_scene(&synth_scene(&SceneConfig::new(32, 32, 6, 10 + s)).unwrap()).unwrap())
            .collect();
        (net, pe, samples)
    }

    #[test]
    fn phase3_freeze_contracts() {
        let (net, pe, samples) = phase3_fixture();
        let trainer = TrainerConfig {
            learning_rate: 1e-4,
            epochs: 1,
            ..Default::default()
        };
        let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
        let a = finetune_phase3(
            &net,
            &pe,
            &samples,
            &Phase3Config {
                mode: Phase3Mode::FrozenEstimator,
                trainer: trainer.clone(),
                i2p_weight: 0.0,
            },
        )
        .unwrap();
        assert_eq!(a.penet, pe);
        assert_ne!(bits(a.net.params()), bits(net.params()));

        let b = finetune_phase3(
            &net,
            &pe,
            &samples,
            &Phase3Config {
                mode: Phase3Mode::JointEstimator,
                trainer,
                i2p_weight: 1.0,
            },
        )
        .unwrap();
        assert_eq!(bits(b.penet.decoder_params()), bits(pe.decoder_params()));
        assert_eq!(bits(b.penet.encoder_params(EncoderPath::P)), bits(pe.encoder_params(EncoderPath::P)));
        assert_ne!(bits(b.penet.encoder_params(EncoderPath::I)), bits(pe.encoder_params(EncoderPath::I)));
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        let (net, pe, samples) = phase3_fixture();
        let r = gradcheck_joint(&net, &pe, &samples[0], 1.0, 1e-4, 1e-4).unwrap();
        assert!(r.checked > 0);
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn parameter_groups_round_trip() {
        let pe = PenetParams::init(&tiny(), 8).unwrap();
        let mut other = PenetParams::zeros(&tiny()).unwrap();
        other.load_groups(&pe.named_groups()).unwrap();
        assert_eq!(other.encoder_i, pe.encoder_i);
        assert_eq!(other.decoder, pe.decoder);
        assert!(other.load_groups(&[("bogus".into(), vec![])]).is_err());
    }
}
