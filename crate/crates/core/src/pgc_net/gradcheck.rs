//! Full-network comparison of analytic gradients against central differences.

use serde::{Deserialize, Serialize};

use super::network::Network;
use super::trainer::TrainSample;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub step: f64,
    pub tolerance: f64,
    pub checked: usize,
    /// Parameters whose ± probes flipped a rectifier, hinge or clamp decision.
    pub kink_adjacent: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    pub max_abs_grad: f64,
    pub worst_param: Option<usize>,
    pub pass: bool,
}

/// Denominator floor for the relative error, so that gradients that are zero
/// up to rounding compare by absolute difference.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks the gradient of `½‖Φ − Y‖²` for every parameter of `net`.
pub fn gradcheck(net: &Network, sample: &TrainSample, step: f64, tolerance: f64) -> Result<GradReport> {
    let (_, analytic, _) = net.loss_and_grad(&sample.image, &sample.perspective, &sample.target)?;
    let base = net.params();
    let (_, cache) = net.forward_cached(&sample.image, &sample.perspective)?;
    let base_sig = net.branch_signature(&cache);

    let mut probe = net.clone();
    let mut eval = |params: &[f64]| -> Result<(f64, u64)> {
        probe.set_params(params)?;
        let (pred, cache) = probe.forward_cached(&sample.image, &sample.perspective)?;
        let loss = 0.5
            * pred
                .values
                .iter()
                .zip(&sample.target.values)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>();
        Ok((loss, probe.branch_signature(&cache)))
    };

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
    let mut params = base.clone();
    for i in 0..base.len() {
        params[i] = base[i] + step;
        let (plus, sig_plus) = eval(&params)?;
        params[i] = base[i] - step;
        let (minus, sig_minus) = eval(&params)?;
        params[i] = base[i];
        if sig_plus != base_sig || sig_minus != base_sig {
            report.kink_adjacent += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
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
    use crate::pgc_net::network::{build_toy_net, NetworkConfig};

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn two_block_net_passes() {
        let cfg = NetworkConfig {
            backbone_channels: vec![3],
            num_pgc_blocks: 2,
            block_out_channels: 2,
            ..Default::default()
        };
        let mut net = build_toy_net(&cfg, 3).unwrap();
        let scene = synth_scene(&SceneConfig::new(32, 32, 6, 2)).unwrap();
        let sample = TrainSample::from_scene(&scene).unwrap();
        net.init_perspective(&sample.perspective.values);
        let r = gradcheck(&net, &sample, 1e-4, 1e-4).unwrap();
        assert!(r.checked > 0);
        assert!(r.pass, "{r:?}");
    }
}
