use std::fs;
use std::path::Path;
use std::time::Instant;

use pgc_core::density::{mae_mse, synth_scene, Scene};
use pgc_core::io::{
    load_checkpoint, load_map, load_scene_set, load_tensor, loss_curve_csv, save_checkpoint, save_dictionary,
    save_scene_set, save_tensor,
};
use pgc_core::penet::{
    estimate_perspective, finetune_phase3, train_phase1, train_phase2, Phase3Config, Phase3Mode,
};
use pgc_core::pgc_net::{build_toy_net, evaluate, gradcheck, prepare, train, NetworkConfig, TrainSample};
use pgc_core::{
    bench_filter, blur_from_perspective, build_dictionary, filter_approx, filter_exact, normalize_perspective,
    synth_perspective, PaddingMode, PerspectiveParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::{Cli, CliError, Command, FilterMode, Padding, Variant};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let out = cli.out.as_path();
    match &cli.command {
        Command::Dict(c) => dict(&c.dict.apply(&cfg.dictionary)?, out),
        Command::Filter(c) => filter(c, &cfg, out),
        Command::Bench(c) => bench(c, &cfg, seed, out),
        Command::Synth(c) => synth(c, &cfg, seed, out),
        Command::Train(c) => train_cmd(c, &cfg, seed, out),
        Command::Eval(c) => eval(c, out),
        Command::Penet(c) => penet(c, &cfg, seed, out),
        Command::Gradcheck(c) => gradcheck_cmd(c, &cfg, seed, out),
    }
}

/// Writes `name` under `out` and echoes it on stdout.
fn report<T: Serialize>(out: &Path, name: &str, value: &T) -> Result<()> {
    fs::create_dir_all(out)?;
    let text = serde_json::to_string_pretty(value)?;
    fs::write(out.join(name), format!("{text}\n"))?;
    println!("{text}");
    Ok(())
}

fn padding(p: Padding) -> PaddingMode {
    match p {
        Padding::Replicate => PaddingMode::Replicate,
        Padding::Zero => PaddingMode::Zero,
    }
}

fn require<'a>(flag: Option<&'a Path>, cfg: Option<&'a Path>, name: &str) -> Result<&'a Path> {
    flag.or(cfg)
        .ok_or_else(|| CliError::Usage(format!("{name} is required (flag or config)")))
}

fn load_scenes(dir: &Path) -> Result<Vec<Scene>> {
    let scenes = load_scene_set(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    if scenes.is_empty() {
        return Err(CliError::Data(format!("{}: scene set is empty", dir.display())));
    }
    Ok(scenes)
}

fn dict(config: &pgc_core::DictionaryConfig, out: &Path) -> Result<()> {
    let dict = build_dictionary(config)?;
    let meta = save_dictionary(out, &dict)?;
    println!("{}", serde_json::to_string_pretty(&meta)?);
    Ok(())
}

fn filter(c: &crate::FilterCmd, cfg: &RunConfig, out: &Path) -> Result<()> {
    let x = load_tensor(&c.input).map_err(|e| CliError::Data(format!("--input {}: {e}", c.input.display())))?;
    let p = load_map(&c.perspective)
        .map_err(|e| CliError::Data(format!("--perspective {}: {e}", c.perspective.display())))?;
    let (_, h, w) = x.shape();
    if p.dims() != (h, w) {
        return Err(CliError::Data(format!(
            "perspective is {}x{} but the input is {h}x{w}",
            p.height, p.width
        )));
    }
    let observed = PerspectiveParams::from_observed(&p.values);
    let params = PerspectiveParams {
        alpha: c.alpha.unwrap_or(observed.alpha),
        beta: c.beta.unwrap_or(observed.beta),
        a: c.a,
        p0: c.p0,
    };
    let sigma = blur_from_perspective(&normalize_perspective(&p, &params), &params);
    let dcfg = c.dict.apply(&cfg.dictionary)?;
    let t = Instant::now();
    let (y, retained) = match c.mode {
        FilterMode::Exact => (filter_exact(&x, &sigma, dcfg.kernel_size, dcfg.mode, padding(c.padding))?, None),
        FilterMode::Approx => {
            let dict = build_dictionary(&dcfg)?;
            (filter_approx(&x, &sigma, &dict, padding(c.padding))?, Some(dict.retained))
        }
    };
    let elapsed_ms = t.elapsed().as_secs_f64() * 1e3;
    fs::create_dir_all(out)?;
    save_tensor(&out.join("filtered.ftns"), &y)?;
    report(
        out,
        "filter.json",
        &json!({
            "mode": format!("{:?}", c.mode).to_lowercase(),
            "padding": format!("{:?}", c.padding).to_lowercase(),
            "shape": [x.channels(), h, w],
            "perspective_params": params,
            "sigma_min": sigma.min(),
            "sigma_max": sigma.max(),
            "retained": retained,
            "elapsed_ms": elapsed_ms,
        }),
    )
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize)> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|v| v.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--shape expects C,H,W, got {s:?}")))?;
    match dims[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(CliError::Usage(format!("--shape expects three positive values, got {s:?}"))),
    }
}

fn bench(c: &crate::BenchCmd, cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let shape = parse_shape(&c.shape)?;
    let dict = build_dictionary(&c.dict.apply(&cfg.dictionary)?)?;
    let r = bench_filter(shape, &dict, c.reps, seed)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("timings.csv"), r.timings_csv())?;
    report(out, "bench.json", &r)
}

fn synth(c: &crate::SynthCmd, cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let mut s = cfg.synth.clone();
    if let Some(v) = c.scenes {
        s.scenes = v;
    }
    if let Some(v) = c.min_heads {
        s.min_heads = v;
    }
    if let Some(v) = c.max_heads {
        s.max_heads = v;
    }
    if let Some(v) = c.height {
        s.scene.height = v;
        s.scene.perspective_slope = 3.5 / (v.max(2) - 1) as f64;
    }
    if let Some(v) = c.width {
        s.scene.width = v;
    }
    if let Some(v) = c.noise {
        s.scene.background_noise = v;
    }
    if s.min_heads > s.max_heads {
        return Err(CliError::Usage("--min-heads exceeds --max-heads".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scenes = Vec::with_capacity(s.scenes);
    for _ in 0..s.scenes {
        let mut sc = s.scene.clone();
        sc.count = rng.random_range(s.min_heads..=s.max_heads);
        sc.seed = rng.random();
        scenes.push(synth_scene(&sc)?);
    }
    save_scene_set(out, &scenes)?;
    let placed: usize = scenes.iter().map(|s| s.meta.placed).sum();
    let requested: usize = scenes.iter().map(|s| s.meta.requested).sum();
    report(
        out,
        "synth.json",
        &json!({ "scenes": scenes.len(), "requested_heads": requested, "placed_heads": placed, "seed": seed, "synth": s }),
    )
}

fn network_config(cfg: &RunConfig, blocks: Option<usize>, no_smoothing: bool, dict: &crate::DictArgs) -> Result<NetworkConfig> {
    let mut n = cfg.network.clone();
    if let Some(b) = blocks {
        n.num_pgc_blocks = b;
    }
    if no_smoothing {
        n.smoothing = false;
    }
    n.dictionary = dict.apply(&n.dictionary)?;
    n.validate()?;
    Ok(n)
}

fn observed_perspective(samples: &[TrainSample]) -> Vec<f64> {
    samples.iter().flat_map(|s| s.perspective.values.iter().copied()).collect()
}

fn train_cmd(c: &crate::TrainCmd, cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let data = require(c.data.as_deref(), cfg.data.as_deref(), "--data")?;
    let scenes = load_scenes(data)?;
    let ncfg = network_config(cfg, c.blocks, c.no_smoothing, &c.dict)?;
    let mut tcfg = cfg.trainer.clone();
    tcfg.seed = seed;
    if let Some(e) = c.epochs {
        tcfg.epochs = e;
    }
    if let Some(lr) = c.lr {
        tcfg.learning_rate = lr;
    }
    tcfg.validate()?;
    let mut net = build_toy_net(&ncfg, seed)?;
    let samples = prepare(&scenes)?;
    net.init_perspective(&observed_perspective(&samples));
    let t = Instant::now();
    let (net, curve) = train(&net, &scenes, &tcfg)?;
    let seconds = t.elapsed().as_secs_f64();
    let ck = out.join("checkpoint");
    save_checkpoint(
        &ck,
        "pgc_net",
        json!({ "network": ncfg, "trainer": tcfg }),
        seed,
        tcfg.epochs,
        curve.last().copied(),
        &net.named_groups(),
    )?;
    fs::write(out.join("loss_curve.csv"), loss_curve_csv(&curve))?;
    let test = match c.test_data.as_deref().or(cfg.test_data.as_deref()) {
        Some(dir) => Some(evaluate(&net, &prepare(&load_scenes(dir)?)?)?),
        None => None,
    };
    report(
        out,
        "train.json",
        &json!({
            "scenes": scenes.len(),
            "epochs": tcfg.epochs,
            "param_count": net.param_count(),
            "final_loss": curve.last(),
            "seconds": seconds,
            "checkpoint": ck,
            "test": test.map(|r| json!({ "mae": r.mae, "mse": r.mse, "mean_loss": r.mean_loss })),
        }),
    )
}

fn read_counts(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let field = line.split(',').next_back().unwrap_or(line).trim();
        match field.parse::<f64>() {
            Ok(v) if v.is_finite() => values.push(v),
            _ if i == 0 => continue,
            _ => return Err(CliError::Data(format!("{}: line {}: not a number", path.display(), i + 1))),
        }
    }
    Ok(values)
}

fn eval(c: &crate::EvalCmd, out: &Path) -> Result<()> {
    if let (Some(pred), Some(gt)) = (&c.pred, &c.gt) {
        let (p, g) = (read_counts(pred)?, read_counts(gt)?);
        let (mae, mse) = mae_mse(&p, &g).map_err(|e| CliError::Data(e.to_string()))?;
        return report(out, "eval.json", &json!({ "count": p.len(), "mae": mae, "mse": mse }));
    }
    let (Some(ck), Some(data)) = (&c.checkpoint, &c.data) else {
        return Err(CliError::Usage("eval needs --checkpoint with --data, or --pred with --gt".into()));
    };
    let (manifest, groups) = load_checkpoint(ck)?;
    if manifest.kind != "pgc_net" {
        return Err(CliError::Data(format!("{}: not a density-network checkpoint", ck.display())));
    }
    let ncfg: NetworkConfig = serde_json::from_value(manifest.config["network"].clone())?;
    let mut net = build_toy_net(&ncfg, manifest.seed)?;
    net.load_groups(&groups)?;
    let r = evaluate(&net, &prepare(&load_scenes(data)?)?)?;
    fs::create_dir_all(out)?;
    let mut csv = String::from("index,predicted,ground_truth\n");
    for (i, (p, g)) in r.predicted.iter().zip(&r.ground_truth).enumerate() {
        csv.push_str(&format!("{i},{p},{g}\n"));
    }
    fs::write(out.join("predictions.csv"), csv)?;
    report(
        out,
        "eval.json",
        &json!({ "count": r.predicted.len(), "mae": r.mae, "mse": r.mse, "mean_loss": r.mean_loss }),
    )
}

fn penet(c: &crate::PenetCmd, cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let data = require(c.data.as_deref(), cfg.data.as_deref(), "--data")?;
    let scenes = load_scenes(data)?;
    let pc = &cfg.penet;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut maps: Vec<_> = (0..pc.synthetic_maps)
        .map(|i| {
            let s = &scenes[0].gt_perspective;
            synth_perspective(s.height, s.width, rng.random_range(0.5..2.0), rng.random_range(0.02..0.15), 0.02, i as u64)
        })
        .collect::<pgc_core::Result<_>>()?;
    for s in &scenes {
        if !maps.contains(&s.gt_perspective) {
            maps.push(s.gt_perspective.clone());
        }
    }

    let mut phase1 = pc.phase1.clone();
    phase1.seed = seed;
    if let Some(e) = c.phase1_epochs {
        phase1.epochs = e;
    }
    let (mut params, rep1) = train_phase1(&maps, &pc.config, &phase1)?;
    let mut reports = json!({ "phase1": rep1 });
    if c.stop_after >= 2 {
        let mut phase2 = pc.phase2.clone();
        phase2.seed = seed;
        if let Some(e) = c.phase2_epochs {
            phase2.epochs = e;
        }
        let pairs: Vec<_> = scenes.iter().map(|s| (s.image.clone(), s.gt_perspective.clone())).collect();
        let (p2, rep2) = train_phase2(&pairs, &params, &phase2)?;
        params = p2;
        reports["phase2"] = serde_json::to_value(rep2)?;
    }
    if c.stop_after >= 3 {
        let ncfg = network_config(cfg, c.blocks, false, &crate::DictArgs::default())?;
        let mut net = build_toy_net(&ncfg, seed)?;
        let samples = prepare(&scenes)?;
        let observed: Vec<f64> = samples
            .iter()
            .map(|s| estimate_perspective(&params, &s.image).map(|m| m.values))
            .collect::<pgc_core::Result<Vec<_>>>()?
            .concat();
        net.init_perspective(&observed);
        let mut trainer = pc.phase3.clone();
        trainer.seed = seed;
        if let Some(e) = c.epochs {
            trainer.epochs = e;
        }
        let mode = match c.variant {
            Some(Variant::A) => Phase3Mode::FrozenEstimator,
            Some(Variant::B) => Phase3Mode::JointEstimator,
            None => pc.variant,
        };
        let res = finetune_phase3(
            &net,
            &params,
            &samples,
            &Phase3Config {
                mode,
                trainer: trainer.clone(),
                i2p_weight: pc.i2p_weight,
            },
        )?;
        params = res.penet.clone();
        save_checkpoint(
            &out.join("network"),
            "pgc_net",
            json!({ "network": ncfg, "trainer": trainer }),
            seed,
            trainer.epochs,
            res.loss_curve.last().copied(),
            &res.net.named_groups(),
        )?;
        fs::write(out.join("phase3_loss_curve.csv"), loss_curve_csv(&res.loss_curve))?;
        let test = match c.test_data.as_deref().or(cfg.test_data.as_deref()) {
            Some(dir) => {
                let guided = prepare(&load_scenes(dir)?)?
                    .into_iter()
                    .map(|s| {
                        Ok(TrainSample {
                            perspective: estimate_perspective(&params, &s.image)?,
                            ..s
                        })
                    })
                    .collect::<pgc_core::Result<Vec<_>>>()?;
                let r = evaluate(&res.net, &guided)?;
                Some(json!({ "mae": r.mae, "mse": r.mse, "mean_loss": r.mean_loss }))
            }
            None => None,
        };
        reports["phase3"] = json!({
            "variant": mode,
            "final_density_loss": res.loss_curve.last(),
            "loss_curve": res.loss_curve,
            "test": test,
        });
    }
    save_checkpoint(
        &out.join("penet"),
        "penet",
        serde_json::to_value(&pc.config)?,
        seed,
        c.stop_after as usize,
        None,
        &params.named_groups(),
    )?;
    report(out, "penet_report.json", &reports)
}

fn gradcheck_cmd(c: &crate::GradcheckCmd, cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let ncfg = network_config(cfg, c.blocks, false, &c.dict)?;
    let mut sc = cfg.synth.scene.clone();
    sc.height = c.height;
    sc.width = c.width;
    sc.perspective_slope = 3.5 / (c.height.max(2) - 1) as f64;
    sc.count = 8;
    sc.seed = seed;
    let sample = TrainSample::from_scene(&synth_scene(&sc)?)?;
    let mut net = build_toy_net(&ncfg, seed)?;
    net.init_perspective(&sample.perspective.values);
    let r = gradcheck(&net, &sample, c.step, c.tolerance)?;
    report(out, "gradcheck.json", &r)?;
    if r.pass {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "max relative error {:.3e} exceeds {:.1e}",
            r.max_rel_error, r.tolerance
        )))
    }
}
