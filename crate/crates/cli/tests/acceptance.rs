//! Acceptance suite: every criterion runs in sequence at its stated
//! tolerance and runtime bound and prints one PASS/FAIL line. The test fails
//! if any criterion does.
//!
//! Run alone with `cargo test -p hydra-cli --test acceptance -- --nocapture`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use hydra::augmentation::{crop_region, BoundingBox, Crop, CropKind, CropStyle};
use hydra::dataset::load_manifest;
use hydra::fusion::{majority_vote, RegionBallot};
use hydra::metrics::{build_confusion, weighted_fmeasure, ClassWeights};
use hydra::micronet::arch::Architecture;
use hydra::micronet::gradcheck::check_gradients;
use hydra::micronet::{LayerSpec, Network};
use hydra::run::{predict_run, train_run};
use hydra::synthetic::{generate_synthetic, SyntheticSpec};
use hydra::trainer::{
    cost_report, default_roster, lr_at, resolve_scheme, spawn_heads, train_body, train_head, AugmentSpec, HeadConfig,
    ImageCache, RunConfig, TrainPlan, TrainingData,
};
use hydra::weighting::SchemeName;
use hydra::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn within(started: Instant, limit: Duration) -> Result<(), String> {
    let took = started.elapsed();
    check(took < limit, || {
        format!("took {:.2} s, limit {} s", took.as_secs_f64(), limit.as_secs())
    })
}

// 1 -------------------------------------------------------------------------

/// Per-class counts straight off the pair list, then F, then the weighted mean.
fn oracle_fmeasure(pred: &[usize], truth: &[usize], w: &[f64]) -> f64 {
    let mut num = 0.0;
    for (i, wi) in w.iter().enumerate() {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == i, t == i) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        num += wi * f;
    }
    num / w.iter().sum::<f64>()
}

struct Instance {
    w: Vec<f64>,
    fd: usize,
    pred: Vec<usize>,
    truth: Vec<usize>,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let m = rng.random_range(2..=10);
    let fd = rng.random_range(0..m);
    let mut w: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..2.0)).collect();
    w[fd] = 0.0;
    let n = rng.random_range(1..=200);
    let pred = (0..n).map(|_| rng.random_range(0..m)).collect();
    let truth = (0..n).map(|_| rng.random_range(0..m)).collect();
    Instance { w, fd, pred, truth }
}

fn fbar(pred: &[usize], truth: &[usize], w: &[f64], fd: usize) -> f64 {
    let c = build_confusion(pred, truth, w.len()).unwrap();
    weighted_fmeasure(&c, &ClassWeights::new(w.to_vec(), fd).unwrap()).unwrap()
}

fn scorer_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for k in 0..1000 {
        let x = random_instance(&mut rng);
        let diff = (fbar(&x.pred, &x.truth, &x.w, x.fd) - oracle_fmeasure(&x.pred, &x.truth, &x.w)).abs();
        worst = worst.max(diff);
        check(diff < 1e-12, || format!("instance {k}: |diff| = {diff:e}"))?;
    }
    within(started, Duration::from_secs(5))?;
    Ok(format!("1000 instances, max |diff| {worst:e}"))
}

// 2 -------------------------------------------------------------------------

fn leakage_at(pred: &[usize], truth: &[usize], w: &[f64], fd: usize, i: usize) -> Result<bool, String> {
    if pred[i] != truth[i] || w[truth[i]] <= 0.0 {
        return Ok(false);
    }
    let base = fbar(pred, truth, w, fd);
    let mut moved = pred.to_vec();
    moved[i] = fd;
    let after = fbar(&moved, truth, w, fd);
    check(after < base, || {
        format!("pred {pred:?} truth {truth:?} victim {i}: {base} -> {after}")
    })?;
    Ok(true)
}

fn false_detection_leakage() -> Outcome {
    // exhaustive: every (pred, truth) with n = 4 over three classes plus false
    // detection, every correct victim
    let w = [1.0, 0.6, 1.4, 0.0];
    let (fd, n) = (3, 4);
    let mut exhaustive = 0;
    for code in 0..4usize.pow(2 * n as u32) {
        let digits: Vec<usize> = (0..2 * n).map(|k| code / 4usize.pow(k as u32) % 4).collect();
        let (pred, truth) = digits.split_at(n);
        for i in 0..n {
            exhaustive += leakage_at(pred, truth, &w, fd, i)? as usize;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut random = 0;
    for _ in 0..1000 {
        let x = random_instance(&mut rng);
        for i in 0..x.pred.len() {
            random += leakage_at(&x.pred, &x.truth, &x.w, x.fd, i)? as usize;
        }
    }
    check(exhaustive > 10_000 && random > 1_000, || {
        "too few victims checked".into()
    })?;
    Ok(format!(
        "{exhaustive} exhaustive and {random} random victims, all strictly lower"
    ))
}

// 3 -------------------------------------------------------------------------

fn lr_schedule() -> Outcome {
    let plan = TrainPlan::default();
    let got = (0..5)
        .map(|e| lr_at(&plan, e))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    check(got == [1e-4, 1e-5, 1e-5, 1e-5, 1e-6], || format!("got {got:?}"))?;
    check(lr_at(&plan, 5).is_err(), || "epoch 5 should be out of range".into())?;
    Ok(format!("{got:?}"))
}

// 4 -------------------------------------------------------------------------

fn vote_exhaustion() -> Outcome {
    let started = Instant::now();
    let fd = 3;
    let mut cases = 0;
    for h in 1..=16usize {
        for a in 0..=h {
            for b in 0..=h - a {
                let counts = [a, b, h - a - b];
                let votes = (0..3).flat_map(|l| std::iter::repeat_n(l, counts[l])).collect();
                let ballot = RegionBallot {
                    region_id: "r".into(),
                    votes,
                };
                let got = majority_vote(&ballot, h, fd).map_err(|e| e.to_string())?;
                let top = *counts.iter().max().unwrap();
                let modal = counts.iter().position(|&c| c == top).unwrap();
                let want = if 2 * top > h { modal } else { fd };
                check(got == want, || {
                    format!("h={h} counts={counts:?}: got {got}, want {want}")
                })?;
                cases += 1;
            }
        }
    }
    within(started, Duration::from_secs(1))?;
    Ok(format!("{cases} vote distributions"))
}

// 5 -------------------------------------------------------------------------

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels: cin,
        out_channels: cout,
        kernel: [1, 3][rng.random_range(0..2)],
        stride: 1,
    }
}

/// A small random network whose body is of the given family, closed by
/// flatten and a dense classifier that also takes the metadata.
fn random_micronet(rng: &mut ChaCha8Rng, family: usize) -> Network {
    let classes = rng.random_range(2..=4);
    let metadata = rng.random_range(0..=3);
    let (input, mut layers) = match family {
        0 => {
            let d = rng.random_range(2..=6);
            let hidden = rng.random_range(2..=6);
            let input = vec![d];
            let layers = vec![
                LayerSpec::Dense {
                    inputs: d + metadata,
                    units: hidden,
                },
                LayerSpec::Relu,
            ];
            (input, layers)
        }
        1 => {
            let c = rng.random_range(1..=3);
            let out = rng.random_range(1..=3);
            let stride = rng.random_range(1..=2);
            let layers = vec![
                LayerSpec::Conv2d {
                    in_channels: c,
                    out_channels: out,
                    kernel: 3,
                    stride,
                },
                LayerSpec::Relu,
            ];
            (vec![rng.random_range(3..=5), rng.random_range(3..=5), c], layers)
        }
        2 => {
            let c = rng.random_range(1..=3);
            let inner = vec![LayerSpec::Relu, conv(rng, c, c), LayerSpec::Relu, conv(rng, c, c)];
            (vec![3, 4, c], vec![LayerSpec::ResidualBlock { inner }, LayerSpec::Relu])
        }
        _ => {
            let c = rng.random_range(1..=3);
            let block = LayerSpec::DenseBlock {
                in_channels: c,
                growth: rng.random_range(1..=2),
                layers: rng.random_range(1..=2),
                kernel: [1, 3][rng.random_range(0..2)],
            };
            (vec![3, 3, c], vec![block])
        }
    };
    let mut shape = input.clone();
    let mut pending = metadata;
    for l in &layers {
        if matches!(l, LayerSpec::Dense { .. }) {
            shape[0] += std::mem::take(&mut pending);
        }
        shape = l.output_shape(&shape, "probe").unwrap();
    }
    if shape.len() > 1 {
        layers.push(LayerSpec::Flatten);
    }
    layers.push(LayerSpec::Dense {
        inputs: shape.iter().product::<usize>() + pending,
        units: classes,
    });
    let mut net = Network::new(input, metadata, layers).unwrap();
    for p in net.params_mut() {
        *p = random_tensor(rng, p.shape(), 0.5);
    }
    net
}

fn gradient_verification() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut worst, mut components) = (0.0f64, 0);
    let cases = 60;
    for k in 0..cases {
        let net = random_micronet(&mut rng, k % 4);
        let pixels = random_tensor(&mut rng, net.input_shape(), 1.0);
        let metadata: Vec<f64> = (0..net.metadata_width()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let weights: Vec<f64> = (0..net.classes()).map(|_| rng.random_range(0.5..2.0)).collect();
        let target = rng.random_range(0..net.classes());
        let report =
            check_gradients(&net, &pixels, &metadata, target, &weights, None, 1e-5).map_err(|e| e.to_string())?;
        check(report.checked > 0, || format!("case {k}: nothing checked"))?;
        let err = report.max_relative_error();
        check(err < 1e-6, || {
            format!("case {k}: relative error {err:e} at {:?}", report.worst)
        })?;
        worst = worst.max(err);
        components += report.checked;
    }
    within(started, Duration::from_secs(60))?;
    Ok(format!(
        "{cases} networks, {components} components, worst relative error {worst:e}"
    ))
}

// 6 -------------------------------------------------------------------------

fn ensemble_gain() -> Outcome {
    let started = Instant::now();
    let reference = RunConfig::load(&configs().join("reference.toml")).map_err(|e| e.to_string())?;
    check(reference.heads.len() == 6, || {
        "reference config must have six heads".into()
    })?;
    let dir = tempfile::tempdir().unwrap();
    let mut gains = Vec::new();
    for seed in 1..=5u64 {
        let data = dir.path().join(format!("data-{seed}"));
        let run = dir.path().join(format!("run-{seed}"));
        generate_synthetic(&SyntheticSpec::default(), seed, &data).map_err(|e| e.to_string())?;
        let mut cfg = reference.clone();
        cfg.plan.seed = seed;
        train_run(&cfg, &data, &run, 1).map_err(|e| e.to_string())?;
        let s = predict_run(&run, &data.join("eval.json"), &run.join("eval"), 1).map_err(|e| e.to_string())?;
        let best = s.best_head_accuracy();
        println!(
            "    seed {seed}: fused {:.3}, best head {best:.3}, {} tie/low-vote false detections ({:.0} s)",
            s.fused_accuracy,
            s.false_detections,
            started.elapsed().as_secs_f64()
        );
        gains.push(s.fused_accuracy - best);
    }
    let wins = gains.iter().filter(|g| **g >= 0.0).count();
    let mut sorted = gains.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[2];
    let summary = format!("fused >= best head in {wins}/5 seeds, median gain {median:+.3}");
    check(wins >= 4 && median >= 0.0, || summary.clone())?;
    within(started, Duration::from_secs(600))?;
    Ok(summary)
}

// 7 -------------------------------------------------------------------------

fn cost_accounting() -> Outcome {
    let c = cost_report(&TrainPlan::default(), &default_roster());
    check(c.hydra_epochs == 72 && c.independent_epochs == 132, || {
        format!("hydra {} independent {}", c.hydra_epochs, c.independent_epochs)
    })?;
    check((1.8..=1.9).contains(&c.ratio), || format!("ratio {}", c.ratio))?;
    Ok(format!("hydra 72, independent 132, ratio {:.4}", c.ratio))
}

// 8 -------------------------------------------------------------------------

fn crop_boundary() -> Outcome {
    let img = Tensor::zeros(&[200, 200, 4]);
    let style = CropStyle {
        kind: CropKind::ExtMulti,
        expansion_factor: 1.0,
        min_size: 96,
    };
    let crop = |w| {
        crop_region(
            &img,
            BoundingBox {
                x: 20,
                y: 20,
                w,
                h: 120,
            },
            &style,
        )
        .map_err(|e| e.to_string())
    };
    check(matches!(crop(95)?, Crop::Rejected { width: 95, .. }), || {
        "95 px was not rejected".into()
    })?;
    check(matches!(crop(96)?, Crop::Accepted(_)), || {
        "96 px was not accepted".into()
    })?;
    Ok("95 px rejected, 96 px accepted".into())
}

// 9 -------------------------------------------------------------------------

fn fork_fidelity() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        classes: 4,
        train_regions: 40,
        eval_regions: 20,
        image_size: 32,
        ..SyntheticSpec::default()
    };
    let err = |e: hydra::error::Error| e.to_string();
    generate_synthetic(&spec, 9, dir.path()).map_err(err)?;
    let train = load_manifest(&dir.path().join("train.json")).map_err(err)?;
    let images = ImageCache::load(&train).map_err(err)?;
    let data = TrainingData::new(&train, &images, None).map_err(err)?;
    let cfg = RunConfig::load(&configs().join("tiny.toml")).map_err(err)?;

    let (body, _) = train_body(&cfg, Architecture::Residual, &data).map_err(err)?;
    let head = |id: &str, crop, augment: &str, weighting| HeadConfig {
        id: id.into(),
        cnn: Architecture::Residual,
        crop,
        augment: AugmentSpec::Preset(augment.into()),
        weighting,
        seed: 0,
    };
    let roster = vec![
        head("orig-flip", CropKind::OrigPan, "flip", SchemeName::Unweighted),
        head("ext-flip", CropKind::ExtPan, "flip", SchemeName::Unweighted),
        head("ext-zoom", CropKind::ExtPan, "zoom", SchemeName::Unweighted),
        head("ext-freq", CropKind::ExtPan, "flip", SchemeName::Frequency),
        head("multi-shift", CropKind::ExtMulti, "shift", SchemeName::Frequency),
    ];
    let bodies = BTreeMap::from([(Architecture::Residual, body.clone())]);
    let jobs = spawn_heads(&bodies, &roster).map_err(err)?;
    for job in &jobs {
        check(job.network.checksum() == body.checksum(), || {
            format!("head {} differs from its body at spawn", job.config.id)
        })?;
    }
    let mut trained = BTreeMap::new();
    for job in jobs {
        let id = job.config.id.clone();
        let scheme = resolve_scheme(job.config.weighting, &cfg.weighting, None, data.classes()).map_err(err)?;
        let (net, _) = train_head(&cfg, job, &scheme, &data).map_err(err)?;
        if let Some(other) = trained.insert(net.checksum(), id.clone()) {
            return Err(format!("heads {other} and {id} trained to identical weights"));
        }
    }
    Ok(format!(
        "{} heads equal the body at spawn, all distinct after training",
        roster.len()
    ))
}

// 10 ------------------------------------------------------------------------

fn hydra(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hydra"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("hydra {args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// gen, train, predict and score into `root`; returns the prediction bytes
/// and F̄.
fn pipeline(root: &Path, jobs: &str) -> Result<(Vec<u8>, f64), String> {
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (data, run, pred) = (root.join("data"), root.join("run"), root.join("pred"));
    let data_cfg = s(&configs().join("tiny-data.toml"));
    let run_cfg = s(&configs().join("tiny.toml"));
    hydra(&["gen", "--config", &data_cfg, "--seed", "21", "--out", &s(&data)])?;
    hydra(&[
        "train",
        "--config",
        &run_cfg,
        "--data",
        &s(&data),
        "--out",
        &s(&run),
        "--jobs",
        jobs,
    ])?;
    let eval = s(&data.join("eval.json"));
    hydra(&[
        "predict",
        "--run",
        &s(&run),
        "--data",
        &eval,
        "--out",
        &s(&pred),
        "--jobs",
        jobs,
    ])?;
    let report = root.join("score.json");
    let truth = s(&data.join("truth-eval.csv"));
    let weights = s(&data.join("weights.csv"));
    let predictions = s(&pred.join("predictions.csv"));
    hydra(&[
        "score",
        "--pred",
        &predictions,
        "--truth",
        &truth,
        "--weights",
        &weights,
        "--out",
        &s(&report),
    ])?;
    let parsed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let fbar = parsed["fmeasure"].as_f64().ok_or("score report has no fmeasure")?;
    Ok((
        std::fs::read(pred.join("predictions.csv")).map_err(|e| e.to_string())?,
        fbar,
    ))
}

fn end_to_end_determinism() -> Outcome {
    let started = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (pred_a, f_a) = pipeline(a.path(), "1")?;
    // the second pass also trains with more worker threads
    let (pred_b, f_b) = pipeline(b.path(), "2")?;
    check(pred_a == pred_b, || "prediction files differ".into())?;
    check(f_a == f_b, || format!("F-measure {f_a} vs {f_b}"))?;
    within(started, Duration::from_secs(90))?;
    Ok(format!(
        "{} prediction bytes identical, F-measure {f_a:.6} both times",
        pred_a.len()
    ))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("scorer oracle equivalence", scorer_oracle),
        ("false-detection leakage", false_detection_leakage),
        ("learning-rate schedule", lr_schedule),
        ("voting rule exhaustion", vote_exhaustion),
        ("gradient verification", gradient_verification),
        ("ensemble gain", ensemble_gain),
        ("cost accounting", cost_accounting),
        ("crop filter boundary", crop_boundary),
        ("fork fidelity", fork_fidelity),
        ("end-to-end determinism", end_to_end_determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.1} s): {detail}", i + 1),
            Err(why) => {
                println!("FAIL {:>2} {name} ({secs:.1} s): {why}", i + 1);
                failed.push(format!("{} {name}", i + 1));
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
