//! Acceptance suite. Every test prints one PASS/FAIL line with the measured
//! quantity and its runtime against the budget. Tests hold a shared lock so
//! timings are not skewed by each other.

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use forcecast_core::augment::{apply_kinematic, joint_pose_residual, sample_kind, AugmentKind, KinematicAugmentation};
use forcecast_core::calibration::calibrate_force;
use forcecast_core::dataset::io::harmonize_forces;
use forcecast_core::dataset::{
    build_windows, fit_normalizer, mix_datasets, GeneralizedState, LoadedDataset, MixedSplit, SampleWindow, StateField,
    TrainMode, STATE_DIM, WINDOW_LEN,
};
use forcecast_core::eval::{find_peaks, peak_rmse, Axis, PEAK_SEPARATION};
use forcecast_core::geometry::Vec3;
use forcecast_core::nn::gradcheck::{check_layer, LayerKind};
use forcecast_core::nn::model::Decoder;
use forcecast_core::nn::{Graph, Model, ModelSpec, Tensor, Variant, SEQUENCE_LEN};
use forcecast_core::pipeline::{self, bench_model, predict_clip, RunConfig, ModelConfig};
use forcecast_core::synth::{benchmark_plan, generate_clip, make_benchmark_suite, SuiteOptions};
use forcecast_core::train::{train, AugmentContexts, TrainConfig};
use forcecast_core::augment::AugmentConfig;
use rand::{Rng, SeedableRng};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints the verdict line and fails the test when the check or the budget is missed.
fn verdict(n: usize, name: &str, ok: bool, detail: &str, elapsed: Duration, budget: Duration) {
    let in_time = elapsed <= budget;
    let pass = ok && in_time;
    let line = format!(
        "[{}] criterion {n:>2} {name}: {detail}; runtime {:.2}s / {:.0}s",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    let _ = writeln!(std::io::stdout().lock(), "{line}");
    assert!(pass, "{line}");
}

fn short_suite(duration: f64, presses: usize) -> SuiteOptions {
    SuiteOptions {
        duration,
        presses,
        ..Default::default()
    }
}

#[test]
fn architecture_fidelity() {
    let _g = serial();
    let start = Instant::now();
    let mut problems = Vec::new();

    for v in Variant::ALL {
        let spec = ModelSpec::new(v);
        let model = Model::new(&spec, 0).unwrap();
        match (&model.net.decoder, v.is_recurrent()) {
            (Decoder::Mlp(mlp), false) => {
                let input = if v == Variant::Fc { STATE_DIM } else { spec.latent_dim + STATE_DIM };
                let dims = [input, 84, 180, 50, 3];
                if mlp.dims != dims {
                    problems.push(format!("{} decoder dims {:?}", v.name(), mlp.dims));
                }
                // Dense weights and biases plus batch-norm scale and shift on the hidden layers.
                let expected: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>()
                    + 2 * (84 + 180 + 50);
                let stored: usize = model
                    .params
                    .iter()
                    .filter(|(_, p)| p.name.starts_with("mlp.") && p.trainable())
                    .map(|(_, p)| p.value.data.len())
                    .sum();
                if mlp.param_count() != expected || stored != expected {
                    problems.push(format!(
                        "{} decoder has {} / {stored} parameters, expected {expected}",
                        v.name(),
                        mlp.param_count()
                    ));
                }
            }
            (Decoder::Lstm(_), true) => {}
            _ => problems.push(format!("{} has the wrong decoder kind", v.name())),
        }
    }

    let size = 16;
    let b = 2;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let frames = Tensor {
        shape: vec![b, WINDOW_LEN, 3, size, size],
        data: (0..b * WINDOW_LEN * 3 * size * size).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let states = Tensor {
        shape: vec![b, WINDOW_LEN, STATE_DIM],
        data: (0..b * WINDOW_LEN * STATE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    for v in [Variant::Rcnn, Variant::Rvit] {
        let spec = ModelSpec::tiny(v, size);
        let model = Model::new(&spec, 0).unwrap();
        let mut g = Graph::new(&model.params, false);
        let f = g.input(frames.clone());
        let s = g.input(states.clone());
        let seq = model.net.sequence(&mut g, f, s).unwrap();
        if g.shape(seq) != [b, 10, spec.latent_dim] || SEQUENCE_LEN != 10 {
            problems.push(format!("{} sequence shape {:?}", v.name(), g.shape(seq)));
        }
        let y = model.predict(Some(&frames), &states).unwrap();
        if y.shape != [b, 3] {
            problems.push(format!("{} output shape {:?}", v.name(), y.shape));
        }
    }

    let plan = benchmark_plan(2, &short_suite(1.0, 1)).unwrap();
    let clip = generate_clip(&plan.datasets[0].1[0]).unwrap();
    let loaded = forcecast_core::synth::harmonize_generated(&plan.datasets[0].0, &plan.datasets[0].0.clips[0], &clip, 8).unwrap();
    let windows = build_windows(&loaded).unwrap();
    if WINDOW_LEN != 5 || windows.is_empty() || windows.iter().any(|w| w.frames.len() != 5 || w.states.len() != 5) {
        problems.push("windows do not hold 5 frames".into());
    }

    let detail = if problems.is_empty() {
        "decoder 84-180-50-3 with exact parameter count, recurrent length 10, 5-frame windows".to_string()
    } else {
        problems.join("; ")
    };
    verdict(1, "architecture fidelity", problems.is_empty(), &detail, start.elapsed(), Duration::from_secs(1));
}

#[test]
fn gradient_correctness() {
    let _g = serial();
    let start = Instant::now();
    let instances = 20;
    let mut worst = (0.0f64, String::new());
    for kind in LayerKind::ALL {
        for seed in 0..instances {
            let r = check_layer(kind, seed).unwrap();
            if r.max_rel_error > worst.0 {
                worst = (r.max_rel_error, format!("{kind:?}"));
            }
        }
    }
    let detail = format!(
        "{} layer types x {instances} instances, worst relative error {:.2e} ({})",
        LayerKind::ALL.len(),
        worst.0,
        worst.1
    );
    verdict(2, "gradient correctness", worst.0 < 1e-4, &detail, start.elapsed(), Duration::from_secs(60));
}

#[test]
fn calibration_round_trip() {
    let _g = serial();
    let start = Instant::now();

    let mut noiseless_worst = 0.0f64;
    let plan = benchmark_plan(9, &short_suite(2.0, 1)).unwrap();
    for (manifest, configs) in &plan.datasets {
        for cfg in configs {
            let mut cfg = cfg.clone();
            cfg.noise_sigma = 0.0;
            let clip = generate_clip(&cfg).unwrap();
            let recovered = harmonize_forces(manifest, &clip.raw_states, &clip.raw_forces).unwrap();
            for (r, f) in recovered.iter().zip(&clip.forces) {
                noiseless_worst = noiseless_worst.max((r - f).amax());
            }
            if manifest.forces_calibrated {
                continue;
            }
            // Same check through the bare operation.
            for ((s, (_, raw)), f) in clip.raw_states.iter().zip(&clip.raw_forces).zip(&clip.forces) {
                let t = s.robot_pose().to_transform().compose(&cfg.sensor_mount);
                noiseless_worst = noiseless_worst.max((calibrate_force(raw, &t, &cfg.calibration) - f).amax());
            }
        }
    }

    let mut sq = Vec3::zeros();
    let mut n = 0usize;
    for seed in 0..100u64 {
        let plan = benchmark_plan(seed, &short_suite(1.0, 1)).unwrap();
        let di = (seed % 2) as usize;
        let (manifest, configs) = &plan.datasets[di];
        let mut cfg = configs[(seed as usize / 2) % configs.len()].clone();
        cfg.noise_sigma = 0.01;
        let clip = generate_clip(&cfg).unwrap();
        let recovered = harmonize_forces(manifest, &clip.raw_states, &clip.raw_forces).unwrap();
        for (r, f) in recovered.iter().zip(&clip.forces) {
            sq += (r - f).component_mul(&(r - f));
            n += 1;
        }
    }
    let rmse = (sq / n as f64).map(f64::sqrt);

    let ok = noiseless_worst <= 1e-9 && rmse.amax() < 0.02;
    let detail = format!(
        "noiseless max error {noiseless_worst:.1e} N; sigma 0.01 N over 100 seeds: rmse ({:.4}, {:.4}, {:.4}) N",
        rmse.x, rmse.y, rmse.z
    );
    verdict(3, "calibration round trip", ok, &detail, start.elapsed(), Duration::from_secs(10));
}

fn pose_gap(a: &GeneralizedState, b: &GeneralizedState) -> f64 {
    let pa = a.robot_pose().unwrap();
    let pb = b.robot_pose().unwrap();
    let (dp, dq) = pa.residual(&pb);
    let hp = (a.vec3(StateField::PH) - b.vec3(StateField::PH)).amax();
    let hq = a.quaternion(StateField::OH).unwrap().angle_to(b.quaternion(StateField::OH).unwrap());
    dp.max(dq).max(hp).max(hq)
}

fn frames_equal(a: &SampleWindow, b: &SampleWindow) -> bool {
    a.frames.iter().zip(&b.frames).all(|(x, y)| x.data == y.data)
}

#[test]
fn augmentation_invariants() {
    let _g = serial();
    let start = Instant::now();
    let plan = benchmark_plan(4, &short_suite(4.0, 1)).unwrap();
    let data = plan.load(16).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);

    let mut flip_image_exact = true;
    let mut flip_pose = 0.0f64;
    let mut rot_pose = 0.0f64;
    let (mut fk_pos, mut fk_rot) = (0.0f64, 0.0f64);
    let (mut checked, mut flagged) = (0usize, 0usize);

    for ((manifest, _), ds) in plan.datasets.iter().zip(&data) {
        let camera = manifest.camera.unwrap().extrinsic;
        let chain = manifest.chain.clone().unwrap();
        for clip in &ds.clips {
            for (i, w) in build_windows(clip).unwrap().iter().enumerate() {
                if i % 4 == 0 {
                    for kind in [AugmentKind::HorizontalFlip, AugmentKind::VerticalFlip] {
                        let aug = KinematicAugmentation::new(kind, camera).unwrap();
                        let twice = apply_kinematic(&aug, &apply_kinematic(&aug, w, &chain).unwrap(), &chain).unwrap();
                        flip_image_exact &= frames_equal(&twice, w);
                        for (a, b) in twice.states.iter().zip(&w.states) {
                            flip_pose = flip_pose.max(pose_gap(a, b));
                        }
                    }
                    let deg = rng.random_range(-20.0..=20.0);
                    let aug = KinematicAugmentation::new(AugmentKind::Rotation(deg), camera).unwrap();
                    let back = apply_kinematic(&aug.inverse(), &apply_kinematic(&aug, w, &chain).unwrap(), &chain).unwrap();
                    for (a, b) in back.states.iter().zip(&w.states) {
                        rot_pose = rot_pose.max(pose_gap(a, b));
                    }
                }

                let aug = KinematicAugmentation::new(sample_kind(&mut rng), camera).unwrap();
                let out = apply_kinematic(&aug, w, &chain).unwrap();
                if out.flagged {
                    flagged += 1;
                    continue;
                }
                for s in &out.states {
                    let (p, r) = joint_pose_residual(s, &chain).unwrap();
                    fk_pos = fk_pos.max(p);
                    fk_rot = fk_rot.max(r);
                }
                checked += 1;
            }
        }
    }

    let ok = flip_image_exact && flip_pose <= 1e-6 && rot_pose <= 1e-6 && fk_pos <= 1e-3 && fk_rot <= 1e-3 && checked >= 500;
    let detail = format!(
        "double flip images exact: {flip_image_exact}, pose gap {flip_pose:.1e}; rotation round trip {rot_pose:.1e}; \
         FK vs pose on {checked} windows ({flagged} flagged): {fk_pos:.1e} m, {fk_rot:.1e} rad"
    );
    verdict(4, "augmentation invariants", ok, &detail, start.elapsed(), Duration::from_secs(60));
}

/// Population mean and standard deviation per slot, constant slots scaled by 1.
fn brute_force_stats(rows: &[[f64; STATE_DIM]]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..STATE_DIM).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std = (0..STATE_DIM)
        .map(|j| {
            let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var.sqrt() < 1e-12 {
                1.0
            } else {
                var.sqrt()
            }
        })
        .collect();
    (mean, std)
}

#[test]
fn harmonization_oracle() {
    let _g = serial();
    let start = Instant::now();
    let plan = benchmark_plan(6, &short_suite(2.0, 1)).unwrap();
    let data: Vec<LoadedDataset> = plan.load(8).unwrap();
    let split = mix_datasets(&data, TrainMode::Rand, 6).unwrap();
    let normalizer = fit_normalizer(&split.train).unwrap();

    let rows: Vec<[f64; STATE_DIM]> = split.train.iter().flat_map(|w| w.states.iter().map(|s| s.0)).collect();
    let (mean, std) = brute_force_stats(&rows);
    let stat_gap = mean
        .iter()
        .zip(&normalizer.mean)
        .chain(std.iter().zip(&normalizer.std))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let datasets_in_train: BTreeSet<&str> = split.train.iter().map(|w| w.clip.split('/').next().unwrap()).collect();

    // The 6-joint arm has no 7th joint (robot, rate, haptic), wrench or gripper.
    let mut padded: Vec<usize> = vec![19, 26, 46];
    padded.extend(47..54);
    let a = data.iter().find(|d| d.name == "dataset_a").unwrap();
    let b = data.iter().find(|d| d.name == "dataset_b").unwrap();
    let a_states = || a.clips.iter().flat_map(|c| c.states.iter());
    let zero_exact = a_states().all(|s| padded.iter().all(|&j| s.0[j] == 0.0));
    let b_empty: Vec<usize> = padded
        .iter()
        .copied()
        // Contact on the tool axis has no torque about that axis.
        .filter(|&j| j != 52)
        .filter(|&j| b.clips.iter().flat_map(|c| &c.states).all(|s| s.0[j] == 0.0))
        .collect();
    let b_populated = b_empty.is_empty();

    let ok = stat_gap <= 1e-9 && zero_exact && b_populated && datasets_in_train.len() == 2;
    let detail = format!(
        "{} states from {} datasets, max stat gap {stat_gap:.1e}; padded slots exactly zero: {zero_exact}; \
         same slots populated in the 7-joint set: {b_populated}",
        rows.len(),
        datasets_in_train.len()
    );
    verdict(5, "harmonization oracle", ok, &detail, start.elapsed(), Duration::from_secs(10));
}

#[test]
fn peak_isolation() {
    let _g = serial();
    let start = Instant::now();
    let rate = 30.0;
    let gt: Vec<Vec3> = (0..(60.0 * rate) as usize)
        .map(|i| Vec3::new((2.0 * std::f64::consts::PI * i as f64 / rate / 10.0).sin(), 0.0, 0.0))
        .collect();
    let peaks = find_peaks(&gt, Axis::X, PEAK_SEPARATION);
    // Extrema of sin(2 pi t / 10) at t = 2.5 + 5k seconds.
    let analytic: Vec<f64> = (0..12).map(|k| (2.5 + 5.0 * k as f64) * rate).collect();
    let matched = peaks.len() == analytic.len()
        && peaks.iter().zip(&analytic).all(|(&p, &a)| (p as f64 - a).abs() <= 1.0);
    let min_gap = peaks.windows(2).map(|w| w[1] - w[0]).min().unwrap_or(0);
    let ok = matched && min_gap >= PEAK_SEPARATION;
    let detail = format!("{} peaks, all within 1 sample of analytic: {matched}, min spacing {min_gap}", peaks.len());
    verdict(6, "peak isolation", ok, &detail, start.elapsed(), Duration::from_secs(1));
}

#[test]
fn overfit_sanity() {
    let _g = serial();
    let start = Instant::now();
    let size = 16;
    let plan = benchmark_plan(1, &SuiteOptions::default()).unwrap();
    let data = plan.load(size).unwrap();
    let clip = &data[0].clips[0];
    let windows: Vec<SampleWindow> = build_windows(clip).unwrap().into_iter().take(200).collect();
    let split = MixedSplit {
        train: windows,
        test: Vec::new(),
        train_clips: [clip.id.clone()].into(),
        test_clips: BTreeSet::new(),
    };
    let max_steps = 2000;
    let batch_size = 16;
    let per_epoch = split.train.len().div_ceil(batch_size);
    let cfg = TrainConfig {
        epochs: max_steps / per_epoch,
        batch_size,
        seed: 1,
        augment: AugmentConfig::none(),
        ..Default::default()
    };
    let out = train(&ModelSpec::tiny(Variant::Rcnn, size), &split, &AugmentContexts::new(), &cfg).unwrap();
    let hit = out.curve.iter().find(|r| r.train_rmse < 0.05);
    let best = out.curve.iter().map(|r| r.train_rmse).fold(f64::INFINITY, f64::min);
    let ok = hit.is_some_and(|r| r.steps <= max_steps) && split.train.len() == 200;
    let detail = match hit {
        Some(r) => format!(
            "{} windows, train rmse {:.4} N after {} steps (best {best:.4} N within {} steps)",
            split.train.len(),
            r.train_rmse,
            r.steps,
            out.steps
        ),
        None => format!("best train rmse {best:.4} N within {} steps", out.steps),
    };
    verdict(7, "overfit sanity", ok, &detail, start.elapsed(), Duration::from_secs(300));
}

/// Peak RMSE over the union of the isolated peaks of every held-out clip.
fn pooled_peak_rmse(model: &Model, pre: &forcecast_core::train::Preprocessor, split: &MixedSplit, axis: Axis) -> f64 {
    let (mut pred, mut gt) = (Vec::new(), Vec::new());
    for clip in &split.test {
        let (_, p, g) = predict_clip(model, pre, &clip.windows).unwrap();
        for i in find_peaks(&g, axis, PEAK_SEPARATION) {
            pred.push(p[i]);
            gt.push(g[i]);
        }
    }
    let all: Vec<usize> = (0..gt.len()).collect();
    peak_rmse(&pred, &gt, &all).unwrap().unwrap_or(f64::NAN)
}

#[test]
fn recurrent_advantage_at_peaks() {
    let _g = serial();
    let start = Instant::now();
    let size = 16;
    let epochs = 10;
    let mut wins = [0usize; 2];
    let mut lines = Vec::new();
    for seed in 1..=5u64 {
        let data = benchmark_plan(seed, &SuiteOptions::default()).unwrap().load(size).unwrap();
        let split = mix_datasets(&data, TrainMode::Rand, seed).unwrap();
        let cfg = TrainConfig {
            epochs,
            seed,
            augment: AugmentConfig::none(),
            ..Default::default()
        };
        let peak = |v: Variant| {
            let out = train(&ModelSpec::tiny(v, size), &split, &AugmentContexts::new(), &cfg).unwrap();
            pooled_peak_rmse(&out.model, &out.preprocessor, &split, Axis::default())
        };
        let (cnn, rcnn, vit, rvit) = (peak(Variant::Cnn), peak(Variant::Rcnn), peak(Variant::Vit), peak(Variant::Rvit));
        wins[0] += usize::from(rcnn < cnn);
        wins[1] += usize::from(rvit < vit);
        lines.push(format!("seed {seed}: cnn {cnn:.3} rcnn {rcnn:.3} vit {vit:.3} rvit {rvit:.3}"));
    }
    for l in &lines {
        let _ = writeln!(std::io::stdout().lock(), "    {l}");
    }
    let ok = wins.iter().all(|&w| w >= 4);
    let detail = format!("RCNN < CNN in {}/5 seeds, RViT < ViT in {}/5 seeds", wins[0], wins[1]);
    verdict(8, "recurrent advantage at peaks", ok, &detail, start.elapsed(), Duration::from_secs(1800));
}

#[test]
fn latency_ordering() {
    let _g = serial();
    let start = Instant::now();
    let size = 32;
    let hz = |v: Variant| {
        let model = Model::new(&ModelSpec::tiny(v, size), 0).unwrap();
        bench_model(&model, forcecast_core::eval::LATENCY_PASSES).unwrap().hz
    };
    let (cnn, rcnn, vit, rvit) = (hz(Variant::Cnn), hz(Variant::Rcnn), hz(Variant::Vit), hz(Variant::Rvit));
    let ok = rcnn < cnn && rvit < vit;
    let detail = format!("cnn {cnn:.0} Hz > rcnn {rcnn:.0} Hz; vit {vit:.0} Hz > rvit {rvit:.0} Hz");
    verdict(9, "latency ordering", ok, &detail, start.elapsed(), Duration::from_secs(120));
}

struct RunArtifacts {
    curve: String,
    checkpoint: Vec<u8>,
    summary: String,
}

fn end_to_end(root: &std::path::Path, seed: u64) -> RunArtifacts {
    let manifests = make_benchmark_suite(&root.join("raw"), seed, &short_suite(3.0, 1)).unwrap();
    let data = root.join("harmonized");
    pipeline::harmonize(&manifests, &data, false).unwrap();
    let cfg = RunConfig {
        model: ModelConfig {
            image_size: 16,
            ..Default::default()
        },
        train: TrainConfig {
            epochs: 2,
            seed,
            ..Default::default()
        },
    };
    let ckpt = root.join("rcnn.ckpt");
    pipeline::train_run(&data, Variant::Rcnn, &cfg, &ckpt, false, &mut |_| {}).unwrap();
    let report = root.join("report");
    pipeline::eval_run(&ckpt, &data, &report, Axis::default(), 0, false).unwrap();
    RunArtifacts {
        curve: std::fs::read_to_string(pipeline::loss_curve_path(&ckpt)).unwrap(),
        checkpoint: std::fs::read(&ckpt).unwrap(),
        summary: std::fs::read_to_string(report.join("summary.json")).unwrap(),
    }
}

#[test]
fn end_to_end_determinism() {
    let _g = serial();
    let start = Instant::now();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let runs: Vec<RunArtifacts> = dirs.iter().map(|d| end_to_end(d.path(), 21)).collect();
    let curves = runs[0].curve == runs[1].curve;
    let ckpts = runs[0].checkpoint == runs[1].checkpoint;
    let reports = runs[0].summary == runs[1].summary;
    let ok = curves && ckpts && reports && !runs[0].checkpoint.is_empty();
    let detail = format!(
        "loss curves identical: {curves}; checkpoints bit-identical: {ckpts} ({} bytes); reports identical: {reports}",
        runs[0].checkpoint.len()
    );
    verdict(10, "end-to-end determinism", ok, &detail, start.elapsed(), Duration::from_secs(300));
}
