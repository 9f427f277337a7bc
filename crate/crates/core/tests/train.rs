use posefree::data::{generate_dataset, generate_scene, SceneRecord, SceneSpec};
use posefree::model::{Model, ModelConfig};
use posefree::render::RenderConfig;
use posefree::tensor::blob::read_checkpoint_file;
use posefree::tensor::optim::ScheduleKind;
use posefree::tensor::{Graph, Tensor};
use posefree::train::{
    argmax_lowest, evaluate, load_checkpoint, loss_total, model_input, psnr, save_checkpoint,
    select_best_canonical, ssim, LossConfig, PoseNoise, TrainConfig, TrainError, Trainer, PSNR_CAP,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        res: 16,
        patch: 4,
        width: 16,
        heads: 2,
        ffn_mult: 1,
        backbone_blocks: 1,
        encoder_blocks: 1,
        mapping_blocks: 1,
        volume_res: 4,
        field_res: 16,
        feature_channels: 4,
        decoder_channels: [8, 8],
        render: RenderConfig {
            n_samples: 12,
            density_scale: 8.0,
            stratified: false,
        },
        ..ModelConfig::default()
    }
}

fn spec(res: usize) -> SceneSpec {
    SceneSpec {
        res,
        grid_res: 24,
        oracle_samples: 24,
        k: 4,
        inputs: 2,
        ..SceneSpec::default()
    }
}

fn scenes(res: usize, n: usize) -> Vec<SceneRecord> {
    generate_dataset(&spec(res), 11, n).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(&[h, w, 3], |_| rng.random_range(0.0..1.0))
}

// ---- metrics ----

#[test]
fn psnr_of_uniform_offsets() {
    let gt = Tensor::<f64>::full(&[8, 8, 3], 0.4);
    for (off, want) in [(0.1, 20.0), (0.01, 40.0), (0.5, 10.0 * 4.0f64.log10())] {
        let pred = Tensor::<f64>::full(&[8, 8, 3], 0.4 + off);
        assert!((psnr(&pred, &gt) - want).abs() < 1e-6, "offset {off}");
    }
    assert_eq!(psnr(&gt, &gt), PSNR_CAP);
}

#[test]
fn ssim_identical_and_constant_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_image(&mut rng, 32, 32);
    assert_eq!(ssim(&a, &a), 1.0);
    let c = Tensor::<f64>::full(&[32, 32, 3], 0.5);
    assert_eq!(ssim(&c, &c), 1.0);
    let inv = Tensor::from_fn(&[32, 32, 3], |i| 1.0 - a.data()[i]);
    assert!(ssim(&inv, &a) < 0.0);
}

/// Mean SSIM computed window by window with a full 2D Gaussian.
fn ssim_direct(x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let gray = |t: &Tensor<f64>, r: usize, c: usize| {
        (0..3).map(|ch| t.data()[(r * w + c) * 3 + ch]).sum::<f64>() / 3.0
    };
    let n = 11;
    let half = 5.0;
    let mut win = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (di, dj) = (i as f64 - half, j as f64 - half);
            win[i * n + j] = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
        }
    }
    let s: f64 = win.iter().sum();
    win.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for r in 0..=h - n {
        for c in 0..=w - n {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let g = win[i * n + j];
                    let a = gray(x, r + i, c + j);
                    let b = gray(y, r + i, c + j);
                    mx += g * a;
                    my += g * b;
                    xx += g * a * a;
                    yy += g * b * b;
                    xy += g * a * b;
                }
            }
            let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn ssim_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let a = random_image(&mut rng, 32, 32);
        let noise = random_image(&mut rng, 32, 32);
        let b = Tensor::from_fn(&[32, 32, 3], |i| 0.7 * a.data()[i] + 0.3 * noise.data()[i]);
        let (got, want) = (ssim(&a, &b), ssim_direct(&a, &b));
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

// ---- loss ----

#[test]
fn loss_analytic_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let k = 3;
    let imgs: Vec<Tensor<f64>> = (0..k)
        .map(|_| Tensor::from_fn(&[6, 6, 3], |_| rng.random_range(0.0..0.9)))
        .collect();
    let masks: Vec<Tensor<f64>> = (0..k)
        .map(|_| Tensor::from_fn(&[6, 6], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }))
        .collect();
    let g = Graph::new();
    let cfg = LossConfig::default();
    let out = |shift: f64, mask_shift: f64| -> Vec<posefree::render::RenderOutput<'_, f64>> {
        (0..k)
            .map(|i| {
                let img = g.constant(Tensor::from_fn(&[6, 6, 3], |j| imgs[i].data()[j] + shift));
                let m = g.constant(Tensor::from_fn(&[6, 6], |j| {
                    masks[i].data()[j] + mask_shift
                }));
                posefree::render::RenderOutput {
                    image: img,
                    mask: m,
                    features: img,
                }
            })
            .collect()
    };
    let zero = loss_total(&out(0.0, 0.0), &imgs, &masks, &cfg).item();
    assert_eq!(zero, 0.0);
    let shifted = loss_total(&out(0.1, 0.0), &imgs, &masks, &cfg).item();
    assert!((shifted - 0.01 * k as f64).abs() < 1e-12);
    let both = loss_total(&out(0.0, 0.2), &imgs, &masks, &cfg).item();
    assert!((both - 5.0 * 0.04 * k as f64).abs() < 1e-12);
    let image_only = LossConfig {
        mask_weight: 0.0,
        ..LossConfig::default()
    };
    assert_eq!(
        loss_total(&out(0.0, 0.2), &imgs, &masks, &image_only).item(),
        0.0
    );
    assert!(LossConfig {
        perceptual_weight: 0.1,
        ..LossConfig::default()
    }
    .validate()
    .is_err());
}

proptest! {
    #[test]
    fn loss_is_nonnegative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Graph::new();
        let img = Tensor::from_fn(&[4, 4, 3], |_| rng.random_range(0.0..1.0));
        let mask = Tensor::from_fn(&[4, 4], |_| rng.random_range(0.0..1.0));
        let r = posefree::render::RenderOutput {
            image: g.constant(Tensor::from_fn(&[4, 4, 3], |_| rng.random_range(0.0..1.0))),
            mask: g.constant(Tensor::from_fn(&[4, 4], |_| rng.random_range(0.0..1.0))),
            features: g.constant(Tensor::zeros(&[4, 4, 1])),
        };
        prop_assert!(loss_total(&[r], &[img], &[mask], &LossConfig::default()).item() >= 0.0);
    }
}

// ---- schedule and training ----

#[test]
fn warmup_schedule_endpoints() {
    for kind in [
        ScheduleKind::WarmupConstant,
        ScheduleKind::WarmupLinearDecay,
    ] {
        let cfg = TrainConfig {
            steps: 100,
            warmup: 10,
            schedule: kind,
            ..TrainConfig::default()
        };
        let s = cfg.schedule();
        assert_eq!(s.factor(0), 0.0);
        assert_eq!(s.factor(10), 1.0);
        assert!(s.factor(5) > 0.0 && s.factor(5) < 1.0);
    }
    let bad = TrainConfig {
        steps: 5,
        warmup: 6,
        ..TrainConfig::default()
    };
    assert!(bad.validate().is_err());
}

fn trainer(cfg: &ModelConfig, train: TrainConfig) -> Trainer<f32> {
    let (model, store) = Model::new::<f32>(cfg, 4).unwrap();
    Trainer::new(model, store, train, LossConfig::default())
}

fn run_to_bytes(randomize: bool, seed: u64) -> Vec<u8> {
    let data = scenes(8, 2);
    let mut t = trainer(
        &ModelConfig::micro(),
        TrainConfig {
            steps: 4,
            batch: 2,
            warmup: 1,
            seed,
            randomize_canonical: randomize,
            ..TrainConfig::default()
        },
    );
    t.run(&data, None, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), "ck", &t.model, &t.store, t.step, seed).unwrap();
    std::fs::read(dir.path().join("ck.vlck")).unwrap()
}

#[test]
fn fixed_seed_runs_give_identical_checkpoints() {
    assert_eq!(run_to_bytes(false, 1), run_to_bytes(false, 1));
    assert_eq!(run_to_bytes(true, 9), run_to_bytes(true, 9));
    assert_ne!(run_to_bytes(true, 9), run_to_bytes(true, 10));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (model, store) = Model::new::<f32>(&ModelConfig::micro(), 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), "m", &model, &store, 17, 8).unwrap();
    let (m2, s2, meta) = load_checkpoint::<f32>(&dir.path().join("m.json")).unwrap();
    assert_eq!(meta.step, 17);
    assert_eq!(m2.cfg, model.cfg);
    for (a, b) in store.iter().zip(s2.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value.data(), b.value.data());
    }
    let raw = read_checkpoint_file(&dir.path().join("m.vlck")).unwrap();
    assert_eq!(raw.len(), store.len());

    let weights = dir.path().join("m.vlck");
    let bytes = std::fs::read(&weights).unwrap();
    std::fs::write(&weights, &bytes[..bytes.len() / 2]).unwrap();
    let err = load_checkpoint::<f32>(&dir.path().join("m.json"))
        .err()
        .unwrap();
    assert!(err.to_string().contains("m.vlck"), "{err}");
    std::fs::write(dir.path().join("m.json"), "{ not json").unwrap();
    let err = load_checkpoint::<f32>(&dir.path().join("m.json"))
        .err()
        .unwrap();
    assert!(matches!(err, TrainError::Checkpoint { .. }), "{err}");
}

#[test]
fn nan_loss_aborts_with_diagnostics() {
    let data = scenes(8, 1);
    let mut t = trainer(
        &ModelConfig::micro(),
        TrainConfig {
            steps: 2,
            batch: 1,
            warmup: 0,
            ..TrainConfig::default()
        },
    );
    let id = t.store.find("readout.conv2.bias").unwrap();
    t.store.get_mut(id).value.fill(f32::NAN);
    match t.train_step(&data) {
        Err(TrainError::NonFiniteLoss {
            step, scene_seed, ..
        }) => {
            assert_eq!(step, 0);
            assert_eq!(scene_seed, data[0].seed);
        }
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
}

#[test]
fn overfit_loss_decreases() {
    let data = vec![generate_scene(&spec(16), 5).unwrap()];
    let mut t = trainer(
        &tiny(),
        TrainConfig {
            steps: 200,
            batch: 1,
            warmup: 10,
            lr_backbone: 1e-3,
            lr_rest: 1e-3,
            grad_clip: Some(1.0),
            ..TrainConfig::default()
        },
    );
    let mut csv = Vec::new();
    let hist = t.run(&data, Some(&mut csv), |_| {}).unwrap();
    let means: Vec<f64> = hist
        .chunks(50)
        .map(|c| c.iter().map(|s| s.loss).sum::<f64>() / c.len() as f64)
        .collect();
    assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("step,loss,lr,grad_norm,wall_clock\n"));
    // header, every tenth step, and the final step
    assert_eq!(text.lines().count(), 1 + 200 / 10 + 1);
}

// ---- evaluation ----

#[test]
fn argmax_contract_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let n = rng.random_range(1..8);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
        let i = argmax_lowest(&v);
        assert!(v.iter().all(|x| *x <= v[i]));
        assert!(v[..i].iter().all(|x| *x < v[i]));
    }
}

#[test]
fn best_canonical_is_exact_argmax() {
    let cfg = ModelConfig::micro();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = generate_dataset(
        &SceneSpec {
            k: 4,
            inputs: 4,
            ..spec(8)
        },
        2,
        100,
    )
    .unwrap();
    for (case, scene) in data.iter().enumerate() {
        let (model, store) = Model::new::<f64>(&cfg, case as u64).unwrap();
        let k = rng.random_range(1..=4);
        let mut sc = scene.clone();
        sc.inputs = k;
        let gt = &sc.poses[..k];
        let input = model_input::<f64>(&sc, gt.to_vec());
        let choice = select_best_canonical(&model, &store, &input, gt);
        assert_eq!(choice.input_psnr.len(), k);
        let best = choice.input_psnr[choice.index];
        for (j, &p) in choice.input_psnr.iter().enumerate() {
            assert!(p <= best);
            if j < choice.index {
                assert!(p < best);
            }
        }
        if k == 1 {
            assert_eq!(choice.index, 0);
        }
    }
}

#[test]
fn identical_views_pick_the_lowest_index() {
    let (model, store) = Model::new::<f64>(&ModelConfig::micro(), 1).unwrap();
    let mut sc = scenes(8, 1).remove(0);
    sc.images[1] = sc.images[0].clone();
    sc.poses[1] = sc.poses[0];
    let gt = &sc.poses[..2];
    let choice = select_best_canonical(&model, &store, &model_input::<f64>(&sc, gt.to_vec()), gt);
    assert_eq!(choice.input_psnr[0], choice.input_psnr[1]);
    assert_eq!(choice.index, 0);
}

#[test]
fn report_means_and_pose_invariance() {
    let (model, store) = Model::new::<f32>(&ModelConfig::micro(), 2).unwrap();
    let data = scenes(8, 3);
    let (clean, _) = evaluate(&model, &store, &data, &PoseNoise::default());
    assert_eq!(clean.scenes.len(), 3);
    let mean = clean.scenes.iter().map(|s| s.psnr).sum::<f64>() / 3.0;
    assert_eq!(clean.mean_psnr, mean);
    for s in &clean.scenes {
        assert_eq!(s.views.len(), 2);
        assert!(s.psnr.is_finite() && s.ssim.is_finite());
        assert_eq!(s.psnr, (s.views[0].psnr + s.views[1].psnr) / 2.0);
    }
    let noisy = PoseNoise {
        rotation_deg: 30.0,
        translation: 0.1,
        seed: 4,
    };
    let (perturbed, _) = evaluate(&model, &store, &data, &noisy);
    assert_eq!(perturbed.scenes, clean.scenes);
    assert!(clean.table().contains("mean"));
}

#[test]
fn noise_changes_the_input_poses_deterministically() {
    let p = scenes(8, 1).remove(0).poses;
    let n = PoseNoise {
        rotation_deg: 10.0,
        translation: 0.0,
        seed: 1,
    };
    let a = n.apply(&p, 0);
    assert_eq!(a, n.apply(&p, 0));
    assert_ne!(a, n.apply(&p, 1));
    for (x, y) in a.iter().zip(&p) {
        assert!(x.is_valid(1e-9));
        assert!((x.center() - y.center()).norm() < 1e-12);
        assert!(x.rotation != y.rotation);
    }
}
