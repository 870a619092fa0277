//! Training-loop behavior: config parsing, dataset pairing, deterministic
//! sampling, checkpoint round trips, and short optimization runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pyrtone::error::Error;
use pyrtone::io;
use pyrtone::tensor::{Shape, Tensor};
use pyrtone::tone::Model;
use pyrtone::train::{
    gamma_target, synth_hdr_scene, write_synthetic_dataset, Checkpoint, DatasetIndex, TrainConfig,
    Trainer, NORMALIZE_HIGH_PERCENTILE, NORMALIZE_LOW_PERCENTILE,
};

/// A small config that keeps test runs cheap: narrow model, small crops.
fn tiny_config() -> TrainConfig {
    TrainConfig {
        crop: 32,
        batch_size: 1,
        width: 8,
        basis_count: 4,
        lut_size: 5,
        grid: 4,
        descriptor_dim: 4,
        max_steps: 50,
        seed: 23,
        ..TrainConfig::default()
    }
}

fn synthetic_pair(seed: u64, side: usize) -> (Tensor<f32>, Tensor<f32>) {
    let scene = synth_hdr_scene(seed, side, side);
    let (x, _) =
        io::normalize_hdr(&scene, NORMALIZE_LOW_PERCENTILE, NORMALIZE_HIGH_PERCENTILE).unwrap();
    let y = gamma_target(&x);
    (x, y)
}

#[test]
fn config_file_parsing_applies_overrides_and_rejects_junk() {
    let cfg = TrainConfig::from_key_values(
        "# a comment\n\nlr = 2e-4\ncrop=48  # trailing note\nbeta = 0.3\nhflip = true\nseed = 99\ndata_dir = /tmp/pairs\n",
    )
    .unwrap();
    assert_eq!(cfg.lr, 2e-4);
    assert_eq!(cfg.crop, 48);
    assert_eq!(cfg.weights.beta, 0.3);
    assert!(cfg.hflip);
    assert_eq!(cfg.seed, 99);
    assert_eq!(cfg.data_dir.as_deref(), Some("/tmp/pairs"));
    assert_eq!(cfg.beta1, 0.9, "untouched keys keep their defaults");

    for bad in [
        "learning_rate = 1e-4",  // unknown key
        "lr",                    // no assignment
        "lr = fast",             // unparsable value
        "crop = 50",             // not a multiple of 8
        "crop = 16",             // too small for the default 4x4 grid
        "lr = 0",
        "beta1 = 1.0",
        "batch_size = 0",
        "alpha = -1",
    ] {
        assert!(
            matches!(TrainConfig::from_key_values(bad), Err(Error::Config(_))),
            "{bad:?} should be rejected"
        );
    }
}

#[test]
fn dataset_scan_pairs_stems_and_reports_gaps() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), 3, 40, 40, 5).unwrap();
    let index = DatasetIndex::scan(dir.path()).unwrap();
    assert_eq!(index.len(), 3);
    for (hdr, png) in index.pairs() {
        assert_eq!(hdr.file_stem(), png.file_stem());
    }

    // A stray PNG (like a previously exported result) is not an error.
    std::fs::write(dir.path().join("scene_000.out.png"), b"not even a png").unwrap();
    assert_eq!(DatasetIndex::scan(dir.path()).unwrap().len(), 3);

    // An HDR without its target is.
    std::fs::rename(dir.path().join("scene_001.png"), dir.path().join("orphan.bak")).unwrap();
    let err = DatasetIndex::scan(dir.path()).unwrap_err().to_string();
    assert!(err.contains("scene_001"), "error should name the stem: {err}");
}

#[test]
fn loaded_pairs_are_normalized_and_batches_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), 2, 48, 40, 9).unwrap();
    let data = DatasetIndex::scan(dir.path()).unwrap().load_all().unwrap();
    assert_eq!(data.len(), 2);
    for pair in &data.pairs {
        assert_eq!(pair.source.shape(), Shape::new(1, 3, 48, 40));
        assert!(pair.normalization.scale > 0.0);
        assert!(pair.target.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // The normalization window maps almost everything inside [0, 1].
        let inside = pair.source.data().iter().filter(|v| **v <= 1.0).count();
        assert!(inside as f64 >= 0.99 * pair.source.data().len() as f64);
    }

    let mut rng1 = ChaCha8Rng::seed_from_u64(77);
    let mut rng2 = ChaCha8Rng::seed_from_u64(77);
    let (x1, y1) = data.sample_batch(&mut rng1, 3, 32, true).unwrap();
    let (x2, y2) = data.sample_batch(&mut rng2, 3, 32, true).unwrap();
    assert_eq!(x1.data(), x2.data());
    assert_eq!(y1.data(), y2.data());
    assert_eq!(x1.shape(), Shape::new(3, 3, 32, 32));

    let mut rng3 = ChaCha8Rng::seed_from_u64(78);
    let (x3, _) = data.sample_batch(&mut rng3, 3, 32, true).unwrap();
    assert_ne!(x1.data(), x3.data(), "different seeds should give different crops");
}

#[test]
fn crops_of_source_and_target_stay_aligned() {
    // crop == image side: the batch must be the whole image, so alignment is
    // trivially checkable; then verify smaller crops keep the gamma relation
    // between source and target within codec quantization.
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), 1, 40, 40, 31).unwrap();
    let data = DatasetIndex::scan(dir.path()).unwrap().load_all().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (x, y) = data.sample_batch(&mut rng, 1, 40, false).unwrap();
    assert_eq!(x.data(), data.pairs[0].source.data());
    assert_eq!(y.data(), data.pairs[0].target.data());

    let (x, y) = data.sample_batch(&mut rng, 4, 24, false).unwrap();
    for (xv, yv) in x.data().iter().zip(y.data()) {
        let expect = (xv.clamp(0.0, 1.0) as f64).powf(1.0 / 2.2);
        assert!(
            (expect - *yv as f64).abs() < 1.5 / 255.0,
            "target {yv} should be the gamma curve of source {xv}"
        );
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact_and_rejects_damage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let config = tiny_config();
    let mut trainer = Trainer::new(config.clone()).unwrap();
    let (x, y) = synthetic_pair(3, 32);
    trainer.train_step(&x, &y).unwrap();
    trainer.checkpoint().save(&path).unwrap();

    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.step, 1);
    assert_eq!(loaded.config, config);
    for ((name_a, a), (_, name_b, b)) in loaded.entries().iter().zip(trainer.params().iter()) {
        assert_eq!(name_a, name_b);
        for (va, vb) in a.data().iter().zip(b.data()) {
            assert_eq!(va.to_bits(), vb.to_bits(), "parameter {name_a} must round-trip bit-exactly");
        }
    }
    let optim = loaded.optim.as_ref().expect("optimizer state travels with the checkpoint");
    assert_eq!(optim.step, 1);
    assert_eq!(optim.moments.len(), loaded.entries().len());

    let bytes = std::fs::read(&path).unwrap();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(m)) if m.contains("payload")));
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&wrong_magic), Err(Error::Checkpoint(m)) if m.contains("magic")));
    let mut wrong_version = bytes.clone();
    wrong_version[8] = 9;
    assert!(matches!(Checkpoint::from_bytes(&wrong_version), Err(Error::Checkpoint(m)) if m.contains("version 9")));
}

#[test]
fn checkpoint_from_wider_bank_names_the_mismatched_parameter() {
    let config = tiny_config();
    let trainer = Trainer::new(config.clone()).unwrap();
    let ckpt = trainer.checkpoint();
    ckpt.validate_against(config.model_config()).unwrap();

    let mut narrow = config.model_config();
    narrow.basis_count = 2;
    let err = ckpt.validate_against(narrow).unwrap_err().to_string();
    assert!(err.contains("ltt."), "should name the first differing parameter: {err}");
    assert!(err.contains("shape") || err.contains("mismatch"), "{err}");

    // Loading into the wrong registry fails the same way.
    let (_, mut params) = Model::new::<f32>(narrow).unwrap();
    assert!(ckpt.load_into(&mut params).is_err());
}

#[test]
fn resumed_trainer_continues_from_saved_state() {
    let config = TrainConfig { max_steps: 4, ..tiny_config() };
    let (x, y) = synthetic_pair(11, 32);

    let mut a = Trainer::new(config.clone()).unwrap();
    a.train_step(&x, &y).unwrap();
    a.train_step(&x, &y).unwrap();
    let ckpt = a.checkpoint();
    a.train_step(&x, &y).unwrap();

    let mut b = Trainer::from_checkpoint(&ckpt).unwrap();
    assert_eq!(b.step_count(), 2);
    b.train_step(&x, &y).unwrap();
    let pa: Vec<f32> = a.params().iter().flat_map(|(_, _, t)| t.data().to_vec()).collect();
    let pb: Vec<f32> = b.params().iter().flat_map(|(_, _, t)| t.data().to_vec()).collect();
    assert_eq!(pa, pb, "a resumed step must match the uninterrupted run bit for bit");
}

#[test]
fn zero_learning_rate_reports_loss_but_freezes_parameters() {
    // lr must be positive per the config contract, so drive the schedule to
    // zero instead: cosine decay at the final step gives lr exactly 0.
    let config = TrainConfig { cosine_decay: true, max_steps: 2, ..tiny_config() };
    let mut trainer = Trainer::new(config).unwrap();
    let (x, y) = synthetic_pair(17, 32);

    assert_eq!(trainer.lr_at(2), 0.0);
    assert!(trainer.lr_at(0) > 0.0);

    let record = trainer.train_step(&x, &y).unwrap();
    assert!(record.total.is_finite() && record.total > 0.0);
    assert!(record.grad_norm > 0.0, "gradient norm is logged every step");

    // Steps taken at a zero learning rate leave every parameter untouched.
    let mut frozen = Trainer::new(TrainConfig { cosine_decay: true, max_steps: 1, ..tiny_config() })
        .unwrap();
    // step index 0 under cosine decay with max_steps 1 gives lr(0) > 0, so
    // advance the schedule once before measuring.
    frozen.train_step(&x, &y).unwrap();
    let snapshot: Vec<f32> =
        frozen.params().iter().flat_map(|(_, _, t)| t.data().to_vec()).collect();
    let rec = frozen.train_step(&x, &y).unwrap();
    assert_eq!(rec.lr, 0.0);
    let after: Vec<f32> =
        frozen.params().iter().flat_map(|(_, _, t)| t.data().to_vec()).collect();
    assert_eq!(snapshot, after, "zero lr must not move parameters");
}

#[test]
fn two_trainers_with_one_seed_produce_identical_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), 3, 48, 48, 41).unwrap();
    let data = DatasetIndex::scan(dir.path()).unwrap().load_all().unwrap();
    let config = TrainConfig { max_steps: 6, probe_every: 3, ..tiny_config() };

    let run = |cfg: &TrainConfig| {
        let mut t = Trainer::new(cfg.clone()).unwrap();
        let mut log = Vec::new();
        t.run(&data, |r| {
            log.push(serde_json::to_string(r).unwrap());
            Ok(())
        })
        .unwrap();
        log
    };
    let a = run(&config);
    let b = run(&config);
    assert_eq!(a.len(), 6);
    assert_eq!(a, b, "fixed seed and config must reproduce the loss trajectory exactly");
    assert!(a[2].contains("probe_psnr"), "probe should appear on schedule");
    assert!(!a[0].contains("probe_psnr"));

    let other = run(&TrainConfig { seed: 24, ..config });
    assert_ne!(a, other, "a different seed should explore different batches");
}

#[test]
fn loss_decreases_across_consecutive_steps_in_most_trials() {
    let (x, y) = synthetic_pair(29, 32);
    let mut wins = 0;
    let trials = 12;
    for seed in 0..trials {
        let mut t = Trainer::new(TrainConfig { seed: 100 + seed, ..tiny_config() }).unwrap();
        let first = t.train_step(&x, &y).unwrap().total;
        let second = t.train_step(&x, &y).unwrap().total;
        if second < first {
            wins += 1;
        }
    }
    assert!(wins * 100 >= trials * 90, "loss fell on only {wins}/{trials} first steps");
}

#[test]
fn evaluate_matches_train_step_loss_and_leaves_state_alone() {
    let (x, y) = synthetic_pair(37, 32);
    let mut t = Trainer::new(tiny_config()).unwrap();
    let probe_before = t.probe_psnr(&x, &y).unwrap();
    let eval = t.evaluate(&x, &y).unwrap();
    assert_eq!(t.step_count(), 0);
    assert_eq!(t.probe_psnr(&x, &y).unwrap(), probe_before);

    let step = t.train_step(&x, &y).unwrap();
    assert!((eval.total - step.total).abs() < 1e-12, "pre-update loss must match evaluate()");
    // The on-tape total is accumulated in f32, so compare loosely.
    let parts_sum = eval.reconstruction * t.config().weights.alpha
        + eval.structural * t.config().weights.beta
        + eval.high_frequency * t.config().weights.gamma
        + eval.perceptual * t.config().weights.eta;
    assert!((eval.total - parts_sum).abs() < 1e-5 * parts_sum.abs().max(1.0));
}

#[test]
fn overfitting_the_identity_task_reaches_target_quickly() {
    // The model starts near identity, so learning "output = normalized
    // input clamped" should hit the 35 dB bar within a few hundred steps.
    let scene = synth_hdr_scene(53, 64, 64);
    let (x, _) =
        io::normalize_hdr(&scene, NORMALIZE_LOW_PERCENTILE, NORMALIZE_HIGH_PERCENTILE).unwrap();
    let y = x.map(|v| v.clamp(0.0, 1.0));
    let config = TrainConfig { crop: 64, max_steps: 500, ..tiny_config() };
    let mut trainer = Trainer::new(config).unwrap();
    let report = trainer.overfit_single_pair(&x, &y).unwrap();
    assert!(
        report.reached_target,
        "identity overfit stalled at {:.2} dB after {} steps (trajectory: {:?})",
        report.final_psnr(),
        report.steps_run,
        report.trajectory
    );
    assert!(report.trajectory.windows(2).all(|w| w[0].0 < w[1].0));
}
