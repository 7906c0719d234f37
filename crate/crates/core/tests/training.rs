mod common;

use std::fs;

use mrsr::dataset::extract_inplane_slices;
use mrsr::degradation::DegradationSpec;
use mrsr::losses::FeatureExtractor;
use mrsr::model::{Discriminator, DiscriminatorConfig, GeneratorConfig};
use mrsr::nn::Tensor;
use mrsr::phantom::phantom_volume;
use mrsr::training::{
    adversarial_train, load_checkpoint, mean_discriminator_output, pretrain_generator, read_log,
    save_checkpoint, train, AlternationSchedule, CheckpointDir, ExperimentLog, LogHeader, Phase,
    RecordingObserver, TrainConfig, TrainHooks, TrainState, TrainingData, UpdateEvent,
    CHECKPOINT_VERSION,
};
use mrsr::{Error, SliceImage};

fn slices(n: usize, size: usize, seed: u64) -> Vec<SliceImage> {
    let v = phantom_volume(size, size, n, [1.0, 1.0, 3.0], seed).unwrap();
    extract_inplane_slices(&v).unwrap()
}

fn config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        learning_rate: 1e-3,
        pretrain_epochs: 2,
        adversarial_epochs: 2,
        seed: 5,
        degradation: DegradationSpec::isotropic(2),
        ..TrainConfig::default()
    }
}

fn setup(n: usize, cfg: &TrainConfig) -> (TrainState, TrainingData, FeatureExtractor) {
    let g = common::tiny_generator(GeneratorConfig::isotropic(2).unwrap(), 1);
    let d = common::tiny_discriminator(16, 16, 2);
    let state = TrainState::new(g, d, cfg).unwrap();
    let data = TrainingData::from_hr(slices(n, 16, 3), &cfg.degradation).unwrap();
    (state, data, common::stub_extractor(4))
}

fn assert_same_state(a: &TrainState, b: &TrainState) {
    assert_eq!(a.generator.store(), b.generator.store());
    assert_eq!(a.discriminator.store(), b.discriminator.store());
    assert_eq!(a.g_optimizer, b.g_optimizer);
    assert_eq!(a.d_optimizer, b.d_optimizer);
    assert_eq!(a.phase, b.phase);
    assert_eq!(a.pretrain_epochs_done, b.pretrain_epochs_done);
    assert_eq!(a.adversarial_epochs_done, b.adversarial_epochs_done);
    assert_eq!(a.generator_steps, b.generator_steps);
    assert_eq!(a.discriminator_steps, b.discriminator_steps);
    assert_eq!(a.rng(), b.rng());
}

#[test]
fn pretraining_takes_one_step_per_batch_per_epoch() {
    let cfg = TrainConfig {
        batch_size: 16,
        pretrain_epochs: 20,
        ..config()
    };
    let (mut state, data, _) = setup(20, &cfg);
    let d_before = state.discriminator.store().clone();
    let mut obs = RecordingObserver::default();
    pretrain_generator(
        &mut state,
        &data,
        &cfg,
        &mut TrainHooks {
            observer: Some(&mut obs),
            ..Default::default()
        },
    )
    .unwrap();
    let expected = 20usize.div_ceil(16) * 20;
    assert_eq!(state.generator_steps, expected as u64);
    assert_eq!(obs.updates.len(), expected);
    assert!(obs.updates.iter().all(|u| matches!(
        u,
        UpdateEvent::Generator {
            phase: Phase::Pretrain,
            ..
        }
    )));
    assert_eq!(obs.epochs.len(), 20);
    assert_eq!(state.discriminator.store(), &d_before);
    assert_eq!(state.discriminator_steps, 0);
}

#[test]
fn zero_pretraining_epochs_leave_the_models_alone() {
    let cfg = TrainConfig {
        pretrain_epochs: 0,
        ..config()
    };
    let (mut state, data, _) = setup(6, &cfg);
    let before = state.clone();
    pretrain_generator(&mut state, &data, &cfg, &mut TrainHooks::default()).unwrap();
    assert_same_state(&state, &before);
}

#[test]
fn zero_adversarial_epochs_change_no_parameter() {
    let cfg = TrainConfig {
        adversarial_epochs: 0,
        ..config()
    };
    let (mut state, data, f) = setup(6, &cfg);
    pretrain_generator(&mut state, &data, &cfg, &mut TrainHooks::default()).unwrap();
    let before = state.clone();
    adversarial_train(&mut state, &data, &cfg, &f, &mut TrainHooks::default()).unwrap();
    assert_same_state(&state, &before);
}

#[test]
fn adversarial_epochs_are_logged_with_online_validation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        pretrain_epochs: 1,
        adversarial_epochs: 5,
        ..config()
    };
    let (mut state, data, f) = setup(6, &cfg);
    let header = LogHeader {
        train_config: cfg.clone(),
        generator: state.generator.config().clone(),
        discriminator: state.discriminator.config().clone(),
        extractor_hash: f.weights_hash().to_owned(),
        start_pretrain_epoch: 0,
        start_adversarial_epoch: 0,
    };
    let path = dir.path().join("log.jsonl");
    let mut log = ExperimentLog::open(&path, header.clone()).unwrap();
    train(
        &mut state,
        &data,
        &cfg,
        &f,
        &mut TrainHooks {
            log: Some(&mut log),
            ..Default::default()
        },
    )
    .unwrap();
    let (headers, records) = read_log(&path).unwrap();
    assert_eq!(headers, vec![header]);
    let adversarial: Vec<_> = records
        .iter()
        .filter(|r| r.phase == Phase::Adversarial)
        .collect();
    assert_eq!(adversarial.len(), 5);
    for (i, r) in adversarial.iter().enumerate() {
        assert_eq!(r.epoch, i + 1);
        assert!(r.val_psnr.is_some() && r.val_ssim.is_some());
        assert!(r.d_loss.unwrap().is_finite() && r.g_loss.is_finite());
    }
    // Hyperparameters are echoed verbatim.
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"learning_rate\":0.001"));
    assert!(text.contains("\"beta1\":0.9"));
}

#[test]
fn discriminator_steps_precede_generator_steps_in_every_batch() {
    let cfg = TrainConfig {
        pretrain_epochs: 1,
        adversarial_epochs: 2,
        ..config()
    };
    let (mut state, data, f) = setup(10, &cfg);
    let mut obs = RecordingObserver::default();
    train(
        &mut state,
        &data,
        &cfg,
        &f,
        &mut TrainHooks {
            observer: Some(&mut obs),
            ..Default::default()
        },
    )
    .unwrap();
    let adversarial: Vec<UpdateEvent> = obs
        .updates
        .into_iter()
        .filter(|u| {
            !matches!(
                u,
                UpdateEvent::Generator {
                    phase: Phase::Pretrain,
                    ..
                }
            )
        })
        .collect();
    // 10 images in batches of 4: 3 batches per epoch, 2 epochs.
    assert_eq!(adversarial.len(), 2 * 3 * 2);
    for pair in adversarial.chunks(2) {
        assert!(matches!(pair[0], UpdateEvent::Discriminator { .. }));
        assert!(matches!(
            pair[1],
            UpdateEvent::Generator {
                phase: Phase::Adversarial,
                ..
            }
        ));
    }
}

#[test]
fn per_epoch_schedule_runs_all_discriminator_steps_first() {
    let cfg = TrainConfig {
        pretrain_epochs: 1,
        adversarial_epochs: 1,
        schedule: AlternationSchedule::PerEpoch,
        ..config()
    };
    let (mut state, data, f) = setup(10, &cfg);
    pretrain_generator(&mut state, &data, &cfg, &mut TrainHooks::default()).unwrap();
    let mut obs = RecordingObserver::default();
    adversarial_train(
        &mut state,
        &data,
        &cfg,
        &f,
        &mut TrainHooks {
            observer: Some(&mut obs),
            ..Default::default()
        },
    )
    .unwrap();
    let kinds: Vec<bool> = obs
        .updates
        .iter()
        .map(|u| matches!(u, UpdateEvent::Discriminator { .. }))
        .collect();
    assert_eq!(kinds, vec![true, true, true, false, false, false]);
}

#[test]
fn optimizer_moments_restart_with_the_adversarial_phase() {
    let cfg = TrainConfig {
        pretrain_epochs: 3,
        adversarial_epochs: 1,
        ..config()
    };
    let (mut state, data, f) = setup(8, &cfg);
    pretrain_generator(&mut state, &data, &cfg, &mut TrainHooks::default()).unwrap();
    assert_eq!(state.g_optimizer.state.step, 6);
    adversarial_train(&mut state, &data, &cfg, &f, &mut TrainHooks::default()).unwrap();
    assert_eq!(state.phase, Phase::Adversarial);
    assert_eq!(state.g_optimizer.state.step, 2);
    assert_eq!(state.d_optimizer.state.step, 2);
    assert_eq!(state.generator_steps, 8);
}

#[test]
fn adversarial_training_requires_pretraining_unless_cold() {
    let cfg = config();
    let (mut state, data, f) = setup(4, &cfg);
    let err = adversarial_train(&mut state, &data, &cfg, &f, &mut TrainHooks::default());
    assert!(matches!(err, Err(Error::Train(_))));
    let cold = TrainConfig {
        cold_start: true,
        ..cfg
    };
    adversarial_train(&mut state, &data, &cold, &f, &mut TrainHooks::default()).unwrap();
    assert_eq!(state.adversarial_epochs_done, 2);
}

#[test]
fn empty_dataset_is_a_train_error() {
    let cfg = config();
    let (mut state, _, _) = setup(4, &cfg);
    let empty = TrainingData::from_hr(Vec::new(), &cfg.degradation).unwrap();
    let err = pretrain_generator(&mut state, &empty, &cfg, &mut TrainHooks::default());
    assert!(matches!(err, Err(Error::Train(_))));
}

#[test]
fn discriminator_with_wrong_input_size_is_rejected() {
    let cfg = TrainConfig {
        pretrain_epochs: 0,
        ..config()
    };
    let g = common::tiny_generator(GeneratorConfig::isotropic(2).unwrap(), 1);
    let d = common::tiny_discriminator(32, 32, 2);
    let mut state = TrainState::new(g, d, &cfg).unwrap();
    let data = TrainingData::from_hr(slices(4, 16, 3), &cfg.degradation).unwrap();
    let f = common::stub_extractor(4);
    let err = adversarial_train(&mut state, &data, &cfg, &f, &mut TrainHooks::default());
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn identical_runs_produce_identical_curves() {
    let cfg = config();
    let run = || {
        let (mut state, data, f) = setup(6, &cfg);
        let mut obs = RecordingObserver::default();
        train(
            &mut state,
            &data,
            &cfg,
            &f,
            &mut TrainHooks {
                observer: Some(&mut obs),
                ..Default::default()
            },
        )
        .unwrap();
        (state, obs)
    };
    let (a, oa) = run();
    let (b, ob) = run();
    assert_same_state(&a, &b);
    let curve = |o: &RecordingObserver| -> Vec<(f64, Option<f64>, Option<f64>)> {
        o.epochs
            .iter()
            .map(|r| (r.g_loss, r.d_loss, r.val_psnr))
            .collect()
    };
    assert_eq!(curve(&oa), curve(&ob));
    assert_eq!(oa.updates, ob.updates);
}

#[test]
fn extractor_and_ground_truth_are_not_mutated() {
    let cfg = config();
    let (mut state, data, f) = setup(6, &cfg);
    let probe = Tensor::from_shape_fn((1, 1, 16, 16), |(_, _, y, x)| ((y * 16 + x) as f64) / 255.0);
    let hash = f.weights_hash().to_owned();
    let features = f.features(&probe).unwrap();
    let hr = data.hr().to_vec();
    train(&mut state, &data, &cfg, &f, &mut TrainHooks::default()).unwrap();
    assert_eq!(f.weights_hash(), hash);
    assert_eq!(f.features(&probe).unwrap(), features);
    assert_eq!(data.hr(), hr.as_slice());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config();
    let (mut state, data, f) = setup(6, &cfg);
    train(&mut state, &data, &cfg, &f, &mut TrainHooks::default()).unwrap();
    let path = dir.path().join("state.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_same_state(&state, &loaded);

    let (lr, hr) = data.batch(&[0, 1, 2]);
    assert_eq!(
        state.generator.forward(&lr).unwrap(),
        loaded.generator.forward(&lr).unwrap()
    );
    assert_eq!(
        state.discriminator.forward(&hr).unwrap(),
        loaded.discriminator.forward(&hr).unwrap()
    );
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let dir = tempfile::tempdir().unwrap();
    let short = TrainConfig {
        adversarial_epochs: 1,
        ..config()
    };
    let full = config();
    let (mut a, data, f) = setup(6, &full);
    train(&mut a, &data, &short, &f, &mut TrainHooks::default()).unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&a, &path).unwrap();
    train(&mut a, &data, &full, &f, &mut TrainHooks::default()).unwrap();

    let mut b = load_checkpoint(&path).unwrap();
    train(&mut b, &data, &full, &f, &mut TrainHooks::default()).unwrap();
    assert_same_state(&a, &b);
}

#[test]
fn resume_at_epoch_ten_runs_to_fifty() {
    let dir = tempfile::tempdir().unwrap();
    let ckpts = CheckpointDir::new(dir.path());
    let first = TrainConfig {
        batch_size: 2,
        pretrain_epochs: 0,
        adversarial_epochs: 10,
        ..config()
    };
    let (mut state, data, f) = setup(2, &first);
    train(
        &mut state,
        &data,
        &first,
        &f,
        &mut TrainHooks {
            checkpoints: Some(&ckpts),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(ckpts.epoch_path(Phase::Adversarial, 10).exists());
    let mut resumed = ckpts.load_latest().unwrap().unwrap();
    assert_eq!(resumed.adversarial_epochs_done, 10);
    let all = TrainConfig {
        adversarial_epochs: 50,
        ..first
    };
    train(&mut resumed, &data, &all, &f, &mut TrainHooks::default()).unwrap();
    assert_eq!(resumed.adversarial_epochs_done, 50);
    assert_eq!(resumed.discriminator_steps, 50);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config();
    let (state, _, _) = setup(4, &cfg);
    let path = dir.path().join("s.ckpt");
    save_checkpoint(&state, &path).unwrap();
    let good = fs::read(&path).unwrap();

    let check = |bytes: &[u8], what: &str| {
        let p = dir.path().join(format!("{what}.ckpt"));
        fs::write(&p, bytes).unwrap();
        match load_checkpoint(&p) {
            Err(Error::Checkpoint(_)) => {}
            other => panic!("{what}: expected a checkpoint error, got {other:?}"),
        }
    };

    let mut wrong_version = good.clone();
    wrong_version[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    check(&wrong_version, "version");

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    check(&bad_magic, "magic");

    check(&good[..good.len() - 9], "truncated");

    let mut flipped = good.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 0x40;
    check(&flipped, "payload");
}

#[test]
fn divergence_stops_training_and_keeps_the_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpts = CheckpointDir::new(dir.path());
    let cfg = TrainConfig {
        pretrain_epochs: 1,
        ..config()
    };
    let (mut state, data, _) = setup(8, &cfg);
    pretrain_generator(
        &mut state,
        &data,
        &cfg,
        &mut TrainHooks {
            checkpoints: Some(&ckpts),
            ..Default::default()
        },
    )
    .unwrap();
    let good = ckpts.load_latest().unwrap().unwrap();

    let wild = TrainConfig {
        pretrain_epochs: 50,
        pretrain_learning_rate: Some(1e300),
        ..cfg
    };
    let err = pretrain_generator(
        &mut state,
        &data,
        &wild,
        &mut TrainHooks {
            checkpoints: Some(&ckpts),
            ..Default::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
    let latest = ckpts.load_latest().unwrap().unwrap();
    assert!(latest.generator.store().all_finite());
    assert!(latest.pretrain_epochs_done >= good.pretrain_epochs_done);
}

/// Trains on one phantom and scores the discriminator on slices of another.
#[test]
fn discriminator_separates_held_out_hr_from_sr() {
    let cfg = TrainConfig {
        batch_size: 4,
        learning_rate: 1e-3,
        pretrain_epochs: 10,
        adversarial_epochs: 15,
        ..config()
    };
    let g = common::tiny_generator(GeneratorConfig::isotropic(2).unwrap(), 1);
    let d = Discriminator::build(
        DiscriminatorConfig {
            in_channels: 1,
            input_height: 16,
            input_width: 16,
            base_channels: 4,
            dense_units: 16,
            batch_norm: true,
        },
        2,
    )
    .unwrap();
    let mut state = TrainState::new(g, d, &cfg).unwrap();
    let data = TrainingData::from_hr(slices(8, 16, 3), &cfg.degradation).unwrap();
    let f = FeatureExtractor::seeded(&[8, 8], &[0], 0).unwrap();
    train(&mut state, &data, &cfg, &f, &mut TrainHooks::default()).unwrap();

    let held_out = TrainingData::from_hr(slices(8, 16, 99), &cfg.degradation).unwrap();
    let lr: Vec<&SliceImage> = held_out.lr().iter().collect();
    let sr = state.generator.super_resolve_batch(&lr).unwrap();
    let p_hr = mean_discriminator_output(&state.discriminator, held_out.hr()).unwrap();
    let p_sr = mean_discriminator_output(&state.discriminator, &sr).unwrap();
    println!("held-out D(hr) = {p_hr:.4}, D(sr) = {p_sr:.4}");
    assert!(p_hr > p_sr);
}
