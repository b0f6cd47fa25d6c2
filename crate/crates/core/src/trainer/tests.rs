use std::path::Path;

use burn::backend::{Autodiff, NdArray};

use super::*;
use crate::augment::AugmentationConfig;
use crate::dataset::{synthetic_sample, FundusSample, Split};
use crate::model::{tiny_config, Architecture};
use crate::tensor::weights_digest;

type B = Autodiff<NdArray<f32>>;

/// Digest of the inference weights; batch-norm running statistics are only
/// folded in when the model is converted for evaluation or saved.
fn digest(trainer: &Trainer<B>) -> String {
    weights_digest(&trainer.model().valid())
}

fn samples(split: Split, n: usize, seed: u64) -> Vec<FundusSample> {
    (0..n)
        .map(|i| synthetic_sample(&format!("{}{i}", split.name()), split, 64, 64, seed + i as u64))
        .collect()
}

fn run_config(run_dir: &Path, augment: bool) -> RunConfig {
    let mut c = RunConfig {
        run_dir: run_dir.to_path_buf(),
        model: tiny_config(Architecture::Unet),
        ..RunConfig::default()
    };
    c.augment = if augment {
        AugmentationConfig::default().with_target_size(64, 64)
    } else {
        AugmentationConfig::disabled().with_target_size(64, 64)
    };
    c.train.batch_size = 2;
    c.train.max_epochs = 3;
    c.train.learning_rate = 1e-3;
    c
}

#[test]
fn config_validation_names_field() {
    let mut c = TrainConfig::default();
    c.batch_size = 0;
    assert!(c.validate().unwrap_err().contains("batch_size"));
    let mut c = TrainConfig::default();
    c.scheduler.factor = 1.5;
    assert!(c.validate().unwrap_err().contains("scheduler.factor"));
    TrainConfig::default().validate().unwrap();
}

#[test]
fn overfits_single_batch() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = run_config(dir.path(), false);
    config.train.learning_rate = 1e-2;
    config.train.grad_clip_norm = None;
    let mut trainer = Trainer::<B>::new(config, Default::default()).unwrap();
    let data = samples(Split::Train, 2, 3);
    let batch: Vec<_> = data.iter().map(|s| trainer.pipeline().apply_eval(s)).collect();
    let first = trainer.train_step(&batch, 0).unwrap().loss.total;
    let mut last = first;
    for step in 1..200 {
        last = trainer.train_step(&batch, step).unwrap().loss.total;
    }
    assert!(last < 0.35 * first, "loss {first} -> {last}");
}

#[test]
fn clipping_bounds_update_norm() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = run_config(dir.path(), false);
    config.train.grad_clip_norm = Some(1e-3);
    let trainer = Trainer::<B>::new(config, Default::default()).unwrap();
    let data = samples(Split::Train, 2, 3);
    let batch: Vec<_> = data.iter().map(|s| trainer.pipeline().apply_eval(s)).collect();
    let (x, y) = batch_tensors::<B>(&batch, &Default::default());
    let terms = combined_loss(trainer.model().forward_logits(x).unwrap(), y, &trainer.config().loss).unwrap();
    let mut grads = GradientsParams::from_grads(terms.total.backward(), trainer.model());
    let before = clip_global_norm(trainer.model(), &mut grads, Some(1e-3));
    let after = global_grad_norm(trainer.model(), &grads);
    assert!(before > 1e-3);
    assert!(after <= 1e-3 * (1.0 + 1e-4), "{after}");
}

#[test]
fn non_finite_loss_reports_samples() {
    let dir = tempfile::tempdir().unwrap();
    let mut trainer = Trainer::<B>::new(run_config(dir.path(), false), Default::default()).unwrap();
    let data = samples(Split::Train, 2, 3);
    let mut batch: Vec<_> = data.iter().map(|s| trainer.pipeline().apply_eval(s)).collect();
    batch[1].image.fill(f32::NAN);
    let digest = weights_digest(trainer.model());
    match trainer.train_step(&batch, 4) {
        Err(TrainError::NonFiniteLoss { step, sample_ids, .. }) => {
            assert_eq!(step, 4);
            assert_eq!(sample_ids, vec!["train0".to_string(), "train1".to_string()]);
        }
        other => panic!("expected non-finite loss, got {other:?}"),
    }
    assert_eq!(weights_digest(trainer.model()), digest);
}

#[test]
fn validation_does_not_change_weights() {
    let dir = tempfile::tempdir().unwrap();
    let trainer = Trainer::<B>::new(run_config(dir.path(), false), Default::default()).unwrap();
    let val = samples(Split::Val, 3, 10);
    let before = weights_digest(trainer.model());
    let (loss, report) = trainer.validate(&val).unwrap();
    assert!(loss.is_finite());
    assert_eq!(report.num_images, 3);
    assert_eq!(weights_digest(trainer.model()), before);
    let (again, _) = trainer.validate(&val).unwrap();
    assert_eq!(loss, again);
}

#[test]
fn empty_validation_split_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let trainer = Trainer::<B>::new(run_config(dir.path(), false), Default::default()).unwrap();
    let empty: Vec<FundusSample> = Vec::new();
    assert!(matches!(trainer.validate(&empty), Err(TrainError::EmptySplit(_))));
}

#[test]
fn frozen_metric_stops_after_patience() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = run_config(dir.path(), false);
    config.train.max_epochs = 10;
    config.train.early_stopping.patience = 1;
    let mut trainer = Trainer::<B>::new(config, Default::default())
        .unwrap()
        .with_monitor_hook(|_, _| 0.25);
    let result = trainer
        .fit(&samples(Split::Train, 2, 1), &samples(Split::Val, 2, 50))
        .unwrap();
    assert!(result.stopped_early);
    assert_eq!(result.epochs_run, 2);
    assert_eq!(result.best_epoch, 0);
    assert_eq!(result.best_val_metric, 0.25);
    assert!(result.best_checkpoint.join(STATE_FILE).is_file());
    let best = read_state(&result.best_checkpoint).unwrap();
    assert_eq!(best.epoch, 1);
    assert_eq!(read_state(&result.last_checkpoint).unwrap().epoch, 2);
}

#[test]
fn same_seed_reproduces_run() {
    let train = samples(Split::Train, 3, 1);
    let val = samples(Split::Val, 2, 50);
    let run = |seed: u64| {
        let dir = tempfile::tempdir().unwrap();
        let mut config = run_config(dir.path(), true);
        config.train.max_epochs = 1;
        config.train.seed = seed;
        let mut trainer = Trainer::<B>::new(config, Default::default()).unwrap();
        let result = trainer.fit(&train, &val).unwrap();
        (digest(&trainer), result.history[0].train)
    };
    let a = run(5);
    assert_eq!(a, run(5));
    assert_ne!(a.0, run(6).0);
}

#[test]
fn resume_continues_identically() {
    let train = samples(Split::Train, 3, 1);
    let val = samples(Split::Val, 2, 50);
    let dir = tempfile::tempdir().unwrap();
    let mut config = run_config(dir.path(), true);
    config.train.max_epochs = 2;

    let mut straight = Trainer::<B>::new(config.clone(), Default::default()).unwrap();
    straight.fit(&train, &val).unwrap();

    config.train.max_epochs = 1;
    config.train.checkpoint_dir = "first".into();
    let mut first = Trainer::<B>::new(config, Default::default()).unwrap();
    let result = first.fit(&train, &val).unwrap();
    let mut resumed = Trainer::<B>::resume(&result.last_checkpoint, Default::default()).unwrap();
    assert_eq!(resumed.epoch(), 1);
    assert_eq!(digest(&resumed), digest(&first));
    assert_eq!(resumed.history(), first.history());

    let resaved = resumed.save(&dir.path().join("resaved")).unwrap();
    assert_eq!(
        file_sha256(&resaved.join(MODEL_FILE)).unwrap(),
        file_sha256(&result.last_checkpoint.join(MODEL_FILE)).unwrap()
    );

    // Adam moments enter the next update, so identical weights after another
    // epoch require a bit-exact optimizer round-trip.
    resumed.train_epoch(&train).unwrap();
    first.train_epoch(&train).unwrap();
    assert_eq!(digest(&resumed), digest(&first));
    assert_eq!(straight.history()[0].train, first.history()[0].train);
    assert_eq!(digest(&straight), digest(&resumed));
}

#[test]
fn checkpoint_rejects_mismatch_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let config = run_config(dir.path(), false);
    let trainer = Trainer::<B>::new(config.clone(), Default::default()).unwrap();
    let ckpt = trainer.save(&dir.path().join("ckpt")).unwrap();

    let (model, state) = load_model::<NdArray<f32>>(&ckpt, Some(&config.model), &Default::default()).unwrap();
    assert_eq!(weights_digest(&model), weights_digest(trainer.model()));
    assert_eq!(state.config, config);

    let mut other = config.model.clone();
    other.num_classes = 3;
    match load_model::<NdArray<f32>>(&ckpt, Some(&other), &Default::default()) {
        Err(CheckpointError::ConfigMismatch { field, .. }) => assert_eq!(field, "num_classes"),
        other => panic!("expected mismatch, got {:?}", other.map(|_| ())),
    }

    let model_path = ckpt.join(MODEL_FILE);
    let bytes = std::fs::read(&model_path).unwrap();
    std::fs::write(&model_path, &bytes[..bytes.len() / 2]).unwrap();
    let err = read_state(&ckpt).unwrap_err();
    assert!(matches!(err, CheckpointError::Corrupt { .. }));
    assert!(err.to_string().contains(MODEL_FILE), "{err}");
}

#[test]
fn step_log_is_json_lines() {
    #[derive(Clone, Default)]
    struct Shared(std::rc::Rc<std::cell::RefCell<Vec<u8>>>);
    impl Write for Shared {
        fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
            self.0.borrow_mut().extend_from_slice(buf);
            Ok(buf.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let sink = Shared::default();
    let mut trainer = Trainer::<B>::new(run_config(dir.path(), false), Default::default())
        .unwrap()
        .with_log(Box::new(sink.clone()));
    trainer.train_epoch(&samples(Split::Train, 3, 1)).unwrap();
    let text = String::from_utf8(sink.0.borrow().clone()).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines.iter().all(|l| l["event"] == "step" && l["loss"]["total"].is_number()));
}
