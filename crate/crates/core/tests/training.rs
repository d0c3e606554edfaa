use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use roadsense::autograd::{Graph, ParamKind};
use roadsense::data::{synth_generate, synth_scene, AugmentConfig, DatasetManifest, Sample, Split, SynthConfig};
use roadsense::losses::{joint_loss, HeadOutputs, LossWeights};
use roadsense::tensor::Tensor;
use roadsense::training::*;
use roadsense::{ModelConfig, PerceptionModel};

mod support;
use support::*;

#[test]
fn lr_reaches_initial_value_at_end_of_warmup() {
    check_lr_end_of_warmup();
}

#[test]
fn lr_matches_closed_form_at_sampled_steps() {
    check_lr_closed_form(31, 100);
}

#[test]
fn warm_restarts_schedule_restarts_each_warmup_epoch() {
    let cfg = TrainConfig {
        total_epochs: 10,
        schedule: Schedule::WarmRestarts,
        ..TrainConfig::default()
    };
    for epoch in 0..3 {
        assert_eq!(lr_at(epoch * 8, &cfg, 8), cfg.initial_lr);
        for k in 1..8 {
            assert!(lr_at(epoch * 8 + k, &cfg, 8) < lr_at(epoch * 8 + k - 1, &cfg, 8));
        }
    }
    assert_eq!(lr_at(24, &cfg, 8), cfg.initial_lr);
}

proptest! {
    #[test]
    fn lr_is_continuous_and_decays_after_warmup(warm in 1usize..6, extra in 1usize..40, spe in 1usize..30, f in 0.001f64..1.0) {
        let cfg = TrainConfig { warmup_epochs: warm, total_epochs: warm + extra, final_lr_fraction: f, ..TrainConfig::default() };
        let w = warm * spe;
        let total = (warm + extra) * spe;
        check_lr_continuity(&cfg, spe);
        for s in w + 1..total {
            prop_assert!(lr_at(s, &cfg, spe) <= lr_at(s - 1, &cfg, spe) + 1e-18);
            prop_assert!(lr_at(s, &cfg, spe) >= cfg.initial_lr * f - 1e-15);
        }
        for s in 1..w {
            prop_assert!(lr_at(s, &cfg, spe) > lr_at(s - 1, &cfg, spe));
        }
    }
}

fn synth_batch(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| synth_scene(64, 64, (1, 3), 8, &mut rng).sample).collect()
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        use_mosaic: false,
        use_mixup: false,
        ..ModelConfig::compact(64, 64)
    }
}

/// Batch-summed joint loss of a training-mode forward pass.
fn summed_loss(model: &PerceptionModel<f64>, batch: &[Sample], w: &LossWeights) -> f64 {
    let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
    let mut g = Graph::new(&model.store, true);
    let x = g.constant(roadsense::data::images_to_tensor::<f64>(&images).unwrap());
    let out = model.forward(&mut g, x).unwrap();
    let heads = HeadOutputs {
        detection: out.detection.map(|v| g.value(v).clone()),
        drivable: g.value(out.drivable).clone(),
        lane: g.value(out.lane).clone(),
    };
    let (b, _) = joint_loss(
        &heads,
        &batch_targets(batch),
        &model.anchors,
        model.config.num_classes,
        w,
        model.config.lane_loss_kind,
    )
    .unwrap();
    b.total * batch.len() as f64
}

#[test]
fn plain_sgd_step_follows_the_batch_summed_loss_gradient() {
    let batch = synth_batch(2, 32);
    let w = LossWeights::default();
    let model = PerceptionModel::<f64>::new(tiny_model(), 1).unwrap();
    let mut stepped = model.clone();
    let mut opt = Sgd::new(&stepped.store, 0.0, 0.0);
    let lr = 1e-3;
    train_step(&mut stepped, &mut opt, &batch, &w, lr).unwrap();
    // the update is -lr * gradient
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let dir: Vec<Tensor<f64>> = model
        .store
        .values()
        .iter()
        .map(|t| Tensor::from_vec(t.shape(), (0..t.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    let mut analytic = 0.0;
    for ((a, b), d) in model.store.values().iter().zip(stepped.store.values()).zip(&dir) {
        for ((x, y), z) in a.data().iter().zip(b.data()).zip(d.data()) {
            analytic += (x - y) / lr * z;
        }
    }
    let h = 1e-6;
    let shifted = |sign: f64| {
        let mut m = model.clone();
        for (v, d) in m.store.values_mut().iter_mut().zip(&dir) {
            for (p, q) in v.data_mut().iter_mut().zip(d.data()) {
                *p += sign * h * q;
            }
        }
        summed_loss(&m, &batch, &w)
    };
    let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
    assert!(
        (analytic - numeric).abs() <= 2e-3 * analytic.abs().max(numeric.abs()),
        "analytic {analytic} vs numeric {numeric}"
    );
}

#[test]
fn zero_learning_rate_leaves_weights_but_updates_statistics() {
    let batch = synth_batch(2, 34);
    let mut model = PerceptionModel::<f32>::new(tiny_model(), 2).unwrap();
    let before = model.store.clone();
    let mut opt = Sgd::new(&model.store, 0.937, 0.005);
    let losses = train_step(&mut model, &mut opt, &batch, &LossWeights::default(), 0.0).unwrap();
    assert!(losses.total.is_finite() && losses.total > 0.0);
    assert_eq!(model.store.values(), before.values());
    assert_ne!(model.store.buffers(), before.buffers());
}

#[test]
fn weight_decay_shrinks_only_convolution_weights() {
    let model = PerceptionModel::<f64>::new(tiny_model(), 3).unwrap();
    let mut store = model.store.clone();
    let mut opt = Sgd::new(&store, 0.9, 0.01);
    let zeros: Vec<Tensor<f64>> = store.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let lr = 0.5;
    opt.step(&mut store, &zeros, lr);
    for i in 0..store.len() {
        let (a, b) = (model.store.get(i), store.get(i));
        if store.kind(i) == ParamKind::Weight {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((y - x * (1.0 - lr * 0.01)).abs() <= 1e-15 * x.abs());
            }
            assert!(b.sum_sq() < a.sum_sq());
        } else {
            assert_eq!(a, b);
        }
    }
}

#[test]
fn non_finite_input_is_rejected_without_touching_the_model() {
    let mut batch = synth_batch(1, 35);
    batch[0].image.data[10] = f32::NAN;
    let mut model = PerceptionModel::<f32>::new(tiny_model(), 4).unwrap();
    let before = model.store.clone();
    let mut opt = Sgd::new(&model.store, 0.9, 0.0);
    assert!(train_step(&mut model, &mut opt, &batch, &LossWeights::default(), 0.01).is_err());
    assert_eq!(model.store.values(), before.values());
    assert_eq!(model.store.buffers(), before.buffers());
}

fn dataset(n: usize, val: usize) -> (tempfile::TempDir, Vec<DatasetManifest>) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        width: 64,
        height: 64,
        train: n,
        val,
        min_objects: 1,
        max_objects: 3,
        ..SynthConfig::default()
    };
    let m = synth_generate(dir.path(), &cfg).unwrap();
    (dir, m)
}

fn small_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        total_epochs: epochs,
        warmup_epochs: 1,
        batch_size: 4,
        eval_every: 0,
        eval_size: (64, 64),
        augment: AugmentConfig::none(),
        ..TrainConfig::default()
    }
}

#[test]
fn fit_logs_every_step_and_saves_checkpoints() {
    let (_data, m) = dataset(8, 2);
    let run = tempfile::tempdir().unwrap();
    let mut opts = FitOptions::new(run.path(), tiny_model(), small_train(2), LossWeights::default());
    opts.eval = Some(m[1].clone());
    let out = fit(&m[0], &opts).unwrap();
    assert_eq!(out.history.len(), 2 * (8 / 4));
    for (i, r) in out.history.iter().enumerate() {
        assert_eq!(r.step, i);
        assert_eq!(r.lr, lr_at(i, &opts.train, 2));
    }
    assert_eq!(read_log(&out.log).unwrap(), out.history);
    let text = std::fs::read_to_string(&out.log).unwrap();
    assert_eq!(text.lines().next(), Some(LOG_HEADER));
    assert!(out.last.is_file());
    // evaluation runs at the final epoch
    assert_eq!(out.reports.len(), 1);
    assert!(out.best.is_some());
    assert!(run.path().join("eval_epoch2.json").is_file());
    let ck = load_checkpoint::<f32>(&out.last).unwrap();
    assert_eq!((ck.header.epoch, ck.header.step), (2, 4));
    assert_eq!(ck.model.store.values(), out.model.store.values());
    assert!(ck.velocity.is_some());
}

#[test]
fn fit_is_deterministic() {
    let (_data, m) = dataset(6, 0);
    let mut train = small_train(2);
    train.augment = AugmentConfig::default();
    let cfg = ModelConfig::compact(64, 64);
    let a_dir = tempfile::tempdir().unwrap();
    let b_dir = tempfile::tempdir().unwrap();
    let a = fit(&m[0], &FitOptions::new(a_dir.path(), cfg.clone(), train.clone(), LossWeights::default())).unwrap();
    let b = fit(&m[0], &FitOptions::new(b_dir.path(), cfg.clone(), train.clone(), LossWeights::default())).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.store.values(), b.model.store.values());
    assert_eq!(std::fs::read(&a.last).unwrap(), std::fs::read(&b.last).unwrap());

    train.seed = 1;
    let c_dir = tempfile::tempdir().unwrap();
    let c = fit(&m[0], &FitOptions::new(c_dir.path(), cfg, train, LossWeights::default())).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn resumed_run_equals_uninterrupted_run() {
    let (_data, m) = dataset(6, 0);
    let mut train = small_train(3);
    train.augment = AugmentConfig::default();
    let cfg = ModelConfig::compact(64, 64);
    let full_dir = tempfile::tempdir().unwrap();
    let full = fit(&m[0], &FitOptions::new(full_dir.path(), cfg.clone(), train.clone(), LossWeights::default())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut opts = FitOptions::new(dir.path(), cfg, train, LossWeights::default());
    opts.stop_after_epoch = Some(1);
    let first = fit(&m[0], &opts).unwrap();
    assert_eq!(first.history.len(), 2);

    // an interrupt before the next batch saves and stops
    opts.stop_after_epoch = None;
    opts.resume = true;
    opts.stop = Some(Arc::new(AtomicBool::new(true)));
    let stopped = fit(&m[0], &opts).unwrap();
    assert!(stopped.interrupted);
    assert_eq!(stopped.history.len(), 2);

    opts.stop = None;
    let resumed = fit(&m[0], &opts).unwrap();
    assert!(!resumed.interrupted);
    assert_eq!(resumed.history, full.history);
    assert_eq!(resumed.model.store.values(), full.model.store.values());
    assert_eq!(resumed.model.store.buffers(), full.model.store.buffers());
    assert_eq!(read_log(&resumed.log).unwrap(), full.history);
}

#[test]
fn resume_rejects_a_different_seed() {
    let (_data, m) = dataset(4, 0);
    let dir = tempfile::tempdir().unwrap();
    let mut opts = FitOptions::new(dir.path(), tiny_model(), small_train(2), LossWeights::default());
    opts.stop_after_epoch = Some(1);
    fit(&m[0], &opts).unwrap();
    opts.resume = true;
    opts.train.seed = 99;
    assert!(fit(&m[0], &opts).is_err());
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = PerceptionModel::<f64>::new(tiny_model(), 5).unwrap();
    let mut opt = Sgd::new(&model.store, 0.9, 0.001);
    train_step(&mut model, &mut opt, &synth_batch(2, 36), &LossWeights::default(), 0.01).unwrap();
    let header = CheckpointHeader {
        schema_id: String::new(),
        dtype: String::new(),
        model: model.config.clone(),
        train: TrainConfig::default(),
        loss: LossWeights::default(),
        params: vec![],
        buffers: vec![],
        has_velocity: false,
        epoch: 7,
        batch_in_epoch: 1,
        step: 30,
        seed: 4,
        best_map50: Some(0.25),
    };
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&path, &model, Some(&opt), header.clone()).unwrap();
    let ck = load_checkpoint::<f64>(&path).unwrap();
    assert_eq!(ck.model.store.values(), model.store.values());
    assert_eq!(ck.model.store.buffers(), model.store.buffers());
    assert_eq!(ck.velocity.as_ref(), Some(&opt.velocity));
    assert_eq!((ck.header.epoch, ck.header.batch_in_epoch, ck.header.step, ck.header.best_map50), (7, 1, 30, Some(0.25)));
    assert_eq!(ck.header.schema_id, CHECKPOINT_SCHEMA);

    // f64 file read as f32 loses only precision
    let narrow = load_checkpoint::<f32>(&path).unwrap();
    for (a, b) in narrow.model.store.values().iter().zip(model.store.values()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((f64::from(*x) - y).abs() <= 1e-6 * y.abs().max(1e-30));
        }
    }

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_checkpoint::<f64>(&cut).is_err());
    let mut junk = bytes.clone();
    junk[0] = b'X';
    std::fs::write(&cut, junk).unwrap();
    assert!(load_checkpoint::<f64>(&cut).is_err());
    let mut extra = bytes;
    extra.push(0);
    std::fs::write(&cut, extra).unwrap();
    assert!(load_checkpoint::<f64>(&cut).is_err());
    assert!(load_checkpoint::<f64>(&dir.path().join("missing.ckpt")).is_err());
}

#[test]
fn empty_splits() {
    let (data, m) = dataset(2, 0);
    let empty = roadsense::data::load_manifest(data.path(), Split::Val, 2).unwrap();
    assert!(empty.is_empty());
    let run = tempfile::tempdir().unwrap();
    let opts = FitOptions::new(run.path(), tiny_model(), small_train(2), LossWeights::default());
    assert!(fit(&empty, &opts).is_err());
    let model = PerceptionModel::<f32>::new(tiny_model(), 0).unwrap();
    let r = evaluate(&model, &empty, &EvalOptions::from_train(&small_train(2))).unwrap();
    assert_eq!((r.num_images, r.map50, r.lane_iou), (0, None, None));
    assert!(r.notes.iter().any(|n| n.contains("empty")));
    assert_eq!(m.len(), 1);
}

#[test]
fn untrained_model_scores_low_lane_iou() {
    let (_data, m) = dataset(1, 6);
    let opts = EvalOptions::from_train(&small_train(2));
    for seed in 0..3 {
        let model = PerceptionModel::<f32>::new(tiny_model(), seed).unwrap();
        let r = evaluate(&model, &m[1], &opts).unwrap();
        let iou = r.lane_iou.unwrap();
        assert!(iou < 0.05, "seed {seed}: lane IoU {iou}");
        assert_eq!(r.num_images, 6);
        assert_eq!(r.param_count, Some(model.param_count()));
    }
}

#[test]
fn invalid_train_configs_are_rejected() {
    let ok = small_train(2);
    ok.validate().unwrap();
    for bad in [
        TrainConfig { initial_lr: 0.0, ..ok.clone() },
        TrainConfig { batch_size: 0, ..ok.clone() },
        TrainConfig { warmup_epochs: 2, ..ok.clone() },
        TrainConfig { final_lr_fraction: 1.5, ..ok.clone() },
        TrainConfig { eval_size: (60, 64), ..ok.clone() },
        TrainConfig { conf_threshold: 1.0, ..ok.clone() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}
