use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use usekit::data::{generate_dataset, BehaviorSequence, Dataset, PersonaSpec};
use usekit::model::ModelConfig;
use usekit::objectives::ObjectiveSet;
use usekit::trainer::{lr_at, sample_pairs, train, TrainConfig};
use usekit::Error;

fn users(lengths: &[usize]) -> Vec<BehaviorSequence> {
    lengths
        .iter()
        .enumerate()
        .map(|(i, &n)| BehaviorSequence {
            user_id: i as u64,
            ids: (0..n).map(|t| 2 + (t % 7) as u32).collect(),
        })
        .collect()
}

fn small() -> (Dataset, ModelConfig, TrainConfig) {
    let ds = generate_dataset(&PersonaSpec::default(), 48, 160, 21).unwrap();
    let model = ModelConfig {
        future_window: 8,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        seq_len: 32,
        pair_gap: 8,
        future_window: 8,
        batch_size: 8,
        epochs: 2,
        ..TrainConfig::default()
    };
    (ds, model, cfg)
}

#[test]
fn pairs_respect_the_gap_over_many_draws() {
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let lengths: Vec<usize> = (0..50).map(|_| rng.gen_range(cfg.admission_length()..400)).collect();
    let us = users(&lengths);
    let mut min_gap = usize::MAX;
    let mut drawn = 0;
    while drawn < 10_000 {
        for p in sample_pairs(&us, &cfg, &mut rng).unwrap() {
            let n = us[p.user_index].ids.len();
            assert!(p.positive_start + p.len <= n);
            assert!(p.anchor_start + p.len <= p.positive_start, "windows overlap");
            min_gap = min_gap.min(p.gap());
            drawn += 1;
        }
    }
    assert!(min_gap >= cfg.pair_gap, "min gap {min_gap}");
}

#[test]
fn admission_boundary() {
    let cfg = TrainConfig {
        batch_size: 2,
        ..TrainConfig::default()
    };
    let t = cfg.admission_length();
    assert_eq!(t, 2 * 64 + 2 * 16);
    let us = users(&[t, t, t - 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..200 {
        let pairs = sample_pairs(&us, &cfg, &mut rng).unwrap();
        assert_eq!(pairs.len(), 2, "the short user is excluded");
        for p in pairs {
            assert!(p.gap() >= cfg.pair_gap);
            assert!(p.positive_start + p.len <= t);
        }
    }
    let err = sample_pairs(&users(&[t, t - 1]), &cfg, &mut rng).unwrap_err();
    match err {
        Error::Dataset(msg) => assert!(msg.contains(&t.to_string()), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn schedule_shape() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, 1000, &cfg).unwrap(), 0.0);
    assert_eq!(lr_at(60, 1000, &cfg).unwrap(), 4e-4);
    assert_eq!(lr_at(1000, 1000, &cfg).unwrap(), 0.0);
    assert!(matches!(
        lr_at(1001, 1000, &cfg),
        Err(Error::Schedule {
            step: 1001,
            total: 1000
        })
    ));
    let lrs: Vec<f64> = (0..=1000).map(|s| lr_at(s, 1000, &cfg).unwrap()).collect();
    assert_eq!(lrs.iter().copied().fold(f64::MIN, f64::max), cfg.peak_lr);
    // constant slope on each side of the peak
    let up = lrs[1] - lrs[0];
    let down = lrs[61] - lrs[62];
    for s in 1..=60 {
        assert!(((lrs[s] - lrs[s - 1]) - up).abs() < 1e-15);
    }
    for s in 61..=1000 {
        assert!(((lrs[s - 1] - lrs[s]) - down).abs() < 1e-15);
    }
    // 0.06·100 is exactly six warmup steps; 0.06·110 rounds up to seven
    assert_eq!(lr_at(6, 100, &cfg).unwrap(), 4e-4);
    assert_eq!(lr_at(7, 110, &cfg).unwrap(), 4e-4);
    assert!(lr_at(6, 110, &cfg).unwrap() < 4e-4);
}

#[test]
fn loss_falls_between_epochs_one_and_three() {
    let ds = generate_dataset(&PersonaSpec::default(), 800, 320, 77).unwrap();
    for seed in 0..3 {
        let cfg = TrainConfig {
            epochs: 3,
            seed,
            ..TrainConfig::default()
        };
        let out = train(&ds, &ModelConfig::default(), &cfg, None).unwrap();
        let (first, third) = (out.epochs[0].train_loss, out.epochs[2].train_loss);
        assert!(
            third < first - 0.05,
            "seed {seed}: epoch 1 {first:.4}, epoch 3 {third:.4}"
        );
    }
}

#[test]
fn one_step_changes_the_fingerprint() {
    let (ds, model, cfg) = small();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 45,
        ..cfg
    };
    let out = train(&ds, &model, &cfg, None).unwrap();
    assert_eq!(out.total_steps, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let init = usekit::model::Parameters::<f32>::init(&model, &mut rng).unwrap();
    assert_ne!(init.fingerprint(), out.params.fingerprint());
}

#[test]
fn training_is_reproducible() {
    let (ds, model, cfg) = small();
    let a = train(&ds, &model, &cfg, None).unwrap();
    let b = train(&ds, &model, &cfg, None).unwrap();
    assert_eq!(a.params.fingerprint(), b.params.fingerprint());
    assert_eq!(a.metrics, b.metrics);
    let c = train(&ds, &model, &TrainConfig { seed: 1, ..cfg }, None).unwrap();
    assert_ne!(a.params.fingerprint(), c.params.fingerprint());
}

#[test]
fn ablations_wire_only_their_objective() {
    let (ds, model, cfg) = small();
    let fbp = train(
        &ds,
        &model,
        &TrainConfig {
            objectives: ObjectiveSet::FBP_ONLY,
            ..cfg.clone()
        },
        None,
    )
    .unwrap();
    assert!(fbp
        .metrics
        .iter()
        .all(|r| r.sup.is_none() && r.fbp.is_some() && r.clm.is_none()));
    let sup = train(
        &ds,
        &model,
        &TrainConfig {
            objectives: ObjectiveSet::SUP_ONLY,
            ..cfg.clone()
        },
        None,
    )
    .unwrap();
    assert!(sup.metrics.iter().all(|r| r.sup.is_some() && r.fbp.is_none()));
    let clm_model = ModelConfig {
        clm_head: true,
        ..model.clone()
    };
    let clm = train(
        &ds,
        &clm_model,
        &TrainConfig {
            objectives: ObjectiveSet::CLM_ONLY,
            ..cfg.clone()
        },
        None,
    )
    .unwrap();
    assert!(clm.metrics.iter().all(|r| r.clm.is_some() && r.fbp.is_none()));
    let err = train(
        &ds,
        &model,
        &TrainConfig {
            objectives: ObjectiveSet::CLM_ONLY,
            ..cfg
        },
        None,
    )
    .unwrap_err();
    assert!(
        matches!(err, Error::Config { ref key, .. } if key == "clm_head"),
        "{err}"
    );
}

#[test]
fn checkpoints_every_epoch() {
    let (ds, model, cfg) = small();
    let dir = tempfile::tempdir().unwrap();
    let out = train(&ds, &model, &cfg, Some(dir.path())).unwrap();
    assert_eq!(out.epochs.len(), 2);
    for e in &out.epochs {
        let path = e.checkpoint.as_ref().unwrap();
        assert!(path.exists(), "{}", path.display());
    }
    let last = usekit::model::load_params(out.epochs[1].checkpoint.as_ref().unwrap()).unwrap();
    assert_eq!(last.fingerprint(), out.params.fingerprint());
}
