mod common;

use common::*;
use graphpose_core::config::RunConfig;
use graphpose_core::data::{normalize_sample, synth_dataset, DatasetIndex, Pose, SynthConfig};
use graphpose_core::metrics::{mpjpe, pa_mpjpe, MetricsReport};
use graphpose_core::model::{load_checkpoint, Network};
use graphpose_core::training::{
    evaluate, evaluate_with_predictions, lr_at, mse_loss, mse_loss_grad, train, TrainConfig, TrainError, TrainHistory,
    TrainOptions, HISTORY_FILE,
};
use rand::RngExt;

fn corpus(n: usize, seed: u64) -> (tempfile::TempDir, DatasetIndex) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n_samples: n,
        n_subjects: 4,
        seed,
        ..SynthConfig::default()
    };
    let index = synth_dataset(&cfg, dir.path()).unwrap();
    (dir, index)
}

fn desk_net(seed: u64) -> Network<f32> {
    let cfg = RunConfig::desk();
    Network::new(cfg.model.clone(), cfg.skeleton_graph().unwrap(), seed).unwrap()
}

fn quick(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        seed,
        ..TrainConfig::desk()
    }
}

fn split(index: &DatasetIndex, n_train: usize) -> (DatasetIndex, DatasetIndex) {
    let a: Vec<usize> = (0..n_train).collect();
    let b: Vec<usize> = (n_train..index.len()).collect();
    (index.subset(&a), index.subset(&b))
}

#[test]
fn zero_epochs_leave_the_initialization() {
    let (_d, index) = corpus(24, 1);
    let (tr, te) = split(&index, 16);
    let net = desk_net(7);
    let run = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        run_dir: Some(run.path().to_path_buf()),
        ..TrainOptions::default()
    };
    let cfg = TrainConfig {
        mean_pose_offset: false,
        ..quick(0, 0)
    };
    let out = train(net.clone(), &tr, Some(&te), &cfg, &opts).unwrap();
    for (a, b) in net.params().iter().zip(out.last.params().iter()) {
        assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
    }
    assert_eq!(out.history.epochs().count(), 0);
    let saved: Network<f32> = load_checkpoint(run.path().join("last.ckpt"), None, false).unwrap();
    assert_eq!(saved.digest(), net.digest());
    assert_eq!(evaluate(&saved, &te).unwrap(), evaluate(&net, &te).unwrap());
}

#[test]
fn evaluation_is_repeatable_and_matches_a_loop() {
    let (_d, index) = corpus(20, 2);
    let net = desk_net(3);
    let a = evaluate(&net, &index).unwrap();
    let b = evaluate(&net, &index).unwrap();
    assert_eq!(a, b);
    let (report, preds, gts) = evaluate_with_predictions(&net, &index).unwrap();
    assert_eq!(report, a);
    let (mut m, mut pa) = (0.0, 0.0);
    for i in 0..index.len() {
        let s = index.load(i).unwrap();
        let z: Vec<f32> = normalize_sample(&s.z);
        let pred = Pose::from_flat(&net.predict_mm(&z).unwrap());
        assert_eq!(pred, preds[i]);
        assert_eq!(s.pose.to_flat(), gts[i].to_flat());
        m += mpjpe(&pred, &s.pose).unwrap();
        pa += pa_mpjpe(&pred, &s.pose).unwrap();
    }
    let n = index.len() as f64;
    assert!((report.mpjpe_mm - m / n).abs() < 1e-9);
    assert!((report.pa_mpjpe_mm - pa / n).abs() < 1e-9);
    assert_eq!(report, MetricsReport::from_batch(&preds, &gts).unwrap());
}

#[test]
fn mse_matches_an_explicit_loop() {
    let mut r = rng(40);
    for _ in 0..100 {
        let j = r.random_range(1..30);
        let p = normals(&mut r, 3 * j);
        let t = normals(&mut r, 3 * j);
        let mut oracle = 0.0;
        for k in 0..j {
            oracle += (0..3).map(|c| (p[3 * k + c] - t[3 * k + c]).powi(2)).sum::<f64>();
        }
        oracle /= j as f64;
        let (l, g) = mse_loss_grad(&p, &t);
        assert!((l - oracle).abs() < 1e-9);
        assert!((mse_loss(&Pose::from_flat(&p), &Pose::from_flat(&t)) - oracle).abs() < 1e-9);
        for i in 0..p.len() {
            assert!((g[i] - 2.0 * (p[i] - t[i]) / j as f64).abs() < 1e-12);
        }
    }
}

#[test]
fn cosine_schedule_endpoints() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, 0, &cfg), cfg.min_lr);
    assert_eq!(lr_at(0, 10, &cfg), cfg.lr0);
    assert_eq!(lr_at(10, 10, &cfg), cfg.min_lr);
    assert_eq!(lr_at(50, 10, &cfg), cfg.min_lr);
}

#[test]
fn history_file_round_trips() {
    let (_d, index) = corpus(40, 4);
    let (tr, te) = split(&index, 32);
    let run = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        run_dir: Some(run.path().to_path_buf()),
        run_digest: Some("abc".into()),
        verbose: false,
    };
    let out = train(desk_net(5), &tr, Some(&te), &quick(2, 9), &opts).unwrap();
    let back = TrainHistory::read_jsonl(run.path().join(HISTORY_FILE)).unwrap();
    assert_eq!(back, out.history);
    let recipe = back.recipe().unwrap();
    assert_eq!((recipe.n_train, recipe.n_val, recipe.epochs), (32, 8, 2));
    assert_eq!(recipe.steps_per_epoch, 2);
    assert_eq!(recipe.run_digest.as_deref(), Some("abc"));
    assert_eq!(back.epochs().count(), 2);
    assert!(back.epochs().all(|e| e.val.is_some()));
    assert!(run.path().join("best.ckpt").exists());
}

#[test]
fn same_seed_same_losses() {
    let (_d, index) = corpus(32, 6);
    let run = |seed| {
        train(desk_net(1), &index, None, &quick(2, seed), &TrainOptions::default())
            .unwrap()
            .history
            .losses()
    };
    let a = run(11);
    assert_eq!(a.len(), 2);
    assert_eq!(a, run(11));
    assert_ne!(a, run(12));
}

#[test]
fn training_reduces_the_loss() {
    let (_d, index) = corpus(64, 8);
    let cfg = TrainConfig {
        lr0: 1e-3,
        ..quick(4, 0)
    };
    let losses = train(desk_net(2), &index, None, &cfg, &TrainOptions::default())
        .unwrap()
        .history
        .losses();
    assert!(losses[3] < losses[0], "{losses:?}");
}

#[test]
fn runaway_updates_are_reported() {
    let (_d, index) = corpus(16, 9);
    let cfg = TrainConfig {
        lr0: 1e30,
        min_lr: 1e30,
        ..quick(3, 0)
    };
    match train(desk_net(2), &index, None, &cfg, &TrainOptions::default()) {
        Err(TrainError::Diverged { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|o| o.history.losses())),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let (_d, index) = corpus(8, 10);
    for cfg in [
        TrainConfig { lr0: 0.0, ..quick(1, 0) },
        TrainConfig { batch_size: 0, ..quick(1, 0) },
        TrainConfig { weight_decay: -1.0, ..quick(1, 0) },
    ] {
        assert!(matches!(
            train(desk_net(0), &index, None, &cfg, &TrainOptions::default()),
            Err(TrainError::Config(_))
        ));
    }
}
