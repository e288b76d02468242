use gito::data::{generate_poisson_dataset, Dataset, PoissonSpec};
use gito::graph::GraphStrategy;
use gito::model::{Gito, ModelConfig};
use gito::train::*;
use gito::GitoError;

fn tiny() -> ModelConfig {
    ModelConfig {
        hidden_size: 8,
        n_heads: 2,
        mlp_hidden: 8,
        query_graph: GraphStrategy::Knn(2),
        input_graph: GraphStrategy::Knn(2),
        ..ModelConfig::desk()
    }
}

fn dataset(n: usize, n_test: usize) -> Dataset {
    let spec = PoissonSpec {
        n_samples: n,
        n_points: 16,
        seed: 2,
        grid: 16,
    };
    generate_poisson_dataset(&spec, n_test).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        schedule: OneCycle {
            max_lr: 1e-2,
            ..OneCycle::default()
        },
        ..TrainConfig::default()
    }
}

fn bits(m: &Gito<f64>) -> Vec<u64> {
    m.params.iter().flat_map(|(_, t)| t.data().iter().map(|x| x.to_bits())).collect()
}

#[test]
fn relative_l2_fixtures() {
    let t = [1.0, -2.0, 3.0, 0.5];
    assert_eq!(relative_l2(&t, &t, 1).unwrap().mean, 0.0);
    assert_eq!(relative_l2(&[0.0; 4], &t, 1).unwrap().mean, 1.0);
    let doubled: Vec<f64> = t.iter().map(|x| 2.0 * x).collect();
    assert!((relative_l2(&doubled, &t, 1).unwrap().mean - 1.0).abs() < 1e-15);

    // Two interleaved channels are scored independently.
    let r = relative_l2(&[1.0, 0.0, 3.0, 0.0], &[1.0, 4.0, 3.0, 3.0], 2).unwrap();
    assert_eq!(r.per_channel, [0.0, 1.0]);
    assert_eq!(r.mean, 0.5);

    assert!(matches!(
        relative_l2(&[1.0, 1.0], &[1.0, 0.0], 2),
        Err(GitoError::ZeroNormChannel(1))
    ));
    assert!(relative_l2(&[1.0], &[1.0, 2.0], 1).is_err());
}

#[test]
fn onecycle_endpoints() {
    let s = OneCycle {
        max_lr: 2e-3,
        pct_start: 0.25,
        div_factor: 25.0,
        final_div_factor: 1e4,
    };
    assert!((s.lr(0, 100) - 2e-3 / 25.0).abs() < 1e-12);
    assert!((s.lr(25, 100) - 2e-3).abs() < 1e-12);
    assert!((s.lr(100, 100) - 2e-3 / 1e4).abs() < 1e-12);
    assert_eq!(onecycle_lr(60, 100, &s), s.lr(60, 100));
    // Warm-up rises, annealing falls.
    let lrs: Vec<f64> = (0..=100).map(|i| s.lr(i, 100)).collect();
    assert!(lrs[..=25].windows(2).all(|w| w[0] < w[1]));
    assert!(lrs[25..].windows(2).all(|w| w[0] > w[1]));
}

#[test]
fn clipping_preserves_direction() {
    let mut g = vec![3.0, -4.0, 0.0];
    let norm = clip_grad_norm(&mut g, 1.0);
    assert_eq!(norm, 5.0);
    assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] + 0.8).abs() < 1e-15);
    let mut small = vec![0.1, 0.2];
    clip_grad_norm(&mut small, 1.0);
    assert_eq!(small, [0.1, 0.2]);
}

#[test]
fn train_config_overrides_and_validation() {
    let mut cfg = TrainConfig::default();
    cfg.apply(&[("epochs".into(), "3".into()), ("max_lr".into(), "0.01".into())]).unwrap();
    assert_eq!((cfg.epochs, cfg.schedule.max_lr), (3, 0.01));
    assert!(cfg.clone().apply(&[("batch_size".into(), "0".into())]).is_err());
    assert!(cfg.clone().apply(&[("nope".into(), "1".into())]).is_err());
}

#[test]
fn one_epoch_logs_one_entry() {
    let ds = dataset(4, 2);
    let dir = tempfile::tempdir().unwrap();
    let mut m = Gito::<f64>::new(tiny(), 1).unwrap();
    let opts = TrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..TrainOptions::default()
    };
    let mut out = Vec::new();
    let r = train(&mut m, &ds, &quick(1), &opts, &mut out).unwrap();
    assert_eq!(r.log.len(), 1);
    assert_eq!(r.steps, 1);
    let text = std::fs::read_to_string(dir.path().join("metrics.log")).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert_eq!(String::from_utf8(out).unwrap(), text);
    assert_eq!(parse_metric_log(&text).unwrap(), r.log);
    assert!(best_checkpoint(dir.path()).exists());
    assert!(dir.path().join("last.ckpt").exists());
    // The untrained (zero-decoder) model predicts zeros: error exactly 1.
    let untrained = Gito::<f64>::new(tiny(), 1).unwrap();
    let test: Vec<_> = ds.test_samples().collect();
    assert_eq!(evaluate(&untrained, &test).unwrap().mean, 1.0);
}

#[test]
fn training_is_bitwise_deterministic_in_f64() {
    let ds = dataset(6, 2);
    let run = || {
        let mut m = Gito::<f64>::new(tiny(), 3).unwrap();
        let r = train(&mut m, &ds, &quick(2), &TrainOptions::default(), &mut std::io::sink()).unwrap();
        (bits(&m), r.log)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let ds = dataset(6, 2);
    let cfg = quick(3);
    let mut full = Gito::<f64>::new(tiny(), 4).unwrap();
    let whole = train(&mut full, &ds, &cfg, &TrainOptions::default(), &mut std::io::sink()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut part = Gito::<f64>::new(tiny(), 4).unwrap();
    let first = TrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        stop_after: Some(1),
        ..TrainOptions::default()
    };
    assert_eq!(train(&mut part, &ds, &cfg, &first, &mut std::io::sink()).unwrap().log.len(), 1);
    let mut resumed = Gito::<f64>::new(tiny(), 99).unwrap();
    let second = TrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        resume_from: Some(dir.path().join("last.ckpt")),
        ..TrainOptions::default()
    };
    let rest = train(&mut resumed, &ds, &cfg, &second, &mut std::io::sink()).unwrap();
    assert_eq!(rest.log.len(), 2);
    assert_eq!(rest.steps, whole.steps);
    let diff = full
        .params
        .iter()
        .zip(resumed.params.iter())
        .flat_map(|((_, a), (_, b))| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    assert!(diff <= 1e-6, "diff {diff}");
    let logged = parse_metric_log(&std::fs::read_to_string(dir.path().join("metrics.log")).unwrap()).unwrap();
    assert_eq!(logged.iter().map(|e| e.epoch).collect::<Vec<_>>(), [1, 2, 3]);
}

#[test]
fn diverging_run_keeps_last_good_checkpoint() {
    let ds = dataset(4, 2);
    let dir = tempfile::tempdir().unwrap();
    let mut m = Gito::<f32>::new(tiny(), 5).unwrap();
    let mut cfg = quick(4);
    cfg.batch_size = 1;
    cfg.schedule.max_lr = 1e30;
    cfg.schedule.div_factor = 1.0;
    let opts = TrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
        ..TrainOptions::default()
    };
    let err = train(&mut m, &ds, &cfg, &opts, &mut std::io::sink()).unwrap_err();
    assert!(matches!(err, GitoError::NonFiniteLoss { .. }), "{err:?}");
    assert!(dir.path().join("last_good.ckpt").exists());
}

#[test]
fn ablation_counts_edges_and_parameters() {
    let ds = dataset(4, 2);
    let base = ModelConfig::desk();
    let variants = [
        Variant::Fusion,
        Variant::NoFusion,
        Variant::Graph(GraphStrategy::Knn(4)),
        Variant::Graph(GraphStrategy::Knn(8)),
        Variant::Graph(GraphStrategy::Radius(0.2)),
        Variant::Graph(GraphStrategy::Radius(0.4)),
    ];
    let rows = ablation_harness::<f32>(&variants, &base, &ds, &quick(1), false, 1).unwrap();
    assert!(rows[1].params > rows[0].params);
    assert_eq!(rows[3].edges, 2 * rows[2].edges);
    assert_eq!(rows[2].edges, 4 * 16 * 4);
    assert!(rows[5].edges >= rows[4].edges);
    assert!(rows.iter().all(|r| r.test_rel_l2.is_nan()));
    assert!(rows[0].to_string().starts_with("variant=fusion params="));

    assert_eq!(Variant::parse("no-fusion").unwrap(), Variant::NoFusion);
    assert_eq!(Variant::parse("knn:4").unwrap(), Variant::Graph(GraphStrategy::Knn(4)));
    assert!(Variant::parse("bogus").is_err());
}
