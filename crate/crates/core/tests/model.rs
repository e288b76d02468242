use gito::check::{run_check, toy_sample};
use gito::data::Sample;
use gito::graph::{GraphStrategy, PointCloud};
use gito::model::{build_model, gito_forward, Gito, ModelConfig};
use gito::train::Variant;
use gito::{GitoError, Precision};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

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

fn cloud(n: usize, ch: usize, rng: &mut ChaCha8Rng) -> PointCloud {
    let coords = (0..2 * n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let values = (0..n * ch).map(|_| rng.gen_range(-1.0..1.0)).collect();
    PointCloud::with_values(2, coords, ch, values).unwrap()
}

fn sample(n_in: usize, n_q: usize, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = cloud(n_in, 1, &mut rng);
    let q = cloud(n_q, 1, &mut rng);
    Sample::new(
        vec![input],
        PointCloud::new(2, q.coords().to_vec()).unwrap(),
        q.values().unwrap().to_vec(),
        1,
    )
    .unwrap()
}

/// Model whose zero-initialized decoder output is replaced by random weights.
fn live_model(cfg: ModelConfig, seed: u64) -> Gito<f64> {
    let mut m = Gito::<f64>::new(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for t in m.params.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.gen_range(-0.05..0.05);
        }
    }
    m
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn output_shape_and_finiteness() {
    let m = build_model::<f64>(tiny(), 1).unwrap();
    let y = gito_forward(&m, &sample(8, 5, 2)).unwrap();
    assert_eq!(y.len(), 5);
    assert!(y.iter().all(|x| x.is_finite()));
}

#[test]
fn same_seed_gives_identical_parameters_and_predictions() {
    let a = Gito::<f32>::new(ModelConfig::desk(), 7).unwrap();
    let b = Gito::<f32>::new(ModelConfig::desk(), 7).unwrap();
    let c = Gito::<f32>::new(ModelConfig::desk(), 8).unwrap();
    let bits = |m: &Gito<f32>| -> Vec<u32> {
        m.params.iter().flat_map(|(_, t)| t.data().iter().map(|x| x.to_bits())).collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&c));
    let s = sample(40, 30, 3);
    let la = live_model(tiny(), 4);
    let lb = live_model(tiny(), 4);
    assert_eq!(la.predict(&s).unwrap(), lb.predict(&s).unwrap());
}

#[test]
fn mismatched_input_function_count_is_rejected() {
    let mut cfg = tiny();
    cfg.input_channels = vec![1, 1];
    let m = Gito::<f64>::new(cfg, 1).unwrap();
    let err = m.predict(&sample(8, 5, 2)).unwrap_err();
    assert!(matches!(err, GitoError::ChannelMismatch(_)));
}

#[test]
fn invalid_configs_are_described() {
    let mut cfg = tiny();
    cfg.n_heads = 3;
    assert!(matches!(Gito::<f64>::new(cfg, 1), Err(GitoError::Config(_))));
    let mut cfg = tiny();
    cfg.n_experts = 0;
    assert!(Gito::<f64>::new(cfg, 1).is_err());
    assert!("hidden_size=abc".parse::<ModelConfig>().is_err());
    assert!("bogus_key=1".parse::<ModelConfig>().is_err());
}

#[test]
fn config_text_round_trips() {
    for cfg in [ModelConfig::ns(), ModelConfig::heat(), ModelConfig::airfoil(), ModelConfig::desk()] {
        let back: ModelConfig = cfg.to_text().parse().unwrap();
        assert_eq!(back.to_text(), cfg.to_text());
    }
    let cfg: ModelConfig = "preset=ns\nhidden_size=64\n".parse().unwrap();
    assert_eq!(cfg.hidden_size, 64);
    assert_eq!(cfg.output_field_count, 3);
}

#[test]
fn joint_input_permutation_leaves_predictions_unchanged() {
    let m = live_model(tiny(), 5);
    let s = sample(30, 12, 6);
    let mut perm: Vec<usize> = (0..30).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(7));
    let shuffled = Sample::new(
        vec![s.inputs[0].select(&perm)],
        s.queries.clone(),
        s.targets.clone(),
        1,
    )
    .unwrap();
    assert!(max_abs_diff(&m.predict(&s).unwrap(), &m.predict(&shuffled).unwrap()) < 1e-6);

    // Same with HGT on the input branch: KNN features do not depend on order.
    let mut cfg = tiny();
    cfg.apply_hgt_to_inputs = true;
    let m = live_model(cfg, 5);
    assert!(max_abs_diff(&m.predict(&s).unwrap(), &m.predict(&shuffled).unwrap()) < 1e-6);
}

#[test]
fn duplicated_input_points_stay_finite() {
    let m = live_model(tiny(), 8);
    let s = sample(10, 6, 9);
    let idx: Vec<usize> = (0..10).flat_map(|i| [i, i]).collect();
    let dup = Sample::new(vec![s.inputs[0].select(&idx)], s.queries.clone(), s.targets.clone(), 1).unwrap();
    let y = m.predict(&dup).unwrap();
    assert!(y.iter().all(|x| x.is_finite()));
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    for seed in 1..=3 {
        let c = run_check("model", &ModelConfig::desk(), seed).unwrap();
        assert!(c.passed(), "{c}");
        let s = toy_sample(&ModelConfig::desk(), seed).unwrap();
        assert_eq!((s.inputs[0].len(), s.n_queries()), (6, 4));
    }
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let s = sample(20, 10, 10);

    let m = live_model(tiny(), 11);
    let path = dir.path().join("m64.ckpt");
    m.save(&path).unwrap();
    let back = Gito::<f64>::load(&path).unwrap();
    assert_eq!(back.config.to_text(), m.config.to_text());
    assert_eq!(m.predict(&s).unwrap(), back.predict(&s).unwrap());

    let mut cfg = tiny();
    cfg.precision = Precision::F32;
    let m32 = Gito::<f32>::new(cfg, 12).unwrap();
    let path = dir.path().join("m32.ckpt");
    m32.save(&path).unwrap();
    assert_eq!(&std::fs::read(&path).unwrap()[4..8], &1u32.to_le_bytes());
    let back = Gito::<f32>::load(&path).unwrap();
    assert_eq!(m32.predict(&s).unwrap(), back.predict(&s).unwrap());
}

#[test]
fn parameter_counts_match_reference_scale() {
    let ns = Gito::<f32>::new(ModelConfig::ns(), 0).unwrap().param_count() as f64;
    let heat = Gito::<f32>::new(ModelConfig::heat(), 0).unwrap().param_count() as f64;
    assert!((ns / 4.37e6 - 1.0).abs() <= 0.10, "ns {ns}");
    assert!((heat / 18.24e6 - 1.0).abs() <= 0.10, "heat {heat}");
    let unfused = Gito::<f32>::new(Variant::NoFusion.apply(&ModelConfig::ns()), 0).unwrap();
    assert!(unfused.param_count() as f64 > ns);
    assert_eq!(unfused.config.hidden_size, 192);
}
