use std::f64::consts::PI;

use gito::data::poisson::PoissonSolver;
use gito::data::*;
use gito::graph::PointCloud;
use gito::GitoError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_sample(seed: u64, inputs: &[usize], n_q: usize, c_out: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vals = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect() };
    let clouds = inputs
        .iter()
        .map(|&c| PointCloud::with_values(2, vals(2 * 7), c, vals(7 * c)).unwrap())
        .collect();
    let queries = PointCloud::new(2, vals(2 * n_q)).unwrap();
    Sample::new(clouds, queries, vals(n_q * c_out), c_out).unwrap()
}

/// Max error of the oracle against `u = sin(pi x) sin(pi y)`.
fn manufactured_error(intervals: usize) -> f64 {
    let s = PoissonSolver::new(intervals).unwrap();
    let u = s.solve(|x, y| 2.0 * PI * PI * (PI * x).sin() * (PI * y).sin());
    let m = s.interior();
    (0..m * m)
        .map(|k| {
            let (x, y) = s.node(k % m, k / m);
            (u[k] - (PI * x).sin() * (PI * y).sin()).abs()
        })
        .fold(0.0, f64::max)
}

#[test]
fn oracle_matches_analytic_solution_at_center() {
    let s = PoissonSolver::new(128).unwrap();
    let u = s.solve(|x, y| 2.0 * PI * PI * (PI * x).sin() * (PI * y).sin());
    let m = s.interior();
    // Node (63, 63) sits at (0.5, 0.5).
    assert_eq!(s.node(63, 63), (0.5, 0.5));
    assert!((u[63 + m * 63] - 1.0).abs() < 0.01);
}

#[test]
fn oracle_converges_at_second_order() {
    let errs: Vec<f64> = [16, 32, 64].iter().map(|&n| manufactured_error(n)).collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!((3.6..4.4).contains(&ratio), "ratio {ratio}");
    }
}

#[test]
fn oracle_second_order_on_a_mixed_mode() {
    // u = sin(pi x) sin(2 pi y), so -lap u = 5 pi^2 u.
    let u_exact = |x: f64, y: f64| (PI * x).sin() * (2.0 * PI * y).sin();
    let err = |n: usize| {
        let s = PoissonSolver::new(n).unwrap();
        let u = s.solve(|x, y| 5.0 * PI * PI * u_exact(x, y));
        let m = s.interior();
        (0..m * m)
            .map(|k| {
                let (x, y) = s.node(k % m, k / m);
                (u[k] - u_exact(x, y)).abs()
            })
            .fold(0.0, f64::max)
    };
    let ratio = err(16) / err(32);
    assert!((3.6..4.4).contains(&ratio), "ratio {ratio}");
}

#[test]
fn zero_forcing_gives_zero_solution() {
    let s = PoissonSolver::new(32).unwrap();
    assert!(s.solve(|_, _| 0.0).iter().all(|&u| u == 0.0));
}

#[test]
fn generated_samples_match_the_oracle() {
    let spec = PoissonSpec {
        n_samples: 3,
        n_points: 32,
        seed: 5,
        grid: 32,
    };
    let samples = generate_poisson_samples(&spec).unwrap();
    let solver = PoissonSolver::new(32).unwrap();
    for (i, s) in samples.iter().enumerate() {
        assert_eq!(s.inputs.len(), 1);
        assert_eq!((s.inputs[0].len(), s.n_queries()), (32, 32));
        let forcing = poisson_forcing(5, i);
        assert!((1..=3).contains(&forcing.bumps.len()));
        for (p, v) in s.inputs[0].values().unwrap().iter().enumerate() {
            let c = s.inputs[0].point(p);
            assert_eq!(*v, forcing.eval(c[0], c[1]));
        }
        let u = solver.solve(|x, y| forcing.eval(x, y));
        let m = solver.interior();
        for q in 0..s.n_queries() {
            let c = s.queries.point(q);
            let (ix, iy) = ((c[0] * 32.0).round() as usize - 1, (c[1] * 32.0).round() as usize - 1);
            assert_eq!(s.targets[q], u[ix + m * iy]);
        }
    }
    // Regeneration is deterministic and the denser query set nests the native one.
    assert_eq!(generate_poisson_samples(&spec).unwrap(), samples);
    let dense = poisson_sample(&solver, &spec, 1, 4).unwrap();
    assert_eq!(dense.n_queries(), 128);
    assert_eq!(&dense.queries.coords()[..64], samples[1].queries.coords());
    assert_eq!(dense.inputs, samples[1].inputs);
}

#[test]
fn too_few_points_is_an_error() {
    let spec = PoissonSpec {
        n_points: 8,
        ..PoissonSpec::default()
    };
    let solver = PoissonSolver::new(16).unwrap();
    assert!(poisson_sample(&solver, &spec, 0, 1).is_err());
}

#[test]
fn gits_round_trip_is_exact_for_f32_values() {
    let s = random_sample(1, &[1, 3], 5, 2);
    let back = decode_sample(&encode_sample(&s)).unwrap();
    assert_eq!(back.out_channels, 2);
    let narrow = |xs: &[f64]| xs.iter().map(|&x| x as f32 as f64).collect::<Vec<_>>();
    assert_eq!(back.targets, narrow(&s.targets));
    assert_eq!(back.queries.coords(), narrow(s.queries.coords()));
    assert_eq!(back.inputs[1].values().unwrap(), narrow(s.inputs[1].values().unwrap()));
    // A second round trip is bit-exact.
    assert_eq!(encode_sample(&back), encode_sample(&s));
}

#[test]
fn malformed_samples_report_byte_offsets() {
    let bytes = encode_sample(&random_sample(2, &[1], 4, 1));
    let offset = |b: &[u8]| match decode_sample(b) {
        Err(GitoError::Malformed { offset, .. }) => offset,
        other => panic!("expected malformed, got {other:?}"),
    };
    let mut bad = bytes.clone();
    bad[1] = b'X';
    assert_eq!(offset(&bad), 0);
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert_eq!(offset(&bad), 4);
    assert_eq!(offset(&bytes[..30]), 28);
    let mut long = bytes.clone();
    long.push(0);
    assert_eq!(offset(&long), bytes.len() as u64);
}

#[test]
fn schemas_declare_reference_layouts() {
    let ns = Schema::named("ns").unwrap();
    assert_eq!(ns.out_channels, 3);
    assert_eq!(ns.channel_names, ["u", "v", "p"]);
    assert_eq!(Schema::named("heat").unwrap().input_functions(), 5);
    assert_eq!(Schema::named("airfoil").unwrap().points_per_sample, Some(11_271));
    assert!(Schema::named("nope").is_err());

    let s = random_sample(3, &[1], 4, 1);
    assert!(Schema::named("poisson").unwrap().check(&s).is_ok());
    assert!(matches!(ns.check(&s), Err(GitoError::ChannelMismatch(_))));
    assert!(matches!(Schema::named("airfoil").unwrap().check(&s), Err(GitoError::ChannelMismatch(_))));
}

#[test]
fn normalization_round_trip_and_constant_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let data: Vec<f64> = (0..300).map(|_| rng.gen_range(-50.0..80.0)).collect();
    let st = ChannelStats::fit(3, [&data[..]]);
    let back = st.denormalize(&st.normalize(&data));
    assert!(data.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-12));
    let normed = st.normalize(&data);
    for c in 0..3 {
        let col: Vec<f64> = normed.iter().skip(c).step_by(3).copied().collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        assert!(mean.abs() < 1e-12);
    }

    let constant = vec![7.5; 20];
    let st = ChannelStats::fit(1, [&constant[..]]);
    assert_eq!(st.std, [1.0]);
    assert!(st.normalize(&constant).iter().all(|&x| x == 0.0));

    let pred: Vec<f64> = (0..12).map(|i| i as f64).collect();
    let stats = NormStats::identity(2, &[1], 3);
    assert_eq!(denormalize(&pred, &stats), pred);
}

#[test]
fn split_is_deterministic_and_stats_come_from_train_only() {
    let samples: Vec<Sample> = (0..20).map(|i| random_sample(10 + i, &[1], 6, 1)).collect();
    let (a_train, a_test) = split_indices(20, 5, 9);
    let (b_train, b_test) = split_indices(20, 5, 9);
    assert_eq!((&a_train, &a_test), (&b_train, &b_test));
    assert_eq!(a_test.len(), 5);
    let mut all: Vec<usize> = a_train.iter().chain(&a_test).copied().collect();
    all.sort();
    assert_eq!(all, (0..20).collect::<Vec<_>>());
    assert_ne!(split_indices(20, 5, 10).1, a_test);

    let ds = Dataset::new(Schema::named("poisson").unwrap(), samples.clone(), 5, 9).unwrap();
    let train: Vec<&Sample> = ds.train_samples().collect();
    assert_eq!(train.len(), 15);
    assert_eq!(ds.stats, NormStats::fit(&train).unwrap());
    let all_refs: Vec<&Sample> = samples.iter().collect();
    assert_ne!(ds.stats, NormStats::fit(&all_refs).unwrap());

    // Test samples are normalized with the train statistics, unchanged.
    let t = ds.test_samples().next().unwrap();
    let n = normalize(t, &ds.stats).unwrap();
    assert_eq!(n.targets, ds.stats.targets.normalize(&t.targets));
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = PoissonSpec {
        n_samples: 6,
        n_points: 16,
        seed: 3,
        grid: 16,
    };
    let samples = generate_poisson_samples(&spec).unwrap();
    let manifest = poisson_manifest(&spec, 2).unwrap();
    save_dataset(dir.path(), &manifest, &samples).unwrap();
    let ds = load_dataset(dir.path(), Some("poisson")).unwrap();
    assert_eq!(ds.samples.len(), 6);
    assert_eq!(ds.test.len(), 2);
    let text = std::fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
    let parsed = Manifest::parse(&text).unwrap();
    assert_eq!(poisson_spec_from_manifest(&parsed), Some(spec));

    assert!(matches!(load_dataset(dir.path(), Some("ns")), Err(GitoError::ChannelMismatch(_))));

    // A manifest line without `=` fails with its byte offset.
    std::fs::write(dir.path().join(MANIFEST), "schema=poisson\ngarbage\n").unwrap();
    assert!(matches!(
        load_dataset(dir.path(), None),
        Err(GitoError::Malformed { offset: 15, .. })
    ));
    std::fs::write(dir.path().join(MANIFEST), "schema=poisson\noutput_channels=3\n").unwrap();
    assert!(matches!(load_dataset(dir.path(), None), Err(GitoError::ChannelMismatch(_))));
}
