use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gito::check::layer_checks;
use gito::checkpoint::Checkpoint;
use gito::config::RunConfig;
use gito::data::poisson::PoissonSolver;
use gito::data::*;
use gito::graph::{graph_stats, GraphStrategy};
use gito::model::{Gito, ModelConfig};
use gito::train::*;
use gito::{GitoError, Precision, Real, Result};

#[derive(Parser)]
#[command(name = "gito", version, about = "Graph-informed transformer neural operator")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run config: `key=value` lines of model and training settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for model init, shuffling and data generation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Extra `key=value` config overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Clone)]
struct GraphFlags {
    #[arg(long, value_enum)]
    strategy: Option<Strategy>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    radius: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Knn,
    Radius,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a `last.ckpt` written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        graph: GraphFlags,
    },
    /// Print per-channel relative L2 of a model or of stored predictions.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "predictions")]
        model: Option<PathBuf>,
        /// Dataset directory whose targets are predictions for `--data`.
        #[arg(long, conflicts_with = "model")]
        predictions: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Also score on this many times more query points (generated data only).
        #[arg(long)]
        query_factor: Option<usize>,
    },
    /// Write predictions as a dataset of GITS files.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic Poisson dataset.
    GenData {
        #[arg(long, default_value_t = 240)]
        samples: usize,
        #[arg(long, default_value_t = 256)]
        points: usize,
        /// Oracle grid intervals per side.
        #[arg(long, default_value_t = 128)]
        grid: usize,
        /// Samples held out for testing (default: one sixth).
        #[arg(long)]
        test: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize query graphs of a dataset.
    GraphStats {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        graph: GraphFlags,
    },
    /// Finite-difference gradient checks of every layer.
    GradCheck,
    /// Compare fusion and graph variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated: fusion, no_fusion, knn:K, radius:R.
        #[arg(long, value_delimiter = ',', default_value = "fusion,no_fusion")]
        variant: Vec<String>,
        /// Train each variant with the configured budget.
        #[arg(long)]
        train: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error: kind={} msg={msg}", e.kind());
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| GitoError::InvalidArgument(e.to_string()))?;
    }
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::Train {
            data,
            out: dir,
            resume,
            graph,
        } => {
            let cfg = run_config(&cli.global, Some(&graph))?;
            let ds = load_dataset(&data, None)?;
            let opts = TrainOptions {
                out_dir: Some(dir),
                resume_from: resume,
                stop_after: None,
            };
            let report = match cfg.model.precision {
                Precision::F32 => train_new::<f32>(&cfg, &ds, &opts, &mut out)?,
                Precision::F64 => train_new::<f64>(&cfg, &ds, &opts, &mut out)?,
            };
            writeln!(
                out,
                "best_test_rel_l2={} best_epoch={} steps={}",
                report.best_test_rel_l2, report.best_epoch, report.steps
            )?;
        }
        Command::Eval {
            data,
            model,
            predictions,
            split,
            query_factor,
        } => {
            let ds = load_dataset(&data, None)?;
            let picked = select(&ds, split);
            let samples: Vec<&Sample> = picked.iter().map(|&i| &ds.samples[i]).collect();
            let score = match (&model, &predictions) {
                (_, Some(p)) => {
                    let preds = load_dataset(p, None)?;
                    let rows: Vec<&[f64]> = picked
                        .iter()
                        .map(|&i| {
                            preds
                                .samples
                                .get(i)
                                .map(|s| s.targets.as_slice())
                                .ok_or_else(|| GitoError::ChannelMismatch(format!("predictions lack sample {i}")))
                        })
                        .collect::<Result<_>>()?;
                    evaluate_predictions(&rows, &samples)?
                }
                (Some(m), None) => match load_model(m)? {
                    AnyModel::F32(m) => evaluate(&m, &samples)?,
                    AnyModel::F64(m) => evaluate(&m, &samples)?,
                },
                (None, None) => return Err(GitoError::InvalidArgument("eval needs --model or --predictions".into())),
            };
            for (name, v) in ds.schema.channel_names.iter().zip(&score.per_channel) {
                writeln!(out, "channel={name} rel_l2={v:?}")?;
            }
            writeln!(out, "mean_rel_l2={:?}", score.mean)?;
            if let Some(factor) = query_factor {
                let m = model
                    .as_ref()
                    .ok_or_else(|| GitoError::InvalidArgument("--query-factor needs --model".into()))?;
                let (native, up, finite) = match load_model(m)? {
                    AnyModel::F32(m) => super_resolution(&m, &data, &picked, factor)?,
                    AnyModel::F64(m) => super_resolution(&m, &data, &picked, factor)?,
                };
                writeln!(out, "query_factor={factor} native_rel_l2={native:?} upsampled_rel_l2={up:?} finite={finite}")?;
            }
        }
        Command::Predict { model, data, out: dir } => {
            let ds = load_dataset(&data, None)?;
            let manifest = Manifest::parse(&std::fs::read_to_string(data.join(MANIFEST))?)?;
            let preds = match load_model(&model)? {
                AnyModel::F32(m) => predict_all(&m, &ds)?,
                AnyModel::F64(m) => predict_all(&m, &ds)?,
            };
            save_dataset(&dir, &manifest, &preds)?;
            writeln!(out, "wrote={} dir={}", preds.len(), dir.display())?;
        }
        Command::GenData {
            samples,
            points,
            grid,
            test,
            out: dir,
        } => {
            let spec = PoissonSpec {
                n_samples: samples,
                n_points: points,
                seed: cli.global.seed.unwrap_or(0),
                grid,
            };
            let n_test = test.unwrap_or(samples / 6);
            let data = generate_poisson_samples(&spec)?;
            save_dataset(&dir, &poisson_manifest(&spec, n_test)?, &data)?;
            writeln!(out, "samples={samples} points={points} grid={grid} test={n_test} dir={}", dir.display())?;
        }
        Command::GraphStats { data, graph } => {
            let cfg = run_config(&cli.global, Some(&graph))?;
            let strategy = cfg.model.query_graph;
            let ds = load_dataset(&data, None)?;
            let (mut nodes, mut edges, mut isolated) = (0, 0, 0);
            let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
            for s in &ds.samples {
                let st = graph_stats(&strategy.build(&s.queries)?);
                nodes += st.nodes;
                edges += st.edges;
                isolated += st.isolated;
                for (d, c) in st.degree_histogram {
                    *hist.entry(d).or_default() += c;
                }
            }
            let mean_degree = if nodes > 0 { edges as f64 / nodes as f64 } else { 0.0 };
            writeln!(
                out,
                "{} query graphs with strategy {strategy}: {nodes} nodes, {edges} edges, {isolated} isolated",
                ds.samples.len()
            )?;
            let h: Vec<String> = hist.iter().map(|(d, c)| format!("{d}:{c}")).collect();
            writeln!(out, "strategy={strategy}")?;
            writeln!(out, "samples={}", ds.samples.len())?;
            writeln!(out, "nodes={nodes}")?;
            writeln!(out, "edges={edges}")?;
            writeln!(out, "isolated={isolated}")?;
            writeln!(out, "mean_in_degree={mean_degree}")?;
            writeln!(out, "degree_histogram={}", h.join(","))?;
        }
        Command::GradCheck => {
            let cfg = run_config(&cli.global, None)?;
            let seed = cli.global.seed.unwrap_or(1);
            let checks = layer_checks(&cfg.model, seed)?;
            for c in &checks {
                writeln!(out, "{c}")?;
            }
            let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
            if !failed.is_empty() {
                return Err(GitoError::InvalidArgument(format!("gradient checks failed: {}", failed.join(","))));
            }
        }
        Command::Ablate { data, variant, train } => {
            let cfg = run_config(&cli.global, None)?;
            let variants = variant.iter().map(|v| Variant::parse(v)).collect::<Result<Vec<_>>>()?;
            let ds = load_dataset(&data, None)?;
            let seed = cfg.train.seed;
            let rows = match cfg.model.precision {
                Precision::F32 => ablation_harness::<f32>(&variants, &cfg.model, &ds, &cfg.train, train, seed)?,
                Precision::F64 => ablation_harness::<f64>(&variants, &cfg.model, &ds, &cfg.train, train, seed)?,
            };
            for r in rows {
                writeln!(out, "{r}")?;
            }
        }
    }
    Ok(())
}

/// Config file, then `--set` pairs, then dedicated flags.
fn run_config(g: &Global, graph: Option<&GraphFlags>) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let pairs = g
        .set
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| GitoError::Config(format!("--set expects KEY=VALUE, got {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    cfg.apply(&pairs)?;
    if let Some(seed) = g.seed {
        cfg.train.seed = seed;
    }
    if let Some(strategy) = graph.map(graph_strategy).transpose()?.flatten() {
        cfg.model.query_graph = strategy;
        cfg.model.input_graph = strategy;
    }
    cfg.model.validate()?;
    Ok(cfg)
}

fn graph_strategy(f: &GraphFlags) -> Result<Option<GraphStrategy>> {
    let s = match (f.strategy, f.k, f.radius) {
        (None, None, None) => return Ok(None),
        (Some(Strategy::Knn) | None, Some(k), None) => format!("knn:{k}"),
        (Some(Strategy::Radius) | None, None, Some(r)) => format!("radius:{r}"),
        (Some(Strategy::Knn), None, _) => return Err(GitoError::Config("--strategy knn needs --k".into())),
        (Some(Strategy::Radius), _, None) => return Err(GitoError::Config("--strategy radius needs --radius".into())),
        _ => return Err(GitoError::Config("--k and --radius are mutually exclusive".into())),
    };
    GraphStrategy::parse(&s).map(Some)
}

fn train_new<T: Real>(cfg: &RunConfig, ds: &Dataset, opts: &TrainOptions, out: &mut dyn Write) -> Result<TrainReport> {
    let mut model = Gito::<T>::new(cfg.model.clone(), cfg.train.seed)?;
    train(&mut model, ds, &cfg.train, opts, out)
}

enum AnyModel {
    F32(Gito<f32>),
    F64(Gito<f64>),
}

fn load_model(path: &Path) -> Result<AnyModel> {
    let ck = Checkpoint::load(path)?;
    Ok(match ModelConfig::parse(&ck.metadata)?.precision {
        Precision::F32 => AnyModel::F32(Gito::from_checkpoint(&ck)?),
        Precision::F64 => AnyModel::F64(Gito::from_checkpoint(&ck)?),
    })
}

fn select(ds: &Dataset, split: Split) -> Vec<usize> {
    match split {
        Split::Train => ds.train.clone(),
        Split::Test => ds.test.clone(),
        Split::All => (0..ds.samples.len()).collect(),
    }
}

fn predict_all<T: Real>(model: &Gito<T>, ds: &Dataset) -> Result<Vec<Sample>> {
    ds.samples
        .iter()
        .map(|s| {
            let pred = model.predict(s)?;
            Sample::new(s.inputs.clone(), s.queries.clone(), pred, s.out_channels)
        })
        .collect()
}

/// Mean native and upsampled errors over `indices` of a generated dataset.
fn super_resolution<T: Real>(model: &Gito<T>, dir: &Path, indices: &[usize], factor: usize) -> Result<(f64, f64, bool)> {
    let manifest = Manifest::parse(&std::fs::read_to_string(dir.join(MANIFEST))?)?;
    let spec = poisson_spec_from_manifest(&manifest)
        .ok_or_else(|| GitoError::InvalidArgument("--query-factor needs a dataset written by gen-data".into()))?;
    let solver = PoissonSolver::new(spec.grid)?;
    let (mut native, mut up, mut finite) = (0.0, 0.0, true);
    for &i in indices {
        let r = evaluate_super_resolution(model, &solver, &spec, i, factor)?;
        native += r.native;
        up += r.upsampled;
        finite &= r.all_finite;
    }
    let n = indices.len().max(1) as f64;
    Ok((native / n, up / n, finite))
}
