//! Relative-L2 loss and metric, OneCycle schedule, AdamW, the training loop
//! and the super-resolution and ablation harnesses.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Var;
use crate::checkpoint::Checkpoint;
use crate::data::{poisson_sample, Dataset, PoissonSolver, PoissonSpec, Sample};
use crate::error::{GitoError, Result};
use crate::graph::GraphStrategy;
use crate::model::{Gito, ModelConfig, Prepared};
use crate::nn::Forward;
use crate::tensor::{Real, Tensor};

/// Per-channel relative L2 errors and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct RelL2 {
    pub per_channel: Vec<f64>,
    pub mean: f64,
}

/// `||pred_c - truth_c|| / ||truth_c||` for each of `channels` columns.
pub fn relative_l2(pred: &[f64], truth: &[f64], channels: usize) -> Result<RelL2> {
    if channels == 0 || pred.len() != truth.len() || truth.len() % channels != 0 {
        return Err(GitoError::shape("relative_l2", &[pred.len()], &[truth.len(), channels]));
    }
    let mut num = vec![0.0; channels];
    let mut den = vec![0.0; channels];
    for (i, (p, t)) in pred.iter().zip(truth).enumerate() {
        num[i % channels] += (p - t) * (p - t);
        den[i % channels] += t * t;
    }
    let per_channel = num
        .iter()
        .zip(&den)
        .enumerate()
        .map(|(c, (n, d))| {
            if *d > 0.0 {
                Ok((n / d).sqrt())
            } else {
                Err(GitoError::ZeroNormChannel(c))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = per_channel.iter().sum::<f64>() / channels as f64;
    Ok(RelL2 { per_channel, mean })
}

/// Mean per-channel relative L2 of `pred: [n, c]` against constant targets,
/// recorded on the tape.
pub fn relative_l2_loss<T: Real>(f: &mut Forward<'_, T>, pred: Var, targets: &[f64], channels: usize) -> Result<Var> {
    let n = targets.len() / channels.max(1);
    let mut norms = vec![0.0; channels];
    for (i, t) in targets.iter().enumerate() {
        norms[i % channels] += t * t;
    }
    if let Some(c) = norms.iter().position(|&x| x <= 0.0) {
        return Err(GitoError::ZeroNormChannel(c));
    }
    let truth = f.matrix(n, channels, targets)?;
    let inv = f
        .tape
        .constant(&[channels], norms.iter().map(|x| T::of(1.0 / x.sqrt())).collect())?;
    let diff = f.tape.sub(pred, truth)?;
    let sq = f.tape.mul(diff, diff)?;
    let col = f.tape.sum_rows(sq);
    let norm = f.tape.sqrt(col);
    let rel = f.tape.mul(norm, inv)?;
    Ok(f.tape.mean(rel))
}

/// OneCycle schedule with cosine warm-up and cosine decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OneCycle {
    pub max_lr: f64,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        OneCycle {
            max_lr: 1e-3,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }
}

fn cosine(start: f64, end: f64, pct: f64) -> f64 {
    let c = (PI * pct).cos();
    start * (1.0 + c) / 2.0 + end * (1.0 - c) / 2.0
}

impl OneCycle {
    pub fn lr(&self, step: usize, total_steps: usize) -> f64 {
        let init = self.max_lr / self.div_factor;
        let last = self.max_lr / self.final_div_factor;
        let up = self.pct_start * total_steps as f64;
        let s = step.min(total_steps) as f64;
        if s <= up {
            if up == 0.0 {
                return self.max_lr;
            }
            cosine(init, self.max_lr, s / up)
        } else {
            cosine(self.max_lr, last, (s - up) / (total_steps as f64 - up))
        }
    }
}

/// Free-function form of [`OneCycle::lr`].
pub fn onecycle_lr(step: usize, total_steps: usize, cfg: &OneCycle) -> f64 {
    cfg.lr(step, total_steps)
}

/// Decoupled-weight-decay Adam over a flat parameter layout.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Real>(model: &Gito<T>, weight_decay: f64) -> Self {
        let sizes: Vec<usize> = model.params.iter().map(|(_, t)| t.numel()).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update with gradient `grad` laid out like `ParamSet::flat_grad`.
    pub fn update<T: Real>(&mut self, model: &mut Gito<T>, grad: &[f64], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut off = 0;
        for (k, t) in model.params.tensors_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad[off + i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mut x = p.f64();
                x -= lr * self.weight_decay * x;
                x -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                *p = T::of(x);
            }
            off += m.len();
        }
    }
}

/// Rescales `grad` to global norm `max_norm` when larger; returns the
/// norm before clipping. Direction is preserved.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Optimization settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: OneCycle,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Epochs between resumable state checkpoints.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 4,
            schedule: OneCycle::default(),
            weight_decay: 1e-5,
            grad_clip_norm: 1.0,
            seed: 0,
            checkpoint_interval: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        let bad = self.epochs == 0
            || self.batch_size == 0
            || self.checkpoint_interval == 0
            || !(s.max_lr > 0.0)
            || !(s.div_factor > 0.0)
            || !(s.final_div_factor > 0.0)
            || !(self.weight_decay >= 0.0)
            || !(self.grad_clip_norm > 0.0)
            || !(s.pct_start > 0.0 && s.pct_start < 1.0);
        if bad {
            return Err(GitoError::Config(format!("invalid training config {self:?}")));
        }
        Ok(())
    }

    /// Applies `key=value` overrides (`epochs`, `batch_size`, `max_lr`,
    /// `weight_decay`, `pct_start`, `div_factor`, `final_div_factor`,
    /// `grad_clip_norm`, `seed`, `checkpoint_interval`).
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            let f = || -> Result<f64> {
                v.parse().map_err(|_| GitoError::Config(format!("{k}: expected a number, got {v:?}")))
            };
            let u = || -> Result<usize> {
                v.parse().map_err(|_| GitoError::Config(format!("{k}: expected an integer, got {v:?}")))
            };
            match k.as_str() {
                "epochs" => self.epochs = u()?,
                "batch_size" => self.batch_size = u()?,
                "max_lr" => self.schedule.max_lr = f()?,
                "pct_start" => self.schedule.pct_start = f()?,
                "div_factor" => self.schedule.div_factor = f()?,
                "final_div_factor" => self.schedule.final_div_factor = f()?,
                "weight_decay" => self.weight_decay = f()?,
                "grad_clip_norm" => self.grad_clip_norm = f()?,
                "seed" => self.seed = u()? as u64,
                "checkpoint_interval" => self.checkpoint_interval = u()?,
                other => return Err(GitoError::Config(format!("unknown training key {other:?}"))),
            }
        }
        self.validate()
    }
}

/// One metric-log line.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricEntry {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_rel_l2: f64,
    pub per_channel: Vec<f64>,
}

impl fmt::Display for MetricEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pc: Vec<String> = self.per_channel.iter().map(|x| x.to_string()).collect();
        write!(
            f,
            "epoch={} step={} lr={} train_loss={} test_rel_l2={} per_channel={}",
            self.epoch,
            self.step,
            self.lr,
            self.train_loss,
            self.test_rel_l2,
            pc.join(",")
        )
    }
}

/// Where and how a run persists state.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for `best.ckpt`, `last.ckpt` and `metrics.log`.
    pub out_dir: Option<PathBuf>,
    /// Resumable state written by an earlier run with the same config.
    pub resume_from: Option<PathBuf>,
    /// Stop (after checkpointing) once this many epochs are complete.
    pub stop_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<MetricEntry>,
    pub best_test_rel_l2: f64,
    pub best_epoch: usize,
    pub steps: usize,
}

struct Resume {
    epoch: usize,
    step: usize,
    best: f64,
    best_epoch: usize,
}

/// Mean relative L2 of `model` over `prepared` samples: per channel the
/// average over samples, then the mean over channels.
pub fn evaluate_prepared<T: Real>(model: &Gito<T>, prepared: &[Prepared]) -> Result<RelL2> {
    let per: Vec<RelL2> = prepared
        .par_iter()
        .map(|p| relative_l2(&model.predict_prepared(p)?, &p.targets, p.out_channels))
        .collect::<Result<_>>()?;
    average(&per)
}

fn average(per: &[RelL2]) -> Result<RelL2> {
    let first = per
        .first()
        .ok_or_else(|| GitoError::InvalidArgument("evaluation over zero samples".into()))?;
    let c = first.per_channel.len();
    let per_channel: Vec<f64> = (0..c)
        .map(|k| per.iter().map(|r| r.per_channel[k]).sum::<f64>() / per.len() as f64)
        .collect();
    let mean = per_channel.iter().sum::<f64>() / c as f64;
    Ok(RelL2 { per_channel, mean })
}

/// Evaluates on raw samples.
pub fn evaluate<T: Real>(model: &Gito<T>, samples: &[&Sample]) -> Result<RelL2> {
    let prepared = samples
        .par_iter()
        .map(|s| model.prepare(s))
        .collect::<Result<Vec<_>>>()?;
    evaluate_prepared(model, &prepared)
}

/// Scores stored predictions: `predictions[i]` against `samples[i].targets`.
pub fn evaluate_predictions(predictions: &[&[f64]], samples: &[&Sample]) -> Result<RelL2> {
    if predictions.len() != samples.len() {
        return Err(GitoError::shape("evaluate_predictions", &[predictions.len()], &[samples.len()]));
    }
    let per = predictions
        .iter()
        .zip(samples)
        .map(|(p, s)| relative_l2(p, &s.targets, s.out_channels))
        .collect::<Result<Vec<_>>>()?;
    average(&per)
}

/// Loss and flat parameter gradient for one sample.
pub fn sample_gradient<T: Real>(model: &Gito<T>, p: &Prepared) -> Result<(f64, Vec<f64>)> {
    let mut f = Forward::new(&model.params);
    let pred = model.forward(&mut f, p)?;
    let loss = relative_l2_loss(&mut f, pred, &p.targets, p.out_channels)?;
    let value = f.tape.value(loss)[0].f64();
    let grads = f.tape.backward(loss)?;
    let offsets = param_offsets(model);
    let mut flat = vec![T::zero(); model.param_count()];
    grads.accumulate_flat(&model.params, &offsets, &mut flat);
    Ok((value, flat.iter().map(|x| x.f64()).collect()))
}

fn param_offsets<T: Real>(model: &Gito<T>) -> Vec<usize> {
    let mut off = 0;
    model
        .params
        .iter()
        .map(|(_, t)| {
            let o = off;
            off += t.numel();
            o
        })
        .collect()
}

fn epoch_order(seed: u64, epoch: usize, train: &[usize]) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    order
}

fn state_checkpoint<T: Real>(model: &Gito<T>, opt: &AdamW, r: &Resume) -> Checkpoint {
    let mut ck = model.to_checkpoint();
    for ((name, t), (m, v)) in model.params.iter().zip(opt.m.iter().zip(&opt.v)) {
        ck.push(format!("adam.m.{name}"), &Tensor::new(t.shape(), m.clone()).expect("same shape"));
        ck.push(format!("adam.v.{name}"), &Tensor::new(t.shape(), v.clone()).expect("same shape"));
    }
    let state = vec![r.epoch as f64, r.step as f64, opt.step as f64, r.best, r.best_epoch as f64];
    ck.push("train.state", &Tensor::new(&[5], state).expect("non-empty"));
    ck
}

fn restore<T: Real>(ck: &Checkpoint, model: &mut Gito<T>, opt: &mut AdamW) -> Result<Resume> {
    let loaded = Gito::<T>::from_checkpoint(ck)?;
    if loaded.config != model.config {
        return Err(GitoError::Config("resume checkpoint was written for a different model config".into()));
    }
    *model = loaded;
    for (k, (name, _)) in model.params.iter().enumerate() {
        let get = |p: &str| {
            ck.get(&format!("adam.{p}.{name}"))
                .map(|t| t.data().to_vec())
                .ok_or_else(|| GitoError::Config(format!("resume checkpoint lacks adam.{p}.{name}")))
        };
        opt.m[k] = get("m")?;
        opt.v[k] = get("v")?;
    }
    let s = ck
        .get("train.state")
        .ok_or_else(|| GitoError::Config("resume checkpoint lacks train.state".into()))?
        .data();
    opt.step = s[2] as u64;
    Ok(Resume {
        epoch: s[0] as usize,
        step: s[1] as usize,
        best: s[3],
        best_epoch: s[4] as usize,
    })
}

/// Keeps glibc from returning large tape buffers to the OS after every
/// sample; the mmap/munmap churn otherwise costs about a third of a step.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        use std::sync::Once;
        static ONCE: Once = Once::new();
        ONCE.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TOP_PAD, 64 << 20);
        });
    }
}

/// Trains `model` on `dataset`. The model adopts the dataset's statistics.
/// Metric lines go to `log` (and `metrics.log` in the output directory).
pub fn train<T: Real>(
    model: &mut Gito<T>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    opts: &TrainOptions,
    log: &mut dyn Write,
) -> Result<TrainReport> {
    cfg.validate()?;
    tune_allocator();
    model.set_stats(dataset.stats.clone())?;
    let mut opt = AdamW::new(model, cfg.weight_decay);
    let mut state = Resume {
        epoch: 0,
        step: 0,
        best: f64::INFINITY,
        best_epoch: 0,
    };
    if let Some(path) = &opts.resume_from {
        state = restore(&Checkpoint::load(path)?, model, &mut opt)?;
        if model.stats != dataset.stats {
            return Err(GitoError::Config("resume checkpoint statistics differ from the dataset's".into()));
        }
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let train_p = dataset
        .train
        .par_iter()
        .map(|&i| model.prepare(&dataset.samples[i]))
        .collect::<Result<Vec<_>>>()?;
    let test_p = dataset
        .test
        .par_iter()
        .map(|&i| model.prepare(&dataset.samples[i]))
        .collect::<Result<Vec<_>>>()?;
    let steps_per_epoch = train_p.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut metrics_file = match &opts.out_dir {
        Some(dir) => Some(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("metrics.log"))?,
        ),
        None => None,
    };
    let mut entries = Vec::new();

    for epoch in state.epoch..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, &dataset.train);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, Vec<f64>)> = batch
                .par_iter()
                .map(|&i| sample_gradient(model, &train_p[i]))
                .collect::<Result<_>>()?;
            let mut grad = vec![0.0; model.param_count()];
            let mut batch_loss = 0.0;
            // Reduce in batch order so results do not depend on scheduling.
            for (loss, g) in &results {
                batch_loss += loss;
                for (a, b) in grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                if let Some(dir) = &opts.out_dir {
                    model.save(&dir.join("last_good.ckpt"))?;
                }
                return Err(GitoError::NonFiniteLoss {
                    epoch: epoch + 1,
                    step: state.step,
                });
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            clip_grad_norm(&mut grad, cfg.grad_clip_norm);
            lr = cfg.schedule.lr(state.step, total_steps);
            opt.update(model, &grad, lr);
            state.step += 1;
            loss_sum += batch_loss;
        }
        let test = evaluate_prepared(model, &test_p)?;
        let entry = MetricEntry {
            epoch: epoch + 1,
            step: state.step,
            lr,
            train_loss: loss_sum / train_p.len() as f64,
            test_rel_l2: test.mean,
            per_channel: test.per_channel,
        };
        writeln!(log, "{entry}")?;
        if let Some(f) = metrics_file.as_mut() {
            writeln!(f, "{entry}")?;
        }
        state.epoch = epoch + 1;
        if entry.test_rel_l2 < state.best {
            state.best = entry.test_rel_l2;
            state.best_epoch = epoch + 1;
            if let Some(dir) = &opts.out_dir {
                model.save(&dir.join("best.ckpt"))?;
            }
        }
        entries.push(entry);
        let stopping = opts.stop_after == Some(state.epoch);
        if let Some(dir) = &opts.out_dir {
            if state.epoch % cfg.checkpoint_interval == 0 || state.epoch == cfg.epochs || stopping {
                state_checkpoint(model, &opt, &state).save(&dir.join("last.ckpt"), T::PRECISION)?;
            }
        }
        if stopping {
            break;
        }
    }
    Ok(TrainReport {
        log: entries,
        best_test_rel_l2: state.best,
        best_epoch: state.best_epoch,
        steps: state.step,
    })
}

/// Native and upsampled errors on one Poisson sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperResolution {
    pub native: f64,
    pub upsampled: f64,
    pub all_finite: bool,
}

/// Evaluates Poisson sample `index` at its native query count and at
/// `query_factor` times as many queries (the native set is a subset).
pub fn evaluate_super_resolution<T: Real>(
    model: &Gito<T>,
    solver: &PoissonSolver,
    spec: &PoissonSpec,
    index: usize,
    query_factor: usize,
) -> Result<SuperResolution> {
    let native = poisson_sample(solver, spec, index, 1)?;
    let dense = poisson_sample(solver, spec, index, query_factor)?;
    let pn = model.predict(&native)?;
    let pd = model.predict(&dense)?;
    Ok(SuperResolution {
        native: relative_l2(&pn, &native.targets, 1)?.mean,
        upsampled: relative_l2(&pd, &dense.targets, 1)?.mean,
        all_finite: pd.iter().all(|x| x.is_finite()),
    })
}

/// Ablation variants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variant {
    Fusion,
    /// Sum-and-MLP blocks at twice the hidden width.
    NoFusion,
    Graph(GraphStrategy),
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fusion" => Ok(Variant::Fusion),
            "no_fusion" | "no-fusion" => Ok(Variant::NoFusion),
            other => GraphStrategy::parse(other)
                .map(Variant::Graph)
                .map_err(|_| GitoError::Config(format!("unknown variant {other:?}"))),
        }
    }

    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match *self {
            Variant::Fusion => c.fusion = true,
            Variant::NoFusion => {
                c.fusion = false;
                c.hidden_size *= 2;
                c.mlp_hidden *= 2;
            }
            Variant::Graph(g) => {
                c.query_graph = g;
                c.input_graph = g;
            }
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Fusion => write!(f, "fusion"),
            Variant::NoFusion => write!(f, "no_fusion"),
            Variant::Graph(g) => write!(f, "{g}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub params: usize,
    /// Query-graph edges summed over every sample in the dataset.
    pub edges: usize,
    pub test_rel_l2: f64,
}

impl fmt::Display for AblationRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "variant={} params={} edges={} test_rel_l2={}",
            self.variant, self.params, self.edges, self.test_rel_l2
        )
    }
}

/// Trains every variant from the same seed and budget. With
/// `train_variants = false` only parameter and edge counts are reported.
pub fn ablation_harness<T: Real>(
    variants: &[Variant],
    base: &ModelConfig,
    dataset: &Dataset,
    cfg: &TrainConfig,
    train_variants: bool,
    model_seed: u64,
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|v| {
            let config = v.apply(base);
            let mut model = Gito::<T>::new(config.clone(), model_seed)?;
            let edges = dataset
                .samples
                .iter()
                .map(|s| config.query_graph.build(&s.queries).map(|t| t.n_edges()))
                .sum::<Result<usize>>()?;
            let test_rel_l2 = if train_variants {
                let mut sink = std::io::sink();
                train(&mut model, dataset, cfg, &TrainOptions::default(), &mut sink)?.best_test_rel_l2
            } else {
                f64::NAN
            };
            Ok(AblationRow {
                variant: *v,
                params: model.param_count(),
                edges,
                test_rel_l2,
            })
        })
        .collect()
}

/// Reads a metric log back into entries.
pub fn parse_metric_log(text: &str) -> Result<Vec<MetricEntry>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let mut e = MetricEntry {
                epoch: 0,
                step: 0,
                lr: 0.0,
                train_loss: 0.0,
                test_rel_l2: 0.0,
                per_channel: Vec::new(),
            };
            for tok in line.split_whitespace() {
                let (k, v) = tok
                    .split_once('=')
                    .ok_or_else(|| GitoError::InvalidArgument(format!("bad metric token {tok:?}")))?;
                let num = |v: &str| {
                    v.parse::<f64>()
                        .map_err(|_| GitoError::InvalidArgument(format!("bad metric value {v:?}")))
                };
                match k {
                    "epoch" => e.epoch = num(v)? as usize,
                    "step" => e.step = num(v)? as usize,
                    "lr" => e.lr = num(v)?,
                    "train_loss" => e.train_loss = num(v)?,
                    "test_rel_l2" => e.test_rel_l2 = num(v)?,
                    "per_channel" => e.per_channel = v.split(',').map(num).collect::<Result<_>>()?,
                    _ => {}
                }
            }
            Ok(e)
        })
        .collect()
}

/// Default output file names inside a training directory.
pub fn best_checkpoint(dir: &Path) -> PathBuf {
    dir.join("best.ckpt")
}
