//! Samples, datasets, the `GITS` sample format, normalization statistics
//! and the synthetic Poisson generator.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{parse_kv, ByteReader};
use crate::error::{GitoError, Result};
use crate::graph::PointCloud;

pub mod poisson;

pub use poisson::PoissonSolver;

/// One record: input functions, query locations and physical targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub inputs: Vec<PointCloud>,
    pub queries: PointCloud,
    /// Row-major `[n_queries, out_channels]`.
    pub targets: Vec<f64>,
    pub out_channels: usize,
}

impl Sample {
    pub fn new(inputs: Vec<PointCloud>, queries: PointCloud, targets: Vec<f64>, out_channels: usize) -> Result<Self> {
        if out_channels == 0 || targets.len() != queries.len() * out_channels {
            return Err(GitoError::ChannelMismatch(format!(
                "{} target values for {} queries x {out_channels} channels",
                targets.len(),
                queries.len()
            )));
        }
        if let Some(bad) = inputs.iter().find(|c| c.values().is_none() || c.dim() != queries.dim()) {
            return Err(GitoError::InvalidArgument(format!(
                "input function needs values and dimension {} (got dim {})",
                queries.dim(),
                bad.dim()
            )));
        }
        Ok(Sample {
            inputs,
            queries,
            targets,
            out_channels,
        })
    }

    pub fn n_queries(&self) -> usize {
        self.queries.len()
    }
}

/// Declared layout of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Schema {
    pub name: String,
    pub coord_dim: usize,
    pub input_channels: Vec<usize>,
    pub out_channels: usize,
    pub channel_names: Vec<String>,
    /// Required query count per sample, if fixed by the mesh.
    pub points_per_sample: Option<usize>,
}

impl Schema {
    /// Built-in schemas: `ns`, `heat`, `airfoil`, `poisson`.
    pub fn named(name: &str) -> Result<Self> {
        let s = |inputs: Vec<usize>, names: &[&str], pts: Option<usize>| Schema {
            name: name.to_string(),
            coord_dim: 2,
            input_channels: inputs,
            out_channels: names.len(),
            channel_names: names.iter().map(|n| n.to_string()).collect(),
            points_per_sample: pts,
        };
        Ok(match name {
            "ns" => s(vec![1], &["u", "v", "p"], None),
            "heat" => s(vec![1; 5], &["T"], None),
            "airfoil" => s(vec![1], &["M"], Some(221 * 51)),
            "poisson" => s(vec![1], &["u"], None),
            other => return Err(GitoError::Config(format!("unknown schema {other:?}"))),
        })
    }

    pub fn input_functions(&self) -> usize {
        self.input_channels.len()
    }

    pub fn check(&self, sample: &Sample) -> Result<()> {
        if sample.inputs.len() != self.input_functions() {
            return Err(GitoError::ChannelMismatch(format!(
                "schema {} expects {} input functions, sample has {}",
                self.name,
                self.input_functions(),
                sample.inputs.len()
            )));
        }
        for (i, (c, &want)) in sample.inputs.iter().zip(&self.input_channels).enumerate() {
            if c.channels() != want {
                return Err(GitoError::ChannelMismatch(format!(
                    "input function {i} has {} channels, schema {} expects {want}",
                    c.channels(),
                    self.name
                )));
            }
        }
        if sample.out_channels != self.out_channels {
            return Err(GitoError::ChannelMismatch(format!(
                "sample has {} output channels, schema {} expects {}",
                sample.out_channels, self.name, self.out_channels
            )));
        }
        if sample.queries.dim() != self.coord_dim {
            return Err(GitoError::ChannelMismatch(format!(
                "coordinate dimension {} vs schema {}",
                sample.queries.dim(),
                self.coord_dim
            )));
        }
        if let Some(n) = self.points_per_sample {
            if sample.n_queries() != n {
                return Err(GitoError::ChannelMismatch(format!(
                    "schema {} expects {n} points per sample, got {}",
                    self.name,
                    sample.n_queries()
                )));
            }
        }
        Ok(())
    }
}

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        ChannelStats {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Fits over row-major blocks of `channels` columns. Channels with zero
    /// spread get std 1 and a warning on stderr.
    pub fn fit<'a>(channels: usize, blocks: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        let blocks: Vec<&[f64]> = blocks.into_iter().collect();
        for b in &blocks {
            for row in b.chunks_exact(channels) {
                n += 1;
                for (s, &x) in sum.iter_mut().zip(row) {
                    *s += x;
                }
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        for b in &blocks {
            for row in b.chunks_exact(channels) {
                for (c, &x) in row.iter().enumerate() {
                    sq[c] += (x - mean[c]).powi(2);
                }
            }
        }
        let std = sq
            .iter()
            .enumerate()
            .map(|(c, s)| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 && sd.is_finite() {
                    sd
                } else {
                    eprintln!("warning: channel {c} has zero spread; std clamped to 1");
                    1.0
                }
            })
            .collect();
        ChannelStats { mean, std }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, data: &[f64]) -> Vec<f64> {
        let c = self.channels();
        data.iter()
            .enumerate()
            .map(|(i, &x)| (x - self.mean[i % c]) / self.std[i % c])
            .collect()
    }

    pub fn denormalize(&self, data: &[f64]) -> Vec<f64> {
        let c = self.channels();
        data.iter()
            .enumerate()
            .map(|(i, &x)| x * self.std[i % c] + self.mean[i % c])
            .collect()
    }
}

/// Statistics for coordinates, each input function and the targets.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub coords: ChannelStats,
    pub inputs: Vec<ChannelStats>,
    pub targets: ChannelStats,
}

impl NormStats {
    pub fn identity(coord_dim: usize, input_channels: &[usize], out_channels: usize) -> Self {
        NormStats {
            coords: ChannelStats::identity(coord_dim),
            inputs: input_channels.iter().map(|&c| ChannelStats::identity(c)).collect(),
            targets: ChannelStats::identity(out_channels),
        }
    }

    /// Fits on `samples`; coordinates pool query and input points.
    pub fn fit(samples: &[&Sample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| GitoError::InvalidArgument("cannot fit statistics on zero samples".into()))?;
        let d = first.queries.dim();
        let coords = ChannelStats::fit(
            d,
            samples.iter().flat_map(|s| {
                std::iter::once(s.queries.coords()).chain(s.inputs.iter().map(|c| c.coords()))
            }),
        );
        let inputs = (0..first.inputs.len())
            .map(|i| {
                let c = first.inputs[i].channels();
                ChannelStats::fit(c, samples.iter().map(|s| s.inputs[i].values().unwrap_or(&[])))
            })
            .collect();
        let targets = ChannelStats::fit(first.out_channels, samples.iter().map(|s| s.targets.as_slice()));
        Ok(NormStats {
            coords,
            inputs,
            targets,
        })
    }
}

/// Normalized copy of a sample (coordinates, input values and targets).
pub fn normalize(sample: &Sample, stats: &NormStats) -> Result<Sample> {
    let d = sample.queries.dim();
    let inputs = sample
        .inputs
        .iter()
        .zip(&stats.inputs)
        .map(|(c, s)| {
            PointCloud::with_values(
                d,
                stats.coords.normalize(c.coords()),
                c.channels(),
                s.normalize(c.values().unwrap_or(&[])),
            )
        })
        .collect::<Result<_>>()?;
    let queries = PointCloud::new(d, stats.coords.normalize(sample.queries.coords()))?;
    Sample::new(inputs, queries, stats.targets.normalize(&sample.targets), sample.out_channels)
}

/// Maps normalized `[n, c_out]` predictions back to physical units.
pub fn denormalize(predictions: &[f64], stats: &NormStats) -> Vec<f64> {
    stats.targets.denormalize(predictions)
}

/// Samples plus a seeded train/test split and train-split statistics.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub schema: Schema,
    pub samples: Vec<Sample>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub stats: NormStats,
}

impl Dataset {
    /// Splits with a seeded shuffle and fits statistics on the train part.
    pub fn new(schema: Schema, samples: Vec<Sample>, n_test: usize, split_seed: u64) -> Result<Self> {
        for s in &samples {
            schema.check(s)?;
        }
        if n_test >= samples.len() {
            return Err(GitoError::InvalidArgument(format!(
                "test split of {n_test} leaves no training samples out of {}",
                samples.len()
            )));
        }
        let (train, test) = split_indices(samples.len(), n_test, split_seed);
        let stats = NormStats::fit(&train.iter().map(|&i| &samples[i]).collect::<Vec<_>>())?;
        Ok(Dataset {
            schema,
            samples,
            train,
            test,
            stats,
        })
    }

    pub fn train_samples(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().map(|&i| &self.samples[i])
    }

    pub fn test_samples(&self) -> impl Iterator<Item = &Sample> {
        self.test.iter().map(|&i| &self.samples[i])
    }
}

/// Seeded shuffle; the last `n_test` shuffled indices form the test split.
pub fn split_indices(n: usize, n_test: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(n - n_test.min(n));
    (idx, test)
}

// ---- GITS sample files ------------------------------------------------------

pub const SAMPLE_MAGIC: &[u8; 4] = b"GITS";
pub const SAMPLE_VERSION: u32 = 1;

/// Encodes a sample: magic, version, coord dim, input count, per-input
/// (points, channels), query count, output channels, then f32 arrays in
/// order: per input coords and values, query coords, targets.
pub fn encode_sample(s: &Sample) -> Vec<u8> {
    let mut out = Vec::new();
    let u32le = |out: &mut Vec<u8>, x: usize| out.extend_from_slice(&(x as u32).to_le_bytes());
    out.extend_from_slice(SAMPLE_MAGIC);
    u32le(&mut out, SAMPLE_VERSION as usize);
    u32le(&mut out, s.queries.dim());
    u32le(&mut out, s.inputs.len());
    for c in &s.inputs {
        u32le(&mut out, c.len());
        u32le(&mut out, c.channels());
    }
    u32le(&mut out, s.n_queries());
    u32le(&mut out, s.out_channels);
    let mut f32s = |xs: &[f64]| {
        for &x in xs {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    };
    for c in &s.inputs {
        f32s(c.coords());
        f32s(c.values().unwrap_or(&[]));
    }
    f32s(s.queries.coords());
    f32s(&s.targets);
    out
}

pub fn decode_sample(bytes: &[u8]) -> Result<Sample> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != SAMPLE_MAGIC {
        return Err(r.malformed_at(0, "bad magic, expected GITS"));
    }
    let v = r.u32()?;
    if v != SAMPLE_VERSION {
        return Err(r.malformed_at(4, &format!("unsupported sample version {v}")));
    }
    let at = r.pos();
    let d = r.u32()? as usize;
    if !(1..=3).contains(&d) {
        return Err(r.malformed_at(at, &format!("coordinate dimension {d}")));
    }
    let n_inputs = r.u32()? as usize;
    let mut shapes = Vec::with_capacity(n_inputs.min(64));
    for _ in 0..n_inputs {
        let at = r.pos();
        let (n, c) = (r.u32()? as usize, r.u32()? as usize);
        if n == 0 || c == 0 {
            return Err(r.malformed_at(at, "input function with zero points or channels"));
        }
        shapes.push((n, c));
    }
    let at = r.pos();
    let nq = r.u32()? as usize;
    let c_out = r.u32()? as usize;
    if nq == 0 || c_out == 0 {
        return Err(r.malformed_at(at, "zero queries or output channels"));
    }
    let mut inputs = Vec::with_capacity(n_inputs);
    for (n, c) in shapes {
        let at = r.pos();
        let coords = r.f32s(n * d)?;
        let values = r.f32s(n * c)?;
        inputs.push(PointCloud::with_values(d, coords, c, values).map_err(|e| r.malformed_at(at, &e.to_string()))?);
    }
    let at = r.pos();
    let queries = PointCloud::new(d, r.f32s(nq * d)?).map_err(|e| r.malformed_at(at, &e.to_string()))?;
    let targets = r.f32s(nq * c_out)?;
    if r.remaining() != 0 {
        return Err(r.malformed_at(r.pos(), "trailing bytes after sample"));
    }
    Sample::new(inputs, queries, targets, c_out)
}

/// Reads one sample file; malformed errors carry the byte offset and path.
pub fn read_sample(path: &Path) -> Result<Sample> {
    decode_sample(&fs::read(path)?).map_err(|e| match e {
        GitoError::Malformed { offset, msg } => GitoError::Malformed {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        e => e,
    })
}

pub fn write_sample(path: &Path, s: &Sample) -> Result<()> {
    fs::write(path, encode_sample(s))?;
    Ok(())
}

pub const MANIFEST: &str = "manifest.txt";

/// Dataset directory description stored in `manifest.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub schema: Schema,
    pub files: Vec<String>,
    pub n_test: usize,
    pub split_seed: u64,
    /// Free-form provenance such as generator settings.
    pub extra: Vec<(String, String)>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let s = &self.schema;
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut t = String::new();
        let _ = writeln!(t, "schema={}", s.name);
        let _ = writeln!(t, "coord_dim={}", s.coord_dim);
        let _ = writeln!(t, "input_channels={}", join(&s.input_channels));
        let _ = writeln!(t, "output_channels={}", s.out_channels);
        let _ = writeln!(t, "channel_names={}", s.channel_names.join(","));
        let _ = writeln!(t, "test={}", self.n_test);
        let _ = writeln!(t, "split_seed={}", self.split_seed);
        for (k, v) in &self.extra {
            let _ = writeln!(t, "{k}={v}");
        }
        for f in &self.files {
            let _ = writeln!(t, "file={f}");
        }
        t
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut schema: Option<Schema> = None;
        let mut files = Vec::new();
        let mut n_test = 0;
        let mut split_seed = 0;
        let mut extra = Vec::new();
        let mut declared: Vec<(String, String, usize)> = Vec::new();
        for (k, v, off) in parse_kv(text)? {
            let bad = |msg: String| GitoError::Malformed {
                offset: off as u64,
                msg,
            };
            match k.as_str() {
                "schema" => schema = Some(Schema::named(&v).map_err(|e| bad(e.to_string()))?),
                "file" => files.push(v),
                "test" => n_test = v.parse().map_err(|_| bad(format!("bad test count {v:?}")))?,
                "split_seed" => split_seed = v.parse().map_err(|_| bad(format!("bad split seed {v:?}")))?,
                "coord_dim" | "input_channels" | "output_channels" | "channel_names" => declared.push((k, v, off)),
                _ => extra.push((k, v)),
            }
        }
        let mut schema = schema.ok_or(GitoError::Malformed {
            offset: 0,
            msg: "manifest has no schema line".into(),
        })?;
        // Declared layout must agree with the named schema, except for
        // channel widths which the ns/heat/airfoil archives may widen.
        for (k, v, off) in declared {
            let bad = |msg: String| GitoError::Malformed {
                offset: off as u64,
                msg,
            };
            let nums = || -> Result<Vec<usize>> {
                v.split(',')
                    .map(|x| x.trim().parse().map_err(|_| bad(format!("bad number list {v:?}"))))
                    .collect()
            };
            match k.as_str() {
                "coord_dim" => schema.coord_dim = nums()?[0],
                "input_channels" => {
                    let c = nums()?;
                    if c.len() != schema.input_functions() {
                        return Err(GitoError::ChannelMismatch(format!(
                            "manifest lists {} input functions, schema {} has {}",
                            c.len(),
                            schema.name,
                            schema.input_functions()
                        )));
                    }
                    schema.input_channels = c;
                }
                "output_channels" => {
                    let c = nums()?[0];
                    if c != schema.out_channels {
                        return Err(GitoError::ChannelMismatch(format!(
                            "manifest declares {c} output channels, schema {} has {}",
                            schema.name, schema.out_channels
                        )));
                    }
                }
                _ => schema.channel_names = v.split(',').map(|s| s.trim().to_string()).collect(),
            }
        }
        Ok(Manifest {
            schema,
            files,
            n_test,
            split_seed,
            extra,
        })
    }
}

/// Loads every sample listed in `dir/manifest.txt`. `schema`, when given,
/// must match the manifest's.
pub fn load_dataset(dir: &Path, schema: Option<&str>) -> Result<Dataset> {
    let manifest = Manifest::parse(&fs::read_to_string(dir.join(MANIFEST))?)?;
    if let Some(name) = schema {
        if name != manifest.schema.name {
            return Err(GitoError::ChannelMismatch(format!(
                "requested schema {name}, manifest declares {}",
                manifest.schema.name
            )));
        }
    }
    let paths: Vec<PathBuf> = manifest.files.iter().map(|f| dir.join(f)).collect();
    let samples = paths.par_iter().map(|p| read_sample(p)).collect::<Result<Vec<_>>>()?;
    Dataset::new(manifest.schema, samples, manifest.n_test, manifest.split_seed)
}

/// Writes samples and a manifest into `dir` (created if missing).
pub fn save_dataset(dir: &Path, manifest_base: &Manifest, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let files: Vec<String> = (0..samples.len()).map(|i| format!("sample_{i:05}.gits")).collect();
    for (f, s) in files.iter().zip(samples) {
        write_sample(&dir.join(f), s)?;
    }
    let manifest = Manifest {
        files,
        ..manifest_base.clone()
    };
    fs::write(dir.join(MANIFEST), manifest.to_text())?;
    Ok(())
}

// ---- Poisson generator -------------------------------------------------------

/// Settings for the synthetic Poisson task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoissonSpec {
    pub n_samples: usize,
    pub n_points: usize,
    pub seed: u64,
    /// Oracle grid intervals per side.
    pub grid: usize,
}

impl Default for PoissonSpec {
    fn default() -> Self {
        PoissonSpec {
            n_samples: 240,
            n_points: 256,
            seed: 0,
            grid: 128,
        }
    }
}

/// Forcing term: a sum of Gaussian bumps.
#[derive(Clone, Debug, PartialEq)]
pub struct Forcing {
    /// `(cx, cy, sigma, amplitude)` per bump.
    pub bumps: Vec<[f64; 4]>,
}

impl Forcing {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.bumps
            .iter()
            .map(|&[cx, cy, s, a]| a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp())
            .sum()
    }
}

const STREAM_FORCING: u64 = 0;
const STREAM_INPUTS: u64 = 1;
const STREAM_QUERIES: u64 = 2;

/// Independent per-sample random stream keyed by `(seed, sample, purpose)`.
pub fn sample_rng(seed: u64, sample: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((sample as u64) << 4) | stream);
    rng
}

pub fn poisson_forcing(seed: u64, sample: usize) -> Forcing {
    let mut rng = sample_rng(seed, sample, STREAM_FORCING);
    let n = rng.gen_range(1..=3);
    let bumps = (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            [
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.1..0.2),
                sign * rng.gen_range(50.0..150.0),
            ]
        })
        .collect();
    Forcing { bumps }
}

/// Builds sample `index` with `query_factor * n_points` queries. The first
/// `n_points` queries do not depend on `query_factor`.
pub fn poisson_sample(
    solver: &PoissonSolver,
    spec: &PoissonSpec,
    index: usize,
    query_factor: usize,
) -> Result<Sample> {
    if spec.n_points < 16 {
        return Err(GitoError::InvalidArgument(format!(
            "n_points must be at least 16, got {}",
            spec.n_points
        )));
    }
    let forcing = poisson_forcing(spec.seed, index);
    let u = solver.solve(|x, y| forcing.eval(x, y));
    let m = solver.interior();
    let n_q = spec.n_points * query_factor.max(1);
    if n_q > m * m {
        return Err(GitoError::InvalidArgument(format!(
            "{n_q} queries exceed the {} interior grid nodes",
            m * m
        )));
    }

    let mut rng = sample_rng(spec.seed, index, STREAM_INPUTS);
    let mut in_coords = Vec::with_capacity(2 * spec.n_points);
    let mut in_vals = Vec::with_capacity(spec.n_points);
    for _ in 0..spec.n_points {
        let (x, y): (f64, f64) = (rng.gen(), rng.gen());
        in_coords.extend([x, y]);
        in_vals.push(forcing.eval(x, y));
    }

    // Partial Fisher-Yates over interior nodes: prefixes are nested.
    let mut rng = sample_rng(spec.seed, index, STREAM_QUERIES);
    let mut nodes: Vec<usize> = (0..m * m).collect();
    for i in 0..n_q {
        let j = rng.gen_range(i..nodes.len());
        nodes.swap(i, j);
    }
    let h = solver.spacing();
    let mut q_coords = Vec::with_capacity(2 * n_q);
    let mut targets = Vec::with_capacity(n_q);
    for &node in &nodes[..n_q] {
        let (i, j) = (node % m, node / m);
        q_coords.extend([(i + 1) as f64 * h, (j + 1) as f64 * h]);
        targets.push(u[node]);
    }
    Sample::new(
        vec![PointCloud::with_values(2, in_coords, 1, in_vals)?],
        PointCloud::new(2, q_coords)?,
        targets,
        1,
    )
}

/// Generates `spec.n_samples` Poisson samples in parallel.
pub fn generate_poisson_samples(spec: &PoissonSpec) -> Result<Vec<Sample>> {
    let solver = PoissonSolver::new(spec.grid)?;
    (0..spec.n_samples)
        .into_par_iter()
        .map(|i| poisson_sample(&solver, spec, i, 1))
        .collect()
}

/// Generated Poisson dataset; the last `n_test` samples of a seeded shuffle
/// form the test split.
pub fn generate_poisson_dataset(spec: &PoissonSpec, n_test: usize) -> Result<Dataset> {
    let samples = generate_poisson_samples(spec)?;
    Dataset::new(Schema::named("poisson")?, samples, n_test, spec.seed)
}

/// Manifest for a generated Poisson dataset.
pub fn poisson_manifest(spec: &PoissonSpec, n_test: usize) -> Result<Manifest> {
    Ok(Manifest {
        schema: Schema::named("poisson")?,
        files: Vec::new(),
        n_test,
        split_seed: spec.seed,
        extra: vec![
            ("generator".into(), "poisson".into()),
            ("points".into(), spec.n_points.to_string()),
            ("seed".into(), spec.seed.to_string()),
            ("grid".into(), spec.grid.to_string()),
        ],
    })
}

/// Reads generator settings back from a manifest written by `gen-data`.
pub fn poisson_spec_from_manifest(m: &Manifest) -> Option<PoissonSpec> {
    let get = |k: &str| m.extra.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
    if get("generator")? != "poisson" {
        return None;
    }
    Some(PoissonSpec {
        n_samples: m.files.len(),
        n_points: get("points")?.parse().ok()?,
        seed: get("seed")?.parse().ok()?,
        grid: get("grid")?.parse().ok()?,
    })
}
