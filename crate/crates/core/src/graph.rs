//! Spatial graphs over point clouds and their node/edge features.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{GitoError, Result};

/// Point coordinates with optional per-point field values, both row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    dim: usize,
    coords: Vec<f64>,
    channels: usize,
    values: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        Self::build(dim, coords, None)
    }

    pub fn with_values(dim: usize, coords: Vec<f64>, channels: usize, values: Vec<f64>) -> Result<Self> {
        Self::build(dim, coords, Some((channels, values)))
    }

    fn build(dim: usize, coords: Vec<f64>, values: Option<(usize, Vec<f64>)>) -> Result<Self> {
        if !(2..=3).contains(&dim) {
            return Err(GitoError::InvalidArgument(format!(
                "point dimension must be 2 or 3, got {dim}"
            )));
        }
        if coords.is_empty() || coords.len() % dim != 0 {
            return Err(GitoError::InvalidArgument(format!(
                "{} coordinates do not form whole {dim}-d points",
                coords.len()
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(GitoError::InvalidArgument("non-finite coordinate".into()));
        }
        let n = coords.len() / dim;
        let (channels, values) = match values {
            Some((c, v)) => {
                if c == 0 || v.len() != n * c {
                    return Err(GitoError::InvalidArgument(format!(
                        "{} values for {n} points with {c} channels",
                        v.len()
                    )));
                }
                (c, Some(v))
            }
            None => (0, None),
        };
        Ok(PointCloud {
            dim,
            coords,
            channels,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> Option<&[f64]> {
        self.values.as_deref()
    }

    pub fn value(&self, i: usize) -> Option<&[f64]> {
        self.values
            .as_ref()
            .map(|v| &v[i * self.channels..(i + 1) * self.channels])
    }

    /// Same cloud with every point moved by `offset`.
    pub fn translated(&self, offset: &[f64]) -> Self {
        let mut out = self.clone();
        for (i, c) in out.coords.iter_mut().enumerate() {
            *c += offset[i % self.dim];
        }
        out
    }

    /// Subset of points in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let coords = idx.iter().flat_map(|&i| self.point(i).to_vec()).collect();
        let values = self
            .values
            .as_ref()
            .map(|_| idx.iter().flat_map(|&i| self.value(i).unwrap().to_vec()).collect());
        PointCloud {
            dim: self.dim,
            coords,
            channels: self.channels,
            values,
        }
    }

    fn dist2(&self, i: usize, j: usize) -> f64 {
        self.point(i)
            .iter()
            .zip(self.point(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// Neighbor-selection rule for graph construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GraphStrategy {
    Knn(usize),
    Radius(f64),
}

impl GraphStrategy {
    pub fn build(self, cloud: &PointCloud) -> Result<Topology> {
        match self {
            GraphStrategy::Knn(k) => build_knn_graph(cloud, k),
            GraphStrategy::Radius(r) => build_radius_graph(cloud, r),
        }
    }

    /// Parses `knn:<k>`, `knn{<k>}`, `radius:<r>` or `radius{<r>}`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, arg) = s
            .split_once(':')
            .or_else(|| s.strip_suffix('}').and_then(|t| t.split_once('{')))
            .ok_or_else(|| GitoError::Config(format!("bad graph strategy `{s}`")))?;
        let bad = || GitoError::Config(format!("bad graph strategy `{s}`"));
        match name {
            "knn" => {
                let k: usize = arg.parse().map_err(|_| bad())?;
                if k == 0 {
                    return Err(bad());
                }
                Ok(GraphStrategy::Knn(k))
            }
            "radius" => {
                let r: f64 = arg.parse().map_err(|_| bad())?;
                if !(r > 0.0 && r.is_finite()) {
                    return Err(bad());
                }
                Ok(GraphStrategy::Radius(r))
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for GraphStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphStrategy::Knn(k) => write!(f, "knn:{k}"),
            GraphStrategy::Radius(r) => write!(f, "radius:{r}"),
        }
    }
}

/// Directed edge list. Messages flow from `senders[e]` to `receivers[e]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    n_nodes: usize,
    senders: Arc<[usize]>,
    receivers: Arc<[usize]>,
}

impl Topology {
    pub fn new(n_nodes: usize, senders: Vec<usize>, receivers: Vec<usize>) -> Result<Self> {
        if senders.len() != receivers.len() {
            return Err(GitoError::shape("topology", &[senders.len()], &[receivers.len()]));
        }
        for (&s, &r) in senders.iter().zip(&receivers) {
            if s >= n_nodes || r >= n_nodes {
                return Err(GitoError::InvalidArgument(format!(
                    "edge {s}->{r} out of range for {n_nodes} nodes"
                )));
            }
            if s == r {
                return Err(GitoError::InvalidArgument(format!("self edge at node {s}")));
            }
        }
        Ok(Topology {
            n_nodes,
            senders: senders.into(),
            receivers: receivers.into(),
        })
    }

    pub fn empty(n_nodes: usize) -> Self {
        Topology {
            n_nodes,
            senders: Arc::from(Vec::new()),
            receivers: Arc::from(Vec::new()),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.senders.len()
    }

    pub fn senders(&self) -> &Arc<[usize]> {
        &self.senders
    }

    pub fn receivers(&self) -> &Arc<[usize]> {
        &self.receivers
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.senders.iter().copied().zip(self.receivers.iter().copied())
    }

    /// Relabels nodes: old node `i` becomes `perm[i]`. Edge order is kept.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Topology {
            n_nodes: self.n_nodes,
            senders: self.senders.iter().map(|&s| perm[s]).collect(),
            receivers: self.receivers.iter().map(|&r| perm[r]).collect(),
        }
    }

    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_nodes];
        for &r in self.receivers.iter() {
            deg[r] += 1;
        }
        deg
    }

    fn degrees(&self) -> Vec<usize> {
        let mut deg = self.in_degrees();
        for &s in self.senders.iter() {
            deg[s] += 1;
        }
        deg
    }
}

/// Topology plus per-node and per-edge feature matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialGraph {
    pub topology: Topology,
    pub node_features: Vec<f64>,
    pub node_dim: usize,
    pub edge_features: Vec<f64>,
    pub edge_dim: usize,
}

impl SpatialGraph {
    pub fn from_cloud(cloud: &PointCloud, strategy: GraphStrategy) -> Result<Self> {
        let topology = strategy.build(cloud)?;
        let (node_features, edge_features) = compute_features(&topology, cloud)?;
        Ok(SpatialGraph {
            node_dim: node_feature_dim(cloud),
            edge_dim: edge_feature_dim(cloud),
            topology,
            node_features,
            edge_features,
        })
    }
}

// Grid accelerator kicks in above this many points. Results are identical to
// the exhaustive scan; only the candidate enumeration changes.
const GRID_THRESHOLD: usize = 2_000;

/// Uniform bucket grid over the bounding box.
struct Buckets {
    dim: usize,
    lo: Vec<f64>,
    cell: f64,
    res: Vec<usize>,
    cells: BTreeMap<Vec<usize>, Vec<usize>>,
}

impl Buckets {
    fn new(cloud: &PointCloud, target_per_cell: f64) -> Self {
        let dim = cloud.dim();
        let n = cloud.len();
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for i in 0..n {
            for (d, &x) in cloud.point(i).iter().enumerate() {
                lo[d] = lo[d].min(x);
                hi[d] = hi[d].max(x);
            }
        }
        let extent: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| (h - l).max(1e-12)).collect();
        let volume: f64 = extent.iter().product();
        let cells_wanted = (n as f64 / target_per_cell).max(1.0);
        let cell = (volume / cells_wanted).powf(1.0 / dim as f64).max(1e-12);
        Self::with_cell(cloud, lo, &extent, cell)
    }

    fn with_cell(cloud: &PointCloud, lo: Vec<f64>, extent: &[f64], cell: f64) -> Self {
        let dim = cloud.dim();
        let res: Vec<usize> = extent.iter().map(|e| ((e / cell).floor() as usize) + 1).collect();
        let mut b = Buckets {
            dim,
            lo,
            cell,
            res,
            cells: BTreeMap::new(),
        };
        for i in 0..cloud.len() {
            let key = b.key(cloud.point(i));
            b.cells.entry(key).or_default().push(i);
        }
        b
    }

    fn key(&self, p: &[f64]) -> Vec<usize> {
        (0..self.dim)
            .map(|d| (((p[d] - self.lo[d]) / self.cell).floor().max(0.0) as usize).min(self.res[d] - 1))
            .collect()
    }

    /// Points in cells within `ring` cells (Chebyshev) of `p`'s cell.
    fn visit_ring(&self, p: &[f64], ring: usize, mut f: impl FnMut(usize)) {
        let center = self.key(p);
        let mut cursor = vec![0isize; self.dim];
        let r = ring as isize;
        cursor.iter_mut().for_each(|c| *c = -r);
        loop {
            let on_shell = cursor.iter().any(|&c| c.abs() == r);
            if on_shell || ring == 0 {
                let key: Option<Vec<usize>> = (0..self.dim)
                    .map(|d| {
                        let k = center[d] as isize + cursor[d];
                        (k >= 0 && (k as usize) < self.res[d]).then_some(k as usize)
                    })
                    .collect();
                if let Some(pts) = key.and_then(|k| self.cells.get(&k)) {
                    pts.iter().copied().for_each(&mut f);
                }
            }
            let mut d = 0;
            loop {
                if d == self.dim {
                    return;
                }
                cursor[d] += 1;
                if cursor[d] > r {
                    cursor[d] = -r;
                    d += 1;
                } else {
                    break;
                }
            }
        }
    }

    fn max_ring(&self) -> usize {
        self.res.iter().copied().max().unwrap_or(1)
    }
}

/// Orders candidate neighbors by distance, then by index.
fn closer(a: (f64, usize), b: (f64, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

fn knn_of(cloud: &PointCloud, i: usize, k: usize) -> Vec<usize> {
    let mut cand: Vec<(f64, usize)> = (0..cloud.len())
        .filter(|&j| j != i)
        .map(|j| (cloud.dist2(i, j), j))
        .collect();
    cand.select_nth_unstable_by(k - 1, |a, b| closer(*a, *b));
    cand.truncate(k);
    cand.sort_by(|a, b| closer(*a, *b));
    cand.into_iter().map(|(_, j)| j).collect()
}

fn knn_of_bucketed(cloud: &PointCloud, buckets: &Buckets, i: usize, k: usize) -> Vec<usize> {
    let p = cloud.point(i);
    let mut cand: Vec<(f64, usize)> = Vec::new();
    let mut ring = 0;
    loop {
        buckets.visit_ring(p, ring, |j| {
            if j != i {
                cand.push((cloud.dist2(i, j), j));
            }
        });
        // Every point outside rings 0..=ring is farther than ring * cell.
        if cand.len() >= k {
            cand.sort_by(|a, b| closer(*a, *b));
            let kth = cand[k - 1].0;
            let safe = ring as f64 * buckets.cell;
            if kth < safe * safe || ring >= buckets.max_ring() {
                // Strict inequality keeps distance ties inside the scanned set.
                break;
            }
        }
        if ring >= buckets.max_ring() {
            break;
        }
        ring += 1;
    }
    cand.sort_by(|a, b| closer(*a, *b));
    cand.truncate(k);
    cand.into_iter().map(|(_, j)| j).collect()
}

/// Receiver-centric KNN graph: node `i` receives one edge from each of its
/// `k` nearest other nodes, ties broken by lower index. Exactly `N * k` edges.
pub fn build_knn_graph(cloud: &PointCloud, k: usize) -> Result<Topology> {
    let n = cloud.len();
    if k == 0 || k >= n {
        return Err(GitoError::InvalidArgument(format!(
            "knn requires 0 < k < N, got k={k}, N={n}"
        )));
    }
    let buckets = (n > GRID_THRESHOLD).then(|| Buckets::new(cloud, (k as f64).max(4.0)));
    let mut senders = Vec::with_capacity(n * k);
    let mut receivers = Vec::with_capacity(n * k);
    for i in 0..n {
        let nbrs = match &buckets {
            Some(b) => knn_of_bucketed(cloud, b, i, k),
            None => knn_of(cloud, i, k),
        };
        for j in nbrs {
            senders.push(j);
            receivers.push(i);
        }
    }
    Ok(Topology {
        n_nodes: n,
        senders: senders.into(),
        receivers: receivers.into(),
    })
}

/// Symmetric radius graph: `(i, j)` is an edge iff `0 < |x_i - x_j| <= r`.
/// Coincident points are not connected; isolated nodes are allowed.
pub fn build_radius_graph(cloud: &PointCloud, r: f64) -> Result<Topology> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(GitoError::InvalidArgument(format!("radius must be positive, got {r}")));
    }
    let n = cloud.len();
    let r2 = r * r;
    let mut senders = Vec::new();
    let mut receivers = Vec::new();
    let mut push_row = |i: usize, nbrs: &mut Vec<usize>| {
        nbrs.sort_unstable();
        for &j in nbrs.iter() {
            senders.push(j);
            receivers.push(i);
        }
    };
    if n > GRID_THRESHOLD {
        let extent: Vec<f64> = {
            let b = Buckets::new(cloud, 4.0);
            b.res.iter().map(|&c| c as f64 * b.cell).collect()
        };
        let lo = (0..cloud.dim())
            .map(|d| (0..n).map(|i| cloud.point(i)[d]).fold(f64::INFINITY, f64::min))
            .collect();
        let b = Buckets::with_cell(cloud, lo, &extent, r);
        for i in 0..n {
            let mut nbrs = Vec::new();
            b.visit_ring(cloud.point(i), 0, |j| {
                let d2 = cloud.dist2(i, j);
                if j != i && d2 > 0.0 && d2 <= r2 {
                    nbrs.push(j);
                }
            });
            b.visit_ring(cloud.point(i), 1, |j| {
                let d2 = cloud.dist2(i, j);
                if j != i && d2 > 0.0 && d2 <= r2 {
                    nbrs.push(j);
                }
            });
            push_row(i, &mut nbrs);
        }
    } else {
        for i in 0..n {
            let mut nbrs: Vec<usize> = (0..n)
                .filter(|&j| {
                    let d2 = cloud.dist2(i, j);
                    j != i && d2 > 0.0 && d2 <= r2
                })
                .collect();
            push_row(i, &mut nbrs);
        }
    }
    Ok(Topology {
        n_nodes: n,
        senders: senders.into(),
        receivers: receivers.into(),
    })
}

pub fn node_feature_dim(cloud: &PointCloud) -> usize {
    cloud.dim() + cloud.channels()
}

pub fn edge_feature_dim(cloud: &PointCloud) -> usize {
    cloud.dim() + 1 + cloud.channels()
}

/// Node rows `[x_i]` or `[x_i, u_i]`; edge rows for receiver `i` and
/// sender `j` are `[x_i - x_j, |x_i - x_j|]`, plus `u_i - u_j` when the
/// cloud carries values.
pub fn compute_features(topology: &Topology, cloud: &PointCloud) -> Result<(Vec<f64>, Vec<f64>)> {
    if topology.n_nodes() != cloud.len() {
        return Err(GitoError::shape("compute_features", &[topology.n_nodes()], &[cloud.len()]));
    }
    let dim = cloud.dim();
    let ch = cloud.channels();
    let mut nodes = Vec::with_capacity(cloud.len() * (dim + ch));
    for i in 0..cloud.len() {
        nodes.extend_from_slice(cloud.point(i));
        if let Some(u) = cloud.value(i) {
            nodes.extend_from_slice(u);
        }
    }
    let mut edges = Vec::with_capacity(topology.n_edges() * (dim + 1 + ch));
    for (j, i) in topology.edges() {
        let (xi, xj) = (cloud.point(i), cloud.point(j));
        let mut d2 = 0.0;
        for (a, b) in xi.iter().zip(xj) {
            edges.push(a - b);
            d2 += (a - b) * (a - b);
        }
        edges.push(d2.sqrt());
        if let (Some(ui), Some(uj)) = (cloud.value(i), cloud.value(j)) {
            edges.extend(ui.iter().zip(uj).map(|(a, b)| a - b));
        }
    }
    Ok((nodes, edges))
}

/// Summary of a graph's connectivity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphStats {
    pub nodes: usize,
    pub edges: usize,
    pub isolated: usize,
    /// In-degree to node count.
    pub degree_histogram: BTreeMap<usize, usize>,
}

/// Node count, edge count, isolated nodes (no incident edge in either
/// direction) and the in-degree histogram.
pub fn graph_stats(topology: &Topology) -> GraphStats {
    let isolated = topology.degrees().iter().filter(|&&d| d == 0).count();
    let mut degree_histogram = BTreeMap::new();
    for d in topology.in_degrees() {
        *degree_histogram.entry(d).or_insert(0) += 1;
    }
    GraphStats {
        nodes: topology.n_nodes(),
        edges: topology.n_edges(),
        isolated,
        degree_histogram,
    }
}

impl GraphStats {
    /// `key=value` lines for scripts.
    pub fn to_kv(&self) -> String {
        let hist: Vec<String> = self
            .degree_histogram
            .iter()
            .map(|(d, c)| format!("{d}:{c}"))
            .collect();
        format!(
            "nodes={}\nedges={}\nisolated={}\ndegree_histogram={}\n",
            self.nodes,
            self.edges,
            self.isolated,
            hist.join(",")
        )
    }
}

impl fmt::Display for GraphStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "nodes:     {}", self.nodes)?;
        writeln!(f, "edges:     {}", self.edges)?;
        writeln!(f, "isolated:  {}", self.isolated)?;
        write!(f, "in-degree:")?;
        for (d, c) in &self.degree_histogram {
            write!(f, " {d}x{c}")?;
        }
        Ok(())
    }
}
