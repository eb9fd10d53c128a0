//! Event-point graphs: uniform downsampling, K-NN / radius / random graph
//! construction, and voxel-grid clustering with max-pooling.
//!
//! Node positions live in the unit cube as `(x / W, y / H, t / T)` and all
//! distances are Euclidean in that space.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::event_io::EventStream;
use crate::tensor::{count_flops, Mat, Real};

pub const DEFAULT_POINTS: usize = 300;
pub const DEFAULT_K: usize = 8;
pub const DEFAULT_VOXEL_GRID: [usize; 3] = [12, 16, 16];

/// FLOPs charged per pairwise distance: 3 differences, 3 squares, 2 sums.
pub const FLOPS_PER_DISTANCE: u64 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct EventGraph {
    pub positions: Vec<[f64; 3]>,
    /// Row-major `n x feat_dim` node features.
    pub features: Vec<f64>,
    pub feat_dim: usize,
    /// Sorted, symmetric neighbor lists without self loops.
    pub neighbors: Vec<Vec<usize>>,
}

impl EventGraph {
    pub fn from_edges(
        positions: Vec<[f64; 3]>,
        features: Vec<f64>,
        feat_dim: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Self {
        let n = positions.len();
        let mut sets = vec![BTreeSet::new(); n];
        for (i, j) in edges {
            if i != j {
                sets[i].insert(j);
                sets[j].insert(i);
            }
        }
        EventGraph {
            positions,
            features,
            feat_dim,
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.positions.len()
    }

    /// Undirected edges as `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, nb) in self.neighbors.iter().enumerate() {
            out.extend(nb.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    pub fn adjacency(&self) -> Vec<Vec<u8>> {
        let n = self.num_nodes();
        let mut a = vec![vec![0u8; n]; n];
        for (i, nb) in self.neighbors.iter().enumerate() {
            for &j in nb {
                a[i][j] = 1;
            }
        }
        a
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        if self.features.len() != n * self.feat_dim {
            return Err(Error::shape(
                "node features",
                format!("{} values for {} nodes of width {}", self.features.len(), n, self.feat_dim),
            ));
        }
        for (i, nb) in self.neighbors.iter().enumerate() {
            for &j in nb {
                if j == i || j >= n || !self.has_edge(j, i) {
                    return Err(Error::Validation(format!("adjacency broken at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }

    pub fn feature_matrix<T: Real>(&self) -> Mat<T> {
        Mat {
            rows: self.num_nodes(),
            cols: self.feat_dim,
            data: self.features.iter().map(|&v| crate::tensor::cast(v)).collect(),
        }
    }

    /// Number of non-zeros of `A + I`.
    pub fn nnz_with_self_loops(&self) -> usize {
        self.num_nodes() + 2 * self.num_edges()
    }

    /// Debug dump: node CSV (`id,x,y,t,features...`) and edge CSV (`i,j`).
    pub fn to_csv(&self) -> (String, String) {
        let mut nodes = String::new();
        for (i, p) in self.positions.iter().enumerate() {
            let _ = write!(nodes, "{i},{},{},{}", p[0], p[1], p[2]);
            for f in &self.features[i * self.feat_dim..(i + 1) * self.feat_dim] {
                let _ = write!(nodes, ",{f}");
            }
            nodes.push('\n');
        }
        let mut edges = String::new();
        for (i, j) in self.edges() {
            let _ = writeln!(edges, "{i},{j}");
        }
        (nodes, edges)
    }
}

pub fn normalized_positions(stream: &EventStream) -> Vec<[f64; 3]> {
    let w = stream.sensor.width.max(1) as f64;
    let h = stream.sensor.height.max(1) as f64;
    let t = stream.duration as f64;
    stream
        .points
        .iter()
        .map(|e| {
            let tn = if t > 0.0 { e.t as f64 / t } else { 0.0 };
            [e.x as f64 / w, e.y as f64 / h, tn]
        })
        .collect()
}

#[inline]
pub fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dt = a[2] - b[2];
    dx * dx + dy * dy + dt * dt
}

/// Keeps indices `floor(i * M / n_max)` when the stream has more than `n_max` points.
pub fn downsample_uniform(stream: &EventStream, n_max: usize) -> Result<EventStream> {
    if n_max == 0 {
        return Err(Error::Argument("n_max must be at least 1".into()));
    }
    let m = stream.len();
    if m <= n_max {
        return Ok(stream.clone());
    }
    let points = (0..n_max)
        .map(|i| stream.points[i * m / n_max])
        .collect();
    Ok(EventStream {
        points,
        ..stream.clone()
    })
}

fn node_features(stream: &EventStream) -> Vec<f64> {
    stream.points.iter().map(|e| e.p as f64).collect()
}

fn require_points(stream: &EventStream) -> Result<()> {
    if stream.is_empty() {
        Err(Error::Argument("graph construction needs at least one event".into()))
    } else {
        Ok(())
    }
}

/// Symmetrized K-NN graph; distance ties go to the lower node index.
pub fn build_knn_graph(stream: &EventStream, k: usize) -> Result<EventGraph> {
    require_points(stream)?;
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    let pos = normalized_positions(stream);
    let n = pos.len();
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_dist(&pos[i], &pos[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    count_flops(FLOPS_PER_DISTANCE * (n * n.saturating_sub(1) / 2) as u64);
    let mut edges = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        cand.extend((0..n).filter(|&j| j != i).map(|j| (dist[i * n + j], j)));
        let take = k.min(cand.len());
        if take == 0 {
            continue;
        }
        let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if take < cand.len() {
            cand.select_nth_unstable_by(take - 1, order);
        }
        edges.extend(cand[..take].iter().map(|&(_, j)| (i, j)));
    }
    Ok(EventGraph::from_edges(pos, node_features(stream), 1, edges))
}

/// Edge iff normalized distance `<= r`; `r = 0` gives no edges, even
/// between coincident points.
pub fn build_radius_graph(stream: &EventStream, r: f64) -> Result<EventGraph> {
    require_points(stream)?;
    if !(r >= 0.0) {
        return Err(Error::Argument("radius must be non-negative".into()));
    }
    let pos = normalized_positions(stream);
    let n = pos.len();
    let r2 = r * r;
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if r > 0.0 && sq_dist(&pos[i], &pos[j]) <= r2 {
                edges.push((i, j));
            }
        }
    }
    count_flops(FLOPS_PER_DISTANCE * (n * n.saturating_sub(1) / 2) as u64);
    Ok(EventGraph::from_edges(pos, node_features(stream), 1, edges))
}

/// Each node draws `degree` distinct partners uniformly, then edges are symmetrized.
pub fn build_random_graph(stream: &EventStream, degree: usize, seed: u64) -> Result<EventGraph> {
    require_points(stream)?;
    if degree == 0 {
        return Err(Error::Argument("degree must be at least 1".into()));
    }
    let pos = normalized_positions(stream);
    let n = pos.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::with_capacity(n * degree);
    for i in 0..n {
        let others = n - 1;
        let take = degree.min(others);
        for pick in sample(&mut rng, others, take) {
            let j = if pick >= i { pick + 1 } else { pick };
            edges.push((i, j));
        }
    }
    Ok(EventGraph::from_edges(pos, node_features(stream), 1, edges))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GraphKind {
    Knn { k: usize },
    Radius { r: f64 },
    Random { degree: usize, seed: u64 },
}

impl Default for GraphKind {
    fn default() -> Self {
        GraphKind::Knn { k: DEFAULT_K }
    }
}

pub fn build_graph(stream: &EventStream, kind: GraphKind) -> Result<EventGraph> {
    match kind {
        GraphKind::Knn { k } => build_knn_graph(stream, k),
        GraphKind::Radius { r } => build_radius_graph(stream, r),
        GraphKind::Random { degree, seed } => build_random_graph(stream, degree, seed),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    pub cluster_of: Vec<usize>,
    pub members: Vec<Vec<usize>>,
    /// Representative node of each cluster, always one of its members.
    pub centers: Vec<usize>,
    /// Coarse edges `(k, l)` with `k < l`.
    pub coarse_edges: Vec<(usize, usize)>,
}

impl ClusterAssignment {
    pub fn num_clusters(&self) -> usize {
        self.members.len()
    }
}

/// Voxel index `(t, y, x)` of a normalized position; the upper boundary
/// falls into the last voxel.
pub fn voxel_of(p: &[f64; 3], grid: [usize; 3]) -> [usize; 3] {
    let cell = |v: f64, g: usize| ((v * g as f64).floor().max(0.0) as usize).min(g - 1);
    [cell(p[2], grid[0]), cell(p[1], grid[1]), cell(p[0], grid[2])]
}

/// Groups nodes by voxel. Clusters are numbered in `(t, y, x)` voxel order;
/// each keeps the member closest to its voxel centre (ties to the lower index).
pub fn voxel_cluster(graph: &EventGraph, grid: [usize; 3]) -> Result<ClusterAssignment> {
    if grid.iter().any(|&g| g == 0) {
        return Err(Error::Argument("voxel grid dimensions must be at least 1".into()));
    }
    let mut by_voxel: BTreeMap<[usize; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in graph.positions.iter().enumerate() {
        by_voxel.entry(voxel_of(p, grid)).or_default().push(i);
    }
    let mut cluster_of = vec![0usize; graph.num_nodes()];
    let mut members = Vec::with_capacity(by_voxel.len());
    let mut centers = Vec::with_capacity(by_voxel.len());
    for (k, (voxel, nodes)) in by_voxel.into_iter().enumerate() {
        let centroid = [
            (voxel[2] as f64 + 0.5) / grid[2] as f64,
            (voxel[1] as f64 + 0.5) / grid[1] as f64,
            (voxel[0] as f64 + 0.5) / grid[0] as f64,
        ];
        let mut best = nodes[0];
        let mut best_d = f64::INFINITY;
        for &i in &nodes {
            cluster_of[i] = k;
            let d = sq_dist(&graph.positions[i], &centroid);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        centers.push(best);
        members.push(nodes);
    }
    let mut coarse = BTreeSet::new();
    for (i, j) in graph.edges() {
        let (a, b) = (cluster_of[i], cluster_of[j]);
        if a != b {
            coarse.insert((a.min(b), a.max(b)));
        }
    }
    Ok(ClusterAssignment {
        cluster_of,
        members,
        centers,
        coarse_edges: coarse.into_iter().collect(),
    })
}

/// Per-cluster elementwise max. Also returns, for every output element, the
/// node row that supplied it (first occurrence on ties) for backpropagation.
pub fn maxpool_features<T: Real>(
    features: &Mat<T>,
    assignment: &ClusterAssignment,
) -> Result<(Mat<T>, Vec<usize>)> {
    if features.rows != assignment.cluster_of.len() {
        return Err(Error::shape(
            "pooled features",
            format!("{} rows for {} nodes", features.rows, assignment.cluster_of.len()),
        ));
    }
    let d = features.cols;
    let mut out = Mat::zeros(assignment.num_clusters(), d);
    let mut arg = vec![0usize; assignment.num_clusters() * d];
    for (k, nodes) in assignment.members.iter().enumerate() {
        for c in 0..d {
            let mut best = nodes[0];
            let mut v = features.get(best, c);
            for &i in &nodes[1..] {
                let x = features.get(i, c);
                if x > v {
                    v = x;
                    best = i;
                }
            }
            out.set(k, c, v);
            arg[k * d + c] = best;
        }
    }
    Ok((out, arg))
}
