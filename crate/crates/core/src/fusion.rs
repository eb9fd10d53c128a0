//! Graph feature pyramid and the two ways graph vectors enter the token
//! sequence: appended as an extra token, or applied as a residual gate
//! `F' = F_v * g + F_v`.

use std::fmt;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::event_io::EventStream;
use crate::graph::{build_knn_graph, downsample_uniform, voxel_cluster, EventGraph};
use crate::nn::gcn::GcnCache;
use crate::nn::{GcnLayer, Grads, Linear, NormAdj, ParamStore};
use crate::tensor::{cast, count_flops, Mat, Real};

pub const GROUP_GCN: &str = "gcn";

/// Level `l` (1-based) lives at index `l - 1`; `None` when not computed.
pub type PyramidVecs<T> = [Option<Vec<T>>; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FuseMode {
    Append,
    Gate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Hook {
    /// Number of blocks already applied when the hook fires.
    pub depth: usize,
    pub mode: FuseMode,
    /// Pyramid level 1, 2 or 3.
    pub level: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct FusionPlan {
    pub hooks: Vec<Hook>,
}

impl FusionPlan {
    pub fn none() -> Self {
        FusionPlan { hooks: Vec::new() }
    }

    /// Level 1 appended at the input, level 2 appended after block
    /// `ceil(depth / 2)`, level 3 gated after the last block.
    pub fn slow(depth: usize) -> Self {
        FusionPlan {
            hooks: vec![
                Hook { depth: 0, mode: FuseMode::Append, level: 1 },
                Hook { depth: depth.div_ceil(2), mode: FuseMode::Append, level: 2 },
                Hook { depth, mode: FuseMode::Gate, level: 3 },
            ],
        }
    }

    pub fn fast(depth: usize) -> Self {
        FusionPlan {
            hooks: vec![Hook { depth, mode: FuseMode::Gate, level: 3 }],
        }
    }

    pub fn levels(&self) -> [bool; 3] {
        let mut used = [false; 3];
        for h in &self.hooks {
            used[h.level - 1] = true;
        }
        used
    }

    /// Rejects hooks past the stack, unknown levels, and appends at the last
    /// depth (they would be stripped before anything reads them).
    pub fn check(&self, depth: usize) -> Result<()> {
        for h in &self.hooks {
            if h.depth > depth {
                return Err(Error::Config(format!(
                    "fusion hook at depth {} exceeds the {depth}-block stack",
                    h.depth
                )));
            }
            if !(1..=3).contains(&h.level) {
                return Err(Error::Config(format!("pyramid level {} does not exist", h.level)));
            }
            if h.mode == FuseMode::Append && h.depth == depth && depth > 0 {
                return Err(Error::Config(format!(
                    "append hook at final depth {depth} has no effect"
                )));
            }
        }
        Ok(())
    }

    /// Hooks firing before `depth` and hooks firing exactly at `depth`.
    pub fn split_at(&self, depth: usize) -> (FusionPlan, FusionPlan) {
        let (a, b): (Vec<Hook>, Vec<Hook>) = self.hooks.iter().partition(|h| h.depth < depth);
        (FusionPlan { hooks: a }, FusionPlan { hooks: b })
    }

    /// Parses `depth:mode:level` items separated by commas, e.g.
    /// `0:append:1,6:append:2,12:gate:3`. `none` gives the empty plan.
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if text.is_empty() || text == "none" {
            return Ok(FusionPlan::none());
        }
        let mut hooks = Vec::new();
        for item in text.split(',') {
            let parts: Vec<&str> = item.trim().split(':').collect();
            let bad = || Error::Config(format!("bad fusion hook `{item}`, expected depth:append|gate:level"));
            if parts.len() != 3 {
                return Err(bad());
            }
            let depth = parts[0].parse().map_err(|_| bad())?;
            let mode = match parts[1] {
                "append" => FuseMode::Append,
                "gate" => FuseMode::Gate,
                _ => return Err(bad()),
            };
            let level = parts[2].parse().map_err(|_| bad())?;
            hooks.push(Hook { depth, mode, level });
        }
        Ok(FusionPlan { hooks })
    }
}

impl fmt::Display for FusionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.hooks.is_empty() {
            return write!(f, "none");
        }
        let items: Vec<String> = self
            .hooks
            .iter()
            .map(|h| {
                let m = match h.mode {
                    FuseMode::Append => "append",
                    FuseMode::Gate => "gate",
                };
                format!("{}:{}:{}", h.depth, m, h.level)
            })
            .collect();
        write!(f, "{}", items.join(","))
    }
}

/// `F_v * g + F_v` with `g` broadcast over rows.
pub fn fuse_gate<T: Real>(fv: &Mat<T>, g: &[T]) -> Result<Mat<T>> {
    if g.len() != fv.cols {
        return Err(Error::shape(
            "gate vector",
            format!("width {} for tokens of width {}", g.len(), fv.cols),
        ));
    }
    let mut out = fv.clone();
    for r in 0..out.rows {
        for (v, &gv) in out.row_mut(r).iter_mut().zip(g) {
            *v = *v * gv + *v;
        }
    }
    count_flops(2 * (fv.rows * fv.cols) as u64);
    Ok(out)
}

/// Returns `(dF_v, dg)` for the gate.
pub fn fuse_gate_backward<T: Real>(fv: &Mat<T>, g: &[T], dout: &Mat<T>) -> (Mat<T>, Vec<T>) {
    let mut dx = dout.clone();
    let mut dg = vec![T::zero(); g.len()];
    for r in 0..dout.rows {
        let xr = fv.row(r);
        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
            dg[c] += *d * xr[c];
            *d *= T::one() + g[c];
        }
    }
    (dx, dg)
}

/// Appends `g` as one extra token at the end of the sequence.
pub fn fuse_append<T: Real>(tokens: &Mat<T>, g: &[T]) -> Result<Mat<T>> {
    if g.len() != tokens.cols {
        return Err(Error::shape(
            "appended vector",
            format!("width {} for tokens of width {}", g.len(), tokens.cols),
        ));
    }
    let mut data = Vec::with_capacity(tokens.data.len() + g.len());
    data.extend_from_slice(&tokens.data);
    data.extend_from_slice(g);
    Mat::from_vec(tokens.rows + 1, tokens.cols, data)
}

/// GCN pyramid producing up to three width-`C` vectors:
///
/// ```text
/// G'   = GCN1(graph)                     1 -> 16
/// G''  = voxel maxpool(GCN2(G'))        16 -> 64
/// F_g1 = Proj1(mean(G'))
/// F_g2 = Proj2(mean(G''))
/// F_g3 = Lin3(max(G''))
/// ```
#[derive(Clone, Debug)]
pub struct GraphPyramid {
    pub gcn1: GcnLayer,
    pub gcn2: GcnLayer,
    pub proj1: Option<Linear>,
    pub proj2: Option<Linear>,
    pub lin3: Option<Linear>,
    pub dims: [usize; 3],
    pub voxel_grid: [usize; 3],
    pub out_dim: usize,
}

#[derive(Clone, Debug)]
pub struct PyramidCache<T> {
    adj: NormAdj<T>,
    c1: GcnCache<T>,
    c2: GcnCache<T>,
    g1: Mat<T>,
    /// Node row feeding each `(cluster, channel)` of G''.
    pool_arg: Vec<usize>,
    pooled: Mat<T>,
    mean1: Mat<T>,
    mean2: Mat<T>,
    /// Cluster row of the global max per channel.
    gmax_arg: Vec<usize>,
    gmax: Mat<T>,
}

impl GraphPyramid {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        dims: [usize; 3],
        voxel_grid: [usize; 3],
        out_dim: usize,
        levels: [bool; 3],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let gcn1 = GcnLayer::new(store, "graph.gcn1", GROUP_GCN, dims[0], dims[1], true, rng)?;
        let gcn2 = GcnLayer::new(store, "graph.gcn2", GROUP_GCN, dims[1], dims[2], true, rng)?;
        let proj1 = if levels[0] {
            Some(Linear::new(store, "graph.proj1", GROUP_GCN, dims[1], out_dim, rng)?)
        } else {
            None
        };
        let proj2 = if levels[1] {
            Some(Linear::new(store, "graph.proj2", GROUP_GCN, dims[2], out_dim, rng)?)
        } else {
            None
        };
        let lin3 = if levels[2] {
            Some(Linear::new(store, "graph.lin3", GROUP_GCN, dims[2], out_dim, rng)?)
        } else {
            None
        };
        Ok(GraphPyramid {
            gcn1,
            gcn2,
            proj1,
            proj2,
            lin3,
            dims,
            voxel_grid,
            out_dim,
        })
    }

    pub fn num_params(&self) -> usize {
        self.gcn1.num_params()
            + self.gcn2.num_params()
            + [&self.proj1, &self.proj2, &self.lin3]
                .iter()
                .map(|l| l.as_ref().map_or(0, |l| l.num_params()))
                .sum::<usize>()
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, graph: &EventGraph) -> Result<(PyramidVecs<T>, PyramidCache<T>)> {
        let n = graph.num_nodes();
        if n == 0 {
            return Err(Error::Validation("graph pyramid needs at least one node".into()));
        }
        if graph.feat_dim != self.dims[0] {
            return Err(Error::shape(
                "graph node features",
                format!("width {} for a pyramid expecting {}", graph.feat_dim, self.dims[0]),
            ));
        }
        let adj = NormAdj::<T>::from_graph(graph);
        let h0 = graph.feature_matrix::<T>();
        let (g1, c1) = self.gcn1.forward(ps, &adj, &h0)?;
        let (z2, c2) = self.gcn2.forward(ps, &adj, &g1)?;
        let assign = voxel_cluster(graph, self.voxel_grid)?;
        let (pooled, pool_arg) = crate::graph::maxpool_features(&z2, &assign)?;

        let mean1 = column_mean(&g1);
        let mean2 = column_mean(&pooled);
        let (gmax, gmax_arg) = column_max(&pooled);

        let mut vecs: PyramidVecs<T> = [None, None, None];
        if let Some(p) = &self.proj1 {
            vecs[0] = Some(p.forward(ps, &mean1)?.data);
        }
        if let Some(p) = &self.proj2 {
            vecs[1] = Some(p.forward(ps, &mean2)?.data);
        }
        if let Some(p) = &self.lin3 {
            vecs[2] = Some(p.forward(ps, &gmax)?.data);
        }
        Ok((
            vecs,
            PyramidCache {
                adj,
                c1,
                c2,
                g1,
                pool_arg,
                pooled,
                mean1,
                mean2,
                gmax_arg,
                gmax,
            },
        ))
    }

    /// Backpropagates gradients on the output vectors into the pyramid's
    /// parameters. Graph inputs carry no gradient.
    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, cache: &PyramidCache<T>, dvecs: &PyramidVecs<T>, grads: &mut Grads<T>) {
        let n = cache.g1.rows;
        let (d1, d2) = (self.dims[1], self.dims[2]);
        let clusters = cache.pooled.rows;
        let mut dg1 = Mat::<T>::zeros(n, d1);
        let mut dpooled = Mat::<T>::zeros(clusters, d2);
        let mut any2 = false;

        if let (Some(p), Some(dv)) = (&self.proj1, &dvecs[0]) {
            let dy = Mat::from_vec(1, self.out_dim, dv.clone()).expect("pyramid gradient width");
            let dm = p.backward(ps, &cache.mean1, &dy, grads);
            let inv = cast::<T>(1.0 / n as f64);
            for r in 0..n {
                for (g, &v) in dg1.row_mut(r).iter_mut().zip(dm.row(0)) {
                    *g += v * inv;
                }
            }
        }
        if let (Some(p), Some(dv)) = (&self.proj2, &dvecs[1]) {
            let dy = Mat::from_vec(1, self.out_dim, dv.clone()).expect("pyramid gradient width");
            let dm = p.backward(ps, &cache.mean2, &dy, grads);
            let inv = cast::<T>(1.0 / clusters as f64);
            for r in 0..clusters {
                for (g, &v) in dpooled.row_mut(r).iter_mut().zip(dm.row(0)) {
                    *g += v * inv;
                }
            }
            any2 = true;
        }
        if let (Some(p), Some(dv)) = (&self.lin3, &dvecs[2]) {
            let dy = Mat::from_vec(1, self.out_dim, dv.clone()).expect("pyramid gradient width");
            let dm = p.backward(ps, &cache.gmax, &dy, grads);
            for c in 0..d2 {
                let k = cache.gmax_arg[c];
                dpooled.data[k * d2 + c] += dm.data[c];
            }
            any2 = true;
        }
        if any2 {
            let mut dz2 = Mat::<T>::zeros(n, d2);
            for k in 0..clusters {
                for c in 0..d2 {
                    let node = cache.pool_arg[k * d2 + c];
                    dz2.data[node * d2 + c] += dpooled.data[k * d2 + c];
                }
            }
            let back = self.gcn2.backward(ps, &cache.adj, &cache.c2, &dz2, grads);
            dg1.add_assign(&back);
        }
        self.gcn1.backward(ps, &cache.adj, &cache.c1, &dg1, grads);
    }

    /// Closed-form forward FLOPs on a graph with `n` nodes and `nnz` entries
    /// in `A + I`, excluding graph construction.
    pub fn forward_flops(&self, n: usize, nnz: usize) -> u64 {
        let [d0, d1, d2] = self.dims;
        let c = self.out_dim as u64;
        let mut f = GcnLayer::forward_flops(d0, d1, n, nnz) + GcnLayer::forward_flops(d1, d2, n, nnz);
        if self.proj1.is_some() {
            f += 2 * d1 as u64 * c;
        }
        if self.proj2.is_some() {
            f += 2 * d2 as u64 * c;
        }
        if self.lin3.is_some() {
            f += 2 * d2 as u64 * c;
        }
        f
    }
}

fn column_mean<T: Real>(m: &Mat<T>) -> Mat<T> {
    let mut out = Mat::zeros(1, m.cols);
    for r in 0..m.rows {
        for (o, &v) in out.data.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out.scale(cast(1.0 / m.rows as f64));
    out
}

/// Column max with the first row attaining it.
fn column_max<T: Real>(m: &Mat<T>) -> (Mat<T>, Vec<usize>) {
    let mut out = Mat::from_vec(1, m.cols, m.row(0).to_vec()).expect("row width");
    let mut arg = vec![0usize; m.cols];
    for r in 1..m.rows {
        for (c, &v) in m.row(r).iter().enumerate() {
            if v > out.data[c] {
                out.data[c] = v;
                arg[c] = r;
            }
        }
    }
    (out, arg)
}

/// Events used by sub-window `j` (1-based) of `k`: those with
/// `t < j * duration / k`, the last sub-window taking everything.
pub fn subwindow_events(window: &EventStream, j: usize, k: usize) -> Result<EventStream> {
    if k == 0 || j == 0 || j > k {
        return Err(Error::Argument(format!("sub-window {j} of {k} does not exist")));
    }
    if j == k {
        return Ok(window.clone());
    }
    let cut = window.duration as u128 * j as u128;
    let points = window
        .points
        .iter()
        .filter(|p| (p.t as u128) * (k as u128) < cut)
        .copied()
        .collect();
    Ok(EventStream {
        points,
        duration: window.duration,
        sensor: window.sensor,
    })
}

/// Downsamples to `max_points` and builds the K-NN graph; `None` for an
/// empty stream.
pub fn event_graph(stream: &EventStream, max_points: usize, k: usize) -> Result<Option<EventGraph>> {
    if stream.is_empty() {
        return Ok(None);
    }
    let ds = downsample_uniform(stream, max_points)?;
    Ok(Some(build_knn_graph(&ds, k)?))
}
