//! Slow and fast trackers: embedding, graph pyramid, fused transformer stack
//! and head, with per-sample loss/gradient and the cached-token path used for
//! multi-output tracking.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneCache, EmbedCache, ModelConfig, TokenState};
use crate::error::{Error, Result};
use crate::event_io::{BBox, EventStream};
use crate::fusion::{event_graph, fuse_gate, subwindow_events, FuseMode, FusionPlan, GraphPyramid, PyramidCache, PyramidVecs};
use crate::graph::{EventGraph, FLOPS_PER_DISTANCE};
use crate::head::{decode_box, CenterHead, Decoded, HeadCache, HeadMaps, MapGrads};
use crate::loss::{encode_target, focal_loss, giou_loss, kd_loss, l1_loss, total_loss, LossBundle, LossWeights};
use crate::nn::attention::AttentionBlock;
use crate::nn::checkpoint::config_hash;
use crate::nn::{Checkpoint, Grads, ParamStore};
use crate::tensor::{cast, to_f64, Mat, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackerKind {
    Slow,
    Fast,
}

impl fmt::Display for TrackerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrackerKind::Slow => "slow",
            TrackerKind::Fast => "fast",
        })
    }
}

impl std::str::FromStr for TrackerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slow" => Ok(TrackerKind::Slow),
            "fast" => Ok(TrackerKind::Fast),
            _ => Err(Error::Argument(format!("unknown tracker `{s}`, expected slow or fast"))),
        }
    }
}

/// One network input: template crop, search crop (both `3 x S x S`), and the
/// event graph of the search window (`None` when the window has no events).
#[derive(Clone, Debug)]
pub struct Sample {
    pub template: Vec<f32>,
    pub search: Vec<f32>,
    pub graph: Option<EventGraph>,
}

#[derive(Clone, Debug)]
pub struct Forward<T> {
    pub maps: HeadMaps<T>,
    /// Search tokens after the last fused block; the distillation features.
    pub features: Mat<T>,
    pub taps: Vec<(usize, Mat<T>)>,
    pub decoded: Decoded,
}

pub struct ForwardCache<T> {
    embed: EmbedCache<T>,
    backbone: BackboneCache<T>,
    pyramid: Option<PyramidCache<T>>,
    head: HeadCache<T>,
    n_z: usize,
    n_s: usize,
    rows: usize,
}

impl<T> ForwardCache<T> {
    pub fn attention_maps(&self) -> Vec<&[T]> {
        self.backbone.attention_maps()
    }
}

#[derive(Clone, Debug)]
pub struct Tracker<T> {
    pub kind: TrackerKind,
    pub cfg: ModelConfig,
    pub plan: FusionPlan,
    pub ps: ParamStore<T>,
    pub backbone: Backbone,
    pub pyramid: GraphPyramid,
    pub head: CenterHead,
}

impl<T: Real> Tracker<T> {
    pub fn new(kind: TrackerKind, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let depth = match kind {
            TrackerKind::Slow => cfg.depth_slow,
            TrackerKind::Fast => cfg.depth_fast,
        };
        let plan = match kind {
            TrackerKind::Slow => FusionPlan::slow(depth),
            TrackerKind::Fast => FusionPlan::fast(depth),
        };
        Self::with_plan(kind, cfg, plan, seed)
    }

    pub fn with_plan(kind: TrackerKind, cfg: &ModelConfig, plan: FusionPlan, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let depth = match kind {
            TrackerKind::Slow => cfg.depth_slow,
            TrackerKind::Fast => cfg.depth_fast,
        };
        plan.check(depth)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let backbone = Backbone::new(&mut ps, cfg, depth, &mut rng)?;
        let pyramid = GraphPyramid::new(&mut ps, cfg.gcn_dims, cfg.voxel_grid, cfg.embed_dim, plan.levels(), &mut rng)?;
        let head = CenterHead::new(&mut ps, cfg.embed_dim, cfg.map_size(), &mut rng)?;
        Ok(Tracker {
            kind,
            cfg: cfg.clone(),
            plan,
            ps,
            backbone,
            pyramid,
            head,
        })
    }

    /// A fast tracker whose shared parameters (embedding, the first half of
    /// the blocks, the common pyramid layers and the head) start from `slow`.
    pub fn fast_from_slow(slow: &Tracker<T>, seed: u64) -> Result<Self> {
        let mut fast = Tracker::new(TrackerKind::Fast, &slow.cfg, seed)?;
        let keep = fast.cfg.depth_fast;
        fast.ps.copy_matching_from(&slow.ps, |name| {
            if let Some(rest) = name.strip_prefix("blocks.") {
                let idx: usize = rest.split('.').next()?.parse().ok()?;
                (idx < keep).then(|| name.to_string())
            } else {
                Some(name.to_string())
            }
        });
        Ok(fast)
    }

    pub fn depth(&self) -> usize {
        self.backbone.depth()
    }

    pub fn num_params(&self) -> usize {
        self.ps.num_scalars()
    }

    /// Parameter counts per module, ending with the total.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let ps = &self.ps;
        vec![
            ("patch_embed".into(), ps.count_prefix("patch_embed.")),
            ("pos_embed".into(), ps.count_prefix("pos_")),
            (format!("blocks(x{})", self.depth()), ps.count_prefix("blocks.")),
            ("graph".into(), ps.count_prefix("graph.")),
            ("head".into(), ps.count_prefix("head.")),
            ("total".into(), ps.num_scalars()),
        ]
    }

    pub fn config_hash(&self) -> String {
        config_hash(&format!("{} {} plan={}", self.kind, self.cfg.canonical(), self.plan))
    }

    pub fn zero_vectors(&self) -> PyramidVecs<T> {
        let used = self.plan.levels();
        let z = || Some(vec![T::zero(); self.cfg.embed_dim]);
        [
            if used[0] { z() } else { None },
            if used[1] { z() } else { None },
            if used[2] { z() } else { None },
        ]
    }

    /// Pyramid vectors of a graph; zeros when there is no graph.
    pub fn graph_vectors(&self, graph: Option<&EventGraph>) -> Result<PyramidVecs<T>> {
        match graph {
            Some(g) => Ok(self.pyramid.forward(&self.ps, g)?.0),
            None => Ok(self.zero_vectors()),
        }
    }

    pub fn forward(&self, sample: &Sample) -> Result<(Forward<T>, ForwardCache<T>)> {
        let (vecs, pyramid) = match &sample.graph {
            Some(g) => {
                let (v, c) = self.pyramid.forward(&self.ps, g)?;
                (v, Some(c))
            }
            None => (self.zero_vectors(), None),
        };
        let (state, embed) = self.backbone.embed_tokens(&self.ps, &sample.template, &sample.search)?;
        let (out, backbone) = self.backbone.run_backbone(&self.ps, state, self.depth(), &self.plan, &vecs)?;
        let features = out.search_tokens();
        let (maps, head) = self.head.forward(&self.ps, &features)?;
        let decoded = decode_box(&maps);
        Ok((
            Forward {
                maps,
                features,
                taps: out.taps,
                decoded,
            },
            ForwardCache {
                embed,
                backbone,
                pyramid,
                head,
                n_z: out.n_z,
                n_s: out.n_s,
                rows: out.x.rows,
            },
        ))
    }

    /// Backpropagates gradients on the head maps and on the distillation
    /// features into every parameter.
    pub fn backward(&self, cache: &ForwardCache<T>, dmaps: &MapGrads<T>, dfeatures: Option<&Mat<T>>, grads: &mut Grads<T>) {
        let mut dsearch = self.head.backward(&self.ps, &cache.head, dmaps, grads);
        if let Some(df) = dfeatures {
            dsearch.add_assign(df);
        }
        let c = self.cfg.embed_dim;
        let mut dout = Mat::zeros(cache.rows, c);
        dout.data[cache.n_z * c..(cache.n_z + cache.n_s) * c].copy_from_slice(&dsearch.data);
        let (dx, dvecs) = self.backbone.backward_backbone(&self.ps, &cache.backbone, dout, grads);
        self.backbone.embed_backward(&cache.embed, cache.n_z, &dx, grads);
        if let Some(pc) = &cache.pyramid {
            self.pyramid.backward(&self.ps, pc, &dvecs, grads);
        }
    }

    /// Loss terms for a forward pass against a normalized ground-truth box,
    /// plus gradients on the maps and features. Box regression is read at
    /// the ground-truth centre cell.
    pub fn loss_terms(
        &self,
        fwd: &Forward<T>,
        gt: &BBox,
        teacher: Option<&Mat<T>>,
        weights: LossWeights,
    ) -> Result<(LossBundle, MapGrads<T>, Option<Mat<T>>)> {
        let maps = &fwd.maps;
        let target = encode_target(gt, maps.w);
        let scores: Vec<f64> = maps.score.data.iter().map(|&v| to_f64(v)).collect();
        let (focal, dscore) = focal_loss(&scores, &target.heatmap);
        let (r, c) = target.cell;
        let pred = maps.box_at(r, c).corners();
        let (l1, dl1) = l1_loss(&pred, &target.corners);
        let (gl, dgl) = giou_loss(&pred, &target.corners);
        let (kd, dkd) = match teacher {
            Some(t) => {
                let (v, g) = kd_loss(&fwd.features, t)?;
                (v, Some(g))
            }
            None => (0.0, None),
        };
        let bundle = total_loss(focal, l1, gl, kd, weights)?;

        let cells = maps.h * maps.w;
        let mut dm = MapGrads::zeros(cells);
        for (d, &g) in dm.score.data.iter_mut().zip(&dscore) {
            *d = cast(weights.focal * g);
        }
        let mut dcorner = [0.0; 4];
        for k in 0..4 {
            dcorner[k] = weights.l1 * dl1[k] + weights.giou * dgl[k];
        }
        let idx = r * maps.w + c;
        dm.offset.set(idx, 0, cast((dcorner[0] + dcorner[2]) / maps.w as f64));
        dm.offset.set(idx, 1, cast((dcorner[1] + dcorner[3]) / maps.h as f64));
        dm.size.set(idx, 0, cast((dcorner[2] - dcorner[0]) / 2.0));
        dm.size.set(idx, 1, cast((dcorner[3] - dcorner[1]) / 2.0));
        let dfeat = dkd.map(|mut g| {
            g.scale(cast(weights.kd));
            g
        });
        Ok((bundle, dm, dfeat))
    }

    /// Forward, loss and backward for one sample; gradients accumulate into
    /// `grads`.
    pub fn loss_and_grad(
        &self,
        sample: &Sample,
        gt: &BBox,
        teacher: Option<&Mat<T>>,
        weights: LossWeights,
        grads: &mut Grads<T>,
    ) -> Result<(LossBundle, Forward<T>)> {
        let (fwd, cache) = self.forward(sample)?;
        let (bundle, dm, df) = self.loss_terms(&fwd, gt, teacher, weights)?;
        self.backward(&cache, &dm, df.as_ref(), grads);
        Ok((bundle, fwd))
    }

    pub fn loss(&self, sample: &Sample, gt: &BBox, teacher: Option<&Mat<T>>, weights: LossWeights) -> Result<LossBundle> {
        let (fwd, _) = self.forward(sample)?;
        Ok(self.loss_terms(&fwd, gt, teacher, weights)?.0)
    }

    /// Tokens after the stack, before the hooks at the final depth.
    pub fn encode_visual(&self, template: &[f32], search: &[f32], vecs: &PyramidVecs<T>) -> Result<TokenState<T>> {
        let (inner, _) = self.plan.split_at(self.depth());
        let (state, _) = self.backbone.embed_tokens(&self.ps, template, search)?;
        Ok(self.backbone.run_backbone(&self.ps, state, self.depth(), &inner, vecs)?.0)
    }

    /// Applies the final-depth gates to cached tokens and runs the head.
    pub fn finish(&self, cached: &TokenState<T>, vecs: &PyramidVecs<T>) -> Result<(HeadMaps<T>, Mat<T>)> {
        let (_, last) = self.plan.split_at(self.depth());
        let mut x = cached.x.clone();
        for h in &last.hooks {
            debug_assert_eq!(h.mode, FuseMode::Gate);
            let g = vecs[h.level - 1]
                .as_ref()
                .ok_or_else(|| Error::Config(format!("pyramid level {} was not computed", h.level)))?;
            x = fuse_gate(&x, g)?;
        }
        let feats = x.slice_rows(cached.n_z, cached.n_z + cached.n_s);
        let (maps, _) = self.head.forward(&self.ps, &feats)?;
        Ok((maps, feats))
    }

    /// Output `j` of `k` for one window: sub-window `j` sees the events with
    /// `t * k < j * dt`. An empty sub-window reuses `prev` (zeros if none).
    /// Returns the decoded box and the vectors to carry forward.
    pub fn accumulation_step(
        &self,
        cached: &TokenState<T>,
        window: &EventStream,
        j: usize,
        k: usize,
        prev: Option<PyramidVecs<T>>,
    ) -> Result<(Decoded, PyramidVecs<T>)> {
        let sub = subwindow_events(window, j, k)?;
        let graph = event_graph(&sub, self.cfg.max_points, self.cfg.knn_k)?;
        let vecs = match (&graph, prev) {
            (Some(g), _) => self.graph_vectors(Some(g))?,
            (None, Some(p)) => p,
            (None, None) => self.zero_vectors(),
        };
        let (maps, _) = self.finish(cached, &vecs)?;
        Ok((decode_box(&maps), vecs))
    }

    /// `k` predictions from one window of events on top of cached tokens.
    pub fn accumulate_and_track(&self, cached: &TokenState<T>, window: &EventStream, k: usize) -> Result<Vec<Decoded>> {
        if k == 0 {
            return Err(Error::Argument("k must be at least 1".into()));
        }
        let mut out = Vec::with_capacity(k);
        let mut prev = None;
        for j in 1..=k {
            let (d, v) = self.accumulation_step(cached, window, j, k, prev.take())?;
            out.push(d);
            prev = Some(v);
        }
        Ok(out)
    }

    /// Closed-form FLOPs of graph construction plus the pyramid.
    pub fn graph_flops(&self, n: usize, nnz: usize) -> u64 {
        if n == 0 {
            return 0;
        }
        FLOPS_PER_DISTANCE * (n * (n - 1) / 2) as u64 + self.pyramid.forward_flops(n, nnz)
    }

    /// Closed-form FLOPs of embedding, blocks and the hooks before the final
    /// depth.
    pub fn backbone_flops(&self) -> u64 {
        let c = self.cfg.embed_dim;
        let depth = self.depth();
        let mut rows = self.cfg.n_z() + self.cfg.n_s();
        let mut f = self.backbone.embed_flops();
        for d in 0..depth {
            for h in self.plan.hooks.iter().filter(|h| h.depth == d) {
                match h.mode {
                    FuseMode::Append => rows += 1,
                    FuseMode::Gate => f += 2 * (rows * c) as u64,
                }
            }
            f += AttentionBlock::forward_flops(c, self.cfg.mlp_ratio, rows);
        }
        f
    }

    /// Rows in the sequence once every hook before the final depth fired.
    fn final_rows(&self) -> usize {
        let appended = self
            .plan
            .hooks
            .iter()
            .filter(|h| h.mode == FuseMode::Append && h.depth < self.depth())
            .count();
        self.cfg.n_z() + self.cfg.n_s() + appended
    }

    /// Closed-form FLOPs of the final-depth gates and the head.
    pub fn finish_flops(&self) -> u64 {
        let c = self.cfg.embed_dim;
        let gates = self
            .plan
            .hooks
            .iter()
            .filter(|h| h.depth == self.depth() && h.mode == FuseMode::Gate)
            .count();
        gates as u64 * 2 * (self.final_rows() * c) as u64 + self.head.forward_flops()
    }

    /// Full forward including graph construction on `n` points with `nnz`
    /// entries in `A + I`.
    pub fn forward_flops(&self, n: usize, nnz: usize) -> u64 {
        self.graph_flops(n, nnz) + self.backbone_flops() + self.finish_flops()
    }

    /// One accumulation step: graph, pyramid, gate and head.
    pub fn incremental_flops(&self, n: usize, nnz: usize) -> u64 {
        self.graph_flops(n, nnz) + self.finish_flops()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(&self.config_hash());
        ck.meta.insert("kind".into(), self.kind.to_string());
        ck.add_store(&self.ps);
        ck
    }

    pub fn load_params(&mut self, ck: &Checkpoint) -> Result<()> {
        if let Some(kind) = ck.meta.get("kind") {
            if kind != &self.kind.to_string() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint holds a {kind} tracker, expected {}",
                    self.kind
                )));
            }
        }
        let hash = self.config_hash();
        ck.restore_store(&mut self.ps, &hash)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn convert<U: Real>(&self) -> Tracker<U> {
        Tracker {
            kind: self.kind,
            cfg: self.cfg.clone(),
            plan: self.plan.clone(),
            ps: self.ps.convert(),
            backbone: self.backbone.clone(),
            pyramid: self.pyramid.clone(),
            head: self.head.clone(),
        }
    }
}
