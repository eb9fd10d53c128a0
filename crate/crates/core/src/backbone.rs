//! Patch embedding, positional tables and the transformer stack with fusion
//! hooks and depth taps.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fusion::{fuse_append, fuse_gate, fuse_gate_backward, FuseMode, FusionPlan, PyramidVecs};
use crate::graph::{DEFAULT_K, DEFAULT_POINTS, DEFAULT_VOXEL_GRID};
use crate::nn::layers::INIT_STD;
use crate::nn::{AttentionBlock, BlockCache, Grads, Init, Linear, ParamId, ParamStore};
use crate::tensor::{Mat, Real};

pub const GROUP_BACKBONE: &str = "backbone";
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub patch_size: usize,
    pub template_size: usize,
    pub search_size: usize,
    pub depth_slow: usize,
    pub depth_fast: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub gcn_dims: [usize; 3],
    pub voxel_grid: [usize; 3],
    pub knn_k: usize,
    pub max_points: usize,
    pub template_factor: f64,
    pub search_factor: f64,
}

impl ModelConfig {
    /// Full-size trackers: ViT-B width on 128/256 crops.
    pub fn full() -> Self {
        ModelConfig {
            embed_dim: 768,
            patch_size: 16,
            template_size: 128,
            search_size: 256,
            depth_slow: 12,
            depth_fast: 6,
            heads: 12,
            mlp_ratio: 4,
            gcn_dims: [1, 16, 64],
            voxel_grid: DEFAULT_VOXEL_GRID,
            knn_k: DEFAULT_K,
            max_points: DEFAULT_POINTS,
            template_factor: 2.0,
            search_factor: 4.0,
        }
    }

    /// CPU-trainable preset.
    pub fn desk() -> Self {
        ModelConfig {
            embed_dim: 64,
            template_size: 64,
            search_size: 128,
            heads: 4,
            ..ModelConfig::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.template_size % p != 0 || self.search_size % p != 0 || self.template_size == 0 {
            return Err(Error::Config(format!(
                "crop sizes {} and {} must be positive multiples of patch size {p}",
                self.template_size, self.search_size
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.depth_slow != 2 * self.depth_fast {
            return Err(Error::Config(format!(
                "depth_fast {} must be half of depth_slow {}",
                self.depth_fast, self.depth_slow
            )));
        }
        if self.embed_dim < 4 || self.mlp_ratio == 0 {
            return Err(Error::Config("embed_dim must be at least 4 and mlp_ratio positive".into()));
        }
        if self.gcn_dims.iter().any(|&d| d == 0) || self.gcn_dims[0] != 1 {
            return Err(Error::Config("gcn dims must be positive and start at 1 (polarity)".into()));
        }
        if self.voxel_grid.iter().any(|&g| g == 0) || self.knn_k == 0 || self.max_points == 0 {
            return Err(Error::Config("voxel grid, knn_k and max_points must be positive".into()));
        }
        if !(self.template_factor > 0.0 && self.search_factor > 0.0) {
            return Err(Error::Config("crop context factors must be positive".into()));
        }
        Ok(())
    }

    pub fn n_z(&self) -> usize {
        (self.template_size / self.patch_size).pow(2)
    }

    pub fn n_s(&self) -> usize {
        (self.search_size / self.patch_size).pow(2)
    }

    /// Side of the square response map.
    pub fn map_size(&self) -> usize {
        self.search_size / self.patch_size
    }

    /// Stable text form used for checkpoint hashing.
    pub fn canonical(&self) -> String {
        format!(
            "embed_dim={} patch_size={} template_size={} search_size={} depth_slow={} depth_fast={} heads={} mlp_ratio={} gcn_dims={:?} voxel_grid={:?} knn_k={} max_points={} template_factor={} search_factor={}",
            self.embed_dim,
            self.patch_size,
            self.template_size,
            self.search_size,
            self.depth_slow,
            self.depth_fast,
            self.heads,
            self.mlp_ratio,
            self.gcn_dims,
            self.voxel_grid,
            self.knn_k,
            self.max_points,
            self.template_factor,
            self.search_factor
        )
    }
}

/// Template and search tokens in one sequence, plus any appended graph
/// tokens at the end.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenState<T> {
    pub x: Mat<T>,
    pub n_z: usize,
    pub n_s: usize,
    /// Number of appended tokens after the first `n_z + n_s` rows.
    pub appended: usize,
    /// Snapshots `(depth, tokens)` after the designated blocks.
    pub taps: Vec<(usize, Mat<T>)>,
}

impl<T: Real> TokenState<T> {
    pub fn search_tokens(&self) -> Mat<T> {
        self.x.slice_rows(self.n_z, self.n_z + self.n_s)
    }

    pub fn template_tokens(&self) -> Mat<T> {
        self.x.slice_rows(0, self.n_z)
    }

    /// Drops appended tokens, leaving `n_z + n_s` rows.
    pub fn stripped(&self) -> Mat<T> {
        self.x.slice_rows(0, self.n_z + self.n_s)
    }
}

/// Blocks after which a `depth`-block stack records a tap.
pub fn tap_depths(depth: usize) -> [usize; 3] {
    [depth.div_ceil(3), (2 * depth).div_ceil(3), depth]
}

#[derive(Clone, Debug)]
pub struct EmbedCache<T> {
    patches: Mat<T>,
}

#[derive(Clone, Debug)]
enum HookRecord<T> {
    Append { depth: usize, level: usize },
    Gate { depth: usize, level: usize, x: Mat<T>, g: Vec<T> },
}

#[derive(Clone, Debug)]
pub struct BackboneCache<T> {
    depth: usize,
    blocks: Vec<BlockCache<T>>,
    hooks: Vec<HookRecord<T>>,
}

impl<T> BackboneCache<T> {
    /// Attention probabilities of every block, `heads x n x n` each.
    pub fn attention_maps(&self) -> Vec<&[T]> {
        self.blocks.iter().map(|b| b.probs.as_slice()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub patch_embed: Linear,
    pub pos_template: ParamId,
    pub pos_search: ParamId,
    pub blocks: Vec<AttentionBlock>,
    pub cfg: ModelConfig,
}

/// Splits a `3 x size x size` image into row-major `P x P` patches, each
/// flattened as `(channel, py, px)`.
pub fn patchify<T: Real>(img: &[f32], size: usize, p: usize) -> Result<Mat<T>> {
    if p == 0 || size % p != 0 {
        return Err(Error::shape("image", format!("side {size} is not divisible by patch size {p}")));
    }
    if img.len() != IMAGE_CHANNELS * size * size {
        return Err(Error::shape(
            "image",
            format!("{} values for {IMAGE_CHANNELS}x{size}x{size}", img.len()),
        ));
    }
    let g = size / p;
    let width = IMAGE_CHANNELS * p * p;
    let mut out = Mat::zeros(g * g, width);
    for gy in 0..g {
        for gx in 0..g {
            let row = out.row_mut(gy * g + gx);
            for c in 0..IMAGE_CHANNELS {
                for py in 0..p {
                    let src = (c * size + gy * p + py) * size + gx * p;
                    let dst = (c * p + py) * p;
                    for px in 0..p {
                        row[dst + px] = T::from_f32(img[src + px]).unwrap_or_else(T::zero);
                    }
                }
            }
        }
    }
    Ok(out)
}

impl Backbone {
    /// Builds `depth` blocks named `blocks.{i}`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, depth: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        let patch_embed = Linear::new(
            store,
            "patch_embed",
            GROUP_BACKBONE,
            IMAGE_CHANNELS * cfg.patch_size * cfg.patch_size,
            c,
            rng,
        )?;
        let pos_template = store.add("pos_template", GROUP_BACKBONE, &[cfg.n_z(), c], Init::TruncNormal(INIT_STD), rng)?;
        let pos_search = store.add("pos_search", GROUP_BACKBONE, &[cfg.n_s(), c], Init::TruncNormal(INIT_STD), rng)?;
        let blocks = (0..depth)
            .map(|i| AttentionBlock::new(store, &format!("blocks.{i}"), GROUP_BACKBONE, c, cfg.heads, cfg.mlp_ratio, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Backbone {
            patch_embed,
            pos_template,
            pos_search,
            blocks,
            cfg: cfg.clone(),
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn embed_params(&self) -> usize {
        self.patch_embed.num_params() + (self.cfg.n_z() + self.cfg.n_s()) * self.cfg.embed_dim
    }

    pub fn num_params(&self) -> usize {
        self.embed_params() + self.blocks.iter().map(|b| b.num_params()).sum::<usize>()
    }

    /// Projects template and search patches and adds their positional tables.
    pub fn embed_tokens<T: Real>(&self, ps: &ParamStore<T>, template: &[f32], search: &[f32]) -> Result<(TokenState<T>, EmbedCache<T>)> {
        let p = self.cfg.patch_size;
        let pz = patchify::<T>(template, self.cfg.template_size, p)?;
        let px = patchify::<T>(search, self.cfg.search_size, p)?;
        let (n_z, n_s) = (pz.rows, px.rows);
        let mut data = pz.data;
        data.extend_from_slice(&px.data);
        let patches = Mat::from_vec(n_z + n_s, pz.cols, data)?;
        let mut x = self.patch_embed.forward(ps, &patches)?;
        let c = self.cfg.embed_dim;
        for (v, &pe) in x.data[..n_z * c].iter_mut().zip(ps.get(self.pos_template)) {
            *v += pe;
        }
        for (v, &pe) in x.data[n_z * c..].iter_mut().zip(ps.get(self.pos_search)) {
            *v += pe;
        }
        Ok((
            TokenState {
                x,
                n_z,
                n_s,
                appended: 0,
                taps: Vec::new(),
            },
            EmbedCache { patches },
        ))
    }

    pub fn embed_backward<T: Real>(&self, cache: &EmbedCache<T>, n_z: usize, dx: &Mat<T>, grads: &mut Grads<T>) {
        let c = self.cfg.embed_dim;
        for (g, &d) in grads.get_mut(self.pos_template).iter_mut().zip(&dx.data[..n_z * c]) {
            *g += d;
        }
        for (g, &d) in grads.get_mut(self.pos_search).iter_mut().zip(&dx.data[n_z * c..]) {
            *g += d;
        }
        self.patch_embed.backward_params(&cache.patches, dx, grads);
    }

    /// Applies the first `depth` blocks, firing `plan`'s hooks: a hook at
    /// depth `d` runs after block `d` (before block 1 when `d = 0`).
    pub fn run_backbone<T: Real>(
        &self,
        ps: &ParamStore<T>,
        mut state: TokenState<T>,
        depth: usize,
        plan: &FusionPlan,
        vecs: &PyramidVecs<T>,
    ) -> Result<(TokenState<T>, BackboneCache<T>)> {
        if depth > self.blocks.len() {
            return Err(Error::Config(format!(
                "depth {depth} exceeds the {} available blocks",
                self.blocks.len()
            )));
        }
        plan.check(depth)?;
        let taps = tap_depths(depth);
        let mut cache = BackboneCache {
            depth,
            blocks: Vec::with_capacity(depth),
            hooks: Vec::new(),
        };
        for d in 0..=depth {
            for h in plan.hooks.iter().filter(|h| h.depth == d) {
                let g = vecs[h.level - 1]
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("pyramid level {} was not computed", h.level)))?;
                match h.mode {
                    FuseMode::Append => {
                        state.x = fuse_append(&state.x, g)?;
                        state.appended += 1;
                        cache.hooks.push(HookRecord::Append { depth: d, level: h.level });
                    }
                    FuseMode::Gate => {
                        let out = fuse_gate(&state.x, g)?;
                        let x = std::mem::replace(&mut state.x, out);
                        cache.hooks.push(HookRecord::Gate {
                            depth: d,
                            level: h.level,
                            x,
                            g: g.clone(),
                        });
                    }
                }
            }
            if d > 0 && taps.contains(&d) && !state.taps.iter().any(|(t, _)| *t == d) {
                state.taps.push((d, state.x.clone()));
            }
            if d < depth {
                let (y, bc) = self.blocks[d].forward(ps, &state.x)?;
                state.x = y;
                cache.blocks.push(bc);
            }
        }
        Ok((state, cache))
    }

    /// Reverses [`Backbone::run_backbone`]. `dout` covers every output row,
    /// appended tokens included. Returns the gradient on the input tokens and
    /// on each pyramid level that was used.
    pub fn backward_backbone<T: Real>(
        &self,
        ps: &ParamStore<T>,
        cache: &BackboneCache<T>,
        dout: Mat<T>,
        grads: &mut Grads<T>,
    ) -> (Mat<T>, PyramidVecs<T>) {
        let mut dx = dout;
        let mut dvecs: PyramidVecs<T> = [None, None, None];
        let mut add = |level: usize, v: Vec<T>| {
            let slot = &mut dvecs[level - 1];
            match slot {
                Some(acc) => acc.iter_mut().zip(&v).for_each(|(a, b)| *a += *b),
                None => *slot = Some(v),
            }
        };
        for d in (0..=cache.depth).rev() {
            if d < cache.depth {
                dx = self.blocks[d].backward(ps, &cache.blocks[d], &dx, grads);
            }
            for rec in cache.hooks.iter().rev() {
                match rec {
                    HookRecord::Append { depth, level } if *depth == d => {
                        let last = dx.rows - 1;
                        add(*level, dx.row(last).to_vec());
                        dx = dx.slice_rows(0, last);
                    }
                    HookRecord::Gate { depth, level, x, g } if *depth == d => {
                        let (ndx, dg) = fuse_gate_backward(x, g, &dx);
                        dx = ndx;
                        add(*level, dg);
                    }
                    _ => {}
                }
            }
        }
        (dx, dvecs)
    }

    /// Closed-form FLOPs of the patch projection.
    pub fn embed_flops(&self) -> u64 {
        let c = &self.cfg;
        2 * ((c.n_z() + c.n_s()) * IMAGE_CHANNELS * c.patch_size * c.patch_size * c.embed_dim) as u64
    }
}
