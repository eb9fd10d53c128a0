//! Center-based head: three convolutional branches over the search-token
//! grid predicting a score map, sub-cell offsets and normalized box size.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::event_io::BBox;
use crate::nn::conv::ConvCache;
use crate::nn::layers::{relu_backward_inplace, relu_inplace, sigmoid, LnCache};
use crate::nn::{Conv3x3, Grads, LayerNorm, ParamStore};
use crate::tensor::{to_f64, Mat, Real};

pub const GROUP_HEAD: &str = "head";
pub const BRANCH_NAMES: [&str; 3] = ["score", "offset", "size"];
pub const BRANCH_OUT: [usize; 3] = [1, 2, 2];

/// Post-sigmoid maps stored channel-last, `(H * W) x channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMaps<T> {
    pub h: usize,
    pub w: usize,
    pub score: Mat<T>,
    pub offset: Mat<T>,
    pub size: Mat<T>,
}

impl<T: Real> HeadMaps<T> {
    pub fn score_at(&self, r: usize, c: usize) -> T {
        self.score.get(r * self.w + c, 0)
    }

    pub fn offset_at(&self, r: usize, c: usize) -> (T, T) {
        let i = r * self.w + c;
        (self.offset.get(i, 0), self.offset.get(i, 1))
    }

    pub fn size_at(&self, r: usize, c: usize) -> (T, T) {
        let i = r * self.w + c;
        (self.size.get(i, 0), self.size.get(i, 1))
    }

    /// Channel-first copies: `(1, H, W)`, `(2, H, W)`, `(2, H, W)`.
    pub fn to_chw(&self) -> [(Vec<usize>, Vec<T>); 3] {
        let chw = |m: &Mat<T>| {
            let mut out = Vec::with_capacity(m.data.len());
            for ch in 0..m.cols {
                for i in 0..m.rows {
                    out.push(m.get(i, ch));
                }
            }
            (vec![m.cols, self.h, self.w], out)
        };
        [chw(&self.score), chw(&self.offset), chw(&self.size)]
    }

    /// Box centred at cell `(r, c)`, normalized to the search crop.
    pub fn box_at(&self, r: usize, c: usize) -> BBox {
        let (ox, oy) = self.offset_at(r, c);
        let (sw, sh) = self.size_at(r, c);
        let cx = (c as f64 + to_f64(ox)) / self.w as f64;
        let cy = (r as f64 + to_f64(oy)) / self.h as f64;
        BBox::from_center(cx, cy, to_f64(sw), to_f64(sh))
    }
}

/// Gradients with respect to the post-sigmoid maps.
#[derive(Clone, Debug)]
pub struct MapGrads<T> {
    pub score: Mat<T>,
    pub offset: Mat<T>,
    pub size: Mat<T>,
}

impl<T: Real> MapGrads<T> {
    pub fn zeros(cells: usize) -> Self {
        MapGrads {
            score: Mat::zeros(cells, 1),
            offset: Mat::zeros(cells, 2),
            size: Mat::zeros(cells, 2),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Normalized `(x, y, w, h)` in search-crop coordinates.
    pub bbox: BBox,
    pub confidence: f64,
    pub cell: (usize, usize),
}

/// Argmax of the score map (first index on ties) and the box there.
pub fn decode_box<T: Real>(maps: &HeadMaps<T>) -> Decoded {
    let mut best = 0;
    let mut best_v = maps.score.data[0];
    for (i, &v) in maps.score.data.iter().enumerate().skip(1) {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    let (r, c) = (best / maps.w, best % maps.w);
    Decoded {
        bbox: maps.box_at(r, c),
        confidence: to_f64(best_v),
        cell: (r, c),
    }
}

#[derive(Clone, Debug)]
struct BranchCache<T> {
    convs: [ConvCache<T>; 3],
    acts: [Mat<T>; 3],
}

#[derive(Clone, Debug)]
pub struct HeadCache<T> {
    ln: LnCache<T>,
    branches: Vec<BranchCache<T>>,
}

#[derive(Clone, Debug)]
pub struct CenterHead {
    pub norm: LayerNorm,
    /// `[branch][layer]`: C -> C/2 -> C/4 -> out.
    pub branches: Vec<[Conv3x3; 3]>,
    pub dim: usize,
    pub grid: usize,
}

impl CenterHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, dim: usize, grid: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if dim < 4 {
            return Err(Error::Config(format!("head width {dim} is below 4")));
        }
        let norm = LayerNorm::new(store, "head.norm", GROUP_HEAD, dim, rng)?;
        let mut branches = Vec::with_capacity(3);
        for (name, &out) in BRANCH_NAMES.iter().zip(&BRANCH_OUT) {
            let w = [dim, dim / 2, dim / 4, out];
            let mk = |store: &mut ParamStore<T>, l: usize, rng: &mut ChaCha8Rng| {
                Conv3x3::new(store, &format!("head.{name}.{l}"), GROUP_HEAD, w[l], w[l + 1], rng)
            };
            branches.push([mk(store, 0, rng)?, mk(store, 1, rng)?, mk(store, 2, rng)?]);
        }
        Ok(CenterHead { norm, branches, dim, grid })
    }

    pub fn num_params(&self) -> usize {
        self.norm.num_params()
            + self
                .branches
                .iter()
                .flat_map(|b| b.iter())
                .map(|c| c.num_params())
                .sum::<usize>()
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, tokens: &Mat<T>) -> Result<(HeadMaps<T>, HeadCache<T>)> {
        let side = (tokens.rows as f64).sqrt().round() as usize;
        if side * side != tokens.rows || side != self.grid {
            return Err(Error::shape(
                "search tokens",
                format!("{} tokens do not form the {}x{} grid", tokens.rows, self.grid, self.grid),
            ));
        }
        if tokens.cols != self.dim {
            return Err(Error::shape(
                "search tokens",
                format!("width {} for a head of width {}", tokens.cols, self.dim),
            ));
        }
        let (x, ln) = self.norm.forward(ps, tokens);
        let g = self.grid;
        let mut outs = Vec::with_capacity(3);
        let mut caches = Vec::with_capacity(3);
        for convs in &self.branches {
            let (a0, c0) = convs[0].forward(ps, &x, g, g)?;
            let mut a0 = a0;
            relu_inplace(&mut a0);
            let (a1, c1) = convs[1].forward(ps, &a0, g, g)?;
            let mut a1 = a1;
            relu_inplace(&mut a1);
            let (mut a2, c2) = convs[2].forward(ps, &a1, g, g)?;
            a2.data.iter_mut().for_each(|v| *v = sigmoid(*v));
            outs.push(a2.clone());
            caches.push(BranchCache {
                convs: [c0, c1, c2],
                acts: [a0, a1, a2],
            });
        }
        let size = outs.pop().expect("three branches");
        let offset = outs.pop().expect("three branches");
        let score = outs.pop().expect("three branches");
        Ok((
            HeadMaps { h: g, w: g, score, offset, size },
            HeadCache { ln, branches: caches },
        ))
    }

    /// Gradient on the search tokens given gradients on the sigmoid outputs.
    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, cache: &HeadCache<T>, d: &MapGrads<T>, grads: &mut Grads<T>) -> Mat<T> {
        let g = self.grid;
        let mut dx = Mat::zeros(g * g, self.dim);
        for (b, dmap) in [&d.score, &d.offset, &d.size].into_iter().enumerate() {
            let convs = &self.branches[b];
            let bc = &cache.branches[b];
            let mut dz = dmap.clone();
            for (dv, &s) in dz.data.iter_mut().zip(&bc.acts[2].data) {
                *dv *= s * (T::one() - s);
            }
            let mut d1 = convs[2].backward(ps, &bc.convs[2], &dz, g, g, grads);
            relu_backward_inplace(&bc.acts[1], &mut d1);
            let mut d0 = convs[1].backward(ps, &bc.convs[1], &d1, g, g, grads);
            relu_backward_inplace(&bc.acts[0], &mut d0);
            let dxb = convs[0].backward(ps, &bc.convs[0], &d0, g, g, grads);
            dx.add_assign(&dxb);
        }
        self.norm.backward(ps, &cache.ln, &dx, grads)
    }

    pub fn forward_flops(&self) -> u64 {
        let g = self.grid;
        self.branches
            .iter()
            .flat_map(|b| b.iter())
            .map(|c| Conv3x3::forward_flops(c.c_in, c.c_out, g, g))
            .sum()
    }
}
