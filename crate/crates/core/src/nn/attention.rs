//! Pre-norm transformer block with exact multi-head softmax attention:
//!
//! ```text
//! X' = MHA(LN1(X)) + X
//! Y  = FFN(LN2(X')) + X'      FFN = Linear -> GELU -> Linear
//! ```

use rand_chacha::ChaCha8Rng;

use super::layers::{gelu, gelu_grad, LayerNorm, Linear, LnCache};
use super::param::{Grads, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{cast, gemm_view, Mat, Real, View};

#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub dim: usize,
    pub heads: usize,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    x: Mat<T>,
    ln1: LnCache<T>,
    h1: Mat<T>,
    qkv: Mat<T>,
    /// `heads x n x n` attention probabilities.
    pub probs: Vec<T>,
    ctx: Mat<T>,
    ln2: LnCache<T>,
    h2: Mat<T>,
    f1: Mat<T>,
    g: Mat<T>,
}

impl AttentionBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "width {dim} is not divisible by {heads} heads"
            )));
        }
        let hidden = dim * mlp_ratio;
        Ok(AttentionBlock {
            ln1: LayerNorm::new(store, &format!("{name}.norm1"), group, dim, rng)?,
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), group, dim, 3 * dim, rng)?,
            proj: Linear::new(store, &format!("{name}.attn.proj"), group, dim, dim, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.norm2"), group, dim, rng)?,
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), group, dim, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), group, hidden, dim, rng)?,
            dim,
            heads,
        })
    }

    pub fn num_params(&self) -> usize {
        self.ln1.num_params()
            + self.qkv.num_params()
            + self.proj.num_params()
            + self.ln2.num_params()
            + self.fc1.num_params()
            + self.fc2.num_params()
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Mat<T>) -> Result<(Mat<T>, BlockCache<T>)> {
        if x.cols != self.dim {
            return Err(Error::shape(
                "attention block input",
                format!("expected width {}, got {}", self.dim, x.cols),
            ));
        }
        let n = x.rows;
        let c = self.dim;
        let dh = c / self.heads;
        let scale = cast::<T>(1.0 / (dh as f64).sqrt());

        let (h1, ln1) = self.ln1.forward(ps, x);
        let qkv = self.qkv.forward(ps, &h1)?;
        let mut probs = vec![T::zero(); self.heads * n * n];
        let mut ctx = Mat::zeros(n, c);
        for h in 0..self.heads {
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            // scores = Q_h K_h^T
            gemm_view(
                n,
                dh,
                n,
                &qkv.data,
                View { offset: h * dh, rs: 3 * c, cs: 1 },
                &qkv.data,
                View { offset: c + h * dh, rs: 1, cs: 3 * c },
                p,
                View::row_major(n),
                false,
            );
            for row in p.chunks_mut(n) {
                let mut mx = T::neg_infinity();
                for v in row.iter_mut() {
                    *v *= scale;
                    mx = mx.max(*v);
                }
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    sum += *v;
                }
                let inv = T::one() / sum;
                row.iter_mut().for_each(|v| *v *= inv);
            }
            // ctx_h = P V_h
            gemm_view(
                n,
                n,
                dh,
                p,
                View::row_major(n),
                &qkv.data,
                View { offset: 2 * c + h * dh, rs: 3 * c, cs: 1 },
                &mut ctx.data,
                View { offset: h * dh, rs: c, cs: 1 },
                false,
            );
        }
        let attn = self.proj.forward(ps, &ctx)?;
        let mut x_mid = x.clone();
        x_mid.add_assign(&attn);

        let (h2, ln2) = self.ln2.forward(ps, &x_mid);
        let f1 = self.fc1.forward(ps, &h2)?;
        let mut g = f1.clone();
        g.data.iter_mut().for_each(|v| *v = gelu(*v));
        let f2 = self.fc2.forward(ps, &g)?;
        let mut out = x_mid;
        out.add_assign(&f2);

        Ok((
            out,
            BlockCache {
                x: x.clone(),
                ln1,
                h1,
                qkv,
                probs,
                ctx,
                ln2,
                h2,
                f1,
                g,
            },
        ))
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        cache: &BlockCache<T>,
        dout: &Mat<T>,
        grads: &mut Grads<T>,
    ) -> Mat<T> {
        let n = cache.x.rows;
        let c = self.dim;
        let dh = c / self.heads;
        let scale = cast::<T>(1.0 / (dh as f64).sqrt());

        // FFN branch
        let dg = self.fc2.backward(ps, &cache.g, dout, grads);
        let mut df1 = dg;
        for (d, &z) in df1.data.iter_mut().zip(&cache.f1.data) {
            *d *= gelu_grad(z);
        }
        let dh2 = self.fc1.backward(ps, &cache.h2, &df1, grads);
        let mut dx_mid = self.ln2.backward(ps, &cache.ln2, &dh2, grads);
        dx_mid.add_assign(dout);

        // attention branch
        let dctx = self.proj.backward(ps, &cache.ctx, &dx_mid, grads);
        let mut dqkv = Mat::zeros(n, 3 * c);
        let mut dp = vec![T::zero(); n * n];
        for h in 0..self.heads {
            let p = &cache.probs[h * n * n..(h + 1) * n * n];
            // dP = dctx_h V_h^T
            gemm_view(
                n,
                dh,
                n,
                &dctx.data,
                View { offset: h * dh, rs: c, cs: 1 },
                &cache.qkv.data,
                View { offset: 2 * c + h * dh, rs: 1, cs: 3 * c },
                &mut dp,
                View::row_major(n),
                false,
            );
            // dV_h = P^T dctx_h
            gemm_view(
                n,
                n,
                dh,
                p,
                View::transposed(n),
                &dctx.data,
                View { offset: h * dh, rs: c, cs: 1 },
                &mut dqkv.data,
                View { offset: 2 * c + h * dh, rs: 3 * c, cs: 1 },
                false,
            );
            // softmax backward, then fold in the score scale
            for (drow, prow) in dp.chunks_mut(n).zip(p.chunks(n)) {
                let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (d, &pv) in drow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            // dQ_h = dS K_h
            gemm_view(
                n,
                n,
                dh,
                &dp,
                View::row_major(n),
                &cache.qkv.data,
                View { offset: c + h * dh, rs: 3 * c, cs: 1 },
                &mut dqkv.data,
                View { offset: h * dh, rs: 3 * c, cs: 1 },
                false,
            );
            // dK_h = dS^T Q_h
            gemm_view(
                n,
                n,
                dh,
                &dp,
                View::transposed(n),
                &cache.qkv.data,
                View { offset: h * dh, rs: 3 * c, cs: 1 },
                &mut dqkv.data,
                View { offset: c + h * dh, rs: 3 * c, cs: 1 },
                false,
            );
        }
        let dh1 = self.qkv.backward(ps, &cache.h1, &dqkv, grads);
        let mut dx = self.ln1.backward(ps, &cache.ln1, &dh1, grads);
        dx.add_assign(&dx_mid);
        dx
    }

    /// Closed-form FLOPs of one forward pass over `n` tokens.
    pub fn forward_flops(dim: usize, mlp_ratio: usize, n: usize) -> u64 {
        let (c, n) = (dim as u64, n as u64);
        let hidden = c * mlp_ratio as u64;
        let qkv = 2 * n * c * 3 * c;
        let scores = 2 * n * n * c;
        let mix = 2 * n * n * c;
        let proj = 2 * n * c * c;
        let mlp = 2 * n * c * hidden * 2;
        qkv + scores + mix + proj + mlp
    }
}
