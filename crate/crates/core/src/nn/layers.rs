//! Linear maps, layer normalization and pointwise activations with their
//! backward passes.

use rand_chacha::ChaCha8Rng;

use super::param::{Grads, Init, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{cast, gemm_view, Mat, Real, View};

pub const INIT_STD: f64 = 0.02;

/// `y = x W + b` with `W` stored `[d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    name: String,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), group, &[d_in, d_out], Init::TruncNormal(INIT_STD), rng)?;
        let bias = store.add(&format!("{name}.bias"), group, &[d_out], Init::Zeros, rng)?;
        Ok(Linear {
            weight,
            bias,
            d_in,
            d_out,
            name: name.to_string(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Mat<T>) -> Result<Mat<T>> {
        if x.cols != self.d_in {
            return Err(Error::shape(
                format!("{} input", self.name),
                format!("expected width {}, got {}", self.d_in, x.cols),
            ));
        }
        let b = ps.get(self.bias);
        let mut y = Mat::zeros(x.rows, self.d_out);
        for r in 0..x.rows {
            y.row_mut(r).copy_from_slice(b);
        }
        gemm_view(
            x.rows,
            self.d_in,
            self.d_out,
            &x.data,
            View::row_major(self.d_in),
            ps.get(self.weight),
            View::row_major(self.d_out),
            &mut y.data,
            View::row_major(self.d_out),
            true,
        );
        Ok(y)
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, x: &Mat<T>, dy: &Mat<T>, grads: &mut Grads<T>) -> Mat<T> {
        self.backward_params(x, dy, grads);
        self.input_grad(ps, dy)
    }

    pub fn backward_params<T: Real>(&self, x: &Mat<T>, dy: &Mat<T>, grads: &mut Grads<T>) {
        debug_assert_eq!(dy.cols, self.d_out);
        // dW += x^T dy
        gemm_view(
            self.d_in,
            x.rows,
            self.d_out,
            &x.data,
            View::transposed(self.d_in),
            &dy.data,
            View::row_major(self.d_out),
            grads.get_mut(self.weight),
            View::row_major(self.d_out),
            true,
        );
        let db = grads.get_mut(self.bias);
        for r in 0..dy.rows {
            for (g, &v) in db.iter_mut().zip(dy.row(r)) {
                *g += v;
            }
        }
    }

    pub fn input_grad<T: Real>(&self, ps: &ParamStore<T>, dy: &Mat<T>) -> Mat<T> {
        let mut dx = Mat::zeros(dy.rows, self.d_in);
        // dx = dy W^T
        gemm_view(
            dy.rows,
            self.d_out,
            self.d_in,
            &dy.data,
            View::row_major(self.d_out),
            ps.get(self.weight),
            View::transposed(self.d_out),
            &mut dx.data,
            View::row_major(self.d_in),
            false,
        );
        dx
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct LnCache<T> {
    pub xhat: Mat<T>,
    pub rstd: Vec<T>,
}

impl LayerNorm {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: &str,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(&format!("{name}.weight"), group, &[dim], Init::Ones, rng)?,
            beta: store.add(&format!("{name}.bias"), group, &[dim], Init::Zeros, rng)?,
            dim,
            eps: 1e-6,
        })
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Mat<T>) -> (Mat<T>, LnCache<T>) {
        let n = x.cols;
        let inv_n = cast::<T>(1.0 / n as f64);
        let eps = cast::<T>(self.eps);
        let (g, b) = (ps.get(self.gamma), ps.get(self.beta));
        let mut y = Mat::zeros(x.rows, n);
        let mut xhat = Mat::zeros(x.rows, n);
        let mut rstd = Vec::with_capacity(x.rows);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for (o, &v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            let yr = &mut y.data[r * n..(r + 1) * n];
            for i in 0..n {
                yr[i] = xhat.data[r * n + i] * g[i] + b[i];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, cache: &LnCache<T>, dy: &Mat<T>, grads: &mut Grads<T>) -> Mat<T> {
        let n = dy.cols;
        let inv_n = cast::<T>(1.0 / n as f64);
        let g = ps.get(self.gamma);
        {
            let dg = grads.get_mut(self.gamma);
            for r in 0..dy.rows {
                for i in 0..n {
                    dg[i] += dy.get(r, i) * cache.xhat.get(r, i);
                }
            }
        }
        {
            let db = grads.get_mut(self.beta);
            for r in 0..dy.rows {
                for (d, &v) in db.iter_mut().zip(dy.row(r)) {
                    *d += v;
                }
            }
        }
        let mut dx = Mat::zeros(dy.rows, n);
        for r in 0..dy.rows {
            let xh = cache.xhat.row(r);
            let dyr = dy.row(r);
            let mut mean_d = T::zero();
            let mut mean_dx = T::zero();
            for i in 0..n {
                let d = dyr[i] * g[i];
                mean_d += d;
                mean_dx += d * xh[i];
            }
            mean_d *= inv_n;
            mean_dx *= inv_n;
            let rs = cache.rstd[r];
            let out = dx.row_mut(r);
            for i in 0..n {
                out[i] = rs * (dyr[i] * g[i] - mean_d - xh[i] * mean_dx);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let half = cast::<T>(0.5);
    let inner = cast::<T>(GELU_C) * (x + cast::<T>(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = cast::<T>(0.5);
    let c = cast::<T>(GELU_C);
    let a = cast::<T>(GELU_A);
    let inner = c * (x + a * x * x * x);
    let th = inner.tanh();
    let sech2 = T::one() - th * th;
    half * (T::one() + th) + half * x * sech2 * c * (T::one() + cast::<T>(3.0) * a * x * x)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn relu_inplace<T: Real>(m: &mut Mat<T>) {
    for v in &mut m.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward_inplace<T: Real>(out: &Mat<T>, grad: &mut Mat<T>) {
    for (g, &o) in grad.data.iter_mut().zip(&out.data) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}
