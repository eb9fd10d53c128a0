//! Graph convolution with symmetric normalization and self loops:
//! `H' = act(D^-1/2 (A + I) D^-1/2 H W + b)`.

use rand_chacha::ChaCha8Rng;

use super::layers::{relu_backward_inplace, relu_inplace, Linear};
use super::param::{Grads, ParamStore};
use crate::error::{Error, Result};
use crate::graph::EventGraph;
use crate::tensor::{cast, count_flops, Mat, Real};

/// Sparse `D^-1/2 (A + I) D^-1/2` in CSR form.
#[derive(Clone, Debug)]
pub struct NormAdj<T> {
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<T>,
}

impl<T: Real> NormAdj<T> {
    pub fn from_graph(g: &EventGraph) -> Self {
        let n = g.num_nodes();
        let deg: Vec<f64> = g.neighbors.iter().map(|nb| nb.len() as f64 + 1.0).collect();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::with_capacity(g.nnz_with_self_loops());
        let mut vals = Vec::with_capacity(g.nnz_with_self_loops());
        row_ptr.push(0);
        for i in 0..n {
            // merge the self loop into the sorted neighbor list
            let mut self_done = false;
            for &j in &g.neighbors[i] {
                if !self_done && j > i {
                    cols.push(i);
                    vals.push(cast(1.0 / deg[i]));
                    self_done = true;
                }
                cols.push(j);
                vals.push(cast(1.0 / (deg[i] * deg[j]).sqrt()));
            }
            if !self_done {
                cols.push(i);
                vals.push(cast(1.0 / deg[i]));
            }
            row_ptr.push(cols.len());
        }
        NormAdj { row_ptr, cols, vals }
    }

    pub fn num_nodes(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `Â H`. The matrix is symmetric, so this also serves the backward pass.
    pub fn apply(&self, h: &Mat<T>) -> Mat<T> {
        let d = h.cols;
        let mut out = Mat::zeros(h.rows, d);
        for i in 0..self.num_nodes() {
            let orow = &mut out.data[i * d..(i + 1) * d];
            for idx in self.row_ptr[i]..self.row_ptr[i + 1] {
                let w = self.vals[idx];
                let src = &h.data[self.cols[idx] * d..(self.cols[idx] + 1) * d];
                for (o, &s) in orow.iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        count_flops(2 * (self.nnz() * d) as u64);
        out
    }

    pub fn to_dense(&self) -> Mat<T> {
        let n = self.num_nodes();
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            for idx in self.row_ptr[i]..self.row_ptr[i + 1] {
                m.set(i, self.cols[idx], self.vals[idx]);
            }
        }
        m
    }
}

#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub lin: Linear,
    pub activation: bool,
}

#[derive(Clone, Debug)]
pub struct GcnCache<T> {
    agg: Mat<T>,
    out: Mat<T>,
}

impl GcnLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: &str,
        d_in: usize,
        d_out: usize,
        activation: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(GcnLayer {
            lin: Linear::new(store, name, group, d_in, d_out, rng)?,
            activation,
        })
    }

    pub fn num_params(&self) -> usize {
        self.lin.num_params()
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, adj: &NormAdj<T>, h: &Mat<T>) -> Result<(Mat<T>, GcnCache<T>)> {
        if h.rows != adj.num_nodes() {
            return Err(Error::shape(
                "gcn node features",
                format!("{} rows for {} nodes", h.rows, adj.num_nodes()),
            ));
        }
        let agg = adj.apply(h);
        let mut out = self.lin.forward(ps, &agg)?;
        if self.activation {
            relu_inplace(&mut out);
        }
        Ok((out.clone(), GcnCache { agg, out }))
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        adj: &NormAdj<T>,
        cache: &GcnCache<T>,
        dout: &Mat<T>,
        grads: &mut Grads<T>,
    ) -> Mat<T> {
        let mut dz = dout.clone();
        if self.activation {
            relu_backward_inplace(&cache.out, &mut dz);
        }
        let dagg = self.lin.backward(ps, &cache.agg, &dz, grads);
        adj.apply(&dagg)
    }

    /// Closed-form forward FLOPs for `n` nodes and `nnz` entries of `A + I`.
    pub fn forward_flops(d_in: usize, d_out: usize, n: usize, nnz: usize) -> u64 {
        (2 * nnz * d_in + 2 * n * d_in * d_out) as u64
    }
}
