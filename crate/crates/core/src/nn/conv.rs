use rand_chacha::ChaCha8Rng;

use super::layers::Linear;
use super::param::{Grads, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Mat, Real};

/// 3x3 convolution, stride 1, zero padding 1, on channel-last maps stored as
/// `(H * W) x C` matrices. Implemented as im2col followed by a linear map
/// whose weight is laid out `[(ky, kx, c_in), c_out]`.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub lin: Linear,
    pub c_in: usize,
    pub c_out: usize,
}

#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    cols: Mat<T>,
}

impl Conv3x3 {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Conv3x3 {
            lin: Linear::new(store, name, group, 9 * c_in, c_out, rng)?,
            c_in,
            c_out,
        })
    }

    pub fn num_params(&self) -> usize {
        self.lin.num_params()
    }

    fn im2col<T: Real>(&self, x: &Mat<T>, h: usize, w: usize) -> Mat<T> {
        let c = self.c_in;
        let mut cols = Mat::zeros(h * w, 9 * c);
        for y in 0..h {
            for xx in 0..w {
                let row = cols.row_mut(y * w + xx);
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = (sy as usize * w + sx as usize) * c;
                        let dst = (ky * 3 + kx) * c;
                        row[dst..dst + c].copy_from_slice(&x.data[src..src + c]);
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, dcols: &Mat<T>, h: usize, w: usize) -> Mat<T> {
        let c = self.c_in;
        let mut dx = Mat::zeros(h * w, c);
        for y in 0..h {
            for xx in 0..w {
                let row = dcols.row(y * w + xx);
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = (sy as usize * w + sx as usize) * c;
                        let src = (ky * 3 + kx) * c;
                        for i in 0..c {
                            dx.data[dst + i] += row[src + i];
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Mat<T>, h: usize, w: usize) -> Result<(Mat<T>, ConvCache<T>)> {
        if x.rows != h * w || x.cols != self.c_in {
            return Err(Error::shape(
                "conv input",
                format!("expected {}x{}, got {}x{}", h * w, self.c_in, x.rows, x.cols),
            ));
        }
        let cols = self.im2col(x, h, w);
        let y = self.lin.forward(ps, &cols)?;
        Ok((y, ConvCache { cols }))
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        cache: &ConvCache<T>,
        dy: &Mat<T>,
        h: usize,
        w: usize,
        grads: &mut Grads<T>,
    ) -> Mat<T> {
        let dcols = self.lin.backward(ps, &cache.cols, dy, grads);
        self.col2im(&dcols, h, w)
    }

    pub fn forward_flops(c_in: usize, c_out: usize, h: usize, w: usize) -> u64 {
        (2 * h * w * 9 * c_in * c_out) as u64
    }
}
