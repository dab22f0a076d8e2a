//! 3D cross-correlation with zero padding, implemented as im2col plus gemm
//! one output slice at a time to bound scratch memory.

use rand::Rng;

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Conv3d<S> {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// Row-major [out_c, in_c, k, k, k].
    pub weight: Vec<S>,
    pub bias: Vec<S>,
    pub grad_weight: Vec<S>,
    pub grad_bias: Vec<S>,
}

impl<S: Scalar> Conv3d<S> {
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Conv3d<S> {
        let wlen = out_c * in_c * k * k * k;
        Conv3d {
            in_c,
            out_c,
            k,
            stride,
            pad,
            weight: vec![S::ZERO; wlen],
            bias: vec![S::ZERO; out_c],
            grad_weight: vec![S::ZERO; wlen],
            grad_bias: vec![S::ZERO; out_c],
        }
    }

    /// He-style uniform init over the fan-in; biases stay zero. Draws are
    /// f64 so f32 and f64 models built from one seed agree.
    pub fn init_he(&mut self, rng: &mut impl Rng) {
        let fan_in = (self.in_c * self.k * self.k * self.k) as f64;
        let limit = (6.0 / fan_in).sqrt();
        for w in self.weight.iter_mut() {
            *w = S::from_f64(rng.random_range(-limit..limit));
        }
        for b in self.bias.iter_mut() {
            *b = S::ZERO;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(S::ZERO);
        self.grad_bias.fill(S::ZERO);
    }

    pub fn out_dim(&self, d: usize) -> usize {
        (d + 2 * self.pad - self.k) / self.stride + 1
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<(usize, usize, usize)> {
        if x.shape.len() != 4 || x.shape[0] != self.in_c {
            return Err(Error::ShapeMismatch {
                expected: vec![self.in_c, 0, 0, 0],
                got: x.shape.clone(),
            });
        }
        let (d, h, w) = (x.shape[1], x.shape[2], x.shape[3]);
        if d + 2 * self.pad < self.k || h + 2 * self.pad < self.k || w + 2 * self.pad < self.k {
            return Err(Error::invalid(format!(
                "input {:?} smaller than kernel {}",
                x.shape, self.k
            )));
        }
        Ok((d, h, w))
    }

    /// Fill the patch matrix for one output z-slice: rows are kernel taps
    /// (in_c * k^3), columns are output positions (oh * ow).
    #[allow(clippy::too_many_arguments)]
    fn fill_patches(
        &self,
        x: &Tensor<S>,
        oz: usize,
        oh: usize,
        ow: usize,
        d: usize,
        h: usize,
        w: usize,
        cols: &mut [S],
    ) {
        let k = self.k;
        let s = self.stride as isize;
        let p = self.pad as isize;
        let n = oh * ow;
        let mut row = 0usize;
        for c_in in 0..self.in_c {
            for kz in 0..k {
                let iz = oz as isize * s + kz as isize - p;
                let z_ok = (0..d as isize).contains(&iz);
                for ky in 0..k {
                    for kx in 0..k {
                        let dst = &mut cols[row * n..(row + 1) * n];
                        row += 1;
                        if !z_ok {
                            dst.fill(S::ZERO);
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy as isize * s + ky as isize - p;
                            let line = &mut dst[oy * ow..(oy + 1) * ow];
                            if !(0..h as isize).contains(&iy) {
                                line.fill(S::ZERO);
                                continue;
                            }
                            let base = x.idx4(c_in, iz as usize, iy as usize, 0);
                            for (ox, out) in line.iter_mut().enumerate() {
                                let ix = ox as isize * s + kx as isize - p;
                                *out = if (0..w as isize).contains(&ix) {
                                    x.data[base + ix as usize]
                                } else {
                                    S::ZERO
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let (d, h, w) = self.check_input(x)?;
        let (od, oh, ow) = (self.out_dim(d), self.out_dim(h), self.out_dim(w));
        let kk = self.in_c * self.k * self.k * self.k;
        let n = oh * ow;
        let mut out: Tensor<S> = Tensor::zeros(&[self.out_c, od, oh, ow]);
        let mut cols = vec![S::ZERO; kk * n];
        for oz in 0..od {
            self.fill_patches(x, oz, oh, ow, d, h, w, &mut cols);
            let c_off = out.idx4(0, oz, 0, 0);
            unsafe {
                S::gemm(
                    self.out_c,
                    kk,
                    n,
                    S::ONE,
                    self.weight.as_ptr(),
                    kk as isize,
                    1,
                    cols.as_ptr(),
                    n as isize,
                    1,
                    S::ZERO,
                    out.data.as_mut_ptr().add(c_off),
                    (od * n) as isize,
                    1,
                );
            }
            for c in 0..self.out_c {
                let b = self.bias[c];
                let base = out.idx4(c, oz, 0, 0);
                for v in &mut out.data[base..base + n] {
                    *v += b;
                }
            }
        }
        Ok(out)
    }

    /// Accumulate weight/bias gradients and return the input gradient.
    pub fn backward(&mut self, x: &Tensor<S>, grad_out: &Tensor<S>) -> Result<Tensor<S>> {
        let (d, h, w) = self.check_input(x)?;
        let (od, oh, ow) = (self.out_dim(d), self.out_dim(h), self.out_dim(w));
        if grad_out.shape != [self.out_c, od, oh, ow] {
            return Err(Error::ShapeMismatch {
                expected: vec![self.out_c, od, oh, ow],
                got: grad_out.shape.clone(),
            });
        }
        let kk = self.in_c * self.k * self.k * self.k;
        let n = oh * ow;
        let mut grad_x = Tensor::zeros(&[self.in_c, d, h, w]);
        let mut cols = vec![S::ZERO; kk * n];
        let mut col_grad = vec![S::ZERO; kk * n];
        for oz in 0..od {
            self.fill_patches(x, oz, oh, ow, d, h, w, &mut cols);
            let g_off = grad_out.idx4(0, oz, 0, 0);
            let g_ptr = unsafe { grad_out.data.as_ptr().add(g_off) };
            unsafe {
                // grad_W += G_slice * cols^T
                S::gemm(
                    self.out_c,
                    n,
                    kk,
                    S::ONE,
                    g_ptr,
                    (od * n) as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    n as isize,
                    S::ONE,
                    self.grad_weight.as_mut_ptr(),
                    kk as isize,
                    1,
                );
                // col_grad = W^T * G_slice
                S::gemm(
                    kk,
                    self.out_c,
                    n,
                    S::ONE,
                    self.weight.as_ptr(),
                    1,
                    kk as isize,
                    g_ptr,
                    (od * n) as isize,
                    1,
                    S::ZERO,
                    col_grad.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            for c in 0..self.out_c {
                let base = grad_out.idx4(c, oz, 0, 0);
                let mut acc = S::ZERO;
                for g in &grad_out.data[base..base + n] {
                    acc += *g;
                }
                self.grad_bias[c] += acc;
            }
            self.scatter_patches(&col_grad, oz, oh, ow, d, h, w, &mut grad_x);
        }
        Ok(grad_x)
    }

    /// Adjoint of `fill_patches`: add patch-matrix gradients back into the
    /// input gradient.
    #[allow(clippy::too_many_arguments)]
    fn scatter_patches(
        &self,
        col_grad: &[S],
        oz: usize,
        oh: usize,
        ow: usize,
        d: usize,
        h: usize,
        w: usize,
        grad_x: &mut Tensor<S>,
    ) {
        let k = self.k;
        let s = self.stride as isize;
        let p = self.pad as isize;
        let n = oh * ow;
        let mut row = 0usize;
        for c_in in 0..self.in_c {
            for kz in 0..k {
                let iz = oz as isize * s + kz as isize - p;
                let z_ok = (0..d as isize).contains(&iz);
                for ky in 0..k {
                    for kx in 0..k {
                        let src = &col_grad[row * n..(row + 1) * n];
                        row += 1;
                        if !z_ok {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy as isize * s + ky as isize - p;
                            if !(0..h as isize).contains(&iy) {
                                continue;
                            }
                            let base = grad_x.idx4(c_in, iz as usize, iy as usize, 0);
                            for ox in 0..ow {
                                let ix = ox as isize * s + kx as isize - p;
                                if (0..w as isize).contains(&ix) {
                                    grad_x.data[base + ix as usize] += src[oy * ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
