//! Trilinear 2x upsampling with half-pixel sampling (source coordinate
//! o/2 - 0.25) and edge replication, plus its exact adjoint.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Per-axis interpolation taps: output index o blends input i0 and i1.
fn axis_taps(in_dim: usize) -> Vec<(usize, usize, f64, f64)> {
    let out_dim = in_dim * 2;
    (0..out_dim)
        .map(|o| {
            let src = o as f64 / 2.0 - 0.25;
            let floor = src.floor();
            let frac = src - floor;
            let i0 = (floor.max(0.0) as usize).min(in_dim - 1);
            let i1 = ((floor + 1.0).max(0.0) as usize).min(in_dim - 1);
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

fn check4(x: &Tensor<impl Scalar>) -> Result<(usize, usize, usize, usize)> {
    if x.shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            expected: vec![0, 0, 0, 0],
            got: x.shape.clone(),
        });
    }
    Ok((x.shape[0], x.shape[1], x.shape[2], x.shape[3]))
}

pub fn upsample2x<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, d, h, w) = check4(x)?;
    let tz = axis_taps(d);
    let ty = axis_taps(h);
    let tx = axis_taps(w);
    let mut out: Tensor<S> = Tensor::zeros(&[c, 2 * d, 2 * h, 2 * w]);
    let mut o = 0usize;
    for ch in 0..c {
        for &(z0, z1, wz0, wz1) in &tz {
            for &(y0, y1, wy0, wy1) in &ty {
                let p00 = x.idx4(ch, z0, y0, 0);
                let p01 = x.idx4(ch, z0, y1, 0);
                let p10 = x.idx4(ch, z1, y0, 0);
                let p11 = x.idx4(ch, z1, y1, 0);
                let w00 = S::from_f64(wz0 * wy0);
                let w01 = S::from_f64(wz0 * wy1);
                let w10 = S::from_f64(wz1 * wy0);
                let w11 = S::from_f64(wz1 * wy1);
                for &(x0, x1, wx0, wx1) in &tx {
                    let a = w00 * x.data[p00 + x0] + w01 * x.data[p01 + x0]
                        + w10 * x.data[p10 + x0]
                        + w11 * x.data[p11 + x0];
                    let b = w00 * x.data[p00 + x1] + w01 * x.data[p01 + x1]
                        + w10 * x.data[p10 + x1]
                        + w11 * x.data[p11 + x1];
                    out.data[o] = S::from_f64(wx0) * a + S::from_f64(wx1) * b;
                    o += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of `upsample2x`: scatter output-space gradients back to the
/// input grid so that <up(x), g> == <x, upsample2x_backward(g)>.
pub fn upsample2x_backward<S: Scalar>(grad_out: &Tensor<S>, in_shape: &[usize]) -> Result<Tensor<S>> {
    let (c, d, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (gc, gd, gh, gw) = check4(grad_out)?;
    if (gc, gd, gh, gw) != (c, 2 * d, 2 * h, 2 * w) {
        return Err(Error::ShapeMismatch {
            expected: vec![c, 2 * d, 2 * h, 2 * w],
            got: grad_out.shape.clone(),
        });
    }
    let tz = axis_taps(d);
    let ty = axis_taps(h);
    let tx = axis_taps(w);
    let mut grad_x: Tensor<S> = Tensor::zeros(&[c, d, h, w]);
    let mut o = 0usize;
    for ch in 0..c {
        for &(z0, z1, wz0, wz1) in &tz {
            for &(y0, y1, wy0, wy1) in &ty {
                let p00 = grad_x.idx4(ch, z0, y0, 0);
                let p01 = grad_x.idx4(ch, z0, y1, 0);
                let p10 = grad_x.idx4(ch, z1, y0, 0);
                let p11 = grad_x.idx4(ch, z1, y1, 0);
                let w00 = wz0 * wy0;
                let w01 = wz0 * wy1;
                let w10 = wz1 * wy0;
                let w11 = wz1 * wy1;
                for &(x0, x1, wx0, wx1) in &tx {
                    let g = grad_out.data[o];
                    o += 1;
                    let g0 = g * S::from_f64(wx0);
                    let g1 = g * S::from_f64(wx1);
                    grad_x.data[p00 + x0] += g0 * S::from_f64(w00);
                    grad_x.data[p01 + x0] += g0 * S::from_f64(w01);
                    grad_x.data[p10 + x0] += g0 * S::from_f64(w10);
                    grad_x.data[p11 + x0] += g0 * S::from_f64(w11);
                    grad_x.data[p00 + x1] += g1 * S::from_f64(w00);
                    grad_x.data[p01 + x1] += g1 * S::from_f64(w01);
                    grad_x.data[p10 + x1] += g1 * S::from_f64(w10);
                    grad_x.data[p11 + x1] += g1 * S::from_f64(w11);
                }
            }
        }
    }
    Ok(grad_x)
}
