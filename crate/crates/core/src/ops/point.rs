//! Deterministic counterparts of the Gaussian operators. The sampling
//! baseline runs these with one drawn weight set per forward pass.

use crate::error::{PfpError, Result};
use crate::ops::conv::{for_each_tap, output_dims, ConvGeometry};
use crate::tensor::Tensor;

/// `y = x W^T + b` with `W` as `[d_out, d_in]`.
pub fn linear(x: &Tensor, weight: &[f32], bias: Option<&[f32]>, d_out: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 || s[1] * d_out != weight.len() {
        return Err(PfpError::shape(format!(
            "linear: input {s:?} vs {} weights for {d_out} outputs",
            weight.len()
        )));
    }
    let (n, d_in) = (s[0], s[1]);
    let xs = x.data();
    let mut out = vec![0.0f32; n * d_out];
    for b in 0..n {
        let xr = &xs[b * d_in..(b + 1) * d_in];
        for i in 0..d_out {
            let wr = &weight[i * d_in..(i + 1) * d_in];
            let mut acc = 0.0f32;
            for j in 0..d_in {
                acc += wr[j] * xr[j];
            }
            out[b * d_out + i] = acc + bias.map_or(0.0, |bv| bv[i]);
        }
    }
    Tensor::new(vec![n, d_out], out)
}

/// NCHW convolution with OIHW weights and zero padding.
pub fn conv2d(x: &Tensor, weight: &[f32], w_shape: &[usize], bias: Option<&[f32]>, g: ConvGeometry) -> Result<Tensor> {
    if x.shape().len() != 4 || w_shape.len() != 4 || w_shape[1] != x.shape()[1] {
        return Err(PfpError::shape(format!(
            "conv: input {:?} vs weights {w_shape:?}",
            x.shape()
        )));
    }
    let d = output_dims(x.shape(), w_shape, g)?;
    let xs = x.data();
    let plane = d.oh * d.ow;
    let mut out = vec![0.0f32; d.n * d.o * plane];
    let mut idx = 0;
    for n in 0..d.n {
        for o in 0..d.o {
            for y in 0..d.oh {
                for xx in 0..d.ow {
                    let mut acc = 0.0f32;
                    for_each_tap(&d, n, o, y, xx, |xi, wi| acc += weight[wi] * xs[xi]);
                    out[idx] = acc + bias.map_or(0.0, |bv| bv[o]);
                    idx += 1;
                }
            }
        }
    }
    Tensor::new(vec![d.n, d.o, d.oh, d.ow], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn maxpool(x: &Tensor, k: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(PfpError::shape(format!("max pool input must be NCHW, got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(PfpError::ShapeIndivisible { k, h, w });
    }
    let (oh, ow) = (h / k, w / k);
    let xs = x.data();
    let mut out = Vec::with_capacity(s[0] * s[1] * oh * ow);
    for p in 0..s[0] * s[1] {
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = f32::NEG_INFINITY;
                for dy in 0..k {
                    for dx in 0..k {
                        best = best.max(xs[p * h * w + (y * k + dy) * w + xx * k + dx]);
                    }
                }
                out.push(best);
            }
        }
    }
    Tensor::new(vec![s[0], s[1], oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_with_bias() {
        let x = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let y = linear(&x, &[1.0, 1.0, 2.0, -1.0], Some(&[0.5, 0.0]), 2).unwrap();
        assert_eq!(y.data(), &[3.5, 0.0]);
    }

    #[test]
    fn pool_picks_max() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, -2.0, 4.0, 3.0]).unwrap();
        assert_eq!(maxpool(&x, 2).unwrap().data(), &[4.0]);
    }
}
