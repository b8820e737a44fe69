//! Non-convolution kernels: pooling, batch normalisation, activations and
//! trilinear upsampling. Each forward has a matching backward here; the tape
//! wires them together.

use super::Tensor;
use crate::error::{Error, Result};
use crate::parallel;

/// Max pooling with a cubic window equal to the stride.
///
/// Returns the pooled tensor and, per output voxel, the flat input index of
/// the first maximum in scan order.
pub fn max_pool3d(x: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<u32>)> {
    if window != stride || window == 0 {
        return Err(Error::InvalidArgument(format!(
            "max_pool3d supports window == stride >= 1, got window {window} stride {stride}"
        )));
    }
    let [n, c, d, h, w] = x.dims5()?;
    for (axis, ext) in [(2, d), (3, h), (4, w)] {
        if ext % window != 0 || ext == 0 {
            return Err(Error::NotDivisible {
                axis,
                extent: ext,
                divisor: window,
            });
        }
    }
    let k = window;
    let (od, oh, ow) = (d / k, h / k, w / k);
    let ovol = od * oh * ow;
    let ivol = d * h * w;
    let mut out = vec![0.0f32; n * c * ovol];
    let mut idx = vec![0u32; n * c * ovol];
    let src = x.data();
    for nc in 0..n * c {
        let xin = &src[nc * ivol..(nc + 1) * ivol];
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut arg = 0usize;
                    for a in 0..k {
                        for b in 0..k {
                            let row = ((z * k + a) * h + y * k + b) * w + xx * k;
                            for e in 0..k {
                                let v = xin[row + e];
                                if v > best {
                                    best = v;
                                    arg = row + e;
                                }
                            }
                        }
                    }
                    let o = nc * ovol + (z * oh + y) * ow + xx;
                    out[o] = best;
                    idx[o] = (nc * ivol + arg) as u32;
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c, od, oh, ow], out)?, idx))
}

pub fn max_pool3d_backward(gy: &Tensor, argmax: &[u32], input_shape: &[usize]) -> Tensor {
    let mut gx = Tensor::zeros(input_shape);
    let g = gx.data_mut();
    for (&i, &v) in argmax.iter().zip(gy.data()) {
        g[i as usize] += v;
    }
    gx
}

/// Saved values of a training-mode batch-norm forward.
#[derive(Clone, Debug)]
pub struct BnSaved {
    pub mean: Vec<f32>,
    /// biased batch variance
    pub var: Vec<f32>,
    pub inv_std: Vec<f32>,
}

fn channel_views(dims: [usize; 5]) -> (usize, usize, usize) {
    let [n, c, d, h, w] = dims;
    (n, c, d * h * w)
}

/// Training-mode batch norm: statistics over `(N, D, H, W)` per channel.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<(Tensor, BnSaved)> {
    let dims = x.dims5()?;
    let (n, c, vol) = channel_views(dims);
    check_affine(gamma, beta, c)?;
    let count = (n * vol) as f64;
    let src = x.data();
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * vol;
            s += src[off..off + vol].iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = s / count;
        let mut ss = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * vol;
            ss += src[off..off + vol].iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>();
        }
        mean[ch] = m as f32;
        var[ch] = (ss / count) as f32;
    }
    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![0.0f32; x.len()];
    parallel::for_each_chunk_mut(&mut out, vol.max(1), |i, o| {
        let ch = i % c;
        let (g, b, m, is) = (gamma.data()[ch], beta.data()[ch], mean[ch], inv_std[ch]);
        let xin = &src[i * vol..(i + 1) * vol];
        for (y, &v) in o.iter_mut().zip(xin) {
            *y = (v - m) * is * g + b;
        }
    });
    Ok((Tensor::new(x.shape().to_vec(), out)?, BnSaved { mean, var, inv_std }))
}

/// Backward of [`batch_norm_train`]: `(dx, dgamma, dbeta)`.
pub fn batch_norm_train_backward(x: &Tensor, gy: &Tensor, gamma: &Tensor, saved: &BnSaved) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, vol) = channel_views(x.dims5()?);
    let count = (n * vol) as f64;
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    let (xs, gs) = (x.data(), gy.data());
    for ch in 0..c {
        let (m, is) = (saved.mean[ch], saved.inv_std[ch]);
        let (mut sg, mut sgx) = (0.0f64, 0.0f64);
        for b in 0..n {
            let off = (b * c + ch) * vol;
            for i in off..off + vol {
                sg += gs[i] as f64;
                sgx += gs[i] as f64 * ((xs[i] - m) * is) as f64;
            }
        }
        dbeta[ch] = sg as f32;
        dgamma[ch] = sgx as f32;
    }
    let mut dx = vec![0.0f32; x.len()];
    parallel::for_each_chunk_mut(&mut dx, vol.max(1), |i, o| {
        let ch = i % c;
        let (m, is, g) = (saved.mean[ch], saved.inv_std[ch], gamma.data()[ch]);
        let mean_g = (dbeta[ch] as f64 / count) as f32;
        let mean_gx = (dgamma[ch] as f64 / count) as f32;
        let off = i * vol;
        for (j, d) in o.iter_mut().enumerate() {
            let xhat = (xs[off + j] - m) * is;
            *d = g * is * (gs[off + j] - mean_g - xhat * mean_gx);
        }
    });
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

/// Eval-mode batch norm with fixed statistics. Returns the output and the
/// per-channel scale `gamma / sqrt(var + eps)` used by the backward.
pub fn batch_norm_eval(x: &Tensor, gamma: &Tensor, beta: &Tensor, mean: &Tensor, var: &Tensor, eps: f32) -> Result<(Tensor, Vec<f32>)> {
    let (_, c, vol) = channel_views(x.dims5()?);
    check_affine(gamma, beta, c)?;
    check_affine(mean, var, c)?;
    let scale: Vec<f32> = (0..c).map(|ch| gamma.data()[ch] / (var.data()[ch] + eps).sqrt()).collect();
    let mut out = vec![0.0f32; x.len()];
    let src = x.data();
    parallel::for_each_chunk_mut(&mut out, vol.max(1), |i, o| {
        let ch = i % c;
        let (s, m, b) = (scale[ch], mean.data()[ch], beta.data()[ch]);
        for (y, &v) in o.iter_mut().zip(&src[i * vol..(i + 1) * vol]) {
            *y = (v - m) * s + b;
        }
    });
    Ok((Tensor::new(x.shape().to_vec(), out)?, scale))
}

fn check_affine(a: &Tensor, b: &Tensor, c: usize) -> Result<()> {
    if a.len() != c {
        return Err(Error::shape("per-channel parameter length", c, a.len()));
    }
    if b.len() != c {
        return Err(Error::shape("per-channel parameter length", c, b.len()));
    }
    Ok(())
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Softmax over the channel axis of a 5-D tensor.
pub fn softmax_channel(x: &Tensor) -> Result<Tensor> {
    let [_, c, d, h, w] = x.dims5()?;
    if c < 2 {
        return Err(Error::shape("softmax channels (minimum)", 2, c));
    }
    let vol = d * h * w;
    let src = x.data();
    let mut out = vec![0.0f32; x.len()];
    parallel::for_each_chunk_mut(&mut out, c * vol, |b, o| {
        let xin = &src[b * c * vol..(b + 1) * c * vol];
        for v in 0..vol {
            let mx = (0..c).map(|ch| xin[ch * vol + v]).fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0f32;
            for ch in 0..c {
                let e = (xin[ch * vol + v] - mx).exp();
                o[ch * vol + v] = e;
                s += e;
            }
            for ch in 0..c {
                o[ch * vol + v] /= s;
            }
        }
    });
    Tensor::new(x.shape().to_vec(), out)
}

/// Backward of [`softmax_channel`] given its output `s`.
pub fn softmax_channel_backward(s: &Tensor, gy: &Tensor) -> Result<Tensor> {
    let [_, c, d, h, w] = s.dims5()?;
    let vol = d * h * w;
    let (sd, gd) = (s.data(), gy.data());
    let mut out = vec![0.0f32; s.len()];
    parallel::for_each_chunk_mut(&mut out, c * vol, |b, o| {
        let base = b * c * vol;
        for v in 0..vol {
            let dot: f32 = (0..c).map(|ch| sd[base + ch * vol + v] * gd[base + ch * vol + v]).sum();
            for ch in 0..c {
                let i = base + ch * vol + v;
                o[ch * vol + v] = sd[i] * (gd[i] - dot);
            }
        }
    });
    Tensor::new(s.shape().to_vec(), out)
}

/// Source taps for linear interpolation along one axis, align-corners=false.
fn linear_taps(len: usize, factor: usize) -> Vec<(usize, usize, f32)> {
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, (src - i0 as f64) as f32)
        })
        .collect()
}

/// Linear upsampling by `factor` along spatial `axis` (2, 3 or 4) of a 5-D tensor.
fn upsample_axis(x: &Tensor, axis: usize, factor: usize) -> Tensor {
    let dims = x.dims5().expect("5-D");
    let len = dims[axis];
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let taps = linear_taps(len, factor);
    let mut shape = dims.to_vec();
    shape[axis] = len * factor;
    let src = x.data();
    let olen = len * factor;
    let mut out = vec![0.0f32; outer * olen * inner];
    parallel::for_each_chunk_mut(&mut out, olen * inner, |o_i, o| {
        let xin = &src[o_i * len * inner..(o_i + 1) * len * inner];
        for (j, &(i0, i1, t)) in taps.iter().enumerate() {
            let (a, b) = (&xin[i0 * inner..(i0 + 1) * inner], &xin[i1 * inner..(i1 + 1) * inner]);
            for (k, y) in o[j * inner..(j + 1) * inner].iter_mut().enumerate() {
                *y = a[k] * (1.0 - t) + b[k] * t;
            }
        }
    });
    Tensor { shape, data: out }
}

/// Adjoint of [`upsample_axis`].
fn upsample_axis_adjoint(gy: &Tensor, axis: usize, factor: usize) -> Tensor {
    let dims = gy.dims5().expect("5-D");
    let olen = dims[axis];
    let len = olen / factor;
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let taps = linear_taps(len, factor);
    let mut shape = dims.to_vec();
    shape[axis] = len;
    let src = gy.data();
    let mut out = vec![0.0f32; outer * len * inner];
    parallel::for_each_chunk_mut(&mut out, len * inner, |o_i, o| {
        let g = &src[o_i * olen * inner..(o_i + 1) * olen * inner];
        for (j, &(i0, i1, t)) in taps.iter().enumerate() {
            for k in 0..inner {
                let v = g[j * inner + k];
                o[i0 * inner + k] += v * (1.0 - t);
                o[i1 * inner + k] += v * t;
            }
        }
    });
    Tensor { shape, data: out }
}

/// Trilinear upsampling by an integer factor (align-corners=false).
pub fn upsample_trilinear(x: &Tensor, factor: usize) -> Result<Tensor> {
    x.dims5()?;
    if factor == 0 {
        return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let t = upsample_axis(x, 4, factor);
    let t = upsample_axis(&t, 3, factor);
    Ok(upsample_axis(&t, 2, factor))
}

pub fn upsample_trilinear_backward(gy: &Tensor, factor: usize) -> Result<Tensor> {
    gy.dims5()?;
    if factor <= 1 {
        return Ok(gy.clone());
    }
    let t = upsample_axis_adjoint(gy, 2, factor);
    let t = upsample_axis_adjoint(&t, 3, factor);
    Ok(upsample_axis_adjoint(&t, 4, factor))
}
