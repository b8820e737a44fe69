//! 3-D convolution and transposed convolution.
//!
//! Both operators are built from three per-sample primitives over a shared
//! geometry (a "wide" grid convolved down to a "narrow" grid):
//!
//! * `forward`: `narrow = W · im2col(wide)`
//! * `adjoint`: `wide += col2im(Wᵀ · narrow)`
//! * `weight_grad`: `gW += narrow · im2col(wide)ᵀ`
//!
//! A convolution uses them as forward / input-grad / weight-grad; a transposed
//! convolution swaps the roles of `forward` and `adjoint`. The column matrix is
//! materialised one slab of output depth-planes at a time to bound memory.

use super::Tensor;
use crate::error::{Error, Result};
use crate::parallel;

/// Geometry of a 3-D convolution or transposed convolution.
///
/// For a transposed convolution `in_channels` are the channels of the (coarse)
/// input and `out_channels` those of the upsampled output, as in PyTorch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output_padding: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn cubic(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            kernel: [kernel; 3],
            stride: [stride; 3],
            padding: [padding; 3],
            output_padding: [0; 3],
            in_channels,
            out_channels,
        }
    }

    pub fn with_output_padding(mut self, op: usize) -> Self {
        self.output_padding = [op; 3];
        self
    }

    fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.stride[a] == 0 {
                return Err(Error::InvalidArgument(format!("stride on axis {a} must be >= 1")));
            }
            if self.kernel[a] == 0 {
                return Err(Error::InvalidArgument(format!("kernel on axis {a} must be >= 1")));
            }
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument("channel counts must be >= 1".into()));
        }
        Ok(())
    }

    /// Output spatial extents of a convolution: `floor((L + 2p - k) / s) + 1`.
    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.validate()?;
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] {
                return Err(Error::InvalidArgument(format!(
                    "spatial axis {a}: padded extent {padded} smaller than kernel {}",
                    self.kernel[a]
                )));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// Output spatial extents of a transposed convolution:
    /// `(L - 1)·s - 2p + k + output_padding`.
    pub fn transposed_output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        self.validate()?;
        let mut out = [0; 3];
        for a in 0..3 {
            if self.output_padding[a] >= self.stride[a] {
                return Err(Error::InvalidArgument(format!(
                    "output_padding {} must be smaller than stride {} on axis {a}",
                    self.output_padding[a], self.stride[a]
                )));
            }
            if input[a] == 0 {
                return Err(Error::InvalidArgument(format!("empty input on spatial axis {a}")));
            }
            let full = (input[a] - 1) * self.stride[a] + self.kernel[a] + self.output_padding[a];
            if full <= 2 * self.padding[a] {
                return Err(Error::InvalidArgument(format!(
                    "transposed output on spatial axis {a} would be empty"
                )));
            }
            out[a] = full - 2 * self.padding[a];
        }
        Ok(out)
    }
}

/// Wide-to-narrow convolution geometry for a single sample.
#[derive(Clone, Copy, Debug)]
struct Geom {
    /// channels of the wide grid
    ci: usize,
    /// channels of the narrow grid
    co: usize,
    k: [usize; 3],
    s: [usize; 3],
    p: [usize; 3],
    wide: [usize; 3],
    narrow: [usize; 3],
}

const SLAB_FLOATS: usize = 1 << 20;

impl Geom {
    fn ck(&self) -> usize {
        self.ci * self.k[0] * self.k[1] * self.k[2]
    }
    fn wide_len(&self) -> usize {
        self.wide.iter().product()
    }
    fn narrow_len(&self) -> usize {
        self.narrow.iter().product()
    }
    fn plane(&self) -> usize {
        self.narrow[1] * self.narrow[2]
    }
    fn is_pointwise(&self) -> bool {
        self.k == [1, 1, 1] && self.s == [1, 1, 1] && self.p == [0, 0, 0]
    }
    /// Output depth-planes per column slab.
    fn slab_planes(&self) -> usize {
        (SLAB_FLOATS / (self.ck() * self.plane()).max(1)).clamp(1, self.narrow[0])
    }
}

/// Fill `col` (rows `ci·k³`, columns = planes `d0..d1` of the narrow grid).
fn im2col(x: &[f32], g: &Geom, d0: usize, d1: usize, col: &mut [f32]) {
    let [kd, kh, kw] = g.k;
    let [wd, wh, ww] = g.wide;
    let [_, nh, nw] = g.narrow;
    let cols = (d1 - d0) * nh * nw;
    let mut row = 0;
    for c in 0..g.ci {
        let xc = &x[c * wd * wh * ww..(c + 1) * wd * wh * ww];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    let mut j = 0;
                    for od in d0..d1 {
                        let id = (od * g.s[0] + a) as isize - g.p[0] as isize;
                        for oh in 0..nh {
                            let ih = (oh * g.s[1] + b) as isize - g.p[1] as isize;
                            let seg = &mut dst[j..j + nw];
                            j += nw;
                            if id < 0 || id >= wd as isize || ih < 0 || ih >= wh as isize {
                                seg.fill(0.0);
                                continue;
                            }
                            let base = (id as usize * wh + ih as usize) * ww;
                            let xr = &xc[base..base + ww];
                            for (ow, v) in seg.iter_mut().enumerate() {
                                let iw = (ow * g.s[2] + e) as isize - g.p[2] as isize;
                                *v = if iw >= 0 && (iw as usize) < ww { xr[iw as usize] } else { 0.0 };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `col` back into `x`.
fn col2im(col: &[f32], g: &Geom, d0: usize, d1: usize, x: &mut [f32]) {
    let [kd, kh, kw] = g.k;
    let [wd, wh, ww] = g.wide;
    let [_, nh, nw] = g.narrow;
    let cols = (d1 - d0) * nh * nw;
    let mut row = 0;
    for c in 0..g.ci {
        let xc = &mut x[c * wd * wh * ww..(c + 1) * wd * wh * ww];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &col[row * cols..(row + 1) * cols];
                    let mut j = 0;
                    for od in d0..d1 {
                        let id = (od * g.s[0] + a) as isize - g.p[0] as isize;
                        for oh in 0..nh {
                            let ih = (oh * g.s[1] + b) as isize - g.p[1] as isize;
                            let seg = &src[j..j + nw];
                            j += nw;
                            if id < 0 || id >= wd as isize || ih < 0 || ih >= wh as isize {
                                continue;
                            }
                            let base = (id as usize * wh + ih as usize) * ww;
                            let xr = &mut xc[base..base + ww];
                            for (ow, v) in seg.iter().enumerate() {
                                let iw = (ow * g.s[2] + e) as isize - g.p[2] as isize;
                                if iw >= 0 && (iw as usize) < ww {
                                    xr[iw as usize] += *v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `c[m×n] = alpha·a[m×k]·b[k×n] + beta·c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserted bounds cover every element the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `narrow = W · im2col(wide)` for one sample; `w` is `[co, ci·k³]`.
fn forward_sample(wide: &[f32], w: &[f32], g: &Geom, out: &mut [f32]) {
    let l = g.narrow_len();
    let ck = g.ck();
    if g.is_pointwise() {
        gemm(g.co, ck, l, w, (ck, 1), wide, (l, 1), 0.0, out, (l, 1));
        return;
    }
    let step = g.slab_planes();
    let mut col = vec![0.0f32; ck * step * g.plane()];
    let mut d0 = 0;
    while d0 < g.narrow[0] {
        let d1 = (d0 + step).min(g.narrow[0]);
        let cols = (d1 - d0) * g.plane();
        let col = &mut col[..ck * cols];
        im2col(wide, g, d0, d1, col);
        let off = d0 * g.plane();
        gemm(g.co, ck, cols, w, (ck, 1), col, (cols, 1), 0.0, &mut out[off..], (l, 1));
        d0 = d1;
    }
}

/// `wide += col2im(Wᵀ · narrow)` for one sample.
fn adjoint_sample(narrow: &[f32], w: &[f32], g: &Geom, wide: &mut [f32]) {
    let l = g.narrow_len();
    let ck = g.ck();
    if g.is_pointwise() {
        gemm(ck, g.co, l, w, (1, ck), narrow, (l, 1), 1.0, wide, (l, 1));
        return;
    }
    let step = g.slab_planes();
    let mut col = vec![0.0f32; ck * step * g.plane()];
    let mut d0 = 0;
    while d0 < g.narrow[0] {
        let d1 = (d0 + step).min(g.narrow[0]);
        let cols = (d1 - d0) * g.plane();
        let col = &mut col[..ck * cols];
        let off = d0 * g.plane();
        gemm(ck, g.co, cols, w, (1, ck), &narrow[off..], (l, 1), 0.0, col, (cols, 1));
        col2im(col, g, d0, d1, wide);
        d0 = d1;
    }
}

/// `gw += narrow · im2col(wide)ᵀ` for one sample.
fn weight_grad_sample(wide: &[f32], narrow: &[f32], g: &Geom, gw: &mut [f32]) {
    let l = g.narrow_len();
    let ck = g.ck();
    if g.is_pointwise() {
        gemm(g.co, l, ck, narrow, (l, 1), wide, (1, l), 1.0, gw, (ck, 1));
        return;
    }
    let step = g.slab_planes();
    let mut col = vec![0.0f32; ck * step * g.plane()];
    let mut d0 = 0;
    while d0 < g.narrow[0] {
        let d1 = (d0 + step).min(g.narrow[0]);
        let cols = (d1 - d0) * g.plane();
        let col = &mut col[..ck * cols];
        im2col(wide, g, d0, d1, col);
        let off = d0 * g.plane();
        gemm(g.co, cols, ck, &narrow[off..], (l, 1), col, (1, cols), 1.0, gw, (ck, 1));
        d0 = d1;
    }
}

fn batched_forward(n: usize, wide: &[f32], w: &[f32], g: &Geom) -> Vec<f32> {
    let (wl, nl) = (g.ci * g.wide_len(), g.co * g.narrow_len());
    let mut out = vec![0.0f32; n * nl];
    parallel::for_each_chunk_mut(&mut out, nl, |s, o| {
        forward_sample(&wide[s * wl..(s + 1) * wl], w, g, o)
    });
    out
}

fn batched_adjoint(n: usize, narrow: &[f32], w: &[f32], g: &Geom) -> Vec<f32> {
    let (wl, nl) = (g.ci * g.wide_len(), g.co * g.narrow_len());
    let mut out = vec![0.0f32; n * wl];
    parallel::for_each_chunk_mut(&mut out, wl, |s, o| {
        adjoint_sample(&narrow[s * nl..(s + 1) * nl], w, g, o)
    });
    out
}

fn batched_weight_grad(n: usize, wide: &[f32], narrow: &[f32], g: &Geom) -> Vec<f32> {
    let (wl, nl) = (g.ci * g.wide_len(), g.co * g.narrow_len());
    let wlen = g.co * g.ck();
    let partials = parallel::map_range(n, |s| {
        let mut gw = vec![0.0f32; wlen];
        weight_grad_sample(&wide[s * wl..(s + 1) * wl], &narrow[s * nl..(s + 1) * nl], g, &mut gw);
        gw
    });
    let mut gw = vec![0.0f32; wlen];
    for p in partials {
        for (a, b) in gw.iter_mut().zip(p) {
            *a += b;
        }
    }
    gw
}

fn spatial(dims: [usize; 5]) -> [usize; 3] {
    [dims[2], dims[3], dims[4]]
}

fn dims_of(shape: &[usize]) -> Result<[usize; 5]> {
    match *shape {
        [n, c, d, h, w] => Ok([n, c, d, h, w]),
        _ => Err(Error::shape("rank", 5, shape.len())),
    }
}

fn check_weights(w: &Tensor, expect: [usize; 5], names: [&str; 2]) -> Result<()> {
    let wd = w.dims5().map_err(|_| Error::shape("weight rank", 5, w.shape().len()))?;
    for (i, axis) in ["kernel depth", "kernel height", "kernel width"].iter().enumerate() {
        if wd[i + 2] != expect[i + 2] {
            return Err(Error::shape(*axis, expect[i + 2], wd[i + 2]));
        }
    }
    if wd[0] != expect[0] {
        return Err(Error::shape(names[0], expect[0], wd[0]));
    }
    if wd[1] != expect[1] {
        return Err(Error::shape(names[1], expect[1], wd[1]));
    }
    Ok(())
}

fn add_bias(out: &mut [f32], bias: &Tensor, n: usize, c: usize) -> Result<()> {
    if bias.len() != c {
        return Err(Error::shape("bias length", c, bias.len()));
    }
    let vol = out.len() / (n * c).max(1);
    for (i, chunk) in out.chunks_mut(vol).enumerate() {
        let b = bias.data()[i % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Ok(())
}

fn conv_geom(x: [usize; 5], spec: &ConvSpec) -> Result<Geom> {
    if x[1] != spec.in_channels {
        return Err(Error::shape("input channels", spec.in_channels, x[1]));
    }
    Ok(Geom {
        ci: spec.in_channels,
        co: spec.out_channels,
        k: spec.kernel,
        s: spec.stride,
        p: spec.padding,
        wide: spatial(x),
        narrow: spec.output_extents(spatial(x))?,
    })
}

fn transposed_geom(x: [usize; 5], spec: &ConvSpec) -> Result<Geom> {
    if x[1] != spec.in_channels {
        return Err(Error::shape("input channels", spec.in_channels, x[1]));
    }
    let wide = spec.transposed_output_extents(spatial(x))?;
    Ok(Geom {
        ci: spec.out_channels,
        co: spec.in_channels,
        k: spec.kernel,
        s: spec.stride,
        p: spec.padding,
        wide,
        narrow: spatial(x),
    })
}

/// 3-D convolution of `x: [N, Ci, D, H, W]` with `w: [Co, Ci, kd, kh, kw]`.
pub fn conv3d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let xd = x.dims5()?;
    let g = conv_geom(xd, spec)?;
    check_weights(w, [g.co, g.ci, g.k[0], g.k[1], g.k[2]], ["weight out-channels", "weight in-channels"])?;
    let mut out = batched_forward(xd[0], x.data(), w.data(), &g);
    if let Some(b) = bias {
        add_bias(&mut out, b, xd[0], g.co)?;
    }
    Tensor::new(vec![xd[0], g.co, g.narrow[0], g.narrow[1], g.narrow[2]], out)
}

/// Gradient of [`conv3d`] with respect to its input, given the output gradient.
pub fn conv3d_backward_input(gy: &Tensor, w: &Tensor, spec: &ConvSpec, input_shape: &[usize]) -> Result<Tensor> {
    let xd = dims_of(input_shape)?;
    let g = conv_geom(xd, spec)?;
    let gyd = gy.dims5()?;
    if spatial(gyd) != g.narrow || gyd[1] != g.co {
        return Err(Error::InvalidArgument("output gradient does not match convolution output".into()));
    }
    Tensor::new(input_shape.to_vec(), batched_adjoint(xd[0], gy.data(), w.data(), &g))
}

/// Gradient of [`conv3d`] with respect to its weights.
pub fn conv3d_backward_weight(x: &Tensor, gy: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let xd = x.dims5()?;
    let g = conv_geom(xd, spec)?;
    let gw = batched_weight_grad(xd[0], x.data(), gy.data(), &g);
    Tensor::new(vec![g.co, g.ci, g.k[0], g.k[1], g.k[2]], gw)
}

/// 3-D transposed convolution of `x: [N, Ci, ...]` with `w: [Ci, Co, kd, kh, kw]`.
pub fn conv_transpose3d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let xd = x.dims5()?;
    let g = transposed_geom(xd, spec)?;
    check_weights(w, [g.co, g.ci, g.k[0], g.k[1], g.k[2]], ["weight in-channels", "weight out-channels"])?;
    let mut out = batched_adjoint(xd[0], x.data(), w.data(), &g);
    if let Some(b) = bias {
        add_bias(&mut out, b, xd[0], g.ci)?;
    }
    Tensor::new(vec![xd[0], g.ci, g.wide[0], g.wide[1], g.wide[2]], out)
}

/// Gradient of [`conv_transpose3d`] with respect to its input.
pub fn conv_transpose3d_backward_input(gy: &Tensor, w: &Tensor, spec: &ConvSpec, input_shape: &[usize]) -> Result<Tensor> {
    let xd = dims_of(input_shape)?;
    let g = transposed_geom(xd, spec)?;
    Tensor::new(input_shape.to_vec(), batched_forward(xd[0], gy.data(), w.data(), &g))
}

/// Gradient of [`conv_transpose3d`] with respect to its weights.
pub fn conv_transpose3d_backward_weight(x: &Tensor, gy: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let xd = x.dims5()?;
    let g = transposed_geom(xd, spec)?;
    let gw = batched_weight_grad(xd[0], gy.data(), x.data(), &g);
    Tensor::new(vec![g.co, g.ci, g.k[0], g.k[1], g.k[2]], gw)
}

/// Per-channel sum over batch and space; the bias gradient of either convolution.
pub fn channel_sum(gy: &Tensor) -> Result<Tensor> {
    let [n, c, d, h, w] = gy.dims5()?;
    let vol = d * h * w;
    let mut out = vec![0.0f32; c];
    for s in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            let off = (s * c + ch) * vol;
            *o += gy.data()[off..off + vol].iter().map(|&v| v as f64).sum::<f64>() as f32;
        }
    }
    Tensor::new(vec![c], out)
}
