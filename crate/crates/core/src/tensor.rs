//! Minimal dense tensor kernels for the stereo networks.
//!
//! Everything is `f64` and channel-major. 2D feature maps are volumes with
//! `d == 1`, which lets the feature and matching networks share one set of
//! convolution kernels. Convolutions run as im2col + a single dgemm; the
//! backward passes are written out explicitly. All kernels are deterministic:
//! no accumulation order depends on thread scheduling.

use crate::error::{Error, Result};

/// A (C, D, H, W) volume, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Vol {
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Vol {
    pub fn zeros(c: usize, d: usize, h: usize, w: usize) -> Vol {
        Vol { c, d, h, w, data: vec![0.0; c * d * h * w] }
    }

    pub fn from_vec(c: usize, d: usize, h: usize, w: usize, data: Vec<f64>) -> Vol {
        assert_eq!(data.len(), c * d * h * w);
        Vol { c, d, h, w, data }
    }

    #[inline]
    pub fn at(&self, c: usize, d: usize, h: usize, w: usize) -> f64 {
        self.data[((c * self.d + d) * self.h + h) * self.w + w]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, d: usize, h: usize, w: usize) -> &mut f64 {
        &mut self.data[((c * self.d + d) * self.h + h) * self.w + w]
    }

    pub fn spatial(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spatial();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.spatial();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Vol) -> bool {
        self.c == other.c && self.d == other.d && self.h == other.h && self.w == other.w
    }

    /// Concatenate volumes along the channel axis.
    pub fn concat_channels(parts: &[&Vol]) -> Vol {
        let (d, h, w) = (parts[0].d, parts[0].h, parts[0].w);
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut out = Vec::with_capacity(c * d * h * w);
        for p in parts {
            assert!(p.d == d && p.h == h && p.w == w, "concat shape mismatch");
            out.extend_from_slice(&p.data);
        }
        Vol { c, d, h, w, data: out }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A scalar (H, W) map: disparity, cost slice, loss gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(h: usize, w: usize) -> Grid {
        Grid { h, w, data: vec![0.0; h * w] }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f64>) -> Grid {
        assert_eq!(data.len(), h * w);
        Grid { h, w, data }
    }

    pub fn constant(h: usize, w: usize, v: f64) -> Grid {
        Grid { h, w, data: vec![v; h * w] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize) -> &mut f64 {
        &mut self.data[y * self.w + x]
    }
}

/// Boolean validity mask over an (H, W) map.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn filled(h: usize, w: usize, v: bool) -> Mask {
        Mask { h, w, data: vec![v; h * w] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Static shape of one convolution: kernel extents, stride, and zero padding
/// per spatial axis (depth, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub co: usize,
    pub ci: usize,
    pub kd: usize,
    pub kh: usize,
    pub kw: usize,
    pub sd: usize,
    pub sh: usize,
    pub sw: usize,
    pub pd: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvShape {
    /// Same-size 3x3 (2D) convolution over depth-1 volumes.
    pub fn conv2d_3x3(ci: usize, co: usize) -> ConvShape {
        ConvShape { co, ci, kd: 1, kh: 3, kw: 3, sd: 1, sh: 1, sw: 1, pd: 0, ph: 1, pw: 1 }
    }

    /// Downsampling 3x3 (2D) convolution with stride 3.
    pub fn conv2d_3x3_stride3(ci: usize, co: usize) -> ConvShape {
        ConvShape { co, ci, kd: 1, kh: 3, kw: 3, sd: 1, sh: 3, sw: 3, pd: 0, ph: 1, pw: 1 }
    }

    /// Same-size 3x3x3 convolution.
    pub fn conv3d_3x3x3(ci: usize, co: usize) -> ConvShape {
        ConvShape { co, ci, kd: 3, kh: 3, kw: 3, sd: 1, sh: 1, sw: 1, pd: 1, ph: 1, pw: 1 }
    }

    /// Pointwise projection (1x1 or 1x1x1).
    pub fn pointwise(ci: usize, co: usize) -> ConvShape {
        ConvShape { co, ci, kd: 1, kh: 1, kw: 1, sd: 1, sh: 1, sw: 1, pd: 0, ph: 0, pw: 0 }
    }

    pub fn kernel_volume(&self) -> usize {
        self.kd * self.kh * self.kw
    }

    pub fn weight_len(&self) -> usize {
        self.co * self.ci * self.kernel_volume()
    }

    pub fn out_dims(&self, d: usize, h: usize, w: usize) -> (usize, usize, usize) {
        let od = (d + 2 * self.pd - self.kd) / self.sd + 1;
        let oh = (h + 2 * self.ph - self.kh) / self.sh + 1;
        let ow = (w + 2 * self.pw - self.kw) / self.sw + 1;
        (od, oh, ow)
    }
}

fn dgemm_rowmajor(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// c(m,n) += a^T(m,k) * b(k,n) where `a` is stored (k, m) row-major.
fn dgemm_at_b(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), 1, m as isize, b.as_ptr(), n as isize, 1, 0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// c(m,n) += a(m,k) * b^T(k,n) where `b` is stored (n, k) row-major.
fn dgemm_a_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, 0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Unfold the padded input into a (ci*kd*kh*kw, od*oh*ow) column matrix.
fn im2col(x: &Vol, cs: &ConvShape, od: usize, oh: usize, ow: usize) -> Vec<f64> {
    let kk = cs.kernel_volume();
    let n = od * oh * ow;
    let mut cols = vec![0.0; cs.ci * kk * n];
    for ci in 0..cs.ci {
        let chan = x.channel(ci);
        for kd in 0..cs.kd {
            for kh in 0..cs.kh {
                for kw in 0..cs.kw {
                    let row = ((ci * cs.kd + kd) * cs.kh + kh) * cs.kw + kw;
                    let dst_row = &mut cols[row * n..(row + 1) * n];
                    for odi in 0..od {
                        let id = (odi * cs.sd + kd) as isize - cs.pd as isize;
                        if id < 0 || id as usize >= x.d {
                            continue;
                        }
                        for ohi in 0..oh {
                            let ih = (ohi * cs.sh + kh) as isize - cs.ph as isize;
                            if ih < 0 || ih as usize >= x.h {
                                continue;
                            }
                            let src_base = (id as usize * x.h + ih as usize) * x.w;
                            let dst_base = (odi * oh + ohi) * ow;
                            if cs.sw == 1 {
                                // contiguous run along the width axis
                                let shift = kw as isize - cs.pw as isize;
                                let lo = (-shift).max(0) as usize;
                                let hi = ow.min((x.w as isize - shift).max(0) as usize);
                                if lo < hi {
                                    let src_lo = (lo as isize + shift) as usize;
                                    dst_row[dst_base + lo..dst_base + hi].copy_from_slice(
                                        &chan[src_base + src_lo..src_base + src_lo + (hi - lo)],
                                    );
                                }
                            } else {
                                for owi in 0..ow {
                                    let iw = (owi * cs.sw + kw) as isize - cs.pw as isize;
                                    if iw >= 0 && (iw as usize) < x.w {
                                        dst_row[dst_base + owi] = chan[src_base + iw as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold a column-gradient matrix back onto the input gradient.
fn col2im(grad_cols: &[f64], cs: &ConvShape, gx: &mut Vol, od: usize, oh: usize, ow: usize) {
    let n = od * oh * ow;
    let (xd, xh, xw) = (gx.d, gx.h, gx.w);
    for ci in 0..cs.ci {
        for kd in 0..cs.kd {
            for kh in 0..cs.kh {
                for kw in 0..cs.kw {
                    let row = ((ci * cs.kd + kd) * cs.kh + kh) * cs.kw + kw;
                    let src_row = &grad_cols[row * n..(row + 1) * n];
                    let chan = gx.channel_mut(ci);
                    for odi in 0..od {
                        let id = (odi * cs.sd + kd) as isize - cs.pd as isize;
                        if id < 0 || id as usize >= xd {
                            continue;
                        }
                        for ohi in 0..oh {
                            let ih = (ohi * cs.sh + kh) as isize - cs.ph as isize;
                            if ih < 0 || ih as usize >= xh {
                                continue;
                            }
                            let dst_base = (id as usize * xh + ih as usize) * xw;
                            let src_base = (odi * oh + ohi) * ow;
                            for owi in 0..ow {
                                let iw = (owi * cs.sw + kw) as isize - cs.pw as isize;
                                if iw >= 0 && (iw as usize) < xw {
                                    chan[dst_base + iw as usize] += src_row[src_base + owi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// y = conv(x; w) + b. Weights are (co, ci, kd, kh, kw) row-major.
pub fn conv_forward(x: &Vol, w: &[f64], b: &[f64], cs: &ConvShape) -> Vol {
    assert_eq!(x.c, cs.ci, "conv input channels");
    assert_eq!(w.len(), cs.weight_len());
    assert_eq!(b.len(), cs.co);
    let (od, oh, ow) = cs.out_dims(x.d, x.h, x.w);
    let n = od * oh * ow;
    let k = cs.ci * cs.kernel_volume();
    let cols = im2col(x, cs, od, oh, ow);
    let mut out = Vol::zeros(cs.co, od, oh, ow);
    dgemm_rowmajor(cs.co, k, n, w, &cols, &mut out.data);
    for co in 0..cs.co {
        let bias = b[co];
        for v in out.channel_mut(co) {
            *v += bias;
        }
    }
    out
}

pub struct ConvGrads {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Backward pass. Recomputes im2col from the saved input rather than caching
/// the column matrix, trading a little compute for a small context.
pub fn conv_backward(
    x: &Vol,
    w: &[f64],
    cs: &ConvShape,
    grad_out: &Vol,
    want_param_grads: bool,
) -> (Vol, Option<ConvGrads>) {
    let (od, oh, ow) = cs.out_dims(x.d, x.h, x.w);
    assert!(grad_out.c == cs.co && grad_out.d == od && grad_out.h == oh && grad_out.w == ow);
    let n = od * oh * ow;
    let k = cs.ci * cs.kernel_volume();

    let cols = im2col(x, cs, od, oh, ow);

    let grads = if want_param_grads {
        let mut gw = vec![0.0; cs.weight_len()];
        dgemm_a_bt(cs.co, n, k, &grad_out.data, &cols, &mut gw);
        let gb: Vec<f64> = (0..cs.co)
            .map(|co| grad_out.channel(co).iter().sum())
            .collect();
        Some(ConvGrads { w: gw, b: gb })
    } else {
        None
    };

    let mut grad_cols = vec![0.0; k * n];
    dgemm_at_b(k, cs.co, n, w, &grad_out.data, &mut grad_cols);
    let mut gx = Vol::zeros(x.c, x.d, x.h, x.w);
    col2im(&grad_cols, cs, &mut gx, od, oh, ow);
    (gx, grads)
}

// ---------------------------------------------------------------------------
// Per-channel affine normalization
// ---------------------------------------------------------------------------

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

pub struct NormCtx {
    /// Normalized activations, kept for the backward pass.
    pub xhat: Vol,
    pub inv_std: Vec<f64>,
}

/// Training-mode normalization: statistics over the current sample's spatial
/// extent, with an exponential update of the running statistics.
pub fn norm_forward_train(
    x: &Vol,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &mut [f64],
    running_var: &mut [f64],
) -> (Vol, NormCtx) {
    let n = x.spatial() as f64;
    let mut y = Vol::zeros(x.c, x.d, x.h, x.w);
    let mut xhat = Vol::zeros(x.c, x.d, x.h, x.w);
    let mut inv_std = vec![0.0; x.c];
    for c in 0..x.c {
        let chan = x.channel(c);
        let mean = chan.iter().sum::<f64>() / n;
        let var = chan.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        running_mean[c] = (1.0 - NORM_MOMENTUM) * running_mean[c] + NORM_MOMENTUM * mean;
        running_var[c] = (1.0 - NORM_MOMENTUM) * running_var[c] + NORM_MOMENTUM * var;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[c] = is;
        let (g, b) = (gamma[c], beta[c]);
        let xh = xhat.channel_mut(c);
        for (i, v) in chan.iter().enumerate() {
            xh[i] = (v - mean) * is;
        }
        let yc = y.channel_mut(c);
        for (i, v) in xh.iter().enumerate() {
            yc[i] = g * v + b;
        }
    }
    (y, NormCtx { xhat, inv_std })
}

pub struct NormGrads {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn norm_backward_train(
    ctx: &NormCtx,
    gamma: &[f64],
    grad_out: &Vol,
) -> (Vol, NormGrads) {
    let x = &ctx.xhat;
    let n = x.spatial() as f64;
    let mut gx = Vol::zeros(x.c, x.d, x.h, x.w);
    let mut dgamma = vec![0.0; x.c];
    let mut dbeta = vec![0.0; x.c];
    for c in 0..x.c {
        let go = grad_out.channel(c);
        let xh = x.channel(c);
        let sum_go: f64 = go.iter().sum();
        let sum_goxh: f64 = go.iter().zip(xh).map(|(a, b)| a * b).sum();
        dbeta[c] = sum_go;
        dgamma[c] = sum_goxh;
        let scale = gamma[c] * ctx.inv_std[c];
        let mean_go = sum_go / n;
        let mean_goxh = sum_goxh / n;
        let out = gx.channel_mut(c);
        for i in 0..out.len() {
            out[i] = scale * (go[i] - mean_go - xh[i] * mean_goxh);
        }
    }
    (gx, NormGrads { gamma: dgamma, beta: dbeta })
}

/// Inference-mode normalization with frozen running statistics.
pub fn norm_forward_eval(
    x: &Vol,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
) -> Vol {
    let mut y = Vol::zeros(x.c, x.d, x.h, x.w);
    for c in 0..x.c {
        let scale = gamma[c] / (running_var[c] + NORM_EPS).sqrt();
        let shift = beta[c] - running_mean[c] * scale;
        let chan = x.channel(c);
        let yc = y.channel_mut(c);
        for i in 0..chan.len() {
            yc[i] = chan[i] * scale + shift;
        }
    }
    y
}

/// Backward through eval-mode normalization (an affine map): input gradient
/// only. Used when gradients flow through frozen cells.
pub fn norm_backward_eval(
    gamma: &[f64],
    running_var: &[f64],
    grad_out: &Vol,
) -> Vol {
    let mut gx = Vol::zeros(grad_out.c, grad_out.d, grad_out.h, grad_out.w);
    for c in 0..grad_out.c {
        let scale = gamma[c] / (running_var[c] + NORM_EPS).sqrt();
        let go = grad_out.channel(c);
        let out = gx.channel_mut(c);
        for i in 0..out.len() {
            out[i] = go[i] * scale;
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Activation
// ---------------------------------------------------------------------------

pub const LEAKY_SLOPE: f64 = 0.1;

pub fn leaky_relu(x: &Vol) -> Vol {
    let mut y = x.clone();
    for v in &mut y.data {
        if *v < 0.0 {
            *v *= LEAKY_SLOPE;
        }
    }
    y
}

/// `y` must be the activation output; its sign determines the branch.
pub fn leaky_relu_backward(y: &Vol, grad_out: &Vol) -> Vol {
    let mut gx = grad_out.clone();
    for (g, v) in gx.data.iter_mut().zip(&y.data) {
        if *v <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Bilinear upsampling (feature resolution -> full resolution)
// ---------------------------------------------------------------------------

fn upsample_weights(out_len: usize, src_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    // half-pixel-centred mapping, clamped at the borders
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) / factor as f64 - 0.5;
            let src = src.max(0.0).min((src_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            let f = src - i0 as f64;
            (i0, i1, f)
        })
        .collect()
}

/// Bilinear upsample by an integer factor with half-pixel alignment.
pub fn upsample_bilinear(src: &Grid, factor: usize) -> Grid {
    let (oh, ow) = (src.h * factor, src.w * factor);
    let wy = upsample_weights(oh, src.h, factor);
    let wx = upsample_weights(ow, src.w, factor);
    let mut out = Grid::zeros(oh, ow);
    for y in 0..oh {
        let (y0, y1, fy) = wy[y];
        for x in 0..ow {
            let (x0, x1, fx) = wx[x];
            let v00 = src.at(y0, x0);
            let v01 = src.at(y0, x1);
            let v10 = src.at(y1, x0);
            let v11 = src.at(y1, x1);
            *out.at_mut(y, x) =
                (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
        }
    }
    out
}

/// Transpose of [`upsample_bilinear`].
pub fn upsample_bilinear_backward(grad_out: &Grid, src_h: usize, src_w: usize, factor: usize) -> Grid {
    let wy = upsample_weights(grad_out.h, src_h, factor);
    let wx = upsample_weights(grad_out.w, src_w, factor);
    let mut gx = Grid::zeros(src_h, src_w);
    for y in 0..grad_out.h {
        let (y0, y1, fy) = wy[y];
        for x in 0..grad_out.w {
            let (x0, x1, fx) = wx[x];
            let g = grad_out.at(y, x);
            *gx.at_mut(y0, x0) += (1.0 - fy) * (1.0 - fx) * g;
            *gx.at_mut(y0, x1) += (1.0 - fy) * fx * g;
            *gx.at_mut(y1, x0) += fy * (1.0 - fx) * g;
            *gx.at_mut(y1, x1) += fy * fx * g;
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Reflection padding helper for inputs whose extent is not divisible by 3
// ---------------------------------------------------------------------------

/// Reflection-pad the right/bottom edges so height and width are divisible
/// by `multiple`. Returns the padded volume and the original (h, w).
pub fn pad_to_multiple(x: &Vol, multiple: usize) -> Result<(Vol, usize, usize)> {
    let (h, w) = (x.h, x.w);
    let ph = (multiple - h % multiple) % multiple;
    let pw = (multiple - w % multiple) % multiple;
    if ph == 0 && pw == 0 {
        return Ok((x.clone(), h, w));
    }
    if ph >= h || pw >= w {
        return Err(Error::ShapeMismatch(format!(
            "input {h}x{w} too small to reflection-pad to a multiple of {multiple}"
        )));
    }
    let (nh, nw) = (h + ph, w + pw);
    let mut out = Vol::zeros(x.c, x.d, nh, nw);
    for c in 0..x.c {
        for d in 0..x.d {
            for y in 0..nh {
                let sy = if y < h { y } else { 2 * h - 2 - y };
                for xx in 0..nw {
                    let sx = if xx < w { xx } else { 2 * w - 2 - xx };
                    *out.at_mut(c, d, y, xx) = x.at(c, d, sy, sx);
                }
            }
        }
    }
    Ok((out, h, w))
}
