//! Forward and backward compute kernels on raw buffers.
//!
//! Batch elements are processed in parallel; any cross-sample reduction
//! (weight gradients) is summed afterwards in batch order, so results are
//! bit-identical for every thread count.

use rayon::prelude::*;

use super::gemm::{gemm, Mat};
use super::{PadMode, Padding, Real, Shape, Tensor};
use crate::error::{Error, Result};

#[inline]
fn resolve(i: isize, len: usize, mode: PadMode) -> Option<usize> {
    if i >= 0 && (i as usize) < len {
        Some(i as usize)
    } else {
        match mode {
            PadMode::Zero => None,
            PadMode::Replicate => Some(i.clamp(0, len as isize - 1) as usize),
        }
    }
}

// ---------------------------------------------------------------- conv2d

#[derive(Copy, Clone, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: Padding,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(input: Shape, weight: Shape, stride: usize, pad: Padding) -> Result<Self> {
        let [_, c_in, h, w] = input.0;
        let [c_out, wc, kh, kw] = weight.0;
        if wc != c_in {
            return Err(Error::shape(format!(
                "conv2d: input has {c_in} channels but weight expects {wc}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be at least 1"));
        }
        let (hp, wp) = (h + 2 * pad.amount, w + 2 * pad.amount);
        if hp < kh || wp < kw {
            return Err(Error::shape(format!(
                "conv2d: {kh}×{kw} kernel does not fit padded {hp}×{wp} input"
            )));
        }
        let h_out = (hp - kh) / stride + 1;
        let w_out = (wp - kw) / stride + 1;
        if h_out == 0 || w_out == 0 {
            return Err(Error::shape("conv2d: zero-size output"));
        }
        Ok(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad.amount == 0
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.out_plane();
    let pad = g.pad.amount as isize;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let out_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    let Some(iy) = resolve(iy, g.h, g.pad.mode) else {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    };
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *v = match resolve(ix, g.w, g.pad.mode) {
                            Some(ix) => src[ix],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.out_plane();
    let pad = g.pad.amount as isize;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let Some(iy) = resolve(iy, g.h, g.pad.mode) else {
                        continue;
                    };
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if let Some(ix) = resolve(ix, g.w, g.pad.mode) {
                            plane[iy * g.w + ix] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Tensor<T> {
    let batch = x.shape().batch();
    let out_shape = Shape::new(batch, g.c_out, g.h_out, g.w_out);
    let mut out = vec![T::zero(); out_shape.numel()];
    let per_out = g.c_out * g.out_plane();
    let wmat = Mat::new(weight.data(), g.c_out, g.patch());
    out.par_chunks_mut(per_out)
        .enumerate()
        .for_each(|(b, out_b)| {
            let xb = x.sample(b);
            if g.is_pointwise() {
                gemm(wmat, Mat::new(xb, g.c_in, g.out_plane()), T::zero(), out_b);
            } else {
                let mut cols = vec![T::zero(); g.patch() * g.out_plane()];
                im2col(xb, g, &mut cols);
                gemm(wmat, Mat::new(&cols, g.patch(), g.out_plane()), T::zero(), out_b);
            }
            if let Some(bias) = bias {
                for (o, plane) in out_b.chunks_mut(g.out_plane()).enumerate() {
                    let bv = bias.data()[o];
                    plane.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    Tensor::new(out_shape, out).expect("conv output shape")
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    g_out: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_x, need_w, need_b) = need;
    let batch = x.shape().batch();
    let per_out = g.c_out * g.out_plane();
    let per_in = g.c_in * g.h * g.w;
    let wmat = Mat::new(weight.data(), g.c_out, g.patch());

    let partials: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let gb = Mat::new(&g_out[b * per_out..(b + 1) * per_out], g.c_out, g.out_plane());
            let xb = x.sample(b);
            let mut dw = None;
            let mut dx = None;
            if g.is_pointwise() {
                if need_w {
                    let mut d = vec![T::zero(); g.c_out * g.patch()];
                    gemm(gb, Mat::new(xb, g.c_in, g.out_plane()).t(), T::zero(), &mut d);
                    dw = Some(d);
                }
                if need_x {
                    let mut d = vec![T::zero(); per_in];
                    gemm(wmat.t(), gb, T::zero(), &mut d);
                    dx = Some(d);
                }
            } else {
                if need_w {
                    let mut cols = vec![T::zero(); g.patch() * g.out_plane()];
                    im2col(xb, g, &mut cols);
                    let mut d = vec![T::zero(); g.c_out * g.patch()];
                    gemm(gb, Mat::new(&cols, g.patch(), g.out_plane()).t(), T::zero(), &mut d);
                    dw = Some(d);
                }
                if need_x {
                    let mut dcols = vec![T::zero(); g.patch() * g.out_plane()];
                    gemm(wmat.t(), gb, T::zero(), &mut dcols);
                    let mut d = vec![T::zero(); per_in];
                    col2im(&dcols, g, &mut d);
                    dx = Some(d);
                }
            }
            (dx, dw)
        })
        .collect();

    let mut grads = ConvGrads {
        input: need_x.then(|| Vec::with_capacity(batch * per_in)),
        weight: need_w.then(|| vec![T::zero(); g.c_out * g.patch()]),
        bias: None,
    };
    for (dx, dw) in partials {
        if let (Some(acc), Some(dx)) = (grads.input.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
        if let (Some(acc), Some(dw)) = (grads.weight.as_mut(), dw) {
            for (a, d) in acc.iter_mut().zip(&dw) {
                *a += *d;
            }
        }
    }
    if need_b {
        let mut db = vec![T::zero(); g.c_out];
        for b in 0..batch {
            for (o, acc) in db.iter_mut().enumerate() {
                let start = b * per_out + o * g.out_plane();
                *acc += g_out[start..start + g.out_plane()].iter().copied().sum::<T>();
            }
        }
        grads.bias = Some(db);
    }
    grads
}

// ---------------------------------------------------------- local filter

/// Geometry of per-pixel filtering: `k×k` taps, output stride, leading offset.
#[derive(Copy, Clone, Debug)]
pub(crate) struct FilterGeom {
    pub k: usize,
    pub stride: usize,
    pub pad: Padding,
    pub h: usize,
    pub w: usize,
    pub h_out: usize,
    pub w_out: usize,
    /// Padded plane size covering every tap that is read.
    pub hp: usize,
    pub wp: usize,
}

impl FilterGeom {
    pub fn new(h: usize, w: usize, h_out: usize, w_out: usize, k: usize, stride: usize, pad: Padding) -> Result<Self> {
        if k == 0 || stride == 0 {
            return Err(Error::invalid("local filter: kernel size and stride must be positive"));
        }
        if h != stride * h_out || w != stride * w_out {
            return Err(Error::shape(format!(
                "local filter: {h}×{w} input is inconsistent with {h_out}×{w_out} output at stride {stride}"
            )));
        }
        Ok(FilterGeom {
            k,
            stride,
            pad,
            h,
            w,
            h_out,
            w_out,
            hp: stride * (h_out - 1) + k,
            wp: stride * (w_out - 1) + k,
        })
    }

    fn taps(&self) -> usize {
        self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    fn padded_plane(&self) -> usize {
        self.hp * self.wp
    }
}

fn pad_plane<T: Real>(src: &[T], g: &FilterGeom, dst: &mut [T]) {
    let off = g.pad.amount as isize;
    for py in 0..g.hp {
        let row = &mut dst[py * g.wp..(py + 1) * g.wp];
        let Some(iy) = resolve(py as isize - off, g.h, g.pad.mode) else {
            row.iter_mut().for_each(|v| *v = T::zero());
            continue;
        };
        let srow = &src[iy * g.w..(iy + 1) * g.w];
        for (px, v) in row.iter_mut().enumerate() {
            *v = match resolve(px as isize - off, g.w, g.pad.mode) {
                Some(ix) => srow[ix],
                None => T::zero(),
            };
        }
    }
}

fn unpad_plane_add<T: Real>(dpad: &[T], g: &FilterGeom, dst: &mut [T]) {
    let off = g.pad.amount as isize;
    for py in 0..g.hp {
        let Some(iy) = resolve(py as isize - off, g.h, g.pad.mode) else {
            continue;
        };
        for px in 0..g.wp {
            if let Some(ix) = resolve(px as isize - off, g.w, g.pad.mode) {
                dst[iy * g.w + ix] += dpad[py * g.wp + px];
            }
        }
    }
}

/// `out[i,j] += Σ_t padded[s·i+dy, s·j+dx] · filt[t,i,j]` for one plane.
fn filter_plane<T: Real>(padded: &[T], filt: &[T], g: &FilterGeom, out: &mut [T]) {
    let p = g.out_plane();
    for dy in 0..g.k {
        for dx in 0..g.k {
            let f = &filt[(dy * g.k + dx) * p..(dy * g.k + dx + 1) * p];
            for i in 0..g.h_out {
                let base = (g.stride * i + dy) * g.wp + dx;
                let orow = &mut out[i * g.w_out..(i + 1) * g.w_out];
                let frow = &f[i * g.w_out..(i + 1) * g.w_out];
                if g.stride == 1 {
                    let src = &padded[base..base + g.w_out];
                    for ((o, s), f) in orow.iter_mut().zip(src).zip(frow) {
                        *o += *s * *f;
                    }
                } else {
                    for (j, (o, f)) in orow.iter_mut().zip(frow).enumerate() {
                        *o += padded[base + g.stride * j] * *f;
                    }
                }
            }
        }
    }
}

fn filter_plane_backward<T: Real>(
    padded: &[T],
    filt: &[T],
    g_out: &[T],
    g: &FilterGeom,
    d_padded: Option<&mut [T]>,
    d_filt: Option<&mut [T]>,
) {
    let p = g.out_plane();
    if let Some(dp) = d_padded {
        for dy in 0..g.k {
            for dx in 0..g.k {
                let f = &filt[(dy * g.k + dx) * p..(dy * g.k + dx + 1) * p];
                for i in 0..g.h_out {
                    let base = (g.stride * i + dy) * g.wp + dx;
                    for j in 0..g.w_out {
                        dp[base + g.stride * j] += f[i * g.w_out + j] * g_out[i * g.w_out + j];
                    }
                }
            }
        }
    }
    if let Some(df) = d_filt {
        for dy in 0..g.k {
            for dx in 0..g.k {
                let f = &mut df[(dy * g.k + dx) * p..(dy * g.k + dx + 1) * p];
                for i in 0..g.h_out {
                    let base = (g.stride * i + dy) * g.wp + dx;
                    for j in 0..g.w_out {
                        f[i * g.w_out + j] += padded[base + g.stride * j] * g_out[i * g.w_out + j];
                    }
                }
            }
        }
    }
}

pub(crate) fn local_filter_forward<T: Real>(x: &Tensor<T>, filters: &Tensor<T>, g: &FilterGeom) -> Tensor<T> {
    let [batch, channels, _, _] = x.shape().0;
    let out_shape = Shape::new(batch, channels, g.h_out, g.w_out);
    let mut out = vec![T::zero(); out_shape.numel()];
    out.par_chunks_mut(channels * g.out_plane())
        .enumerate()
        .for_each(|(b, out_b)| {
            let xb = x.sample(b);
            let fb = filters.sample(b);
            let mut padded = vec![T::zero(); g.padded_plane()];
            for (c, oc) in out_b.chunks_mut(g.out_plane()).enumerate() {
                pad_plane(&xb[c * g.h * g.w..(c + 1) * g.h * g.w], g, &mut padded);
                filter_plane(&padded, fb, g, oc);
            }
        });
    Tensor::new(out_shape, out).expect("local filter output shape")
}

pub(crate) fn local_filter_backward<T: Real>(
    x: &Tensor<T>,
    filters: &Tensor<T>,
    g_out: &[T],
    g: &FilterGeom,
    need_x: bool,
    need_f: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let [batch, channels, _, _] = x.shape().0;
    let per_out = channels * g.out_plane();
    let per_f = g.taps() * g.out_plane();
    let results: Vec<(Vec<T>, Vec<T>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let xb = x.sample(b);
            let fb = filters.sample(b);
            let mut dx = if need_x { vec![T::zero(); channels * g.h * g.w] } else { Vec::new() };
            let mut df = if need_f { vec![T::zero(); per_f] } else { Vec::new() };
            let mut padded = vec![T::zero(); g.padded_plane()];
            let mut dpad = vec![T::zero(); if need_x { g.padded_plane() } else { 0 }];
            for c in 0..channels {
                pad_plane(&xb[c * g.h * g.w..(c + 1) * g.h * g.w], g, &mut padded);
                let go = &g_out[b * per_out + c * g.out_plane()..b * per_out + (c + 1) * g.out_plane()];
                if need_x {
                    dpad.iter_mut().for_each(|v| *v = T::zero());
                }
                filter_plane_backward(
                    &padded,
                    fb,
                    go,
                    g,
                    need_x.then_some(dpad.as_mut_slice()),
                    need_f.then_some(df.as_mut_slice()),
                );
                if need_x {
                    unpad_plane_add(&dpad, g, &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w]);
                }
            }
            (dx, df)
        })
        .collect();
    let mut dx = need_x.then(Vec::new);
    let mut df = need_f.then(Vec::new);
    for (x_part, f_part) in results {
        if let Some(acc) = dx.as_mut() {
            acc.extend_from_slice(&x_part);
        }
        if let Some(acc) = df.as_mut() {
            acc.extend_from_slice(&f_part);
        }
    }
    (dx, df)
}

/// Applies `scale²` groups of per-pixel `k×k` filters and interleaves the
/// results so that group `dy·scale + dx` lands on sub-pixel `(dy, dx)`.
/// Equivalent to per-group local filtering followed by pixel shuffle.
pub(crate) fn dynamic_upsample_forward<T: Real>(
    x: &Tensor<T>,
    filters: &Tensor<T>,
    g: &FilterGeom,
    scale: usize,
) -> Tensor<T> {
    let [batch, channels, h, w] = x.shape().0;
    let out_shape = Shape::new(batch, channels, h * scale, w * scale);
    let mut out = vec![T::zero(); out_shape.numel()];
    let per_group = g.taps() * g.out_plane();
    out.par_chunks_mut(channels * scale * scale * h * w)
        .enumerate()
        .for_each(|(b, out_b)| {
            let xb = x.sample(b);
            let fb = filters.sample(b);
            let mut padded = vec![T::zero(); g.padded_plane()];
            let mut tmp = vec![T::zero(); g.out_plane()];
            for c in 0..channels {
                pad_plane(&xb[c * h * w..(c + 1) * h * w], g, &mut padded);
                let oc = &mut out_b[c * scale * scale * h * w..(c + 1) * scale * scale * h * w];
                for group in 0..scale * scale {
                    let (sy, sx) = (group / scale, group % scale);
                    tmp.iter_mut().for_each(|v| *v = T::zero());
                    filter_plane(&padded, &fb[group * per_group..(group + 1) * per_group], g, &mut tmp);
                    for i in 0..h {
                        for j in 0..w {
                            oc[(scale * i + sy) * (scale * w) + scale * j + sx] = tmp[i * w + j];
                        }
                    }
                }
            }
        });
    Tensor::new(out_shape, out).expect("dynamic upsample output shape")
}

pub(crate) fn dynamic_upsample_backward<T: Real>(
    x: &Tensor<T>,
    filters: &Tensor<T>,
    g_out: &[T],
    g: &FilterGeom,
    scale: usize,
    need_x: bool,
    need_f: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let [batch, channels, h, w] = x.shape().0;
    let per_group = g.taps() * g.out_plane();
    let per_out = channels * scale * scale * h * w;
    let results: Vec<(Vec<T>, Vec<T>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let xb = x.sample(b);
            let fb = filters.sample(b);
            let mut dx = if need_x { vec![T::zero(); channels * h * w] } else { Vec::new() };
            let mut df = if need_f { vec![T::zero(); scale * scale * per_group] } else { Vec::new() };
            let mut padded = vec![T::zero(); g.padded_plane()];
            let mut dpad = vec![T::zero(); if need_x { g.padded_plane() } else { 0 }];
            let mut go = vec![T::zero(); g.out_plane()];
            for c in 0..channels {
                pad_plane(&xb[c * h * w..(c + 1) * h * w], g, &mut padded);
                if need_x {
                    dpad.iter_mut().for_each(|v| *v = T::zero());
                }
                let gc = &g_out[b * per_out + c * scale * scale * h * w..];
                for group in 0..scale * scale {
                    let (sy, sx) = (group / scale, group % scale);
                    for i in 0..h {
                        for j in 0..w {
                            go[i * w + j] = gc[(scale * i + sy) * (scale * w) + scale * j + sx];
                        }
                    }
                    filter_plane_backward(
                        &padded,
                        &fb[group * per_group..(group + 1) * per_group],
                        &go,
                        g,
                        need_x.then_some(dpad.as_mut_slice()),
                        need_f.then(|| &mut df[group * per_group..(group + 1) * per_group]),
                    );
                }
                if need_x {
                    unpad_plane_add(&dpad, g, &mut dx[c * h * w..(c + 1) * h * w]);
                }
            }
            (dx, df)
        })
        .collect();
    let mut dx = need_x.then(Vec::new);
    let mut df = need_f.then(Vec::new);
    for (x_part, f_part) in results {
        if let Some(acc) = dx.as_mut() {
            acc.extend_from_slice(&x_part);
        }
        if let Some(acc) = df.as_mut() {
            acc.extend_from_slice(&f_part);
        }
    }
    (dx, df)
}

// ------------------------------------------------- kernel normalization

/// Subtracts each per-pixel kernel's mean and adds `1/n`. The channel axis
/// holds `groups × n` kernel taps. Sums are taken in f64 and a second pass
/// removes the rounding residual of the first.
pub(crate) fn normalize_kernels<T: Real>(data: &[T], shape: Shape, n: usize) -> Vec<T> {
    let [batch, channels, _, _] = shape.0;
    let plane = shape.plane();
    let groups = channels / n;
    let inv_n = 1.0 / n as f64;
    let mut out = data.to_vec();
    let mut sum = vec![0.0f64; plane];
    for b in 0..batch {
        for grp in 0..groups {
            let start = (b * channels + grp * n) * plane;
            let block = &mut out[start..start + n * plane];
            for _ in 0..2 {
                sum.iter_mut().for_each(|m| *m = 0.0);
                for tap in block.chunks(plane) {
                    for (m, v) in sum.iter_mut().zip(tap) {
                        *m += v.to_f64().expect("finite cast");
                    }
                }
                let shift: Vec<T> = sum
                    .iter()
                    .map(|m| T::from_f64((1.0 - m) * inv_n).expect("shift"))
                    .collect();
                for tap in block.chunks_mut(plane) {
                    for (v, m) in tap.iter_mut().zip(&shift) {
                        *v += *m;
                    }
                }
            }
        }
    }
    out
}

/// Backward of [`normalize_kernels`]: subtract the per-kernel mean of the
/// incoming gradient.
pub(crate) fn normalize_kernels_backward<T: Real>(g: &[T], shape: Shape, n: usize) -> Vec<T> {
    let [batch, channels, _, _] = shape.0;
    let plane = shape.plane();
    let groups = channels / n;
    let inv_n = T::one() / T::from_usize(n).expect("n");
    let mut out = g.to_vec();
    let mut mean = vec![T::zero(); plane];
    for b in 0..batch {
        for grp in 0..groups {
            let start = (b * channels + grp * n) * plane;
            let block = &mut out[start..start + n * plane];
            mean.iter_mut().for_each(|m| *m = T::zero());
            for tap in block.chunks(plane) {
                for (m, v) in mean.iter_mut().zip(tap) {
                    *m += *v;
                }
            }
            for tap in block.chunks_mut(plane) {
                for (v, m) in tap.iter_mut().zip(&mean) {
                    *v -= *m * inv_n;
                }
            }
        }
    }
    out
}

// ------------------------------------------------------- pixel shuffle

/// Index into the `(b, c·r² + dy·r + dx, h, w)` source for every element of
/// the `(b, c, r·h + dy, r·w + dx)` destination.
fn shuffle_map(shape: Shape, r: usize) -> impl Iterator<Item = usize> {
    let [batch, channels, h, w] = shape.0;
    let c_out = channels / (r * r);
    let (ho, wo) = (h * r, w * r);
    (0..batch).flat_map(move |b| {
        (0..c_out).flat_map(move |c| {
            (0..ho).flat_map(move |y| {
                (0..wo).map(move |x| {
                    let (i, dy) = (y / r, y % r);
                    let (j, dx) = (x / r, x % r);
                    let src_c = c * r * r + dy * r + dx;
                    ((b * channels + src_c) * h + i) * w + j
                })
            })
        })
    })
}

pub(crate) fn pixel_shuffle<T: Real>(data: &[T], shape: Shape, r: usize) -> Vec<T> {
    shuffle_map(shape, r).map(|i| data[i]).collect()
}

/// Inverse of [`pixel_shuffle`]; `shape` is the shape of the *shuffled* input
/// to the unshuffle, i.e. `(b, c, r·h, r·w)`.
pub(crate) fn pixel_unshuffle<T: Real>(data: &[T], shape: Shape, r: usize) -> Vec<T> {
    let [b, c, h, w] = shape.0;
    let packed = Shape::new(b, c * r * r, h / r, w / r);
    let mut out = vec![T::zero(); data.len()];
    for (dst_idx, src) in shuffle_map(packed, r).zip(data) {
        out[dst_idx] = *src;
    }
    out
}

// ------------------------------------------------ nearest upsampling

pub(crate) fn upsample_nearest<T: Real>(data: &[T], shape: Shape, f: usize) -> Vec<T> {
    let [batch, channels, h, w] = shape.0;
    let mut out = Vec::with_capacity(data.len() * f * f);
    for plane in data.chunks(h * w).take(batch * channels) {
        for y in 0..h * f {
            let row = &plane[(y / f) * w..(y / f + 1) * w];
            for x in 0..w * f {
                out.push(row[x / f]);
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward<T: Real>(g: &[T], in_shape: Shape, f: usize) -> Vec<T> {
    let [_, _, h, w] = in_shape.0;
    let mut out = vec![T::zero(); in_shape.numel()];
    for (plane, gp) in out.chunks_mut(h * w).zip(g.chunks(h * w * f * f)) {
        for y in 0..h * f {
            for x in 0..w * f {
                plane[(y / f) * w + x / f] += gp[y * w * f + x];
            }
        }
    }
    out
}

// ------------------------------------------------------ broadcasting

/// Checks that `b` broadcasts onto `a` (each dim equal or 1) and returns the
/// strides to read `b` at an index of `a`.
pub(crate) fn broadcast_strides(a: Shape, b: Shape) -> Result<[usize; 4]> {
    let mut strides = [0usize; 4];
    let mut acc = 1usize;
    for d in (0..4).rev() {
        let (da, db) = (a.0[d], b.0[d]);
        if db == da {
            strides[d] = acc;
        } else if db == 1 {
            strides[d] = 0;
        } else {
            return Err(Error::shape(format!("{b} does not broadcast onto {a}")));
        }
        acc *= db;
    }
    Ok(strides)
}

/// Visits `(index into a, index into b)` for every element of `a`.
pub(crate) fn for_each_broadcast(a: Shape, strides: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let [n0, n1, n2, n3] = a.0;
    let mut ia = 0;
    for i0 in 0..n0 {
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                let base = i0 * strides[0] + i1 * strides[1] + i2 * strides[2];
                for i3 in 0..n3 {
                    f(ia, base + i3 * strides[3]);
                    ia += 1;
                }
            }
        }
    }
}
