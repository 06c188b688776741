//! Raw numeric kernels on flat `f64` slices.
//!
//! Every kernel writes each output element exactly once from a sequential
//! inner reduction, so results are bit-identical whether the chunk loop runs
//! sequentially or data-parallel under rayon (`parallel` feature, on by
//! default). The `*_seq` entry points force the sequential path and exist as
//! the baseline for the criterion benches.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Below this many estimated inner operations the rayon dispatch overhead
/// outweighs the win and the driver stays sequential.
const PAR_MIN_WORK: usize = 262_144;

/// Target amount of work per rayon task; units are grouped until a task
/// reaches roughly this size.
const TARGET_CHUNK_WORK: usize = 65_536;

#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum Mode {
    Auto,
    Sequential,
}

/// Fill `out` in `unit_len` pieces (the final unit may be shorter);
/// `f(i, unit)` writes unit `i` and must not read other units. Units are
/// grouped into coarser chunks for the parallel path, so results are
/// bit-identical to the sequential order regardless of thread count.
/// `work_per_elem` is a rough cost estimate used for the parallel cutoff.
pub(crate) fn run_chunks<F>(out: &mut [f64], unit_len: usize, work_per_elem: usize, mode: Mode, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    debug_assert!(unit_len > 0);
    #[cfg(feature = "parallel")]
    if mode == Mode::Auto
        && out.len() > unit_len
        && out.len().saturating_mul(work_per_elem) >= PAR_MIN_WORK
    {
        let unit_work = unit_len.saturating_mul(work_per_elem).max(1);
        let units_per_chunk = (TARGET_CHUNK_WORK / unit_work).max(1);
        let chunk_len = unit_len * units_per_chunk;
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(ci, chunk)| {
                for (j, unit) in chunk.chunks_mut(unit_len).enumerate() {
                    f(ci * units_per_chunk + j, unit);
                }
            });
        return;
    }
    let _ = (mode, work_per_elem);
    for (i, c) in out.chunks_mut(unit_len).enumerate() {
        f(i, c);
    }
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

fn matmul_impl(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, mode: Mode) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    run_chunks(&mut out, n, 2 * k, mode, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &ap) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += ap * bv;
            }
        }
    });
    out
}

/// C[m,n] = A[m,k] * B[k,n].
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    matmul_impl(a, b, m, k, n, Mode::Auto)
}

/// Sequential baseline for `matmul`.
pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    matmul_impl(a, b, m, k, n, Mode::Sequential)
}

/// C[m,n] = A[m,k] * B[n,k]^T (rows of B dotted with rows of A).
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    run_chunks(&mut out, n, 2 * k, Mode::Auto, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o = acc;
        }
    });
    out
}

/// C[m,n] = A[k,m]^T * B[k,n].
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    run_chunks(&mut out, n, 2 * k, Mode::Auto, |i, row| {
        for p in 0..k {
            let ap = a[p * m + i];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += ap * bv;
            }
        }
    });
    out
}

// ---------------------------------------------------------------------------
// 2-D convolution (grouped; groups == c_in gives the depthwise case)
// ---------------------------------------------------------------------------

/// Geometry of a grouped 2-D cross-correlation.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvDims {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Dimension("conv2d stride must be >= 1".into()));
        }
        if self.groups == 0 || self.c_in % self.groups != 0 || self.c_out % self.groups != 0 {
            return Err(Error::Dimension(format!(
                "conv2d groups {} must divide c_in {} and c_out {}",
                self.groups, self.c_in, self.c_out
            )));
        }
        if self.kh > self.h + 2 * self.padding || self.kw > self.w + 2 * self.padding {
            return Err(Error::Dimension(format!(
                "kernel {}x{} larger than padded input {}x{} (padding {})",
                self.kh, self.kw, self.h, self.w, self.padding
            )));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    fn cin_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_per_group(&self) -> usize {
        self.c_out / self.groups
    }
}

// Valid output range for one kernel tap: all `o` with
// 0 <= o*stride + k - padding < extent.
fn tap_range(extent: usize, out_extent: usize, stride: usize, k: usize, padding: usize) -> (usize, usize) {
    let lo = if k >= padding {
        0
    } else {
        (padding - k).div_ceil(stride)
    };
    let hi = if extent + padding > k {
        (((extent + padding - k - 1) / stride) + 1).min(out_extent)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn conv2d_forward_impl(x: &[f64], w: &[f64], d: &ConvDims, mode: Mode) -> Vec<f64> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let cin_g = d.cin_per_group();
    let cout_g = d.cout_per_group();
    let mut out = vec![0.0; d.batch * d.c_out * oh * ow];
    let work = 2 * cin_g * d.kh * d.kw;
    run_chunks(&mut out, oh * ow, work, mode, |idx, plane| {
        let b = idx / d.c_out;
        let co = idx % d.c_out;
        let g = co / cout_g;
        for cig in 0..cin_g {
            let ci = g * cin_g + cig;
            let xbase = (b * d.c_in + ci) * d.h;
            let wbase = (co * cin_g + cig) * d.kh;
            for ky in 0..d.kh {
                let wrow = &w[(wbase + ky) * d.kw..][..d.kw];
                let (oy_lo, oy_hi) = tap_range(d.h, oh, d.stride, ky, d.padding);
                for oy in oy_lo..oy_hi {
                    let iy = oy * d.stride + ky - d.padding;
                    let xrow = &x[(xbase + iy) * d.w..][..d.w];
                    let orow = &mut plane[oy * ow..(oy + 1) * ow];
                    for (kx, &wv) in wrow.iter().enumerate() {
                        let (ox_lo, ox_hi) = tap_range(d.w, ow, d.stride, kx, d.padding);
                        if d.stride == 1 {
                            let shift = kx as isize - d.padding as isize;
                            let xs = &xrow[(ox_lo as isize + shift) as usize
                                ..(ox_hi as isize + shift) as usize];
                            for (o, &xv) in orow[ox_lo..ox_hi].iter_mut().zip(xs) {
                                *o += xv * wv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * d.stride + kx - d.padding;
                                orow[ox] += xrow[ix] * wv;
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn conv2d_forward(x: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    conv2d_forward_impl(x, w, d, Mode::Auto)
}

/// Sequential baseline for `conv2d_forward`.
pub fn conv2d_forward_seq(x: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    conv2d_forward_impl(x, w, d, Mode::Sequential)
}

/// Gradient w.r.t. the input feature map.
pub fn conv2d_grad_input(gout: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let cin_g = d.cin_per_group();
    let cout_g = d.cout_per_group();
    let mut gin = vec![0.0; d.batch * d.c_in * d.h * d.w];
    let work = 2 * cout_g * d.kh * d.kw;
    run_chunks(&mut gin, d.h * d.w, work, Mode::Auto, |idx, plane| {
        let b = idx / d.c_in;
        let ci = idx % d.c_in;
        let g = ci / cin_g;
        let cig = ci % cin_g;
        for cog in 0..cout_g {
            let co = g * cout_g + cog;
            let gbase = (b * d.c_out + co) * oh;
            let wbase = (co * cin_g + cig) * d.kh;
            for ky in 0..d.kh {
                let wrow = &w[(wbase + ky) * d.kw..][..d.kw];
                let (oy_lo, oy_hi) = tap_range(d.h, oh, d.stride, ky, d.padding);
                for oy in oy_lo..oy_hi {
                    let iy = oy * d.stride + ky - d.padding;
                    let grow = &gout[(gbase + oy) * ow..][..ow];
                    let irow = &mut plane[iy * d.w..(iy + 1) * d.w];
                    for (kx, &wv) in wrow.iter().enumerate() {
                        let (ox_lo, ox_hi) = tap_range(d.w, ow, d.stride, kx, d.padding);
                        if d.stride == 1 {
                            let shift = kx as isize - d.padding as isize;
                            let is = (ox_lo as isize + shift) as usize;
                            for (gv, iv) in grow[ox_lo..ox_hi]
                                .iter()
                                .zip(irow[is..is + (ox_hi - ox_lo)].iter_mut())
                            {
                                *iv += gv * wv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = ox * d.stride + kx - d.padding;
                                irow[ix] += grow[ox] * wv;
                            }
                        }
                    }
                }
            }
        }
    });
    gin
}

/// Gradient w.r.t. the kernel weights.
pub fn conv2d_grad_weight(gout: &[f64], x: &[f64], d: &ConvDims) -> Vec<f64> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let cin_g = d.cin_per_group();
    let cout_g = d.cout_per_group();
    let mut gw = vec![0.0; d.c_out * cin_g * d.kh * d.kw];
    let work = 2 * d.batch * oh * ow;
    run_chunks(&mut gw, cin_g * d.kh * d.kw, work, Mode::Auto, |co, chunk| {
        let g = co / cout_g;
        for cig in 0..cin_g {
            let ci = g * cin_g + cig;
            for ky in 0..d.kh {
                let (oy_lo, oy_hi) = tap_range(d.h, oh, d.stride, ky, d.padding);
                for kx in 0..d.kw {
                    let (ox_lo, ox_hi) = tap_range(d.w, ow, d.stride, kx, d.padding);
                    let mut acc = 0.0;
                    for b in 0..d.batch {
                        let gbase = (b * d.c_out + co) * oh;
                        let xbase = (b * d.c_in + ci) * d.h;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * d.stride + ky - d.padding;
                            let grow = &gout[(gbase + oy) * ow..][..ow];
                            let xrow = &x[(xbase + iy) * d.w..][..d.w];
                            if d.stride == 1 {
                                let shift = kx as isize - d.padding as isize;
                                let xs = &xrow[(ox_lo as isize + shift) as usize
                                    ..(ox_hi as isize + shift) as usize];
                                for (&gv, &xv) in grow[ox_lo..ox_hi].iter().zip(xs) {
                                    acc += gv * xv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * d.stride + kx - d.padding;
                                    acc += grow[ox] * xrow[ix];
                                }
                            }
                        }
                    }
                    chunk[(cig * d.kh + ky) * d.kw + kx] = acc;
                }
            }
        }
    });
    gw
}

// ---------------------------------------------------------------------------
// pooling / resampling
// ---------------------------------------------------------------------------

/// 2x2 stride-2 max pool over [B,C,H,W] (H, W even). Returns the pooled map
/// and, per output element, the flat input index of the selected maximum
/// (first occurrence wins on ties).
pub fn max_pool2_forward(
    x: &[f64],
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let planes = batch * c;
    let mut out = vec![0.0; planes * oh * ow];
    let mut arg = vec![0usize; planes * oh * ow];
    for p in 0..planes {
        let xbase = p * h * w;
        let obase = p * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let i00 = xbase + (2 * oy) * w + 2 * ox;
                let candidates = [i00, i00 + 1, i00 + w, i00 + w + 1];
                let mut best = candidates[0];
                for &i in &candidates[1..] {
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out[obase + oy * ow + ox] = x[best];
                arg[obase + oy * ow + ox] = best;
            }
        }
    }
    (out, arg)
}

/// Scatter pooled gradients back through the recorded argmax indices.
pub fn max_pool2_backward(gout: &[f64], arg: &[usize], input_len: usize) -> Vec<f64> {
    let mut gin = vec![0.0; input_len];
    for (&g, &i) in gout.iter().zip(arg) {
        gin[i] += g;
    }
    gin
}

/// Nearest-neighbour 2x upsampling of [B,C,H,W].
pub fn upsample_nearest2_forward(x: &[f64], batch: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; batch * c * oh * ow];
    run_chunks(&mut out, oh * ow, 1, Mode::Auto, |p, plane| {
        let xplane = &x[p * h * w..][..h * w];
        for oy in 0..oh {
            let src = &xplane[(oy / 2) * w..][..w];
            let dst = &mut plane[oy * ow..][..ow];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = src[ox / 2];
            }
        }
    });
    out
}

pub fn upsample_nearest2_backward(gout: &[f64], batch: usize, c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut gin = vec![0.0; batch * c * h * w];
    run_chunks(&mut gin, h * w, 4, Mode::Auto, |p, plane| {
        let gplane = &gout[p * oh * ow..][..oh * ow];
        for iy in 0..h {
            for ix in 0..w {
                let mut acc = 0.0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        acc += gplane[(2 * iy + dy) * ow + (2 * ix + dx)];
                    }
                }
                plane[iy * w + ix] = acc;
            }
        }
    });
    gin
}

/// Bilinear resize of a single-channel map (half-pixel centers, the
/// `align_corners = false` convention). Not differentiable; used for
/// activation-map visualization only.
pub fn bilinear_resize(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w);
    let mut out = vec![0.0; oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
            let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
            out[oy * ow + ox] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}
