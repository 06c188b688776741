//! Differentiable tensor operations.
//!
//! Each op validates shapes, computes its forward value through the kernels,
//! and (when the tape is recording and some input wants gradients) pushes a
//! backward rule that accumulates input gradients from the output gradient.
//!
//! Broadcasting is numpy-style but restricted to trailing alignment where a
//! mismatched extent must be 1 on one side; anything fancier is rejected.

use std::str::FromStr;

use super::kernels::{self, ConvDims, Mode};
use super::scalar;
use super::{Tape, Tensor};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// helpers
// ---------------------------------------------------------------------------

fn track(tape: &Tape, inputs: &[&Tensor]) -> bool {
    tape.is_recording() && inputs.iter().any(|t| t.requires_grad())
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Output shape of a trailing-aligned broadcast, or a dimension error.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let ea = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let eb = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if ea != eb && ea != 1 && eb != 1 {
            return Err(Error::Dimension(format!(
                "shapes {a:?} and {b:?} are not broadcast-compatible"
            )));
        }
        out[i] = ea.max(eb);
    }
    Ok(out)
}

// Strides into the (right-aligned, possibly smaller) operand for each axis of
// the output; 0 where the operand broadcasts.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let strides = row_major_strides(shape);
    let mut out = vec![0usize; rank];
    let offset = rank - shape.len();
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == 1 { 0 } else { strides[i] };
    }
    out
}

/// Odometer walk over the flattened output space, tracking the source
/// indices of two (possibly broadcast) operands without per-element
/// division.
fn zip_broadcast<F: FnMut(usize, usize, usize)>(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: F,
) {
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let numel: usize = out_shape.iter().product();
    let mut coords = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for flat in 0..numel {
        f(flat, ia, ib);
        for d in (0..rank).rev() {
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise binary ops with trailing broadcast
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

fn binary(tape: &Tape, a: &Tensor, b: &Tensor, op: BinOp) -> Result<Tensor> {
    let (ash, bsh) = (a.shape(), b.shape());
    let out_shape = broadcast_shape(&ash, &bsh)?;
    let numel: usize = out_shape.iter().product();
    let sa = broadcast_strides(&ash, &out_shape);
    let sb = broadcast_strides(&bsh, &out_shape);

    let mut data = vec![0.0; numel];
    {
        let (ad_ref, bd_ref) = (a.data(), b.data());
        let (ad, bd): (&[f64], &[f64]) = (&ad_ref, &bd_ref);
        let apply = |x: f64, y: f64| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        };
        if ash == bsh {
            run_elementwise(&mut data, |flat, o| *o = apply(ad[flat], bd[flat]));
        } else {
            zip_broadcast(&out_shape, &sa, &sb, |flat, ia, ib| {
                data[flat] = apply(ad[ia], bd[ib]);
            });
        }
    }

    let tracked = track(tape, &[a, b]);
    let out = Tensor::new_raw(out_shape.clone(), data, tracked);
    if tracked {
        let (a_, b_, o_) = (a.clone(), b.clone(), out.clone());
        tape.push(
            out.clone(),
            Box::new(move || {
                let gref = o_.grad();
                let Some(g) = gref.as_ref() else { return };
                if a_.requires_grad() {
                    let mut ga = vec![0.0; a_.numel()];
                    {
                        let bd = b_.data();
                        zip_broadcast(&out_shape, &sa, &sb, |flat, ia, ib| {
                            ga[ia] += match op {
                                BinOp::Add | BinOp::Sub => g[flat],
                                BinOp::Mul => g[flat] * bd[ib],
                                BinOp::Div => g[flat] / bd[ib],
                            };
                        });
                    }
                    a_.accumulate_grad(&ga);
                }
                if b_.requires_grad() {
                    let mut gb = vec![0.0; b_.numel()];
                    {
                        let (ad, bd) = (a_.data(), b_.data());
                        zip_broadcast(&out_shape, &sa, &sb, |flat, ia, ib| {
                            gb[ib] += match op {
                                BinOp::Add => g[flat],
                                BinOp::Sub => -g[flat],
                                BinOp::Mul => g[flat] * ad[ia],
                                BinOp::Div => {
                                    let den = bd[ib];
                                    -g[flat] * ad[ia] / (den * den)
                                }
                            };
                        });
                    }
                    b_.accumulate_grad(&gb);
                }
            }),
        );
    }
    Ok(out)
}

// Elementwise driver; sequential below the kernel threshold, chunked above.
fn run_elementwise<F: Fn(usize, &mut f64) + Sync>(out: &mut [f64], f: F) {
    const CHUNK: usize = 8192;
    let chunk_len = out.len().min(CHUNK).max(1);
    kernels::run_chunks(out, chunk_len, 4, Mode::Auto, |ci, chunk| {
        let base = ci * chunk_len;
        for (i, o) in chunk.iter_mut().enumerate() {
            f(base + i, o);
        }
    });
}

pub fn add(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(tape, a, b, BinOp::Add)
}

pub fn sub(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(tape, a, b, BinOp::Sub)
}

pub fn mul(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(tape, a, b, BinOp::Mul)
}

pub fn div(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(tape, a, b, BinOp::Div)
}

// ---------------------------------------------------------------------------
// unary activations
// ---------------------------------------------------------------------------

/// Pointwise nonlinearities available to layers and configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
    Silu,
    Sigmoid,
}

impl Activation {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => scalar::relu(x),
            Activation::Gelu => scalar::gelu(x),
            Activation::Silu => scalar::silu(x),
            Activation::Sigmoid => scalar::sigmoid(x),
        }
    }

    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => scalar::relu_deriv(x),
            Activation::Gelu => scalar::gelu_deriv(x),
            Activation::Silu => scalar::silu_deriv(x),
            Activation::Sigmoid => scalar::sigmoid_deriv(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Silu => "silu",
            Activation::Sigmoid => "sigmoid",
        }
    }

    /// Apply pointwise with a recorded backward rule.
    pub fn apply(self, tape: &Tape, x: &Tensor) -> Tensor {
        let mut data = x.data_vec();
        for v in data.iter_mut() {
            *v = self.eval(*v);
        }
        let tracked = track(tape, &[x]);
        let out = Tensor::new_raw(x.shape(), data, tracked);
        if tracked {
            let (x_, o_) = (x.clone(), out.clone());
            tape.push(
                out.clone(),
                Box::new(move || {
                    let gref = o_.grad();
                    let Some(g) = gref.as_ref() else { return };
                    let gin: Vec<f64> = {
                        let xd = x_.data();
                        g.iter()
                            .zip(xd.iter())
                            .map(|(&gv, &xv)| gv * self.deriv(xv))
                            .collect()
                    };
                    x_.accumulate_grad(&gin);
                }),
            );
        }
        out
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "none" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "silu" => Ok(Activation::Silu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Configuration(format!(
                "unknown activation '{other}' (expected identity|relu|gelu|silu|sigmoid)"
            ))),
        }
    }
}

pub fn relu(tape: &Tape, x: &Tensor) -> Tensor {
    Activation::Relu.apply(tape, x)
}

pub fn gelu(tape: &Tape, x: &Tensor) -> Tensor {
    Activation::Gelu.apply(tape, x)
}

pub fn silu(tape: &Tape, x: &Tensor) -> Tensor {
    Activation::Silu.apply(tape, x)
}

pub fn sigmoid(tape: &Tape, x: &Tensor) -> Tensor {
    Activation::Sigmoid.apply(tape, x)
}

/// `scale * x + shift`, elementwise.
pub fn affine(tape: &Tape, x: &Tensor, scale: f64, shift: f64) -> Tensor {
    let mut data = x.data_vec();
    for v in data.iter_mut() {
        *v = scale * *v + shift;
    }
    let tracked = track(tape, &[x]);
    let out = Tensor::new_raw(x.shape(), data, tracked);
    if tracked {
        let (x_, o_) = (x.clone(), out.clone());
        tape.push(
            out.clone(),
            Box::new(move || {
                let gref = o_.grad();
                let Some(g) = gref.as_ref() else { return };
                let gin: Vec<f64> = g.iter().map(|&gv| gv * scale).collect();
                x_.accumulate_grad(&gin);
            }),
        );
    }
    out
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

pub fn sum_all(tape: &Tape, x: &Tensor) -> Tensor {
    let total: f64 = x.data().iter().sum();
    let tracked = track(tape, &[x]);
    let out = Tensor::new_raw(Vec::new(), vec![total], tracked);
    if tracked {
        let (x_, o_) = (x.clone(), out.clone());
        tape.push(
            out.clone(),
            Box::new(move || {
                let gref = o_.grad();
                let Some(g) = gref.as_ref() else { return };
                x_.accumulate_grad(&vec![g[0]; x_.numel()]);
            }),
        );
    }
    out
}

pub fn mean_all(tape: &Tape, x: &Tensor) -> Tensor {
    let n = x.numel() as f64;
    let total: f64 = x.data().iter().sum();
    let tracked = track(tape, &[x]);
    let out = Tensor::new_raw(Vec::new(), vec![total / n], tracked);
    if tracked {
        let (x_, o_) = (x.clone(), out.clone());
        tape.push(
            out.clone(),
            Box::new(move || {
                let gref = o_.grad();
                let Some(g) = gref.as_ref() else { return };
                x_.accumulate_grad(&vec![g[0] / n; x_.numel()]);
            }),
        );
    }
    out
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

pub fn reshape(tape: &Tape, x: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
    let new_numel: usize = new_shape.iter().product();
    if new_numel != x.numel() || new_shape.iter().any(|&e| e == 0) {
        return Err(Error::Dimension(format!(
            "cannot reshape {:?} ({} elements) into {new_shape:?}",
            x.shape(),
            x.numel()
        )));
    }
    let tracked = track(tape, &[x]);
    let out = Tensor::new_raw(new_shape.to_vec(), x.data_vec(), tracked);
    if tracked {
        let (x_, o_) = (x.clone(), out.clone());
        tape.push(
            out.clone(),
            Box::new(move || {
                let gref = o_.grad();
                let Some(g) = gref.as_ref() else { return };
                x_.accumulate_grad(g);
            }),
        );
    }
    Ok(out)
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = row_major_strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zeros = vec![0usize; out_shape.len()];
    let mut out = vec![0.0; data.len()];
    zip_broadcast(&out_shape, &src_strides, &zeros, |flat, src, _| {
        out[flat] = data[src];
    });
    (out_shape, out)
}

pub fn permute(tape: &Tape, x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let shape = x.shape();
    let mut seen = vec![false; shape.len()];
    if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::Dimension(format!(
            "invalid permutation {axes:?} for shape {shape:?}"
        )));
    }
    let (out_shape, data) = permute_data(&x.data(), &shape, axes);
    let tracked = track(tape, &[x]);
    let out = Tensor::new_raw(out_shape.clone(), data, tracked);
    if tracked {
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let (x_, o_) = (x.clone(), out.clone());
        tape.push(
            out.clone(),
            Box::new(move || {
                let gref = o_.grad();
                let Some(g) = gref.as_ref() else { return };
                let (_, gin) = permute_data(g, &out_shape, &inverse);
                x_.accumulate_grad(&gin);
            }),
        );
    }
    Ok(out)
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat(tape: &Tape, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Dimension("concat of zero tensors".into()));
    }
    let base = parts[0].shape();
    if axis >= base.len() {
        return Err(Error::Dimension(format!(
            "concat axis {axis} out of range for shape {base:?}"
        )));
    }
    let mut axis_total = 0;
    for p in parts {
        let s = p.shape();
        if s.len() != base.len()
            || s.iter()
                .zip(&base)
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(Error::Dimension(format!(
                "concat shapes {:?} and {s:?} differ off axis {axis}",
                base
            )));
        }
        axis_total += s[axis];
    }
    let mut out_shape = base.clone();
    out_shape[axis] = axis_total;
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();

    let mut data = vec![0.0; outer * axis_total * inner];
    let mut offset = 0;
    for p in parts {
        let pa = p.shape()[axis];
        let pd = p.data();
        for o in 0..outer {
            let dst_start = (o * axis_total + offset) * inner;
            let src_start = o * pa * inner;
            data[dst_start..dst_start + pa * inner]
                .copy_from_slice(&pd[src_start..src_start + pa * inner]);
        }
        offset += pa;
    }

    let refs: Vec<&Tensor> = parts.to_vec();
    let tracked = track(tape, &refs);
    let out = Tensor::new_raw(out_shape, data, tracked);
    if tracked {
        let parts_: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let o_ = out.clone();
        tape.push(
            out.clone(),
            Box::new(move || {
                let gref = o_.grad();
                let Some(g) = gref.as_ref() else { return };
                let mut offset = 0;
                for p in &parts_ {
                    let pa = p.shape()[axis];
                    if p.requires_grad() {
                        let mut gp = vec![0.0; outer * pa * inner];
                        for o in 0..outer {
                            let src_start = (o * axis_total + offset) * inner;
                            let dst_start = o * pa * inner;
                            gp[dst_start..dst_start + pa * inner]
                                .copy_from_slice(&g[src_start..src_start + pa * inner]);
                        }
                        p.accumulate_grad(&gp);
                    }
                    offset += pa;
                }
            }),
        );
    }
    Ok(out)
}

/// Slice `len` extents of `axis` starting at `start`.
pub fn narrow(tape: &Tape, x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() || len == 0 || start + len > shape[axis] {
        return Err(Error::Dimension(format!(
            "narrow(axis={axis}, start={start}, len={len}) out of range for shape {shape:?}"
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let full = shape[axis];
    let mut out_shape = shape.clone();
    out_shape[axis] = len;

    let mut data = vec![0.0; outer * len * inner];
    {
        let xd = x.data();
        for o in 0..outer {
            let src = (o * full + start) * inner;
            let dst = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&xd[src..src + len * inner]);
        }
    }
    let tracked = track(tape, &[x]);
    let out = Tensor::new_raw(out_shape, data, tracked);
    if tracked {
        let (x_, o_) = (x.clone(), out.clone());
        tape.push(
            out.clone(),
            Box::new(move || {
                let gref = o_.grad();
                let Some(g) = gref.as_ref() else { return };
                let mut gin = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    gin[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                x_.accumulate_grad(&gin);
            }),
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// C[m,n] = A[m,k] B[k,n] with dA = dC B^T and dB = A^T dC.
pub fn matmul(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
        return Err(Error::Dimension(format!(
            "matmul expects [m,k] x [k,n], got {ash:?} x {bsh:?}"
        )));
    }
    let (m, k, n) = (ash[0], ash[1], bsh[1]);
    let data = kernels::matmul(&a.data(), &b.data(), m, k, n);
    let tracked = track(tape, &[a, b]);
    let out = Tensor::new_raw(vec![m, n], data, tracked);
    if tracked {
        let (a_, b_, o_) = (a.clone(), b.clone(), out.clone());
        tape.push(
            out.clone(),
            Box::new(move || {
                let gref = o_.grad();
                let Some(g) = gref.as_ref() else { return };
                if a_.requires_grad() {
                    let ga = kernels::matmul_nt(g, &b_.data(), m, n, k);
                    a_.accumulate_grad(&ga);
                }
                if b_.requires_grad() {
                    let gb = kernels::matmul_tn(&a_.data(), g, k, m, n);
                    b_.accumulate_grad(&gb);
                }
            }),
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

fn conv_general(tape: &Tape, x: &Tensor, w: &Tensor, d: ConvDims) -> Result<Tensor> {
    d.validate()?;
    let data = kernels::conv2d_forward(&x.data(), &w.data(), &d);
    let tracked = track(tape, &[x, w]);
    let out = Tensor::new_raw(
        vec![d.batch, d.c_out, d.out_h(), d.out_w()],
        data,
        tracked,
    );
    if tracked {
        let (x_, w_, o_) = (x.clone(), w.clone(), out.clone());
        tape.push(
            out.clone(),
            Box::new(move || {
                let gref = o_.grad();
                let Some(g) = gref.as_ref() else { return };
                if x_.requires_grad() {
                    let gx = kernels::conv2d_grad_input(g, &w_.data(), &d);
                    x_.accumulate_grad(&gx);
                }
                if w_.requires_grad() {
                    let gw = kernels::conv2d_grad_weight(g, &x_.data(), &d);
                    w_.accumulate_grad(&gw);
                }
            }),
        );
    }
    Ok(out)
}

/// Cross-correlation of [B,Cin,H,W] with [Cout,Cin,kh,kw].
pub fn conv2d(tape: &Tape, x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] {
        return Err(Error::Dimension(format!(
            "conv2d expects x[B,Cin,H,W] and w[Cout,Cin,kh,kw], got x{xs:?} w{ws:?}"
        )));
    }
    conv_general(
        tape,
        x,
        w,
        ConvDims {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            padding,
            groups: 1,
        },
    )
}

/// Per-channel cross-correlation of [B,C,H,W] with [C,1,kh,kw]; output
/// channel c depends only on input channel c.
pub fn depthwise_conv2d(
    tape: &Tape,
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[1] != 1 {
        return Err(Error::Dimension(format!(
            "depthwise_conv2d expects x[B,C,H,W] and w[C,1,kh,kw], got x{xs:?} w{ws:?}"
        )));
    }
    conv_general(
        tape,
        x,
        w,
        ConvDims {
            batch: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            padding,
            groups: xs[1],
        },
    )
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

/// Normalize over the last axis, then scale/shift by gamma/beta (both [C]).
pub fn layer_norm(
    tape: &Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    let shape = x.shape();
    let c = *shape.last().ok_or_else(|| {
        Error::Dimension("layer_norm needs at least one axis".into())
    })?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Dimension(format!(
            "layer_norm over C={c} but gamma {:?} / beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let positions = x.numel() / c;
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; positions];
    {
        let xd = x.data();
        for m in 0..positions {
            let row = &xd[m * c..(m + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[m] = inv;
            for (i, &v) in row.iter().enumerate() {
                xhat[m * c + i] = (v - mean) * inv;
            }
        }
    }
    let mut data = vec![0.0; x.numel()];
    {
        let (gd, bd) = (gamma.data(), beta.data());
        for m in 0..positions {
            for i in 0..c {
                data[m * c + i] = xhat[m * c + i] * gd[i] + bd[i];
            }
        }
    }
    let tracked = track(tape, &[x, gamma, beta]);
    let out = Tensor::new_raw(shape, data, tracked);
    if tracked {
        let (x_, g_, b_, o_) = (x.clone(), gamma.clone(), beta.clone(), out.clone());
        tape.push(
            out.clone(),
            Box::new(move || {
                let gref = o_.grad();
                let Some(g) = gref.as_ref() else { return };
                if b_.requires_grad() {
                    let mut db = vec![0.0; c];
                    for m in 0..positions {
                        for i in 0..c {
                            db[i] += g[m * c + i];
                        }
                    }
                    b_.accumulate_grad(&db);
                }
                if g_.requires_grad() {
                    let mut dg = vec![0.0; c];
                    for m in 0..positions {
                        for i in 0..c {
                            dg[i] += g[m * c + i] * xhat[m * c + i];
                        }
                    }
                    g_.accumulate_grad(&dg);
                }
                if x_.requires_grad() {
                    let gd = g_.data();
                    let mut dx = vec![0.0; positions * c];
                    for m in 0..positions {
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for i in 0..c {
                            let dxh = g[m * c + i] * gd[i];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat[m * c + i];
                        }
                        let mean_dxhat = sum_dxhat / c as f64;
                        let mean_dxhat_xhat = sum_dxhat_xhat / c as f64;
                        for i in 0..c {
                            let dxh = g[m * c + i] * gd[i];
                            dx[m * c + i] = inv_std[m]
                                * (dxh - mean_dxhat - xhat[m * c + i] * mean_dxhat_xhat);
                        }
                    }
                    drop(gd);
                    x_.accumulate_grad(&dx);
                }
            }),
        );
    }
    Ok(out)
}

/// Batch statistics returned by [`batch_norm2d_train`], for running-average
/// maintenance by the owning layer.
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance, as used for the normalization itself.
    pub var: Vec<f64>,
}

fn check_bn_shapes(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::Dimension(format!(
            "batch_norm2d expects [B,C,H,W], got {xs:?}"
        )));
    }
    let c = xs[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Dimension(format!(
            "batch_norm2d over C={c} but gamma {:?} / beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok((xs[0], c, xs[2], xs[3]))
}

/// Batch normalization using the current batch's statistics (training mode).
pub fn batch_norm2d_train(
    tape: &Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BatchStats)> {
    let (b, c, h, w) = check_bn_shapes(x, gamma, beta)?;
    let n = b * h * w;
    let plane = h * w;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    {
        let xd = x.data();
        for ci in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                for v in &xd[base..base + plane] {
                    s += v;
                }
            }
            let mu = s / n as f64;
            let mut sq = 0.0;
            for bi in 0..b {
                let base = (bi * c + ci) * plane;
                for v in &xd[base..base + plane] {
                    sq += (v - mu) * (v - mu);
                }
            }
            mean[ci] = mu;
            var[ci] = sq / n as f64;
        }
    }
    let out = bn_apply(tape, x, gamma, beta, &mean, &var, eps, true)?;
    Ok((out, BatchStats { mean, var }))
}

/// Batch normalization with fixed (running) statistics (inference mode).
pub fn batch_norm2d_eval(
    tape: &Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<Tensor> {
    check_bn_shapes(x, gamma, beta)?;
    bn_apply(tape, x, gamma, beta, mean, var, eps, false)
}

#[allow(clippy::too_many_arguments)]
fn bn_apply(
    tape: &Tape,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
    stats_from_batch: bool,
) -> Result<Tensor> {
    let (b, c, h, w) = check_bn_shapes(x, gamma, beta)?;
    let plane = h * w;
    let n = b * plane;
    let inv: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.numel()];
    {
        let xd = x.data();
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                for i in 0..plane {
                    xhat[base + i] = (xd[base + i] - mean[ci]) * inv[ci];
                }
            }
        }
    }
    let mut data = vec![0.0; x.numel()];
    {
        let (gd, bd) = (gamma.data(), beta.data());
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                for i in 0..plane {
                    data[base + i] = xhat[base + i] * gd[ci] + bd[ci];
                }
            }
        }
    }
    let tracked = track(tape, &[x, gamma, beta]);
    let out = Tensor::new_raw(x.shape(), data, tracked);
    if tracked {
        let (x_, g_, b_t, o_) = (x.clone(), gamma.clone(), beta.clone(), out.clone());
        let inv_c = inv.clone();
        tape.push(
            out.clone(),
            Box::new(move || {
                let gref = o_.grad();
                let Some(g) = gref.as_ref() else { return };
                let mut sum_g = vec![0.0; c];
                let mut sum_g_xhat = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * plane;
                        for i in 0..plane {
                            sum_g[ci] += g[base + i];
                            sum_g_xhat[ci] += g[base + i] * xhat[base + i];
                        }
                    }
                }
                if b_t.requires_grad() {
                    b_t.accumulate_grad(&sum_g);
                }
                if g_.requires_grad() {
                    g_.accumulate_grad(&sum_g_xhat);
                }
                if x_.requires_grad() {
                    let gd = g_.data();
                    let mut dx = vec![0.0; b * c * plane];
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * plane;
                            let scale = gd[ci] * inv_c[ci];
                            for i in 0..plane {
                                dx[base + i] = if stats_from_batch {
                                    scale
                                        * (g[base + i]
                                            - sum_g[ci] / n as f64
                                            - xhat[base + i] * sum_g_xhat[ci] / n as f64)
                                } else {
                                    scale * g[base + i]
                                };
                            }
                        }
                    }
                    drop(gd);
                    x_.accumulate_grad(&dx);
                }
            }),
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// pooling / upsampling
// ---------------------------------------------------------------------------

/// 2x2 stride-2 max pooling of [B,C,H,W]; H and W must be even.
pub fn max_pool2d(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
        return Err(Error::Dimension(format!(
            "max_pool2d expects [B,C,H,W] with even H,W, got {xs:?}"
        )));
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (data, arg) = kernels::max_pool2_forward(&x.data(), b, c, h, w);
    let tracked = track(tape, &[x]);
    let out = Tensor::new_raw(vec![b, c, h / 2, w / 2], data, tracked);
    if tracked {
        let (x_, o_) = (x.clone(), out.clone());
        let input_len = x.numel();
        tape.push(
            out.clone(),
            Box::new(move || {
                let gref = o_.grad();
                let Some(g) = gref.as_ref() else { return };
                let gin = kernels::max_pool2_backward(g, &arg, input_len);
                x_.accumulate_grad(&gin);
            }),
        );
    }
    Ok(out)
}

/// Nearest-neighbour 2x upsampling of [B,C,H,W].
pub fn upsample_nearest2(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::Dimension(format!(
            "upsample_nearest2 expects [B,C,H,W], got {xs:?}"
        )));
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let data = kernels::upsample_nearest2_forward(&x.data(), b, c, h, w);
    let tracked = track(tape, &[x]);
    let out = Tensor::new_raw(vec![b, c, 2 * h, 2 * w], data, tracked);
    if tracked {
        let (x_, o_) = (x.clone(), out.clone());
        tape.push(
            out.clone(),
            Box::new(move || {
                let gref = o_.grad();
                let Some(g) = gref.as_ref() else { return };
                let gin = kernels::upsample_nearest2_backward(g, b, c, h, w);
                x_.accumulate_grad(&gin);
            }),
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Mean binary cross-entropy on logits, computed with the numerically stable
/// form `max(z,0) - z t + ln(1 + exp(-|z|))`.
pub fn bce_with_logits_mean(tape: &Tape, logits: &Tensor, target: &Tensor) -> Result<Tensor> {
    if logits.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "bce shapes differ: logits {:?} vs target {:?}",
            logits.shape(),
            target.shape()
        )));
    }
    let n = logits.numel() as f64;
    let total: f64 = {
        let (zd, td) = (logits.data(), target.data());
        zd.iter()
            .zip(td.iter())
            .map(|(&z, &t)| z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).ln())
            .sum()
    };
    let tracked = track(tape, &[logits, target]);
    let out = Tensor::new_raw(Vec::new(), vec![total / n], tracked);
    if tracked {
        let (z_, t_, o_) = (logits.clone(), target.clone(), out.clone());
        tape.push(
            out.clone(),
            Box::new(move || {
                let gref = o_.grad();
                let Some(g) = gref.as_ref() else { return };
                let scale = g[0] / n;
                if z_.requires_grad() {
                    let gz: Vec<f64> = {
                        let (zd, td) = (z_.data(), t_.data());
                        zd.iter()
                            .zip(td.iter())
                            .map(|(&z, &t)| scale * (scalar::sigmoid(z) - t))
                            .collect()
                    };
                    z_.accumulate_grad(&gz);
                }
                if t_.requires_grad() {
                    let gt: Vec<f64> = z_.data().iter().map(|&z| -scale * z).collect();
                    t_.accumulate_grad(&gt);
                }
            }),
        );
    }
    Ok(out)
}
