//! Differentiable layer primitives: forward passes and their exact
//! analytic backward passes.
//!
//! Conventions, fixed so the finite-difference oracles agree:
//! - conv2d is cross-correlation (no kernel flip);
//! - ReLU's subgradient at exactly 0 is 0;
//! - dropout is inverted (survivors scaled by 1/(1-rate); eval is identity);
//! - softmax subtracts the row max before exponentiation; logs clamp their
//!   argument at 1e-300.

use alloc::vec;
use alloc::vec::Vec;

use libm::{exp, log, sqrt};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Train vs eval behaviour for batch norm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

// ---------------------------------------------------------------------------
// small matmul kernels (row-major), inner loops contiguous for vectorization
// ---------------------------------------------------------------------------

/// c += a (m x k) * b (k x n)
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
}

/// c += a (m x k) * b^T where b is (n x k)
pub(crate) fn matmul_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            crow[j] += acc;
        }
    }
}

/// c += a^T (a is k x m) * b (k x n)
pub(crate) fn matmul_at_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = arow[i];
            if aki == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aki * brow[j];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

fn conv_out_extent(inp: usize, k: usize, pad: usize, stride: usize) -> usize {
    (inp + 2 * pad - k) / stride + 1
}

fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [f64],
) {
    // col is (cin*kh*kw) x (ho*wo)
    let p = ho * wo;
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut col[((c * kh + ki) * kw + kj) * p..((c * kh + ki) * kw + kj + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        for ox in 0..wo {
                            row[oy * wo + ox] = 0.0;
                        }
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        row[oy * wo + ox] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(
    col: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [f64],
) {
    let p = ho * wo;
    for c in 0..cin {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &col[((c * kh + ki) * kw + kj) * p..((c * kh + ki) * kw + kj + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2D cross-correlation over an (N, Cin, H, W) batch.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &[f64], stride: usize, pad: usize) -> Result<Tensor> {
    let (n, cin, h, w) = x.dims4("conv2d")?;
    let ws = weight.shape();
    if ws.len() != 4 {
        return Err(Error::Shape {
            op: "conv2d",
            axis: "weight rank",
            expected: 4,
            got: ws.len(),
        });
    }
    let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if wcin != cin {
        return Err(Error::Shape {
            op: "conv2d",
            axis: "input channel",
            expected: wcin,
            got: cin,
        });
    }
    if bias.len() != cout {
        return Err(Error::Shape {
            op: "conv2d",
            axis: "bias length",
            expected: cout,
            got: bias.len(),
        });
    }
    if stride == 0 {
        return Err(Error::Param("conv2d stride must be positive".into()));
    }
    if h + 2 * pad < kh {
        return Err(Error::Shape {
            op: "conv2d",
            axis: "height",
            expected: kh,
            got: h + 2 * pad,
        });
    }
    if w + 2 * pad < kw {
        return Err(Error::Shape {
            op: "conv2d",
            axis: "width",
            expected: kw,
            got: w + 2 * pad,
        });
    }
    let ho = conv_out_extent(h, kh, pad, stride);
    let wo = conv_out_extent(w, kw, pad, stride);
    let r = cin * kh * kw;
    let p = ho * wo;
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    let mut col = vec![0.0; r * p];
    for i in 0..n {
        im2col(
            &x.data()[i * cin * h * w..(i + 1) * cin * h * w],
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
            &mut col,
        );
        let y = &mut out.data_mut()[i * cout * p..(i + 1) * cout * p];
        for co in 0..cout {
            let b = bias[co];
            for v in &mut y[co * p..(co + 1) * p] {
                *v = b;
            }
        }
        matmul_acc(weight.data(), &col, y, cout, r, p);
    }
    Ok(out)
}

/// Gradients of conv2d wrt input, weights and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (n, cin, h, w) = x.dims4("conv2d_backward")?;
    let ws = weight.shape();
    let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (dn, dc, ho, wo) = dy.dims4("conv2d_backward")?;
    if dn != n {
        return Err(Error::Shape {
            op: "conv2d_backward",
            axis: "batch",
            expected: n,
            got: dn,
        });
    }
    if dc != cout {
        return Err(Error::Shape {
            op: "conv2d_backward",
            axis: "output channel",
            expected: cout,
            got: dc,
        });
    }
    let r = cin * kh * kw;
    let p = ho * wo;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(ws);
    let mut db = vec![0.0; cout];
    let mut col = vec![0.0; r * p];
    let mut dcol = vec![0.0; r * p];
    for i in 0..n {
        let dyi = &dy.data()[i * cout * p..(i + 1) * cout * p];
        for co in 0..cout {
            db[co] += dyi[co * p..(co + 1) * p].iter().sum::<f64>();
        }
        im2col(
            &x.data()[i * cin * h * w..(i + 1) * cin * h * w],
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
            &mut col,
        );
        // dW += dY_i (cout x p) * col^T (p x r)
        matmul_bt_acc(dyi, &col, dw.data_mut(), cout, p, r);
        // dcol = W^T (r x cout) * dY_i (cout x p)
        for v in dcol.iter_mut() {
            *v = 0.0;
        }
        matmul_at_acc(weight.data(), dyi, &mut dcol, r, cout, p);
        col2im(
            &dcol,
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
            &mut dx.data_mut()[i * cin * h * w..(i + 1) * cin * h * w],
        );
    }
    Ok((dx, dw, db))
}

// ---------------------------------------------------------------------------
// batch norm
// ---------------------------------------------------------------------------

/// Per-channel batch normalization parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.9,
            epsilon: 1e-5,
        }
    }
}

/// Statistics actually used to normalize, retained for the backward pass.
#[derive(Debug, Clone)]
pub struct BnSaved {
    pub mode: Mode,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch normalization over (N, C, H, W); train mode normalizes by batch
/// statistics (biased variance) and updates the running EMA, eval mode uses
/// the running statistics.
pub fn batch_norm(x: &Tensor, state: &mut BatchNormState, mode: Mode) -> Result<(Tensor, BnSaved)> {
    let (n, c, h, w) = x.dims4("batch_norm")?;
    if state.gamma.len() != c {
        return Err(Error::Shape {
            op: "batch_norm",
            axis: "channel",
            expected: state.gamma.len(),
            got: c,
        });
    }
    let m = n * h * w;
    let (mean, var) = match mode {
        Mode::Train => {
            if m < 2 {
                return Err(Error::DegenerateBatch { population: m });
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut sum = 0.0;
                for i in 0..n {
                    let plane = &x.data()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
                    sum += plane.iter().sum::<f64>();
                }
                let mu = sum / m as f64;
                let mut sq = 0.0;
                for i in 0..n {
                    let plane = &x.data()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
                    for &v in plane {
                        let d = v - mu;
                        sq += d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = sq / m as f64;
            }
            for ch in 0..c {
                state.running_mean[ch] =
                    state.momentum * state.running_mean[ch] + (1.0 - state.momentum) * mean[ch];
                state.running_var[ch] =
                    state.momentum * state.running_var[ch] + (1.0 - state.momentum) * var[ch];
            }
            (mean, var)
        }
        Mode::Eval => (state.running_mean.clone(), state.running_var.clone()),
    };
    let mut out = Tensor::zeros(x.shape());
    for ch in 0..c {
        let inv = 1.0 / sqrt(var[ch] + state.epsilon);
        let g = state.gamma[ch];
        let b = state.beta[ch];
        let mu = mean[ch];
        for i in 0..n {
            let src = &x.data()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            let dst = &mut out.data_mut()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = g * (s - mu) * inv + b;
            }
        }
    }
    Ok((out, BnSaved { mode, mean, var }))
}

/// Gradients of batch_norm wrt input, gamma and beta.
pub fn batch_norm_backward(
    x: &Tensor,
    state: &BatchNormState,
    saved: &BnSaved,
    dy: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = x.dims4("batch_norm_backward")?;
    let m = (n * h * w) as f64;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let inv = 1.0 / sqrt(saved.var[ch] + state.epsilon);
        let mu = saved.mean[ch];
        let g = state.gamma[ch];
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for i in 0..n {
            let xs = &x.data()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            let dys = &dy.data()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            for (&xv, &dv) in xs.iter().zip(dys) {
                sum_dy += dv;
                sum_dy_xhat += dv * (xv - mu) * inv;
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        for i in 0..n {
            let xs = &x.data()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            let dys = &dy.data()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            let dst = &mut dx.data_mut()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            match saved.mode {
                Mode::Train => {
                    for ((d, &xv), &dv) in dst.iter_mut().zip(xs).zip(dys) {
                        let xhat = (xv - mu) * inv;
                        *d = g * inv * (dv - sum_dy / m - xhat * sum_dy_xhat / m);
                    }
                }
                Mode::Eval => {
                    // eval is a per-channel affine map in x
                    for (d, &dv) in dst.iter_mut().zip(dys) {
                        *d = g * inv * dv;
                    }
                }
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

// ---------------------------------------------------------------------------
// relu
// ---------------------------------------------------------------------------

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(x.shape());
    for ((d, &xv), &dv) in dx.data_mut().iter_mut().zip(x.data()).zip(dy.data()) {
        *d = if xv > 0.0 { dv } else { 0.0 };
    }
    dx
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

/// 2x2 average pooling with stride 2; requires even spatial extents.
pub fn avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("avg_pool")?;
    if h % 2 != 0 {
        return Err(Error::Shape {
            op: "avg_pool",
            axis: "height",
            expected: h + 1,
            got: h,
        });
    }
    if w % 2 != 0 {
        return Err(Error::Shape {
            op: "avg_pool",
            axis: "width",
            expected: w + 1,
            got: w,
        });
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for nc in 0..n * c {
        let src = &x.data()[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out.data_mut()[nc * ho * wo..(nc + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let (iy, ix) = (oy * 2, ox * 2);
                dst[oy * wo + ox] = 0.25
                    * (src[iy * w + ix]
                        + src[iy * w + ix + 1]
                        + src[(iy + 1) * w + ix]
                        + src[(iy + 1) * w + ix + 1]);
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward(x_shape: &[usize], dy: &Tensor) -> Tensor {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = Tensor::zeros(x_shape);
    for nc in 0..n * c {
        let src = &dy.data()[nc * ho * wo..(nc + 1) * ho * wo];
        let dst = &mut dx.data_mut()[nc * h * w..(nc + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let g = src[oy * wo + ox] * 0.25;
                let (iy, ix) = (oy * 2, ox * 2);
                dst[iy * w + ix] = g;
                dst[iy * w + ix + 1] = g;
                dst[(iy + 1) * w + ix] = g;
                dst[(iy + 1) * w + ix + 1] = g;
            }
        }
    }
    dx
}

/// Spatial mean per channel: (N, C, H, W) -> (N, C).
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    let hw = (h * w) as f64;
    let mut out = Tensor::zeros(&[n, c]);
    for nc in 0..n * c {
        out.data_mut()[nc] = x.data()[nc * h * w..(nc + 1) * h * w].iter().sum::<f64>() / hw;
    }
    Ok(out)
}

pub fn global_avg_pool_backward(x_shape: &[usize], dy: &Tensor) -> Tensor {
    let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let hw = (h * w) as f64;
    let mut dx = Tensor::zeros(x_shape);
    for nc in 0..n * c {
        let g = dy.data()[nc] / hw;
        for v in &mut dx.data_mut()[nc * h * w..(nc + 1) * h * w] {
            *v = g;
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// dense (affine)
// ---------------------------------------------------------------------------

/// x (N, F) * w (F, G) + b (G).
pub fn dense(x: &Tensor, weight: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let (n, f) = x.dims2("dense")?;
    let (wf, g) = weight.dims2("dense")?;
    if wf != f {
        return Err(Error::Shape {
            op: "dense",
            axis: "inner dimension",
            expected: wf,
            got: f,
        });
    }
    if bias.len() != g {
        return Err(Error::Shape {
            op: "dense",
            axis: "bias length",
            expected: g,
            got: bias.len(),
        });
    }
    let mut out = Tensor::zeros(&[n, g]);
    for i in 0..n {
        let row = &mut out.data_mut()[i * g..(i + 1) * g];
        row.copy_from_slice(bias);
    }
    matmul_acc(x.data(), weight.data(), out.data_mut(), n, f, g);
    Ok(out)
}

pub fn dense_backward(
    x: &Tensor,
    weight: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (n, f) = x.dims2("dense_backward")?;
    let (_, g) = weight.dims2("dense_backward")?;
    let mut dx = Tensor::zeros(&[n, f]);
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = vec![0.0; g];
    // dx = dy * W^T
    matmul_bt_acc(dy.data(), weight.data(), dx.data_mut(), n, g, f);
    // dW = x^T * dy
    matmul_at_acc(x.data(), dy.data(), dw.data_mut(), f, n, g);
    for i in 0..n {
        for j in 0..g {
            db[j] += dy.data()[i * g + j];
        }
    }
    Ok((dx, dw, db))
}

// ---------------------------------------------------------------------------
// dropout
// ---------------------------------------------------------------------------

/// Inverted dropout. Returns the output and the applied multiplier mask
/// (1/(1-rate) for survivors, 0 for dropped; all-ones in eval mode).
pub fn dropout(x: &Tensor, rate: f64, mode: Mode, rng: &mut Rng) -> Result<(Tensor, Vec<f64>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Param(alloc::format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    match mode {
        Mode::Eval => Ok((x.clone(), vec![1.0; x.numel()])),
        Mode::Train => {
            if rate == 0.0 {
                return Ok((x.clone(), vec![1.0; x.numel()]));
            }
            let scale = 1.0 / (1.0 - rate);
            let mask: Vec<f64> = (0..x.numel())
                .map(|_| if rng.uniform() < rate { 0.0 } else { scale })
                .collect();
            let mut out = Tensor::zeros(x.shape());
            for ((o, &xv), &m) in out.data_mut().iter_mut().zip(x.data()).zip(&mask) {
                *o = xv * m;
            }
            Ok((out, mask))
        }
    }
}

pub fn dropout_backward(mask: &[f64], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(dy.shape());
    for ((d, &g), &m) in dx.data_mut().iter_mut().zip(dy.data()).zip(mask) {
        *d = g * m;
    }
    dx
}

// ---------------------------------------------------------------------------
// channel concatenation
// ---------------------------------------------------------------------------

/// Concatenate along the channel axis; parts keep their input order.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Param("concat_channels needs at least one part".into()));
    }
    let (n, _, h, w) = parts[0].dims4("concat_channels")?;
    let mut ctotal = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4("concat_channels")?;
        if pn != n {
            return Err(Error::Shape {
                op: "concat_channels",
                axis: "batch",
                expected: n,
                got: pn,
            });
        }
        if ph != h {
            return Err(Error::Shape {
                op: "concat_channels",
                axis: "height",
                expected: h,
                got: ph,
            });
        }
        if pw != w {
            return Err(Error::Shape {
                op: "concat_channels",
                axis: "width",
                expected: w,
                got: pw,
            });
        }
        ctotal += pc;
    }
    let mut out = Tensor::zeros(&[n, ctotal, h, w]);
    let hw = h * w;
    for i in 0..n {
        let mut coff = 0;
        for p in parts {
            let pc = p.shape()[1];
            let src = &p.data()[i * pc * hw..(i + 1) * pc * hw];
            out.data_mut()[(i * ctotal + coff) * hw..(i * ctotal + coff + pc) * hw]
                .copy_from_slice(src);
            coff += pc;
        }
    }
    Ok(out)
}

/// Split a concat gradient back into per-part gradients.
pub fn concat_channels_backward(dy: &Tensor, part_channels: &[usize]) -> Result<Vec<Tensor>> {
    let (n, c, h, w) = dy.dims4("concat_channels_backward")?;
    let total: usize = part_channels.iter().sum();
    if total != c {
        return Err(Error::Shape {
            op: "concat_channels_backward",
            axis: "channel",
            expected: total,
            got: c,
        });
    }
    let hw = h * w;
    let mut grads: Vec<Tensor> = part_channels
        .iter()
        .map(|&pc| Tensor::zeros(&[n, pc, h, w]))
        .collect();
    for i in 0..n {
        let mut coff = 0;
        for (gi, &pc) in part_channels.iter().enumerate() {
            let src = &dy.data()[(i * c + coff) * hw..(i * c + coff + pc) * hw];
            grads[gi].data_mut()[i * pc * hw..(i + 1) * pc * hw].copy_from_slice(src);
            coff += pc;
        }
    }
    Ok(grads)
}

// ---------------------------------------------------------------------------
// softmax cross-entropy
// ---------------------------------------------------------------------------

/// Row-wise softmax with max-subtraction.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (n, c) = logits.dims2("softmax")?;
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let row = &logits.data()[i * c..(i + 1) * c];
        let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out.data_mut()[i * c..(i + 1) * c];
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = exp(v - maxv);
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    Ok(out)
}

/// Class-weighted mean cross-entropy and its exact gradient wrt the logits.
///
/// loss = (1/N) * sum_i w[y_i] * (-log softmax(logits_i)[y_i])
pub fn softmax_cross_entropy(
    logits: &Tensor,
    labels: &[usize],
    class_weights: &[f64],
) -> Result<(f64, Tensor)> {
    let (n, c) = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(Error::Shape {
            op: "softmax_cross_entropy",
            axis: "labels length",
            expected: n,
            got: labels.len(),
        });
    }
    if class_weights.len() != c {
        return Err(Error::Shape {
            op: "softmax_cross_entropy",
            axis: "class weights length",
            expected: c,
            got: class_weights.len(),
        });
    }
    if class_weights.iter().any(|&w| w <= 0.0) {
        return Err(Error::Param("class weights must be positive".into()));
    }
    let probs = softmax_rows(logits)?;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(&[n, c]);
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let y = labels[i];
        if y >= c {
            return Err(Error::Data(alloc::format!(
                "label {y} out of range for {c} classes (sample {i})"
            )));
        }
        let w = class_weights[y];
        let p = probs.data()[i * c + y];
        loss += w * -log(p.max(1e-300));
        let grow = &mut grad.data_mut()[i * c..(i + 1) * c];
        for (j, g) in grow.iter_mut().enumerate() {
            let ind = if j == y { 1.0 } else { 0.0 };
            *g = w * inv_n * (probs.data()[i * c + j] - ind);
        }
    }
    Ok((loss * inv_n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn t4(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::from_vec(&[n, c, h, w], data)
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let w = t4(1, 1, 1, 1, vec![1.0]);
        let y = conv2d(&x, &w, &[0.0], 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn conv_sum_kernel() {
        // direct-summation oracle: sum of all four pixels
        let x = t4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let w = t4(1, 1, 2, 2, vec![1.0; 4]);
        let y = conv2d(&x, &w, &[0.0], 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 10.0);
    }

    #[test]
    fn conv_padded_single_pixel() {
        // 3x3 all-ones kernel over a zero-padded 1x1 field sums to the pixel
        let x = t4(1, 1, 1, 1, vec![5.0]);
        let w = t4(1, 1, 3, 3, vec![1.0; 9]);
        let y = conv2d(&x, &w, &[0.0], 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 5.0);
    }

    #[test]
    fn conv_channel_mismatch_names_axis() {
        let x = t4(1, 2, 4, 4, vec![0.0; 32]);
        let w = t4(1, 3, 3, 3, vec![0.0; 27]);
        match conv2d(&x, &w, &[0.0], 1, 1) {
            Err(Error::Shape { axis, .. }) => assert_eq!(axis, "input channel"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn batch_norm_two_values() {
        let x = t4(1, 1, 1, 2, vec![1.0, 3.0]);
        let mut st = BatchNormState::new(1);
        let (y, _) = batch_norm(&x, &mut st, Mode::Train).unwrap();
        assert!((y.data()[0] + 0.999995).abs() < 1e-6, "{}", y.data()[0]);
        assert!((y.data()[1] - 0.999995).abs() < 1e-6);
    }

    #[test]
    fn batch_norm_constant_batch_yields_beta() {
        let x = t4(2, 1, 2, 2, vec![7.0; 8]);
        let mut st = BatchNormState::new(1);
        st.gamma[0] = 3.0;
        st.beta[0] = -2.5;
        let (y, _) = batch_norm(&x, &mut st, Mode::Train).unwrap();
        for &v in y.data() {
            assert!((v - -2.5).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_eval_closed_form() {
        let x = t4(1, 1, 1, 1, vec![3.0]);
        let mut st = BatchNormState::new(1);
        st.gamma[0] = 2.0;
        st.beta[0] = 1.0;
        let (y, _) = batch_norm(&x, &mut st, Mode::Eval).unwrap();
        assert!((y.data()[0] - 6.99997).abs() < 1e-4, "{}", y.data()[0]);
    }

    #[test]
    fn batch_norm_degenerate_population() {
        let x = t4(1, 1, 1, 1, vec![3.0]);
        let mut st = BatchNormState::new(1);
        assert!(matches!(
            batch_norm(&x, &mut st, Mode::Train),
            Err(Error::DegenerateBatch { population: 1 })
        ));
    }

    #[test]
    fn relu_definition_and_backward() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let x2 = Tensor::from_vec(&[2], vec![-1.0, 2.0]);
        let dy = Tensor::from_vec(&[2], vec![1.0, 1.0]);
        assert_eq!(relu_backward(&x2, &dy).data(), &[0.0, 1.0]);
    }

    #[test]
    fn avg_pool_window_oracle() {
        let x = t4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(avg_pool(&x).unwrap().data(), &[2.5]);
        // window enumeration on a 4x4 raster 1..16
        let x = t4(1, 1, 4, 4, (1..=16).map(|v| v as f64).collect());
        assert_eq!(avg_pool(&x).unwrap().data(), &[3.5, 5.5, 11.5, 13.5]);
    }

    #[test]
    fn avg_pool_odd_extent_rejected() {
        let x = t4(1, 1, 3, 4, vec![0.0; 12]);
        assert!(matches!(avg_pool(&x), Err(Error::Shape { axis: "height", .. })));
    }

    #[test]
    fn global_avg_pool_means() {
        let x = t4(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let x = t4(1, 2, 2, 2, vec![1.0, 1.0, 1.0, 1.0, 7.0, 7.0, 7.0, 7.0]);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[1.0, 7.0]);
        let x = t4(1, 1, 4, 4, (1..=16).map(|v| v as f64).collect());
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[8.5]);
    }

    #[test]
    fn dense_hand_product() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]);
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 1.0, -1.0]);
        let y = dense(&x, &w, &[0.0, 0.0]).unwrap();
        assert_eq!(y.data(), &[3.0, -1.0]);
        // zero weights broadcast the bias
        let w0 = Tensor::zeros(&[2, 2]);
        let y0 = dense(&x, &w0, &[5.0, -3.0]).unwrap();
        assert_eq!(y0.data(), &[5.0, -3.0]);
    }

    #[test]
    fn dropout_contracts() {
        let x = Tensor::filled(&[100], 2.0);
        let mut rng = Rng::new(1);
        let (y, _) = dropout(&x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
        let (y, _) = dropout(&x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
        assert!(dropout(&x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_zero_fraction_monte_carlo() {
        let x = Tensor::filled(&[100_000], 1.0);
        let mut rng = Rng::new(3);
        let (y, _) = dropout(&x, 0.5, Mode::Train, &mut rng).unwrap();
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / 100_000.0;
        assert!((frac - 0.5).abs() < 0.02, "zero fraction {frac}");
        // survivors carry the inverted-dropout scale
        assert!(y.data().iter().all(|&v| v == 0.0 || (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn concat_ordering_and_errors() {
        let a = t4(1, 2, 2, 2, (0..8).map(|v| v as f64).collect());
        let b = t4(1, 3, 2, 2, (100..112).map(|v| v as f64).collect());
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), &[1, 5, 2, 2]);
        assert_eq!(&y.data()[..8], a.data());
        assert_eq!(&y.data()[8..], b.data());
        let bad = t4(1, 1, 3, 2, vec![0.0; 6]);
        assert!(matches!(
            concat_channels(&[&a, &bad]),
            Err(Error::Shape { axis: "height", .. })
        ));
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = t4(2, 2, 2, 2, (0..16).map(|v| v as f64).collect());
        let b = t4(2, 1, 2, 2, (50..58).map(|v| v as f64).collect());
        let y = concat_channels(&[&a, &b]).unwrap();
        let parts = concat_channels_backward(&y, &[2, 1]).unwrap();
        assert_eq!(parts[0].data(), a.data());
        assert_eq!(parts[1].data(), b.data());
    }

    #[test]
    fn cross_entropy_symmetric_logits() {
        let logits = Tensor::from_vec(&[1, 2], vec![0.3, 0.3]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0], &[1.0, 1.0]).unwrap();
        assert!((loss - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_weight_linearity() {
        let logits = Tensor::from_vec(&[1, 2], vec![1.0, -0.5]);
        let (l1, _) = softmax_cross_entropy(&logits, &[0], &[1.0, 1.0]).unwrap();
        let (l2, _) = softmax_cross_entropy(&logits, &[0], &[2.0, 1.0]).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_log_sum_exp() {
        let logits = Tensor::from_vec(&[1, 2], vec![10.0, 0.0]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0], &[1.0, 1.0]).unwrap();
        let expected = log(1.0 + exp(-10.0));
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let logits = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[2], &[1.0, 1.0]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(2);
        let logits = Tensor::from_vec(&[5, 3], (0..15).map(|_| rng.normal() * 10.0).collect());
        let p = softmax_rows(&logits).unwrap();
        for i in 0..5 {
            let s: f64 = p.data()[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
