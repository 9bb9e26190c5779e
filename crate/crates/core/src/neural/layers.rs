//! Layer forward/backward passes with exact gradients.
//!
//! Tensors are stored batch-last, so every kernel's innermost loop is a
//! contiguous run over the batch: convolutions become axpy accumulations
//! (forward, input gradients) and batch-length dots (weight gradients).
//! Work is fanned out over output or input maps with rayon; no reduction
//! ever crosses a thread boundary, so results are bit-identical for any
//! worker count.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::params::ModelParams;
use super::tensor::Tensor4;
use super::{Act, LayerSpec, ModelSpec, Padding};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.9;
const LOG_CLIP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-layer values kept from the forward pass for the backward pass.
pub enum Cache {
    Conv { x: Tensor4 },
    Depthwise { x: Tensor4 },
    Separable { x: Tensor4, mid: Tensor4 },
    BatchNorm {
        x: Tensor4,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Act { x: Tensor4 },
    AvgPool { in_shape: (usize, usize, usize, usize) },
    MaxPool { argmax: Vec<usize>, in_shape: (usize, usize, usize, usize) },
    Dropout { mask: Option<Vec<f64>> },
    Flatten { in_shape: (usize, usize, usize, usize) },
    Dense { x: Tensor4 },
    None,
}

/// AVX2+FMA fast paths for the three hot primitives, selected once at
/// runtime. The scalar fallbacks use the same four-way accumulator split,
/// so summation order is fixed within each path; results are
/// deterministic per machine (fused multiplies round differently from
/// separate mul+add, so bit patterns differ across instruction sets).
#[cfg(target_arch = "x86_64")]
mod simd {
    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
        use std::arch::x86_64::*;
        let n = y.len().min(x.len());
        let n4 = n & !3;
        let av = _mm256_set1_pd(a);
        let mut i = 0;
        while i < n4 {
            let xv = _mm256_loadu_pd(x.as_ptr().add(i));
            let yv = _mm256_loadu_pd(y.as_ptr().add(i));
            _mm256_storeu_pd(y.as_mut_ptr().add(i), _mm256_fmadd_pd(av, xv, yv));
            i += 4;
        }
        while i < n {
            *y.get_unchecked_mut(i) += a * *x.get_unchecked(i);
            i += 1;
        }
    }

    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn dot(a: &[f64], b: &[f64]) -> f64 {
        use std::arch::x86_64::*;
        let n = a.len().min(b.len());
        let n8 = n & !7;
        let mut acc0 = _mm256_setzero_pd();
        let mut acc1 = _mm256_setzero_pd();
        let mut i = 0;
        while i < n8 {
            let a0 = _mm256_loadu_pd(a.as_ptr().add(i));
            let b0 = _mm256_loadu_pd(b.as_ptr().add(i));
            acc0 = _mm256_fmadd_pd(a0, b0, acc0);
            let a1 = _mm256_loadu_pd(a.as_ptr().add(i + 4));
            let b1 = _mm256_loadu_pd(b.as_ptr().add(i + 4));
            acc1 = _mm256_fmadd_pd(a1, b1, acc1);
            i += 8;
        }
        let acc = _mm256_add_pd(acc0, acc1);
        let mut lanes = [0.0f64; 4];
        _mm256_storeu_pd(lanes.as_mut_ptr(), acc);
        let mut s = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
        while i < n {
            s += *a.get_unchecked(i) * *b.get_unchecked(i);
            i += 1;
        }
        s
    }

    #[target_feature(enable = "avx2", enable = "fma")]
    pub unsafe fn sum(a: &[f64]) -> f64 {
        use std::arch::x86_64::*;
        let n = a.len();
        let n4 = n & !3;
        let mut acc = _mm256_setzero_pd();
        let mut i = 0;
        while i < n4 {
            acc = _mm256_add_pd(acc, _mm256_loadu_pd(a.as_ptr().add(i)));
            i += 4;
        }
        let mut lanes = [0.0f64; 4];
        _mm256_storeu_pd(lanes.as_mut_ptr(), acc);
        let mut s = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
        while i < n {
            s += *a.get_unchecked(i);
            i += 1;
        }
        s
    }
}

#[cfg(target_arch = "x86_64")]
fn has_fast_path() -> bool {
    use std::sync::OnceLock;
    static DETECTED: OnceLock<bool> = OnceLock::new();
    *DETECTED.get_or_init(|| {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    })
}

#[cfg(not(target_arch = "x86_64"))]
fn has_fast_path() -> bool {
    false
}

#[inline(always)]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    #[cfg(target_arch = "x86_64")]
    if has_fast_path() {
        unsafe { simd::axpy(y, a, x) };
        return;
    }
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * *xv;
    }
}

/// Dot product with four independent accumulators; the fixed split breaks
/// the FMA dependency chain without changing the summation order between
/// calls, so results stay deterministic.
#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if has_fast_path() {
        return unsafe { simd::dot(a, b) };
    }
    let n4 = a.len() & !3;
    let mut acc = [0.0f64; 4];
    let mut i = 0;
    while i < n4 {
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    while i < a.len() {
        s += a[i] * b[i];
        i += 1;
    }
    s
}

#[inline(always)]
fn sum4(a: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if has_fast_path() {
        return unsafe { simd::sum(a) };
    }
    let n4 = a.len() & !3;
    let mut acc = [0.0f64; 4];
    let mut i = 0;
    while i < n4 {
        acc[0] += a[i];
        acc[1] += a[i + 1];
        acc[2] += a[i + 2];
        acc[3] += a[i + 3];
        i += 4;
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    while i < a.len() {
        s += a[i];
        i += 1;
    }
    s
}

#[derive(Clone, Copy)]
struct ConvDims {
    cin: usize,
    hin: usize,
    win: usize,
    f: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    hout: usize,
    wout: usize,
}

impl ConvDims {
    fn new(cin: usize, hin: usize, win: usize, f: usize, kernel: (usize, usize), padding: Padding) -> Self {
        let (kh, kw) = kernel;
        let (ph, pw, hout, wout) = match padding {
            Padding::Valid => (0, 0, hin - kh + 1, win - kw + 1),
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2, hin, win),
        };
        ConvDims {
            cin,
            hin,
            win,
            f,
            kh,
            kw,
            ph,
            pw,
            hout,
            wout,
        }
    }
}

/// Forward convolution. `wslab` is `[F, Cin, KH, KW]`; the output plane of
/// each filter is computed independently (parallel over filters).
fn conv_forward(d: &ConvDims, x: &Tensor4, wslab: &[f64], bias: Option<&[f64]>, out: &mut Tensor4) {
    let n = x.n;
    let plane = d.hout * d.wout * n;
    out.data
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(f, oplane)| {
            oplane.fill(bias.map(|b| b[f]).unwrap_or(0.0));
            for ci in 0..d.cin {
                for khi in 0..d.kh {
                    for oh in 0..d.hout {
                        let ih = oh + khi;
                        if ih < d.ph || ih - d.ph >= d.hin {
                            continue;
                        }
                        let kw_lo = |ow: usize| d.pw.saturating_sub(ow);
                        for ow in 0..d.wout {
                            let lo = kw_lo(ow);
                            let hi = d.kw.min(d.win + d.pw - ow);
                            if lo >= hi {
                                continue;
                            }
                            let orun = &mut oplane[(oh * d.wout + ow) * n..(oh * d.wout + ow) * n + n];
                            let wbase = ((f * d.cin + ci) * d.kh + khi) * d.kw;
                            for kwi in lo..hi {
                                let iw = ow + kwi - d.pw;
                                axpy(orun, wslab[wbase + kwi], x.run(ci, ih - d.ph, iw));
                            }
                        }
                    }
                }
            }
        });
}

/// Input gradient of a convolution (parallel over input maps).
fn conv_grad_x(d: &ConvDims, gy: &Tensor4, wslab: &[f64], gx: &mut Tensor4) {
    let n = gy.n;
    let in_plane = d.hin * d.win * n;
    gx.data
        .par_chunks_mut(in_plane)
        .enumerate()
        .for_each(|(ci, gplane)| {
            for f in 0..d.f {
                for khi in 0..d.kh {
                    for ih in 0..d.hin {
                        // oh = ih + ph - khi must land in [0, hout).
                        if ih + d.ph < khi {
                            continue;
                        }
                        let oh = ih + d.ph - khi;
                        if oh >= d.hout {
                            continue;
                        }
                        let wbase = ((f * d.cin + ci) * d.kh + khi) * d.kw;
                        for kwi in 0..d.kw {
                            // ow = iw + pw - kwi must land in [0, wout).
                            let c = wslab[wbase + kwi];
                            if c == 0.0 {
                                continue;
                            }
                            let iw_lo = kwi.saturating_sub(d.pw);
                            let iw_hi = d.win.min((d.wout + kwi).saturating_sub(d.pw));
                            for iw in iw_lo..iw_hi {
                                let ow = iw + d.pw - kwi;
                                let grun = &mut gplane[(ih * d.win + iw) * n..(ih * d.win + iw) * n + n];
                                axpy(grun, c, gy.run(f, oh, ow));
                            }
                        }
                    }
                }
            }
        });
}

/// Weight and bias gradients of a convolution (parallel over filters).
fn conv_grad_w(d: &ConvDims, x: &Tensor4, gy: &Tensor4) -> (Vec<f64>, Vec<f64>) {
    let wlen_per_f = d.cin * d.kh * d.kw;
    let mut gw = vec![0.0; d.f * wlen_per_f];
    let mut gb = vec![0.0; d.f];
    gw.par_chunks_mut(wlen_per_f)
        .zip(gb.par_iter_mut())
        .enumerate()
        .for_each(|(f, (gwf, gbf))| {
            let mut bsum = 0.0;
            for oh in 0..d.hout {
                for ow in 0..d.wout {
                    bsum += sum4(gy.run(f, oh, ow));
                }
            }
            *gbf = bsum;
            for ci in 0..d.cin {
                for khi in 0..d.kh {
                    for kwi in 0..d.kw {
                        let mut acc = 0.0;
                        for oh in 0..d.hout {
                            let ih = oh + khi;
                            if ih < d.ph || ih - d.ph >= d.hin {
                                continue;
                            }
                            for ow in 0..d.wout {
                                if ow + kwi < d.pw || ow + kwi - d.pw >= d.win {
                                    continue;
                                }
                                acc += dot(gy.run(f, oh, ow), x.run(ci, ih - d.ph, ow + kwi - d.pw));
                            }
                        }
                        gwf[(ci * d.kh + khi) * d.kw + kwi] = acc;
                    }
                }
            }
        });
    (gw, gb)
}

/// Depthwise layout: weights `[Cin, M, KH, KW]`, output map `ci * M + m`.
#[derive(Clone, Copy)]
struct DwDims {
    cin: usize,
    hin: usize,
    win: usize,
    mult: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    hout: usize,
    wout: usize,
}

impl DwDims {
    fn new(cin: usize, hin: usize, win: usize, mult: usize, kernel: (usize, usize), padding: Padding) -> Self {
        let (kh, kw) = kernel;
        let (ph, pw, hout, wout) = match padding {
            Padding::Valid => (0, 0, hin - kh + 1, win - kw + 1),
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2, hin, win),
        };
        DwDims {
            cin,
            hin,
            win,
            mult,
            kh,
            kw,
            ph,
            pw,
            hout,
            wout,
        }
    }
}

fn dw_forward(d: &DwDims, x: &Tensor4, wslab: &[f64], bias: Option<&[f64]>, out: &mut Tensor4) {
    let n = x.n;
    let plane = d.hout * d.wout * n;
    let klen = d.kh * d.kw;
    out.data
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(m, oplane)| {
            let ci = m / d.mult;
            oplane.fill(bias.map(|b| b[m]).unwrap_or(0.0));
            let wbase = m * klen;
            for khi in 0..d.kh {
                for oh in 0..d.hout {
                    let ih = oh + khi;
                    if ih < d.ph || ih - d.ph >= d.hin {
                        continue;
                    }
                    for ow in 0..d.wout {
                        let lo = d.pw.saturating_sub(ow);
                        let hi = d.kw.min(d.win + d.pw - ow);
                        if lo >= hi {
                            continue;
                        }
                        let orun = &mut oplane[(oh * d.wout + ow) * n..(oh * d.wout + ow) * n + n];
                        for kwi in lo..hi {
                            let iw = ow + kwi - d.pw;
                            axpy(orun, wslab[wbase + khi * d.kw + kwi], x.run(ci, ih - d.ph, iw));
                        }
                    }
                }
            }
        });
}

fn dw_grad_x(d: &DwDims, gy: &Tensor4, wslab: &[f64], gx: &mut Tensor4) {
    let n = gy.n;
    let in_plane = d.hin * d.win * n;
    let klen = d.kh * d.kw;
    gx.data
        .par_chunks_mut(in_plane)
        .enumerate()
        .for_each(|(ci, gplane)| {
            for md in 0..d.mult {
                let m = ci * d.mult + md;
                let wbase = m * klen;
                for khi in 0..d.kh {
                    for ih in 0..d.hin {
                        if ih + d.ph < khi {
                            continue;
                        }
                        let oh = ih + d.ph - khi;
                        if oh >= d.hout {
                            continue;
                        }
                        for kwi in 0..d.kw {
                            let c = wslab[wbase + khi * d.kw + kwi];
                            let iw_lo = kwi.saturating_sub(d.pw);
                            let iw_hi = d.win.min((d.wout + kwi).saturating_sub(d.pw));
                            for iw in iw_lo..iw_hi {
                                let ow = iw + d.pw - kwi;
                                let grun = &mut gplane[(ih * d.win + iw) * n..(ih * d.win + iw) * n + n];
                                axpy(grun, c, gy.run(m, oh, ow));
                            }
                        }
                    }
                }
            }
        });
}

fn dw_grad_w(d: &DwDims, x: &Tensor4, gy: &Tensor4) -> (Vec<f64>, Vec<f64>) {
    let klen = d.kh * d.kw;
    let maps = d.cin * d.mult;
    let mut gw = vec![0.0; maps * klen];
    let mut gb = vec![0.0; maps];
    gw.par_chunks_mut(klen)
        .zip(gb.par_iter_mut())
        .enumerate()
        .for_each(|(m, (gwm, gbm))| {
            let ci = m / d.mult;
            let mut bsum = 0.0;
            for oh in 0..d.hout {
                for ow in 0..d.wout {
                    bsum += sum4(gy.run(m, oh, ow));
                }
            }
            *gbm = bsum;
            for khi in 0..d.kh {
                for kwi in 0..d.kw {
                    let mut acc = 0.0;
                    for oh in 0..d.hout {
                        let ih = oh + khi;
                        if ih < d.ph || ih - d.ph >= d.hin {
                            continue;
                        }
                        for ow in 0..d.wout {
                            if ow + kwi < d.pw || ow + kwi - d.pw >= d.win {
                                continue;
                            }
                            acc += dot(gy.run(m, oh, ow), x.run(ci, ih - d.ph, ow + kwi - d.pw));
                        }
                    }
                    gwm[khi * d.kw + kwi] = acc;
                }
            }
        });
    (gw, gb)
}

/// Mean squared error over all outputs: `sum((p - t)^2) / (N * 3)`.
pub fn mse(pred: &Array2<f64>, targets: &Array2<f64>) -> f64 {
    let n = pred.nrows() * pred.ncols();
    pred.iter()
        .zip(targets.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n as f64
}

/// Gradient of [`mse`] with respect to the predictions.
pub fn loss_grad_mse(pred: &Array2<f64>, targets: &Array2<f64>) -> Array2<f64> {
    let scale = 2.0 / (pred.nrows() * pred.ncols()) as f64;
    let mut g = pred - targets;
    g.mapv_inplace(|v| v * scale);
    g
}

/// Final `[n, k, 1, 1]` activations as an `n x k` array.
pub fn output_to_array(out: &Tensor4) -> Array2<f64> {
    Array2::from_shape_fn((out.n, out.c), |(nn, k)| out.at(nn, k, 0, 0))
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

/// Run the layer stack. In train mode, dropout masks are drawn from `rng`
/// and batchnorm running statistics are updated in `params`; in eval mode
/// `params` is not mutated, dropout is inactive, and batchnorm uses the
/// running statistics. Non-finite activations abort with the layer index.
pub fn forward(
    spec: &ModelSpec,
    params: &mut ModelParams,
    input: &Tensor4,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor4, Vec<Cache>)> {
    if input.c != 1 || input.h != spec.input_channels || input.w != spec.input_width {
        return Err(Error::Shape(format!(
            "model expects [n, 1, {}, {}] input, got [{}, {}, {}, {}]",
            spec.input_channels, spec.input_width, input.n, input.c, input.h, input.w
        )));
    }
    let n = input.n;
    let mut cur = input.clone();
    let mut caches = Vec::with_capacity(spec.layers.len());
    for (index, layer) in spec.layers.iter().enumerate() {
        let vars = &params.layers[index];
        let (next, cache) = match layer {
            LayerSpec::Conv2d { kernel, filters, padding } => {
                let d = ConvDims::new(cur.c, cur.h, cur.w, *filters, *kernel, *padding);
                let mut out = Tensor4::zeros(n, d.f, d.hout, d.wout);
                conv_forward(&d, &cur, &vars.weights[0].data, Some(&vars.weights[1].data), &mut out);
                (out, Cache::Conv { x: cur })
            }
            LayerSpec::DepthwiseConv2d { kernel, depth_multiplier, .. } => {
                let d = DwDims::new(cur.c, cur.h, cur.w, *depth_multiplier, *kernel, Padding::Valid);
                let mut out = Tensor4::zeros(n, d.cin * d.mult, d.hout, d.wout);
                dw_forward(&d, &cur, &vars.weights[0].data, Some(&vars.weights[1].data), &mut out);
                (out, Cache::Depthwise { x: cur })
            }
            LayerSpec::SeparableConv2d { kernel, filters, padding } => {
                let dw = DwDims::new(cur.c, cur.h, cur.w, 1, *kernel, *padding);
                let mut mid = Tensor4::zeros(n, cur.c, dw.hout, dw.wout);
                dw_forward(&dw, &cur, &vars.weights[0].data, None, &mut mid);
                let pw = ConvDims::new(mid.c, mid.h, mid.w, *filters, (1, 1), Padding::Valid);
                let mut out = Tensor4::zeros(n, *filters, mid.h, mid.w);
                conv_forward(&pw, &mid, &vars.weights[1].data, Some(&vars.weights[2].data), &mut out);
                (out, Cache::Separable { x: cur, mid })
            }
            LayerSpec::BatchNorm => batchnorm_forward(cur, params, index, mode)?,
            LayerSpec::Activation { act } => match act {
                Act::Linear => {
                    let out = cur.clone();
                    (out, Cache::Act { x: cur })
                }
                Act::Elu => {
                    let mut out = cur.clone();
                    out.data.iter_mut().for_each(|v| *v = elu(*v));
                    (out, Cache::Act { x: cur })
                }
                Act::Square => {
                    let mut out = cur.clone();
                    out.data.iter_mut().for_each(|v| *v = *v * *v);
                    (out, Cache::Act { x: cur })
                }
                Act::Log => {
                    let mut out = cur.clone();
                    out.data.iter_mut().for_each(|v| *v = v.max(LOG_CLIP).ln());
                    (out, Cache::Act { x: cur })
                }
            },
            LayerSpec::AvgPool { kernel, stride } => {
                let (out, in_shape) = avgpool_forward(&cur, *kernel, *stride);
                (out, Cache::AvgPool { in_shape })
            }
            LayerSpec::MaxPool { kernel, stride } => {
                let (out, argmax, in_shape) = maxpool_forward(&cur, *kernel, *stride);
                (out, Cache::MaxPool { argmax, in_shape })
            }
            LayerSpec::Dropout { rate } => {
                if mode == Mode::Train && *rate > 0.0 {
                    let keep = 1.0 - rate;
                    let scale = 1.0 / keep;
                    let mut mask = vec![0.0; cur.len()];
                    for m in &mut mask {
                        *m = if rng.gen::<f64>() < *rate { 0.0 } else { scale };
                    }
                    let mut out = cur.clone();
                    for (v, m) in out.data.iter_mut().zip(&mask) {
                        *v *= m;
                    }
                    (out, Cache::Dropout { mask: Some(mask) })
                } else {
                    (cur, Cache::Dropout { mask: None })
                }
            }
            LayerSpec::Flatten => {
                let in_shape = cur.shape();
                // Batch-last layout flattens by reinterpreting dimensions.
                let out = Tensor4 {
                    data: cur.data.clone(),
                    n,
                    c: cur.c * cur.h * cur.w,
                    h: 1,
                    w: 1,
                };
                (out, Cache::Flatten { in_shape })
            }
            LayerSpec::Dense { units } => {
                let d_in = cur.c;
                let mut out = Tensor4::zeros(n, *units, 1, 1);
                let w = &vars.weights[0].data;
                let b = &vars.weights[1].data;
                for u in 0..*units {
                    let orun = out.run_mut(u, 0, 0);
                    orun.fill(b[u]);
                    for di in 0..d_in {
                        axpy(orun, w[u * d_in + di], cur.run(di, 0, 0));
                    }
                }
                (out, Cache::Dense { x: cur })
            }
        };
        if next.has_non_finite() {
            return Err(Error::Layer {
                index,
                kind: layer.kind_name().to_string(),
                detail: "non-finite activation".into(),
            });
        }
        caches.push(cache);
        cur = next;
    }
    Ok((cur, caches))
}

fn batchnorm_forward(
    x: Tensor4,
    params: &mut ModelParams,
    index: usize,
    mode: Mode,
) -> Result<(Tensor4, Cache)> {
    let (n, c, h, w) = x.shape();
    let plane = h * w * n;
    let gamma = params.layers[index].weights[0].data.clone();
    let beta = params.layers[index].weights[1].data.clone();
    match mode {
        Mode::Train => {
            let nred = plane as f64;
            // Per-map mean and biased variance over (batch, h, w); each
            // map's block is one contiguous slice.
            let stats: Vec<(f64, f64)> = x
                .data
                .par_chunks(plane)
                .map(|slab| {
                    let mean = sum4(slab) / nred;
                    let mut ss = 0.0;
                    for v in slab {
                        ss += (v - mean) * (v - mean);
                    }
                    (mean, ss / nred)
                })
                .collect();
            let mean: Vec<f64> = stats.iter().map(|(m, _)| *m).collect();
            let inv_std: Vec<f64> = stats.iter().map(|(_, v)| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut out = x.clone();
            out.data
                .par_chunks_mut(plane)
                .enumerate()
                .for_each(|(ci, slab)| {
                    let (m, inv) = (mean[ci], inv_std[ci]);
                    let (g, b) = (gamma[ci], beta[ci]);
                    let scale = g * inv;
                    let shift = b - m * scale;
                    for v in slab {
                        *v = *v * scale + shift;
                    }
                });
            {
                let state = &mut params.layers[index].state;
                for ci in 0..c {
                    state[0].data[ci] = BN_MOMENTUM * state[0].data[ci] + (1.0 - BN_MOMENTUM) * stats[ci].0;
                    state[1].data[ci] = BN_MOMENTUM * state[1].data[ci] + (1.0 - BN_MOMENTUM) * stats[ci].1;
                }
            }
            Ok((out, Cache::BatchNorm { x, mean, inv_std }))
        }
        Mode::Eval => {
            let run_mean = params.layers[index].state[0].data.clone();
            let run_var = &params.layers[index].state[1].data;
            let inv: Vec<f64> = run_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut out = x;
            out.data
                .par_chunks_mut(plane)
                .enumerate()
                .for_each(|(ci, slab)| {
                    let (g, b, m, iv) = (gamma[ci], beta[ci], run_mean[ci], inv[ci]);
                    for v in slab {
                        *v = g * (*v - m) * iv + b;
                    }
                });
            Ok((out, Cache::None))
        }
    }
}

fn avgpool_forward(
    x: &Tensor4,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> (Tensor4, (usize, usize, usize, usize)) {
    let (n, c, h, w) = x.shape();
    let oh = (h - kernel.0) / stride.0 + 1;
    let ow = (w - kernel.1) / stride.1 + 1;
    let mut out = Tensor4::zeros(n, c, oh, ow);
    let scale = 1.0 / (kernel.0 * kernel.1) as f64;
    let oplane = oh * ow * n;
    out.data
        .par_chunks_mut(oplane)
        .enumerate()
        .for_each(|(ci, slab)| {
            for ohh in 0..oh {
                for oww in 0..ow {
                    let orun = &mut slab[(ohh * ow + oww) * n..(ohh * ow + oww) * n + n];
                    for kh in 0..kernel.0 {
                        for kw in 0..kernel.1 {
                            axpy(orun, scale, x.run(ci, ohh * stride.0 + kh, oww * stride.1 + kw));
                        }
                    }
                }
            }
        });
    (out, (n, c, h, w))
}

fn maxpool_forward(
    x: &Tensor4,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> (Tensor4, Vec<usize>, (usize, usize, usize, usize)) {
    let (n, c, h, w) = x.shape();
    let oh = (h - kernel.0) / stride.0 + 1;
    let ow = (w - kernel.1) / stride.1 + 1;
    let mut out = Tensor4::zeros(n, c, oh, ow);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let oplane = oh * ow * n;
    let iplane = h * w * n;
    out.data
        .par_chunks_mut(oplane)
        .zip(argmax.par_chunks_mut(oplane))
        .enumerate()
        .for_each(|(ci, (slab, args))| {
            for ohh in 0..oh {
                for oww in 0..ow {
                    let base = (ohh * ow + oww) * n;
                    let orun = &mut slab[base..base + n];
                    let arun = &mut args[base..base + n];
                    orun.fill(f64::NEG_INFINITY);
                    for kh in 0..kernel.0 {
                        let ih = ohh * stride.0 + kh;
                        for kw in 0..kernel.1 {
                            let iw = oww * stride.1 + kw;
                            let xrun = x.run(ci, ih, iw);
                            let flat = ci * iplane + (ih * w + iw) * n;
                            for nn in 0..n {
                                // First occurrence wins ties.
                                if xrun[nn] > orun[nn] {
                                    orun[nn] = xrun[nn];
                                    arun[nn] = flat + nn;
                                }
                            }
                        }
                    }
                }
            }
        });
    (out, argmax, (n, c, h, w))
}

/// Backpropagate through the stack. `caches` must come from a train-mode
/// [`forward`] call on the same parameters. Returns gradients shaped like
/// the trainable weights.
pub fn backward(
    spec: &ModelSpec,
    params: &ModelParams,
    caches: &[Cache],
    grad_out: &Tensor4,
) -> Result<ModelParams> {
    let mut grads = params.zeros_like();
    let mut gy = grad_out.clone();
    for (index, layer) in spec.layers.iter().enumerate().rev() {
        let vars = &params.layers[index];
        let cache = &caches[index];
        gy = match (layer, cache) {
            (LayerSpec::Conv2d { kernel, filters, padding }, Cache::Conv { x }) => {
                let d = ConvDims::new(x.c, x.h, x.w, *filters, *kernel, *padding);
                let (gw, gb) = conv_grad_w(&d, x, &gy);
                grads.layers[index].weights[0].data = gw;
                grads.layers[index].weights[1].data = gb;
                let mut gx = Tensor4::zeros(x.n, x.c, x.h, x.w);
                conv_grad_x(&d, &gy, &vars.weights[0].data, &mut gx);
                gx
            }
            (LayerSpec::DepthwiseConv2d { kernel, depth_multiplier, .. }, Cache::Depthwise { x }) => {
                let d = DwDims::new(x.c, x.h, x.w, *depth_multiplier, *kernel, Padding::Valid);
                let (gw, gb) = dw_grad_w(&d, x, &gy);
                grads.layers[index].weights[0].data = gw;
                grads.layers[index].weights[1].data = gb;
                let mut gx = Tensor4::zeros(x.n, x.c, x.h, x.w);
                dw_grad_x(&d, &gy, &vars.weights[0].data, &mut gx);
                gx
            }
            (LayerSpec::SeparableConv2d { kernel, filters, padding }, Cache::Separable { x, mid }) => {
                // Pointwise stage first.
                let pwd = ConvDims::new(mid.c, mid.h, mid.w, *filters, (1, 1), Padding::Valid);
                let (gpw, gb) = conv_grad_w(&pwd, mid, &gy);
                grads.layers[index].weights[1].data = gpw;
                grads.layers[index].weights[2].data = gb;
                let mut gmid = Tensor4::zeros(mid.n, mid.c, mid.h, mid.w);
                conv_grad_x(&pwd, &gy, &vars.weights[1].data, &mut gmid);
                // Depthwise stage (no bias on this half).
                let dwd = DwDims::new(x.c, x.h, x.w, 1, *kernel, *padding);
                let (gdw, _) = dw_grad_w(&dwd, x, &gmid);
                grads.layers[index].weights[0].data = gdw;
                let mut gx = Tensor4::zeros(x.n, x.c, x.h, x.w);
                dw_grad_x(&dwd, &gmid, &vars.weights[0].data, &mut gx);
                gx
            }
            (LayerSpec::BatchNorm, Cache::BatchNorm { x, mean, inv_std }) => {
                let (n, c, h, w) = x.shape();
                let plane = h * w * n;
                let nred = plane as f64;
                let gamma = &vars.weights[0].data;
                // xhat is recomputed on the fly from the cached input.
                let sums: Vec<(f64, f64)> = gy
                    .data
                    .par_chunks(plane)
                    .zip(x.data.par_chunks(plane))
                    .enumerate()
                    .map(|(ci, (gys, xs))| {
                        let (m, inv) = (mean[ci], inv_std[ci]);
                        let mut dg = 0.0;
                        let mut db = 0.0;
                        for (g, xv) in gys.iter().zip(xs) {
                            dg += g * (xv - m) * inv;
                            db += g;
                        }
                        (dg, db)
                    })
                    .collect();
                for ci in 0..c {
                    grads.layers[index].weights[0].data[ci] = sums[ci].0;
                    grads.layers[index].weights[1].data[ci] = sums[ci].1;
                }
                let mut gx = Tensor4::zeros(n, c, h, w);
                gx.data
                    .par_chunks_mut(plane)
                    .zip(gy.data.par_chunks(plane))
                    .zip(x.data.par_chunks(plane))
                    .enumerate()
                    .for_each(|(ci, ((gxs, gys), xs))| {
                        let (dg, db) = sums[ci];
                        let (m, inv) = (mean[ci], inv_std[ci]);
                        let coeff = gamma[ci] * inv;
                        for i in 0..plane {
                            let xh = (xs[i] - m) * inv;
                            gxs[i] = coeff * (gys[i] - db / nred - xh * dg / nred);
                        }
                    });
                gx
            }
            (LayerSpec::Activation { act }, Cache::Act { x }) => {
                let mut gx = gy.clone();
                match act {
                    Act::Linear => {}
                    Act::Elu => {
                        for (g, xv) in gx.data.iter_mut().zip(&x.data) {
                            if *xv <= 0.0 {
                                *g *= xv.exp();
                            }
                        }
                    }
                    Act::Square => {
                        for (g, xv) in gx.data.iter_mut().zip(&x.data) {
                            *g *= 2.0 * xv;
                        }
                    }
                    Act::Log => {
                        for (g, xv) in gx.data.iter_mut().zip(&x.data) {
                            *g = if *xv > LOG_CLIP { *g / *xv } else { 0.0 };
                        }
                    }
                }
                gx
            }
            (LayerSpec::AvgPool { kernel, stride }, Cache::AvgPool { in_shape }) => {
                let (n, c, h, w) = *in_shape;
                let mut gx = Tensor4::zeros(n, c, h, w);
                let scale = 1.0 / (kernel.0 * kernel.1) as f64;
                let (oh, ow) = (gy.h, gy.w);
                let iplane = h * w * n;
                let kernel = *kernel;
                let stride = *stride;
                gx.data
                    .par_chunks_mut(iplane)
                    .enumerate()
                    .for_each(|(ci, gplane)| {
                        for ohh in 0..oh {
                            for oww in 0..ow {
                                let grun = gy.run(ci, ohh, oww);
                                for kh in 0..kernel.0 {
                                    let ih = ohh * stride.0 + kh;
                                    for kw in 0..kernel.1 {
                                        let iw = oww * stride.1 + kw;
                                        let dst = &mut gplane[(ih * w + iw) * n..(ih * w + iw) * n + n];
                                        axpy(dst, scale, grun);
                                    }
                                }
                            }
                        }
                    });
                gx
            }
            (LayerSpec::MaxPool { .. }, Cache::MaxPool { argmax, in_shape }) => {
                let (n, c, h, w) = *in_shape;
                let mut gx = Tensor4::zeros(n, c, h, w);
                for (i, &src) in argmax.iter().enumerate() {
                    gx.data[src] += gy.data[i];
                }
                gx
            }
            (LayerSpec::Dropout { .. }, Cache::Dropout { mask }) => {
                let mut gx = gy.clone();
                if let Some(mask) = mask {
                    for (g, m) in gx.data.iter_mut().zip(mask) {
                        *g *= m;
                    }
                }
                gx
            }
            (LayerSpec::Flatten, Cache::Flatten { in_shape }) => {
                let (n, c, h, w) = *in_shape;
                Tensor4 {
                    data: gy.data.clone(),
                    n,
                    c,
                    h,
                    w,
                }
            }
            (LayerSpec::Dense { units }, Cache::Dense { x }) => {
                let d_in = x.c;
                let w = &vars.weights[0].data;
                for u in 0..*units {
                    let gyrun = gy.run(u, 0, 0);
                    grads.layers[index].weights[1].data[u] = sum4(gyrun);
                    for di in 0..d_in {
                        grads.layers[index].weights[0].data[u * d_in + di] =
                            dot(gyrun, x.run(di, 0, 0));
                    }
                }
                let mut gx = Tensor4::zeros(x.n, x.c, 1, 1);
                for u in 0..*units {
                    let gyrun = gy.run(u, 0, 0).to_vec();
                    for di in 0..d_in {
                        axpy(gx.run_mut(di, 0, 0), w[u * d_in + di], &gyrun);
                    }
                }
                gx
            }
            (layer, _) => {
                return Err(Error::Layer {
                    index,
                    kind: layer.kind_name().to_string(),
                    detail: "cache does not match layer".into(),
                })
            }
        };
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::params::init_params;
    use crate::neural::Arch;
    use rand::SeedableRng;

    #[test]
    fn elu_reference_points() {
        assert_eq!(elu(0.0), 0.0);
        assert_eq!(elu(1.0), 1.0);
        assert!((elu(-10.0) + 0.9999546).abs() < 1e-6);
    }

    #[test]
    fn batchnorm_train_mode_normalizes() {
        let spec = ModelSpec {
            arch: Arch::EegNet,
            input_channels: 4,
            input_width: 6,
            layers: vec![
                LayerSpec::Conv2d {
                    kernel: (1, 1),
                    filters: 2,
                    padding: Padding::Valid,
                },
                LayerSpec::BatchNorm,
            ],
        };
        let mut params = init_params(&spec, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor4::from_vec(
            (0..3 * 4 * 6).map(|i| (i as f64 * 0.37).sin() * 3.0 + 1.0).collect(),
            3,
            1,
            4,
            6,
        )
        .unwrap();
        let (out, _) = forward(&spec, &mut params, &x, Mode::Train, &mut rng).unwrap();
        // gamma = 1, beta = 0 at init: per-map mean 0, variance 1 (up to eps).
        let plane = out.h * out.w * out.n;
        for ci in 0..out.c {
            let slab = &out.data[ci * plane..(ci + 1) * plane];
            let mean = slab.iter().sum::<f64>() / plane as f64;
            let var = slab.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            assert!(mean.abs() < 1e-6, "map {ci} mean {mean}");
            assert!((var - 1.0).abs() < 1e-2, "map {ci} var {var}");
        }
    }

    /// Quick finite-difference check on a tiny stack covering several kinds.
    #[test]
    fn small_stack_gradients_match_finite_differences() {
        let spec = ModelSpec {
            arch: Arch::ShallowConvNet,
            input_channels: 3,
            input_width: 12,
            layers: vec![
                LayerSpec::Conv2d {
                    kernel: (1, 5),
                    filters: 2,
                    padding: Padding::Same,
                },
                LayerSpec::BatchNorm,
                LayerSpec::Activation { act: Act::Elu },
                LayerSpec::AvgPool {
                    kernel: (1, 2),
                    stride: (1, 2),
                },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 3 },
            ],
        };
        let params = init_params(&spec, 7).unwrap();
        let x = Tensor4::from_vec(
            (0..2 * 3 * 12).map(|i| ((i as f64) * 0.61).cos()).collect(),
            2,
            1,
            3,
            12,
        )
        .unwrap();
        let targets = Array2::from_shape_fn((2, 3), |(i, j)| (i + j) as f64 * 0.25);

        let loss_at = |p: &ModelParams| -> f64 {
            let mut p = p.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let (out, _) = forward(&spec, &mut p, &x, Mode::Train, &mut rng).unwrap();
            mse(&output_to_array(&out), &targets)
        };

        let mut p = params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (out, caches) = forward(&spec, &mut p, &x, Mode::Train, &mut rng).unwrap();
        let glast = loss_grad_mse(&output_to_array(&out), &targets);
        let gt = Tensor4::from_vec(glast.iter().cloned().collect(), 2, 3, 1, 1).unwrap();
        let grads = backward(&spec, &params, &caches, &gt).unwrap();

        let h = 1e-5;
        for (li, layer) in params.layers.iter().enumerate() {
            for (ti, t) in layer.weights.iter().enumerate() {
                for ei in (0..t.data.len()).step_by(7) {
                    let mut plus = params.clone();
                    plus.layers[li].weights[ti].data[ei] += h;
                    let mut minus = params.clone();
                    minus.layers[li].weights[ti].data[ei] -= h;
                    let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                    let an = grads.layers[li].weights[ti].data[ei];
                    // Conv biases ahead of batchnorm have exactly zero
                    // gradients; compare absolutely near zero.
                    let ok = (fd - an).abs() < 1e-8
                        || (fd - an).abs() / fd.abs().max(an.abs()) < 1e-4;
                    assert!(ok, "layer {li} tensor {ti} elem {ei}: fd {fd} vs {an}");
                }
            }
        }
    }
}
