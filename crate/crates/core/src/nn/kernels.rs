//! Forward and backward kernels for every layer the backbones need.
//!
//! All kernels are pure functions over [`Tensor`]s; the autodiff tape wraps
//! them. Convolutions go through im2col + matmul. Parallelism is over images
//! (or channels for batch-norm statistics) so each output element is written
//! by exactly one thread with a fixed accumulation order, keeping results
//! bit-reproducible regardless of scheduling.

use crate::error::{Error, Result};
use crate::nn::tensor::{Elem, Shape, Tensor};
use rayon::prelude::*;

// ---------------------------------------------------------------------------
// matmul primitives
// ---------------------------------------------------------------------------

/// c[m,n] += a[m,k] * b[k,n]
pub fn matmul_nn<E: Elem>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T (row-by-row dot products)
pub fn matmul_nt<E: Elem>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for p in 0..k {
                acc = acc + arow[p] * brow[p];
            }
            c[i * n + j] = c[i * n + j] + acc;
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n]
pub fn matmul_tn<E: Elem>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

pub fn conv2d_out_dims(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if stride != 1 && stride != 2 {
        return Err(Error::shape(format!("conv stride must be 1 or 2, got {stride}")));
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::shape(format!(
            "conv kernel {k} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    if oh == 0 || ow == 0 {
        return Err(Error::shape("conv output would be empty".to_string()));
    }
    Ok((oh, ow))
}

fn check_conv_shapes<E: Elem>(x: &Tensor<E>, w: &Tensor<E>, stride: usize, pad: usize) -> Result<(usize, usize, usize, usize)> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.h != ws.w {
        return Err(Error::shape(format!("conv kernel must be square, got {}x{}", ws.h, ws.w)));
    }
    if ws.c != xs.c {
        return Err(Error::shape(format!(
            "conv input channels {} do not match weight channels {}",
            xs.c, ws.c
        )));
    }
    let (oh, ow) = conv2d_out_dims(xs.h, xs.w, ws.h, stride, pad)?;
    Ok((ws.n, ws.h, oh, ow))
}

/// Unfold one image (c*h*w slice) into columns of shape [c*k*k, oh*ow].
fn im2col<E: Elem>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [E],
) {
    debug_assert_eq!(cols.len(), c * k * k * oh * ow);
    let plane = oh * ow;
    for ci in 0..c {
        let xch = &x[ci * h * w..(ci + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = &mut cols[((ci * k + kh) * k + kw) * plane..][..plane];
                for oy in 0..oh {
                    let iy = (oy * stride + kh) as isize - pad as isize;
                    let out = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        for v in out.iter_mut() {
                            *v = E::zero();
                        }
                        continue;
                    }
                    let xrow = &xch[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kw) as isize - pad as isize;
                        out[ox] = if ix < 0 || ix >= w as isize {
                            E::zero()
                        } else {
                            xrow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold columns back into an image, accumulating overlaps.
fn col2im<E: Elem>(
    cols: &[E],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x: &mut [E],
) {
    let plane = oh * ow;
    for ci in 0..c {
        let xch = &mut x[ci * h * w..(ci + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let row = &cols[((ci * k + kh) * k + kw) * plane..][..plane];
                for oy in 0..oh {
                    let iy = (oy * stride + kh) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &mut xch[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kw) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            xrow[ix as usize] = xrow[ix as usize] + row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_fwd<E: Elem>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<E>> {
    let xs = x.shape();
    let (cout, k, oh, ow) = check_conv_shapes(x, w, stride, pad)?;
    if let Some(b) = bias {
        let bs = b.shape();
        if bs.n != 1 || bs.c != cout || bs.h != 1 || bs.w != 1 {
            return Err(Error::shape(format!("conv bias shape {} does not match {cout} channels", bs)));
        }
    }
    let ck2 = xs.c * k * k;
    let plane = oh * ow;
    let mut y = Tensor::zeros(Shape::new(xs.n, cout, oh, ow));
    let ylen = cout * plane;

    y.data_mut()
        .par_chunks_mut(ylen)
        .enumerate()
        .for_each(|(n, yimg)| {
            let mut cols = vec![E::zero(); ck2 * plane];
            im2col(x.image(n), xs.c, xs.h, xs.w, k, stride, pad, oh, ow, &mut cols);
            matmul_nn(w.data(), &cols, yimg, cout, ck2, plane);
            if let Some(b) = bias {
                for co in 0..cout {
                    let bv = b.data()[co];
                    for v in yimg[co * plane..(co + 1) * plane].iter_mut() {
                        *v = *v + bv;
                    }
                }
            }
        });
    Ok(y)
}

pub fn conv2d_bwd_input<E: Elem>(
    dy: &Tensor<E>,
    w: &Tensor<E>,
    x_shape: Shape,
    stride: usize,
    pad: usize,
) -> Tensor<E> {
    let ws = w.shape();
    let (cout, k) = (ws.n, ws.h);
    let dys = dy.shape();
    let plane = dys.h * dys.w;
    let ck2 = x_shape.c * k * k;
    let mut dx = Tensor::zeros(x_shape);
    let img_len = x_shape.image_len();

    dx.data_mut()
        .par_chunks_mut(img_len)
        .enumerate()
        .for_each(|(n, dximg)| {
            let mut dcols = vec![E::zero(); ck2 * plane];
            matmul_tn(w.data(), dy.image(n), &mut dcols, cout, ck2, plane);
            col2im(&dcols, x_shape.c, x_shape.h, x_shape.w, k, stride, pad, dys.h, dys.w, dximg);
        });
    dx
}

pub fn conv2d_bwd_weight<E: Elem>(
    dy: &Tensor<E>,
    x: &Tensor<E>,
    w_shape: Shape,
    stride: usize,
    pad: usize,
) -> Tensor<E> {
    let xs = x.shape();
    let dys = dy.shape();
    let (cout, k) = (w_shape.n, w_shape.h);
    let ck2 = xs.c * k * k;
    let plane = dys.h * dys.w;

    // Per-image partials computed in parallel, then reduced in batch order so
    // the accumulation order is independent of scheduling.
    let partials: Vec<Vec<E>> = (0..xs.n)
        .into_par_iter()
        .map(|n| {
            let mut cols = vec![E::zero(); ck2 * plane];
            im2col(x.image(n), xs.c, xs.h, xs.w, k, stride, pad, dys.h, dys.w, &mut cols);
            let mut dw = vec![E::zero(); cout * ck2];
            matmul_nt(dy.image(n), &cols, &mut dw, cout, plane, ck2);
            dw
        })
        .collect();

    let mut dw = Tensor::zeros(w_shape);
    for part in partials {
        for (d, p) in dw.data_mut().iter_mut().zip(part) {
            *d = *d + p;
        }
    }
    dw
}

pub fn conv2d_bwd_bias<E: Elem>(dy: &Tensor<E>) -> Tensor<E> {
    let s = dy.shape();
    let mut db = Tensor::zeros(Shape::new(1, s.c, 1, 1));
    for n in 0..s.n {
        let img = dy.image(n);
        for c in 0..s.c {
            let mut acc = E::zero();
            for &v in &img[c * s.h * s.w..(c + 1) * s.h * s.w] {
                acc = acc + v;
            }
            db.data_mut()[c] = db.data_mut()[c] + acc;
        }
    }
    db
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Context saved by the train-mode forward for the backward pass.
#[derive(Clone, Debug)]
pub struct BnSaved<E> {
    pub xhat: Tensor<E>,
    pub inv_std: Vec<E>,
    pub mean: Vec<E>,
    /// Biased batch variance, used for the running-stat update.
    pub var: Vec<E>,
}

fn check_bn_param<E: Elem>(p: &Tensor<E>, c: usize, what: &str) -> Result<()> {
    let s = p.shape();
    if s.n != 1 || s.c != c || s.h != 1 || s.w != 1 {
        return Err(Error::shape(format!("batch-norm {what} shape {s} does not match {c} channels")));
    }
    Ok(())
}

/// Train mode: normalize by batch statistics (biased variance).
pub fn bn_train_fwd<E: Elem>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
) -> Result<(Tensor<E>, BnSaved<E>)> {
    let s = x.shape();
    check_bn_param(gamma, s.c, "scale")?;
    check_bn_param(beta, s.c, "shift")?;
    let m = (s.n * s.h * s.w) as f64;
    let eps = E::from_f64(BN_EPS);

    let stats: Vec<(E, E, E)> = (0..s.c)
        .into_par_iter()
        .map(|c| {
            let mut sum = E::zero();
            let mut sumsq = E::zero();
            for n in 0..s.n {
                let ch = &x.image(n)[c * s.h * s.w..(c + 1) * s.h * s.w];
                for &v in ch {
                    sum = sum + v;
                    sumsq = sumsq + v * v;
                }
            }
            let mean = sum / E::from_f64(m);
            let var = (sumsq / E::from_f64(m) - mean * mean).max(E::zero());
            let inv_std = E::one() / (var + eps).sqrt();
            (mean, var, inv_std)
        })
        .collect();

    let mut y = Tensor::zeros(s);
    let mut xhat = Tensor::zeros(s);
    let plane = s.h * s.w;
    let img_len = s.image_len();
    y.data_mut()
        .par_chunks_mut(img_len)
        .zip(xhat.data_mut().par_chunks_mut(img_len))
        .enumerate()
        .for_each(|(n, (yimg, ximg))| {
            let src = x.image(n);
            for c in 0..s.c {
                let (mean, _, inv_std) = stats[c];
                let g = gamma.data()[c];
                let b = beta.data()[c];
                for i in c * plane..(c + 1) * plane {
                    let xh = (src[i] - mean) * inv_std;
                    ximg[i] = xh;
                    yimg[i] = g * xh + b;
                }
            }
        });

    let saved = BnSaved {
        xhat,
        inv_std: stats.iter().map(|t| t.2).collect(),
        mean: stats.iter().map(|t| t.0).collect(),
        var: stats.iter().map(|t| t.1).collect(),
    };
    Ok((y, saved))
}

pub fn bn_train_bwd<E: Elem>(
    dy: &Tensor<E>,
    saved: &BnSaved<E>,
    gamma: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let s = dy.shape();
    let plane = s.h * s.w;
    let m = E::from_f64((s.n * s.h * s.w) as f64);

    // Per-channel reductions.
    let sums: Vec<(E, E)> = (0..s.c)
        .into_par_iter()
        .map(|c| {
            let mut sum_dy = E::zero();
            let mut sum_dy_xhat = E::zero();
            for n in 0..s.n {
                let base = n * s.image_len() + c * plane;
                for i in 0..plane {
                    let g = dy.data()[base + i];
                    sum_dy = sum_dy + g;
                    sum_dy_xhat = sum_dy_xhat + g * saved.xhat.data()[base + i];
                }
            }
            (sum_dy, sum_dy_xhat)
        })
        .collect();

    let mut dgamma = Tensor::zeros(Shape::new(1, s.c, 1, 1));
    let mut dbeta = Tensor::zeros(Shape::new(1, s.c, 1, 1));
    for c in 0..s.c {
        dbeta.data_mut()[c] = sums[c].0;
        dgamma.data_mut()[c] = sums[c].1;
    }

    let mut dx = Tensor::zeros(s);
    let img_len = s.image_len();
    dx.data_mut()
        .par_chunks_mut(img_len)
        .enumerate()
        .for_each(|(n, dximg)| {
            for c in 0..s.c {
                let g = gamma.data()[c];
                let inv_std = saved.inv_std[c];
                let (sum_dy, sum_dy_xhat) = sums[c];
                let scale = g * inv_std / m;
                let base = n * img_len + c * plane;
                for i in 0..plane {
                    let gdy = dy.data()[base + i];
                    let xh = saved.xhat.data()[base + i];
                    dximg[c * plane + i] = scale * (m * gdy - sum_dy - xh * sum_dy_xhat);
                }
            }
        });
    (dx, dgamma, dbeta)
}

/// Eval mode: normalize by running statistics.
pub fn bn_eval_fwd<E: Elem>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running_mean: &Tensor<E>,
    running_var: &Tensor<E>,
) -> Result<Tensor<E>> {
    let s = x.shape();
    check_bn_param(gamma, s.c, "scale")?;
    check_bn_param(beta, s.c, "shift")?;
    check_bn_param(running_mean, s.c, "running mean")?;
    check_bn_param(running_var, s.c, "running var")?;
    let eps = E::from_f64(BN_EPS);
    let plane = s.h * s.w;
    let img_len = s.image_len();

    let mut y = Tensor::zeros(s);
    y.data_mut()
        .par_chunks_mut(img_len)
        .enumerate()
        .for_each(|(n, yimg)| {
            let src = x.image(n);
            for c in 0..s.c {
                let inv_std = E::one() / (running_var.data()[c] + eps).sqrt();
                let mean = running_mean.data()[c];
                let g = gamma.data()[c];
                let b = beta.data()[c];
                for i in c * plane..(c + 1) * plane {
                    yimg[i] = g * (src[i] - mean) * inv_std + b;
                }
            }
        });
    Ok(y)
}

/// Backward for eval-mode batch norm (running stats are constants).
pub fn bn_eval_bwd<E: Elem>(
    dy: &Tensor<E>,
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    running_mean: &Tensor<E>,
    running_var: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let s = dy.shape();
    let eps = E::from_f64(BN_EPS);
    let plane = s.h * s.w;
    let mut dx = Tensor::zeros(s);
    let mut dgamma = Tensor::zeros(Shape::new(1, s.c, 1, 1));
    let mut dbeta = Tensor::zeros(Shape::new(1, s.c, 1, 1));
    for c in 0..s.c {
        let inv_std = E::one() / (running_var.data()[c] + eps).sqrt();
        let mean = running_mean.data()[c];
        let g = gamma.data()[c];
        let mut sum_dy = E::zero();
        let mut sum_dy_xhat = E::zero();
        for n in 0..s.n {
            let base = n * s.image_len() + c * plane;
            for i in 0..plane {
                let gd = dy.data()[base + i];
                let xh = (x.data()[base + i] - mean) * inv_std;
                sum_dy = sum_dy + gd;
                sum_dy_xhat = sum_dy_xhat + gd * xh;
                dx.data_mut()[base + i] = gd * g * inv_std;
            }
        }
        dbeta.data_mut()[c] = sum_dy;
        dgamma.data_mut()[c] = sum_dy_xhat;
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// elementwise activations
// ---------------------------------------------------------------------------

pub fn relu_fwd<E: Elem>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| v.max(E::zero()))
}

pub fn relu_bwd<E: Elem>(dy: &Tensor<E>, x: &Tensor<E>) -> Tensor<E> {
    let mut dx = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        dx.data_mut()[i] = if x.data()[i] > E::zero() { dy.data()[i] } else { E::zero() };
    }
    dx
}

pub fn sigmoid_fwd<E: Elem>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| E::one() / (E::one() + (-v).exp()))
}

pub fn sigmoid_bwd<E: Elem>(dy: &Tensor<E>, y: &Tensor<E>) -> Tensor<E> {
    let mut dx = Tensor::zeros(y.shape());
    for i in 0..y.numel() {
        let s = y.data()[i];
        dx.data_mut()[i] = dy.data()[i] * s * (E::one() - s);
    }
    dx
}

pub fn add_fwd<E: Elem>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("add shape mismatch: {} vs {}", a.shape(), b.shape())));
    }
    let mut y = Tensor::zeros(a.shape());
    for i in 0..a.numel() {
        y.data_mut()[i] = a.data()[i] + b.data()[i];
    }
    Ok(y)
}

// ---------------------------------------------------------------------------
// bilinear resize (half-pixel centers, clamped)
// ---------------------------------------------------------------------------

struct Axis1d {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn bilinear_axis(src: usize, dst: usize) -> Axis1d {
    let scale = src as f64 / dst as f64;
    let mut lo = Vec::with_capacity(dst);
    let mut hi = Vec::with_capacity(dst);
    let mut frac = Vec::with_capacity(dst);
    for d in 0..dst {
        let center = (d as f64 + 0.5) * scale - 0.5;
        let clamped = center.max(0.0).min((src - 1) as f64);
        let f = clamped.floor();
        let l = f as usize;
        let h = (l + 1).min(src - 1);
        lo.push(l);
        hi.push(h);
        frac.push(clamped - f);
    }
    Axis1d { lo, hi, frac }
}

#[inline]
fn lerp<E: Elem>(a: E, b: E, t: E) -> E {
    a + t * (b - a)
}

/// Bilinear upsample to (oh, ow) with half-pixel centers. Output values are
/// clamped to the range spanned by the four source corners, which keeps
/// constant inputs exactly constant and bounds every output by the input
/// min/max even under rounding.
pub fn bilinear_fwd<E: Elem>(x: &Tensor<E>, oh: usize, ow: usize) -> Result<Tensor<E>> {
    let s = x.shape();
    if oh < s.h || ow < s.w || s.h == 0 || s.w == 0 {
        return Err(Error::shape(format!(
            "bilinear upsample target {}x{} smaller than source {}x{}",
            oh, ow, s.h, s.w
        )));
    }
    let ay = bilinear_axis(s.h, oh);
    let ax = bilinear_axis(s.w, ow);
    let mut y = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    let out_plane = oh * ow;
    let in_plane = s.h * s.w;

    y.data_mut()
        .par_chunks_mut(s.c * out_plane)
        .enumerate()
        .for_each(|(n, yimg)| {
            let src = x.image(n);
            for c in 0..s.c {
                let plane = &src[c * in_plane..(c + 1) * in_plane];
                let dst = &mut yimg[c * out_plane..(c + 1) * out_plane];
                for oy in 0..oh {
                    let (y0, y1, fy) = (ay.lo[oy], ay.hi[oy], E::from_f64(ay.frac[oy]));
                    for ox in 0..ow {
                        let (x0, x1, fx) = (ax.lo[ox], ax.hi[ox], E::from_f64(ax.frac[ox]));
                        let v00 = plane[y0 * s.w + x0];
                        let v01 = plane[y0 * s.w + x1];
                        let v10 = plane[y1 * s.w + x0];
                        let v11 = plane[y1 * s.w + x1];
                        let top = lerp(v00, v01, fx);
                        let bot = lerp(v10, v11, fx);
                        let v = lerp(top, bot, fy);
                        let lo = v00.min(v01).min(v10).min(v11);
                        let hi = v00.max(v01).max(v10).max(v11);
                        dst[oy * ow + ox] = v.max(lo).min(hi);
                    }
                }
            }
        });
    Ok(y)
}

pub fn bilinear_bwd<E: Elem>(dy: &Tensor<E>, x_shape: Shape) -> Tensor<E> {
    let ds = dy.shape();
    let ay = bilinear_axis(x_shape.h, ds.h);
    let ax = bilinear_axis(x_shape.w, ds.w);
    let mut dx = Tensor::zeros(x_shape);
    let in_plane = x_shape.h * x_shape.w;
    let out_plane = ds.h * ds.w;
    let img_len = x_shape.image_len();

    dx.data_mut()
        .par_chunks_mut(img_len)
        .enumerate()
        .for_each(|(n, dximg)| {
            let g = dy.image(n);
            for c in 0..x_shape.c {
                let gp = &g[c * out_plane..(c + 1) * out_plane];
                let dp = &mut dximg[c * in_plane..(c + 1) * in_plane];
                for oy in 0..ds.h {
                    let (y0, y1, fy) = (ay.lo[oy], ay.hi[oy], E::from_f64(ay.frac[oy]));
                    for ox in 0..ds.w {
                        let (x0, x1, fx) = (ax.lo[ox], ax.hi[ox], E::from_f64(ax.frac[ox]));
                        let gv = gp[oy * ds.w + ox];
                        let one = E::one();
                        dp[y0 * x_shape.w + x0] = dp[y0 * x_shape.w + x0] + gv * (one - fy) * (one - fx);
                        dp[y0 * x_shape.w + x1] = dp[y0 * x_shape.w + x1] + gv * (one - fy) * fx;
                        dp[y1 * x_shape.w + x0] = dp[y1 * x_shape.w + x0] + gv * fy * (one - fx);
                        dp[y1 * x_shape.w + x1] = dp[y1 * x_shape.w + x1] + gv * fy * fx;
                    }
                }
            }
        });
    dx
}

// ---------------------------------------------------------------------------
// pooling / linear head
// ---------------------------------------------------------------------------

pub fn global_avg_pool_fwd<E: Elem>(x: &Tensor<E>) -> Tensor<E> {
    let s = x.shape();
    let mut y = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    let plane = s.h * s.w;
    let inv = E::from_f64(1.0 / plane as f64);
    for n in 0..s.n {
        let img = x.image(n);
        for c in 0..s.c {
            let mut acc = E::zero();
            for &v in &img[c * plane..(c + 1) * plane] {
                acc = acc + v;
            }
            y.data_mut()[n * s.c + c] = acc * inv;
        }
    }
    y
}

pub fn global_avg_pool_bwd<E: Elem>(dy: &Tensor<E>, x_shape: Shape) -> Tensor<E> {
    let plane = x_shape.h * x_shape.w;
    let inv = E::from_f64(1.0 / plane as f64);
    let mut dx = Tensor::zeros(x_shape);
    for n in 0..x_shape.n {
        for c in 0..x_shape.c {
            let g = dy.data()[n * x_shape.c + c] * inv;
            let base = n * x_shape.image_len() + c * plane;
            for i in 0..plane {
                dx.data_mut()[base + i] = g;
            }
        }
    }
    dx
}

/// Fully-connected layer on (n, cin, 1, 1) inputs, weights (cout, cin, 1, 1).
pub fn linear_fwd<E: Elem>(x: &Tensor<E>, w: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.h != 1 || xs.w != 1 {
        return Err(Error::shape(format!("linear input must be Nx{}x1x1, got {}", ws.c, xs)));
    }
    if ws.c != xs.c {
        return Err(Error::shape(format!("linear in-features {} vs input {}", ws.c, xs.c)));
    }
    check_bn_param(b, ws.n, "bias")?;
    let mut y = Tensor::zeros(Shape::new(xs.n, ws.n, 1, 1));
    for n in 0..xs.n {
        let xin = x.image(n);
        for o in 0..ws.n {
            let wr = &w.data()[o * ws.c..(o + 1) * ws.c];
            let mut acc = b.data()[o];
            for i in 0..ws.c {
                acc = acc + wr[i] * xin[i];
            }
            y.data_mut()[n * ws.n + o] = acc;
        }
    }
    Ok(y)
}

pub fn linear_bwd<E: Elem>(
    dy: &Tensor<E>,
    x: &Tensor<E>,
    w: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let xs = x.shape();
    let ws = w.shape();
    let mut dx = Tensor::zeros(xs);
    let mut dw = Tensor::zeros(ws);
    let mut db = Tensor::zeros(Shape::new(1, ws.n, 1, 1));
    for n in 0..xs.n {
        for o in 0..ws.n {
            let g = dy.data()[n * ws.n + o];
            db.data_mut()[o] = db.data_mut()[o] + g;
            for i in 0..ws.c {
                dx.data_mut()[n * xs.c + i] = dx.data_mut()[n * xs.c + i] + g * w.data()[o * ws.c + i];
                dw.data_mut()[o * ws.c + i] = dw.data_mut()[o * ws.c + i] + g * x.data()[n * xs.c + i];
            }
        }
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// channel normalization (per-position l2)
// ---------------------------------------------------------------------------

/// Positions whose channel vector has l2 norm below this map to the zero
/// vector instead of dividing by (near) zero; ReLU features can be exactly
/// zero at a position.
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Normalize each spatial position's channel vector to unit l2 norm.
/// Returns the output and the per-position norms (indexed n*h*w + y*w + x).
pub fn normalize_channels_fwd<E: Elem>(x: &Tensor<E>) -> (Tensor<E>, Vec<E>) {
    let s = x.shape();
    let plane = s.h * s.w;
    let eps = E::from_f64(NORMALIZE_EPS);
    let mut y = Tensor::zeros(s);
    let mut norms = vec![E::zero(); s.n * plane];
    for n in 0..s.n {
        let src = x.image(n);
        let base = n * s.image_len();
        for p in 0..plane {
            let mut acc = E::zero();
            for c in 0..s.c {
                let v = src[c * plane + p];
                acc = acc + v * v;
            }
            let norm = acc.sqrt();
            norms[n * plane + p] = norm;
            if norm >= eps {
                let inv = E::one() / norm;
                for c in 0..s.c {
                    y.data_mut()[base + c * plane + p] = src[c * plane + p] * inv;
                }
            }
        }
    }
    (y, norms)
}

/// Backward of per-position normalization: dx = (g - y <g, y>) / norm.
pub fn normalize_channels_bwd<E: Elem>(dy: &Tensor<E>, y: &Tensor<E>, norms: &[E]) -> Tensor<E> {
    let s = y.shape();
    let plane = s.h * s.w;
    let eps = E::from_f64(NORMALIZE_EPS);
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        let base = n * s.image_len();
        for p in 0..plane {
            let norm = norms[n * plane + p];
            if norm < eps {
                continue;
            }
            let mut dot = E::zero();
            for c in 0..s.c {
                dot = dot + dy.data()[base + c * plane + p] * y.data()[base + c * plane + p];
            }
            let inv = E::one() / norm;
            for c in 0..s.c {
                let i = base + c * plane + p;
                dx.data_mut()[i] = (dy.data()[i] - y.data()[i] * dot) * inv;
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// attention modulation (broadcast multiply)
// ---------------------------------------------------------------------------

/// y[n,c,i,j] = x[n,c,i,j] * a[n,0,i,j]
pub fn mul_broadcast_fwd<E: Elem>(x: &Tensor<E>, a: &Tensor<E>) -> Result<Tensor<E>> {
    let xs = x.shape();
    let as_ = a.shape();
    if as_.c != 1 || as_.n != xs.n || as_.h != xs.h || as_.w != xs.w {
        return Err(Error::shape(format!(
            "attention map {} does not broadcast over features {}",
            as_, xs
        )));
    }
    let plane = xs.h * xs.w;
    let mut y = Tensor::zeros(xs);
    for n in 0..xs.n {
        let src = x.image(n);
        let amap = a.image(n);
        let dst = &mut y.data_mut()[n * xs.image_len()..(n + 1) * xs.image_len()];
        for c in 0..xs.c {
            for p in 0..plane {
                dst[c * plane + p] = src[c * plane + p] * amap[p];
            }
        }
    }
    Ok(y)
}

pub fn mul_broadcast_bwd<E: Elem>(
    dy: &Tensor<E>,
    x: &Tensor<E>,
    a: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>) {
    let xs = x.shape();
    let plane = xs.h * xs.w;
    let mut dx = Tensor::zeros(xs);
    let mut da = Tensor::zeros(a.shape());
    for n in 0..xs.n {
        let amap = a.image(n);
        let ximg = x.image(n);
        let gimg = dy.image(n);
        let da_img = &mut da.data_mut()[n * plane..(n + 1) * plane];
        let dx_img = &mut dx.data_mut()[n * xs.image_len()..(n + 1) * xs.image_len()];
        for c in 0..xs.c {
            for p in 0..plane {
                let g = gimg[c * plane + p];
                dx_img[c * plane + p] = g * amap[p];
                da_img[p] = da_img[p] + g * ximg[c * plane + p];
            }
        }
    }
    (dx, da)
}

// ---------------------------------------------------------------------------
// distillation loss
// ---------------------------------------------------------------------------

/// Mean over batch and positions of 0.5*||t - s||^2 along channels:
///   L = (1 / (N*H*W)) * sum_{n,i,j} 0.5 * ||t[n,:,i,j] - s[n,:,i,j]||^2
pub fn sq_diff_half_mean_fwd<E: Elem>(t: &Tensor<E>, s: &Tensor<E>) -> Result<E> {
    if t.shape() != s.shape() {
        return Err(Error::shape(format!(
            "loss operands differ in shape: {} vs {}",
            t.shape(),
            s.shape()
        )));
    }
    let sh = t.shape();
    let scale = E::from_f64(0.5 / (sh.n * sh.h * sh.w) as f64);
    let mut acc = E::zero();
    for i in 0..t.numel() {
        let d = t.data()[i] - s.data()[i];
        acc = acc + d * d;
    }
    Ok(acc * scale)
}

/// d L / d s = (s - t) / (N*H*W), scaled by the incoming gradient.
pub fn sq_diff_half_mean_bwd<E: Elem>(g: E, t: &Tensor<E>, s: &Tensor<E>) -> Tensor<E> {
    let sh = t.shape();
    let scale = g * E::from_f64(1.0 / (sh.n * sh.h * sh.w) as f64);
    let mut ds = Tensor::zeros(sh);
    for i in 0..t.numel() {
        ds.data_mut()[i] = (s.data()[i] - t.data()[i]) * scale;
    }
    ds
}

// ---------------------------------------------------------------------------
// softmax cross-entropy (pretext head)
// ---------------------------------------------------------------------------

/// Mean cross-entropy over the batch; logits are (n, k, 1, 1).
/// Returns (loss, softmax probabilities).
pub fn softmax_ce_fwd<E: Elem>(logits: &Tensor<E>, labels: &[usize]) -> Result<(E, Tensor<E>)> {
    let s = logits.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::shape(format!("logits must be NxKx1x1, got {s}")));
    }
    if labels.len() != s.n {
        return Err(Error::shape(format!("{} labels for batch of {}", labels.len(), s.n)));
    }
    let k = s.c;
    let mut probs = Tensor::zeros(s);
    let mut loss = E::zero();
    for n in 0..s.n {
        if labels[n] >= k {
            return Err(Error::Input(format!("label {} out of range (k={k})", labels[n])));
        }
        let row = &logits.data()[n * k..(n + 1) * k];
        let maxv = row.iter().copied().fold(E::neg_infinity(), E::max);
        let mut z = E::zero();
        for i in 0..k {
            z = z + (row[i] - maxv).exp();
        }
        let logz = z.ln() + maxv;
        for i in 0..k {
            probs.data_mut()[n * k + i] = (row[i] - logz).exp();
        }
        loss = loss - (row[labels[n]] - logz);
    }
    Ok((loss / E::from_f64(s.n as f64), probs))
}

pub fn softmax_ce_bwd<E: Elem>(g: E, probs: &Tensor<E>, labels: &[usize]) -> Tensor<E> {
    let s = probs.shape();
    let k = s.c;
    let scale = g / E::from_f64(s.n as f64);
    let mut dl = probs.clone();
    for n in 0..s.n {
        let i = n * k + labels[n];
        dl.data_mut()[i] = dl.data_mut()[i] - E::one();
    }
    for v in dl.data_mut() {
        *v = *v * scale;
    }
    dl
}
