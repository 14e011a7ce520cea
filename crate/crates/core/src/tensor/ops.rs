//! Forward kernels and their adjoints.
//!
//! All spatial tensors are `[C, H, W]` (batch size one). Functions here are
//! pure; the tape in [`super::Tape`] wires the adjoints together.

use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

/// GroupNorm epsilon.
pub const GN_EPS: f64 = 1e-5;

fn out_extent(size: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if size + 2 * padding < k {
        return Err(shape_err!(
            "kernel {k} larger than padded input {size}+2*{padding}"
        ));
    }
    Ok((size + 2 * padding - k) / stride + 1)
}

fn check_conv(
    input: &Tensor<impl Scalar>,
    weight: &Tensor<impl Scalar>,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (cin, h, w) = input.chw()?;
    let [cout, wcin, kh, kw] = weight.shape()[..] else {
        return Err(shape_err!(
            "conv weight must be [C_out,C_in,kh,kw], got {:?}",
            weight.shape()
        ));
    };
    if wcin != cin {
        return Err(shape_err!(
            "conv input has {cin} channels but weight {:?} expects {wcin}",
            weight.shape()
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(shape_err!("conv kernel must be odd, got {kh}x{kw}"));
    }
    if stride == 0 {
        return Err(shape_err!("conv stride must be >= 1"));
    }
    Ok((cin, h, w, cout, kh, kw))
}

/// Unfolds `[C, H, W]` into `[C*kh*kw, Ho*Wo]` patch columns.
fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let p = ho * wo;
    let mut cols = vec![T::zero(); c * kh * kw * p];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let p = ho * wo;
    let mut x = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (cin, h, w, cout, kh, kw) = check_conv(input, weight, stride)?;
    if bias.len() != cout {
        return Err(shape_err!(
            "conv bias has {} values for {cout} output channels",
            bias.len()
        ));
    }
    let ho = out_extent(h, kh, stride, padding)?;
    let wo = out_extent(w, kw, stride, padding)?;
    let p = ho * wo;
    let k = cin * kh * kw;
    let mut out = Vec::with_capacity(cout * p);
    for &b in bias.data() {
        out.extend(std::iter::repeat_n(b, p));
    }
    if kh == 1 && kw == 1 && stride == 1 && padding == 0 {
        T::gemm(
            cout,
            k,
            p,
            T::one(),
            weight.data(),
            k as isize,
            1,
            input.data(),
            p as isize,
            1,
            T::one(),
            &mut out,
            p as isize,
            1,
        );
    } else {
        let cols = im2col(
            input.data(),
            (cin, h, w),
            (kh, kw),
            stride,
            padding,
            (ho, wo),
        );
        T::gemm(
            cout,
            k,
            p,
            T::one(),
            weight.data(),
            k as isize,
            1,
            &cols,
            p as isize,
            1,
            T::one(),
            &mut out,
            p as isize,
            1,
        );
    }
    Tensor::new(&[cout, ho, wo], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias. The input
/// gradient is skipped unless `input_grad` is set.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    input_grad: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (cin, h, w, cout, kh, kw) = check_conv(input, weight, stride)?;
    let (gc, ho, wo) = grad_out.chw()?;
    if gc != cout {
        return Err(shape_err!("conv grad has {gc} channels, expected {cout}"));
    }
    let p = ho * wo;
    let k = cin * kh * kw;
    let pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;
    let cols_owned;
    let cols: &[T] = if pointwise {
        input.data()
    } else {
        cols_owned = im2col(
            input.data(),
            (cin, h, w),
            (kh, kw),
            stride,
            padding,
            (ho, wo),
        );
        &cols_owned
    };
    let g = grad_out.data();

    // dW[cout, k] = dOut[cout, p] . cols[k, p]^T
    let mut dw = vec![T::zero(); cout * k];
    T::gemm(
        cout,
        p,
        k,
        T::one(),
        g,
        p as isize,
        1,
        cols,
        1,
        p as isize,
        T::zero(),
        &mut dw,
        k as isize,
        1,
    );
    let db: Vec<T> = (0..cout)
        .map(|o| g[o * p..(o + 1) * p].iter().copied().sum())
        .collect();

    let dw = Tensor::new(weight.shape(), dw)?;
    let db = Tensor::new(&[cout], db)?;
    if !input_grad {
        return Ok((None, dw, db));
    }

    // dcols[k, p] = W[cout, k]^T . dOut[cout, p]
    let mut dcols = vec![T::zero(); k * p];
    T::gemm(
        k,
        cout,
        p,
        T::one(),
        weight.data(),
        1,
        k as isize,
        g,
        p as isize,
        1,
        T::zero(),
        &mut dcols,
        p as isize,
        1,
    );
    let dx = if pointwise {
        dcols
    } else {
        col2im(&dcols, (cin, h, w), (kh, kw), stride, padding, (ho, wo))
    };
    Ok((Some(Tensor::new(&[cin, h, w], dx)?), dw, db))
}

/// Stride-1 max pooling with `(k-1)/2` padding; padded cells never win.
pub fn max_pool2d<T: Scalar>(input: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    if k % 2 == 0 {
        return Err(shape_err!("max_pool2d window must be odd, got {k}"));
    }
    let (c, h, w) = input.chw()?;
    let r = (k / 2) as isize;
    let mut out = Vec::with_capacity(input.len());
    for ci in 0..c {
        let plane = input.channel(ci);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut m = T::neg_infinity();
                for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                    for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                        let v = plane[yy as usize * w + xx as usize];
                        if v > m {
                            m = v;
                        }
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Per-axis sampling table for align-corners-false bilinear interpolation:
/// `(lo, hi, frac)` per output index.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

/// Bilinear resize with the align-corners-false convention: output pixel
/// centres map to `(o + 0.5) * in/out - 0.5` in input coordinates, clamped
/// to the border.
pub fn bilinear_resize<T: Scalar>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let (c, h, w) = input.chw()?;
    if out_h == 0 || out_w == 0 {
        return Err(shape_err!("resize target must be non-empty"));
    }
    if out_h == h && out_w == w {
        return Ok(input.clone());
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ci in 0..c {
        let p = input.channel(ci);
        for &(y0, y1, fy) in &ty {
            let fy = T::of(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::of(fx);
                let top = p[y0 * w + x0] * (T::one() - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (T::one() - fx) + p[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Adjoint of [`bilinear_resize`].
pub fn bilinear_resize_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<T>> {
    let (c, oh, ow) = grad_out.chw()?;
    if oh == in_h && ow == in_w {
        return Ok(grad_out.clone());
    }
    let ty = bilinear_taps(in_h, oh);
    let tx = bilinear_taps(in_w, ow);
    let mut dx = vec![T::zero(); c * in_h * in_w];
    for ci in 0..c {
        let g = grad_out.channel(ci);
        let d = &mut dx[ci * in_h * in_w..(ci + 1) * in_h * in_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let v = g[oy * ow + ox];
                let top = v * (T::one() - fy);
                let bot = v * fy;
                d[y0 * in_w + x0] += top * (T::one() - fx);
                d[y0 * in_w + x1] += top * fx;
                d[y1 * in_w + x0] += bot * (T::one() - fx);
                d[y1 * in_w + x1] += bot * fx;
            }
        }
    }
    Tensor::new(&[c, in_h, in_w], dx)
}

/// Normalized activations and inverse standard deviations kept for the
/// backward pass of [`group_norm`].
#[derive(Clone, Debug)]
pub struct GroupNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn group_norm<T: Scalar>(
    input: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, GroupNormCache<T>)> {
    let (c, h, w) = input.chw()?;
    if groups == 0 || c % groups != 0 {
        return Err(shape_err!(
            "group_norm: {c} channels not divisible into {groups} groups"
        ));
    }
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err!("group_norm: affine params must have {c} values"));
    }
    let per = c / groups * h * w;
    let plane = h * w;
    let n = T::of(per as f64);
    let x = input.data();
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let s = &x[g * per..(g + 1) * per];
        let mean = s.iter().copied().sum::<T>() / n;
        let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        for (o, &v) in xhat[g * per..(g + 1) * per].iter_mut().zip(s) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    let mut out = xhat.clone();
    for ci in 0..c {
        let (ga, be) = (gamma.data()[ci], beta.data()[ci]);
        for v in &mut out[ci * plane..(ci + 1) * plane] {
            *v = *v * ga + be;
        }
    }
    Ok((Tensor::new(&[c, h, w], out)?, GroupNormCache { xhat, inv_std }))
}

/// Gradients of [`group_norm`] for input, gamma and beta.
pub fn group_norm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &GroupNormCache<T>,
    gamma: &Tensor<T>,
    groups: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (c, h, w) = grad_out.chw()?;
    let plane = h * w;
    let per = c / groups * plane;
    let g = grad_out.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dxhat = vec![T::zero(); g.len()];
    for ci in 0..c {
        let ga = gamma.data()[ci];
        for i in ci * plane..(ci + 1) * plane {
            dgamma[ci] += g[i] * cache.xhat[i];
            dbeta[ci] += g[i];
            dxhat[i] = g[i] * ga;
        }
    }
    let n = T::of(per as f64);
    let mut dx = vec![T::zero(); g.len()];
    for gi in 0..groups {
        let r = gi * per..(gi + 1) * per;
        let mean_d = dxhat[r.clone()].iter().copied().sum::<T>() / n;
        let mean_dx = dxhat[r.clone()]
            .iter()
            .zip(&cache.xhat[r.clone()])
            .map(|(&a, &b)| a * b)
            .sum::<T>()
            / n;
        let is = cache.inv_std[gi];
        for i in r {
            dx[i] = is * (dxhat[i] - mean_d - cache.xhat[i] * mean_dx);
        }
    }
    Ok((
        Tensor::new(&[c, h, w], dx)?,
        Tensor::new(&[c], dgamma)?,
        Tensor::new(&[c], dbeta)?,
    ))
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Normalized coordinate for index `i` of `n`: `2i/(n-1) - 1`, and `-1` when `n == 1`.
pub fn norm_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        -1.0
    } else {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    }
}

/// Two channels `[x, y]` of normalized coordinates over an `h x w` grid.
pub fn coord_channels<T: Scalar>(h: usize, w: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(2 * h * w);
    for _y in 0..h {
        for x in 0..w {
            data.push(T::of(norm_coord(x, w)));
        }
    }
    for y in 0..h {
        let v = T::of(norm_coord(y, h));
        data.extend(std::iter::repeat_n(v, w));
    }
    Tensor::new(&[2, h, w], data).expect("coord shape")
}

/// Concatenates `[Ca,H,W]` and `[Cb,H,W]` along channels.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ca, ha, wa) = a.chw()?;
    let (cb, hb, wb) = b.chw()?;
    if (ha, wa) != (hb, wb) {
        return Err(shape_err!(
            "concat spatial mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(&[ca + cb, ha, wa], data)
}

/// `[n, C] x [C, H, W] -> [n, H, W]`: every row is a 1x1 kernel.
pub fn dynamic_conv1x1<T: Scalar>(kernels: &Tensor<T>, features: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ck] = kernels.shape()[..] else {
        return Err(shape_err!("kernels must be [n, C], got {:?}", kernels.shape()));
    };
    let (c, h, w) = features.chw()?;
    if ck != c {
        return Err(shape_err!(
            "kernel length {ck} does not match feature channels {c}"
        ));
    }
    let p = h * w;
    let mut out = vec![T::zero(); n * p];
    T::gemm(
        n,
        c,
        p,
        T::one(),
        kernels.data(),
        c as isize,
        1,
        features.data(),
        p as isize,
        1,
        T::zero(),
        &mut out,
        p as isize,
        1,
    );
    Tensor::new(&[n, h, w], out)
}
