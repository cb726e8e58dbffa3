//! Plain-loop numeric kernels.
//!
//! Every reduction runs in a fixed order with no fused multiply-add and no
//! runtime SIMD dispatch, so forward passes are bit-identical across
//! platforms. That matters: quantized latents feed the bit-exact coder.

use super::{Real, Tensor};
use crate::error::{shape_err, Result};

/// Geometry of a 2-d convolution mapping `(h, w)` to `(out_h, out_w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn forward(channels: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(shape_err!("stride must be positive"));
        }
        if k == 0 || k > h + 2 * pad || k > w + 2 * pad {
            return Err(shape_err!(
                "kernel {} does not fit input {}x{} with padding {}",
                k,
                h,
                w,
                pad
            ));
        }
        Ok(Self {
            channels,
            h,
            w,
            k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output extent of a transposed convolution.
pub fn conv_transpose_extent(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let full = (n.saturating_sub(1)) * stride + k;
    if n == 0 || full <= 2 * pad {
        return Err(shape_err!(
            "transposed conv with input {}, kernel {}, stride {}, padding {} has empty output",
            n,
            k,
            stride,
            pad
        ));
    }
    Ok(full - 2 * pad)
}

pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters (accumulates) columns back into `x`.
pub fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let p = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[m×n] += aᵀ · b` with `a` stored as `[k×m]`.
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[kk * m + i];
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[m×n] += a · bᵀ` with `a` `[m×k]` and `b` `[n×k]`.
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with eight interleaved accumulators, combined in a fixed order.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (ca, cb) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn check_bias<T: Real>(bias: &Tensor<T>, cout: usize) -> Result<()> {
    if bias.shape() != [cout] {
        return Err(shape_err!(
            "bias shape {:?} does not match {} output channels",
            bias.shape(),
            cout
        ));
    }
    Ok(())
}

/// Validates conv2d operands and returns the geometry.
pub fn conv2d_geom<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let [_, cin, h, wd] = x.dims4()?;
    let [cout, wcin, k, k2] = w.dims4()?;
    if k != k2 {
        return Err(shape_err!("non-square kernel {:?}", w.shape()));
    }
    if wcin != cin {
        return Err(shape_err!(
            "conv2d: input has {} channels but weight {:?} expects {}",
            cin,
            w.shape(),
            wcin
        ));
    }
    check_bias(b, cout)?;
    ConvGeom::forward(cin, h, wd, k, stride, pad)
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv2d_geom(x, w, b, stride, pad)?;
    let n = x.shape()[0];
    let cout = w.shape()[0];
    let (rows, p) = (g.col_rows(), g.col_cols());
    let mut out = vec![T::zero(); n * cout * p];
    let mut cols = vec![T::zero(); rows * p];
    let in_sz = g.channels * g.h * g.w;
    for i in 0..n {
        im2col(&x.data()[i * in_sz..(i + 1) * in_sz], &g, &mut cols);
        let o = &mut out[i * cout * p..(i + 1) * cout * p];
        for (co, &bv) in b.data().iter().enumerate() {
            o[co * p..(co + 1) * p].fill(bv);
        }
        gemm_nn(w.data(), &cols, o, cout, rows, p);
    }
    Tensor::new(&[n, cout, g.out_h, g.out_w], out)
}

/// `(dx, dw, db)`, each present only if requested.
pub type ConvGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>);

/// Gradients of conv2d. Returns `(dx, dw, db)`; each is only computed if asked.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    dout: &Tensor<T>,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let [n, cin, h, wd] = x.dims4()?;
    let [cout, _, k, _] = w.dims4()?;
    let g = ConvGeom::forward(cin, h, wd, k, stride, pad)?;
    let (rows, p) = (g.col_rows(), g.col_cols());
    let in_sz = cin * h * wd;
    let mut dx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut dw = need[1].then(|| vec![T::zero(); w.len()]);
    let mut db = need[2].then(|| vec![T::zero(); cout]);
    let mut cols = vec![T::zero(); rows * p];
    for i in 0..n {
        let go = &dout.data()[i * cout * p..(i + 1) * cout * p];
        if let Some(db) = db.as_mut() {
            for co in 0..cout {
                db[co] += go[co * p..(co + 1) * p].iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(&x.data()[i * in_sz..(i + 1) * in_sz], &g, &mut cols);
            gemm_nt(go, &cols, dw, cout, p, rows);
        }
        if let Some(dx) = dx.as_mut() {
            cols.fill(T::zero());
            gemm_tn(w.data(), go, &mut cols, rows, cout, p);
            col2im(&cols, &g, &mut dx[i * in_sz..(i + 1) * in_sz]);
        }
    }
    Ok((
        dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        dw.map(|d| Tensor::new(w.shape(), d)).transpose()?,
        db.map(|d| Tensor::new(&[cout], d)).transpose()?,
    ))
}

/// Validates transposed-conv operands. The returned geometry describes the
/// *forward* convolution that maps the output back onto the input grid.
pub fn conv_transpose2d_geom<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let [_, cin, h, wd] = x.dims4()?;
    let [wcin, cout, k, k2] = w.dims4()?;
    if k != k2 {
        return Err(shape_err!("non-square kernel {:?}", w.shape()));
    }
    if wcin != cin {
        return Err(shape_err!(
            "conv_transpose2d: input has {} channels but weight {:?} expects {}",
            cin,
            w.shape(),
            wcin
        ));
    }
    check_bias(b, cout)?;
    if stride == 0 {
        return Err(shape_err!("stride must be positive"));
    }
    let oh = conv_transpose_extent(h, k, stride, pad)?;
    let ow = conv_transpose_extent(wd, k, stride, pad)?;
    let g = ConvGeom::forward(cout, oh, ow, k, stride, pad)?;
    debug_assert_eq!((g.out_h, g.out_w), (h, wd));
    Ok(g)
}

pub fn conv_transpose2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_transpose2d_geom(x, w, b, stride, pad)?;
    let [n, cin, h, wd] = x.dims4()?;
    let cout = g.channels;
    let (rows, p) = (g.col_rows(), g.col_cols());
    let out_sz = cout * g.h * g.w;
    let mut out = vec![T::zero(); n * out_sz];
    let mut cols = vec![T::zero(); rows * p];
    for i in 0..n {
        cols.fill(T::zero());
        let xi = &x.data()[i * cin * h * wd..(i + 1) * cin * h * wd];
        gemm_tn(w.data(), xi, &mut cols, rows, cin, p);
        let o = &mut out[i * out_sz..(i + 1) * out_sz];
        col2im(&cols, &g, o);
        for (co, &bv) in b.data().iter().enumerate() {
            for v in &mut o[co * g.h * g.w..(co + 1) * g.h * g.w] {
                *v += bv;
            }
        }
    }
    Tensor::new(&[n, cout, g.h, g.w], out)
}

pub fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    dout: &Tensor<T>,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let [n, cin, h, wd] = x.dims4()?;
    let [_, cout, k, _] = w.dims4()?;
    let [_, _, oh, ow] = dout.dims4()?;
    let g = ConvGeom::forward(cout, oh, ow, k, stride, pad)?;
    let (rows, p) = (g.col_rows(), g.col_cols());
    debug_assert_eq!(p, h * wd);
    let in_sz = cin * h * wd;
    let out_sz = cout * oh * ow;
    let mut dx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut dw = need[1].then(|| vec![T::zero(); w.len()]);
    let mut db = need[2].then(|| vec![T::zero(); cout]);
    let mut cols = vec![T::zero(); rows * p];
    for i in 0..n {
        let go = &dout.data()[i * out_sz..(i + 1) * out_sz];
        if let Some(db) = db.as_mut() {
            for co in 0..cout {
                db[co] += go[co * oh * ow..(co + 1) * oh * ow].iter().copied().sum::<T>();
            }
        }
        if dx.is_none() && dw.is_none() {
            continue;
        }
        im2col(go, &g, &mut cols);
        if let Some(dx) = dx.as_mut() {
            gemm_nn(w.data(), &cols, &mut dx[i * in_sz..(i + 1) * in_sz], cin, rows, p);
        }
        if let Some(dw) = dw.as_mut() {
            gemm_nt(&x.data()[i * in_sz..(i + 1) * in_sz], &cols, dw, cin, p, rows);
        }
    }
    Ok((
        dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        dw.map(|d| Tensor::new(w.shape(), d)).transpose()?,
        db.map(|d| Tensor::new(&[cout], d)).transpose()?,
    ))
}

#[inline]
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).portable_exp())
    } else {
        let e = z.portable_exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus<T: Real>(z: T) -> T {
    if z > T::zero() {
        z + (-z).portable_exp().portable_ln_1p()
    } else {
        z.portable_exp().portable_ln_1p()
    }
}
