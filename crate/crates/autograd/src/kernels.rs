//! Dense numeric kernels behind the convolution and resampling ops.
//!
//! Convolutions are stride-1 with "same" zero padding (`pad = k / 2`, `k` odd)
//! and go through im2col plus a GEMM.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// C = alpha * op(A) * op(B) + beta * C for row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: buffer lengths are checked above and the strides describe
    // exactly the m×k, k×n and m×n row-major (or transposed) layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(Error::InvalidShape(format!("{what} must be rank 4, got {:?}", t.shape()))),
    }
}

/// Checks a convolution weight and returns (c_out, c_in, k).
pub(crate) fn kernel_dims(w: &Tensor) -> Result<(usize, usize, usize)> {
    let (co, ci, kh, kw) = dims4(w, "convolution weight")?;
    if kh != kw || kh % 2 == 0 {
        return Err(Error::InvalidShape(format!(
            "convolution kernel must be square with odd size, got {kh}x{kw}"
        )));
    }
    Ok((co, ci, kh))
}

fn im2col(x: &[f64], ci: usize, h: usize, w: usize, k: usize, col: &mut [f64]) {
    let pad = k / 2;
    let hw = h * w;
    for c in 0..ci {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((c * k + ky) * k + kx) * hw..][..hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    let dst = &mut row[oy * w..(oy + 1) * w];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = ox as isize + shift;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], ci: usize, h: usize, w: usize, k: usize, x: &mut [f64]) {
    let pad = k / 2;
    let hw = h * w;
    for c in 0..ci {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((c * k + ky) * k + kx) * hw..][..hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let shift = kx as isize - pad as isize;
                    for ox in 0..w {
                        let ix = ox as isize + shift;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d(x: &Tensor, wt: &Tensor) -> Result<Tensor> {
    let (n, ci, h, w) = dims4(x, "convolution input")?;
    let (co, wci, k) = kernel_dims(wt)?;
    if wci != ci {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: wt.shape().to_vec(),
        });
    }
    let hw = h * w;
    let kk = ci * k * k;
    let mut out = vec![0.0; n * co * hw];
    let mut col = if k == 1 { Vec::new() } else { vec![0.0; kk * hw] };
    for b in 0..n {
        let xs = &x.data()[b * ci * hw..(b + 1) * ci * hw];
        let cols = if k == 1 {
            xs
        } else {
            im2col(xs, ci, h, w, k, &mut col);
            &col
        };
        gemm(co, kk, hw, wt.data(), false, cols, false, &mut out[b * co * hw..(b + 1) * co * hw], 0.0);
    }
    Tensor::new(&[n, co, h, w], out)
}

/// Gradient of `<g, conv2d(x, w)>` with respect to `x`.
pub(crate) fn conv2d_input_grad(g: &Tensor, wt: &Tensor) -> Result<Tensor> {
    let (n, co, h, w) = dims4(g, "convolution output gradient")?;
    let (wco, ci, k) = kernel_dims(wt)?;
    if wco != co {
        return Err(Error::ShapeMismatch {
            op: "conv2d_input_grad",
            lhs: g.shape().to_vec(),
            rhs: wt.shape().to_vec(),
        });
    }
    let hw = h * w;
    let kk = ci * k * k;
    let mut out = vec![0.0; n * ci * hw];
    let mut col = vec![0.0; kk * hw];
    for b in 0..n {
        let gs = &g.data()[b * co * hw..(b + 1) * co * hw];
        let dst = &mut out[b * ci * hw..(b + 1) * ci * hw];
        if k == 1 {
            gemm(ci, co, hw, wt.data(), true, gs, false, dst, 0.0);
        } else {
            gemm(kk, co, hw, wt.data(), true, gs, false, &mut col, 0.0);
            col2im(&col, ci, h, w, k, dst);
        }
    }
    Tensor::new(&[n, ci, h, w], out)
}

/// Gradient of `<g, conv2d(x, w)>` with respect to `w` for a `k`×`k` kernel.
pub(crate) fn conv2d_weight_grad(x: &Tensor, g: &Tensor, k: usize) -> Result<Tensor> {
    let (n, ci, h, w) = dims4(x, "convolution input")?;
    let (gn, co, gh, gw) = dims4(g, "convolution output gradient")?;
    if gn != n || gh != h || gw != w {
        return Err(Error::ShapeMismatch {
            op: "conv2d_weight_grad",
            lhs: x.shape().to_vec(),
            rhs: g.shape().to_vec(),
        });
    }
    let hw = h * w;
    let kk = ci * k * k;
    let mut out = vec![0.0; co * kk];
    let mut col = if k == 1 { Vec::new() } else { vec![0.0; kk * hw] };
    for b in 0..n {
        let xs = &x.data()[b * ci * hw..(b + 1) * ci * hw];
        let cols = if k == 1 {
            xs
        } else {
            im2col(xs, ci, h, w, k, &mut col);
            &col
        };
        let gs = &g.data()[b * co * hw..(b + 1) * co * hw];
        gemm(co, hw, kk, gs, false, cols, true, &mut out, if b == 0 { 0.0 } else { 1.0 });
    }
    Tensor::new(&[co, ci, k, k], out)
}

pub(crate) fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = dims4(x, "pooling input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape(format!("2x2 pooling needs even dims, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    let src = x.data();
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                dst[y * ow + xx] = 0.25 * (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]);
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub(crate) fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = dims4(x, "upsampling input")?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * oh * ow];
    let src = x.data();
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = plane[(y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}
