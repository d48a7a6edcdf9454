//! Forward and backward kernels for the small convolutional denoiser.
//!
//! Activations are single-sample `C x H x W` buffers. Every backward
//! function accumulates parameter gradients into the caller's slices.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Scalar type of the network. Implemented for `f32` (training and
/// inference) and `f64` (gradient checking).
pub trait Real:
    Float + Default + Debug + Send + Sync + AddAssign + SubAssign + MulAssign + Sum + 'static
{
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `C = alpha * A * B + beta * C` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: (&mut [Self], isize, isize),
    );
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows as isize - 1) as usize * rs as usize + (cols as isize - 1) as usize * cs as usize + 1
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            #[inline]
            fn lit(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: (&[Self], isize, isize),
                b: (&[Self], isize, isize),
                beta: Self,
                c: (&mut [Self], isize, isize),
            ) {
                assert!(a.1 >= 0 && a.2 >= 0 && b.1 >= 0 && b.2 >= 0 && c.1 >= 0 && c.2 >= 0);
                assert!(span(m, k, a.1, a.2) <= a.0.len(), "gemm: A out of bounds");
                assert!(span(k, n, b.1, b.2) <= b.0.len(), "gemm: B out of bounds");
                assert!(span(m, n, c.1, c.2) <= c.0.len(), "gemm: C out of bounds");
                // SAFETY: the extents of all three operands were checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.0.as_ptr(),
                        a.1,
                        a.2,
                        b.0.as_ptr(),
                        b.1,
                        b.2,
                        beta,
                        c.0.as_mut_ptr(),
                        c.1,
                        c.2,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// 3x3, stride 1, zero padding 1. Returns the output and the im2col matrix
/// (`cin*9 x h*w`) needed by the backward pass.
pub fn conv3x3_forward<R: Real>(
    x: &[R],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[R],
    bias: &[R],
    cout: usize,
) -> (Vec<R>, Vec<R>) {
    let hw = h * w;
    let cols = im2col(x, cin, h, w);
    let mut out = vec![R::zero(); cout * hw];
    for (co, row) in out.chunks_exact_mut(hw).enumerate() {
        row.fill(bias[co]);
    }
    let k = cin * 9;
    R::gemm(
        cout,
        k,
        hw,
        R::one(),
        (weight, k as isize, 1),
        (&cols, hw as isize, 1),
        R::one(),
        (&mut out, hw as isize, 1),
    );
    (out, cols)
}

fn im2col<R: Real>(x: &[R], cin: usize, h: usize, w: usize) -> Vec<R> {
    let hw = h * w;
    let mut cols = vec![R::zero(); cin * 9 * hw];
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<R: Real>(cols: &[R], cin: usize, h: usize, w: usize, dx: &mut [R]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += *s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += *s),
                    }
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients; returns the input gradient when
/// `need_dx` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward<R: Real>(
    dout: &[R],
    cols: &[R],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[R],
    cout: usize,
    dweight: &mut [R],
    dbias: &mut [R],
    need_dx: bool,
) -> Option<Vec<R>> {
    let hw = h * w;
    let k = cin * 9;
    // dW += dout * cols^T
    R::gemm(
        cout,
        hw,
        k,
        R::one(),
        (dout, hw as isize, 1),
        (cols, 1, hw as isize),
        R::one(),
        (dweight, k as isize, 1),
    );
    for (co, row) in dout.chunks_exact(hw).enumerate() {
        dbias[co] += row.iter().copied().sum::<R>();
    }
    if !need_dx {
        return None;
    }
    // dcols = W^T * dout
    let mut dcols = vec![R::zero(); k * hw];
    R::gemm(
        k,
        cout,
        hw,
        R::one(),
        (weight, 1, k as isize),
        (dout, hw as isize, 1),
        R::zero(),
        (&mut dcols, hw as isize, 1),
    );
    let mut dx = vec![R::zero(); cin * hw];
    col2im_add(&dcols, cin, h, w, &mut dx);
    Some(dx)
}

pub const GN_EPS: f64 = 1e-5;

pub struct GroupNormCache<R> {
    xhat: Vec<R>,
    inv_std: Vec<R>,
}

pub fn group_norm_forward<R: Real>(
    x: &[R],
    channels: usize,
    hw: usize,
    groups: usize,
    gamma: &[R],
    beta: &[R],
) -> (Vec<R>, GroupNormCache<R>) {
    let per = channels / groups * hw;
    let n = R::lit(per as f64);
    let mut xhat = vec![R::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let xs = &x[g * per..(g + 1) * per];
        let mean = xs.iter().copied().sum::<R>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / n;
        let is = R::one() / (var + R::lit(GN_EPS)).sqrt();
        inv_std.push(is);
        for (d, &v) in xhat[g * per..(g + 1) * per].iter_mut().zip(xs) {
            *d = (v - mean) * is;
        }
    }
    let mut y = xhat.clone();
    for c in 0..channels {
        for v in &mut y[c * hw..(c + 1) * hw] {
            *v = *v * gamma[c] + beta[c];
        }
    }
    (y, GroupNormCache { xhat, inv_std })
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<R: Real>(
    dy: &[R],
    cache: &GroupNormCache<R>,
    channels: usize,
    hw: usize,
    groups: usize,
    gamma: &[R],
    dgamma: &mut [R],
    dbeta: &mut [R],
) -> Vec<R> {
    let mut dxhat = vec![R::zero(); dy.len()];
    for c in 0..channels {
        let r = c * hw..(c + 1) * hw;
        let mut sg = R::zero();
        let mut sb = R::zero();
        for ((d, &g), &xh) in dxhat[r.clone()].iter_mut().zip(&dy[r.clone()]).zip(&cache.xhat[r]) {
            sg += g * xh;
            sb += g;
            *d = g * gamma[c];
        }
        dgamma[c] += sg;
        dbeta[c] += sb;
    }
    let per = channels / groups * hw;
    let n = R::lit(per as f64);
    let mut dx = vec![R::zero(); dy.len()];
    for g in 0..groups {
        let r = g * per..(g + 1) * per;
        let dh = &dxhat[r.clone()];
        let xh = &cache.xhat[r.clone()];
        let sum_d = dh.iter().copied().sum::<R>();
        let sum_dx = dh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<R>();
        let scale = cache.inv_std[g] / n;
        for ((o, &d), &x) in dx[r].iter_mut().zip(dh).zip(xh) {
            *o = scale * (n * d - sum_d - x * sum_dx);
        }
    }
    dx
}

#[inline]
fn sigmoid<R: Real>(x: R) -> R {
    R::one() / (R::one() + (-x).exp())
}

pub fn silu<R: Real>(x: &[R]) -> Vec<R> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Multiplies `grad` in place by the SiLU derivative at `x`.
pub fn silu_backward<R: Real>(x: &[R], grad: &mut [R]) {
    for (g, &v) in grad.iter_mut().zip(x) {
        let s = sigmoid(v);
        *g *= s * (R::one() + v * (R::one() - s));
    }
}

/// `y = W x + b` with `W` stored `out x in`.
pub fn linear_forward<R: Real>(x: &[R], weight: &[R], bias: &[R], out: usize) -> Vec<R> {
    let inp = x.len();
    (0..out)
        .map(|o| bias[o] + weight[o * inp..(o + 1) * inp].iter().zip(x).map(|(&a, &b)| a * b).sum::<R>())
        .collect()
}

pub fn linear_backward<R: Real>(
    dy: &[R],
    x: &[R],
    weight: &[R],
    dweight: &mut [R],
    dbias: &mut [R],
) -> Vec<R> {
    let inp = x.len();
    let mut dx = vec![R::zero(); inp];
    for (o, &g) in dy.iter().enumerate() {
        dbias[o] += g;
        let wrow = &weight[o * inp..(o + 1) * inp];
        let drow = &mut dweight[o * inp..(o + 1) * inp];
        for i in 0..inp {
            drow[i] += g * x[i];
            dx[i] += g * wrow[i];
        }
    }
    dx
}

/// 2x2 average pooling; `h` and `w` must be even.
pub fn avg_pool2<R: Real>(x: &[R], c: usize, h: usize, w: usize) -> Vec<R> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = R::lit(0.25);
    let mut out = vec![R::zero(); c * oh * ow];
    for ch in 0..c {
        let p = &x[ch * h * w..];
        for y in 0..oh {
            for xx in 0..ow {
                let s = p[2 * y * w + 2 * xx]
                    + p[2 * y * w + 2 * xx + 1]
                    + p[(2 * y + 1) * w + 2 * xx]
                    + p[(2 * y + 1) * w + 2 * xx + 1];
                out[ch * oh * ow + y * ow + xx] = s * quarter;
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool2`]: spreads each gradient over its 2x2 footprint.
pub fn avg_pool2_backward<R: Real>(dy: &[R], c: usize, h: usize, w: usize, dx: &mut [R]) {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = R::lit(0.25);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                dx[ch * h * w + y * w + xx] += dy[ch * oh * ow + (y / 2) * ow + xx / 2] * quarter;
            }
        }
    }
}

/// Nearest-neighbour 2x upsampling of a `c x h x w` buffer.
pub fn upsample2<R: Real>(x: &[R], c: usize, h: usize, w: usize) -> Vec<R> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![R::zero(); c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[ch * oh * ow + y * ow + xx] = x[ch * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]; `h`, `w` are the low-resolution dims.
pub fn upsample2_backward<R: Real>(dy: &[R], c: usize, h: usize, w: usize) -> Vec<R> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![R::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                dx[ch * h * w + (y / 2) * w + xx / 2] += dy[ch * oh * ow + y * ow + xx];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_conv(x: &[f64], cin: usize, h: usize, w: usize, wt: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
        let mut out = vec![0.0; cout * h * w];
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += wt[((co * cin + ci) * 3 + ky) * 3 + kx]
                                    * x[ci * h * w + sy as usize * w + sx as usize];
                            }
                        }
                    }
                    out[co * h * w + y * w + xx] = acc;
                }
            }
        }
        out
    }

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * scale).collect()
    }

    #[test]
    fn conv_matches_direct_sum() {
        let (cin, cout, h, w) = (3, 4, 5, 6);
        let x = seq(cin * h * w, 2.0);
        let wt = seq(cout * cin * 9, 1.0);
        let b = vec![0.1, -0.2, 0.3, 0.0];
        let (got, _) = conv3x3_forward(&x, cin, h, w, &wt, &b, cout);
        let want = direct_conv(&x, cin, h, w, &wt, &b, cout);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> = <x, conv^T g> + <b, sum g> for the linear part
        let (cin, cout, h, w) = (2, 3, 4, 5);
        let x = seq(cin * h * w, 2.0);
        let wt = seq(cout * cin * 9, 1.0);
        let zero_b = vec![0.0; cout];
        let g = seq(cout * h * w, 3.0).into_iter().rev().collect::<Vec<_>>();
        let (y, cols) = conv3x3_forward(&x, cin, h, w, &wt, &zero_b, cout);
        let mut dw = vec![0.0; wt.len()];
        let mut db = vec![0.0; cout];
        let dx = conv3x3_backward(&g, &cols, cin, h, w, &wt, cout, &mut dw, &mut db, true).unwrap();
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let rhs_w: f64 = wt.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-10);
    }

    #[test]
    fn pool_and_upsample_adjoints() {
        let (c, h, w) = (2, 4, 6);
        let x = seq(c * h * w, 1.0);
        let g = seq(c * h * w / 4, 1.0);
        let lhs: f64 = avg_pool2(&x, c, h, w).iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; x.len()];
        avg_pool2_backward(&g, c, h, w, &mut dx);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);

        let lo = seq(c * 3 * 2, 1.0);
        let hi_g = seq(c * 6 * 4, 1.0);
        let lhs: f64 = upsample2(&lo, c, 3, 2).iter().zip(&hi_g).map(|(a, b)| a * b).sum();
        let rhs: f64 = lo.iter().zip(&upsample2_backward(&hi_g, c, 3, 2)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn group_norm_normalizes() {
        let (c, hw, g) = (4, 9, 2);
        let x = seq(c * hw, 5.0);
        let gamma = vec![1.0; c];
        let beta = vec![0.0; c];
        let (y, _) = group_norm_forward(&x, c, hw, g, &gamma, &beta);
        for grp in y.chunks(c / g * hw) {
            let m: f64 = grp.iter().sum::<f64>() / grp.len() as f64;
            let v: f64 = grp.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / grp.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn group_norm_gradient_matches_finite_differences() {
        let (c, hw, g) = (4, 6, 2);
        let x = seq(c * hw, 3.0);
        let gamma: Vec<f64> = (0..c).map(|i| 0.5 + i as f64 * 0.3).collect();
        let beta = vec![0.1; c];
        let wts = seq(c * hw, 1.0).into_iter().rev().collect::<Vec<_>>();
        let loss = |x: &[f64]| -> f64 {
            let (y, _) = group_norm_forward(x, c, hw, g, &gamma, &beta);
            y.iter().zip(&wts).map(|(a, b)| a * b * a).sum()
        };
        let (y, cache) = group_norm_forward(&x, c, hw, g, &gamma, &beta);
        let dy: Vec<f64> = y.iter().zip(&wts).map(|(a, b)| 2.0 * a * b).collect();
        let mut dg = vec![0.0; c];
        let mut db = vec![0.0; c];
        let dx = group_norm_backward(&dy, &cache, c, hw, g, &gamma, &mut dg, &mut db);
        let h = 1e-6;
        for i in [0, 5, 11, 17, 23] {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6 * fd.abs().max(1.0), "{i}: {fd} vs {}", dx[i]);
        }
    }
}
