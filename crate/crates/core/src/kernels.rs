//! Forward and adjoint kernels over [`Tensor`]s.
//!
//! Each differentiable primitive has a forward function and the matching
//! vector-Jacobian product. The eager backend only calls the forward half;
//! the tape in [`crate::autograd`] calls both.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

// ---------------------------------------------------------------------------
// Broadcasting

/// Broadcast two shapes where every axis is equal or 1 on one side.
pub fn broadcast_shape(a: [usize; 4], b: [usize; 4]) -> Result<[usize; 4]> {
    let mut out = [0; 4];
    for d in 0..4 {
        out[d] = match (a[d], b[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Dimension(format!("cannot broadcast {a:?} with {b:?}")));
            }
        };
    }
    Ok(out)
}

fn bcast_strides(shape: [usize; 4], out: [usize; 4]) -> [usize; 4] {
    let full = [shape[1] * shape[2] * shape[3], shape[2] * shape[3], shape[3], 1];
    let mut s = [0; 4];
    for d in 0..4 {
        s[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { full[d] };
    }
    s
}

/// One contiguous run of the output along the last axis. `a_full` / `b_full`
/// say whether the operand advances with the output (`true`) or repeats a
/// single element across the run (`false`).
#[derive(Clone, Copy)]
struct Run {
    out: usize,
    a: usize,
    a_full: bool,
    b: usize,
    b_full: bool,
    len: usize,
}

/// Split a broadcast into [`Run`]s along the last axis.
#[inline]
fn for_each_run(out: [usize; 4], a: [usize; 4], b: [usize; 4], mut f: impl FnMut(Run)) {
    if a == out && b == out {
        let len = out.iter().product();
        f(Run { out: 0, a: 0, a_full: true, b: 0, b_full: true, len });
        return;
    }
    let sa = bcast_strides(a, out);
    let sb = bcast_strides(b, out);
    let len = out[3];
    let mut o = 0;
    for n in 0..out[0] {
        for c in 0..out[1] {
            for y in 0..out[2] {
                let ra = n * sa[0] + c * sa[1] + y * sa[2];
                let rb = n * sb[0] + c * sb[1] + y * sb[2];
                f(Run { out: o, a: ra, a_full: sa[3] == 1, b: rb, b_full: sb[3] == 1, len });
                o += len;
            }
        }
    }
}

#[inline]
fn apply_run<T: Real>(od: &mut [T], ad: &[T], bd: &[T], r: Run, f: impl Fn(T, T) -> T) {
    let o = &mut od[r.out..r.out + r.len];
    match (r.a_full, r.b_full) {
        (true, true) => {
            for ((o, &x), &y) in o.iter_mut().zip(&ad[r.a..r.a + r.len]).zip(&bd[r.b..r.b + r.len]) {
                *o = f(x, y);
            }
        }
        (true, false) => {
            let y = bd[r.b];
            for (o, &x) in o.iter_mut().zip(&ad[r.a..r.a + r.len]) {
                *o = f(x, y);
            }
        }
        (false, true) => {
            let x = ad[r.a];
            for (o, &y) in o.iter_mut().zip(&bd[r.b..r.b + r.len]) {
                *o = f(x, y);
            }
        }
        (false, false) => o.fill(f(ad[r.a], bd[r.b])),
    }
}

/// Accumulate `d(g, x, y)` into `dst`, summing over the run when `dst` is
/// broadcast along it. `own` is the offset/fullness of `dst`'s operand.
#[inline]
fn reduce_run<T: Real>(
    dst: &mut [T],
    own: (usize, bool),
    gd: &[T],
    xd: &[T],
    yd: &[T],
    r: Run,
    d: impl Fn(T, T, T) -> T,
) {
    let g = &gd[r.out..r.out + r.len];
    let xs = |i: usize| if r.a_full { xd[r.a + i] } else { xd[r.a] };
    let ys = |i: usize| if r.b_full { yd[r.b + i] } else { yd[r.b] };
    if own.1 {
        let dst = &mut dst[own.0..own.0 + r.len];
        if r.a_full && r.b_full {
            let (xa, ya) = (&xd[r.a..r.a + r.len], &yd[r.b..r.b + r.len]);
            for (((o, &gv), &x), &y) in dst.iter_mut().zip(g).zip(xa).zip(ya) {
                *o += d(gv, x, y);
            }
        } else {
            for (i, (o, &gv)) in dst.iter_mut().zip(g).enumerate() {
                *o += d(gv, xs(i), ys(i));
            }
        }
    } else {
        let mut acc = T::zero();
        for (i, &gv) in g.iter().enumerate() {
            acc += d(gv, xs(i), ys(i));
        }
        dst[own.0] += acc;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

pub fn binary<T: Real>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let mut out = Tensor::zeros(shape);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    match op {
        BinaryOp::Add => for_each_run(shape, a.shape(), b.shape(), |r| apply_run(od, ad, bd, r, |x, y| x + y)),
        BinaryOp::Sub => for_each_run(shape, a.shape(), b.shape(), |r| apply_run(od, ad, bd, r, |x, y| x - y)),
        BinaryOp::Mul => for_each_run(shape, a.shape(), b.shape(), |r| apply_run(od, ad, bd, r, |x, y| x * y)),
        BinaryOp::Div => for_each_run(shape, a.shape(), b.shape(), |r| apply_run(od, ad, bd, r, |x, y| x / y)),
    }
    Ok(out)
}

/// Gradients of a broadcasting binary op, reduced back onto each operand.
pub fn binary_backward<T: Real>(
    op: BinaryOp,
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let (gad, gbd) = (ga.data_mut(), gb.data_mut());
    for_each_run(g.shape(), a.shape(), b.shape(), |r| {
        let (oa, ob) = ((r.a, r.a_full), (r.b, r.b_full));
        match op {
            BinaryOp::Add => {
                reduce_run(gad, oa, gd, ad, bd, r, |g, _, _| g);
                reduce_run(gbd, ob, gd, ad, bd, r, |g, _, _| g);
            }
            BinaryOp::Sub => {
                reduce_run(gad, oa, gd, ad, bd, r, |g, _, _| g);
                reduce_run(gbd, ob, gd, ad, bd, r, |g, _, _| -g);
            }
            BinaryOp::Mul => {
                reduce_run(gad, oa, gd, ad, bd, r, |g, _, y| g * y);
                reduce_run(gbd, ob, gd, ad, bd, r, |g, x, _| g * x);
            }
            BinaryOp::Div => {
                reduce_run(gad, oa, gd, ad, bd, r, |g, _, y| g / y);
                reduce_run(gbd, ob, gd, ad, bd, r, |g, x, y| -g * x / (y * y));
            }
        }
    });
    (ga, gb)
}

// ---------------------------------------------------------------------------
// Unary

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Abs,
    Sqrt,
    Square,
    Relu,
    Sigmoid,
    /// `x * s`
    Scale(f64),
    /// `x + s`
    Shift(f64),
}

pub fn unary<T: Real>(op: UnaryOp, x: &Tensor<T>) -> Tensor<T> {
    match op {
        UnaryOp::Abs => x.map(|v| v.abs()),
        UnaryOp::Sqrt => x.map(|v| v.sqrt()),
        UnaryOp::Square => x.map(|v| v * v),
        UnaryOp::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
        UnaryOp::Sigmoid => x.map(|v| T::one() / (T::one() + (-v).exp())),
        UnaryOp::Scale(s) => {
            let s = T::lit(s);
            x.map(|v| v * s)
        }
        UnaryOp::Shift(s) => {
            let s = T::lit(s);
            x.map(|v| v + s)
        }
    }
}

/// `dL/dx` given input `x`, output `y` and upstream gradient `g`.
pub fn unary_backward<T: Real>(op: UnaryOp, x: &Tensor<T>, y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(x.shape());
    let (xd, yd, gd) = (x.data(), y.data(), g.data());
    let two = T::lit(2.0);
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        *o = match op {
            UnaryOp::Abs => {
                if xd[i] > T::zero() {
                    gd[i]
                } else if xd[i] < T::zero() {
                    -gd[i]
                } else {
                    T::zero()
                }
            }
            UnaryOp::Sqrt => gd[i] / (two * yd[i]),
            UnaryOp::Square => gd[i] * two * xd[i],
            UnaryOp::Relu => {
                if xd[i] > T::zero() {
                    gd[i]
                } else {
                    T::zero()
                }
            }
            UnaryOp::Sigmoid => gd[i] * yd[i] * (T::one() - yd[i]),
            UnaryOp::Scale(s) => gd[i] * T::lit(s),
            UnaryOp::Shift(_) => gd[i],
        };
    }
    out
}

/// Elementwise maximum of equal-shaped tensors. Ties route the gradient to `a`.
pub fn maximum<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("maximum of {:?} and {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| if x >= y { x } else { y }).collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn maximum_backward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    for i in 0..g.len() {
        if a.data()[i] >= b.data()[i] {
            ga.data_mut()[i] = g.data()[i];
        } else {
            gb.data_mut()[i] = g.data()[i];
        }
    }
    (ga, gb)
}

// ---------------------------------------------------------------------------
// Reductions

/// Mean over the axes flagged in `axes`, keeping them as singleton dims.
pub fn mean_over<T: Real>(x: &Tensor<T>, axes: [bool; 4]) -> Tensor<T> {
    let shape = x.shape();
    let mut out_shape = shape;
    let mut count = 1;
    for d in 0..4 {
        if axes[d] {
            out_shape[d] = 1;
            count *= shape[d];
        }
    }
    let mut out = Tensor::zeros(out_shape);
    {
        let od = out.data_mut();
        let xd = x.data();
        for_each_run(shape, shape, out_shape, |r| {
            let src = &xd[r.a..r.a + r.len];
            if r.b_full {
                for (o, &v) in od[r.b..r.b + r.len].iter_mut().zip(src) {
                    *o += v;
                }
            } else {
                od[r.b] += src.iter().copied().sum::<T>();
            }
        });
    }
    let inv = T::one() / T::from_usize(count).unwrap();
    out.data_mut().iter_mut().for_each(|v| *v *= inv);
    out
}

pub fn mean_over_backward<T: Real>(in_shape: [usize; 4], axes: [bool; 4], g: &Tensor<T>) -> Tensor<T> {
    let count: usize = (0..4).filter(|&d| axes[d]).map(|d| in_shape[d]).product();
    let inv = T::one() / T::from_usize(count).unwrap();
    let mut out = Tensor::zeros(in_shape);
    let gd = g.data();
    let od = out.data_mut();
    for_each_run(in_shape, in_shape, g.shape(), |r| {
        let dst = &mut od[r.out..r.out + r.len];
        if r.b_full {
            for (o, &v) in dst.iter_mut().zip(&gd[r.b..r.b + r.len]) {
                *o = v * inv;
            }
        } else {
            dst.fill(gd[r.b] * inv);
        }
    });
    out
}

// ---------------------------------------------------------------------------
// Channel slicing

pub fn narrow_channels<T: Real>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if start + len > c || len == 0 {
        return Err(Error::Dimension(format!("channel slice {start}..{} of {c}", start + len)));
    }
    let mut data = Vec::with_capacity(n * len * h * w);
    for b in 0..n {
        for ch in start..start + len {
            data.extend_from_slice(x.plane(b, ch));
        }
    }
    Tensor::from_vec([n, len, h, w], data)
}

pub fn narrow_channels_backward<T: Real>(in_shape: [usize; 4], start: usize, g: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(in_shape);
    let len = g.shape()[1];
    for b in 0..in_shape[0] {
        for ch in 0..len {
            out.plane_mut(b, start + ch).copy_from_slice(g.plane(b, ch));
        }
    }
    out
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::Dimension(format!("concat {:?} with {:?}", a.shape(), b.shape())));
    }
    let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
    for i in 0..n {
        for ch in 0..ca {
            data.extend_from_slice(a.plane(i, ch));
        }
        for ch in 0..cb {
            data.extend_from_slice(b.plane(i, ch));
        }
    }
    Tensor::from_vec([n, ca + cb, h, w], data)
}

// ---------------------------------------------------------------------------
// Spatial rearrangement

#[inline]
fn reflect(i: isize, len: usize) -> usize {
    let len = len as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= len {
        i = 2 * (len - 1) - i;
    }
    debug_assert!(i >= 0 && i < len);
    i as usize
}

/// Reflect-pad at the bottom and right edges.
pub fn reflect_pad<T: Real>(x: &Tensor<T>, pad_h: usize, pad_w: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if pad_h >= h.max(1) && pad_h > 0 || pad_w >= w.max(1) && pad_w > 0 {
        return Err(Error::Dimension(format!("reflect pad ({pad_h}, {pad_w}) too large for {h}x{w}")));
    }
    let (ho, wo) = (h + pad_h, w + pad_w);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for y in 0..ho {
                let sy = reflect(y as isize, h);
                for xx in 0..wo {
                    dst[y * wo + xx] = src[sy * w + reflect(xx as isize, w)];
                }
            }
        }
    }
    Ok(out)
}

pub fn reflect_pad_backward<T: Real>(in_shape: [usize; 4], g: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = in_shape;
    let [_, _, ho, wo] = g.shape();
    let mut out = Tensor::zeros(in_shape);
    for b in 0..n {
        for ch in 0..c {
            let src = g.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for y in 0..ho {
                let sy = reflect(y as isize, h);
                for xx in 0..wo {
                    dst[sy * w + reflect(xx as isize, w)] += src[y * wo + xx];
                }
            }
        }
    }
    out
}

/// Keep the top-left `h x w` block.
pub fn crop<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [n, c, hi, wi] = x.shape();
    if h > hi || w > wi {
        return Err(Error::Dimension(format!("crop {h}x{w} from {hi}x{wi}")));
    }
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for y in 0..h {
                dst[y * w..(y + 1) * w].copy_from_slice(&src[y * wi..y * wi + w]);
            }
        }
    }
    Ok(out)
}

pub fn crop_backward<T: Real>(in_shape: [usize; 4], g: &Tensor<T>) -> Tensor<T> {
    let [n, c, _, wi] = in_shape;
    let [_, _, h, w] = g.shape();
    let mut out = Tensor::zeros(in_shape);
    for b in 0..n {
        for ch in 0..c {
            let src = g.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for y in 0..h {
                dst[y * wi..y * wi + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
    }
    out
}

/// `[n, c*r*r, h, w] -> [n, c, h*r, w*r]`.
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, cr, h, w] = x.shape();
    if cr % (r * r) != 0 {
        return Err(Error::Config(format!("pixel shuffle needs channels divisible by {}, got {cr}", r * r)));
    }
    let c = cr / (r * r);
    let mut out = Tensor::zeros([n, c, h * r, w * r]);
    let wo = w * r;
    for b in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let src = x.plane(b, ch * r * r + i * r + j);
                    let dst = out.plane_mut(b, ch);
                    for y in 0..h {
                        for xx in 0..w {
                            dst[(y * r + i) * wo + xx * r + j] = src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixel_shuffle`]; also its adjoint since the shuffle is a permutation.
pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let [n, c, hr, wr] = x.shape();
    if hr % r != 0 || wr % r != 0 {
        return Err(Error::Dimension(format!("pixel unshuffle of {hr}x{wr} by {r}")));
    }
    let (h, w) = (hr / r, wr / r);
    let mut out = Tensor::zeros([n, c * r * r, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch).to_vec();
            for i in 0..r {
                for j in 0..r {
                    let dst = out.plane_mut(b, ch * r * r + i * r + j);
                    for y in 0..h {
                        for xx in 0..w {
                            dst[y * w + xx] = src[(y * r + i) * wr + xx * r + j];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Matrix products

/// Inner dimension from which operands are re-laid out before the product.
const LONG_K: usize = 256;

/// `dst[c][r] = src[r * stride + c]` for an `rows x cols` source.
fn transpose<T: Real>(src: &[T], rows: usize, cols: usize, stride: usize) -> Vec<T> {
    const B: usize = 32;
    let mut dst = vec![T::zero(); rows * cols];
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                let row = &src[r * stride..r * stride + cols];
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = row[c];
                }
            }
        }
    }
    dst
}

/// `C = alpha * A B + beta * C` on strided views.
///
/// With a long inner dimension, operands whose elements are contiguous along
/// `k` are first copied into k-major order, which the packed product streams
/// several times faster.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    beta: T,
    c: &mut [T],
    rsc: isize,
    csc: isize,
) {
    if k < LONG_K {
        return T::gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
    let at;
    let (a, rsa, csa) = if csa == 1 && m > 1 {
        at = transpose(a, m, k, rsa as usize);
        (&at[..], 1, m as isize)
    } else {
        (a, rsa, csa)
    };
    let bt;
    let (b, rsb, csb) = if rsb == 1 && n > 1 {
        bt = transpose(b, n, k, csb as usize);
        (&bt[..], n as isize, 1)
    } else {
        (b, rsb, csb)
    };
    T::gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
}

/// Small dense product `C (=|+=) alpha * A B` for row-major `B` and `C`.
/// Streams rows of `B`, which vectorizes well for the tiny shapes of window
/// attention where the packed product is dominated by overhead.
#[allow(clippy::too_many_arguments)]
fn small_gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    rsa: usize,
    csa: usize,
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { small_gemm_avx2(m, k, n, alpha, a, rsa, csa, b, c, accumulate) };
            return;
        }
    }
    small_gemm_body(m, k, n, alpha, a, rsa, csa, b, c, accumulate);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[allow(clippy::too_many_arguments)]
unsafe fn small_gemm_avx2<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    rsa: usize,
    csa: usize,
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    small_gemm_body(m, k, n, alpha, a, rsa, csa, b, c, accumulate);
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn small_gemm_body<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    rsa: usize,
    csa: usize,
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    let c = &mut c[..m * n];
    let b = &b[..k * n];
    if !accumulate {
        c.fill(T::zero());
    }
    for (i, crow) in c.chunks_exact_mut(n).enumerate() {
        for (p, brow) in b.chunks_exact(n).enumerate() {
            let av = alpha * a[i * rsa + p * csa];
            for (o, &bv) in crow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution

/// Geometry of a square convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Reflect padding when set, zero padding otherwise.
    pub reflect: bool,
}

impl ConvGeom {
    pub fn pointwise() -> Self {
        ConvGeom { kernel: 1, stride: 1, pad: 0, reflect: false }
    }

    pub fn out_dim(&self, len: usize) -> usize {
        (len + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    #[inline]
    fn source(&self, i: isize, len: usize) -> Option<usize> {
        if i >= 0 && (i as usize) < len {
            Some(i as usize)
        } else if self.reflect {
            Some(reflect(i, len))
        } else {
            None
        }
    }
}

/// Source column for every `(kx, ox)`, `usize::MAX` where padding is zero.
fn column_table(g: ConvGeom, w: usize) -> Vec<usize> {
    let wo = g.out_dim(w);
    let mut t = Vec::with_capacity(g.kernel * wo);
    for kx in 0..g.kernel {
        for ox in 0..wo {
            let i = (ox * g.stride + kx) as isize - g.pad as isize;
            t.push(g.source(i, w).unwrap_or(usize::MAX));
        }
    }
    t
}

fn im2col<T: Real>(x: &[T], ci: usize, h: usize, w: usize, g: ConvGeom, cols: &mut [T]) {
    let (ho, wo) = (g.out_dim(h), g.out_dim(w));
    let k = g.kernel;
    let table = column_table(g, w);
    for c in 0..ci {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * ho * wo;
                let xs = &table[kx * wo..(kx + 1) * wo];
                for oy in 0..ho {
                    let iy = g.source((oy * g.stride + ky) as isize - g.pad as isize, h);
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    match iy {
                        None => dst.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * w..(iy + 1) * w];
                            for (d, &ix) in dst.iter_mut().zip(xs) {
                                *d = if ix == usize::MAX { T::zero() } else { src[ix] };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], ci: usize, h: usize, w: usize, g: ConvGeom, x: &mut [T]) {
    let (ho, wo) = (g.out_dim(h), g.out_dim(w));
    let k = g.kernel;
    let table = column_table(g, w);
    for c in 0..ci {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * ho * wo;
                let xs = &table[kx * wo..(kx + 1) * wo];
                for oy in 0..ho {
                    let Some(iy) = g.source((oy * g.stride + ky) as isize - g.pad as isize, h) else {
                        continue;
                    };
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    for (&v, &ix) in cols[row + oy * wo..row + (oy + 1) * wo].iter().zip(xs) {
                        if ix != usize::MAX {
                            dst[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_check<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, g: ConvGeom) -> Result<()> {
    let [_, ci, h, w] = x.shape();
    let [_, wci, kh, kw] = weight.shape();
    if wci != ci || kh != g.kernel || kw != g.kernel {
        return Err(Error::Dimension(format!(
            "conv weight {:?} incompatible with input {:?}",
            weight.shape(),
            x.shape()
        )));
    }
    if h + 2 * g.pad < g.kernel || w + 2 * g.pad < g.kernel {
        return Err(Error::Dimension(format!("input {h}x{w} smaller than kernel {}", g.kernel)));
    }
    if g.reflect && (g.pad >= h || g.pad >= w) {
        return Err(Error::Dimension(format!("reflect pad {} too large for {h}x{w}", g.pad)));
    }
    Ok(())
}

/// Dense 2-D convolution (cross-correlation), weight `[co, ci, k, k]`, optional bias `[1, co, 1, 1]`.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeom,
) -> Result<Tensor<T>> {
    conv_check(x, weight, g)?;
    let [n, ci, h, w] = x.shape();
    let co = weight.shape()[0];
    let (ho, wo) = (g.out_dim(h), g.out_dim(w));
    let kk = ci * g.kernel * g.kernel;
    let hw = ho * wo;
    let mut out = Tensor::zeros([n, co, ho, wo]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * hw] };
    for b in 0..n {
        let xb = &x.data()[b * ci * h * w..(b + 1) * ci * h * w];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, ci, h, w, g, &mut cols);
            &cols
        };
        let ob = &mut out.data_mut()[b * co * hw..(b + 1) * co * hw];
        if let Some(bias) = bias {
            for (c, chunk) in ob.chunks_mut(hw).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias.data()[c]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        gemm(co, kk, hw, T::one(), weight.data(), kk as isize, 1, src, hw as isize, 1, beta, ob, hw as isize, 1);
    }
    Ok(out)
}

/// Returns `(dx, dweight, dbias)`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    g: ConvGeom,
    grad: &Tensor<T>,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Option<Tensor<T>>) {
    let [n, ci, h, w] = x.shape();
    let co = weight.shape()[0];
    let [_, _, ho, wo] = grad.shape();
    let kk = ci * g.kernel * g.kernel;
    let hw = ho * wo;
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = has_bias.then(|| Tensor::zeros([1, co, 1, 1]));
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * hw] };
    let mut dcols = vec![T::zero(); kk * hw];
    for b in 0..n {
        let xb = &x.data()[b * ci * h * w..(b + 1) * ci * h * w];
        let gb = &grad.data()[b * co * hw..(b + 1) * co * hw];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, ci, h, w, g, &mut cols);
            &cols
        };
        // dW += G (co x hw) . cols^T (hw x kk)
        gemm(co, hw, kk, T::one(), gb, hw as isize, 1, src, 1, hw as isize, T::one(), dw.data_mut(), kk as isize, 1);
        if let Some(db) = db.as_mut() {
            for (c, chunk) in gb.chunks(hw).enumerate() {
                db.data_mut()[c] += chunk.iter().copied().sum();
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx.data_mut()[b * ci * h * w..(b + 1) * ci * h * w];
            if g.is_pointwise() {
                gemm(ci, co, hw, T::one(), weight.data(), 1, kk as isize, gb, hw as isize, 1, T::zero(), dxb, hw as isize, 1);
            } else {
                gemm(kk, co, hw, T::one(), weight.data(), 1, kk as isize, gb, hw as isize, 1, T::zero(), &mut dcols, hw as isize, 1);
                col2im(&dcols, ci, h, w, g, dxb);
            }
        }
    }
    (dx, dw, db)
}

/// Depthwise 3x3 convolution with zero padding 1; weight `[c, 1, 3, 3]`, bias `[1, c, 1, 1]`.
pub fn depthwise3x3<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if weight.shape() != [c, 1, 3, 3] {
        return Err(Error::Dimension(format!(
            "depthwise weight {:?} for {c} channels",
            weight.shape()
        )));
    }
    let mut out = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let wk = &weight.data()[ch * 9..ch * 9 + 9];
            let dst = out.plane_mut(b, ch);
            if let Some(bias) = bias {
                dst.iter_mut().for_each(|v| *v = bias.data()[ch]);
            }
            for ky in 0..3 {
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[y * w..(y + 1) * w];
                    for kx in 0..3 {
                        let wv = wk[ky * 3 + kx];
                        // output x reads input x + kx - 1
                        let lo = if kx == 0 { 1 } else { 0 };
                        let hi = if kx == 2 { w.saturating_sub(1) } else { w };
                        for ox in lo..hi {
                            drow[ox] += wv * srow[ox + kx - 1];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn depthwise3x3_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let [n, c, h, w] = x.shape();
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = has_bias.then(|| Tensor::zeros([1, c, 1, 1]));
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let gp = g.plane(b, ch);
            let wk: [T; 9] = weight.data()[ch * 9..ch * 9 + 9].try_into().unwrap();
            let mut dwk = [T::zero(); 9];
            if let Some(db) = db.as_mut() {
                db.data_mut()[ch] += gp.iter().copied().sum();
            }
            let dxp = dx.plane_mut(b, ch);
            for ky in 0..3 {
                for y in 0..h {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let grow = &gp[y * w..(y + 1) * w];
                    let srow = &src[iy * w..(iy + 1) * w];
                    let drow = &mut dxp[iy * w..(iy + 1) * w];
                    for kx in 0..3 {
                        // output ox reads input ox + kx - 1
                        let lo = if kx == 0 { 1 } else { 0 };
                        let hi = if kx == 2 { w.saturating_sub(1) } else { w };
                        if lo >= hi {
                            continue;
                        }
                        let wv = wk[ky * 3 + kx];
                        let gs = &grow[lo..hi];
                        let (i0, i1) = (lo + kx - 1, hi + kx - 1);
                        dwk[ky * 3 + kx] += dot(gs, &srow[i0..i1]);
                        for (d, &gv) in drow[i0..i1].iter_mut().zip(gs) {
                            *d += wv * gv;
                        }
                    }
                }
            }
            for (d, v) in dw.data_mut()[ch * 9..ch * 9 + 9].iter_mut().zip(dwk) {
                *d += v;
            }
        }
    }
    (dx, dw, db)
}

/// Dot product with eight independent partial sums (vectorizes).
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = acc.iter().copied().sum::<T>();
    for (&x, &y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

// ---------------------------------------------------------------------------
// Attention

fn softmax_rows<T: Real>(m: &mut [T], cols: usize) {
    for row in m.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// In-place `dS = P * (dP - rowsum(dP * P))`.
fn softmax_rows_backward<T: Real>(p: &[T], dp: &mut [T], cols: usize) {
    for (prow, drow) in p.chunks(cols).zip(dp.chunks_mut(cols)) {
        let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
        for (d, &pv) in drow.iter_mut().zip(prow) {
            *d = pv * (*d - dot);
        }
    }
}

/// Geometry of non-overlapping window attention.
#[derive(Clone, Copy, Debug)]
pub struct WindowGeom {
    pub heads: usize,
    pub window: usize,
}

struct WindowDims {
    n: usize,
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    nwy: usize,
    nwx: usize,
    t: usize,
}

fn window_dims<T: Real>(qkv: &Tensor<T>, g: WindowGeom) -> Result<WindowDims> {
    let [n, c3, h, w] = qkv.shape();
    if c3 % 3 != 0 || (c3 / 3) % g.heads != 0 {
        return Err(Error::Config(format!("{c3} qkv channels cannot split into 3 x {} heads", g.heads)));
    }
    if h % g.window != 0 || w % g.window != 0 {
        return Err(Error::Dimension(format!("{h}x{w} not a multiple of window {}", g.window)));
    }
    let c = c3 / 3;
    Ok(WindowDims {
        n,
        c,
        d: c / g.heads,
        h,
        w,
        nwy: h / g.window,
        nwx: w / g.window,
        t: g.window * g.window,
    })
}

/// Gather one head of one window channel-major: `buf[e * tokens + token]`.
#[allow(clippy::too_many_arguments)]
fn gather_window<T: Real>(src: &Tensor<T>, dims: &WindowDims, b: usize, ch0: usize, wy: usize, wx: usize, ws: usize, buf: &mut [T]) {
    for e in 0..dims.d {
        let plane = src.plane(b, ch0 + e);
        for ty in 0..ws {
            let row = (wy * ws + ty) * dims.w + wx * ws;
            buf[e * dims.t + ty * ws..e * dims.t + (ty + 1) * ws].copy_from_slice(&plane[row..row + ws]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn scatter_window<T: Real>(dst: &mut Tensor<T>, dims: &WindowDims, b: usize, ch0: usize, wy: usize, wx: usize, ws: usize, buf: &[T]) {
    for e in 0..dims.d {
        let plane = dst.plane_mut(b, ch0 + e);
        for ty in 0..ws {
            let row = (wy * ws + ty) * dims.w + wx * ws;
            for (d, &v) in plane[row..row + ws].iter_mut().zip(&buf[e * dims.t + ty * ws..]) {
                *d += v;
            }
        }
    }
}

fn transpose_square<T: Real>(src: &[T], t: usize, dst: &mut [T]) {
    for i in 0..t {
        for j in 0..t {
            dst[j * t + i] = src[i * t + j];
        }
    }
}

/// Multi-head self-attention inside non-overlapping `window x window` tiles.
///
/// `qkv` packs queries, keys and values along channels (`[n, 3c, h, w]`).
/// Returns the attended values `[n, c, h, w]` and the softmax maps laid out as
/// `[n][window_y][window_x][head][token][token]`.
pub fn window_attention<T: Real>(qkv: &Tensor<T>, g: WindowGeom) -> Result<(Tensor<T>, Vec<T>)> {
    let dims = window_dims(qkv, g)?;
    let (t, d, ws) = (dims.t, dims.d, g.window);
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let mut out = Tensor::zeros([dims.n, dims.c, dims.h, dims.w]);
    let mut probs = vec![T::zero(); dims.n * dims.nwy * dims.nwx * g.heads * t * t];
    let buf = || vec![T::zero(); t * d];
    let (mut q, mut k, mut v, mut o) = (buf(), buf(), buf(), buf());
    let mut pt = vec![T::zero(); t * t];
    let mut idx = 0;
    for b in 0..dims.n {
        for wy in 0..dims.nwy {
            for wx in 0..dims.nwx {
                for head in 0..g.heads {
                    gather_window(qkv, &dims, b, head * d, wy, wx, ws, &mut q);
                    gather_window(qkv, &dims, b, dims.c + head * d, wy, wx, ws, &mut k);
                    gather_window(qkv, &dims, b, 2 * dims.c + head * d, wy, wx, ws, &mut v);
                    let p = &mut probs[idx * t * t..(idx + 1) * t * t];
                    // S[i][j] = scale * sum_e q[e][i] k[e][j]
                    small_gemm(t, d, t, scale, &q, 1, t, &k, p, false);
                    softmax_rows(p, t);
                    // O^T[e][i] = sum_j v[e][j] P[i][j]
                    transpose_square(p, t, &mut pt);
                    small_gemm(d, t, t, T::one(), &v, t, 1, &pt, &mut o, false);
                    scatter_window(&mut out, &dims, b, head * d, wy, wx, ws, &o);
                    idx += 1;
                }
            }
        }
    }
    Ok((out, probs))
}

pub fn window_attention_backward<T: Real>(qkv: &Tensor<T>, probs: &[T], g: WindowGeom, grad: &Tensor<T>) -> Tensor<T> {
    let dims = window_dims(qkv, g).expect("validated in forward");
    let (t, d, ws) = (dims.t, dims.d, g.window);
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let mut dqkv = Tensor::zeros(qkv.shape());
    let buf = || vec![T::zero(); t * d];
    let (mut q, mut k, mut v, mut go) = (buf(), buf(), buf(), buf());
    let (mut dq, mut dk, mut dv) = (buf(), buf(), buf());
    let mut dp = vec![T::zero(); t * t];
    let mut dst = vec![T::zero(); t * t];
    let mut idx = 0;
    for b in 0..dims.n {
        for wy in 0..dims.nwy {
            for wx in 0..dims.nwx {
                for head in 0..g.heads {
                    gather_window(qkv, &dims, b, head * d, wy, wx, ws, &mut q);
                    gather_window(qkv, &dims, b, dims.c + head * d, wy, wx, ws, &mut k);
                    gather_window(qkv, &dims, b, 2 * dims.c + head * d, wy, wx, ws, &mut v);
                    gather_window(grad, &dims, b, head * d, wy, wx, ws, &mut go);
                    let p = &probs[idx * t * t..(idx + 1) * t * t];
                    // dV^T[e][j] = sum_i dO^T[e][i] P[i][j]
                    small_gemm(d, t, t, T::one(), &go, t, 1, p, &mut dv, false);
                    // dP[i][j] = sum_e dO^T[e][i] V^T[e][j]
                    small_gemm(t, d, t, T::one(), &go, 1, t, &v, &mut dp, false);
                    softmax_rows_backward(p, &mut dp, t);
                    // dQ^T[e][i] = scale * sum_j K^T[e][j] dS[i][j]
                    transpose_square(&dp, t, &mut dst);
                    small_gemm(d, t, t, scale, &k, t, 1, &dst, &mut dq, false);
                    // dK^T[e][j] = scale * sum_i Q^T[e][i] dS[i][j]
                    small_gemm(d, t, t, scale, &q, t, 1, &dp, &mut dk, false);
                    scatter_window(&mut dqkv, &dims, b, head * d, wy, wx, ws, &dq);
                    scatter_window(&mut dqkv, &dims, b, dims.c + head * d, wy, wx, ws, &dk);
                    scatter_window(&mut dqkv, &dims, b, 2 * dims.c + head * d, wy, wx, ws, &dv);
                    idx += 1;
                }
            }
        }
    }
    dqkv
}

const L2_EPS: f64 = 1e-12;

fn l2_normalize_rows<T: Real>(src: &[T], cols: usize, dst: &mut [T], norms: &mut [T]) {
    let eps = T::lit(L2_EPS);
    for ((row, out), norm) in src.chunks(cols).zip(dst.chunks_mut(cols)).zip(norms.iter_mut()) {
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
        *norm = n;
        let inv = T::one() / n;
        for (o, &v) in out.iter_mut().zip(row) {
            *o = v * inv;
        }
    }
}

/// `dx` for `x_hat = x / max(|x|, eps)` given the normalized rows and norms.
fn l2_normalize_rows_backward<T: Real>(xhat: &[T], norms: &[T], cols: usize, g: &[T], dx: &mut [T]) {
    let eps = T::lit(L2_EPS);
    for (((xr, gr), dr), &n) in xhat.chunks(cols).zip(g.chunks(cols)).zip(dx.chunks_mut(cols)).zip(norms) {
        let inv = T::one() / n;
        if n > eps {
            let dot: T = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            for ((d, &xv), &gv) in dr.iter_mut().zip(xr).zip(gr) {
                *d += (gv - xv * dot) * inv;
            }
        } else {
            for (d, &gv) in dr.iter_mut().zip(gr) {
                *d += gv * inv;
            }
        }
    }
}

/// Settings of the transposed (channel-wise) attention.
#[derive(Clone, Copy, Debug)]
pub struct ChannelAttnGeom {
    pub heads: usize,
    /// L2-normalize queries and keys along the spatial axis first.
    pub qk_norm: bool,
}

fn channel_attn_dims<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, gamma: &Tensor<T>, g: ChannelAttnGeom) -> Result<(usize, usize, usize, usize)> {
    let [n, c, h, w] = q.shape();
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::Dimension("channel attention q/k/v shapes differ".into()));
    }
    if g.heads == 0 || c % g.heads != 0 {
        return Err(Error::Config(format!("{c} channels not divisible by {} heads", g.heads)));
    }
    if gamma.shape() != [1, g.heads, 1, 1] {
        return Err(Error::Dimension(format!("temperature shape {:?}", gamma.shape())));
    }
    Ok((n, c, c / g.heads, h * w))
}

/// Channel cross-covariance attention: per head, `softmax(Q K^T / gamma) V` with
/// `Q, K, V` flattened to `[d, h*w]`. The map is `d x d` regardless of the
/// spatial size. Returns the output and the maps laid out `[n][head][d][d]`.
pub fn channel_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    gamma: &Tensor<T>,
    g: ChannelAttnGeom,
) -> Result<(Tensor<T>, Vec<T>)> {
    let (n, c, d, hw) = channel_attn_dims(q, k, v, gamma, g)?;
    let mut out = Tensor::zeros(q.shape());
    let mut probs = vec![T::zero(); n * g.heads * d * d];
    let mut qh = vec![T::zero(); d * hw];
    let mut kh = vec![T::zero(); d * hw];
    let mut norms = vec![T::zero(); d];
    for b in 0..n {
        for head in 0..g.heads {
            let off = (b * c + head * d) * hw;
            let (qs, ks) = (&q.data()[off..off + d * hw], &k.data()[off..off + d * hw]);
            let (qa, ka): (&[T], &[T]) = if g.qk_norm {
                l2_normalize_rows(qs, hw, &mut qh, &mut norms);
                l2_normalize_rows(ks, hw, &mut kh, &mut norms);
                (&qh, &kh)
            } else {
                (qs, ks)
            };
            let inv_gamma = T::one() / gamma.data()[head];
            let p = &mut probs[(b * g.heads + head) * d * d..(b * g.heads + head + 1) * d * d];
            gemm(d, hw, d, inv_gamma, qa, hw as isize, 1, ka, 1, hw as isize, T::zero(), p, d as isize, 1);
            softmax_rows(p, d);
            let vs = &v.data()[off..off + d * hw];
            let os = &mut out.data_mut()[off..off + d * hw];
            gemm(d, d, hw, T::one(), p, d as isize, 1, vs, hw as isize, 1, T::zero(), os, hw as isize, 1);
        }
    }
    Ok((out, probs))
}

/// Returns `(dq, dk, dv, dgamma)`.
pub fn channel_attention_backward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    gamma: &Tensor<T>,
    probs: &[T],
    g: ChannelAttnGeom,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, d, hw) = channel_attn_dims(q, k, v, gamma, g).expect("validated in forward");
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut dgamma = Tensor::zeros(gamma.shape());
    let mut qh = vec![T::zero(); d * hw];
    let mut kh = vec![T::zero(); d * hw];
    let mut qn = vec![T::zero(); d];
    let mut kn = vec![T::zero(); d];
    let mut dp = vec![T::zero(); d * d];
    let mut logits = vec![T::zero(); d * d];
    let mut dqh = vec![T::zero(); d * hw];
    let mut dkh = vec![T::zero(); d * hw];
    for b in 0..n {
        for head in 0..g.heads {
            let off = (b * c + head * d) * hw;
            let (qs, ks, vs) = (&q.data()[off..off + d * hw], &k.data()[off..off + d * hw], &v.data()[off..off + d * hw]);
            let go = &grad.data()[off..off + d * hw];
            let (qa, ka): (&[T], &[T]) = if g.qk_norm {
                l2_normalize_rows(qs, hw, &mut qh, &mut qn);
                l2_normalize_rows(ks, hw, &mut kh, &mut kn);
                (&qh, &kh)
            } else {
                (qs, ks)
            };
            let gam = gamma.data()[head];
            let p = &probs[(b * g.heads + head) * d * d..(b * g.heads + head + 1) * d * d];
            // dV = P^T dO
            gemm(d, d, hw, T::one(), p, 1, d as isize, go, hw as isize, 1, T::zero(), &mut dv.data_mut()[off..off + d * hw], hw as isize, 1);
            // dP = dO V^T
            gemm(d, hw, d, T::one(), go, hw as isize, 1, vs, 1, hw as isize, T::zero(), &mut dp, d as isize, 1);
            softmax_rows_backward(p, &mut dp, d);
            // logits G = Qa Ka^T (before the temperature)
            gemm(d, hw, d, T::one(), qa, hw as isize, 1, ka, 1, hw as isize, T::zero(), &mut logits, d as isize, 1);
            let dsg: T = dp.iter().zip(&logits).map(|(&a, &b)| a * b).sum();
            dgamma.data_mut()[head] -= dsg / (gam * gam);
            let inv_gamma = T::one() / gam;
            // dQa = dG Ka, dKa = dG^T Qa with dG = dS / gamma
            gemm(d, d, hw, inv_gamma, &dp, d as isize, 1, ka, hw as isize, 1, T::zero(), &mut dqh, hw as isize, 1);
            gemm(d, d, hw, inv_gamma, &dp, 1, d as isize, qa, hw as isize, 1, T::zero(), &mut dkh, hw as isize, 1);
            let dqs = &mut dq.data_mut()[off..off + d * hw];
            if g.qk_norm {
                l2_normalize_rows_backward(&qh, &qn, hw, &dqh, dqs);
            } else {
                dqs.copy_from_slice(&dqh);
            }
            let dks = &mut dk.data_mut()[off..off + d * hw];
            if g.qk_norm {
                l2_normalize_rows_backward(&kh, &kn, hw, &dkh, dks);
            } else {
                dks.copy_from_slice(&dkh);
            }
        }
    }
    (dq, dk, dv, dgamma)
}

// ---------------------------------------------------------------------------
// Loss-side filters

/// Sums over every `win x win` window placed at multiples of `stride`
/// ("valid" placement). Accumulates through an `f64` summed-area table.
pub fn box_sum<T: Real>(x: &Tensor<T>, win: usize, stride: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if win == 0 || stride == 0 || h < win || w < win {
        return Err(Error::Dimension(format!("window {win} does not fit {h}x{w}")));
    }
    let (ho, wo) = ((h - win) / stride + 1, (w - win) / stride + 1);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let mut sat = vec![0.0f64; (h + 1) * (w + 1)];
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            for y in 0..h {
                let mut row = 0.0;
                for xx in 0..w {
                    row += src[y * w + xx].to_f64().unwrap();
                    sat[(y + 1) * (w + 1) + xx + 1] = sat[y * (w + 1) + xx + 1] + row;
                }
            }
            let dst = out.plane_mut(b, ch);
            for oy in 0..ho {
                let (y0, y1) = (oy * stride, oy * stride + win);
                for ox in 0..wo {
                    let (x0, x1) = (ox * stride, ox * stride + win);
                    let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
                        + sat[y0 * (w + 1) + x0];
                    dst[oy * wo + ox] = T::from_f64(s).unwrap();
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`box_sum`]: every input pixel receives the sum of the
/// gradients of the windows covering it.
pub fn box_sum_backward<T: Real>(in_shape: [usize; 4], win: usize, stride: usize, g: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = in_shape;
    let [_, _, ho, wo] = g.shape();
    let mut out = Tensor::zeros(in_shape);
    let mut diff = vec![0.0f64; (h + 1) * (w + 1)];
    for b in 0..n {
        for ch in 0..c {
            diff.iter_mut().for_each(|v| *v = 0.0);
            let gp = g.plane(b, ch);
            for oy in 0..ho {
                let (y0, y1) = (oy * stride, oy * stride + win);
                for ox in 0..wo {
                    let (x0, x1) = (ox * stride, ox * stride + win);
                    let v = gp[oy * wo + ox].to_f64().unwrap();
                    diff[y0 * (w + 1) + x0] += v;
                    diff[y0 * (w + 1) + x1] -= v;
                    diff[y1 * (w + 1) + x0] -= v;
                    diff[y1 * (w + 1) + x1] += v;
                }
            }
            // 2-D prefix sum of the difference array
            for y in 0..=h {
                for xx in 1..=w {
                    diff[y * (w + 1) + xx] += diff[y * (w + 1) + xx - 1];
                }
            }
            for y in 1..=h {
                for xx in 0..=w {
                    diff[y * (w + 1) + xx] += diff[(y - 1) * (w + 1) + xx];
                }
            }
            let dst = out.plane_mut(b, ch);
            for y in 0..h {
                for xx in 0..w {
                    dst[y * w + xx] = T::from_f64(diff[y * (w + 1) + xx]).unwrap();
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SobelDir {
    X,
    Y,
}

impl SobelDir {
    /// The 3x3 kernel, applied as a cross-correlation.
    pub fn kernel(self) -> [[f64; 3]; 3] {
        match self {
            SobelDir::X => [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]],
            SobelDir::Y => [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]],
        }
    }
}

/// Per-channel Sobel response over interior pixels only: `[n, c, h-2, w-2]`.
pub fn sobel<T: Real>(x: &Tensor<T>, dir: SobelDir) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    if h < 3 || w < 3 {
        return Err(Error::Dimension(format!("sobel needs at least 3x3, got {h}x{w}")));
    }
    let (ho, wo) = (h - 2, w - 2);
    let two = T::lit(2.0);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    for b in 0..n {
        for ch in 0..c {
            let src = x.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for y in 0..ho {
                let (r0, r1, r2) = (&src[y * w..], &src[(y + 1) * w..], &src[(y + 2) * w..]);
                let row = &mut dst[y * wo..(y + 1) * wo];
                // Written as differences of opposite taps, so flat regions
                // give exactly zero.
                match dir {
                    SobelDir::X => {
                        for (xx, o) in row.iter_mut().enumerate() {
                            *o = (r0[xx + 2] - r0[xx]) + two * (r1[xx + 2] - r1[xx]) + (r2[xx + 2] - r2[xx]);
                        }
                    }
                    SobelDir::Y => {
                        for (xx, o) in row.iter_mut().enumerate() {
                            *o = (r2[xx] - r0[xx]) + two * (r2[xx + 1] - r0[xx + 1]) + (r2[xx + 2] - r0[xx + 2]);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn sobel_backward<T: Real>(in_shape: [usize; 4], dir: SobelDir, g: &Tensor<T>) -> Tensor<T> {
    let [n, c, _, w] = in_shape;
    let [_, _, ho, wo] = g.shape();
    let k = dir.kernel().map(|r| r.map(T::lit));
    let mut out = Tensor::zeros(in_shape);
    for b in 0..n {
        for ch in 0..c {
            let gp = g.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for y in 0..ho {
                for xx in 0..wo {
                    let gv = gp[y * wo + xx];
                    for (ky, krow) in k.iter().enumerate() {
                        for (kx, &kv) in krow.iter().enumerate() {
                            dst[(y + ky) * w + xx + kx] += kv * gv;
                        }
                    }
                }
            }
        }
    }
    out
}
