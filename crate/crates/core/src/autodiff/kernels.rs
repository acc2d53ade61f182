//! Tape-free forward kernels and their backward rules on raw slices.
//!
//! Layouts: images are `H×W×C` (channel fastest), conv kernels `3×3×Cin×Cout`,
//! dense weights `m×n` (output-major).

use super::tensor::{Scalar, Tensor};
use super::AutodiffError;

fn mismatch(msg: String) -> AutodiffError {
    AutodiffError::ShapeMismatch(msg)
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += a * x`
#[inline]
pub(crate) fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yy, &xx) in y.iter_mut().zip(x) {
        *yy += a * xx;
    }
}

pub(crate) struct ConvDims {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
}

pub(crate) fn conv_dims<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, b: &Tensor<T>) -> Result<ConvDims, AutodiffError> {
    let (xs, ks, bs) = (x.shape(), k.shape(), b.shape());
    if xs.len() != 3 || ks.len() != 4 || bs.len() != 1 {
        return Err(mismatch(format!("conv2d ranks: input {xs:?}, kernel {ks:?}, bias {bs:?}")));
    }
    if ks[0] != 3 || ks[1] != 3 || ks[2] != xs[2] || ks[3] != bs[0] {
        return Err(mismatch(format!("conv2d shapes: input {xs:?}, kernel {ks:?}, bias {bs:?}")));
    }
    Ok(ConvDims {
        h: xs[0],
        w: xs[1],
        cin: xs[2],
        cout: ks[3],
    })
}

/// 3×3 cross-correlation with zero padding 1 (same-size output) plus bias.
pub fn conv2d_same<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
    let d = conv_dims(x, k, b)?;
    let (xd, kd, bd) = (x.data(), k.data(), b.data());
    let mut out = vec![T::zero(); d.h * d.w * d.cout];
    for y in 0..d.h {
        for xx in 0..d.w {
            let o = &mut out[(y * d.w + xx) * d.cout..][..d.cout];
            o.copy_from_slice(bd);
            for ky in 0..3 {
                let iy = y + ky;
                if iy < 1 || iy > d.h {
                    continue;
                }
                let iy = iy - 1;
                for kx in 0..3 {
                    let ix = xx + kx;
                    if ix < 1 || ix > d.w {
                        continue;
                    }
                    let ix = ix - 1;
                    let inp = &xd[(iy * d.w + ix) * d.cin..][..d.cin];
                    let kbase = (ky * 3 + kx) * d.cin * d.cout;
                    for (ci, &v) in inp.iter().enumerate() {
                        if v != T::zero() {
                            axpy(o, v, &kd[kbase + ci * d.cout..][..d.cout]);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![d.h, d.w, d.cout], out)
}

/// Backward of [`conv2d_same`]: accumulates into the optional input/kernel/bias grads.
pub(crate) fn conv2d_same_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    d: &ConvDims,
    gout: &[T],
    gx: Option<&mut [T]>,
    gk: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let (xd, kd) = (x.data(), k.data());
    if let Some(gb) = gb {
        for px in gout.chunks_exact(d.cout) {
            for (g, &v) in gb.iter_mut().zip(px) {
                *g += v;
            }
        }
    }
    let mut gx = gx;
    let mut gk = gk;
    for y in 0..d.h {
        for xx in 0..d.w {
            let go = &gout[(y * d.w + xx) * d.cout..][..d.cout];
            for ky in 0..3 {
                let iy = y + ky;
                if iy < 1 || iy > d.h {
                    continue;
                }
                let iy = iy - 1;
                for kx in 0..3 {
                    let ix = xx + kx;
                    if ix < 1 || ix > d.w {
                        continue;
                    }
                    let ix = ix - 1;
                    let ibase = (iy * d.w + ix) * d.cin;
                    let kbase = (ky * 3 + kx) * d.cin * d.cout;
                    if let Some(gk) = gk.as_deref_mut() {
                        for ci in 0..d.cin {
                            let v = xd[ibase + ci];
                            if v != T::zero() {
                                axpy(&mut gk[kbase + ci * d.cout..][..d.cout], v, go);
                            }
                        }
                    }
                    if let Some(gx) = gx.as_deref_mut() {
                        for ci in 0..d.cin {
                            gx[ibase + ci] += dot(&kd[kbase + ci * d.cout..][..d.cout], go);
                        }
                    }
                }
            }
        }
    }
}

/// 2×2 max pooling with stride 2, trailing odd row/column dropped. Returns the
/// output and, per output cell, the flat input index of the first maximum.
pub fn maxpool_2x2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>), AutodiffError> {
    let s = x.shape();
    if s.len() != 3 || s[0] < 2 || s[1] < 2 {
        return Err(mismatch(format!("maxpool_2x2 needs H,W >= 2, got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut arg = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best_i = ((2 * oy) * w + 2 * ox) * c + ch;
                let mut best = xd[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                    if xd[i] > best {
                        best = xd[i];
                        best_i = i;
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::new(vec![oh, ow, c], out)?, arg))
}

pub(crate) fn dense_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize), AutodiffError> {
    let ws = w.shape();
    if ws.len() != 2 || b.shape() != [ws[0]] || x.len() != ws[1] {
        return Err(mismatch(format!(
            "dense: input {:?}, weight {ws:?}, bias {:?}",
            x.shape(),
            b.shape()
        )));
    }
    Ok((ws[0], ws[1]))
}

/// `W x + b` for a flat input of length `n` and `W` of shape `m×n`.
pub fn dense<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
    let (m, n) = dense_dims(x, w, b)?;
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let out = (0..m).map(|i| bd[i] + dot(&wd[i * n..(i + 1) * n], xd)).collect();
    Tensor::new(vec![m], out)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    map(x, |v| if v > T::zero() { v } else { T::zero() })
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    map(x, |v| v.logistic())
}

pub fn tanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    map(x, |v| v.htan())
}

fn map<T: Scalar>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

/// Mean over rows of the squared euclidean norm of `pred - target` (rows × cols).
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T, AutodiffError> {
    if pred.shape() != target.shape() || pred.shape().len() != 2 {
        return Err(mismatch(format!(
            "mse_loss: pred {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let rows = T::of(pred.shape()[0] as f64);
    let s: T = pred.data().iter().zip(target.data()).fold(T::zero(), |acc, (&p, &t)| acc + (p - t) * (p - t));
    Ok(s / rows)
}

/// LSTM parameters: `weight` is `4k × (d + k)` acting on `[x, h_prev]`, gate blocks
/// ordered input, forget, candidate, output; `bias` is `4k`.
pub struct LstmWeights<'a, T> {
    pub weight: &'a Tensor<T>,
    pub bias: &'a Tensor<T>,
}

/// One LSTM step: `c = f⊙c_prev + i⊙g`, `h = o⊙tanh(c)`.
pub fn lstm_step<T: Scalar>(
    prev_c: &Tensor<T>,
    prev_h: &Tensor<T>,
    x: &Tensor<T>,
    p: &LstmWeights<'_, T>,
) -> Result<(Tensor<T>, Tensor<T>), AutodiffError> {
    let k = prev_c.len();
    if prev_h.len() != k || p.weight.shape() != [4 * k, x.len() + k] {
        return Err(mismatch(format!(
            "lstm_step: state {k}, input {}, weight {:?}",
            x.len(),
            p.weight.shape()
        )));
    }
    let mut xh = x.data().to_vec();
    xh.extend_from_slice(prev_h.data());
    let z = dense(&Tensor::vector(xh), p.weight, p.bias)?;
    let zd = z.data();
    let sig = |v: T| v.logistic();
    let mut c = Vec::with_capacity(k);
    let mut h = Vec::with_capacity(k);
    for j in 0..k {
        let i = sig(zd[j]);
        let f = sig(zd[k + j]);
        let g = zd[2 * k + j].htan();
        let o = sig(zd[3 * k + j]);
        let cj = f * prev_c.data()[j] + i * g;
        c.push(cj);
        h.push(o * cj.htan());
    }
    Ok((Tensor::vector(c), Tensor::vector(h)))
}
