//! Forward and backward kernels for the four layer kinds.
//!
//! Feature maps are `[H, W, C]` row-major; convolution kernels are
//! `[C_out, kh, kw, C_in]`; dense weights are `[out, in]`. With this layout a
//! kernel row and the input window row it touches are both contiguous runs of
//! `kw * C_in` values.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{axpy, dot, Tensor};

fn dims3<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(Error::Shape(format!("{what}: expected [H, W, C], found {s:?}"))),
    }
}

/// Valid-padding cross-correlation plus bias.
pub fn conv_forward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w, cin) = dims3(input, "conv input")?;
    let (cout, kh, kw, kc) = match *kernels.shape() {
        [a, b, c, d] => (a, b, c, d),
        ref s => return Err(Error::Shape(format!("conv kernels: expected 4-d, found {s:?}"))),
    };
    if kc != cin {
        return Err(Error::Shape(format!(
            "conv kernels expect {kc} input channels, input has {cin}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::Shape(format!(
            "conv bias: expected [{cout}], found {:?}",
            bias.shape()
        )));
    }
    if h < kh || w < kw {
        return Err(Error::Shape(format!(
            "conv input {h}x{w} smaller than kernel {kh}x{kw}"
        )));
    }
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let row = kw * cin;
    let x = input.data();
    let k = kernels.data();
    let b = bias.data();
    let mut out = vec![T::zero(); oh * ow * cout];
    for y in 0..oh {
        for xo in 0..ow {
            let base = (y * ow + xo) * cout;
            for o in 0..cout {
                let mut acc = b[o];
                for dy in 0..kh {
                    let xi = ((y + dy) * w + xo) * cin;
                    let ki = (o * kh + dy) * row;
                    acc += dot(&x[xi..xi + row], &k[ki..ki + row]);
                }
                out[base + o] = acc;
            }
        }
    }
    Tensor::from_vec(&[oh, ow, cout], out)
}

/// Gradients of a convolution. The input gradient is skipped when
/// `need_input_grad` is false (first layer of a stack).
pub fn conv_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (h, w, cin) = dims3(input, "conv input")?;
    let ks = kernels.shape();
    let (cout, kh, kw) = (ks[0], ks[1], ks[2]);
    let (oh, ow) = (h + 1 - kh, w + 1 - kw);
    grad_out.expect_shape(&[oh, ow, cout])?;
    let row = kw * cin;
    let x = input.data();
    let k = kernels.data();
    let g = grad_out.data();
    let mut gk = vec![T::zero(); k.len()];
    let mut gb = vec![T::zero(); cout];
    let mut gx = if need_input_grad { vec![T::zero(); x.len()] } else { Vec::new() };
    for y in 0..oh {
        for xo in 0..ow {
            let base = (y * ow + xo) * cout;
            for o in 0..cout {
                let go = g[base + o];
                if go == T::zero() {
                    continue;
                }
                gb[o] += go;
                for dy in 0..kh {
                    let xi = ((y + dy) * w + xo) * cin;
                    let ki = (o * kh + dy) * row;
                    axpy(go, &x[xi..xi + row], &mut gk[ki..ki + row]);
                    if need_input_grad {
                        axpy(go, &k[ki..ki + row], &mut gx[xi..xi + row]);
                    }
                }
            }
        }
    }
    let gx = if need_input_grad { Some(Tensor::from_vec(input.shape(), gx)?) } else { None };
    Ok((gx, Tensor::from_vec(ks, gk)?, Tensor::from_vec(&[cout], gb)?))
}

/// Output extent of a pooling window sweep; a partial trailing window is kept
/// when it starts inside the input.
pub fn pooled_extent(n: usize, window: usize, stride: usize) -> usize {
    if n <= window {
        return 1;
    }
    let full = (n - window) / stride + 1;
    let last_end = (full - 1) * stride + window;
    if last_end < n && full * stride < n {
        full + 1
    } else {
        full
    }
}

/// Max pooling. Returns the pooled map and, per output cell, the flat input
/// index of the winning value (first maximum in scan order).
pub fn maxpool_forward<T: Scalar>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (h, w, c) = dims3(input, "maxpool input")?;
    if window == 0 || stride == 0 {
        return Err(Error::Shape("maxpool window and stride must be >= 1".into()));
    }
    let (oh, ow) = (pooled_extent(h, window, stride), pooled_extent(w, window, stride));
    let x = input.data();
    let mut out = vec![T::zero(); oh * ow * c];
    let mut arg = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        let y0 = oy * stride;
        let y1 = (y0 + window).min(h);
        for ox in 0..ow {
            let x0 = ox * stride;
            let x1 = (x0 + window).min(w);
            for ch in 0..c {
                let mut best = T::neg_infinity();
                let mut best_i = (y0 * w + x0) * c + ch;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        let i = (yy * w + xx) * c + ch;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                let o = (oy * ow + ox) * c + ch;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    Ok((Tensor::from_vec(&[oh, ow, c], out)?, arg))
}

/// Routes each upstream gradient to the input position that won the forward max.
pub fn maxpool_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.len() {
        return Err(Error::Shape(format!(
            "maxpool backward: {} argmax entries for {} gradients",
            argmax.len(),
            grad_out.len()
        )));
    }
    let mut gx = Tensor::zeros(input_shape);
    let d = gx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    Ok(gx)
}

pub fn abstanh<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| x.tanh().abs())
}

/// Backward of `|tanh(x)|` given the pre-activation; the subgradient at 0 is 0.
pub fn abstanh_backward<T: Scalar>(pre: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.expect_shape(pre.shape())?;
    let data = pre
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| {
            let t = x.tanh();
            let sign = if t > T::zero() {
                T::one()
            } else if t < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            g * sign * (T::one() - t * t)
        })
        .collect();
    Tensor::from_vec(pre.shape(), data)
}

/// `weights · input + bias`; the input is read as a flat vector.
pub fn dense_forward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (m, n) = match *weights.shape() {
        [m, n] => (m, n),
        ref s => return Err(Error::Shape(format!("dense weights: expected 2-d, found {s:?}"))),
    };
    if input.len() != n {
        return Err(Error::Shape(format!(
            "dense layer expects {n} inputs, found {}",
            input.len()
        )));
    }
    if bias.shape() != [m] {
        return Err(Error::Shape(format!(
            "dense bias: expected [{m}], found {:?}",
            bias.shape()
        )));
    }
    let x = input.data();
    let wd = weights.data();
    let out = (0..m).map(|r| bias.data()[r] + dot(&wd[r * n..(r + 1) * n], x)).collect();
    Ok(Tensor::vector(out))
}

/// Returns `(input grad, weight grad, bias grad)`; the input grad has the input's shape.
pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (m, n) = (weights.shape()[0], weights.shape()[1]);
    if grad_out.len() != m || input.len() != n {
        return Err(Error::Shape(format!(
            "dense backward: weights {m}x{n}, input {}, upstream {}",
            input.len(),
            grad_out.len()
        )));
    }
    let x = input.data();
    let g = grad_out.data();
    let wd = weights.data();
    let mut gw = vec![T::zero(); m * n];
    let mut gx = if need_input_grad { vec![T::zero(); n] } else { Vec::new() };
    for r in 0..m {
        if g[r] == T::zero() {
            continue;
        }
        axpy(g[r], x, &mut gw[r * n..(r + 1) * n]);
        if need_input_grad {
            axpy(g[r], &wd[r * n..(r + 1) * n], &mut gx);
        }
    }
    let gx = if need_input_grad { Some(Tensor::from_vec(input.shape(), gx)?) } else { None };
    Ok((gx, Tensor::from_vec(&[m, n], gw)?, Tensor::vector(g.to_vec())))
}
