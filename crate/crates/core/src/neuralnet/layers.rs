//! Forward and backward passes of the individual layers.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::rng::KeyedRng;
use crate::{Error, Result};

/// Whether stochastic layers are live.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Training pass; `seed` keys the dropout masks.
    Train { seed: u64 },
    Eval,
}

/// `floor((size + 2 * pad - kernel) / stride) + 1`, or `None` when the kernel
/// does not fit.
pub fn conv_output_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn shape4(t: &[usize], what: &str) -> Result<[usize; 4]> {
    match t {
        &[a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::Dimension(alloc::format!("{what} must be 4-d, got {t:?}"))),
    }
}

struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn conv_geom(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<ConvGeom> {
    let [_, c, h, wd] = shape4(x, "conv input")?;
    let [_, wc, kh, kw] = shape4(w, "conv weights")?;
    if wc != c {
        return Err(Error::Dimension(alloc::format!(
            "conv weights expect {wc} input channels, input has {c}"
        )));
    }
    if kh != kw {
        return Err(Error::Dimension(alloc::format!("kernel must be square, got {kh}x{kw}")));
    }
    let out_h = conv_output_size(h, kh, stride, pad)
        .ok_or_else(|| Error::Dimension(alloc::format!("kernel {kh} does not fit height {h}")))?;
    let out_w = conv_output_size(wd, kw, stride, pad)
        .ok_or_else(|| Error::Dimension(alloc::format!("kernel {kw} does not fit width {wd}")))?;
    Ok(ConvGeom { channels: c, height: h, width: wd, kernel: kh, stride, pad, out_h, out_w })
}

/// Unfolds one image `[C, H, W]` into `[C*k*k, OH*OW]`.
fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, col: &mut [T]) {
    let cols = g.cols();
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.width as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adds a `[C*k*k, OH*OW]` column buffer back into an image gradient.
fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, img: &mut [T]) {
    let cols = g.cols();
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2D cross-correlation with zero padding.
///
/// `x` is `[N, C, H, W]`, `weights` is `[O, C, k, k]` and `bias` has `O`
/// entries. The output is `[N, O, OH, OW]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &[T],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geom(x.shape(), weights.shape(), stride, pad)?;
    let n = x.shape()[0];
    let maps = weights.shape()[0];
    if bias.len() != maps {
        return Err(Error::Dimension(alloc::format!("bias has {} entries, expected {maps}", bias.len())));
    }
    let (rows, cols) = (g.rows(), g.cols());
    let in_len = g.channels * g.height * g.width;
    let mut col = vec![T::zero(); rows * cols];
    let mut out = vec![T::zero(); n * maps * cols];
    let wdata = weights.data();
    for b in 0..n {
        im2col(&x.data()[b * in_len..(b + 1) * in_len], &g, &mut col);
        let dst = &mut out[b * maps * cols..(b + 1) * maps * cols];
        for o in 0..maps {
            let orow = &mut dst[o * cols..(o + 1) * cols];
            orow.fill(bias[o]);
            let wrow = &wdata[o * rows..(o + 1) * rows];
            for (r, &wv) in wrow.iter().enumerate() {
                let crow = &col[r * cols..(r + 1) * cols];
                for (acc, &cv) in orow.iter_mut().zip(crow) {
                    *acc += wv * cv;
                }
            }
        }
    }
    Tensor::new(vec![n, maps, g.out_h, g.out_w], out)
}

/// Gradients of [`conv2d_forward`] with respect to input, weights and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let g = conv_geom(x.shape(), weights.shape(), stride, pad)?;
    let n = x.shape()[0];
    let maps = weights.shape()[0];
    let expect = [n, maps, g.out_h, g.out_w];
    if grad_out.shape() != expect {
        return Err(Error::Dimension(alloc::format!(
            "conv output gradient has shape {:?}, expected {:?}",
            grad_out.shape(),
            expect
        )));
    }
    let (rows, cols) = (g.rows(), g.cols());
    let in_len = g.channels * g.height * g.width;
    let mut col = vec![T::zero(); rows * cols];
    let mut gcol = vec![T::zero(); rows * cols];
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); weights.len()];
    let mut gb = vec![T::zero(); maps];
    let wdata = weights.data();
    for b in 0..n {
        im2col(&x.data()[b * in_len..(b + 1) * in_len], &g, &mut col);
        let gout = &grad_out.data()[b * maps * cols..(b + 1) * maps * cols];
        gcol.fill(T::zero());
        for o in 0..maps {
            let grow = &gout[o * cols..(o + 1) * cols];
            gb[o] += grow.iter().copied().sum::<T>();
            let gwrow = &mut gw[o * rows..(o + 1) * rows];
            let wrow = &wdata[o * rows..(o + 1) * rows];
            for r in 0..rows {
                let crow = &col[r * cols..(r + 1) * cols];
                let mut acc = T::zero();
                for (&gv, &cv) in grow.iter().zip(crow) {
                    acc += gv * cv;
                }
                gwrow[r] += acc;
                let wv = wrow[r];
                let gcrow = &mut gcol[r * cols..(r + 1) * cols];
                for (gc, &gv) in gcrow.iter_mut().zip(grow) {
                    *gc += wv * gv;
                }
            }
        }
        col2im(&gcol, &g, &mut gx[b * in_len..(b + 1) * in_len]);
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(weights.shape().to_vec(), gw)?,
        gb,
    ))
}

fn dense_dims<T: Scalar>(x: &Tensor<T>, weights: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (&[n, inp], &[out, win]) = (x.shape(), weights.shape()) else {
        return Err(Error::Dimension(alloc::format!(
            "dense expects 2-d input and weights, got {:?} and {:?}",
            x.shape(),
            weights.shape()
        )));
    };
    if inp != win {
        return Err(Error::Dimension(alloc::format!("dense weights take {win} inputs, got {inp}")));
    }
    Ok((n, inp, out))
}

/// `y = x Wᵀ + b` with `x: [N, in]`, `W: [out, in]`.
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, weights: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let (n, inp, out) = dense_dims(x, weights)?;
    if bias.len() != out {
        return Err(Error::Dimension(alloc::format!("bias has {} entries, expected {out}", bias.len())));
    }
    let mut y = Vec::with_capacity(n * out);
    for row in x.data().chunks_exact(inp) {
        for (o, wrow) in weights.data().chunks_exact(inp).enumerate() {
            let mut acc = bias[o];
            for (&a, &b) in row.iter().zip(wrow) {
                acc += a * b;
            }
            y.push(acc);
        }
    }
    Tensor::new(vec![n, out], y)
}

pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let (n, inp, out) = dense_dims(x, weights)?;
    if grad_out.shape() != [n, out] {
        return Err(Error::Dimension(alloc::format!(
            "dense output gradient has shape {:?}, expected [{n}, {out}]",
            grad_out.shape()
        )));
    }
    let mut gx = vec![T::zero(); n * inp];
    let mut gw = vec![T::zero(); out * inp];
    let mut gb = vec![T::zero(); out];
    for b in 0..n {
        let xrow = &x.data()[b * inp..(b + 1) * inp];
        let grow = &grad_out.data()[b * out..(b + 1) * out];
        let gxrow = &mut gx[b * inp..(b + 1) * inp];
        for o in 0..out {
            let g = grow[o];
            gb[o] += g;
            let wrow = &weights.data()[o * inp..(o + 1) * inp];
            let gwrow = &mut gw[o * inp..(o + 1) * inp];
            for i in 0..inp {
                gwrow[i] += g * xrow[i];
                gxrow[i] += g * wrow[i];
            }
        }
    }
    Ok((Tensor::new(vec![n, inp], gx)?, Tensor::new(vec![out, inp], gw)?, gb))
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes gradient where the forward input was positive.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != grad_out.shape() {
        return Err(Error::Dimension(alloc::format!(
            "relu gradient shape {:?} does not match input {:?}",
            grad_out.shape(),
            x.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// `[N, ...] -> [N, prod(...)]`.
pub fn flatten<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = *x.shape().first().ok_or_else(|| Error::Dimension("cannot flatten a 0-d tensor".into()))?;
    let rest = x.shape()[1..].iter().product();
    x.clone().reshape(vec![n, rest])
}

pub fn flatten_backward<T: Scalar>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    grad_out.clone().reshape(input_shape.to_vec())
}

/// Inverted dropout. In training, each unit is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`; the returned mask
/// holds the per-unit multiplier. Evaluation is the identity.
pub fn dropout_forward<T: Scalar>(x: &Tensor<T>, rate: f64, phase: Phase) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(alloc::format!("dropout rate {rate} must lie in [0, 1)")));
    }
    match phase {
        Phase::Eval => Ok((x.clone(), None)),
        Phase::Train { .. } if rate == 0.0 => Ok((x.clone(), None)),
        Phase::Train { seed } => {
            let mut rng = KeyedRng::new(seed, 0xD40F);
            let keep = T::of(1.0 / (1.0 - rate));
            let mask: Vec<T> = (0..x.len())
                .map(|_| if rng.unit() < rate { T::zero() } else { keep })
                .collect();
            let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            Ok((Tensor::new(x.shape().to_vec(), data)?, Some(mask)))
        }
    }
}

pub fn dropout_backward<T: Scalar>(grad_out: &Tensor<T>, mask: Option<&[T]>) -> Tensor<T> {
    match mask {
        None => grad_out.clone(),
        Some(m) => Tensor::new(
            grad_out.shape().to_vec(),
            grad_out.data().iter().zip(m).map(|(&g, &k)| g * k).collect(),
        )
        .expect("mask matches gradient"),
    }
}
