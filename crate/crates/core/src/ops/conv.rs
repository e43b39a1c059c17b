//! Dilated "same" convolution, lowered to GEMM.
//!
//! For a `K×K` kernel with dilation `D` the input is zero-padded by
//! `D·(K−1)/2` on every side, so the output keeps the input's `H×W`.
//! Taps whose offset lies entirely outside the image contribute nothing and
//! are dropped from the lowered matrix; at large dilations on small inputs
//! this removes most of the work.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T = f32> {
    /// `OC×IC×K×K`.
    pub weight: Tensor<T>,
    /// Length `OC`.
    pub bias: Tensor<T>,
    pub dilation: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, dilation: usize) -> Result<Self> {
        let p = ConvParams {
            weight,
            bias,
            dilation,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    fn validate(&self) -> Result<()> {
        if self.dilation < 1 {
            return Err(Error::InvalidParameter(format!(
                "dilation must be at least 1, got {}",
                self.dilation
            )));
        }
        let s = self.weight.shape();
        if s.len() != 4 || s[2] != s[3] || s[2] % 2 == 0 {
            return Err(Error::InvalidShape(format!(
                "conv weight must be OC×IC×K×K with odd K, got {s:?}"
            )));
        }
        if self.bias.shape() != [s[0]] {
            return Err(Error::InvalidShape(format!(
                "bias {:?} does not match {} output channels",
                self.bias.shape(),
                s[0]
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        self.validate()?;
        let (c, h, w) = x.chw()?;
        if c != self.in_channels() {
            return Err(Error::InvalidShape(format!(
                "input has {c} channels, kernel expects {}",
                self.in_channels()
            )));
        }
        Ok((c, h, w))
    }
}

/// One kernel tap surviving the bounds test: its flat index in the `K×K`
/// window and its signed pixel offset.
#[derive(Debug, Clone, Copy)]
struct Tap {
    index: usize,
    dy: isize,
    dx: isize,
}

fn live_taps(k: usize, dilation: usize, h: usize, w: usize) -> Vec<Tap> {
    let half = (k / 2) as isize;
    let d = dilation as isize;
    let mut taps = Vec::with_capacity(k * k);
    for ky in 0..k {
        for kx in 0..k {
            let dy = (ky as isize - half) * d;
            let dx = (kx as isize - half) * d;
            if dy.unsigned_abs() < h && dx.unsigned_abs() < w {
                taps.push(Tap {
                    index: ky * k + kx,
                    dy,
                    dx,
                });
            }
        }
    }
    taps
}

/// Valid output columns `[lo, hi)` for a shift `d` along an axis of length `n`.
fn valid_range(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(0) as usize;
    (lo, hi.max(lo))
}

/// Lowers `x` (`C×H×W`) to a `(C·taps)×(H·W)` matrix.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, taps: &[Tap]) -> Vec<T> {
    let hw = h * w;
    let nt = taps.len();
    let mut cols = vec![T::zero(); c * nt * hw];
    cols.par_chunks_mut(nt * hw)
        .enumerate()
        .for_each(|(ic, block)| {
            let plane = &x[ic * hw..(ic + 1) * hw];
            for (t, tap) in taps.iter().enumerate() {
                let row = &mut block[t * hw..(t + 1) * hw];
                let (x0, x1) = valid_range(tap.dx, w);
                let (y0, y1) = valid_range(tap.dy, h);
                for y in y0..y1 {
                    let sy = (y as isize + tap.dy) as usize;
                    let src = sy * w;
                    let sx0 = (x0 as isize + tap.dx) as usize;
                    row[y * w + x0..y * w + x1]
                        .copy_from_slice(&plane[src + sx0..src + sx0 + (x1 - x0)]);
                }
            }
        });
    cols
}

/// Scatter-adds a lowered gradient back onto `C×H×W`.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, taps: &[Tap]) -> Vec<T> {
    let hw = h * w;
    let nt = taps.len();
    let mut out = vec![T::zero(); c * hw];
    out.par_chunks_mut(hw).enumerate().for_each(|(ic, plane)| {
        let block = &cols[ic * nt * hw..(ic + 1) * nt * hw];
        for (t, tap) in taps.iter().enumerate() {
            let row = &block[t * hw..(t + 1) * hw];
            let (x0, x1) = valid_range(tap.dx, w);
            let (y0, y1) = valid_range(tap.dy, h);
            for y in y0..y1 {
                let sy = (y as isize + tap.dy) as usize;
                let sx0 = (x0 as isize + tap.dx) as usize;
                let dst = &mut plane[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                for (d, &g) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                    *d += g;
                }
            }
        }
    });
    out
}

/// Weight matrix restricted to live taps, `OC×(IC·taps)`. Borrowed when
/// every tap is live.
fn gather_weight<'a, T: Scalar>(
    p: &'a ConvParams<T>,
    taps: &[Tap],
) -> std::borrow::Cow<'a, [T]> {
    let kk = p.kernel_size() * p.kernel_size();
    if taps.len() == kk {
        return std::borrow::Cow::Borrowed(p.weight.data());
    }
    let (oc, ic) = (p.out_channels(), p.in_channels());
    let w = p.weight.data();
    let mut g = Vec::with_capacity(oc * ic * taps.len());
    for o in 0..oc {
        for i in 0..ic {
            let base = (o * ic + i) * kk;
            g.extend(taps.iter().map(|t| w[base + t.index]));
        }
    }
    std::borrow::Cow::Owned(g)
}

pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let (c, h, w) = p.check_input(x)?;
    let oc = p.out_channels();
    let hw = h * w;
    let mut out = Vec::with_capacity(oc * hw);
    for &b in p.bias.data() {
        out.extend(std::iter::repeat_n(b, hw));
    }
    if p.kernel_size() == 1 {
        T::gemm(
            oc,
            c,
            hw,
            p.weight.data(),
            (c as isize, 1),
            x.data(),
            (hw as isize, 1),
            T::one(),
            &mut out,
        );
    } else {
        let taps = live_taps(p.kernel_size(), p.dilation, h, w);
        let k = c * taps.len();
        let cols = im2col(x.data(), c, h, w, &taps);
        let wg = gather_weight(p, &taps);
        T::gemm(
            oc,
            k,
            hw,
            &wg,
            (k as isize, 1),
            &cols,
            (hw as isize, 1),
            T::one(),
            &mut out,
        );
    }
    Tensor::from_vec(&[oc, h, w], out)
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (c, h, w) = p.check_input(x)?;
    let oc = p.out_channels();
    if grad_out.shape() != [oc, h, w] {
        return Err(Error::InvalidShape(format!(
            "grad_out {:?} does not match forward output [{oc}, {h}, {w}]",
            grad_out.shape()
        )));
    }
    let hw = h * w;
    let g = grad_out.data();
    let grad_bias: Vec<T> = g.chunks_exact(hw).map(|row| row.iter().copied().sum()).collect();
    let ks = p.kernel_size();
    let kk = ks * ks;

    let (grad_input, grad_weight) = if ks == 1 {
        let mut gw = vec![T::zero(); oc * c];
        // gW = gOut · Xᵀ
        T::gemm(oc, hw, c, g, (hw as isize, 1), x.data(), (1, hw as isize), T::zero(), &mut gw);
        let mut gx = vec![T::zero(); c * hw];
        // gX = Wᵀ · gOut
        T::gemm(
            c,
            oc,
            hw,
            p.weight.data(),
            (1, c as isize),
            g,
            (hw as isize, 1),
            T::zero(),
            &mut gx,
        );
        (gx, gw)
    } else {
        let taps = live_taps(ks, p.dilation, h, w);
        let k = c * taps.len();
        let cols = im2col(x.data(), c, h, w, &taps);
        let mut gwg = vec![T::zero(); oc * k];
        T::gemm(oc, hw, k, g, (hw as isize, 1), &cols, (1, hw as isize), T::zero(), &mut gwg);
        let wg = gather_weight(p, &taps);
        let mut gcols = vec![T::zero(); k * hw];
        T::gemm(k, oc, hw, &wg, (1, k as isize), g, (hw as isize, 1), T::zero(), &mut gcols);
        let gx = col2im(&gcols, c, h, w, &taps);
        let gw = if taps.len() == kk {
            gwg
        } else {
            let mut full = vec![T::zero(); oc * c * kk];
            for o in 0..oc {
                for i in 0..c {
                    for (t, tap) in taps.iter().enumerate() {
                        full[(o * c + i) * kk + tap.index] = gwg[(o * c + i) * taps.len() + t];
                    }
                }
            }
            full
        };
        (gx, gw)
    };

    Ok(ConvGrads {
        input: Tensor::from_vec(&[c, h, w], grad_input)?,
        weight: Tensor::from_vec(p.weight.shape(), grad_weight)?,
        bias: Tensor::from_vec(&[oc], grad_bias)?,
    })
}

fn require_kernel<T: Scalar>(p: &ConvParams<T>, k: usize) -> Result<()> {
    if p.kernel_size() != k {
        return Err(Error::InvalidShape(format!(
            "expected a {k}×{k} kernel, got {:?}",
            p.weight.shape()
        )));
    }
    Ok(())
}

/// 3×3 dilated convolution with "same" zero padding of width `D`.
pub fn dilated_conv2d_forward<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    require_kernel(p, 3)?;
    conv2d_forward(x, p)
}

pub fn dilated_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    require_kernel(p, 3)?;
    conv2d_backward(x, p, grad_out)
}

/// Per-pixel affine map across channels.
pub fn conv1x1_forward<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    require_kernel(p, 1)?;
    conv2d_forward(x, p)
}

pub fn conv1x1_backward<T: Scalar>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    require_kernel(p, 1)?;
    conv2d_backward(x, p, grad_out)
}
