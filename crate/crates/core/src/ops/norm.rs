//! Instance normalization and the conv block built around it.
//!
//! Statistics are always those of the current input (per channel, population
//! variance), at training and at inference time alike.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ops::activation::{relu_backward, relu_forward};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> NormParams<T> {
    /// `gamma = 1`, `beta = 0`.
    pub fn identity(channels: usize) -> Result<Self> {
        Ok(NormParams {
            gamma: Tensor::alloc(&[channels], T::one())?,
            beta: Tensor::zeros(&[channels])?,
            eps: DEFAULT_EPS,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, c: usize) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "norm eps must be positive, got {}",
                self.eps
            )));
        }
        if self.gamma.shape() != [c] || self.beta.shape() != [c] {
            return Err(Error::InvalidShape(format!(
                "norm params {:?}/{:?} do not match {c} channels",
                self.gamma.shape(),
                self.beta.shape()
            )));
        }
        Ok(())
    }
}

/// What the backward pass needs from an instance-norm forward.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    /// `(x − μ)/σ`, before the affine map.
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct NormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn instance_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &NormParams<T>,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let (c, h, w) = x.chw()?;
    p.check(c)?;
    let hw = h * w;
    let mut normalized = x.zeros_like();
    let mut out = x.zeros_like();
    let inv_std: Vec<T> = normalized
        .data_mut()
        .par_chunks_mut(hw)
        .zip(out.data_mut().par_chunks_mut(hw))
        .enumerate()
        .map(|(ch, (xhat, y))| {
            let src = x.channel(ch);
            let n = hw as f64;
            let mean = src.iter().map(|v| v.as_f64()).sum::<f64>() / n;
            let var = src
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            let inv = 1.0 / (var + p.eps).sqrt();
            let (g, b) = (p.gamma.data()[ch], p.beta.data()[ch]);
            let (mean_t, inv_t) = (T::from_f64(mean), T::from_f64(inv));
            for ((xh, yo), &v) in xhat.iter_mut().zip(y.iter_mut()).zip(src) {
                *xh = (v - mean_t) * inv_t;
                *yo = g * *xh + b;
            }
            inv_t
        })
        .collect();
    Ok((
        out,
        NormCache {
            normalized,
            inv_std,
        },
    ))
}

pub fn instance_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    p: &NormParams<T>,
    grad_out: &Tensor<T>,
) -> Result<NormGrads<T>> {
    let (c, h, w) = cache.normalized.chw()?;
    p.check(c)?;
    if grad_out.shape() != cache.normalized.shape() {
        return Err(Error::InvalidShape(format!(
            "grad_out {:?} vs forward {:?}",
            grad_out.shape(),
            cache.normalized.shape()
        )));
    }
    let hw = h * w;
    let n = T::from_f64(hw as f64);
    let mut gx = grad_out.zeros_like();
    let sums: Vec<(T, T)> = gx
        .data_mut()
        .par_chunks_mut(hw)
        .enumerate()
        .map(|(ch, dst)| {
            let g = grad_out.channel(ch);
            let xhat = cache.normalized.channel(ch);
            let gamma = p.gamma.data()[ch];
            let sum_g: f64 = g.iter().map(|v| v.as_f64()).sum();
            let sum_gx: f64 = g.iter().zip(xhat).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
            let (sg, sgx) = (T::from_f64(sum_g), T::from_f64(sum_gx));
            // dx = γ·inv/N · (N·g − Σg − x̂·Σ(g·x̂))
            let scale = gamma * cache.inv_std[ch] / n;
            for ((d, &gi), &xh) in dst.iter_mut().zip(g).zip(xhat) {
                *d = scale * (n * gi - sg - xh * sgx);
            }
            (sgx, sg)
        })
        .collect();
    let (gg, gb): (Vec<T>, Vec<T>) = sums.into_iter().unzip();
    Ok(NormGrads {
        input: gx,
        gamma: Tensor::from_vec(&[c], gg)?,
        beta: Tensor::from_vec(&[c], gb)?,
    })
}

/// How a block post-processes its convolution output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    /// `relu(a + IN(a))`.
    NormSkip,
    /// `relu(IN(a))`.
    Norm,
    /// `relu(a)`.
    Plain,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    kind: BlockKind,
    norm: Option<NormCache<T>>,
    /// Block output; its sign pattern is the ReLU mask.
    pub output: Tensor<T>,
}

impl<T: Scalar> BlockCache<T> {
    /// Pre-activation sign pattern, used to detect ReLU kink crossings.
    pub fn active(&self) -> impl Iterator<Item = bool> + '_ {
        self.output.data().iter().map(|&v| v > T::zero())
    }
}

pub fn block_forward<T: Scalar>(
    a: &Tensor<T>,
    norm: Option<&NormParams<T>>,
    kind: BlockKind,
) -> Result<(Tensor<T>, BlockCache<T>)> {
    let (pre, norm_cache) = match (kind, norm) {
        (BlockKind::Plain, _) => (a.clone(), None),
        (BlockKind::Norm, Some(p)) => {
            let (n, cache) = instance_norm_forward(a, p)?;
            (n, Some(cache))
        }
        (BlockKind::NormSkip, Some(p)) => {
            let (mut n, cache) = instance_norm_forward(a, p)?;
            n.add_assign(a)?;
            (n, Some(cache))
        }
        (_, None) => {
            return Err(Error::InvalidParameter(format!(
                "{kind:?} block needs norm params"
            )))
        }
    };
    let output = relu_forward(&pre);
    Ok((
        output.clone(),
        BlockCache {
            kind,
            norm: norm_cache,
            output,
        },
    ))
}

/// Returns `(grad wrt a, optional (grad gamma, grad beta))`.
#[allow(clippy::type_complexity)]
pub fn block_backward<T: Scalar>(
    cache: &BlockCache<T>,
    norm: Option<&NormParams<T>>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Option<(Tensor<T>, Tensor<T>)>)> {
    let g_pre = relu_backward(&cache.output, grad_out)?;
    match (cache.kind, norm, &cache.norm) {
        (BlockKind::Plain, _, _) => Ok((g_pre, None)),
        (BlockKind::Norm, Some(p), Some(nc)) => {
            let g = instance_norm_backward(nc, p, &g_pre)?;
            Ok((g.input, Some((g.gamma, g.beta))))
        }
        (BlockKind::NormSkip, Some(p), Some(nc)) => {
            let mut g = instance_norm_backward(nc, p, &g_pre)?;
            g.input.add_assign(&g_pre)?;
            Ok((g.input, Some((g.gamma, g.beta))))
        }
        _ => Err(Error::InvalidParameter(
            "block backward needs the norm params used in forward".into(),
        )),
    }
}

/// `relu(x + IN(x))`, the block applied after every convolution.
pub fn norm_skip_block_forward<T: Scalar>(
    x_conv: &Tensor<T>,
    p: &NormParams<T>,
) -> Result<(Tensor<T>, BlockCache<T>)> {
    block_forward(x_conv, Some(p), BlockKind::NormSkip)
}

pub fn norm_skip_block_backward<T: Scalar>(
    cache: &BlockCache<T>,
    p: &NormParams<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (gx, gp) = block_backward(cache, Some(p), grad_out)?;
    let (gg, gb) = gp.expect("norm-skip block always has norm grads");
    Ok((gx, gg, gb))
}
