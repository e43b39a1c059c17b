use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = v.max(T::zero());
    }
    y
}

/// Passes `grad` where `x > 0`; the subgradient at 0 is 0. `x` may be the
/// ReLU input or its output, the mask is the same.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != grad.shape() {
        return Err(Error::InvalidShape(format!(
            "relu backward: {:?} vs {:?}",
            x.shape(),
            grad.shape()
        )));
    }
    let mut g = grad.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv <= T::zero() {
            *gv = T::zero();
        }
    }
    Ok(g)
}

/// Inverted-dropout mask: survivors are scaled by `1/(1−rate)` at train time.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub keep: Vec<bool>,
    pub scale: f64,
}

impl DropoutMask {
    pub fn keep_fraction(&self) -> f64 {
        self.keep.iter().filter(|&&k| k).count() as f64 / self.keep.len().max(1) as f64
    }
}

pub fn dropout_forward<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor<T>, DropoutMask)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidParameter(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    if mode == Mode::Eval || rate == 0.0 {
        let mask = DropoutMask {
            keep: vec![true; x.len()],
            scale: 1.0,
        };
        return Ok((x.clone(), mask));
    }
    let scale = 1.0 / (1.0 - rate);
    let keep: Vec<bool> = (0..x.len()).map(|_| rng.random::<f64>() >= rate).collect();
    let s = T::from_f64(scale);
    let mut y = x.clone();
    for (v, &k) in y.data_mut().iter_mut().zip(&keep) {
        *v = if k { *v * s } else { T::zero() };
    }
    Ok((y, DropoutMask { keep, scale }))
}

pub fn dropout_backward<T: Scalar>(mask: &DropoutMask, grad: &Tensor<T>) -> Result<Tensor<T>> {
    if mask.keep.len() != grad.len() {
        return Err(Error::InvalidShape(format!(
            "dropout mask of {} vs gradient of {}",
            mask.keep.len(),
            grad.len()
        )));
    }
    let s = T::from_f64(mask.scale);
    let mut g = grad.clone();
    for (v, &k) in g.data_mut().iter_mut().zip(&mask.keep) {
        *v = if k { *v * s } else { T::zero() };
    }
    Ok(g)
}

/// Stacks `C_i×H×W` maps along the channel axis, in argument order.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidShape("concat of zero tensors".into()))?;
    let (_, h, w) = first.chw()?;
    let mut total = 0;
    for p in parts {
        let (c, ph, pw) = p.chw()?;
        if (ph, pw) != (h, w) {
            return Err(Error::InvalidShape(format!(
                "concat: spatial size {ph}×{pw} differs from {h}×{w}"
            )));
        }
        total += c;
    }
    let mut data = Vec::with_capacity(total * h * w);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(&[total, h, w], data)
}

/// Inverse of [`concat_channels`]: slices a gradient back into parts.
pub fn split_channels<T: Scalar>(grad: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (c, h, w) = grad.chw()?;
    if channels.iter().sum::<usize>() != c {
        return Err(Error::InvalidShape(format!(
            "split {channels:?} does not add up to {c} channels"
        )));
    }
    let hw = h * w;
    let mut off = 0;
    channels
        .iter()
        .map(|&n| {
            let t = Tensor::from_vec(&[n, h, w], grad.data()[off * hw..(off + n) * hw].to_vec());
            off += n;
            t
        })
        .collect()
}

/// Per-pixel softmax over channels, shifted by the channel maximum.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    let hw = h * w;
    let src = x.data();
    let mut out = x.zeros_like();
    let dst = out.data_mut();
    let mut max = vec![T::neg_infinity(); hw];
    for ch in 0..c {
        for (m, &v) in max.iter_mut().zip(&src[ch * hw..(ch + 1) * hw]) {
            *m = m.max(v);
        }
    }
    let mut sum = vec![T::zero(); hw];
    for ch in 0..c {
        let row = &mut dst[ch * hw..(ch + 1) * hw];
        for (i, (o, &v)) in row.iter_mut().zip(&src[ch * hw..(ch + 1) * hw]).enumerate() {
            *o = (v - max[i]).exp();
            sum[i] += *o;
        }
    }
    for ch in 0..c {
        for (o, &s) in dst[ch * hw..(ch + 1) * hw].iter_mut().zip(&sum) {
            *o = *o / s;
        }
    }
    out.check_finite("softmax")?;
    Ok(out)
}

/// Gradient wrt logits given probabilities and the gradient wrt them:
/// `g_z = p ⊙ (g_p − Σ_k p_k g_p,k)` per pixel.
pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, grad_probs: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = probs.chw()?;
    if grad_probs.shape() != probs.shape() {
        return Err(Error::InvalidShape(format!(
            "softmax backward: {:?} vs {:?}",
            grad_probs.shape(),
            probs.shape()
        )));
    }
    let hw = h * w;
    let (p, g) = (probs.data(), grad_probs.data());
    let mut dot = vec![T::zero(); hw];
    for ch in 0..c {
        for (i, d) in dot.iter_mut().enumerate() {
            *d += p[ch * hw + i] * g[ch * hw + i];
        }
    }
    let mut out = probs.zeros_like();
    for (j, o) in out.data_mut().iter_mut().enumerate() {
        *o = p[j] * (g[j] - dot[j % hw]);
    }
    Ok(out)
}
