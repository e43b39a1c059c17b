//! The dilated fully-convolutional network.
//!
//! ```text
//! input ─► input block ─► z0 ─► [conv D1 ─► block] ─► z1 ─► … ─► zL
//!                          └───────────┬─────────────────┘
//!                          concat(z0, z1, …, zL) ─► dropout
//!                          ─► 1×1 ─► block ─► 1×1 ─► block ─► 1×1 ─► softmax
//! ```
//!
//! The input block is `x + IN(x)` (or `IN(x)`, or `x`, following the norm
//! mode) with no activation. Without concatenation the head reads `zL` only.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::config::{NetworkConfig, NormMode};
use crate::ops::{
    block_backward, block_forward, concat_channels, conv2d_backward, conv2d_forward,
    dropout_backward, dropout_forward, instance_norm_backward, instance_norm_forward,
    softmax_backward, softmax_channels, split_channels, BlockCache, BlockKind, ConvParams,
    DropoutMask, Mode, NormCache, NormParams,
};
use crate::rng::{self, Stream};
use crate::tensor::{LabelMap, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T = f32> {
    pub conv: ConvParams<T>,
    pub norm: Option<NormParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = f32> {
    pub config: NetworkConfig,
    pub seed: u64,
    pub input_norm: Option<NormParams<T>>,
    pub dilated: Vec<Layer<T>>,
    /// 1×1 layers; the last one produces class logits and has no norm.
    pub head: Vec<Layer<T>>,
}

/// Parameter gradients, aligned with [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T = f32> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn is_all_zero(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data().iter().all(|v| *v == T::zero()))
    }

    pub fn check_finite(&self) -> Result<()> {
        self.tensors
            .iter()
            .try_for_each(|t| t.check_finite("gradient"))
    }
}

fn block_kind(mode: NormMode) -> BlockKind {
    match mode {
        NormMode::InstanceNormSkip => BlockKind::NormSkip,
        NormMode::InstanceNorm => BlockKind::Norm,
        NormMode::None => BlockKind::Plain,
    }
}

fn init_conv<R: Rng>(
    out_ch: usize,
    in_ch: usize,
    k: usize,
    dilation: usize,
    rng: &mut R,
) -> Result<ConvParams<f32>> {
    let fan_in = (in_ch * k * k) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt())
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let n = out_ch * in_ch * k * k;
    let w: Vec<f32> = (0..n).map(|_| normal.sample(rng) as f32).collect();
    ConvParams::new(
        Tensor::from_vec(&[out_ch, in_ch, k, k], w)?,
        Tensor::zeros(&[out_ch])?,
        dilation,
    )
}

impl Network<f32> {
    /// Builds and initialises a network; deterministic in `seed`.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Stream::Init);
        let normed = config.norm_mode != NormMode::None;
        let norm = |c: usize| -> Result<Option<NormParams<f32>>> {
            if normed {
                Ok(Some(NormParams::identity(c)?))
            } else {
                Ok(None)
            }
        };
        let k = config.kernels_per_layer;
        let mut dilated = Vec::with_capacity(config.num_dilated_layers);
        let mut in_ch = 1;
        for d in config.dilations() {
            dilated.push(Layer {
                conv: init_conv(k, in_ch, 3, d, &mut rng)?,
                norm: norm(k)?,
            });
            in_ch = k;
        }
        let mut head = Vec::with_capacity(config.head_widths.len() + 1);
        let mut in_ch = config.head_input_channels();
        for &width in &config.head_widths {
            head.push(Layer {
                conv: init_conv(width, in_ch, 1, 1, &mut rng)?,
                norm: norm(width)?,
            });
            in_ch = width;
        }
        head.push(Layer {
            conv: init_conv(config.num_classes, in_ch, 1, 1, &mut rng)?,
            norm: None,
        });
        Ok(Network {
            config: config.clone(),
            seed,
            input_norm: norm(1)?,
            dilated,
            head,
        })
    }
}

/// Activations kept by [`Network::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    input: Tensor<T>,
    input_norm: Option<NormCache<T>>,
    z0: Tensor<T>,
    dilated: Vec<BlockCache<T>>,
    concat_parts: Vec<usize>,
    dropout: DropoutMask,
    head_input: Tensor<T>,
    head: Vec<BlockCache<T>>,
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Sign pattern of every ReLU input, in layer order.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.dilated
            .iter()
            .chain(&self.head)
            .flat_map(|b| b.active())
            .collect()
    }

    pub fn dropout_mask(&self) -> &DropoutMask {
        &self.dropout
    }
}

impl<T: Scalar> Network<T> {
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let norm = |n: &NormParams<T>| NormParams {
            gamma: n.gamma.cast(),
            beta: n.beta.cast(),
            eps: n.eps,
        };
        let layer = |l: &Layer<T>| Layer {
            conv: ConvParams {
                weight: l.conv.weight.cast(),
                bias: l.conv.bias.cast(),
                dilation: l.conv.dilation,
            },
            norm: l.norm.as_ref().map(norm),
        };
        Network {
            config: self.config.clone(),
            seed: self.seed,
            input_norm: self.input_norm.as_ref().map(norm),
            dilated: self.dilated.iter().map(layer).collect(),
            head: self.head.iter().map(layer).collect(),
        }
    }

    /// Named parameter tensors in a fixed order.
    pub fn params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(n) = &self.input_norm {
            out.push(("input_norm.gamma".to_string(), &n.gamma));
            out.push(("input_norm.beta".to_string(), &n.beta));
        }
        for (group, layers) in [("dilated", &self.dilated), ("head", &self.head)] {
            for (i, l) in layers.iter().enumerate() {
                out.push((format!("{group}.{i}.weight"), &l.conv.weight));
                out.push((format!("{group}.{i}.bias"), &l.conv.bias));
                if let Some(n) = &l.norm {
                    out.push((format!("{group}.{i}.gamma"), &n.gamma));
                    out.push((format!("{group}.{i}.beta"), &n.beta));
                }
            }
        }
        out
    }

    /// Same order as [`Network::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        if let Some(n) = &mut self.input_norm {
            out.push(&mut n.gamma);
            out.push(&mut n.beta);
        }
        for l in self.dilated.iter_mut().chain(self.head.iter_mut()) {
            out.push(&mut l.conv.weight);
            out.push(&mut l.conv.bias);
            if let Some(n) = &mut l.norm {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    fn kind(&self) -> BlockKind {
        block_kind(self.config.norm_mode)
    }

    /// Runs the network on a `1×H×W` image and returns per-pixel class
    /// probabilities with the cache needed by [`Network::backward`].
    pub fn forward<R: Rng + ?Sized>(
        &self,
        image: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let (c, _, _) = image.chw()?;
        if c != 1 {
            return Err(Error::InvalidShape(format!(
                "network input must be single-channel, got {c} channels"
            )));
        }
        let (z0, input_norm) = match (&self.input_norm, self.config.norm_mode) {
            (Some(p), NormMode::InstanceNormSkip) => {
                let (mut n, cache) = instance_norm_forward(image, p)?;
                n.add_assign(image)?;
                (n, Some(cache))
            }
            (Some(p), NormMode::InstanceNorm) => {
                let (n, cache) = instance_norm_forward(image, p)?;
                (n, Some(cache))
            }
            _ => (image.clone(), None),
        };
        let kind = self.kind();

        let mut dilated = Vec::with_capacity(self.dilated.len());
        let mut x = &z0;
        for layer in &self.dilated {
            let a = conv2d_forward(x, &layer.conv)?;
            let (_, cache) = block_forward(&a, layer.norm.as_ref(), kind)?;
            dilated.push(cache);
            x = &dilated.last().expect("just pushed").output;
        }

        let (features, concat_parts) = if self.config.concat_enabled {
            let mut parts = vec![&z0];
            parts.extend(dilated.iter().map(|b| &b.output));
            let sizes = parts.iter().map(|t| t.shape()[0]).collect();
            (concat_channels(&parts)?, sizes)
        } else {
            let last = &dilated.last().expect("at least one dilated layer").output;
            (last.clone(), vec![last.shape()[0]])
        };
        let (head_input, dropout) =
            dropout_forward(&features, self.config.dropout_rate, mode, rng)?;

        let (last, hidden) = self.head.split_last().expect("head has a class layer");
        let mut head = Vec::with_capacity(hidden.len());
        let mut x = &head_input;
        for layer in hidden {
            let a = conv2d_forward(x, &layer.conv)?;
            let (_, cache) = block_forward(&a, layer.norm.as_ref(), kind)?;
            head.push(cache);
            x = &head.last().expect("just pushed").output;
        }
        let logits = conv2d_forward(x, &last.conv)?;
        logits.check_finite("logits")?;
        let probs = softmax_channels(&logits)?;
        let cache = ForwardCache {
            input: image.clone(),
            input_norm,
            z0,
            dilated,
            concat_parts,
            dropout,
            head_input,
            head,
            logits,
            probs: probs.clone(),
        };
        Ok((probs, cache))
    }

    /// Deterministic inference; no dropout.
    pub fn predict_probs(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut unused = rng::stream(0, Stream::Dropout);
        Ok(self.forward(image, Mode::Eval, &mut unused)?.0)
    }

    /// Gradients of a scalar loss given `∂loss/∂probs`.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_probs: &Tensor<T>,
    ) -> Result<(Gradients<T>, Tensor<T>)> {
        let grad_logits = softmax_backward(&cache.probs, grad_probs)?;
        self.backward_logits(cache, &grad_logits)
    }

    /// Gradients of a scalar loss given `∂loss/∂logits`; also returns the
    /// gradient with respect to the input image.
    pub fn backward_logits(
        &self,
        cache: &ForwardCache<T>,
        grad_logits: &Tensor<T>,
    ) -> Result<(Gradients<T>, Tensor<T>)> {
        if grad_logits.shape() != cache.logits.shape() {
            return Err(Error::InvalidShape(format!(
                "grad_logits {:?} vs logits {:?}",
                grad_logits.shape(),
                cache.logits.shape()
            )));
        }
        // Per layer: (weight, bias, gamma/beta).
        let mut head_grads = Vec::with_capacity(self.head.len());
        let (last, hidden) = self.head.split_last().expect("head has a class layer");
        let last_input = cache.head.last().map_or(&cache.head_input, |b| &b.output);
        let g = conv2d_backward(last_input, &last.conv, grad_logits)?;
        head_grads.push((g.weight, g.bias, None));
        let mut grad = g.input;
        for (i, layer) in hidden.iter().enumerate().rev() {
            let input = if i == 0 {
                &cache.head_input
            } else {
                &cache.head[i - 1].output
            };
            let (ga, gn) = block_backward(&cache.head[i], layer.norm.as_ref(), &grad)?;
            let g = conv2d_backward(input, &layer.conv, &ga)?;
            head_grads.push((g.weight, g.bias, gn));
            grad = g.input;
        }
        head_grads.reverse();

        let grad_features = dropout_backward(&cache.dropout, &grad)?;
        let n = self.dilated.len();
        // Gradient reaching each z_l (l = 0..=L) from the concatenation.
        let mut grad_z: Vec<Option<Tensor<T>>> = vec![None; n + 1];
        if self.config.concat_enabled {
            for (l, part) in split_channels(&grad_features, &cache.concat_parts)?
                .into_iter()
                .enumerate()
            {
                grad_z[l] = Some(part);
            }
        } else {
            grad_z[n] = Some(grad_features);
        }

        let mut dilated_grads = Vec::with_capacity(n);
        for l in (0..n).rev() {
            let layer = &self.dilated[l];
            let gz = grad_z[l + 1]
                .take()
                .unwrap_or_else(|| cache.dilated[l].output.zeros_like());
            let (ga, gn) = block_backward(&cache.dilated[l], layer.norm.as_ref(), &gz)?;
            let input = if l == 0 {
                &cache.z0
            } else {
                &cache.dilated[l - 1].output
            };
            let g = conv2d_backward(input, &layer.conv, &ga)?;
            dilated_grads.push((g.weight, g.bias, gn));
            match &mut grad_z[l] {
                Some(acc) => acc.add_assign(&g.input)?,
                slot => *slot = Some(g.input),
            }
        }
        dilated_grads.reverse();

        let gz0 = grad_z[0].take().expect("layer 1 always feeds z0");
        let mut tensors = Vec::new();
        let grad_input = match (&self.input_norm, &cache.input_norm, self.config.norm_mode) {
            (Some(p), Some(nc), mode) => {
                let g = instance_norm_backward(nc, p, &gz0)?;
                tensors.push(g.gamma);
                tensors.push(g.beta);
                let mut gi = g.input;
                if mode == NormMode::InstanceNormSkip {
                    gi.add_assign(&gz0)?;
                }
                gi
            }
            _ => gz0,
        };
        debug_assert_eq!(grad_input.shape(), cache.input.shape());
        for (w, b, gn) in dilated_grads.into_iter().chain(head_grads) {
            tensors.push(w);
            tensors.push(b);
            if let Some((gg, gb)) = gn {
                tensors.push(gg);
                tensors.push(gb);
            }
        }
        Ok((Gradients { tensors }, grad_input))
    }

    /// Argmax class per pixel.
    pub fn predict(&self, image: &Tensor<T>) -> Result<LabelMap> {
        let probs = self.predict_probs(image)?;
        Ok(argmax_labels(&probs))
    }
}

/// Argmax over channels of a `C×H×W` probability map.
pub fn argmax_labels<T: Scalar>(probs: &Tensor<T>) -> LabelMap {
    let s = probs.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let hw = h * w;
    let d = probs.data();
    let labels = (0..hw)
        .map(|i| {
            (0..c)
                .fold((0usize, T::neg_infinity()), |(bi, bv), ch| {
                    let v = d[ch * hw + i];
                    if v > bv {
                        (ch, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0 as u8
        })
        .collect();
    LabelMap {
        height: h,
        width: w,
        data: labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{DilationSchedule, ScheduleKind};

    fn small() -> NetworkConfig {
        NetworkConfig {
            kernels_per_layer: 4,
            num_dilated_layers: 3,
            dilation_schedule: DilationSchedule::Named(ScheduleKind::Fibonacci),
            head_widths: vec![8, 5],
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn default_has_thirteen_conv_layers() {
        let net = Network::build(&NetworkConfig::default(), 0).unwrap();
        assert_eq!(net.dilated.len() + net.head.len(), 13);
        assert_eq!(net.head[0].conv.in_channels(), 321);
        let nine = NetworkConfig {
            num_dilated_layers: 9,
            ..NetworkConfig::default()
        };
        let net = Network::build(&nine, 0).unwrap();
        assert_eq!(net.dilated.len() + net.head.len(), 12);
        let rates: Vec<_> = net.dilated.iter().map(|l| l.conv.dilation).collect();
        assert_eq!(rates, vec![1, 1, 2, 3, 5, 8, 13, 21, 34]);
    }

    #[test]
    fn mismatched_schedule_is_rejected() {
        let bad = NetworkConfig {
            dilation_schedule: DilationSchedule::Explicit(vec![1, 2, 3]),
            ..NetworkConfig::default()
        };
        assert!(matches!(
            Network::build(&bad, 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(
            Network::build(&small(), 9).unwrap(),
            Network::build(&small(), 9).unwrap()
        );
        assert_ne!(
            Network::build(&small(), 9).unwrap(),
            Network::build(&small(), 10).unwrap()
        );
    }

    #[test]
    fn any_size_in_same_size_out() {
        let net = Network::build(&small(), 1).unwrap();
        for (h, w) in [(1, 1), (5, 3), (17, 11)] {
            let x = Tensor::alloc(&[1, h, w], 0.5f32).unwrap();
            let p = net.predict_probs(&x).unwrap();
            assert_eq!(p.shape(), &[6, h, w]);
        }
        let rgb = Tensor::alloc(&[3, 4, 4], 0.5f32).unwrap();
        assert!(matches!(net.predict_probs(&rgb), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn zero_upstream_gradient() {
        let net = Network::build(&small(), 2).unwrap();
        let x = Tensor::from_vec(&[1, 4, 5], (0..20).map(|v| (v as f32).sin()).collect()).unwrap();
        let mut r = rng::stream(0, Stream::Dropout);
        let (p, cache) = net.forward(&x, Mode::Train, &mut r).unwrap();
        let (g, gi) = net.backward(&cache, &p.zeros_like()).unwrap();
        assert!(g.is_all_zero());
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert_eq!(g.tensors.len(), net.params().len());
        for (t, (_, p)) in g.tensors.iter().zip(net.params()) {
            assert_eq!(t.shape(), p.shape());
        }
    }
}
