//! Central finite-difference checks of every backward pass, in f64.
//!
//! Each check compares the analytic gradient of a scalar loss with
//! `(L(x + h) − L(x − h)) / 2h` on a sample of coordinates. Layer checks use
//! a fixed random projection `L = Σ r·y` as the loss. When a perturbation
//! flips any ReLU or crosses the loss's probability floor (a kink), the
//! coordinate is retried with smaller steps, then skipped and counted.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::loss::{image_loss, image_loss_backward_logits, ClassWeights, LossConfig, PROB_FLOOR};
use crate::model::{Mode, Network, NetworkConfig};
use crate::ops::{
    block_backward, block_forward, conv2d_backward, conv2d_forward, dropout_backward,
    dropout_forward, instance_norm_backward, instance_norm_forward, softmax_backward,
    softmax_channels, BlockKind, ConvParams, NormParams,
};
use crate::rng::{stream, Stream};
use crate::tensor::{LabelMap, Mask, Tensor, UNLABELED};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-5;
/// Steps tried in turn when a perturbation crosses a kink.
const KINK_FALLBACK_STEPS: [f64; 3] = [STEP, STEP / 10.0, STEP / 100.0];
/// Gradient magnitudes below this are compared in absolute terms.
pub const MAGNITUDE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results
            .iter()
            .all(|r| r.checked > 0 && r.max_rel_error <= self.tolerance)
    }

    pub fn worst(&self) -> Option<&CheckResult> {
        self.results
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape")
}

fn project(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

struct Checker {
    rng: ChaCha8Rng,
    max_coords: usize,
    results: Vec<CheckResult>,
}

impl Checker {
    fn coords(&mut self, len: usize) -> Vec<usize> {
        if len <= self.max_coords {
            (0..len).collect()
        } else {
            let mut v = sample(&mut self.rng, len, self.max_coords).into_vec();
            v.sort_unstable();
            v
        }
    }

    /// `f` evaluates the loss at a perturbed copy of `base` and returns the
    /// ReLU pattern it passed through (empty for smooth functions).
    fn check(
        &mut self,
        name: impl Into<String>,
        base: &Tensor<f64>,
        analytic: &Tensor<f64>,
        f: impl Fn(&Tensor<f64>) -> Result<(f64, Vec<bool>)>,
    ) -> Result<()> {
        let (_, pattern) = f(base)?;
        let mut res = CheckResult {
            name: name.into(),
            max_rel_error: 0.0,
            checked: 0,
            skipped_kinks: 0,
        };
        for i in self.coords(base.len()) {
            let mut numeric = None;
            for h in KINK_FALLBACK_STEPS {
                let mut x = base.clone();
                x.data_mut()[i] = base.data()[i] + h;
                let (lp, pp) = f(&x)?;
                x.data_mut()[i] = base.data()[i] - h;
                let (lm, pm) = f(&x)?;
                if pp == pattern && pm == pattern {
                    numeric = Some((lp - lm) / (2.0 * h));
                    break;
                }
            }
            match numeric {
                Some(n) => {
                    res.max_rel_error = res.max_rel_error.max(relative_error(analytic.data()[i], n));
                    res.checked += 1;
                }
                None => res.skipped_kinks += 1,
            }
        }
        self.results.push(res);
        Ok(())
    }
}

fn check_conv(ck: &mut Checker, ic: usize, oc: usize, k: usize, dilation: usize) -> Result<()> {
    let (h, w) = (7, 9);
    let x = randn(&mut ck.rng, &[ic, h, w]);
    let p = ConvParams::new(
        randn(&mut ck.rng, &[oc, ic, k, k]),
        randn(&mut ck.rng, &[oc]),
        dilation,
    )?;
    let r = randn(&mut ck.rng, &[oc, h, w]);
    let g = conv2d_backward(&x, &p, &r)?;
    let tag = if k == 1 {
        "conv1x1".to_string()
    } else {
        format!("dilated_conv(d={dilation})")
    };
    ck.check(format!("{tag}.input"), &x, &g.input, |x| {
        Ok((project(&conv2d_forward(x, &p)?, &r), vec![]))
    })?;
    ck.check(format!("{tag}.weight"), &p.weight, &g.weight, |wt| {
        let q = ConvParams::new(wt.clone(), p.bias.clone(), dilation)?;
        Ok((project(&conv2d_forward(&x, &q)?, &r), vec![]))
    })?;
    ck.check(format!("{tag}.bias"), &p.bias, &g.bias, |b| {
        let q = ConvParams::new(p.weight.clone(), b.clone(), dilation)?;
        Ok((project(&conv2d_forward(&x, &q)?, &r), vec![]))
    })
}

fn random_norm(rng: &mut ChaCha8Rng, c: usize) -> NormParams<f64> {
    let mut p = NormParams::identity(c).expect("channels");
    for (g, b) in p.gamma.data_mut().iter_mut().zip(p.beta.data_mut()) {
        *g = 1.0 + 0.3 * rng.sample::<f64, _>(StandardNormal);
        *b = 0.3 * rng.sample::<f64, _>(StandardNormal);
    }
    p
}

fn check_instance_norm(ck: &mut Checker) -> Result<()> {
    let c = 3;
    let x = randn(&mut ck.rng, &[c, 6, 5]);
    let p = random_norm(&mut ck.rng, c);
    let r = randn(&mut ck.rng, &[c, 6, 5]);
    let (_, cache) = instance_norm_forward(&x, &p)?;
    let g = instance_norm_backward(&cache, &p, &r)?;
    ck.check("instance_norm.input", &x, &g.input, |x| {
        Ok((project(&instance_norm_forward(x, &p)?.0, &r), vec![]))
    })?;
    ck.check("instance_norm.gamma", &p.gamma, &g.gamma, |gm| {
        let q = NormParams { gamma: gm.clone(), ..p.clone() };
        Ok((project(&instance_norm_forward(&x, &q)?.0, &r), vec![]))
    })?;
    ck.check("instance_norm.beta", &p.beta, &g.beta, |bt| {
        let q = NormParams { beta: bt.clone(), ..p.clone() };
        Ok((project(&instance_norm_forward(&x, &q)?.0, &r), vec![]))
    })
}

fn check_block(ck: &mut Checker, kind: BlockKind) -> Result<()> {
    let c = 3;
    let a = randn(&mut ck.rng, &[c, 5, 6]);
    let p = (kind != BlockKind::Plain).then(|| random_norm(&mut ck.rng, c));
    let r = randn(&mut ck.rng, &[c, 5, 6]);
    let (_, cache) = block_forward(&a, p.as_ref(), kind)?;
    let (ga, gp) = block_backward(&cache, p.as_ref(), &r)?;
    let eval = |a: &Tensor<f64>, p: Option<&NormParams<f64>>| -> Result<(f64, Vec<bool>)> {
        let (y, cache) = block_forward(a, p, kind)?;
        Ok((project(&y, &r), cache.active().collect()))
    };
    let tag = format!("block({kind:?})");
    ck.check(format!("{tag}.input"), &a, &ga, |a| eval(a, p.as_ref()))?;
    if let (Some(p), Some((gg, gb))) = (&p, gp) {
        ck.check(format!("{tag}.gamma"), &p.gamma, &gg, |gm| {
            eval(&a, Some(&NormParams { gamma: gm.clone(), ..p.clone() }))
        })?;
        ck.check(format!("{tag}.beta"), &p.beta, &gb, |bt| {
            eval(&a, Some(&NormParams { beta: bt.clone(), ..p.clone() }))
        })?;
    }
    Ok(())
}

fn check_softmax_and_dropout(ck: &mut Checker) -> Result<()> {
    let x = randn(&mut ck.rng, &[4, 5, 5]);
    let r = randn(&mut ck.rng, &[4, 5, 5]);
    let probs = softmax_channels(&x)?;
    let g = softmax_backward(&probs, &r)?;
    ck.check("softmax.input", &x, &g, |x| Ok((project(&softmax_channels(x)?, &r), vec![])))?;

    let drop_rng = stream(11, Stream::Dropout);
    let (_, mask) = dropout_forward(&x, 0.5, Mode::Train, &mut drop_rng.clone())?;
    let g = dropout_backward(&mask, &r)?;
    ck.check("dropout.input", &x, &g, |x| {
        let (y, _) = dropout_forward(x, 0.5, Mode::Train, &mut drop_rng.clone())?;
        Ok((project(&y, &r), vec![]))
    })
}

/// Labels with every class, some unlabeled pixels, and an ROI border.
fn toy_annotation(rng: &mut ChaCha8Rng, classes: usize, h: usize, w: usize) -> (LabelMap, Mask) {
    let labels: Vec<u8> = (0..h * w)
        .map(|i| {
            if rng.random_bool(0.3) {
                UNLABELED
            } else {
                (i % classes) as u8
            }
        })
        .collect();
    let roi: Vec<bool> = (0..h * w).map(|i| i % w != 0).collect();
    let labels = labels
        .iter()
        .zip(&roi)
        .map(|(&l, &r)| if r { l } else { UNLABELED })
        .collect();
    (
        LabelMap::new(h, w, labels).expect("shape"),
        Mask::new(h, w, roi).expect("shape"),
    )
}

fn check_loss(ck: &mut Checker) -> Result<()> {
    let (c, h, w) = (6, 5, 6);
    let logits = randn(&mut ck.rng, &[c, h, w]);
    let (labels, roi) = toy_annotation(&mut ck.rng, c, h, w);
    let weights = ClassWeights {
        weights: (0..c).map(|i| 0.5 + i as f64 * 0.3).collect(),
    };
    let cfg = LossConfig { alpha: 0.7 };
    let probs = softmax_channels(&logits)?;
    let (_, g) = image_loss_backward_logits(&probs, &labels, &roi, &weights, &cfg)?;
    ck.check("loss.logits", &logits, &g, |z| {
        let p = softmax_channels(z)?;
        Ok((image_loss(&p, &labels, &roi, &weights, &cfg)?.total, vec![]))
    })
}

fn check_network(ck: &mut Checker, config: &NetworkConfig, seed: u64) -> Result<()> {
    let (h, w) = (9, 9);
    let mut net: Network<f64> = Network::build(config, seed)?.cast();
    // Move norm params and biases off their identity/zero init. Weights keep
    // their init so the logits stay in a moderate range.
    for t in net.params_mut().into_iter().filter(|t| t.shape().len() == 1) {
        for v in t.data_mut() {
            *v += 0.1 * ck.rng.sample::<f64, _>(StandardNormal);
        }
    }
    let image = randn(&mut ck.rng, &[1, h, w]);
    let (labels, roi) = toy_annotation(&mut ck.rng, config.num_classes, h, w);
    let weights = ClassWeights {
        weights: (0..config.num_classes).map(|i| 1.0 + 0.1 * i as f64).collect(),
    };
    let cfg = LossConfig { alpha: 0.5 };
    let drop_rng = stream(seed, Stream::Dropout);

    let eval = |net: &Network<f64>, x: &Tensor<f64>| -> Result<(f64, Vec<bool>)> {
        let (probs, cache) = net.forward(x, Mode::Train, &mut drop_rng.clone())?;
        let l = image_loss(&probs, &labels, &roi, &weights, &cfg)?;
        // The probability floor of the loss is a kink as well.
        let mut pattern = cache.activation_pattern();
        pattern.extend(probs.data().iter().map(|&p| p < PROB_FLOOR));
        Ok((l.total, pattern))
    };
    let (probs, cache) = net.forward(&image, Mode::Train, &mut drop_rng.clone())?;
    let (_, g) = image_loss_backward_logits(&probs, &labels, &roi, &weights, &cfg)?;
    let (grads, grad_input) = net.backward_logits(&cache, &g)?;

    ck.check("network.input", &image, &grad_input, |x| eval(&net, x))?;
    let names: Vec<String> = net.params().into_iter().map(|(n, _)| n).collect();
    for (k, name) in names.iter().enumerate() {
        let base = net.params()[k].1.clone();
        ck.check(format!("network.{name}"), &base, &grads.tensors[k], |t| {
            let mut n = net.clone();
            *n.params_mut()[k] = t.clone();
            eval(&n, &image)
        })?;
    }
    Ok(())
}

/// Every layer check plus the end-to-end network check for `config`.
pub fn run_suite(config: &NetworkConfig, seed: u64) -> Result<GradcheckReport> {
    config.validate()?;
    let mut ck = Checker {
        rng: stream(seed, Stream::Gradcheck),
        max_coords: 12,
        results: Vec::new(),
    };
    for d in [1, 2, 3, 5] {
        check_conv(&mut ck, 2, 3, 3, d)?;
    }
    check_conv(&mut ck, 5, 4, 1, 1)?;
    check_instance_norm(&mut ck)?;
    for kind in [BlockKind::NormSkip, BlockKind::Norm, BlockKind::Plain] {
        check_block(&mut ck, kind)?;
    }
    check_softmax_and_dropout(&mut ck)?;
    check_loss(&mut ck)?;
    check_network(&mut ck, config, seed)?;
    Ok(GradcheckReport {
        tolerance: TOLERANCE,
        results: ck.results,
    })
}

/// A network small enough to check exhaustively in seconds.
pub fn small_config() -> NetworkConfig {
    NetworkConfig {
        kernels_per_layer: 4,
        num_dilated_layers: 4,
        head_widths: vec![8, 6],
        ..NetworkConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_small_network() {
        let r = run_suite(&small_config(), 3).unwrap();
        assert!(r.passed(), "{:#?}", r.worst());
        assert!(r.results.iter().any(|c| c.name == "network.input"));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut ck = Checker {
            rng: stream(0, Stream::Gradcheck),
            max_coords: 4,
            results: vec![],
        };
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let wrong = Tensor::from_vec(&[2], vec![2.0, 4.4]).unwrap();
        ck.check("square", &x, &wrong, |x| Ok((x.data().iter().map(|v| v * v).sum(), vec![])))
            .unwrap();
        assert!(ck.results[0].max_rel_error > 0.05);
    }
}
