//! Deterministic fixtures for the benchmarks.

use dfcn::ops::ConvParams;
use dfcn::rng::{stream, Stream};
use dfcn::Tensor;
use rand::Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream(seed, Stream::Init);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .expect("shape matches data")
}

/// A `k×k` convolution from `c` to `oc` channels with the given dilation.
pub fn conv_layer(c: usize, oc: usize, k: usize, dilation: usize) -> ConvParams {
    ConvParams::new(
        random_tensor(&[oc, c, k, k], 1),
        random_tensor(&[oc], 2),
        dilation,
    )
    .expect("valid layer")
}
