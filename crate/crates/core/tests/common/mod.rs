//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use dfcn::data::{mean_fold_entropy, transform_plane};
use dfcn::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Zero-padded "same" convolution from the definition, accumulated in f64.
pub fn reference_conv(x: &Tensor<f64>, weight: &Tensor<f64>, bias: &[f64], dilation: usize) -> Tensor<f64> {
    let (c, h, w) = x.chw().unwrap();
    let (oc, k) = (weight.shape()[0], weight.shape()[2]);
    let (d, half) = (dilation as isize, (k / 2) as isize);
    let mut out = Tensor::zeros(&[oc, h, w]).unwrap();
    for o in 0..oc {
        for y in 0..h {
            for xx in 0..w {
                let mut s = bias[o];
                for i in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + (ky as isize - half) * d;
                            let sx = xx as isize + (kx as isize - half) * d;
                            if (0..h as isize).contains(&sy) && (0..w as isize).contains(&sx) {
                                s += weight.data()[((o * c + i) * k + ky) * k + kx]
                                    * x.data()[(i * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                }
                out.data_mut()[(o * h + y) * w + xx] = s;
            }
        }
    }
    out
}

/// Applies a dihedral op to every trailing `h×w` plane of a rank-3 or
/// rank-4 tensor.
pub fn transform_planes<T: dfcn::Scalar>(t: &Tensor<T>, op: usize) -> Tensor<T> {
    let shape = t.shape().to_vec();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut data = Vec::with_capacity(t.len());
    let mut dims = (h, w);
    for plane in t.data().chunks(h * w) {
        let (p, oh, ow) = transform_plane(plane, h, w, op).unwrap();
        dims = (oh, ow);
        data.extend(p);
    }
    let mut out_shape = shape.clone();
    let n = out_shape.len();
    out_shape[n - 2] = dims.0;
    out_shape[n - 1] = dims.1;
    Tensor::from_vec(&out_shape, data).unwrap()
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

/// Small integers, so that every sum of products is exact in f32.
pub fn rand_ints(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-4i32..=4) as f32).collect()).unwrap()
}

/// Best mean fold entropy over every assignment with the given fold sizes.
pub fn brute_force_split(counts: &[Vec<u64>], sizes: &[usize]) -> f64 {
    let classes = counts[0].len();
    let mut best = f64::NEG_INFINITY;
    let mut assign = vec![0usize; counts.len()];
    fn rec(
        i: usize,
        assign: &mut Vec<usize>,
        filled: &mut Vec<usize>,
        sizes: &[usize],
        counts: &[Vec<u64>],
        classes: usize,
        best: &mut f64,
    ) {
        if i == counts.len() {
            let mut fc = vec![vec![0u64; classes]; sizes.len()];
            for (case, &f) in assign.iter().enumerate() {
                for c in 0..classes {
                    fc[f][c] += counts[case][c];
                }
            }
            *best = best.max(mean_fold_entropy(&fc));
            return;
        }
        for f in 0..sizes.len() {
            if filled[f] < sizes[f] {
                filled[f] += 1;
                assign[i] = f;
                rec(i + 1, assign, filled, sizes, counts, classes, best);
                filled[f] -= 1;
            }
        }
    }
    rec(0, &mut assign, &mut vec![0; sizes.len()], sizes, counts, classes, &mut best);
    best
}
