//! Synthetic texture mosaics standing in for annotated CT slices.
//!
//! The canvas is split into Voronoi cells, each filled with one of six
//! procedural textures. Every texture family is closed under the eight grid
//! symmetries (stripe orientation is drawn at random), so dihedral
//! augmentation is label-preserving on this data too.

use std::f64::consts::{PI, SQRT_2};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::{LabelMap, Mask, Tensor, UNLABELED};

/// Number of distinct texture families the generator can draw.
pub const TEXTURE_FAMILIES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Approximate side length of one region, in pixels.
    pub region_granularity: usize,
    /// Fraction of ROI pixels left unannotated.
    pub unlabeled_fraction: f64,
    /// Width of the band along the canvas edge excluded from the ROI.
    pub border: usize,
    /// Standard deviation of additive pixel noise, relative to the texture.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 6,
            height: 96,
            width: 96,
            region_granularity: 24,
            unlabeled_fraction: 0.3,
            border: 4,
            noise: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.num_classes == 0 || self.num_classes > TEXTURE_FAMILIES {
            return Err(Error::InvalidParameter(format!(
                "num_classes {} outside 1..={TEXTURE_FAMILIES} texture families",
                self.num_classes
            )));
        }
        if self.height <= 2 * self.border || self.width <= 2 * self.border {
            bad.push(format!(
                "canvas {}×{} leaves no roi inside a {}-px border",
                self.height, self.width, self.border
            ));
        }
        if self.region_granularity == 0 {
            bad.push("region_granularity must be positive".into());
        }
        if !(0.0..1.0).contains(&self.unlabeled_fraction) {
            bad.push(format!("unlabeled_fraction {} outside [0, 1)", self.unlabeled_fraction));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            bad.push(format!("noise {} must be a non-negative number", self.noise));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(bad))
        }
    }
}

/// Separable box blur with clamped edges, applied `passes` times.
fn box_blur(field: &mut [f64], h: usize, w: usize, r: usize, passes: usize) {
    let mut tmp = vec![0.0; field.len()];
    let blur_line = |get: &dyn Fn(usize) -> f64, n: usize, out: &mut dyn FnMut(usize, f64)| {
        for i in 0..n {
            let lo = i.saturating_sub(r);
            let hi = (i + r).min(n - 1);
            let s: f64 = (lo..=hi).map(get).sum();
            out(i, s / (hi - lo + 1) as f64);
        }
    };
    for _ in 0..passes {
        for y in 0..h {
            let row = &field[y * w..(y + 1) * w];
            blur_line(&|x| row[x], w, &mut |x, v| tmp[y * w + x] = v);
        }
        for x in 0..w {
            blur_line(&|y| tmp[y * w + x], h, &mut |y, v| field[y * w + x] = v);
        }
    }
}

fn standardize(field: &mut [f64]) {
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let var = field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / var.sqrt().max(1e-12);
    for v in field {
        *v = (*v - mean) * inv;
    }
}

fn noise_field<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Per-region texture instance.
#[derive(Debug, Clone, Copy)]
enum Texture {
    Blobs,
    Speckle,
    AxisStripes { vertical: bool, period: f64, phase: f64 },
    DiagonalStripes { anti: bool, period: f64, phase: f64 },
    Checks { cell: usize, oy: usize, ox: usize },
    Dots { spacing: f64, oy: f64, ox: f64 },
}

impl Texture {
    fn draw<R: Rng + ?Sized>(class: usize, rng: &mut R) -> Self {
        match class {
            0 => Texture::Blobs,
            1 => Texture::Speckle,
            2 => Texture::AxisStripes {
                vertical: rng.random(),
                period: rng.random_range(5.0..8.0),
                phase: rng.random_range(0.0..2.0 * PI),
            },
            3 => Texture::DiagonalStripes {
                anti: rng.random(),
                period: rng.random_range(5.0..8.0),
                phase: rng.random_range(0.0..2.0 * PI),
            },
            4 => Texture::Checks {
                cell: rng.random_range(3..=4),
                oy: rng.random_range(0..8),
                ox: rng.random_range(0..8),
            },
            _ => Texture::Dots {
                spacing: rng.random_range(6.0..8.0),
                oy: rng.random_range(0.0..8.0),
                ox: rng.random_range(0.0..8.0),
            },
        }
    }

    /// Roughly zero-mean, unit-variance value at `(y, x)`.
    fn at(&self, y: usize, x: usize, blobs: f64, speckle: f64) -> f64 {
        let (yf, xf) = (y as f64, x as f64);
        match *self {
            Texture::Blobs => blobs,
            Texture::Speckle => speckle,
            Texture::AxisStripes { vertical, period, phase } => {
                let t = if vertical { xf } else { yf };
                SQRT_2 * (2.0 * PI * t / period + phase).sin()
            }
            Texture::DiagonalStripes { anti, period, phase } => {
                let t = if anti { xf - yf } else { xf + yf } / SQRT_2;
                SQRT_2 * (2.0 * PI * t / period + phase).sin()
            }
            Texture::Checks { cell, oy, ox } => {
                if ((y + oy) / cell + (x + ox) / cell) % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Texture::Dots { spacing, oy, ox } => {
                let dy = ((yf + oy) / spacing).fract() - 0.5;
                let dx = ((xf + ox) / spacing).fract() - 0.5;
                let d = (dy * dy + dx * dx).sqrt() * spacing;
                if d <= 1.5 {
                    2.5
                } else {
                    -0.4
                }
            }
        }
    }
}

/// Marks the `count` pixels among `candidates` with the highest value of a
/// smooth random field, so removed annotation forms coherent patches.
fn coherent_subset<R: Rng + ?Sized>(
    rng: &mut R,
    h: usize,
    w: usize,
    candidates: &[usize],
    count: usize,
) -> Vec<usize> {
    let mut field = noise_field(rng, h * w);
    box_blur(&mut field, h, w, (h.min(w) / 12).max(1), 3);
    let mut order = candidates.to_vec();
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    order.truncate(count);
    order
}

/// One deterministic mosaic per seed.
pub fn synth_mosaic(cfg: &SynthConfig, seed: u64) -> Result<SampleRecord> {
    cfg.validate()?;
    let mut rng = stream(seed, Stream::Synth);
    let (h, w) = (cfg.height, cfg.width);
    let n = h * w;

    let cells = ((n as f64) / (cfg.region_granularity.pow(2) as f64)).round().max(2.0) as usize;
    let sites: Vec<(f64, f64)> = (0..cells)
        .map(|_| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64)))
        .collect();
    // Balanced class assignment: each class gets ⌊cells/C⌋ or ⌈cells/C⌉ cells,
    // starting from a random class so small canvases still see every class.
    let first = rng.random_range(0..cfg.num_classes);
    let mut classes: Vec<usize> = (0..cells).map(|i| (first + i) % cfg.num_classes).collect();
    classes.shuffle(&mut rng);
    let textures: Vec<Texture> = classes.iter().map(|&c| Texture::draw(c, &mut rng)).collect();

    let mut blobs = noise_field(&mut rng, n);
    box_blur(&mut blobs, h, w, 2, 2);
    standardize(&mut blobs);
    let speckle = noise_field(&mut rng, n);
    let gain: f64 = rng.random_range(0.5..2.0);
    let offset: f64 = rng.random_range(-1.0..1.0);

    let mut image = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
            let cell = sites
                .iter()
                .enumerate()
                .map(|(i, &(sy, sx))| (i, (sy - yf).powi(2) + (sx - xf).powi(2)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .expect("at least two cells");
            let i = y * w + x;
            let v = textures[cell].at(y, x, blobs[i], speckle[i]);
            let eps: f64 = rng.sample(StandardNormal);
            image.push((gain * (v + cfg.noise * eps) + offset) as f32);
            labels.push(classes[cell] as u8);
        }
    }

    let b = cfg.border;
    let roi: Vec<bool> = (0..n)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            y >= b && y < h - b && x >= b && x < w - b
        })
        .collect();
    for (l, &r) in labels.iter_mut().zip(&roi) {
        if !r {
            *l = UNLABELED;
        }
    }
    let inside: Vec<usize> = (0..n).filter(|&i| roi[i]).collect();
    let hidden = (cfg.unlabeled_fraction * inside.len() as f64).round() as usize;
    for i in coherent_subset(&mut rng, h, w, &inside, hidden) {
        labels[i] = UNLABELED;
    }

    SampleRecord::new(
        format!("mosaic_{seed:06}"),
        Tensor::from_vec(&[1, h, w], image)?,
        LabelMap::new(h, w, labels)?,
        Mask::new(h, w, roi)?,
    )
}

/// `count` mosaics with independent per-mosaic seeds derived from `seed`,
/// named `mosaic_0000`, `mosaic_0001`, ...
pub fn synth_suite(cfg: &SynthConfig, seed: u64, count: usize) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let mut r = synth_mosaic(cfg, seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i))?;
            r.case_id = format!("mosaic_{i:04}");
            Ok(r)
        })
        .collect()
}

/// Removes annotation until at most `coverage` of the ROI stays labeled,
/// in spatially coherent patches.
pub fn thin_labels(record: &SampleRecord, coverage: f64, seed: u64) -> Result<SampleRecord> {
    if !(0.0..=1.0).contains(&coverage) {
        return Err(Error::InvalidParameter(format!("coverage {coverage} outside [0, 1]")));
    }
    let (h, w) = (record.height(), record.width());
    let labeled: Vec<usize> = (0..h * w)
        .filter(|&i| record.labels.data[i] != UNLABELED)
        .collect();
    let keep = (coverage * record.roi.count() as f64).round() as usize;
    let mut out = record.clone();
    if labeled.len() <= keep {
        return Ok(out);
    }
    let mut rng = stream(seed, Stream::Synth);
    for i in coherent_subset(&mut rng, h, w, &labeled, labeled.len() - keep) {
        out.labels.data[i] = UNLABELED;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            height: 48,
            width: 40,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_mosaic(&small(), 7).unwrap();
        let b = synth_mosaic(&small(), 7).unwrap();
        let bits = |r: &SampleRecord| r.image.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.labels, b.labels);
        assert_ne!(a.image, synth_mosaic(&small(), 8).unwrap().image);
    }

    #[test]
    fn fraction_zero_labels_the_whole_roi() {
        let cfg = SynthConfig {
            unlabeled_fraction: 0.0,
            ..small()
        };
        let r = synth_mosaic(&cfg, 1).unwrap();
        assert_eq!(r.labels.labeled_count(), r.roi.count());
        r.validate(Some(6)).unwrap();
    }

    #[test]
    fn unlabeled_fraction_is_honoured_inside_roi() {
        let r = synth_mosaic(&small(), 3).unwrap();
        let roi = r.roi.count() as f64;
        let frac = 1.0 - r.labels.labeled_count() as f64 / roi;
        assert!((frac - 0.3).abs() < 1.0 / roi + 1e-12, "{frac}");
    }

    #[test]
    fn too_many_classes_rejected() {
        let cfg = SynthConfig {
            num_classes: 7,
            ..small()
        };
        assert!(matches!(synth_mosaic(&cfg, 0), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn class_balance_over_many_mosaics() {
        let cfg = SynthConfig {
            height: 32,
            width: 32,
            region_granularity: 12,
            ..SynthConfig::default()
        };
        let mut counts = [0u64; 6];
        for seed in 0..100 {
            for (c, n) in synth_mosaic(&cfg, seed).unwrap().class_counts(6).unwrap().iter().enumerate() {
                counts[c] += n;
            }
        }
        let total: u64 = counts.iter().sum();
        for &n in &counts {
            let f = n as f64 / total as f64;
            assert!((0.5 / 6.0..=2.0 / 6.0).contains(&f), "{counts:?}");
        }
    }

    #[test]
    fn thinning_keeps_requested_coverage() {
        let r = synth_mosaic(&small(), 4).unwrap();
        let t = thin_labels(&r, 0.2, 4).unwrap();
        let cov = t.labels.labeled_count() as f64 / t.roi.count() as f64;
        assert!((cov - 0.2).abs() < 0.01, "{cov}");
        for (a, b) in t.labels.data.iter().zip(&r.labels.data) {
            assert!(*a == UNLABELED || a == b);
        }
    }
}
