//! Static properties of a configuration: size, receptive field and how
//! densely a dilation schedule samples its receptive field.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::model::config::{NetworkConfig, NormMode};

/// Side length of the square receptive field: `1 + 2·ΣD` over the 3×3 layers.
pub fn receptive_field(config: &NetworkConfig) -> usize {
    1 + 2 * config.dilations().iter().sum::<usize>()
}

/// Parameter count from the layer arithmetic alone, without building.
pub fn param_count_closed_form(config: &NetworkConfig) -> usize {
    let k = config.kernels_per_layer;
    let l = config.num_dilated_layers;
    let mut n = 9 * k + k + (l - 1) * (9 * k * k + k);
    let mut prev = config.head_input_channels();
    for &h in &config.head_widths {
        n += prev * h + h;
        prev = h;
    }
    n += prev * config.num_classes + config.num_classes;
    if config.norm_mode != NormMode::None {
        let normalized = 1 + l * k + config.head_widths.iter().sum::<usize>();
        n += 2 * normalized;
    }
    n
}

/// Reachability after the first `layers` dilated layers.
#[derive(Debug, Clone, Serialize)]
pub struct CoveragePrefix {
    pub layers: usize,
    pub dilation: usize,
    pub receptive_field: usize,
    /// Distinct input offsets (2-D) reachable from one output pixel.
    pub offsets: usize,
    /// `offsets / receptive_field²`.
    pub density: f64,
    /// Gap length → count, between consecutive reachable offsets along one axis.
    pub gaps: BTreeMap<usize, usize>,
    /// Coefficient of variation of the number of paths reaching each offset
    /// inside the receptive field (unreachable offsets count as zero paths).
    /// Higher means a more lattice-like, uneven sampling.
    pub path_cv: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageReport {
    pub prefixes: Vec<CoveragePrefix>,
}

impl CoverageReport {
    pub fn last(&self) -> &CoveragePrefix {
        self.prefixes.last().expect("at least one layer")
    }
}

/// The 1-D path-count profile of a stack of dilated 3-tap kernels: entry
/// `i` counts tap sequences landing at offset `i − radius`. Each 3×3 offset
/// set is a product of two 1-D sets, so the 2-D profile is the outer
/// product of this with itself.
pub fn path_profile(dilations: &[usize]) -> Vec<f64> {
    let mut profile = vec![1.0f64];
    for &d in dilations {
        let mut next = vec![0.0; profile.len() + 2 * d];
        for (i, &v) in profile.iter().enumerate() {
            if v != 0.0 {
                next[i] += v;
                next[i + d] += v;
                next[i + 2 * d] += v;
            }
        }
        profile = next;
    }
    profile
}

/// Offset sets of the iterated Minkowski sum of `{−D, 0, D}²`, per prefix.
pub fn sampling_coverage(config: &NetworkConfig) -> CoverageReport {
    let rates = config.dilations();
    let prefixes = (1..=rates.len())
        .map(|n| {
            let profile = path_profile(&rates[..n]);
            let rf = profile.len();
            let hit: Vec<usize> = (0..rf).filter(|&i| profile[i] > 0.0).collect();
            let mut gaps = BTreeMap::new();
            for w in hit.windows(2) {
                *gaps.entry(w[1] - w[0]).or_insert(0) += 1;
            }
            let cells = (rf * rf) as f64;
            let (s1, s2) = profile.iter().fold((0.0, 0.0), |(a, b), &v| (a + v, b + v * v));
            // Moments of the outer product follow from the 1-D moments.
            let mean = s1 * s1 / cells;
            let var = s2 * s2 / cells - mean * mean;
            CoveragePrefix {
                layers: n,
                dilation: rates[n - 1],
                receptive_field: rf,
                offsets: hit.len() * hit.len(),
                density: (hit.len() * hit.len()) as f64 / cells,
                gaps,
                path_cv: var.max(0.0).sqrt() / mean,
            }
        })
        .collect();
    CoverageReport { prefixes }
}
