//! The semi-supervised weighted loss and the evaluation metrics.
//!
//! Per pixel, with output distribution `p`:
//!
//! - labeled with class `y`: `−w_s[y]·log p_y`
//! - unlabeled: `−α·w_u·Σ_i p_i·log p_i` (prediction entropy)
//!
//! Over an image the supervised term is the mean over labeled pixels in the
//! region of interest; the unsupervised term is `α·w_u` times the mean
//! entropy over unlabeled pixels in it, with
//! `w_u = |labeled ∩ roi| / |unlabeled ∩ roi|`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::softmax_backward;
use crate::tensor::{LabelMap, Mask, Scalar, Tensor, UNLABELED};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-7;

/// Supervised per-class weights, inversely proportional to class frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
}

impl ClassWeights {
    /// `w[i] = N / (C_present · n_i)` for present classes, 0 for absent ones,
    /// so that `Σ w[i]·n_i = N` and every present class contributes equally.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptyReference);
        }
        let present = counts.iter().filter(|&&n| n > 0).count() as f64;
        let weights = counts
            .iter()
            .map(|&n| {
                if n == 0 {
                    0.0
                } else {
                    total as f64 / (present * n as f64)
                }
            })
            .collect();
        Ok(ClassWeights { weights })
    }

    pub fn uniform(classes: usize) -> Self {
        ClassWeights {
            weights: vec![1.0; classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }
}

pub fn class_weights(counts: &[u64]) -> Result<ClassWeights> {
    ClassWeights::from_counts(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Scale of the unsupervised entropy term; 0 gives a purely supervised loss.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be a non-negative number, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

fn ln_floor(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Entropy of a distribution, in nats, with the probability floor.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().map(|&p| p * ln_floor(p)).sum::<f64>()
}

fn check_label(label: u8, classes: usize) -> Result<()> {
    if label != UNLABELED && label as usize >= classes {
        return Err(Error::InvalidLabel { label, classes });
    }
    Ok(())
}

/// Loss of one pixel.
pub fn pixel_loss(
    probs: &[f64],
    label: u8,
    weights: &ClassWeights,
    cfg: &LossConfig,
    w_u: f64,
) -> Result<f64> {
    check_label(label, probs.len())?;
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-5 {
        return Err(Error::InvalidInput(format!(
            "pixel probabilities sum to {sum}"
        )));
    }
    if label == UNLABELED {
        Ok(cfg.alpha * w_u * entropy(probs))
    } else {
        let y = label as usize;
        Ok(-weights.weights[y] * ln_floor(probs[y]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageLoss {
    pub total: f64,
    pub supervised: f64,
    pub unsupervised: f64,
    pub w_u: f64,
    pub labeled: usize,
    pub unlabeled: usize,
    /// Mean prediction entropy over unlabeled pixels in the ROI (unscaled).
    pub mean_unlabeled_entropy: f64,
}

struct PixelSets {
    labeled: usize,
    unlabeled: usize,
}

fn validate_inputs<T: Scalar>(
    probs: &Tensor<T>,
    labels: &LabelMap,
    roi: &Mask,
    weights: &ClassWeights,
    cfg: &LossConfig,
) -> Result<PixelSets> {
    cfg.validate()?;
    let (c, h, w) = probs.chw()?;
    if (labels.height, labels.width) != (h, w) || (roi.height, roi.width) != (h, w) {
        return Err(Error::InvalidShape(format!(
            "probs {h}×{w}, labels {}×{}, roi {}×{}",
            labels.height, labels.width, roi.height, roi.width
        )));
    }
    if weights.num_classes() != c {
        return Err(Error::InvalidShape(format!(
            "{} class weights for {c} output channels",
            weights.num_classes()
        )));
    }
    labels.validate(c)?;
    let mut sets = PixelSets {
        labeled: 0,
        unlabeled: 0,
    };
    for (&l, &inside) in labels.data.iter().zip(&roi.data) {
        if !inside {
            continue;
        }
        if l == UNLABELED {
            sets.unlabeled += 1;
        } else {
            sets.labeled += 1;
        }
    }
    if sets.labeled + sets.unlabeled == 0 {
        return Err(Error::EmptyRoi);
    }
    Ok(sets)
}

fn pixel_probs<T: Scalar>(probs: &Tensor<T>, i: usize, buf: &mut [f64]) -> Result<()> {
    let hw = probs.len() / buf.len();
    let d = probs.data();
    for (c, b) in buf.iter_mut().enumerate() {
        *b = d[c * hw + i].as_f64();
    }
    let sum: f64 = buf.iter().sum();
    if (sum - 1.0).abs() > 1e-5 {
        return Err(Error::InvalidInput(format!(
            "probabilities at pixel {i} sum to {sum}"
        )));
    }
    Ok(())
}

/// Shared pass for the loss value and, optionally, its gradient wrt `probs`.
fn image_loss_impl<T: Scalar>(
    probs: &Tensor<T>,
    labels: &LabelMap,
    roi: &Mask,
    weights: &ClassWeights,
    cfg: &LossConfig,
    mut grad: Option<&mut Tensor<T>>,
) -> Result<ImageLoss> {
    let sets = validate_inputs(probs, labels, roi, weights, cfg)?;
    let c = probs.shape()[0];
    let hw = labels.data.len();
    let w_u = if sets.unlabeled == 0 {
        0.0
    } else {
        sets.labeled as f64 / sets.unlabeled as f64
    };
    let sup_scale = if sets.labeled == 0 {
        0.0
    } else {
        1.0 / sets.labeled as f64
    };
    let unsup_scale = if sets.unlabeled == 0 {
        0.0
    } else {
        cfg.alpha * w_u / sets.unlabeled as f64
    };

    let mut p = vec![0.0; c];
    let (mut sup, mut ent) = (0.0, 0.0);
    for i in 0..hw {
        if !roi.data[i] {
            continue;
        }
        pixel_probs(probs, i, &mut p)?;
        let label = labels.data[i];
        if label == UNLABELED {
            ent += entropy(&p);
            if let Some(g) = grad.as_deref_mut() {
                let g = g.data_mut();
                for (k, &pk) in p.iter().enumerate() {
                    let inside = if pk >= PROB_FLOOR { 1.0 } else { 0.0 };
                    g[k * hw + i] = T::from_f64(-unsup_scale * (ln_floor(pk) + inside));
                }
            }
        } else {
            let y = label as usize;
            sup += -weights.weights[y] * ln_floor(p[y]);
            if let Some(g) = grad.as_deref_mut() {
                if p[y] >= PROB_FLOOR {
                    g.data_mut()[y * hw + i] =
                        T::from_f64(-sup_scale * weights.weights[y] / p[y]);
                }
            }
        }
    }
    let supervised = sup * sup_scale;
    let mean_entropy = if sets.unlabeled == 0 {
        0.0
    } else {
        ent / sets.unlabeled as f64
    };
    let unsupervised = cfg.alpha * w_u * mean_entropy;
    Ok(ImageLoss {
        total: supervised + unsupervised,
        supervised,
        unsupervised,
        w_u,
        labeled: sets.labeled,
        unlabeled: sets.unlabeled,
        mean_unlabeled_entropy: mean_entropy,
    })
}

pub fn image_loss<T: Scalar>(
    probs: &Tensor<T>,
    labels: &LabelMap,
    roi: &Mask,
    weights: &ClassWeights,
    cfg: &LossConfig,
) -> Result<ImageLoss> {
    image_loss_impl(probs, labels, roi, weights, cfg, None)
}

/// Loss and its exact gradient with respect to the probabilities.
pub fn image_loss_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &LabelMap,
    roi: &Mask,
    weights: &ClassWeights,
    cfg: &LossConfig,
) -> Result<(ImageLoss, Tensor<T>)> {
    let mut grad = probs.zeros_like();
    let loss = image_loss_impl(probs, labels, roi, weights, cfg, Some(&mut grad))?;
    Ok((loss, grad))
}

/// Loss and its gradient with respect to the logits that produced `probs`
/// through a channel softmax.
pub fn image_loss_backward_logits<T: Scalar>(
    probs: &Tensor<T>,
    labels: &LabelMap,
    roi: &Mask,
    weights: &ClassWeights,
    cfg: &LossConfig,
) -> Result<(ImageLoss, Tensor<T>)> {
    let (loss, grad) = image_loss_backward(probs, labels, roi, weights, cfg)?;
    Ok((loss, softmax_backward(probs, &grad)?))
}

/// `C×C` pixel counts, rows = truth, columns = prediction. Unlabeled truth
/// pixels are skipped.
pub fn confusion_matrix(
    pred: &LabelMap,
    truth: &LabelMap,
    num_classes: usize,
) -> Result<Vec<Vec<u64>>> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return Err(Error::InvalidShape(format!(
            "prediction {}×{} vs truth {}×{}",
            pred.height, pred.width, truth.height, truth.width
        )));
    }
    truth.validate(num_classes)?;
    let mut m = vec![vec![0u64; num_classes]; num_classes];
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        if t == UNLABELED {
            continue;
        }
        if p as usize >= num_classes {
            return Err(Error::InvalidLabel {
                label: p,
                classes: num_classes,
            });
        }
        m[t as usize][p as usize] += 1;
    }
    Ok(m)
}

/// Confusion of the per-pixel argmax of `probs` against `truth`, counting
/// labeled pixels inside the ROI only.
pub fn argmax_confusion<T: Scalar>(probs: &Tensor<T>, truth: &LabelMap, roi: &Mask) -> Result<Vec<Vec<u64>>> {
    let (c, h, w) = probs.chw()?;
    if (roi.height, roi.width) != (h, w) {
        return Err(Error::InvalidShape(format!(
            "roi {}×{} vs probs {h}×{w}",
            roi.height, roi.width
        )));
    }
    let mut masked = truth.clone();
    for (l, &r) in masked.data.iter_mut().zip(&roi.data) {
        if !r {
            *l = UNLABELED;
        }
    }
    confusion_matrix(&crate::model::argmax_labels(probs), &masked, c)
}

/// Mean per-class recall over classes with at least one sample; 0 when no
/// class has samples.
pub fn balanced_accuracy(confusion: &[Vec<u64>]) -> f64 {
    balanced_accuracy_over(confusion, &vec![true; confusion.len()])
}

/// [`balanced_accuracy`] restricted to classes with `eligible[i]`.
pub fn balanced_accuracy_over(confusion: &[Vec<u64>], eligible: &[bool]) -> f64 {
    let recalls: Vec<f64> = per_class_accuracy(confusion)
        .into_iter()
        .zip(eligible)
        .filter_map(|(r, &e)| r.filter(|_| e))
        .collect();
    if recalls.is_empty() {
        0.0
    } else {
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }
}

/// Recall per class; `None` for classes without samples.
pub fn per_class_accuracy(confusion: &[Vec<u64>]) -> Vec<Option<f64>> {
    confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let n: u64 = row.iter().sum();
            (n > 0).then(|| row[i] as f64 / n as f64)
        })
        .collect()
}

pub fn add_confusion(acc: &mut [Vec<u64>], other: &[Vec<u64>]) {
    for (a, b) in acc.iter_mut().zip(other) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: Vec<Vec<u64>>,
    pub per_class_acc: Vec<Option<f64>>,
    pub bacc: f64,
    pub supervised_loss: f64,
    pub unsupervised_loss: f64,
    /// Mean prediction entropy over unlabeled ROI pixels.
    #[serde(default)]
    pub mean_unlabeled_entropy: f64,
}

impl EvalReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>, supervised_loss: f64, unsupervised_loss: f64) -> Self {
        EvalReport {
            per_class_acc: per_class_accuracy(&confusion),
            bacc: balanced_accuracy(&confusion),
            confusion,
            supervised_loss,
            unsupervised_loss,
            mean_unlabeled_entropy: 0.0,
        }
    }

    /// Recomputes BACC over the eligible classes only, e.g. those present in
    /// the training set.
    pub fn restrict_bacc(mut self, eligible: &[bool]) -> Self {
        self.bacc = balanced_accuracy_over(&self.confusion, eligible);
        self
    }

    pub fn csv_header(num_classes: usize) -> String {
        let mut cols = vec![
            "bacc".to_string(),
            "supervised_loss".into(),
            "unsupervised_loss".into(),
            "mean_unlabeled_entropy".into(),
        ];
        cols.extend((0..num_classes).map(|i| format!("acc_{i}")));
        cols.join(",")
    }

    /// One CSV row matching [`EvalReport::csv_header`]; absent classes are empty cells.
    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            format!("{:.6}", self.bacc),
            format!("{:.6}", self.supervised_loss),
            format!("{:.6}", self.unsupervised_loss),
            format!("{:.6}", self.mean_unlabeled_entropy),
        ];
        cols.extend(
            self.per_class_acc
                .iter()
                .map(|a| a.map(|v| format!("{v:.6}")).unwrap_or_default()),
        );
        cols.join(",")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn weights_examples() {
        let w = class_weights(&[10; 6]).unwrap();
        assert!(w.weights.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let w = class_weights(&[30, 10, 0, 0, 0, 0]).unwrap();
        assert!((w.weights[0] - 40.0 / 60.0).abs() < 1e-12);
        assert!((w.weights[1] - 2.0).abs() < 1e-12);
        assert_eq!(&w.weights[2..], &[0.0; 4]);
        assert!(matches!(class_weights(&[0, 0]), Err(Error::EmptyReference)));
    }

    #[test]
    fn pixel_loss_examples() {
        let w = ClassWeights::uniform(6);
        let cfg = LossConfig { alpha: 1.0 };
        let onehot = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        assert_eq!(pixel_loss(&onehot, 2, &w, &cfg, 1.0).unwrap(), 0.0);
        let uniform = [1.0 / 6.0; 6];
        let l = pixel_loss(&uniform, UNLABELED, &w, &cfg, 1.0).unwrap();
        assert!((l - 6f64.ln()).abs() < 1e-12);
        assert_eq!(pixel_loss(&onehot, UNLABELED, &w, &cfg, 1.0).unwrap(), 0.0);
        assert!(matches!(
            pixel_loss(&uniform, 6, &w, &cfg, 1.0),
            Err(Error::InvalidLabel { label: 6, .. })
        ));
    }

    fn uniform_probs(c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::alloc(&[c, h, w], 1.0 / c as f64).unwrap()
    }

    #[test]
    fn two_by_two_hand_computation() {
        let probs = uniform_probs(6, 2, 2);
        let labels = LabelMap::new(2, 2, vec![0, 3, UNLABELED, UNLABELED]).unwrap();
        let roi = Mask::full(2, 2).unwrap();
        let w = ClassWeights::uniform(6);
        let l = image_loss(&probs, &labels, &roi, &w, &LossConfig { alpha: 0.1 }).unwrap();
        assert_eq!(l.w_u, 1.0);
        assert!((l.unsupervised - 0.1 * 6f64.ln()).abs() < 1e-12);
        assert!((l.supervised - 6f64.ln()).abs() < 1e-12);
        assert!((l.total - l.supervised - l.unsupervised).abs() < 1e-15);
    }

    #[test]
    fn degenerate_proportions() {
        let probs = uniform_probs(3, 2, 2);
        let roi = Mask::full(2, 2).unwrap();
        let w = ClassWeights::uniform(3);
        let all = LabelMap::new(2, 2, vec![0, 1, 2, 0]).unwrap();
        let l = image_loss(&probs, &all, &roi, &w, &LossConfig::default()).unwrap();
        assert_eq!(l.unsupervised, 0.0);
        assert_eq!(l.total, l.supervised);
        let some = LabelMap::new(2, 2, vec![0, UNLABELED, UNLABELED, 0]).unwrap();
        let l = image_loss(&probs, &some, &roi, &w, &LossConfig { alpha: 0.0 }).unwrap();
        assert_eq!(l.unsupervised, 0.0);
        assert_eq!(l.total, l.supervised);
    }

    #[test]
    fn outside_roi_is_ignored_and_empty_roi_errors() {
        let probs = uniform_probs(3, 1, 3);
        let labels = LabelMap::new(1, 3, vec![0, UNLABELED, 2]).unwrap();
        let w = ClassWeights::uniform(3);
        let roi = Mask::new(1, 3, vec![true, false, false]).unwrap();
        let l = image_loss(&probs, &labels, &roi, &w, &LossConfig::default()).unwrap();
        assert_eq!((l.labeled, l.unlabeled), (1, 0));
        let none = Mask::new(1, 3, vec![false; 3]).unwrap();
        assert!(matches!(
            image_loss(&probs, &labels, &none, &w, &LossConfig::default()),
            Err(Error::EmptyRoi)
        ));
    }

    #[test]
    fn stationary_at_one_hot() {
        let mut probs = Tensor::<f64>::zeros(&[4, 1, 2]).unwrap();
        probs.data_mut()[2 * 2] = 1.0; // pixel 0 → class 2
        probs.data_mut()[2 * 2 + 1] = 1.0; // pixel 1 → class 2
        let labels = LabelMap::new(1, 2, vec![2, UNLABELED]).unwrap();
        let roi = Mask::full(1, 2).unwrap();
        let w = ClassWeights::uniform(4);
        let (_, g) =
            image_loss_backward_logits(&probs, &labels, &roi, &w, &LossConfig { alpha: 1.0 }).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0), "{:?}", g.data());
    }

    #[test]
    fn confusion_and_bacc() {
        let truth = LabelMap::new(1, 5, vec![0, 1, 1, UNLABELED, 2]).unwrap();
        let m = confusion_matrix(&truth.clone(), &truth, 3).unwrap();
        assert_eq!(m, vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]);
        assert_eq!(balanced_accuracy(&m), 1.0);
        let nothing = LabelMap::filled(1, 5, UNLABELED).unwrap();
        let z = confusion_matrix(&truth, &nothing, 3).unwrap();
        assert!(z.iter().flatten().all(|&v| v == 0));
        assert_eq!(balanced_accuracy(&[vec![4, 0], vec![3, 3]]), 0.75);
        assert_eq!(balanced_accuracy_over(&[vec![4, 0], vec![3, 3]], &[false, true]), 0.5);
    }

    #[test]
    fn report_serializes() {
        let r = EvalReport::from_confusion(vec![vec![2, 0], vec![0, 0]], 0.5, 0.1);
        assert_eq!(r.per_class_acc, vec![Some(1.0), None]);
        assert_eq!(r.bacc, 1.0);
        let row = r.csv_row();
        assert_eq!(row.split(',').count(), EvalReport::csv_header(2).split(',').count());
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"per_class_acc\":[1.0,null]"));
    }

    proptest! {
        #[test]
        fn weight_normalization(counts in proptest::collection::vec(0u64..10_000, 2..8)) {
            prop_assume!(counts.iter().any(|&c| c > 0));
            let w = class_weights(&counts).unwrap();
            let total: u64 = counts.iter().sum();
            let weighted: f64 = w.weights.iter().zip(&counts).map(|(a, &b)| a * b as f64).sum();
            prop_assert!((weighted - total as f64).abs() <= 1e-6 * total as f64);
        }

        #[test]
        fn bacc_row_scaling_invariance(
            rows in proptest::collection::vec(proptest::collection::vec(0u64..50, 3), 3),
            row in 0usize..3,
            factor in 2u64..5,
        ) {
            let mut scaled = rows.clone();
            for v in &mut scaled[row] { *v *= factor; }
            prop_assert!((balanced_accuracy(&rows) - balanced_accuracy(&scaled)).abs() < 1e-12);
        }
    }
}
