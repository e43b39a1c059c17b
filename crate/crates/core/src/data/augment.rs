//! The eight dihedral symmetries of the pixel grid.
//!
//! Op `i` rotates by `i % 4` quarter turns counter-clockwise and then, for
//! `i ≥ 4`, mirrors left-right. Non-square planes swap height and width
//! under odd rotations.

use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Mask, Tensor};

pub const NUM_OPS: usize = 8;

fn check(op: usize) -> Result<()> {
    if op >= NUM_OPS {
        return Err(Error::InvalidParameter(format!(
            "augmentation op {op} outside 0..{NUM_OPS}"
        )));
    }
    Ok(())
}

/// Applies `op` to one `h×w` row-major plane, returning the new plane and
/// its dimensions.
pub fn transform_plane<T: Copy>(data: &[T], h: usize, w: usize, op: usize) -> Result<(Vec<T>, usize, usize)> {
    check(op)?;
    if data.len() != h * w {
        return Err(Error::InvalidShape(format!(
            "plane has {} values, expected {h}×{w}",
            data.len()
        )));
    }
    let (k, flip) = (op % 4, op >= 4);
    let (oh, ow) = if k % 2 == 1 { (w, h) } else { (h, w) };
    let mut out = Vec::with_capacity(data.len());
    for y in 0..oh {
        for x in 0..ow {
            let x = if flip { ow - 1 - x } else { x };
            // Source pixel of the rotated (pre-flip) image at (y, x).
            let (sy, sx) = match k {
                0 => (y, x),
                1 => (x, w - 1 - y),
                2 => (h - 1 - y, w - 1 - x),
                _ => (h - 1 - x, y),
            };
            out.push(data[sy * w + sx]);
        }
    }
    Ok((out, oh, ow))
}

/// The op equal to applying `first` and then `second`.
pub fn compose_ops(first: usize, second: usize) -> Result<usize> {
    check(first)?;
    check(second)?;
    let (ka, fa) = (first % 4, first >= 4);
    let (kb, fb) = (second % 4, second >= 4);
    // F^fb R^kb F^fa R^ka = F^(fa^fb) R^(±kb + ka), since R F = F R⁻¹.
    let k = if fa { ka + 4 - kb } else { ka + kb } % 4;
    Ok(k + if fa != fb { 4 } else { 0 })
}

pub fn invert_op(op: usize) -> Result<usize> {
    check(op)?;
    // Mirrored ops are involutions; rotations invert to the opposite turn.
    Ok(if op >= 4 { op } else { (4 - op) % 4 })
}

/// Applies the same symmetry to the image, labels and ROI.
pub fn augment(sample: &SampleRecord, op: usize) -> Result<SampleRecord> {
    let (h, w) = (sample.height(), sample.width());
    let (img, oh, ow) = transform_plane(sample.image.data(), h, w, op)?;
    let (labels, _, _) = transform_plane(&sample.labels.data, h, w, op)?;
    let (roi, _, _) = transform_plane(&sample.roi.data, h, w, op)?;
    Ok(SampleRecord {
        case_id: sample.case_id.clone(),
        image: Tensor::from_vec(&[1, oh, ow], img)?,
        labels: LabelMap::new(oh, ow, labels)?,
        roi: Mask::new(oh, ow, roi)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize) -> SampleRecord {
        let n = h * w;
        SampleRecord {
            case_id: "s".into(),
            image: Tensor::from_vec(&[1, h, w], (0..n).map(|v| v as f32).collect()).unwrap(),
            labels: LabelMap::new(h, w, (0..n).map(|v| (v % 5) as u8).collect()).unwrap(),
            roi: Mask::new(h, w, (0..n).map(|v| v % 3 != 0).collect()).unwrap(),
        }
    }

    #[test]
    fn identity_and_quarter_turn() {
        let s = sample(2, 3);
        assert_eq!(augment(&s, 0).unwrap(), s);
        // [[0 1 2] [3 4 5]] turned counter-clockwise.
        let (p, h, w) = transform_plane(&[0, 1, 2, 3, 4, 5], 2, 3, 1).unwrap();
        assert_eq!((h, w), (3, 2));
        assert_eq!(p, vec![2, 5, 1, 4, 0, 3]);
        let (p, _, _) = transform_plane(&[0, 1, 2, 3, 4, 5], 2, 3, 4).unwrap();
        assert_eq!(p, vec![2, 1, 0, 5, 4, 3]);
    }

    #[test]
    fn inverses_restore_the_sample() {
        let s = sample(3, 5);
        for op in 0..NUM_OPS {
            let back = augment(&augment(&s, op).unwrap(), invert_op(op).unwrap()).unwrap();
            assert_eq!(back, s, "op {op}");
        }
    }

    #[test]
    fn composition_table_matches_pixel_permutations() {
        let s = sample(3, 4);
        for a in 0..NUM_OPS {
            for b in 0..NUM_OPS {
                let two = augment(&augment(&s, a).unwrap(), b).unwrap();
                let one = augment(&s, compose_ops(a, b).unwrap()).unwrap();
                assert_eq!(two, one, "{a} then {b}");
            }
        }
    }

    #[test]
    fn ops_are_distinct_and_preserve_counts() {
        let s = sample(4, 4);
        let outs: Vec<_> = (0..NUM_OPS).map(|op| augment(&s, op).unwrap()).collect();
        for i in 0..NUM_OPS {
            for j in i + 1..NUM_OPS {
                assert_ne!(outs[i].image, outs[j].image);
            }
            assert_eq!(outs[i].class_counts(5).unwrap(), s.class_counts(5).unwrap());
        }
        assert!(augment(&s, 8).is_err());
    }
}
