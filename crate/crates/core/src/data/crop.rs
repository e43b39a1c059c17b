//! Cutting each lung out of a slice.

use std::ops::Range;

use crate::data::SampleRecord;
use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Mask, Tensor, UNLABELED};

/// Pixels added on every side of a lung's bounding box.
pub const LUNG_MARGIN: usize = 32;

#[derive(Debug, Clone)]
pub struct Crop {
    pub record: SampleRecord,
    /// Crop window in source-image coordinates (half-open).
    pub rows: Range<usize>,
    pub cols: Range<usize>,
    /// Whether the crop has any labeled pixel.
    pub annotated: bool,
}

/// 8-connected components of a mask, in raster order of first pixel.
fn components(mask: &Mask) -> Vec<Vec<usize>> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if !mask.data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut comp = vec![];
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            comp.push(i);
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.data[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

/// 1-D dilation along a strided line using a running window count.
fn dilate_line(src: &[bool], r: usize) -> Vec<bool> {
    let n = src.len();
    let mut prefix = vec![0usize; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + src[i] as usize;
    }
    (0..n)
        .map(|i| prefix[(i + r + 1).min(n)] > prefix[i.saturating_sub(r)])
        .collect()
}

/// Square (Chebyshev) dilation of an `h×w` plane by radius `r`.
fn dilate(plane: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let mut rows = Vec::with_capacity(h * w);
    for y in 0..h {
        rows.extend(dilate_line(&plane[y * w..(y + 1) * w], r));
    }
    let mut out = vec![false; h * w];
    let mut col = vec![false; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = rows[y * w + x];
        }
        for (y, v) in dilate_line(&col, r).into_iter().enumerate() {
            out[y * w + x] = v;
        }
    }
    out
}

/// One record per connected lung region: the region's bounding box grown by
/// [`LUNG_MARGIN`] and clipped to the image, with the ROI set to the region
/// dilated by the same margin. Labels outside the ROI become unlabeled.
/// Crops without labeled pixels are dropped unless `keep_unannotated`.
pub fn crop_lungs(
    case_id: &str,
    image: &Tensor,
    labels: &LabelMap,
    lung_mask: &Mask,
    keep_unannotated: bool,
) -> Result<Vec<Crop>> {
    let (c, h, w) = image.chw()?;
    if c != 1
        || (labels.height, labels.width) != (h, w)
        || (lung_mask.height, lung_mask.width) != (h, w)
    {
        return Err(Error::InvalidShape(format!(
            "image {:?}, labels {}×{}, mask {}×{}",
            image.shape(),
            labels.height,
            labels.width,
            lung_mask.height,
            lung_mask.width
        )));
    }
    let comps = components(lung_mask);
    if comps.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut crops = Vec::new();
    for (n, comp) in comps.iter().enumerate() {
        let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
        let mut plane = vec![false; h * w];
        for &i in comp {
            let (y, x) = (i / w, i % w);
            (y0, y1, x0, x1) = (y0.min(y), y1.max(y), x0.min(x), x1.max(x));
            plane[i] = true;
        }
        let rows = y0.saturating_sub(LUNG_MARGIN)..(y1 + LUNG_MARGIN + 1).min(h);
        let cols = x0.saturating_sub(LUNG_MARGIN)..(x1 + LUNG_MARGIN + 1).min(w);
        let roi_full = dilate(&plane, h, w, LUNG_MARGIN);

        let (ch, cw) = (rows.len(), cols.len());
        let mut img = Vec::with_capacity(ch * cw);
        let mut lab = Vec::with_capacity(ch * cw);
        let mut roi = Vec::with_capacity(ch * cw);
        for y in rows.clone() {
            for x in cols.clone() {
                let i = y * w + x;
                img.push(image.data()[i]);
                roi.push(roi_full[i]);
                lab.push(if roi_full[i] { labels.data[i] } else { UNLABELED });
            }
        }
        let annotated = lab.iter().any(|&l| l != UNLABELED);
        if !annotated && !keep_unannotated {
            continue;
        }
        crops.push(Crop {
            record: SampleRecord {
                case_id: format!("{case_id}_{n}"),
                image: Tensor::from_vec(&[1, ch, cw], img)?,
                labels: LabelMap::new(ch, cw, lab)?,
                roi: Mask::new(ch, cw, roi)?,
            },
            rows,
            cols,
            annotated,
        });
    }
    Ok(crops)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_with(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Mask {
        Mask::new(h, w, (0..h * w).map(|i| f(i / w, i % w)).collect()).unwrap()
    }

    #[test]
    fn margin_arithmetic() {
        let (h, w) = (300, 512);
        let mask = mask_with(h, w, |y, x| (100..200).contains(&x) && (120..180).contains(&y));
        let img = Tensor::zeros(&[1, h, w]).unwrap();
        let labels = LabelMap::filled(h, w, 1).unwrap();
        let crops = crop_lungs("a", &img, &labels, &mask, false).unwrap();
        assert_eq!(crops.len(), 1);
        assert_eq!(crops[0].cols, 68..232);
        assert_eq!(crops[0].rows, 88..212);
        // ROI is the whole window for a rectangular lung.
        assert!(crops[0].record.roi.data.iter().all(|&r| r));
    }

    #[test]
    fn clipped_at_edges_and_split_into_components() {
        let (h, w) = (100, 200);
        let mask = mask_with(h, w, |y, x| y < 40 && (x < 10 || x >= 150));
        let img = Tensor::zeros(&[1, h, w]).unwrap();
        let labels = LabelMap::filled(h, w, UNLABELED).unwrap();
        assert!(crop_lungs("a", &img, &labels, &mask, false).unwrap().is_empty());
        let crops = crop_lungs("a", &img, &labels, &mask, true).unwrap();
        assert_eq!(crops.len(), 2);
        assert_eq!((crops[0].rows.clone(), crops[0].cols.clone()), (0..72, 0..42));
        assert_eq!(crops[1].cols, 118..200);
        assert!(!crops[0].annotated);
        assert_eq!(crops[1].record.case_id, "a_1");
    }

    #[test]
    fn roi_covers_component_labels_and_masks_the_rest() {
        let (h, w) = (120, 120);
        // A diagonal lung: its dilation does not cover the window corners.
        let mask = mask_with(h, w, |y, x| (y as isize - x as isize).abs() < 3 && (30..90).contains(&y));
        let img = Tensor::zeros(&[1, h, w]).unwrap();
        let labels = LabelMap::new(h, w, (0..h * w).map(|i| (i % 3) as u8).collect()).unwrap();
        let crops = crop_lungs("d", &img, &labels, &mask, false).unwrap();
        let r = &crops[0].record;
        r.validate(Some(3)).unwrap();
        assert!(!r.roi.data[r.width() - 1], "corner far from the lung is outside the roi");
        for &i in &components(&mask)[0] {
            let (y, x) = (i / w - crops[0].rows.start, i % w - crops[0].cols.start);
            let j = y * r.width() + x;
            assert!(r.roi.data[j]);
            assert_eq!(r.labels.data[j], labels.data[i]);
        }
    }

    #[test]
    fn empty_mask_errors() {
        let mask = Mask::new(4, 4, vec![false; 16]).unwrap();
        let err = crop_lungs(
            "x",
            &Tensor::zeros(&[1, 4, 4]).unwrap(),
            &LabelMap::filled(4, 4, 0).unwrap(),
            &mask,
            true,
        )
        .unwrap_err();
        assert!(matches!(err, Error::EmptyMask));
    }

    #[test]
    fn dilation_matches_brute_force() {
        let (h, w, r) = (9, 11, 2);
        let plane: Vec<bool> = (0..h * w).map(|i| i % 17 == 3).collect();
        let fast = dilate(&plane, h, w, r);
        for y in 0..h {
            for x in 0..w {
                let slow = (y.saturating_sub(r)..(y + r + 1).min(h))
                    .any(|yy| (x.saturating_sub(r)..(x + r + 1).min(w)).any(|xx| plane[yy * w + xx]));
                assert_eq!(fast[y * w + x], slow, "({y}, {x})");
            }
        }
    }
}
