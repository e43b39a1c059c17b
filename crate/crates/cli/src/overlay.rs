//! Colour overlays written as binary PPM.

use dfcn::{LabelMap, Tensor, UNLABELED};

/// Class colours: blue, purple, green, yellow, orange, red.
pub const PALETTE: [[u8; 3]; 6] = [
    [0, 70, 255],
    [150, 40, 200],
    [0, 190, 60],
    [255, 230, 0],
    [255, 140, 0],
    [230, 0, 0],
];
const OTHER: [u8; 3] = [128, 128, 128];

pub fn class_color(class: u8) -> [u8; 3] {
    PALETTE.get(class as usize).copied().unwrap_or(OTHER)
}

/// Half-and-half blend of the min-max normalised first image channel with
/// the class colour. Unlabeled pixels keep the grey value.
pub fn overlay_rgb(image: &Tensor, labels: &LabelMap) -> Vec<u8> {
    let plane = image.channel(0);
    let (lo, hi) = plane
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut rgb = Vec::with_capacity(plane.len() * 3);
    for (&v, &l) in plane.iter().zip(&labels.data) {
        let g = ((v - lo) / span * 255.0).round().clamp(0.0, 255.0);
        if l == UNLABELED {
            rgb.extend([g as u8; 3]);
        } else {
            for c in class_color(l) {
                rgb.push(((g + c as f32) / 2.0).round() as u8);
            }
        }
    }
    rgb
}

/// P6 with the given comment lines in the header.
pub fn encode_ppm(height: usize, width: usize, rgb: &[u8], comments: &[String]) -> Vec<u8> {
    let mut out = b"P6\n".to_vec();
    for c in comments {
        out.extend(format!("# {c}\n").bytes());
    }
    out.extend(format!("{width} {height}\n255\n").bytes());
    out.extend_from_slice(rgb);
    out
}
