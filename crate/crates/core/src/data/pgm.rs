//! Minimal PGM (P2/P5, 8- or 16-bit) reader for importing slices and masks.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Mask, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct PgmImage {
    pub height: usize,
    pub width: usize,
    pub maxval: u16,
    pub data: Vec<u16>,
}

impl PgmImage {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut token = || -> Result<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("pgm: truncated header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = token()?;
        let num = |s: String| -> Result<usize> {
            s.parse().map_err(|_| Error::Format(format!("pgm: bad number {s:?}")))
        };
        let width = num(token()?)?;
        let height = num(token()?)?;
        let maxval = num(token()?)?;
        if !(1..=65535).contains(&maxval) || width == 0 || height == 0 {
            return Err(Error::Format(format!("pgm: bad header {width}×{height} max {maxval}")));
        }
        let n = width * height;
        let data: Vec<u16> = match magic.as_str() {
            "P5" => {
                // Exactly one whitespace byte separates the header from the raster.
                let body = bytes.get(pos + 1..).unwrap_or_default();
                let bpp = if maxval > 255 { 2 } else { 1 };
                if body.len() < n * bpp {
                    return Err(Error::Format(format!(
                        "pgm: truncated payload: need {} bytes, have {}",
                        n * bpp,
                        body.len()
                    )));
                }
                if bpp == 1 {
                    body[..n].iter().map(|&b| b as u16).collect()
                } else {
                    body[..2 * n]
                        .chunks_exact(2)
                        .map(|c| u16::from_be_bytes([c[0], c[1]]))
                        .collect()
                }
            }
            "P2" => {
                let body = String::from_utf8_lossy(bytes.get(pos..).unwrap_or_default()).into_owned();
                let vals = body
                    .split_ascii_whitespace()
                    .take(n)
                    .map(|s| s.parse::<u16>().map_err(|_| Error::Format(format!("pgm: bad sample {s:?}"))))
                    .collect::<Result<Vec<_>>>()?;
                if vals.len() < n {
                    return Err(Error::Format("pgm: truncated payload".into()));
                }
                vals
            }
            other => return Err(Error::Format(format!("pgm: unsupported magic {other:?}"))),
        };
        if data.iter().any(|&v| v as usize > maxval) {
            return Err(Error::Format("pgm: sample exceeds maxval".into()));
        }
        Ok(PgmImage {
            height,
            width,
            maxval: maxval as u16,
            data,
        })
    }

    /// Raw sample values as a `1×H×W` image.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_vec(
            &[1, self.height, self.width],
            self.data.iter().map(|&v| v as f32).collect(),
        )
    }

    /// Sample values as class codes; needs an 8-bit file.
    pub fn to_labels(&self) -> Result<LabelMap> {
        if self.maxval > 255 {
            return Err(Error::Format("pgm: label maps must be 8-bit".into()));
        }
        LabelMap::new(self.height, self.width, self.data.iter().map(|&v| v as u8).collect())
    }

    /// Nonzero samples are inside the mask.
    pub fn to_mask(&self) -> Result<Mask> {
        Mask::new(self.height, self.width, self.data.iter().map(|&v| v != 0).collect())
    }
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<PgmImage> {
    let path = path.as_ref();
    PgmImage::parse(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
