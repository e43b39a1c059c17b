//! Dense tensors, label maps and the `TSR1` on-disk format.
//!
//! Feature maps are `C×H×W`, convolution weights `OC×IC×KH×KW`, biases are
//! length-`OC` vectors; everything is row-major. Storage is `f32`; the same
//! code is instantiated at `f64` for gradient checking.

use std::fmt::Debug;
use std::fs;
use std::path::Path;

use num_traits::Float;

use crate::error::{Error, Result};

/// Class code marking a pixel without ground truth.
pub const UNLABELED: u8 = 255;

const MAGIC: &[u8; 4] = b"TSR1";
const DTYPE_F32: u8 = 1;
const DTYPE_U8: u8 = 2;

/// Real element type of a [`Tensor`].
pub trait Scalar:
    Float + Default + Debug + Send + Sync + std::iter::Sum + std::ops::AddAssign + 'static
{
    /// `c = alpha·a·b + beta·c` for an `m×k` by `k×n` product, arbitrary strides
    /// on `a`/`b`, row-major contiguous `c`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

fn span(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    debug_assert!(rs >= 0 && cs >= 0);
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= span(m, k, a_strides), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, b_strides), "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above bound every index the kernel touches.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn from_f64(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape("empty shape".into()));
    }
    if let Some(d) = shape.iter().find(|&&d| d == 0) {
        return Err(Error::InvalidShape(format!(
            "dimension {d} in {shape:?} must be at least 1"
        )));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn alloc(shape: &[usize], fill: T) -> Result<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![fill; n],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::alloc(shape, T::zero())
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_shape(shape)?;
        if data.len() != n {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Zero tensor shaped like `self`.
    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(C, H, W)` of a rank-3 feature map.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::InvalidShape(format!(
                "expected C×H×W, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let plane = self.data.len() / self.shape[0];
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let plane = self.data.len() / self.shape[0];
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn elementwise(&self, other: &Self, kind: Elementwise) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::InvalidShape(format!(
                "elementwise {kind:?}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let f: fn(T, T) -> T = match kind {
            Elementwise::Add => |a, b| a + b,
            Elementwise::Sub => |a, b| a - b,
            Elementwise::Mul => |a, b| a * b,
        };
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        let out = Tensor {
            shape: self.shape.clone(),
            data,
        };
        out.check_finite("elementwise result")?;
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, Elementwise::Add)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, Elementwise::Sub)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.elementwise(other, Elementwise::Mul)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::InvalidShape(format!(
                "add_assign: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!(
                "{what}: element {i} is {:?}",
                self.data[i]
            ))),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-pixel class codes; `0..C` are classes, [`UNLABELED`] means no ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        check_shape(&[height, width])?;
        if data.len() != height * width {
            return Err(Error::InvalidShape(format!(
                "label map {height}×{width} needs {} codes, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, code: u8) -> Result<Self> {
        Self::new(height, width, vec![code; height * width])
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Every code is a class below `num_classes` or [`UNLABELED`].
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&v| v != UNLABELED && v as usize >= num_classes)
        {
            Some(&label) => Err(Error::InvalidLabel {
                label,
                classes: num_classes,
            }),
            None => Ok(()),
        }
    }

    pub fn labeled_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != UNLABELED).count()
    }
}

/// Binary region-of-interest mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        check_shape(&[height, width])?;
        if data.len() != height * width {
            return Err(Error::InvalidShape(format!(
                "mask {height}×{width} needs {} entries, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn full(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![true; height * width])
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

fn header(dtype: u8, shape: &[usize]) -> Result<Vec<u8>> {
    if !(1..=4).contains(&shape.len()) {
        return Err(Error::Format(format!(
            "rank {} outside 1..=4",
            shape.len()
        )));
    }
    let mut out = Vec::with_capacity(6 + 4 * shape.len());
    out.extend_from_slice(MAGIC);
    out.push(dtype);
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d)
            .map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_f32(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let mut out = header(DTYPE_F32, t.shape())?;
    out.reserve(4 * t.len());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_u8(shape: &[usize], data: &[u8]) -> Result<Vec<u8>> {
    let mut out = header(DTYPE_U8, shape)?;
    out.extend_from_slice(data);
    Ok(out)
}

/// Parses a header and returns `(dtype, shape, payload offset)`.
fn decode_header(bytes: &[u8]) -> Result<(u8, Vec<usize>, usize)> {
    if bytes.len() < 6 {
        return Err(Error::Format("truncated header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let dtype = bytes[4];
    if dtype != DTYPE_F32 && dtype != DTYPE_U8 {
        return Err(Error::Format(format!("unknown dtype code {dtype}")));
    }
    let rank = bytes[5] as usize;
    if !(1..=4).contains(&rank) {
        return Err(Error::Format(format!("rank {rank} outside 1..=4")));
    }
    let end = 6 + 4 * rank;
    if bytes.len() < end {
        return Err(Error::Format("truncated header".into()));
    }
    let shape: Vec<usize> = bytes[6..end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    if shape.contains(&0) {
        return Err(Error::Format(format!("zero dimension in {shape:?}")));
    }
    Ok((dtype, shape, end))
}

fn expect_dtype(found: u8, expected: u8) -> Result<()> {
    if found != expected {
        return Err(Error::Format(format!(
            "dtype code mismatch: expected {expected}, found {found}"
        )));
    }
    Ok(())
}

fn payload_len(shape: &[usize], elem: usize, available: usize) -> Result<usize> {
    let need = shape.iter().product::<usize>() * elem;
    if available < need {
        return Err(Error::Format(format!(
            "truncated payload: need {need} bytes, have {available}"
        )));
    }
    Ok(need)
}

/// Decodes one f32 record from the front of `bytes`; returns it with the
/// number of bytes consumed.
pub fn decode_f32(bytes: &[u8]) -> Result<(Tensor<f32>, usize)> {
    let (dtype, shape, off) = decode_header(bytes)?;
    expect_dtype(dtype, DTYPE_F32)?;
    let len = payload_len(&shape, 4, bytes.len() - off)?;
    let data = bytes[off..off + len]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let t = Tensor::from_vec(&shape, data)?;
    t.check_finite("tensor payload")?;
    Ok((t, off + len))
}

pub fn decode_u8(bytes: &[u8]) -> Result<(Vec<usize>, Vec<u8>, usize)> {
    let (dtype, shape, off) = decode_header(bytes)?;
    expect_dtype(dtype, DTYPE_U8)?;
    let len = payload_len(&shape, 1, bytes.len() - off)?;
    Ok((shape, bytes[off..off + len].to_vec(), off + len))
}

fn exact<T>(what: (T, usize), total: usize) -> Result<T> {
    if what.1 != total {
        return Err(Error::Format(format!(
            "trailing bytes: {} after payload",
            total - what.1
        )));
    }
    Ok(what.0)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_tensor_file(t: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_f32(t)?)
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let bytes = read_bytes(path.as_ref())?;
    exact(decode_f32(&bytes)?, bytes.len())
}

fn read_plane(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read_bytes(path)?;
    let (shape, data, used) = decode_u8(&bytes)?;
    let (shape, data) = exact(((shape, data), used), bytes.len())?;
    match shape[..] {
        [h, w] => Ok((h, w, data)),
        [1, h, w] => Ok((h, w, data)),
        _ => Err(Error::Format(format!(
            "expected an H×W u8 plane, got dims {shape:?}"
        ))),
    }
}

pub fn write_label_file(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(
        path.as_ref(),
        &encode_u8(&[labels.height, labels.width], &labels.data)?,
    )
}

pub fn read_label_file(path: impl AsRef<Path>) -> Result<LabelMap> {
    let (h, w, data) = read_plane(path.as_ref())?;
    LabelMap::new(h, w, data)
}

pub fn write_mask_file(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let data: Vec<u8> = mask.data.iter().map(|&b| b as u8).collect();
    write_bytes(path.as_ref(), &encode_u8(&[mask.height, mask.width], &data)?)
}

pub fn read_mask_file(path: impl AsRef<Path>) -> Result<Mask> {
    let (h, w, data) = read_plane(path.as_ref())?;
    Mask::new(h, w, data.into_iter().map(|v| v != 0).collect())
}
