//! Volume container and its on-disk form.
//!
//! A volume is stored as two files sharing a path stem: `<stem>.vol.json`
//! holds the header and `<stem>.vol.raw` the packed little-endian voxels in
//! z-major order (x varies fastest). Slice index z grows toward the head.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid extent as (nz, ny, nx).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Shape {
    pub nz: usize,
    pub ny: usize,
    pub nx: usize,
}

impl Shape {
    pub const fn new(nz: usize, ny: usize, nx: usize) -> Self {
        Shape { nz, ny, nx }
    }

    pub fn len(&self) -> usize {
        self.nz * self.ny * self.nx
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.ny * self.nx
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let x = idx % self.nx;
        let y = (idx / self.nx) % self.ny;
        let z = idx / self.slice_len();
        (z, y, x)
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nz, self.ny, self.nx]
    }

    pub fn ensure_eq(&self, other: Shape) -> Result<()> {
        if *self == other {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: self.as_array(),
                actual: other.as_array(),
            })
        }
    }
}

impl From<[usize; 3]> for Shape {
    fn from(a: [usize; 3]) -> Self {
        Shape::new(a[0], a[1], a[2])
    }
}

impl From<Shape> for [usize; 3] {
    fn from(s: Shape) -> Self {
        s.as_array()
    }
}

/// Physical voxel size in millimetres, (sz, sy, sx).
pub type Spacing = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    F32,
}

impl Dtype {
    pub fn size_of(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "u8" => Ok(Dtype::U8),
            "f32" => Ok(Dtype::F32),
            other => Err(Error::InvalidVolume(format!("unknown dtype {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Semantic {
    Image,
    Label,
    Prediction,
    Weights,
    Scores3d,
}

impl Semantic {
    /// Label and prediction masks stored as u8 must be binary.
    fn requires_binary_u8(self) -> bool {
        matches!(self, Semantic::Label | Semantic::Prediction)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum VoxelData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::U8(v) => v.len(),
            VoxelData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            VoxelData::U8(_) => Dtype::U8,
            VoxelData::F32(_) => Dtype::F32,
        }
    }

    fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            VoxelData::U8(v) => v.clone(),
            VoxelData::F32(v) => v.iter().flat_map(|x| x.to_bits().to_le_bytes()).collect(),
        }
    }

    fn from_le_bytes(dtype: Dtype, bytes: &[u8]) -> Self {
        match dtype {
            Dtype::U8 => VoxelData::U8(bytes.to_vec()),
            Dtype::F32 => VoxelData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_bits(u32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                    .collect(),
            ),
        }
    }

    /// Bitwise equality, so NaN payloads compare equal to themselves.
    pub fn bit_eq(&self, other: &VoxelData) -> bool {
        match (self, other) {
            (VoxelData::U8(a), VoxelData::U8(b)) => a == b,
            (VoxelData::F32(a), VoxelData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

/// Header as serialized to `<stem>.vol.json`. Field order is the key order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub shape: Shape,
    pub spacing_mm: Spacing,
    pub dtype: Dtype,
    pub semantic: Semantic,
}

#[derive(Deserialize)]
struct RawHeader {
    shape: Vec<usize>,
    spacing_mm: Vec<f64>,
    dtype: String,
    semantic: Semantic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub shape: Shape,
    pub spacing: Spacing,
    pub semantic: Semantic,
    pub data: VoxelData,
}

impl Volume {
    pub fn new(shape: Shape, spacing: Spacing, semantic: Semantic, data: VoxelData) -> Result<Self> {
        let v = Volume {
            shape,
            spacing,
            semantic,
            data,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn from_f32(shape: Shape, spacing: Spacing, semantic: Semantic, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, spacing, semantic, VoxelData::F32(data))
    }

    pub fn from_u8(shape: Shape, spacing: Spacing, semantic: Semantic, data: Vec<u8>) -> Result<Self> {
        Self::new(shape, spacing, semantic, VoxelData::U8(data))
    }

    pub fn zeros(shape: Shape, spacing: Spacing, semantic: Semantic, dtype: Dtype) -> Self {
        let data = match dtype {
            Dtype::U8 => VoxelData::U8(vec![0; shape.len()]),
            Dtype::F32 => VoxelData::F32(vec![0.0; shape.len()]),
        };
        Volume {
            shape,
            spacing,
            semantic,
            data,
        }
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    pub fn header(&self) -> VolumeHeader {
        VolumeHeader {
            shape: self.shape,
            spacing_mm: self.spacing,
            dtype: self.dtype(),
            semantic: self.semantic,
        }
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            VoxelData::F32(v) => Ok(v),
            VoxelData::U8(_) => Err(Error::InvalidVolume("expected an f32 volume, found u8".into())),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            VoxelData::U8(v) => Ok(v),
            VoxelData::F32(_) => Err(Error::InvalidVolume("expected a u8 volume, found f32".into())),
        }
    }

    /// Voxel values widened to f64, regardless of dtype.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            VoxelData::U8(v) => v.iter().map(|&x| f64::from(x)).collect(),
            VoxelData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
        }
    }

    pub fn bit_eq(&self, other: &Volume) -> bool {
        self.shape == other.shape
            && self.spacing.iter().zip(&other.spacing).all(|(a, b)| a.to_bits() == b.to_bits())
            && self.semantic == other.semantic
            && self.data.bit_eq(&other.data)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.shape;
        if s.nz == 0 || s.ny == 0 || s.nx == 0 {
            return Err(Error::InvalidVolume(format!(
                "shape {:?} has a zero extent",
                s.as_array()
            )));
        }
        if !self.spacing.iter().all(|&d| d.is_finite() && d > 0.0) {
            return Err(Error::InvalidVolume(format!(
                "spacing {:?} must be positive and finite",
                self.spacing
            )));
        }
        if self.data.len() != s.len() {
            return Err(Error::LengthMismatch {
                expected: s.len(),
                actual: self.data.len(),
            });
        }
        if self.semantic.requires_binary_u8() {
            if let VoxelData::U8(v) = &self.data {
                if let Some(i) = v.iter().position(|&x| x > 1) {
                    return Err(Error::InvalidVolume(format!(
                        "binary mask holds value {} at voxel {i}",
                        v[i]
                    )));
                }
            }
        }
        Ok(())
    }
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn header_path(stem: &Path) -> PathBuf {
    with_suffix(stem, ".vol.json")
}

pub fn raw_path(stem: &Path) -> PathBuf {
    with_suffix(stem, ".vol.raw")
}

pub fn write_volume(v: &Volume, stem: impl AsRef<Path>) -> Result<()> {
    let stem = stem.as_ref();
    v.validate()?;
    let hp = header_path(stem);
    let rp = raw_path(stem);
    write_json(&hp, &v.header())?;
    fs::write(&rp, v.data.to_le_bytes()).map_err(|e| Error::io(&rp, e))
}

pub fn read_volume(stem: impl AsRef<Path>) -> Result<Volume> {
    let stem = stem.as_ref();
    let hp = header_path(stem);
    let rp = raw_path(stem);
    let text = fs::read(&hp).map_err(|e| Error::io(&hp, e))?;
    let raw: RawHeader = serde_json::from_slice(&text).map_err(|e| Error::json(&hp, e))?;
    if raw.shape.len() != 3 || raw.spacing_mm.len() != 3 {
        return Err(Error::InvalidVolume(format!(
            "{}: shape and spacing_mm need three entries",
            hp.display()
        )));
    }
    let dtype = Dtype::parse(&raw.dtype)?;
    let shape = Shape::new(raw.shape[0], raw.shape[1], raw.shape[2]);
    let bytes = fs::read(&rp).map_err(|e| Error::io(&rp, e))?;
    let expected = shape.len() * dtype.size_of();
    if bytes.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            actual: bytes.len(),
        });
    }
    let spacing = [raw.spacing_mm[0], raw.spacing_mm[1], raw.spacing_mm[2]];
    Volume::new(shape, spacing, raw.semantic, VoxelData::from_le_bytes(dtype, &bytes))
}

/// Pretty JSON with a trailing newline. Struct field order fixes key order,
/// so repeated serialization is byte-stable.
pub fn to_json_bytes<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable value");
    out.push(b'\n');
    out
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_json_bytes(value)).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::json(path, e))
}
