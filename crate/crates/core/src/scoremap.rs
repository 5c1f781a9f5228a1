//! Per-slice anatomical scores and their 3D expansion.
//!
//! Scores run from 0 at the start of the pelvis to 100 at the top of the head
//! and must increase with slice index. Untrusted slices (typically those below
//! the pelvis, where the regressor has nothing to anchor on) are filled in by
//! a straight-line fit over the trusted ones.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::volio::{read_json, write_json, Semantic, Shape, Spacing, Volume, VoxelData};

pub const SCORE_MIN: f64 = 0.0;
pub const SCORE_MAX: f64 = 100.0;

/// Default violation size (score units) above which an isotonic repair is reported.
pub const DEFAULT_REPAIR_TOL: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SliceScoreMap {
    pub scores: Vec<f64>,
    pub valid: Vec<bool>,
    pub extrapolated: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct ScoreFile {
    scores: Vec<Option<f64>>,
    valid: Vec<bool>,
    #[serde(default)]
    extrapolated: Vec<bool>,
}

impl SliceScoreMap {
    pub fn new(scores: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        let n = scores.len();
        let m = SliceScoreMap {
            scores,
            valid,
            extrapolated: vec![false; n],
        };
        m.validate()?;
        Ok(m)
    }

    /// Every slice trusted.
    pub fn trusted(scores: Vec<f64>) -> Result<Self> {
        let n = scores.len();
        Self::new(scores, vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.scores.len();
        for (what, len) in [("valid", self.valid.len()), ("extrapolated", self.extrapolated.len())] {
            if len != n {
                return Err(invalid(format!("{what} has {len} entries for {n} slices")));
            }
        }
        for (z, (&s, &ok)) in self.scores.iter().zip(&self.valid).enumerate() {
            if ok && !(SCORE_MIN..=SCORE_MAX).contains(&s) {
                return Err(invalid(format!(
                    "trusted score {s} at slice {z} lies outside [{SCORE_MIN}, {SCORE_MAX}]"
                )));
            }
        }
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.scores.iter().all(|s| s.is_finite())
    }

    /// Sub-range of slices, e.g. for a cropped field of view.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.len() {
            return Err(invalid(format!(
                "slice range {range:?} outside 0..{}",
                self.len()
            )));
        }
        Ok(SliceScoreMap {
            scores: self.scores[range.clone()].to_vec(),
            valid: self.valid[range.clone()].to_vec(),
            extrapolated: self.extrapolated[range].to_vec(),
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let f: ScoreFile = read_json(path)?;
        let n = f.scores.len();
        let extrapolated = if f.extrapolated.is_empty() {
            vec![false; n]
        } else {
            f.extrapolated
        };
        let m = SliceScoreMap {
            scores: f.scores.into_iter().map(|s| s.unwrap_or(f64::NAN)).collect(),
            valid: f.valid,
            extrapolated,
        };
        m.validate()?;
        Ok(m)
    }

    /// Non-finite scores are written as `null`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = ScoreFile {
            scores: self
                .scores
                .iter()
                .map(|&s| if s.is_finite() { Some(s) } else { None })
                .collect(),
            valid: self.valid.clone(),
            extrapolated: self.extrapolated.clone(),
        };
        write_json(path, &f)
    }
}

/// Least-squares line over the trusted (slice, score) pairs.
fn fit_line(m: &SliceScoreMap) -> Result<(f64, f64)> {
    let pts: Vec<(f64, f64)> = m
        .scores
        .iter()
        .zip(&m.valid)
        .enumerate()
        .filter(|(_, (s, &ok))| ok && s.is_finite())
        .map(|(z, (&s, _))| (z as f64, s))
        .collect();
    if pts.len() < 2 {
        return Err(Error::Insufficient(format!(
            "line fit needs two trusted slices, found {}",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let zm = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let sm = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|&(z, s)| (z - zm) * (s - sm)).sum();
    let sxx: f64 = pts.iter().map(|&(z, _)| (z - zm) * (z - zm)).sum();
    let slope = sxy / sxx;
    if !(slope > 0.0) {
        return Err(invalid(format!(
            "fitted score slope {slope} is not increasing toward the head"
        )));
    }
    Ok((slope, sm - slope * zm))
}

/// Fill untrusted slices below the lowest trusted slice from a line fit over
/// all trusted slices.
pub fn extrapolate_below(m: &SliceScoreMap) -> Result<SliceScoreMap> {
    let (slope, intercept) = fit_line(m)?;
    let lowest = m.valid.iter().position(|&v| v).expect("fit_line saw trusted slices");
    let mut out = m.clone();
    for z in 0..lowest {
        out.scores[z] = intercept + slope * z as f64;
        out.extrapolated[z] = true;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepairWarning {
    /// Slices covered by the pooled run, half-open.
    pub slices: Range<usize>,
    /// Largest drop between an earlier and a later slice inside the run.
    pub violation: f64,
}

/// Isotonic (non-decreasing in z) least-squares projection of the scores by
/// pool-adjacent-violators. Non-finite scores are left untouched and skipped.
///
/// Every violating run is pooled so the result is always monotone; a warning
/// is emitted only for runs whose violation exceeds `tol`.
pub fn repair_monotonicity(m: &SliceScoreMap, tol: f64) -> (SliceScoreMap, Vec<RepairWarning>) {
    let idx: Vec<usize> = (0..m.len()).filter(|&z| m.scores[z].is_finite()).collect();

    // (sum, count) per pooled block, plus the position in `idx` it starts at.
    let mut blocks: Vec<(f64, usize, usize)> = Vec::new();
    for (pos, &z) in idx.iter().enumerate() {
        blocks.push((m.scores[z], 1, pos));
        while blocks.len() > 1 {
            let (s1, c1, _) = blocks[blocks.len() - 1];
            let (s0, c0, p0) = blocks[blocks.len() - 2];
            if s0 / c0 as f64 > s1 / c1 as f64 {
                blocks.pop();
                *blocks.last_mut().unwrap() = (s0 + s1, c0 + c1, p0);
            } else {
                break;
            }
        }
    }

    let mut out = m.clone();
    let mut warnings = Vec::new();
    for &(sum, count, start) in &blocks {
        if count < 2 {
            continue;
        }
        let members = &idx[start..start + count];
        let mut running_max = f64::NEG_INFINITY;
        let mut violation: f64 = 0.0;
        for &z in members {
            let s = m.scores[z];
            violation = violation.max(running_max - s);
            running_max = running_max.max(s);
        }
        let mean = sum / count as f64;
        for &z in members {
            out.scores[z] = mean;
        }
        if violation > tol {
            let slices = members[0]..members[count - 1] + 1;
            log::warn!(
                "score monotonicity repaired over slices {slices:?} (violation {violation:.3})"
            );
            warnings.push(RepairWarning { slices, violation });
        }
    }
    (out, warnings)
}

/// Broadcast slice scores to a voxel grid: every voxel of slice z gets `scores[z]`.
pub fn expand_to_volume(m: &SliceScoreMap, shape: Shape, spacing: Spacing) -> Result<Volume> {
    if m.len() != shape.nz {
        return Err(invalid(format!(
            "score map has {} slices, volume has {}",
            m.len(),
            shape.nz
        )));
    }
    let per = shape.slice_len();
    let data: Vec<f32> = m
        .scores
        .iter()
        .flat_map(|&s| std::iter::repeat_n(s as f32, per))
        .collect();
    Volume::from_f32(shape, spacing, Semantic::Scores3d, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Z,
    Y,
    X,
}

impl Axis {
    fn dim(self) -> usize {
        match self {
            Axis::Z => 0,
            Axis::Y => 1,
            Axis::X => 2,
        }
    }
}

/// Lattice-preserving spatial transforms. Values are moved, never interpolated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialTransform {
    Identity,
    Flip(Axis),
    /// `k` quarter turns in the plane of `from` and `to`, as numpy `rot90(v, k, axes=(from, to))`.
    Rot90 { from: Axis, to: Axis, k: i32 },
    /// Half-open index ranges per axis.
    Crop {
        z: Range<usize>,
        y: Range<usize>,
        x: Range<usize>,
    },
    /// Integer shift with zero fill.
    Translate { dz: i64, dy: i64, dx: i64 },
}

impl SpatialTransform {
    /// Inverse for the invertible transforms; crops have none.
    pub fn inverse(&self) -> Option<SpatialTransform> {
        use SpatialTransform::*;
        match self {
            Identity => Some(Identity),
            Flip(a) => Some(Flip(*a)),
            Rot90 { from, to, k } => Some(Rot90 {
                from: *from,
                to: *to,
                k: -k,
            }),
            Crop { .. } => None,
            Translate { dz, dy, dx } => Some(Translate {
                dz: -dz,
                dy: -dy,
                dx: -dx,
            }),
        }
    }
}

type Coord = [usize; 3];

/// Output extent plus a map from output coordinate to source coordinate.
fn plan(shape: Shape, t: &SpatialTransform) -> Result<([usize; 3], Box<dyn Fn(Coord) -> Option<Coord>>)> {
    let dims = shape.as_array();
    Ok(match t {
        SpatialTransform::Identity => (dims, Box::new(Some)),
        SpatialTransform::Flip(axis) => {
            let a = axis.dim();
            let n = dims[a];
            (
                dims,
                Box::new(move |mut c: Coord| {
                    c[a] = n - 1 - c[a];
                    Some(c)
                }),
            )
        }
        SpatialTransform::Rot90 { from, to, k } => {
            let (a, b) = (from.dim(), to.dim());
            if a == b {
                return Err(invalid("rotation plane needs two distinct axes"));
            }
            let turns = k.rem_euclid(4);
            let mut out = dims;
            if turns % 2 == 1 {
                out.swap(a, b);
            }
            let (na, nb) = (dims[a], dims[b]);
            (
                out,
                Box::new(move |c: Coord| {
                    let (p, q) = (c[a], c[b]);
                    let mut src = c;
                    let (sa, sb) = match turns {
                        0 => (p, q),
                        1 => (q, nb - 1 - p),
                        2 => (na - 1 - p, nb - 1 - q),
                        _ => (na - 1 - q, p),
                    };
                    src[a] = sa;
                    src[b] = sb;
                    Some(src)
                }),
            )
        }
        SpatialTransform::Crop { z, y, x } => {
            let ranges = [z.clone(), y.clone(), x.clone()];
            for (r, &n) in ranges.iter().zip(&dims) {
                if r.start >= r.end || r.end > n {
                    return Err(invalid(format!("crop range {r:?} outside 0..{n}")));
                }
            }
            let out = [z.len(), y.len(), x.len()];
            let off = [z.start, y.start, x.start];
            (
                out,
                Box::new(move |c: Coord| Some([c[0] + off[0], c[1] + off[1], c[2] + off[2]])),
            )
        }
        SpatialTransform::Translate { dz, dy, dx } => {
            let d = [*dz, *dy, *dx];
            (
                dims,
                Box::new(move |c: Coord| {
                    let mut src = [0usize; 3];
                    for i in 0..3 {
                        let s = c[i] as i64 - d[i];
                        if s < 0 || s >= dims[i] as i64 {
                            return None;
                        }
                        src[i] = s as usize;
                    }
                    Some(src)
                }),
            )
        }
    })
}

fn gather<T: Copy + Default>(src: &[T], in_shape: Shape, out_shape: Shape, map: &dyn Fn(Coord) -> Option<Coord>) -> Vec<T> {
    let mut out = Vec::with_capacity(out_shape.len());
    for z in 0..out_shape.nz {
        for y in 0..out_shape.ny {
            for x in 0..out_shape.nx {
                out.push(match map([z, y, x]) {
                    Some([sz, sy, sx]) => src[in_shape.index(sz, sy, sx)],
                    None => T::default(),
                });
            }
        }
    }
    out
}

/// Apply a lattice transform to any volume (image, label, weights, scores).
pub fn apply_transform(v: &Volume, t: &SpatialTransform) -> Result<Volume> {
    let (out_dims, map) = plan(v.shape, t)?;
    let out_shape = Shape::from(out_dims);
    let mut spacing = v.spacing;
    if let SpatialTransform::Rot90 { from, to, k } = t {
        if k.rem_euclid(2) == 1 {
            spacing.swap(from.dim(), to.dim());
        }
    }
    let data = match &v.data {
        VoxelData::U8(d) => VoxelData::U8(gather(d, v.shape, out_shape, map.as_ref())),
        VoxelData::F32(d) => VoxelData::F32(gather(d, v.shape, out_shape, map.as_ref())),
    };
    Volume::new(out_shape, spacing, v.semantic, data)
}
