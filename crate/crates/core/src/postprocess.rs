//! Postprocessing baselines: largest-connected-component filtering and
//! score-based cropping of predictions outside a class's valid region.

use serde::{Deserialize, Serialize};

use crate::calibrate::ClassRegion;
use crate::error::{invalid, Error, Result};
use crate::evaluate::dice;
use crate::volio::{Semantic, Shape, Volume};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    /// Face neighbours only.
    Six,
    /// Face, edge and corner neighbours.
    #[default]
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Result<Self> {
        match n {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            other => Err(invalid(format!("connectivity must be 6 or 26, got {other}"))),
        }
    }

    pub fn offsets(self) -> Vec<[i64; 3]> {
        let mut v = Vec::new();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let manhattan = dz.abs() + dy.abs() + dx.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        v.push([dz, dy, dx]);
                    }
                }
            }
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentSet {
    pub shape: Shape,
    pub connectivity: Connectivity,
    /// Component id per voxel, 0 for background, ids contiguous from 1.
    pub labels: Vec<u32>,
    /// Voxel count per component; entry `i` belongs to id `i + 1`.
    pub counts: Vec<usize>,
    pub voxel_volume_mm3: f64,
}

impl ComponentSet {
    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn volume_mm3(&self, id: u32) -> f64 {
        self.counts[id as usize - 1] as f64 * self.voxel_volume_mm3
    }

    /// Voxel indices of each component, in scan order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.counts.len()];
        for (i, &l) in self.labels.iter().enumerate() {
            if l > 0 {
                out[l as usize - 1].push(i);
            }
        }
        out
    }
}

pub(crate) fn binary_mask(mask: &Volume) -> Result<&[u8]> {
    let m = mask.as_u8()?;
    if let Some(i) = m.iter().position(|&v| v > 1) {
        return Err(invalid(format!("mask is not binary: value {} at voxel {i}", m[i])));
    }
    Ok(m)
}

/// Label connected foreground components. Ids follow the z-major scan order
/// of each component's first voxel.
pub fn connected_components(mask: &Volume, connectivity: Connectivity) -> Result<ComponentSet> {
    let m = binary_mask(mask)?;
    let shape = mask.shape;
    let offsets = connectivity.offsets();
    let mut labels = vec![0u32; m.len()];
    let mut counts = Vec::new();
    let mut stack = Vec::new();
    let dims = [shape.nz as i64, shape.ny as i64, shape.nx as i64];
    for start in 0..m.len() {
        if m[start] == 0 || labels[start] != 0 {
            continue;
        }
        let id = counts.len() as u32 + 1;
        labels[start] = id;
        stack.push(start);
        let mut count = 0usize;
        while let Some(i) = stack.pop() {
            count += 1;
            let (z, y, x) = shape.coords(i);
            for d in &offsets {
                let (nz, ny, nx) = (z as i64 + d[0], y as i64 + d[1], x as i64 + d[2]);
                if nz < 0 || ny < 0 || nx < 0 || nz >= dims[0] || ny >= dims[1] || nx >= dims[2] {
                    continue;
                }
                let j = shape.index(nz as usize, ny as usize, nx as usize);
                if m[j] != 0 && labels[j] == 0 {
                    labels[j] = id;
                    stack.push(j);
                }
            }
        }
        counts.push(count);
    }
    Ok(ComponentSet {
        shape,
        connectivity,
        labels,
        counts,
        voxel_volume_mm3: mask.voxel_volume_mm3(),
    })
}

fn mask_like(template: &Volume, data: Vec<u8>) -> Result<Volume> {
    Volume::from_u8(template.shape, template.spacing, Semantic::Prediction, data)
}

/// Keep only the largest component. Equal sizes go to the component whose
/// first voxel comes first in scan order, which is the lower id.
pub fn largest_component_filter(mask: &Volume, connectivity: Connectivity) -> Result<Volume> {
    let cc = connected_components(mask, connectivity)?;
    let keep = cc
        .counts
        .iter()
        .enumerate()
        .fold(None::<(usize, usize)>, |best, (i, &c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((i, c)),
        })
        .map(|(i, _)| i as u32 + 1);
    let data = cc
        .labels
        .iter()
        .map(|&l| u8::from(l != 0 && Some(l) == keep))
        .collect();
    mask_like(mask, data)
}

/// Zero every voxel whose score lies outside the valid region widened by
/// `margin_sigma` sigmas.
pub fn bpr_crop(pred: &Volume, scores3d: &Volume, region: &ClassRegion, margin_sigma: f64) -> Result<Volume> {
    pred.shape.ensure_eq(scores3d.shape)?;
    let m = binary_mask(pred)?;
    let s = scores3d.as_f32()?;
    let (lo, hi) = region.bounds(margin_sigma);
    let data = m
        .iter()
        .zip(s)
        .map(|(&v, &sc)| {
            let sc = f64::from(sc);
            u8::from(v != 0 && sc >= lo && sc <= hi)
        })
        .collect();
    mask_like(pred, data)
}

/// A validation case for margin tuning.
#[derive(Clone, Debug)]
pub struct CropCase {
    pub pred: Volume,
    pub gt: Volume,
    pub scores3d: Volume,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginChoice {
    pub margin: f64,
    pub mean_dice: f64,
    pub table: Vec<(f64, f64)>,
}

/// Pick the crop margin with the best mean Dice; ties go to the larger margin.
pub fn tune_crop_margin(cases: &[CropCase], region: &ClassRegion, margins: &[f64]) -> Result<MarginChoice> {
    if margins.is_empty() {
        return Err(invalid("margin list is empty"));
    }
    if cases.is_empty() {
        return Err(Error::Insufficient("no validation cases".into()));
    }
    let mut table = Vec::with_capacity(margins.len());
    for &margin in margins {
        let mut total = 0.0;
        for c in cases {
            total += dice(&bpr_crop(&c.pred, &c.scores3d, region, margin)?, &c.gt)?;
        }
        table.push((margin, total / cases.len() as f64));
    }
    let (margin, mean_dice) = table
        .iter()
        .copied()
        .fold(None::<(f64, f64)>, |best, (m, d)| match best {
            Some((bm, bd)) if bd > d || (bd == d && bm >= m) => best,
            _ => Some((m, d)),
        })
        .expect("non-empty margins");
    Ok(MarginChoice {
        margin,
        mean_dice,
        table,
    })
}
