//! Valid-region calibration from a labeled corpus.
//!
//! For each class the lowest and highest foreground slice score of every
//! training image are gathered; their means and standard deviations define
//! the valid interval and the width of the Gaussian fall-off around it.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scoremap::SliceScoreMap;
use crate::volio::{read_json, write_json, Volume};

pub const DEFAULT_SIGMA_FLOOR: f64 = 0.5;

/// Boundary offsets (in multiples of sigma) swept when choosing a class's valid region.
pub const OFFSET_GRID: [f64; 10] = [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 6.0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassRegion {
    pub class_id: u32,
    pub mu_min: f64,
    pub sigma_min: f64,
    pub mu_max: f64,
    pub sigma_max: f64,
    pub offset_n: f64,
}

impl ClassRegion {
    pub fn new(
        class_id: u32,
        (mu_min, sigma_min): (f64, f64),
        (mu_max, sigma_max): (f64, f64),
        offset_n: f64,
    ) -> Result<Self> {
        let r = ClassRegion {
            class_id,
            mu_min,
            sigma_min,
            mu_max,
            sigma_max,
            offset_n,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.mu_min, self.sigma_min, self.mu_max, self.sigma_max, self.offset_n];
        if !all.iter().all(|v| v.is_finite()) {
            return Err(invalid(format!("class {}: non-finite region parameter", self.class_id)));
        }
        if self.sigma_min < 0.0 || self.sigma_max < 0.0 || self.offset_n < 0.0 {
            return Err(invalid(format!(
                "class {}: sigmas and offset must be non-negative",
                self.class_id
            )));
        }
        if self.s_min() > self.s_max() {
            return Err(invalid(format!(
                "class {}: S_min {} exceeds S_max {}",
                self.class_id,
                self.s_min(),
                self.s_max()
            )));
        }
        Ok(())
    }

    pub fn s_min(&self) -> f64 {
        self.mu_min - self.offset_n * self.sigma_min
    }

    pub fn s_max(&self) -> f64 {
        self.mu_max + self.offset_n * self.sigma_max
    }

    /// Valid interval widened by `margin` sigmas on each side.
    pub fn bounds(&self, margin: f64) -> (f64, f64) {
        (
            self.s_min() - margin * self.sigma_min,
            self.s_max() + margin * self.sigma_max,
        )
    }

    pub fn with_offset(&self, offset_n: f64) -> Result<Self> {
        let mut r = *self;
        r.offset_n = offset_n;
        r.validate()?;
        Ok(r)
    }

    pub fn contains(&self, s: f64) -> bool {
        self.s_min() <= s && s <= self.s_max()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RegionEntry {
    mu_min: f64,
    sigma_min: f64,
    mu_max: f64,
    sigma_max: f64,
    offset_n: f64,
    s_min: f64,
    s_max: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub corpus: String,
    pub n_images: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegionConfig {
    pub classes: BTreeMap<u32, ClassRegion>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct RegionFile {
    // serde_json writes integer keys as strings, in numeric order.
    classes: BTreeMap<u32, RegionEntry>,
    provenance: Provenance,
}

impl RegionConfig {
    pub fn get(&self, class_id: u32) -> Result<&ClassRegion> {
        self.classes.get(&class_id).ok_or(Error::MissingRegion(class_id))
    }

    pub fn insert(&mut self, r: ClassRegion) {
        self.classes.insert(r.class_id, r);
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, &self.to_file())
    }

    pub fn to_json_bytes(&self) -> Vec<u8> {
        crate::volio::to_json_bytes(&self.to_file())
    }

    fn to_file(&self) -> RegionFile {
        let mut classes = BTreeMap::new();
        for (id, r) in &self.classes {
            classes.insert(
                *id,
                RegionEntry {
                    mu_min: r.mu_min,
                    sigma_min: r.sigma_min,
                    mu_max: r.mu_max,
                    sigma_max: r.sigma_max,
                    offset_n: r.offset_n,
                    s_min: r.s_min(),
                    s_max: r.s_max(),
                },
            );
        }
        RegionFile {
            classes,
            provenance: self.provenance.clone(),
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let f: RegionFile = read_json(path)?;
        let mut classes = BTreeMap::new();
        for (id, e) in f.classes {
            let r = ClassRegion::new(id, (e.mu_min, e.sigma_min), (e.mu_max, e.sigma_max), e.offset_n)?;
            let tol = 1e-9 * (1.0 + e.s_min.abs().max(e.s_max.abs()));
            if (r.s_min() - e.s_min).abs() > tol || (r.s_max() - e.s_max).abs() > tol {
                return Err(invalid(format!(
                    "class {id}: stored s_min/s_max disagree with mu, sigma and offset"
                )));
            }
            classes.insert(id, r);
        }
        Ok(RegionConfig {
            classes,
            provenance: f.provenance,
        })
    }
}

/// One labeled image: binary masks per class plus its slice scores.
#[derive(Clone, Debug)]
pub struct LabeledCase {
    pub labels: BTreeMap<u32, Volume>,
    pub scores: SliceScoreMap,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Extremes {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
    /// Indices of cases without foreground for the class.
    pub skipped: Vec<usize>,
}

fn case_extremes(case: &LabeledCase, class_id: u32) -> Result<Option<(f64, f64)>> {
    let Some(label) = case.labels.get(&class_id) else {
        return Ok(None);
    };
    let mask = label.as_u8()?;
    if case.scores.len() != label.shape.nz {
        return Err(invalid(format!(
            "score map has {} slices, label has {}",
            case.scores.len(),
            label.shape.nz
        )));
    }
    let per = label.shape.slice_len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (z, slice) in mask.chunks_exact(per).enumerate() {
        if slice.iter().any(|&v| v != 0) {
            let s = case.scores.scores[z];
            if !s.is_finite() {
                return Err(Error::NonFinite { index: z });
            }
            lo = lo.min(s);
            hi = hi.max(s);
        }
    }
    Ok(lo.is_finite().then_some((lo, hi)))
}

/// Per-image minimum and maximum foreground slice score for one class.
pub fn collect_extremes(cases: &[LabeledCase], class_id: u32) -> Result<Extremes> {
    let per_case: Vec<Option<(f64, f64)>> = cases
        .par_iter()
        .map(|c| case_extremes(c, class_id))
        .collect::<Result<_>>()?;
    let mut out = Extremes::default();
    for (i, e) in per_case.into_iter().enumerate() {
        match e {
            Some((lo, hi)) => {
                out.mins.push(lo);
                out.maxs.push(hi);
            }
            None => {
                log::warn!("case {i} has no foreground for class {class_id}; skipped");
                out.skipped.push(i);
            }
        }
    }
    if out.mins.is_empty() {
        return Err(Error::Insufficient(format!(
            "no case contributes foreground for class {class_id}"
        )));
    }
    Ok(out)
}

/// Mean and sample (n - 1) standard deviation; a single value has no spread.
pub fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, Some((ss / (n - 1.0)).sqrt()))
}

pub fn fit_region(class_id: u32, mins: &[f64], maxs: &[f64], offset_n: f64, sigma_floor: f64) -> Result<ClassRegion> {
    if mins.is_empty() || maxs.is_empty() {
        return Err(Error::Insufficient("fit_region needs at least one image".into()));
    }
    if !(sigma_floor >= 0.0) {
        return Err(invalid("sigma_floor must be non-negative"));
    }
    if let Some(i) = mins.iter().chain(maxs).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index: i });
    }
    // Sorting first makes the float sums independent of input order.
    let sorted = |xs: &[f64]| {
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let (mu_min, sd_min) = mean_std(&sorted(mins));
    let (mu_max, sd_max) = mean_std(&sorted(maxs));
    let floor = |sd: Option<f64>| sd.unwrap_or(sigma_floor).max(sigma_floor);
    ClassRegion::new(class_id, (mu_min, floor(sd_min)), (mu_max, floor(sd_max)), offset_n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub offset: f64,
    pub mean_dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub class_id: u32,
    pub rows: Vec<SweepRow>,
    pub best_offset: f64,
}

/// Evaluate each boundary offset and keep the one with the highest mean Dice.
/// Ties go to the smaller offset.
pub fn sweep_offsets<F>(class_id: u32, offsets: &[f64], mut evaluator: F) -> Result<SweepTable>
where
    F: FnMut(f64) -> Result<f64>,
{
    if offsets.is_empty() {
        return Err(invalid("offset list is empty"));
    }
    if let Some(o) = offsets.iter().find(|o| !(0.0..=6.0).contains(*o)) {
        return Err(invalid(format!("offset {o} outside [0, 6]")));
    }
    let mut rows = Vec::with_capacity(offsets.len());
    for &offset in offsets {
        let mean_dice = evaluator(offset)?;
        if !mean_dice.is_finite() {
            return Err(invalid(format!("evaluator returned {mean_dice} at offset {offset}")));
        }
        rows.push(SweepRow { offset, mean_dice });
    }
    let best = rows
        .iter()
        .fold(None::<&SweepRow>, |best, r| match best {
            Some(b) if b.mean_dice > r.mean_dice => Some(b),
            Some(b) if b.mean_dice == r.mean_dice && b.offset <= r.offset => Some(b),
            _ => Some(r),
        })
        .expect("non-empty rows");
    Ok(SweepTable {
        class_id,
        best_offset: best.offset,
        rows,
    })
}
