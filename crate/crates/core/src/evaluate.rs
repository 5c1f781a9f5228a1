//! Overlap metrics, region-aware false-positive analysis and bootstrap
//! ranking stability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibrate::ClassRegion;
use crate::error::{invalid, Error, Result};
use crate::postprocess::{binary_mask, connected_components, Connectivity};
use crate::volio::Volume;

/// Components smaller than this (1 cm^3) are ignored by the FP analysis.
pub const DEFAULT_FP_THRESHOLD_MM3: f64 = 1000.0;

pub const DEFAULT_BOOTSTRAP_SAMPLES: usize = 1000;

/// Dice overlap of two binary masks; two empty masks score 1.
pub fn dice(pred: &Volume, gt: &Volume) -> Result<f64> {
    pred.shape.ensure_eq(gt.shape)?;
    let (a, b) = (binary_mask(pred)?, binary_mask(gt)?);
    Ok(dice_slices(a, b))
}

pub(crate) fn dice_slices(a: &[u8], b: &[u8]) -> f64 {
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        na += x as usize;
        nb += y as usize;
        inter += (x & y) as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionClass {
    InRegion,
    OutOfRegion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpComponent {
    pub voxels: usize,
    pub volume_mm3: f64,
    pub median_score: f64,
    pub classification: RegionClass,
    /// First voxel in scan order, as (z, y, x).
    pub first_voxel: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpReport {
    pub class_id: u32,
    pub threshold_mm3: f64,
    pub margin_sigma: f64,
    pub components: Vec<FpComponent>,
    pub in_region: usize,
    pub out_of_region: usize,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Find predicted components of at least `threshold_mm3` and classify each by
/// the median slice score of its voxels against the (margin-widened) valid
/// region. Uses 26-connectivity.
pub fn fp_analysis(
    pred: &Volume,
    scores3d: &Volume,
    region: &ClassRegion,
    threshold_mm3: f64,
    margin_sigma: f64,
) -> Result<FpReport> {
    pred.shape.ensure_eq(scores3d.shape)?;
    let scores = scores3d.as_f32()?;
    let cc = connected_components(pred, Connectivity::TwentySix)?;
    let (lo, hi) = region.bounds(margin_sigma);
    let mut components = Vec::new();
    for members in cc.members() {
        let volume_mm3 = members.len() as f64 * cc.voxel_volume_mm3;
        if volume_mm3 < threshold_mm3 {
            continue;
        }
        let median_score = median(members.iter().map(|&i| f64::from(scores[i])).collect());
        let classification = if median_score >= lo && median_score <= hi {
            RegionClass::InRegion
        } else {
            RegionClass::OutOfRegion
        };
        let (z, y, x) = cc.shape.coords(members[0]);
        components.push(FpComponent {
            voxels: members.len(),
            volume_mm3,
            median_score,
            classification,
            first_voxel: [z, y, x],
        });
    }
    let out_of_region = components
        .iter()
        .filter(|c| c.classification == RegionClass::OutOfRegion)
        .count();
    Ok(FpReport {
        class_id: region.class_id,
        threshold_mm3,
        margin_sigma,
        in_region: components.len() - out_of_region,
        out_of_region,
        components,
    })
}

/// Percentage of out-of-region components removed going from `a` to `b`.
/// `None` when `a` has none to remove.
pub fn fp_reduction(a: &FpReport, b: &FpReport) -> Result<Option<f64>> {
    if a.class_id != b.class_id {
        return Err(invalid(format!(
            "reports cover different classes ({} vs {})",
            a.class_id, b.class_id
        )));
    }
    Ok(reduction_percent(a.out_of_region, b.out_of_region))
}

pub fn reduction_percent(before: usize, after: usize) -> Option<f64> {
    (before > 0).then(|| 100.0 * (1.0 - after as f64 / before as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmRanks {
    pub algorithm: usize,
    /// (rank, relative frequency) pairs, ranks ascending. Tied ranks are averaged, so
    /// half-integers occur.
    pub frequencies: Vec<(f64, f64)>,
    pub median_rank: f64,
    /// 2.5 % and 97.5 % quantiles of the bootstrap rank distribution.
    pub interval95: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub n_boot: usize,
    pub algorithms: Vec<AlgorithmRanks>,
}

/// Ranks of `values` (higher is better, rank 1 best); ties get the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn quantile_sorted(xs: &[f64], q: f64) -> f64 {
    // nearest-rank
    let idx = ((q * xs.len() as f64).ceil() as usize).clamp(1, xs.len()) - 1;
    xs[idx]
}

/// Bootstrap ranking stability over a case-by-algorithm score matrix
/// (`scores[case][algorithm]`, higher is better).
///
/// Each resample draws cases with replacement, ranks algorithms by their mean
/// score over the draw, and the rank distribution per algorithm is tallied.
pub fn bootstrap_ranking(scores: &[Vec<f64>], n_boot: usize, seed: u64) -> Result<RankTable> {
    let n_cases = scores.len();
    if n_cases < 2 {
        return Err(Error::Insufficient("ranking needs at least two cases".into()));
    }
    let n_alg = scores[0].len();
    if n_alg < 2 {
        return Err(Error::Insufficient("ranking needs at least two algorithms".into()));
    }
    if n_boot == 0 {
        return Err(invalid("n_boot must be positive"));
    }
    for (c, row) in scores.iter().enumerate() {
        if row.len() != n_alg {
            return Err(Error::LengthMismatch {
                expected: n_alg,
                actual: row.len(),
            });
        }
        if let Some(a) = row.iter().position(|v| v.is_nan()) {
            return Err(Error::NonFinite { index: c * n_alg + a });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_alg: Vec<Vec<f64>> = vec![Vec::with_capacity(n_boot); n_alg];
    let mut sums = vec![0.0; n_alg];
    for _ in 0..n_boot {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for _ in 0..n_cases {
            let c = rng.random_range(0..n_cases);
            for (s, v) in sums.iter_mut().zip(&scores[c]) {
                *s += v;
            }
        }
        let means: Vec<f64> = sums.iter().map(|s| s / n_cases as f64).collect();
        for (a, r) in average_ranks(&means).into_iter().enumerate() {
            per_alg[a].push(r);
        }
    }

    let algorithms = per_alg
        .into_iter()
        .enumerate()
        .map(|(algorithm, mut ranks)| {
            ranks.sort_by(f64::total_cmp);
            let mut frequencies: Vec<(f64, f64)> = Vec::new();
            for &r in &ranks {
                match frequencies.last_mut() {
                    Some((last, n)) if *last == r => *n += 1.0,
                    _ => frequencies.push((r, 1.0)),
                }
            }
            for f in &mut frequencies {
                f.1 /= n_boot as f64;
            }
            AlgorithmRanks {
                algorithm,
                frequencies,
                median_rank: median(ranks.clone()),
                interval95: (quantile_sorted(&ranks, 0.025), quantile_sorted(&ranks, 0.975)),
            }
        })
        .collect();
    Ok(RankTable { n_boot, algorithms })
}
