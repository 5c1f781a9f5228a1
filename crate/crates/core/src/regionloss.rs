//! Region Loss: a top-k weighted BCE that penalizes foreground predicted in
//! body regions where a class cannot occur.
//!
//! Each voxel gets a weight from its slice score: zero inside the class's
//! valid interval, rising smoothly to one outside it along a Gaussian
//! complement whose width is the spread of the calibration extremes. Inside
//! the invalid region the ground truth is taken to be zero, so the per-voxel
//! loss is `-w * ln(1 - yhat)`. Only the largest k percent of these values
//! contribute, which keeps a few confident false positives from being
//! averaged away by many near-zero ones.

use serde::{Deserialize, Serialize};

use crate::calibrate::ClassRegion;
use crate::error::{invalid, Error, Result};
use crate::scoremap::SliceScoreMap;
use crate::volio::{Semantic, Shape, Spacing, Volume};

pub const DEFAULT_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionLossParams {
    pub alpha: f64,
    pub k_percent: f64,
    pub eps: f64,
}

impl RegionLossParams {
    /// Multi-dataset training defaults: alpha 1, top 1 %.
    pub const fn multi_dataset() -> Self {
        RegionLossParams {
            alpha: 1.0,
            k_percent: 1.0,
            eps: DEFAULT_EPS,
        }
    }

    /// Single-dataset training with a support set: alpha 10, top 1 %.
    pub const fn single_dataset() -> Self {
        RegionLossParams {
            alpha: 10.0,
            k_percent: 1.0,
            eps: DEFAULT_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            return Err(invalid(format!("k_percent must lie in (0, 100], got {}", self.k_percent)));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(invalid(format!("eps must lie in (0, 0.5), got {}", self.eps)));
        }
        Ok(())
    }
}

impl Default for RegionLossParams {
    fn default() -> Self {
        Self::multi_dataset()
    }
}

/// 1 - exp(-d^2 / (2 sigma^2)); a zero sigma degenerates to a step.
fn gaussian_complement(d: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 1.0;
    }
    -(-(d * d) / (2.0 * sigma * sigma)).exp_m1()
}

/// Voxel weight for slice score `s`.
pub fn weight(s: f64, r: &ClassRegion) -> f64 {
    let (lo, hi) = (r.s_min(), r.s_max());
    if s < lo {
        gaussian_complement(s - lo, r.sigma_min)
    } else if s > hi {
        gaussian_complement(s - hi, r.sigma_max)
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightField {
    pub shape: Shape,
    pub class_id: u32,
    pub weights: Vec<f64>,
}

impl WeightField {
    pub fn to_volume(&self, spacing: Spacing) -> Result<Volume> {
        Volume::from_f32(
            self.shape,
            spacing,
            Semantic::Weights,
            self.weights.iter().map(|&w| w as f32).collect(),
        )
    }
}

pub fn weight_field(scores3d: &Volume, r: &ClassRegion) -> Result<WeightField> {
    let s = scores3d.as_f32()?;
    let weights = s
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if v.is_finite() {
                Ok(weight(f64::from(v), r))
            } else {
                Err(Error::NonFinite { index: i })
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(WeightField {
        shape: scores3d.shape,
        class_id: r.class_id,
        weights,
    })
}

/// Weights per slice, for callers that keep scores slice-constant.
pub fn slice_weights(m: &SliceScoreMap, r: &ClassRegion) -> Result<Vec<f64>> {
    m.scores
        .iter()
        .enumerate()
        .map(|(z, &s)| {
            if s.is_finite() {
                Ok(weight(s, r))
            } else {
                Err(Error::NonFinite { index: z })
            }
        })
        .collect()
}

#[inline]
fn clamp_pred(yhat: f64, eps: f64) -> f64 {
    yhat.clamp(0.0, 1.0 - eps)
}

/// Weighted BCE against a zero target. Predictions are capped at `1 - eps`
/// so the loss stays finite; a zero prediction costs exactly nothing.
#[inline]
pub fn wbce(yhat: f64, w: f64, eps: f64) -> f64 {
    w * -(-clamp_pred(yhat, eps)).ln_1p()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub value: f64,
    /// Number of voxels that entered the top-k mean.
    pub m: usize,
    /// Number of voxels with positive weight.
    pub n_hat: usize,
    /// Selected voxel indices, largest loss first.
    pub selected: Vec<usize>,
    /// dRL/dyhat per voxel; zero off the selected set and where the cap saturates.
    pub grad: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub value: f64,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N_hat")]
    pub n_hat: usize,
}

impl LossReport {
    pub fn summary(&self) -> LossSummary {
        LossSummary {
            value: self.value,
            m: self.m,
            n_hat: self.n_hat,
        }
    }

    pub fn grad_volume(&self, shape: Shape, spacing: Spacing) -> Result<Volume> {
        Volume::from_f32(
            shape,
            spacing,
            Semantic::Weights,
            self.grad.iter().map(|&g| g as f32).collect(),
        )
    }
}

/// Size of the top-k set for `n_hat` candidates.
pub fn topk_count(n_hat: usize, k_percent: f64) -> usize {
    if n_hat == 0 {
        return 0;
    }
    // The small slack absorbs representation error in k (e.g. 0.29 * 100).
    let m = ((n_hat as f64) * k_percent / 100.0 + 1e-9).floor() as usize;
    m.clamp(1, n_hat)
}

pub fn region_loss(yhat: &[f64], weights: &[f64], p: &RegionLossParams) -> Result<LossReport> {
    p.validate()?;
    if yhat.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: weights.len(),
            actual: yhat.len(),
        });
    }
    let mut cand: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(i, &w)| (wbce(yhat[i], w, p.eps), i))
        .collect();
    let n_hat = cand.len();
    let mut grad = vec![0.0; yhat.len()];
    if n_hat == 0 {
        return Ok(LossReport {
            value: 0.0,
            m: 0,
            n_hat,
            selected: Vec::new(),
            grad,
        });
    }
    let m = topk_count(n_hat, p.k_percent);

    // Largest loss first, ties by ascending voxel index: a strict total order,
    // so the selected set and the summation order are deterministic.
    let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if m < n_hat {
        cand.select_nth_unstable_by(m - 1, order);
        cand.truncate(m);
    }
    cand.sort_unstable_by(order);

    let sum: f64 = cand.iter().map(|c| c.0).sum();
    let value = p.alpha * (sum / m as f64);
    let scale = p.alpha / m as f64;
    for &(_, i) in &cand {
        let y = yhat[i];
        if y >= 0.0 && y < 1.0 - p.eps {
            grad[i] = scale * weights[i] / (1.0 - y);
        }
    }
    Ok(LossReport {
        value,
        m,
        n_hat,
        selected: cand.into_iter().map(|c| c.1).collect(),
        grad,
    })
}

/// Volume-level entry point: `yhat` is an f32 probability map.
pub fn region_loss_volume(yhat: &Volume, wf: &WeightField, p: &RegionLossParams) -> Result<LossReport> {
    wf.shape.ensure_eq(yhat.shape)?;
    region_loss(&yhat.to_f64(), &wf.weights, p)
}
