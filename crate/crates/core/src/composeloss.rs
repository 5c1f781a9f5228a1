//! Combining supervised terms with Region Loss terms.
//!
//! A dataset annotates some subset of the classes the network predicts. The
//! annotated classes get the ordinary supervised loss; every other class gets
//! the Region Loss, since its absence from the labels says nothing about where
//! it may appear. A support dataset annotates nothing and contributes only
//! Region Loss terms.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibrate::RegionConfig;
use crate::error::{invalid, Error, Result};
use crate::regionloss::{region_loss, weight, RegionLossParams};

/// Smoothing constant of the soft Dice term.
pub const DICE_SMOOTH: f64 = 1e-5;

/// Probability of drawing the support set in single-dataset training.
pub const DEFAULT_P_SUPPORT: f64 = 0.2;

/// Mean BCE plus soft Dice, with the gradient with respect to each prediction.
///
/// The Dice term is `1 - (2 I + s) / (U + s)` with `I = sum(yhat * y)`,
/// `U = sum(yhat) + sum(y)` and smoothing `s`, so an empty prediction of an
/// empty target costs nothing.
pub fn supervised_loss(yhat: &[f64], y: &[u8], eps: f64) -> Result<(f64, Vec<f64>)> {
    if yhat.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: y.len(),
            actual: yhat.len(),
        });
    }
    if let Some(i) = y.iter().position(|&v| v > 1) {
        return Err(invalid(format!("target holds non-binary value {} at {i}", y[i])));
    }
    if yhat.is_empty() {
        return Err(invalid("empty prediction"));
    }
    let n = yhat.len() as f64;
    let mut bce = 0.0;
    let mut inter = 0.0;
    let mut union = 0.0;
    for (&p, &t) in yhat.iter().zip(y) {
        let pc = p.clamp(eps, 1.0 - eps);
        let t = f64::from(t);
        bce -= t * pc.ln() + (1.0 - t) * (-pc).ln_1p();
        inter += p * t;
        union += p + t;
    }
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = union + DICE_SMOOTH;
    let value = bce / n + (1.0 - num / den);

    let den2 = den * den;
    let grad = yhat
        .iter()
        .zip(y)
        .map(|(&p, &t)| {
            let t = f64::from(t);
            let g_bce = if p > eps && p < 1.0 - eps {
                (-t / p + (1.0 - t) / (1.0 - p)) / n
            } else {
                0.0
            };
            let g_dice = -(2.0 * t * den - num) / den2;
            g_bce + g_dice
        })
        .collect();
    Ok((value, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub id: String,
    /// Empty for a support dataset.
    pub annotated: BTreeSet<u32>,
    #[serde(default = "one")]
    pub sampling_weight: f64,
}

fn one() -> f64 {
    1.0
}

impl DatasetSpec {
    pub fn labeled(id: impl Into<String>, classes: impl IntoIterator<Item = u32>) -> Self {
        DatasetSpec {
            id: id.into(),
            annotated: classes.into_iter().collect(),
            sampling_weight: 1.0,
        }
    }

    pub fn support(id: impl Into<String>) -> Self {
        DatasetSpec {
            id: id.into(),
            annotated: BTreeSet::new(),
            sampling_weight: 1.0,
        }
    }

    pub fn is_support(&self) -> bool {
        self.annotated.is_empty()
    }
}

/// Sampling weights proportional to 1 / sqrt(n_images).
pub fn inverse_sqrt_weights(n_images: &[usize]) -> Vec<f64> {
    n_images.iter().map(|&n| 1.0 / (n.max(1) as f64).sqrt()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TermKind {
    Supervised,
    Region { m: usize, n_hat: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassTerm {
    pub kind: TermKind,
    pub value: f64,
    /// Gradient with respect to this class's predictions.
    pub grad: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MdLoss {
    pub value: f64,
    pub supervised: f64,
    pub region: f64,
    pub terms: BTreeMap<u32, ClassTerm>,
}

/// Dataset-aware loss with precomputed per-voxel weights for the
/// unannotated classes.
pub fn md_loss_with_weights(
    yhats: &BTreeMap<u32, &[f64]>,
    labels: &BTreeMap<u32, &[u8]>,
    spec: &DatasetSpec,
    weights: &BTreeMap<u32, &[f64]>,
    params: &RegionLossParams,
) -> Result<MdLoss> {
    for c in &spec.annotated {
        if !yhats.contains_key(c) {
            return Err(Error::MissingChannel(*c));
        }
    }
    if labels.keys().ne(spec.annotated.iter()) {
        return Err(invalid(format!(
            "labels cover {:?} but dataset {} annotates {:?}",
            labels.keys().collect::<Vec<_>>(),
            spec.id,
            spec.annotated
        )));
    }
    let mut terms = BTreeMap::new();
    let mut supervised = 0.0;
    let mut region = 0.0;
    for (&c, &yhat) in yhats {
        if let Some(&y) = labels.get(&c) {
            let (value, grad) = supervised_loss(yhat, y, params.eps)?;
            supervised += value;
            terms.insert(
                c,
                ClassTerm {
                    kind: TermKind::Supervised,
                    value,
                    grad,
                },
            );
        } else {
            let w = weights.get(&c).ok_or(Error::MissingRegion(c))?;
            let rep = region_loss(yhat, w, params)?;
            region += rep.value;
            terms.insert(
                c,
                ClassTerm {
                    kind: TermKind::Region {
                        m: rep.m,
                        n_hat: rep.n_hat,
                    },
                    value: rep.value,
                    grad: rep.grad,
                },
            );
        }
    }
    Ok(MdLoss {
        value: supervised + region,
        supervised,
        region,
        terms,
    })
}

/// Dataset-aware loss: supervised terms for the annotated classes, Region Loss
/// for the rest. `scores` holds one slice score per voxel.
pub fn md_loss(
    yhats: &BTreeMap<u32, &[f64]>,
    labels: &BTreeMap<u32, &[u8]>,
    spec: &DatasetSpec,
    regions: &RegionConfig,
    scores: &[f64],
    params: &RegionLossParams,
) -> Result<MdLoss> {
    let mut owned = BTreeMap::new();
    for &c in yhats.keys() {
        if spec.annotated.contains(&c) {
            continue;
        }
        let r = regions.get(c)?;
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        owned.insert(c, scores.iter().map(|&s| weight(s, r)).collect::<Vec<f64>>());
    }
    let weights: BTreeMap<u32, &[f64]> = owned.iter().map(|(&c, w)| (c, w.as_slice())).collect();
    md_loss_with_weights(yhats, labels, spec, &weights, params)
}

/// Draw `n` dataset indices. Support datasets are chosen with probability
/// `p_support` (when both kinds exist); within each kind, datasets are drawn
/// in proportion to their sampling weight.
pub fn sample_batch(datasets: &[DatasetSpec], p_support: f64, seed: u64, n: usize) -> Result<Vec<usize>> {
    if datasets.is_empty() {
        return Err(invalid("no datasets to sample from"));
    }
    if !(0.0..=1.0).contains(&p_support) {
        return Err(invalid(format!("p_support must lie in [0, 1], got {p_support}")));
    }
    let (support, labeled): (Vec<usize>, Vec<usize>) = (0..datasets.len()).partition(|&i| datasets[i].is_support());
    let picker = |idx: &[usize]| -> Result<Option<WeightedIndex<f64>>> {
        if idx.is_empty() {
            return Ok(None);
        }
        WeightedIndex::new(idx.iter().map(|&i| datasets[i].sampling_weight))
            .map(Some)
            .map_err(|e| invalid(format!("bad sampling weights: {e}")))
    };
    let support_pick = picker(&support)?;
    let labeled_pick = picker(&labeled)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let use_support = match (&support_pick, &labeled_pick) {
            (Some(_), Some(_)) => u < p_support,
            (Some(_), None) => true,
            _ => false,
        };
        let choice = if use_support {
            support[support_pick.as_ref().unwrap().sample(&mut rng)]
        } else {
            labeled[labeled_pick.as_ref().unwrap().sample(&mut rng)]
        };
        out.push(choice);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::ClassRegion;

    #[test]
    fn perfect_prediction_costs_nothing() {
        let y = [0u8, 1, 1, 0, 1];
        let p: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
        let (v, _) = supervised_loss(&p, &y, 1e-7).unwrap();
        assert!(v.abs() < 1e-6, "{v}");
    }

    #[test]
    fn empty_target_empty_prediction() {
        let (v, g) = supervised_loss(&[0.0; 8], &[0; 8], 1e-7).unwrap();
        assert!(v.abs() < 1e-6);
        assert!(g.iter().all(|x| x.is_finite()));
        // the Dice part is exactly zero
        let bce = -(-1e-7f64).ln_1p();
        assert!((v - bce).abs() < 1e-15);
    }

    #[test]
    fn half_and_half() {
        let y = [1u8, 1, 0, 0];
        let p = [0.5; 4];
        let (v, _) = supervised_loss(&p, &y, 1e-7).unwrap();
        let dice = 1.0 - (2.0 * 1.0 + DICE_SMOOTH) / (2.0 + 2.0 + DICE_SMOOTH);
        assert!((v - (std::f64::consts::LN_2 + dice)).abs() < 1e-12);
    }

    #[test]
    fn supervised_rejects_bad_targets() {
        assert!(supervised_loss(&[0.5], &[2], 1e-7).is_err());
        assert!(supervised_loss(&[0.5, 0.1], &[1], 1e-7).is_err());
    }

    fn regions() -> RegionConfig {
        let mut r = RegionConfig::default();
        r.insert(ClassRegion::new(1, (30.0, 2.0), (50.0, 2.0), 0.0).unwrap());
        r.insert(ClassRegion::new(2, (60.0, 2.0), (70.0, 2.0), 0.0).unwrap());
        r
    }

    fn fixture() -> (Vec<f64>, Vec<f64>, Vec<u8>, Vec<u8>, Vec<f64>) {
        let p1 = vec![0.9, 0.2, 0.7, 0.1, 0.4, 0.3];
        let p2 = vec![0.3, 0.8, 0.05, 0.6, 0.2, 0.9];
        let y1 = vec![1, 0, 1, 0, 0, 0];
        let y2 = vec![0, 1, 0, 1, 0, 0];
        let s = vec![20.0, 35.0, 45.0, 55.0, 65.0, 90.0];
        (p1, p2, y1, y2, s)
    }

    #[test]
    fn eq4_compositions() {
        let (p1, p2, y1, y2, s) = fixture();
        let yh = BTreeMap::from([(1, p1.as_slice()), (2, p2.as_slice())]);
        let params = RegionLossParams::multi_dataset();

        let all = DatasetSpec::labeled("both", [1, 2]);
        let lab = BTreeMap::from([(1, y1.as_slice()), (2, y2.as_slice())]);
        let md = md_loss(&yh, &lab, &all, &regions(), &s, &params).unwrap();
        let sup = supervised_loss(&p1, &y1, params.eps).unwrap().0 + supervised_loss(&p2, &y2, params.eps).unwrap().0;
        assert_eq!(md.value.to_bits(), sup.to_bits());

        let none = DatasetSpec::support("support");
        let md = md_loss(&yh, &BTreeMap::new(), &none, &regions(), &s, &params).unwrap();
        let w1: Vec<f64> = s.iter().map(|&v| weight(v, regions().get(1).unwrap())).collect();
        let w2: Vec<f64> = s.iter().map(|&v| weight(v, regions().get(2).unwrap())).collect();
        let rl = region_loss(&p1, &w1, &params).unwrap().value + region_loss(&p2, &w2, &params).unwrap().value;
        assert_eq!(md.value.to_bits(), rl.to_bits());

        let one = DatasetSpec::labeled("first", [1]);
        let md = md_loss(&yh, &BTreeMap::from([(1, y1.as_slice())]), &one, &regions(), &s, &params).unwrap();
        let expect = supervised_loss(&p1, &y1, params.eps).unwrap().0 + region_loss(&p2, &w2, &params).unwrap().value;
        assert_eq!(md.value, expect);
        assert_eq!(md.terms[&1].kind, TermKind::Supervised);
        assert!(matches!(md.terms[&2].kind, TermKind::Region { .. }));
    }

    #[test]
    fn md_errors() {
        let (p1, _, y1, _, s) = fixture();
        let yh = BTreeMap::from([(1, p1.as_slice()), (3, p1.as_slice())]);
        let spec = DatasetSpec::labeled("d", [1]);
        let lab = BTreeMap::from([(1, y1.as_slice())]);
        let params = RegionLossParams::default();
        assert!(matches!(
            md_loss(&yh, &lab, &spec, &regions(), &s, &params),
            Err(Error::MissingRegion(3))
        ));
        let yh1 = BTreeMap::from([(2, p1.as_slice())]);
        assert!(matches!(
            md_loss(&yh1, &lab, &spec, &regions(), &s, &params),
            Err(Error::MissingChannel(1))
        ));
    }

    #[test]
    fn sampling_extremes_and_reproducibility() {
        let ds = [DatasetSpec::labeled("a", [1]), DatasetSpec::support("s")];
        assert!(sample_batch(&ds, 0.0, 1, 1000).unwrap().iter().all(|&i| i == 0));
        assert!(sample_batch(&ds, 1.0, 1, 1000).unwrap().iter().all(|&i| i == 1));
        assert_eq!(
            sample_batch(&ds, 0.3, 9, 500).unwrap(),
            sample_batch(&ds, 0.3, 9, 500).unwrap()
        );
        assert!(sample_batch(&[], 0.2, 1, 1).is_err());
        assert!(sample_batch(&ds, 1.5, 1, 1).is_err());
    }

    #[test]
    fn support_frequency_matches_p() {
        let ds = [DatasetSpec::labeled("a", [1]), DatasetSpec::support("s")];
        let draws = sample_batch(&ds, DEFAULT_P_SUPPORT, 42, 100_000).unwrap();
        let freq = draws.iter().filter(|&&i| i == 1).count() as f64 / draws.len() as f64;
        assert!((freq - 0.2).abs() <= 0.005, "{freq}");
    }

    #[test]
    fn weighted_labeled_sampling() {
        let mut a = DatasetSpec::labeled("a", [1]);
        let mut b = DatasetSpec::labeled("b", [2]);
        let w = inverse_sqrt_weights(&[100, 25]);
        a.sampling_weight = w[0];
        b.sampling_weight = w[1];
        let draws = sample_batch(&[a, b], 0.0, 3, 30_000).unwrap();
        let fb = draws.iter().filter(|&&i| i == 1).count() as f64 / 30_000.0;
        // weights 0.1 and 0.2
        assert!((fb - 2.0 / 3.0).abs() < 0.02, "{fb}");
    }
}
