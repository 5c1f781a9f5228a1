//! Paired baseline / Region Loss runs on a phantom benchmark.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{collect_extremes, fit_region, LabeledCase, Provenance, RegionConfig, DEFAULT_SIGMA_FLOOR};
use crate::error::{invalid, Result};
use crate::evaluate::{dice, fp_analysis, reduction_percent};
use crate::postprocess::bpr_crop;
use crate::scoremap::{expand_to_volume, SliceScoreMap};
use crate::trainer::{binarize, predict, train, LossMode, MlpModel, SupportCase, TrainCase, TrainConfig, TrainingCorpus};
use crate::volio::Volume;

/// Fit one region per class from labeled cases.
pub fn calibrate_cases(cases: &[LabeledCase], classes: &[u32], offset_n: f64, corpus: &str) -> Result<RegionConfig> {
    let mut cfg = RegionConfig {
        classes: BTreeMap::new(),
        provenance: Provenance {
            corpus: corpus.to_string(),
            n_images: cases.len(),
        },
    };
    for &c in classes {
        let e = collect_extremes(cases, c)?;
        cfg.insert(fit_region(c, &e.mins, &e.maxs, offset_n, DEFAULT_SIGMA_FLOOR)?);
    }
    Ok(cfg)
}

/// A test volume with ground truth.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub name: String,
    pub image: Volume,
    pub labels: BTreeMap<u32, Volume>,
    pub scores: SliceScoreMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub class_id: u32,
    pub out_of_region: usize,
    pub in_region: usize,
    pub dice: f64,
    /// Dice of the prediction restricted to the valid region.
    pub dice_in_region: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub threshold_mm3: f64,
    pub margin_sigma: f64,
    pub prob_threshold: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            threshold_mm3: crate::evaluate::DEFAULT_FP_THRESHOLD_MM3,
            margin_sigma: 0.0,
            prob_threshold: 0.5,
        }
    }
}

pub fn evaluate_model(model: &MlpModel, cases: &[EvalCase], regions: &RegionConfig, s: &EvalSettings) -> Result<Vec<Vec<CaseMetrics>>> {
    cases
        .par_iter()
        .map(|case| {
            let probs = predict(model, &case.image)?;
            let scores3d = expand_to_volume(&case.scores, case.image.shape, case.image.spacing)?;
            let mut out = Vec::new();
            for (&c, gt) in &case.labels {
                let prob = probs.get(&c).ok_or(crate::Error::MissingChannel(c))?;
                let pred = binarize(prob, s.prob_threshold)?;
                let region = regions.get(c)?;
                let fp = fp_analysis(&pred, &scores3d, region, s.threshold_mm3, s.margin_sigma)?;
                let cropped = bpr_crop(&pred, &scores3d, region, 0.0)?;
                out.push(CaseMetrics {
                    class_id: c,
                    out_of_region: fp.out_of_region,
                    in_region: fp.in_region,
                    dice: dice(&pred, gt)?,
                    dice_in_region: dice(&cropped, gt)?,
                });
            }
            Ok(out)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseComparison {
    pub name: String,
    pub baseline: CaseMetrics,
    pub region_loss: CaseMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub cases: Vec<CaseComparison>,
    pub baseline_out_of_region: usize,
    pub region_loss_out_of_region: usize,
    /// `None` when the baseline has no out-of-region components.
    pub reduction_percent: Option<f64>,
    pub baseline_dice_in_region: f64,
    pub region_loss_dice_in_region: f64,
    pub dice_drop: f64,
}

pub fn compare(names: &[String], baseline: &[Vec<CaseMetrics>], region_loss: &[Vec<CaseMetrics>]) -> Result<Comparison> {
    if baseline.len() != names.len() || region_loss.len() != names.len() {
        return Err(invalid("metric lists do not match the case list"));
    }
    let mut cases = Vec::new();
    for ((name, b), r) in names.iter().zip(baseline).zip(region_loss) {
        if b.len() != r.len() {
            return Err(invalid(format!("class lists differ for {name}")));
        }
        for (bm, rm) in b.iter().zip(r) {
            cases.push(CaseComparison {
                name: name.clone(),
                baseline: bm.clone(),
                region_loss: rm.clone(),
            });
        }
    }
    if cases.is_empty() {
        return Err(invalid("nothing to compare"));
    }
    let n = cases.len() as f64;
    let b_fp = cases.iter().map(|c| c.baseline.out_of_region).sum();
    let r_fp = cases.iter().map(|c| c.region_loss.out_of_region).sum();
    let b_dice = cases.iter().map(|c| c.baseline.dice_in_region).sum::<f64>() / n;
    let r_dice = cases.iter().map(|c| c.region_loss.dice_in_region).sum::<f64>() / n;
    Ok(Comparison {
        cases,
        baseline_out_of_region: b_fp,
        region_loss_out_of_region: r_fp,
        reduction_percent: reduction_percent(b_fp, r_fp),
        baseline_dice_in_region: b_dice,
        region_loss_dice_in_region: r_dice,
        dice_drop: b_dice - r_dice,
    })
}

/// Everything needed for a paired run.
#[derive(Clone, Debug)]
pub struct PairedInput {
    pub train: Vec<TrainCase>,
    pub support: Vec<SupportCase>,
    pub test: Vec<EvalCase>,
    pub regions: RegionConfig,
}

#[derive(Clone, Debug)]
pub struct PairedOutcome {
    pub baseline: MlpModel,
    pub region_loss: MlpModel,
    pub comparison: Comparison,
}

/// Train both modes from the same seed and compare them on the test cases.
pub fn paired_run(input: &PairedInput, cfg: &TrainConfig, settings: &EvalSettings) -> Result<PairedOutcome> {
    let corpus = TrainingCorpus {
        labeled: input.train.clone(),
        support: input.support.clone(),
        regions: Some(input.regions.clone()),
    };
    let run = |mode| {
        let c = TrainConfig {
            mode,
            ..cfg.clone()
        };
        train(&c, &corpus).map(|o| o.model)
    };
    let (baseline, region_loss) = rayon::join(|| run(LossMode::Baseline), || run(LossMode::RegionLoss));
    let (baseline, region_loss) = (baseline?, region_loss?);
    let names: Vec<String> = input.test.iter().map(|c| c.name.clone()).collect();
    let b = evaluate_model(&baseline, &input.test, &input.regions, settings)?;
    let r = evaluate_model(&region_loss, &input.test, &input.regions, settings)?;
    Ok(PairedOutcome {
        comparison: compare(&names, &b, &r)?,
        baseline,
        region_loss,
    })
}

/// Build a paired input from an in-memory benchmark, calibrating regions on
/// its training phantoms.
pub fn from_benchmark(bench: &crate::synth::Benchmark, offset_n: f64) -> Result<PairedInput> {
    use crate::synth::Role;
    let labeled: Vec<LabeledCase> = bench.role(Role::Train).map(|c| c.phantom.labeled_case()).collect();
    let regions = calibrate_cases(&labeled, &bench.classes, offset_n, "synthetic")?;
    Ok(PairedInput {
        train: bench
            .role(Role::Train)
            .map(|c| TrainCase {
                image: c.phantom.image.clone(),
                labels: c.phantom.labels.clone(),
                scores: Some(c.phantom.scores.clone()),
            })
            .collect(),
        support: bench
            .role(Role::Support)
            .map(|c| SupportCase {
                image: c.phantom.image.clone(),
                scores: Some(c.phantom.scores.clone()),
            })
            .collect(),
        test: bench
            .role(Role::Test)
            .map(|c| EvalCase {
                name: c.name.clone(),
                image: c.phantom.image.clone(),
                labels: c.phantom.labels.clone(),
                scores: c.phantom.scores.clone(),
            })
            .collect(),
        regions,
    })
}
