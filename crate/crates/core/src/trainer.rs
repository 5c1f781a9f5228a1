//! Per-voxel MLP trained with or without Region Loss on support volumes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::RegionConfig;
use crate::composeloss::{md_loss_with_weights, DatasetSpec, MdLoss};
use crate::error::{invalid, Error, Result};
use crate::regionloss::{slice_weights, RegionLossParams, DEFAULT_EPS};
use crate::scoremap::SliceScoreMap;
use crate::volio::{read_json, write_json, Semantic, Shape, Volume};

const INIT_STREAM: u64 = 0;
const LABELED_STREAM: u64 = 1;
const SUPPORT_STREAM: u64 = 2;

const MIN_INPUT_SCALE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub intensity: bool,
    pub box_mean_radii: Vec<usize>,
    pub box_std_radius: Option<usize>,
    pub body_area: bool,
    pub body_threshold: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            intensity: true,
            box_mean_radii: vec![1, 2],
            box_std_radius: Some(2),
            body_area: true,
            body_threshold: 0.2,
        }
    }
}

impl FeatureConfig {
    pub fn n_features(&self) -> usize {
        self.intensity as usize + self.box_mean_radii.len() + self.box_std_radius.is_some() as usize + self.body_area as usize
    }
}

/// Voxel-major feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub shape: Shape,
    pub n_features: usize,
    pub data: Vec<f32>,
}

impl Features {
    pub fn row(&self, voxel: usize) -> &[f32] {
        &self.data[voxel * self.n_features..(voxel + 1) * self.n_features]
    }
}

/// Summed-area table over a volume, padded by one on each low side.
struct Integral {
    ny: usize,
    nx: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(shape: Shape, f: impl Fn(usize) -> f64) -> Self {
        let (ny, nx) = (shape.ny + 1, shape.nx + 1);
        let mut sums = vec![0.0; (shape.nz + 1) * ny * nx];
        for z in 0..shape.nz {
            for y in 0..shape.ny {
                let mut row = 0.0;
                for x in 0..shape.nx {
                    row += f(shape.index(z, y, x));
                    let i = ((z + 1) * ny + y + 1) * nx + x + 1;
                    sums[i] = row + sums[i - nx] + sums[i - ny * nx] - sums[i - ny * nx - nx];
                }
            }
        }
        Integral { ny, nx, sums }
    }

    /// Sum over the half-open box [z0,z1) x [y0,y1) x [x0,x1).
    fn sum(&self, (z0, z1): (usize, usize), (y0, y1): (usize, usize), (x0, x1): (usize, usize)) -> f64 {
        let at = |z: usize, y: usize, x: usize| self.sums[(z * self.ny + y) * self.nx + x];
        at(z1, y1, x1) - at(z0, y1, x1) - at(z1, y0, x1) - at(z1, y1, x0) + at(z0, y0, x1) + at(z0, y1, x0) + at(z1, y0, x0)
            - at(z0, y0, x0)
    }
}

fn window(c: usize, r: usize, n: usize) -> (usize, usize) {
    (c.saturating_sub(r), (c + r + 1).min(n))
}

/// Per-voxel features. Box statistics average over the part of the window
/// that lies inside the volume.
pub fn extract_features(image: &Volume, cfg: &FeatureConfig) -> Result<Features> {
    let img = image.as_f32()?;
    let shape = image.shape;
    let nf = cfg.n_features();
    if nf == 0 {
        return Err(invalid("feature config selects no features"));
    }
    let first = Integral::new(shape, |i| img[i] as f64);
    let second = cfg.box_std_radius.map(|_| Integral::new(shape, |i| (img[i] as f64).powi(2)));
    let slice_len = shape.slice_len();
    let area: Vec<f64> = img
        .chunks(slice_len)
        .map(|s| s.iter().filter(|&&v| v as f64 > cfg.body_threshold).count() as f64 / slice_len as f64)
        .collect();

    let mut data = vec![0f32; shape.len() * nf];
    data.par_chunks_mut(slice_len * nf).enumerate().for_each(|(z, out)| {
        let wz = |r| window(z, r, shape.nz);
        for y in 0..shape.ny {
            for x in 0..shape.nx {
                let i = shape.index(z, y, x);
                let row = &mut out[(i - z * slice_len) * nf..][..nf];
                let mut k = 0;
                let mut put = |v: f64| {
                    row[k] = v as f32;
                    k += 1;
                };
                if cfg.intensity {
                    put(img[i] as f64);
                }
                let boxed = |r: usize| {
                    let (bz, by, bx) = (wz(r), window(y, r, shape.ny), window(x, r, shape.nx));
                    let n = ((bz.1 - bz.0) * (by.1 - by.0) * (bx.1 - bx.0)) as f64;
                    (bz, by, bx, n)
                };
                for &r in &cfg.box_mean_radii {
                    let (bz, by, bx, n) = boxed(r);
                    put(first.sum(bz, by, bx) / n);
                }
                if let (Some(r), Some(sq)) = (cfg.box_std_radius, &second) {
                    let (bz, by, bx, n) = boxed(r);
                    let mean = first.sum(bz, by, bx) / n;
                    let var = sq.sum(bz, by, bx) / n - mean * mean;
                    put(var.max(0.0).sqrt());
                }
                if cfg.body_area {
                    put(area[z]);
                }
            }
        }
    });
    Ok(Features {
        shape,
        n_features: nf,
        data,
    })
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    /// [F, H, C].
    pub layers: [usize; 3],
    pub classes: Vec<u32>,
    pub features: FeatureConfig,
    /// H x F, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// C x H, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// Per-feature standardization applied before the first layer.
    #[serde(default)]
    pub input_mean: Vec<f64>,
    #[serde(default)]
    pub input_scale: Vec<f64>,
}

impl MlpModel {
    /// Glorot-uniform weights, zero biases.
    pub fn init(features: FeatureConfig, hidden: usize, classes: Vec<u32>, rng: &mut impl Rng) -> Result<Self> {
        let f = features.n_features();
        let c = classes.len();
        if f == 0 || hidden == 0 || c == 0 {
            return Err(invalid("model layer sizes must be positive"));
        }
        let mut uniform = |n: usize, fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-a..=a)).collect::<Vec<f64>>()
        };
        let w1 = uniform(hidden * f, f, hidden);
        let w2 = uniform(c * hidden, hidden, c);
        Ok(MlpModel {
            layers: [f, hidden, c],
            classes,
            features,
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; c],
            input_mean: vec![0.0; f],
            input_scale: vec![1.0; f],
        })
    }

    /// Standardize inputs with the per-feature mean and std of `feats`.
    pub fn fit_input_scaling<'a>(&mut self, feats: impl IntoIterator<Item = &'a Features>) -> Result<()> {
        let f = self.layers[0];
        let mut n = 0.0;
        let mut sum = vec![0.0; f];
        let mut sq = vec![0.0; f];
        for fs in feats {
            if fs.n_features != f {
                return Err(Error::LengthMismatch {
                    expected: f,
                    actual: fs.n_features,
                });
            }
            for row in fs.data.chunks_exact(f) {
                for (k, &v) in row.iter().enumerate() {
                    sum[k] += v as f64;
                    sq[k] += (v as f64) * (v as f64);
                }
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Err(Error::Insufficient("no voxels to fit input scaling".into()));
        }
        self.input_mean = sum.iter().map(|s| s / n).collect();
        self.input_scale = sq
            .iter()
            .zip(&self.input_mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(MIN_INPUT_SCALE))
            .collect();
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        let [f, h, c] = self.layers;
        f * h + h + h * c + c
    }

    pub fn validate(&self) -> Result<()> {
        let [f, h, c] = self.layers;
        let expect = [(self.w1.len(), f * h), (self.b1.len(), h), (self.w2.len(), h * c), (self.b2.len(), c)];
        for (actual, expected) in expect {
            if actual != expected {
                return Err(Error::LengthMismatch { expected, actual });
            }
        }
        if self.classes.len() != c {
            return Err(Error::LengthMismatch {
                expected: c,
                actual: self.classes.len(),
            });
        }
        if !self.input_mean.is_empty() || !self.input_scale.is_empty() {
            for actual in [self.input_mean.len(), self.input_scale.len()] {
                if actual != f {
                    return Err(Error::LengthMismatch { expected: f, actual });
                }
            }
            if self.input_scale.iter().any(|&s| !(s > 0.0)) {
                return Err(invalid("input scales must be positive"));
            }
        }
        if self.features.n_features() != f {
            return Err(invalid(format!(
                "feature config yields {} features but the model expects {f}",
                self.features.n_features()
            )));
        }
        Ok(())
    }

    /// Parameters in the order w1, b1, w2, b2.
    pub fn params(&self) -> Vec<f64> {
        [&self.w1, &self.b1, &self.w2, &self.b2].into_iter().flatten().copied().collect()
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::LengthMismatch {
                expected: self.n_params(),
                actual: p.len(),
            });
        }
        let mut rest = p;
        for dst in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    /// Standardized copy of a raw feature row.
    fn scale_row(&self, x: &[f32], out: &mut [f64]) {
        if self.input_mean.is_empty() {
            for (o, &v) in out.iter_mut().zip(x) {
                *o = v as f64;
            }
        } else {
            for (k, (o, &v)) in out.iter_mut().zip(x).enumerate() {
                *o = (v as f64 - self.input_mean[k]) / self.input_scale[k];
            }
        }
    }

    /// Hidden activations and output probabilities for one standardized row.
    fn forward_row(&self, x: &[f64], hidden: &mut [f64], out: &mut [f64]) {
        let [f, h, c] = self.layers;
        for j in 0..h {
            let w = &self.w1[j * f..(j + 1) * f];
            let pre = self.b1[j] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            hidden[j] = pre.max(0.0);
        }
        for k in 0..c {
            let w = &self.w2[k * h..(k + 1) * h];
            out[k] = sigmoid(self.b2[k] + w.iter().zip(hidden.iter()).map(|(a, b)| a * b).sum::<f64>());
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let m: MlpModel = read_json(path)?;
        m.validate()?;
        Ok(m)
    }
}

/// Per-class probability volumes, one f32 volume per model class.
pub fn predict(model: &MlpModel, image: &Volume) -> Result<BTreeMap<u32, Volume>> {
    model.validate()?;
    let feats = extract_features(image, &model.features)?;
    predict_features(model, &feats, image)
}

fn predict_features(model: &MlpModel, feats: &Features, image: &Volume) -> Result<BTreeMap<u32, Volume>> {
    let [f, h, c] = model.layers;
    if feats.n_features != f {
        return Err(Error::LengthMismatch {
            expected: f,
            actual: feats.n_features,
        });
    }
    let n = feats.shape.len();
    let mut probs = vec![0f32; n * c];
    probs.par_chunks_mut(c * 4096).enumerate().for_each(|(chunk, out)| {
        let mut x = vec![0.0; f];
        let mut hidden = vec![0.0; h];
        let mut y = vec![0.0; c];
        for (k, o) in out.chunks_mut(c).enumerate() {
            model.scale_row(feats.row(chunk * 4096 + k), &mut x);
            model.forward_row(&x, &mut hidden, &mut y);
            for (dst, &v) in o.iter_mut().zip(&y) {
                *dst = v as f32;
            }
        }
    });
    model
        .classes
        .iter()
        .enumerate()
        .map(|(k, &class)| {
            let data = probs.iter().skip(k).step_by(c).copied().collect();
            Ok((class, Volume::from_f32(feats.shape, image.spacing, Semantic::Prediction, data)?))
        })
        .collect()
}

/// Threshold a probability volume into a binary prediction mask.
pub fn binarize(prob: &Volume, threshold: f64) -> Result<Volume> {
    let data = prob.as_f32()?.iter().map(|&p| (p as f64 >= threshold) as u8).collect();
    Volume::from_u8(prob.shape, prob.spacing, Semantic::Prediction, data)
}

/// A training patch: features, labels of the annotated classes and Region
/// Loss weights of the rest.
#[derive(Clone, Debug, Default)]
pub struct Patch {
    pub n: usize,
    pub features: Vec<f32>,
    pub labels: BTreeMap<u32, Vec<u8>>,
    pub weights: BTreeMap<u32, Vec<f64>>,
}

/// Loss on one patch and its gradient with respect to `model.params()`.
pub fn patch_objective(model: &MlpModel, patch: &Patch, spec: &DatasetSpec, params: &RegionLossParams) -> Result<(MdLoss, Vec<f64>)> {
    let [f, h, c] = model.layers;
    if patch.features.len() != patch.n * f {
        return Err(Error::LengthMismatch {
            expected: patch.n * f,
            actual: patch.features.len(),
        });
    }
    let n = patch.n;
    let mut xs = vec![0.0; n * f];
    for (raw, x) in patch.features.chunks_exact(f).zip(xs.chunks_exact_mut(f)) {
        model.scale_row(raw, x);
    }
    let mut hidden = vec![0.0; n * h];
    let mut probs = vec![vec![0.0; n]; c];
    let mut y = vec![0.0; c];
    for i in 0..n {
        model.forward_row(&xs[i * f..(i + 1) * f], &mut hidden[i * h..(i + 1) * h], &mut y);
        for k in 0..c {
            probs[k][i] = y[k];
        }
    }
    let active: Vec<usize> = (0..c)
        .filter(|&k| {
            let class = model.classes[k];
            patch.labels.contains_key(&class) || patch.weights.contains_key(&class)
        })
        .collect();
    let yhats: BTreeMap<u32, &[f64]> = active.iter().map(|&k| (model.classes[k], probs[k].as_slice())).collect();
    let labels: BTreeMap<u32, &[u8]> = patch.labels.iter().map(|(&c, v)| (c, v.as_slice())).collect();
    let weights: BTreeMap<u32, &[f64]> = patch.weights.iter().map(|(&c, v)| (c, v.as_slice())).collect();
    let loss = md_loss_with_weights(&yhats, &labels, spec, &weights, params)?;

    let mut g_w1 = vec![0.0; h * f];
    let mut g_b1 = vec![0.0; h];
    let mut g_w2 = vec![0.0; c * h];
    let mut g_b2 = vec![0.0; c];
    let mut dz = vec![0.0; c];
    let mut dh = vec![0.0; h];
    for i in 0..n {
        let mut any = false;
        for k in 0..c {
            dz[k] = match loss.terms.get(&model.classes[k]) {
                Some(t) => {
                    let p = probs[k][i];
                    t.grad[i] * p * (1.0 - p)
                }
                None => 0.0,
            };
            any |= dz[k] != 0.0;
        }
        if !any {
            continue;
        }
        let a = &hidden[i * h..(i + 1) * h];
        dh.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..c {
            if dz[k] == 0.0 {
                continue;
            }
            g_b2[k] += dz[k];
            let w = &model.w2[k * h..(k + 1) * h];
            for j in 0..h {
                g_w2[k * h + j] += dz[k] * a[j];
                dh[j] += dz[k] * w[j];
            }
        }
        let x = &xs[i * f..(i + 1) * f];
        for j in 0..h {
            if a[j] <= 0.0 {
                continue;
            }
            g_b1[j] += dh[j];
            for (g, &xv) in g_w1[j * f..(j + 1) * f].iter_mut().zip(x) {
                *g += dh[j] * xv;
            }
        }
    }
    let grad = [g_w1, g_b1, g_w2, g_b2].concat();
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Baseline,
    RegionLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Patch extent in voxels, (z, y, x).
    pub patch_size: [usize; 3],
    /// Labeled patches per epoch; support patches come on top.
    pub patches_per_epoch: usize,
    pub learning_rate: f64,
    pub alpha: f64,
    pub k_percent: f64,
    pub p_support: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub hidden: usize,
    /// Probability that a labeled patch is centred on foreground.
    pub fg_oversample: f64,
    pub mode: LossMode,
    /// Region file, resolved by the caller.
    #[serde(default)]
    pub regions: Option<String>,
    #[serde(default)]
    pub features: FeatureConfig,
    /// Record wall time in the log (makes logs run-dependent).
    #[serde(default)]
    pub log_timing: bool,
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

impl Default for TrainConfig {
    fn default() -> Self {
        let rl = RegionLossParams::single_dataset();
        TrainConfig {
            seed: 42,
            epochs: 60,
            patch_size: [16, 32, 32],
            patches_per_epoch: 32,
            learning_rate: 0.1,
            alpha: rl.alpha,
            k_percent: rl.k_percent,
            p_support: crate::composeloss::DEFAULT_P_SUPPORT,
            eps: DEFAULT_EPS,
            hidden: 16,
            fg_oversample: 0.5,
            mode: LossMode::RegionLoss,
            regions: None,
            features: FeatureConfig::default(),
            log_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn loss_params(&self) -> RegionLossParams {
        RegionLossParams {
            alpha: self.alpha,
            k_percent: self.k_percent,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.patches_per_epoch == 0 || self.hidden == 0 || self.patch_size.contains(&0) {
            return Err(invalid("epochs, patches_per_epoch, hidden and patch_size must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(invalid("learning_rate must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.p_support) || !(0.0..=1.0).contains(&self.fg_oversample) {
            return Err(invalid("p_support and fg_oversample must lie in [0, 1]"));
        }
        self.loss_params().validate()
    }
}

#[derive(Clone, Debug)]
pub struct TrainCase {
    pub image: Volume,
    /// Annotated classes of this case.
    pub labels: BTreeMap<u32, Volume>,
    /// Needed only when some model class is unannotated here.
    pub scores: Option<SliceScoreMap>,
}

#[derive(Clone, Debug)]
pub struct SupportCase {
    pub image: Volume,
    pub scores: Option<SliceScoreMap>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainingCorpus {
    pub labeled: Vec<TrainCase>,
    pub support: Vec<SupportCase>,
    pub regions: Option<RegionConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub supervised_loss: f64,
    pub region_loss: f64,
    pub wall_time_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub initial: MlpModel,
    pub model: MlpModel,
    pub log: Vec<EpochLog>,
}

struct Prepared {
    features: Features,
    labels: BTreeMap<u32, Vec<u8>>,
    /// Per-slice weights of the classes trained with Region Loss.
    slice_weights: BTreeMap<u32, Vec<f64>>,
    foreground: Vec<usize>,
    spec: DatasetSpec,
}

impl Prepared {
    fn patch(&self, corner: [usize; 3], size: [usize; 3]) -> Patch {
        let shape = self.features.shape;
        let nf = self.features.n_features;
        let n = size.iter().product();
        let mut p = Patch {
            n,
            features: Vec::with_capacity(n * nf),
            labels: self.labels.keys().map(|&c| (c, Vec::with_capacity(n))).collect(),
            weights: self.slice_weights.keys().map(|&c| (c, Vec::with_capacity(n))).collect(),
        };
        for z in corner[0]..corner[0] + size[0] {
            for y in corner[1]..corner[1] + size[1] {
                for x in corner[2]..corner[2] + size[2] {
                    let i = shape.index(z, y, x);
                    p.features.extend_from_slice(self.features.row(i));
                    for (c, l) in &mut p.labels {
                        l.push(self.labels[c][i]);
                    }
                    for (c, w) in &mut p.weights {
                        w.push(self.slice_weights[c][z]);
                    }
                }
            }
        }
        p
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn uniform_corner(shape: Shape, size: [usize; 3], rng: &mut impl Rng) -> [usize; 3] {
    let dims = shape.as_array();
    std::array::from_fn(|a| rng.random_range(0..=dims[a] - size[a]))
}

fn fits(shape: Shape, size: [usize; 3]) -> Result<()> {
    let dims = shape.as_array();
    if (0..3).any(|a| size[a] > dims[a]) {
        return Err(invalid(format!("patch {size:?} larger than volume {dims:?}")));
    }
    Ok(())
}

/// Train a model. Deterministic given `cfg.seed`: the labeled patch stream is
/// the same in both loss modes, support decisions come from a separate stream.
pub fn train(cfg: &TrainConfig, corpus: &TrainingCorpus) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.labeled.is_empty() {
        return Err(Error::Insufficient("no labeled training volumes".into()));
    }
    let classes: Vec<u32> = corpus
        .labeled
        .iter()
        .flat_map(|c| c.labels.keys().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if classes.is_empty() {
        return Err(Error::Insufficient("labeled volumes carry no labels".into()));
    }
    let rl_mode = cfg.mode == LossMode::RegionLoss;
    let regions = || corpus.regions.as_ref().ok_or_else(|| invalid("region_loss mode needs a region config"));
    let weights_for = |scores: Option<&SliceScoreMap>, shape: Shape, missing: &[u32]| -> Result<BTreeMap<u32, Vec<f64>>> {
        if missing.is_empty() {
            return Ok(BTreeMap::new());
        }
        let m = scores.ok_or_else(|| invalid("missing scores for a volume trained with Region Loss"))?;
        if m.len() != shape.nz {
            return Err(Error::LengthMismatch {
                expected: shape.nz,
                actual: m.len(),
            });
        }
        let r = regions()?;
        missing.iter().map(|&c| Ok((c, slice_weights(m, r.get(c)?)?))).collect()
    };

    let labeled: Vec<Prepared> = corpus
        .labeled
        .par_iter()
        .enumerate()
        .map(|(idx, case)| {
            fits(case.image.shape, cfg.patch_size)?;
            let mut labels = BTreeMap::new();
            for (&c, v) in &case.labels {
                case.image.shape.ensure_eq(v.shape)?;
                labels.insert(c, v.as_u8()?.to_vec());
            }
            let missing: Vec<u32> = if rl_mode {
                classes.iter().copied().filter(|c| !labels.contains_key(c)).collect()
            } else {
                Vec::new()
            };
            let n = case.image.shape.len();
            let foreground = (0..n).filter(|&i| labels.values().any(|l| l[i] != 0)).collect();
            Ok(Prepared {
                features: extract_features(&case.image, &cfg.features)?,
                slice_weights: weights_for(case.scores.as_ref(), case.image.shape, &missing)?,
                spec: DatasetSpec::labeled(format!("labeled_{idx}"), labels.keys().copied()),
                labels,
                foreground,
            })
        })
        .collect::<Result<_>>()?;

    let support: Vec<Prepared> = if rl_mode {
        corpus
            .support
            .par_iter()
            .enumerate()
            .map(|(idx, case)| {
                fits(case.image.shape, cfg.patch_size)?;
                Ok(Prepared {
                    features: extract_features(&case.image, &cfg.features)?,
                    slice_weights: weights_for(case.scores.as_ref(), case.image.shape, &classes)?,
                    labels: BTreeMap::new(),
                    foreground: Vec::new(),
                    spec: DatasetSpec {
                        id: format!("support_{idx}"),
                        ..DatasetSpec::support("support")
                    },
                })
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut init_rng = stream(cfg.seed, INIT_STREAM);
    let mut labeled_rng = stream(cfg.seed, LABELED_STREAM);
    let mut support_rng = stream(cfg.seed, SUPPORT_STREAM);
    let mut initial = MlpModel::init(cfg.features.clone(), cfg.hidden, classes, &mut init_rng)?;
    initial.fit_input_scaling(labeled.iter().map(|p| &p.features))?;
    let mut model = initial.clone();
    let mut params = model.params();
    let loss_params = cfg.loss_params();
    let size = cfg.patch_size;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let (mut sup_sum, mut sup_n, mut rl_sum, mut rl_n) = (0.0, 0usize, 0.0, 0usize);
        let mut labeled_done = 0;
        let mut step = 0;
        while labeled_done < cfg.patches_per_epoch {
            let use_support = !support.is_empty() && support_rng.random::<f64>() < cfg.p_support;
            let (case, patch) = if use_support {
                let case = &support[support_rng.random_range(0..support.len())];
                let corner = uniform_corner(case.features.shape, size, &mut support_rng);
                (case, case.patch(corner, size))
            } else {
                let case = &labeled[labeled_rng.random_range(0..labeled.len())];
                let shape = case.features.shape;
                let centred = labeled_rng.random::<f64>() < cfg.fg_oversample;
                let corner = if centred && !case.foreground.is_empty() {
                    let (z, y, x) = shape.coords(case.foreground[labeled_rng.random_range(0..case.foreground.len())]);
                    let dims = shape.as_array();
                    let c = [z, y, x];
                    std::array::from_fn(|a| c[a].saturating_sub(size[a] / 2).min(dims[a] - size[a]))
                } else {
                    uniform_corner(shape, size, &mut labeled_rng)
                };
                labeled_done += 1;
                (case, case.patch(corner, size))
            };
            let (loss, grad) = patch_objective(&model, &patch, &case.spec, &loss_params)?;
            if !loss.value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    what: format!("loss {}", loss.value),
                });
            }
            if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    what: format!("gradient component {i} is {}", grad[i]),
                });
            }
            if !case.labels.is_empty() {
                sup_sum += loss.supervised;
                sup_n += 1;
            }
            if !case.slice_weights.is_empty() {
                rl_sum += loss.region;
                rl_n += 1;
            }
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
            model.set_params(&params)?;
            step += 1;
        }
        let entry = EpochLog {
            epoch,
            supervised_loss: if sup_n > 0 { sup_sum / sup_n as f64 } else { 0.0 },
            region_loss: if rl_n > 0 { rl_sum / rl_n as f64 } else { 0.0 },
            wall_time_ms: if cfg.log_timing { started.elapsed().as_millis() as u64 } else { 0 },
        };
        log::debug!(
            "epoch {epoch}: supervised {:.5}, region {:.5}, {step} steps",
            entry.supervised_loss,
            entry.region_loss
        );
        log.push(entry);
    }
    Ok(TrainOutcome { initial, model, log })
}
