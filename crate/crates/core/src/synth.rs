//! Procedural whole-body phantoms with known slice scores.
//!
//! A phantom is a stack of elliptical body cross-sections whose size follows
//! a piecewise-linear profile along the body axis (trunk wide, neck narrow,
//! head medium). Organs are ellipsoids placed by slice score, with per-phantom
//! jitter on their lower and upper extent. Confounder blobs in the head share
//! an organ's intensity distribution, so a model that has only ever seen the
//! abdomen has no local cue to tell them apart from the organ.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::LabeledCase;
use crate::error::{invalid, Error, Result};
use crate::scoremap::SliceScoreMap;
use crate::volio::{read_json, read_volume, write_json, write_volume, Semantic, Shape, Spacing, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intensity {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrganSpec {
    pub class_id: u32,
    /// Mean lowest and highest slice score of the organ.
    pub score_min: f64,
    pub score_max: f64,
    /// Std of the per-phantom shift of the lower and upper end.
    pub jitter_min: f64,
    pub jitter_max: f64,
    /// Centre offset from the body axis in voxels, (dy, dx).
    pub center_yx: (i64, i64),
    /// In-plane semi-axes in voxels, (ry, rx).
    pub radius_yx: (f64, f64),
    pub intensity: Intensity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfounderSpec {
    /// Slice score of the blob centre and its half extent along the body axis.
    pub score_center: f64,
    pub score_half: f64,
    pub jitter: f64,
    pub center_yx: (i64, i64),
    pub radius_yx: (f64, f64),
    pub intensity: Intensity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fov {
    WholeBody,
    Abdominal,
    Custom { lo: f64, hi: f64 },
}

impl Fov {
    pub const ABDOMINAL: (f64, f64) = (25.0, 60.0);

    pub fn interval(self) -> (f64, f64) {
        match self {
            Fov::WholeBody => (f64::NEG_INFINITY, f64::INFINITY),
            Fov::Abdominal => Self::ABDOMINAL,
            Fov::Custom { lo, hi } => (lo, hi),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub shape: Shape,
    pub spacing_mm: Spacing,
    /// (score, fraction of the in-plane half extent) knots of the body outline.
    pub body_profile: Vec<(f64, f64)>,
    pub body_jitter: f64,
    pub body_intensity: Intensity,
    pub organs: Vec<OrganSpec>,
    pub confounders: Vec<ConfounderSpec>,
    pub noise_std: f64,
    pub fov: Fov,
}

/// Liver-like organ at its calibrated mean extent.
pub fn default_organ() -> OrganSpec {
    OrganSpec {
        class_id: 1,
        score_min: 33.09,
        score_max: 52.73,
        jitter_min: 3.31,
        jitter_max: 1.88,
        center_yx: (0, -9),
        radius_yx: (8.0, 10.0),
        intensity: Intensity { mean: 0.8, std: 0.03 },
    }
}

pub fn default_confounders(organ: &OrganSpec) -> Vec<ConfounderSpec> {
    [(84.0, (-5, -6)), (89.5, (5, 5)), (95.0, (-3, 6))]
        .into_iter()
        .map(|(score_center, center_yx)| ConfounderSpec {
            score_center,
            score_half: 2.5,
            jitter: 0.5,
            center_yx,
            radius_yx: (3.5, 3.5),
            intensity: organ.intensity,
        })
        .collect()
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let organ = default_organ();
        PhantomSpec {
            seed: 42,
            shape: Shape::new(160, 64, 64),
            spacing_mm: [2.0, 2.0, 2.0],
            body_profile: vec![
                (0.0, 0.75),
                (20.0, 0.80),
                (35.0, 0.90),
                (50.0, 0.90),
                (60.0, 0.82),
                (68.0, 0.78),
                (74.0, 0.70),
                (76.0, 0.30),
                (80.0, 0.30),
                (83.0, 0.55),
                (96.0, 0.55),
                (100.0, 0.35),
            ],
            body_jitter: 0.08,
            body_intensity: Intensity { mean: 0.4, std: 0.03 },
            confounders: default_confounders(&organ),
            organs: vec![organ],
            noise_std: 0.05,
            fov: Fov::WholeBody,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.nz < 2 || self.shape.ny == 0 || self.shape.nx == 0 {
            return Err(invalid("phantom needs at least two slices and a non-empty plane"));
        }
        for o in &self.organs {
            if !(0.0..=100.0).contains(&o.score_min) || !(0.0..=100.0).contains(&o.score_max) || o.score_min > o.score_max {
                return Err(invalid(format!("organ {} interval outside [0, 100]", o.class_id)));
            }
        }
        if self.body_profile.len() < 2 {
            return Err(invalid("body profile needs two knots"));
        }
        let (lo, hi) = self.fov.interval();
        if lo >= hi {
            return Err(invalid("empty field of view"));
        }
        Ok(())
    }

    fn body_scale(&self, s: f64) -> f64 {
        let p = &self.body_profile;
        if s <= p[0].0 {
            return p[0].1;
        }
        for w in p.windows(2) {
            let ((s0, v0), (s1, v1)) = (w[0], w[1]);
            if s <= s1 {
                return v0 + (v1 - v0) * (s - s0) / (s1 - s0);
            }
        }
        p[p.len() - 1].1
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub image: Volume,
    /// Binary organ masks by class.
    pub labels: BTreeMap<u32, Volume>,
    /// Binary mask of confounder voxels (never part of the labels).
    pub confounder: Volume,
    pub scores: SliceScoreMap,
    /// Realized organ extents after jitter, (lowest, highest) score.
    pub organ_extent: BTreeMap<u32, (f64, f64)>,
    pub warnings: Vec<String>,
}

impl Phantom {
    pub fn labeled_case(&self) -> LabeledCase {
        LabeledCase {
            labels: self.labels.clone(),
            scores: self.scores.clone(),
        }
    }
}

struct Ellipsoid {
    value: u8,
    cz: f64,
    hz: f64,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    intensity: Intensity,
}

impl Ellipsoid {
    fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let t = (z - self.cz) / self.hz;
        if t.abs() > 1.0 {
            return false;
        }
        let (dy, dx) = ((y - self.cy) / self.ry, (x - self.cx) / self.rx);
        dy * dy + dx * dx <= 1.0 - t * t
    }
}

fn normal(mean: f64, std: f64) -> Normal<f64> {
    Normal::new(mean, std.max(0.0)).expect("finite normal parameters")
}

/// Render a phantom. Fully determined by `spec` (including its seed).
pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let full = spec.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std_normal = normal(0.0, 1.0);
    let slice_of = |s: f64| s * (full.nz - 1) as f64 / 100.0;
    let score_of = |z: usize| 100.0 * z as f64 / (full.nz - 1) as f64;
    let (cy0, cx0) = ((full.ny / 2) as f64, (full.nx / 2) as f64);

    let body_factor = 1.0 + spec.body_jitter * std_normal.sample(&mut rng);

    let mut organ_extent = BTreeMap::new();
    let mut shapes: Vec<Ellipsoid> = Vec::new();
    for o in &spec.organs {
        let lo = o.score_min + o.jitter_min * std_normal.sample(&mut rng);
        let hi = o.score_max + o.jitter_max * std_normal.sample(&mut rng);
        let (lo, hi) = (lo.min(hi), lo.max(hi));
        organ_extent.insert(o.class_id, (lo, hi));
        shapes.push(Ellipsoid {
            value: 1,
            cz: slice_of((lo + hi) / 2.0),
            hz: slice_of((hi - lo) / 2.0).max(0.5),
            cy: cy0 + o.center_yx.0 as f64,
            cx: cx0 + o.center_yx.1 as f64,
            ry: o.radius_yx.0,
            rx: o.radius_yx.1,
            intensity: o.intensity,
        });
    }
    let n_organs = shapes.len();
    for c in &spec.confounders {
        let centre = c.score_center + c.jitter * std_normal.sample(&mut rng);
        shapes.push(Ellipsoid {
            value: 2,
            cz: slice_of(centre),
            hz: slice_of(c.score_half).max(0.5),
            cy: cy0 + c.center_yx.0 as f64,
            cx: cx0 + c.center_yx.1 as f64,
            ry: c.radius_yx.0,
            rx: c.radius_yx.1,
            intensity: c.intensity,
        });
    }

    let n = full.len();
    let mut image = vec![0f32; n];
    let mut organ_masks = vec![vec![0u8; n]; n_organs];
    let mut confounder = vec![0u8; n];
    let noise = normal(0.0, spec.noise_std);
    let half_y = (full.ny as f64 / 2.0 - 2.0).max(1.0);
    let half_x = (full.nx as f64 / 2.0 - 2.0).max(1.0);

    for z in 0..full.nz {
        let s = score_of(z);
        let scale = spec.body_scale(s) * body_factor;
        let (by, bx) = (0.8 * scale * half_y, scale * half_x);
        for y in 0..full.ny {
            for x in 0..full.nx {
                let i = full.index(z, y, x);
                let (fz, fy, fx) = (z as f64, y as f64, x as f64);
                let dy = (fy - cy0) / by;
                let dx = (fx - cx0) / bx;
                let mut value = 0.0;
                if dy * dy + dx * dx <= 1.0 {
                    let hit = shapes.iter().position(|e| e.contains(fz, fy, fx));
                    let dist = match hit {
                        Some(k) => {
                            let e = &shapes[k];
                            if e.value == 1 {
                                organ_masks[k][i] = 1;
                            } else {
                                confounder[i] = 1;
                            }
                            e.intensity
                        }
                        None => spec.body_intensity,
                    };
                    value = dist.mean + dist.std * std_normal.sample(&mut rng);
                }
                image[i] = (value + noise.sample(&mut rng)) as f32;
            }
        }
    }

    // Crop to the field of view.
    let (lo, hi) = spec.fov.interval();
    let keep: Vec<usize> = (0..full.nz).filter(|&z| (lo..=hi).contains(&score_of(z))).collect();
    if keep.is_empty() {
        return Err(invalid("field of view contains no slices"));
    }
    let (z0, z1) = (keep[0], keep[keep.len() - 1] + 1);
    let shape = Shape::new(z1 - z0, full.ny, full.nx);
    let span = z0 * full.slice_len()..z1 * full.slice_len();

    let mut warnings = Vec::new();
    let mut labels = BTreeMap::new();
    for (o, mask) in spec.organs.iter().zip(organ_masks) {
        let cropped = mask[span.clone()].to_vec();
        if cropped.iter().all(|&v| v == 0) {
            let w = format!("organ {} lies outside the field of view", o.class_id);
            log::warn!("{w}");
            warnings.push(w);
        }
        labels.insert(o.class_id, Volume::from_u8(shape, spec.spacing_mm, Semantic::Label, cropped)?);
    }
    let scores = SliceScoreMap::trusted((z0..z1).map(score_of).collect())?;
    Ok(Phantom {
        image: Volume::from_f32(shape, spec.spacing_mm, Semantic::Image, image[span.clone()].to_vec())?,
        labels,
        confounder: Volume::from_u8(shape, spec.spacing_mm, Semantic::Label, confounder[span].to_vec())?,
        scores,
        organ_extent,
        warnings,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Support,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_support: usize,
    pub n_test: usize,
    pub template: PhantomSpec,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            seed: 42,
            n_train: 8,
            n_support: 8,
            n_test: 4,
            template: PhantomSpec::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchmarkCase {
    pub role: Role,
    pub name: String,
    pub phantom: Phantom,
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub cases: Vec<BenchmarkCase>,
    pub classes: Vec<u32>,
}

impl Benchmark {
    pub fn role(&self, role: Role) -> impl Iterator<Item = &BenchmarkCase> {
        self.cases.iter().filter(move |c| c.role == role)
    }
}

/// Sub-seed for phantom `index` of a corpus seeded with `seed` (splitmix64).
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Labeled limited-FOV training phantoms, unlabeled whole-body support
/// phantoms and whole-body test phantoms with organ-only ground truth.
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<Benchmark> {
    if spec.n_train == 0 || spec.n_test == 0 {
        return Err(invalid("benchmark needs at least one training and one test phantom"));
    }
    let mut plan = Vec::new();
    for (role, n, fov) in [
        (Role::Train, spec.n_train, Fov::Abdominal),
        (Role::Support, spec.n_support, Fov::WholeBody),
        (Role::Test, spec.n_test, Fov::WholeBody),
    ] {
        for i in 0..n {
            plan.push((role, i, fov));
        }
    }
    let cases = plan
        .par_iter()
        .enumerate()
        .map(|(global, &(role, i, fov))| {
            let mut ps = spec.template.clone();
            ps.seed = sub_seed(spec.seed, global as u64);
            ps.fov = fov;
            let mut phantom = generate(&ps)?;
            if role == Role::Support {
                phantom.labels.clear();
            }
            let tag = match role {
                Role::Train => "train",
                Role::Support => "support",
                Role::Test => "test",
            };
            Ok(BenchmarkCase {
                role,
                name: format!("{tag}_{i:03}"),
                phantom,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Benchmark {
        cases,
        classes: spec.template.organs.iter().map(|o| o.class_id).collect(),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub train: Vec<String>,
    pub support: Vec<String>,
    pub test: Vec<String>,
    #[serde(default)]
    pub classes: Vec<u32>,
}

/// File names of one case, relative to the manifest directory.
pub struct CaseFiles {
    stem: PathBuf,
}

impl CaseFiles {
    pub fn new(dir: &Path, name: &str) -> Self {
        CaseFiles { stem: dir.join(name) }
    }

    fn with(&self, suffix: &str) -> PathBuf {
        let mut s = self.stem.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    }

    pub fn image(&self) -> PathBuf {
        self.with(".image")
    }

    pub fn label(&self, class_id: u32) -> PathBuf {
        self.with(&format!(".label_{class_id}"))
    }

    pub fn scores(&self) -> PathBuf {
        self.with(".scores.json")
    }
}

/// Write every case and a `manifest.json` into `out_dir`.
pub fn write_benchmark(bench: &Benchmark, out_dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    bench.cases.par_iter().try_for_each(|c| -> Result<()> {
        let f = CaseFiles::new(out_dir, &c.name);
        write_volume(&c.phantom.image, f.image())?;
        for (&class_id, v) in &c.phantom.labels {
            write_volume(v, f.label(class_id))?;
        }
        c.phantom.scores.write(f.scores())
    })?;
    let mut m = Manifest {
        classes: bench.classes.clone(),
        ..Default::default()
    };
    for c in &bench.cases {
        match c.role {
            Role::Train => m.train.push(c.name.clone()),
            Role::Support => m.support.push(c.name.clone()),
            Role::Test => m.test.push(c.name.clone()),
        }
    }
    write_json(out_dir.join("manifest.json"), &m)?;
    Ok(m)
}

/// A case loaded back from disk.
#[derive(Clone, Debug)]
pub struct LoadedCase {
    pub name: String,
    pub image: Volume,
    pub labels: BTreeMap<u32, Volume>,
    pub scores: SliceScoreMap,
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    read_json(path)
}

pub fn load_case(dir: &Path, name: &str, classes: &[u32], with_labels: bool) -> Result<LoadedCase> {
    let f = CaseFiles::new(dir, name);
    let image = read_volume(f.image())?;
    let mut labels = BTreeMap::new();
    if with_labels {
        for &c in classes {
            labels.insert(c, read_volume(f.label(c))?);
        }
    }
    Ok(LoadedCase {
        name: name.to_string(),
        image,
        labels,
        scores: SliceScoreMap::read(f.scores())?,
    })
}

/// Uniform random draw used by tests that need reproducible seeds.
pub fn seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random()).collect()
}
