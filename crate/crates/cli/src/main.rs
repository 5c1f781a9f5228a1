use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use fovguard_core::calibrate::{sweep_offsets, LabeledCase, RegionConfig, DEFAULT_SIGMA_FLOOR, OFFSET_GRID};
use fovguard_core::evaluate::{self, bootstrap_ranking, fp_analysis, DEFAULT_BOOTSTRAP_SAMPLES, DEFAULT_FP_THRESHOLD_MM3};
use fovguard_core::experiment::{calibrate_cases, compare, evaluate_model, EvalCase, EvalSettings};
use fovguard_core::postprocess::{bpr_crop, largest_component_filter, Connectivity};
use fovguard_core::regionloss::{region_loss, weight_field, RegionLossParams, DEFAULT_EPS};
use fovguard_core::scoremap::{expand_to_volume, SliceScoreMap};
use fovguard_core::synth::{generate_benchmark, load_case, read_manifest, write_benchmark, BenchmarkSpec, LoadedCase, Manifest, PhantomSpec};
use fovguard_core::trainer::{binarize, predict, train, LossMode, MlpModel, SupportCase, TrainCase, TrainConfig, TrainingCorpus};
use fovguard_core::volio::{read_volume, to_json_bytes, write_volume, Shape, Volume};

#[derive(Parser)]
#[command(name = "fovguard", version, about = "Region Loss pipeline for field-of-view robust segmentation")]
struct Cli {
    /// Worker threads for per-case parallel work (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom benchmark and its manifest.
    Synth(SynthArgs),
    /// Fit valid regions from the labeled training cases of a manifest.
    Calibrate(CalibrateArgs),
    /// Train one Region Loss model per boundary offset and pick the best.
    Sweep(SweepArgs),
    /// Region Loss of a prediction volume.
    Loss(LossArgs),
    /// Train a per-voxel model.
    Train(TrainArgs),
    /// Run a trained model on an image.
    Predict(PredictArgs),
    /// Postprocess a binary prediction.
    #[command(subcommand)]
    Postprocess(PostCommand),
    /// Evaluation metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Compare a baseline and a Region Loss model on the test cases.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    n_train: usize,
    #[arg(long, default_value_t = 8)]
    n_support: usize,
    #[arg(long, default_value_t = 4)]
    n_test: usize,
    /// Phantom shape as nz,ny,nx.
    #[arg(long, value_delimiter = ',', default_values_t = [160, 64, 64])]
    shape: Vec<usize>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    offset: f64,
    #[arg(long, default_value_t = DEFAULT_SIGMA_FLOOR)]
    sigma_floor: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Training config JSON; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    offsets: Option<Vec<f64>>,
    #[arg(long)]
    class: u32,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LossArgs {
    /// Prediction volume stem (probabilities or binary mask).
    #[arg(long)]
    pred: PathBuf,
    /// Slice score map JSON.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    regions: PathBuf,
    #[arg(long)]
    class: u32,
    #[arg(long, default_value_t = RegionLossParams::multi_dataset().alpha)]
    alpha: f64,
    /// Top-k percentage.
    #[arg(long, default_value_t = RegionLossParams::multi_dataset().k_percent)]
    topk: f64,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    RegionLoss,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    regions: Option<PathBuf>,
    /// Record wall time per epoch in the log.
    #[arg(long)]
    log_timing: bool,
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Output stem; writes <out>.prob_<c> and <out>.mask_<c> volumes.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Subcommand)]
enum PostCommand {
    /// Keep only the largest connected component.
    Lc {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value_t = 26)]
        connectivity: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero predictions outside the margin-widened valid region.
    BprCrop {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        regions: PathBuf,
        #[arg(long)]
        class: u32,
        #[arg(long, default_value_t = 0.0)]
        margin: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    Dice {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Fp {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        regions: PathBuf,
        #[arg(long)]
        class: Option<u32>,
        #[arg(long, default_value_t = DEFAULT_FP_THRESHOLD_MM3)]
        threshold_mm3: f64,
        #[arg(long, default_value_t = 0.0)]
        margin: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bootstrap ranking from a CSV with a `case` column and one column per algorithm.
    Rank {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_BOOTSTRAP_SAMPLES)]
        n_boot: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    region_loss: PathBuf,
    #[arg(long)]
    regions: PathBuf,
    #[arg(long, default_value_t = DEFAULT_FP_THRESHOLD_MM3)]
    threshold_mm3: f64,
    #[arg(long, default_value_t = 0.0)]
    margin: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-case metrics CSV.
    #[arg(long)]
    cases_csv: Option<PathBuf>,
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> anyhow::Result<()> {
    let bytes = to_json_bytes(value);
    match out {
        Some(p) => std::fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(&bytes)?,
    }
    Ok(())
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_role(path: &Path, names: &[String], classes: &[u32], labels: bool) -> anyhow::Result<Vec<LoadedCase>> {
    let dir = manifest_dir(path);
    Ok(names
        .par_iter()
        .map(|n| load_case(&dir, n, classes, labels))
        .collect::<fovguard_core::Result<_>>()?)
}

fn load_manifest(path: &Path) -> anyhow::Result<Manifest> {
    let m = read_manifest(path)?;
    if m.classes.is_empty() {
        bail!("manifest {} lists no classes", path.display());
    }
    Ok(m)
}

fn train_config(path: Option<&Path>, seed: u64) -> anyhow::Result<TrainConfig> {
    let mut cfg: TrainConfig = match path {
        Some(p) => fovguard_core::volio::read_json(p)?,
        None => TrainConfig::default(),
    };
    cfg.seed = seed;
    Ok(cfg)
}

fn labeled_cases(cases: &[LoadedCase]) -> Vec<LabeledCase> {
    cases
        .iter()
        .map(|c| LabeledCase {
            labels: c.labels.clone(),
            scores: c.scores.clone(),
        })
        .collect()
}

fn corpus(train: &[LoadedCase], support: &[LoadedCase], regions: Option<RegionConfig>) -> TrainingCorpus {
    TrainingCorpus {
        labeled: train
            .iter()
            .map(|c| TrainCase {
                image: c.image.clone(),
                labels: c.labels.clone(),
                scores: Some(c.scores.clone()),
            })
            .collect(),
        support: support
            .iter()
            .map(|c| SupportCase {
                image: c.image.clone(),
                scores: Some(c.scores.clone()),
            })
            .collect(),
        regions,
    }
}

fn eval_cases(cases: Vec<LoadedCase>) -> Vec<EvalCase> {
    cases
        .into_iter()
        .map(|c| EvalCase {
            name: c.name,
            image: c.image,
            labels: c.labels,
            scores: c.scores,
        })
        .collect()
}

fn scores3d_for(pred: &Volume, scores: &Path) -> anyhow::Result<Volume> {
    let map = SliceScoreMap::read(scores)?;
    Ok(expand_to_volume(&map, pred.shape, pred.spacing)?)
}

fn stem_with(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let [nz, ny, nx] = a.shape[..] else {
                bail!("--shape needs three values");
            };
            let spec = BenchmarkSpec {
                seed: a.seed,
                n_train: a.n_train,
                n_support: a.n_support,
                n_test: a.n_test,
                template: PhantomSpec {
                    shape: Shape::new(nz, ny, nx),
                    ..Default::default()
                },
            };
            let bench = generate_benchmark(&spec)?;
            write_benchmark(&bench, &a.out)?;
            for c in &bench.cases {
                for w in &c.phantom.warnings {
                    log::warn!("{}: {w}", c.name);
                }
            }
        }
        Command::Calibrate(a) => {
            let m = load_manifest(&a.manifest)?;
            let train = load_role(&a.manifest, &m.train, &m.classes, true)?;
            let mut regions = calibrate_cases(&labeled_cases(&train), &m.classes, a.offset, &a.manifest.display().to_string())?;
            if a.sigma_floor != DEFAULT_SIGMA_FLOOR {
                let cases = labeled_cases(&train);
                for &c in &m.classes {
                    let e = fovguard_core::calibrate::collect_extremes(&cases, c)?;
                    regions.insert(fovguard_core::calibrate::fit_region(c, &e.mins, &e.maxs, a.offset, a.sigma_floor)?);
                }
            }
            match a.out {
                Some(p) => regions.write(p)?,
                None => std::io::stdout().write_all(&regions.to_json_bytes())?,
            }
        }
        Command::Sweep(a) => {
            let m = load_manifest(&a.manifest)?;
            if !m.classes.contains(&a.class) {
                bail!("class {} not in manifest", a.class);
            }
            let cfg = TrainConfig {
                mode: LossMode::RegionLoss,
                ..train_config(a.config.as_deref(), a.seed)?
            };
            let train_cases = load_role(&a.manifest, &m.train, &m.classes, true)?;
            let support = load_role(&a.manifest, &m.support, &m.classes, false)?;
            let test = eval_cases(load_role(&a.manifest, &m.test, &m.classes, true)?);
            let offsets = a.offsets.unwrap_or_else(|| OFFSET_GRID.to_vec());
            let labeled = labeled_cases(&train_cases);
            let settings = EvalSettings::default();
            let dice: Vec<anyhow::Result<f64>> = offsets
                .par_iter()
                .map(|&off| {
                    let regions = calibrate_cases(&labeled, &m.classes, off, "sweep")?;
                    let model = train(&cfg, &corpus(&train_cases, &support, Some(regions.clone())))?.model;
                    let metrics = evaluate_model(&model, &test, &regions, &settings)?;
                    let ds: Vec<f64> = metrics.iter().flatten().filter(|c| c.class_id == a.class).map(|c| c.dice).collect();
                    Ok(ds.iter().sum::<f64>() / ds.len().max(1) as f64)
                })
                .collect();
            let lookup: BTreeMap<u64, f64> = offsets
                .iter()
                .zip(dice)
                .map(|(o, d)| Ok((o.to_bits(), d?)))
                .collect::<anyhow::Result<_>>()?;
            let table = sweep_offsets(a.class, &offsets, |o| Ok(lookup[&o.to_bits()]))?;
            emit(&table, a.out.as_deref())?;
        }
        Command::Loss(a) => {
            let pred = read_volume(&a.pred)?;
            let regions = RegionConfig::read(&a.regions)?;
            let scores3d = scores3d_for(&pred, &a.scores)?;
            let wf = weight_field(&scores3d, regions.get(a.class)?)?;
            let params = RegionLossParams {
                alpha: a.alpha,
                k_percent: a.topk,
                eps: a.eps,
            };
            let rep = region_loss(&pred.to_f64(), &wf.weights, &params)?;
            emit(&rep.summary(), a.out.as_deref())?;
        }
        Command::Train(a) => {
            let m = load_manifest(&a.manifest)?;
            let mut cfg = train_config(a.config.as_deref(), a.seed)?;
            if let Some(mode) = a.mode {
                cfg.mode = match mode {
                    ModeArg::Baseline => LossMode::Baseline,
                    ModeArg::RegionLoss => LossMode::RegionLoss,
                };
            }
            cfg.log_timing |= a.log_timing;
            let regions_path = a.regions.clone().or_else(|| cfg.regions.as_ref().map(PathBuf::from));
            let regions = match (&cfg.mode, regions_path) {
                (LossMode::RegionLoss, None) => bail!("region_loss mode needs --regions"),
                (LossMode::RegionLoss, Some(p)) => Some(RegionConfig::read(p)?),
                (LossMode::Baseline, _) => None,
            };
            let train_cases = load_role(&a.manifest, &m.train, &m.classes, true)?;
            let support = match cfg.mode {
                LossMode::RegionLoss => load_role(&a.manifest, &m.support, &m.classes, false)?,
                LossMode::Baseline => Vec::new(),
            };
            let outcome = train(&cfg, &corpus(&train_cases, &support, regions))?;
            outcome.model.write(&a.out)?;
            if let Some(p) = a.log {
                let mut w = csv::Writer::from_path(&p).with_context(|| format!("writing {}", p.display()))?;
                for row in &outcome.log {
                    w.serialize(row)?;
                }
                w.flush()?;
            }
        }
        Command::Predict(a) => {
            let model = MlpModel::read(&a.model)?;
            let image = read_volume(&a.image)?;
            for (c, prob) in predict(&model, &image)? {
                write_volume(&prob, stem_with(&a.out, &format!(".prob_{c}")))?;
                write_volume(&binarize(&prob, a.threshold)?, stem_with(&a.out, &format!(".mask_{c}")))?;
            }
        }
        Command::Postprocess(PostCommand::Lc { pred, connectivity, out }) => {
            let v = read_volume(&pred)?;
            write_volume(&largest_component_filter(&v, Connectivity::from_count(connectivity)?)?, &out)?;
        }
        Command::Postprocess(PostCommand::BprCrop {
            pred,
            scores,
            regions,
            class,
            margin,
            out,
        }) => {
            let v = read_volume(&pred)?;
            let regions = RegionConfig::read(&regions)?;
            let s3 = scores3d_for(&v, &scores)?;
            write_volume(&bpr_crop(&v, &s3, regions.get(class)?, margin)?, &out)?;
        }
        Command::Eval(EvalCommand::Dice { pred, gt, out }) => {
            #[derive(Serialize)]
            struct DiceOut {
                dice: f64,
            }
            let d = evaluate::dice(&read_volume(&pred)?, &read_volume(&gt)?)?;
            emit(&DiceOut { dice: d }, out.as_deref())?;
        }
        Command::Eval(EvalCommand::Fp {
            pred,
            scores,
            regions,
            class,
            threshold_mm3,
            margin,
            out,
        }) => {
            let v = read_volume(&pred)?;
            let regions = RegionConfig::read(&regions)?;
            let class = match class {
                Some(c) => c,
                None if regions.classes.len() == 1 => *regions.classes.keys().next().expect("one class"),
                None => bail!("regions file has several classes; pass --class"),
            };
            let s3 = scores3d_for(&v, &scores)?;
            emit(&fp_analysis(&v, &s3, regions.get(class)?, threshold_mm3, margin)?, out.as_deref())?;
        }
        Command::Eval(EvalCommand::Rank { scores, seed, n_boot, out }) => {
            let mut r = csv::Reader::from_path(&scores).with_context(|| format!("reading {}", scores.display()))?;
            let header = r.headers()?.clone();
            if header.len() < 3 || &header[0] != "case" {
                bail!("rank CSV needs a `case` column followed by at least two algorithm columns");
            }
            let mut matrix = Vec::new();
            for rec in r.records() {
                let rec = rec?;
                let row = rec
                    .iter()
                    .skip(1)
                    .map(|v| v.trim().parse::<f64>().map_err(|e| anyhow!("bad score {v:?}: {e}")))
                    .collect::<anyhow::Result<Vec<f64>>>()?;
                matrix.push(row);
            }
            #[derive(Serialize)]
            struct RankOut {
                algorithms: Vec<String>,
                table: fovguard_core::evaluate::RankTable,
            }
            let table = bootstrap_ranking(&matrix, n_boot, seed)?;
            let algorithms = header.iter().skip(1).map(str::to_string).collect();
            emit(&RankOut { algorithms, table }, out.as_deref())?;
        }
        Command::Report(a) => {
            let m = load_manifest(&a.manifest)?;
            let regions = RegionConfig::read(&a.regions)?;
            let baseline = MlpModel::read(&a.baseline)?;
            let rl = MlpModel::read(&a.region_loss)?;
            let test = eval_cases(load_role(&a.manifest, &m.test, &m.classes, true)?);
            let settings = EvalSettings {
                threshold_mm3: a.threshold_mm3,
                margin_sigma: a.margin,
                ..Default::default()
            };
            let names: Vec<String> = test.iter().map(|c| c.name.clone()).collect();
            let b = evaluate_model(&baseline, &test, &regions, &settings)?;
            let r = evaluate_model(&rl, &test, &regions, &settings)?;
            let cmp = compare(&names, &b, &r)?;
            if let Some(p) = &a.cases_csv {
                let mut w = csv::Writer::from_path(p).with_context(|| format!("writing {}", p.display()))?;
                w.write_record([
                    "case",
                    "class",
                    "baseline_out_of_region",
                    "region_loss_out_of_region",
                    "baseline_dice",
                    "region_loss_dice",
                    "baseline_dice_in_region",
                    "region_loss_dice_in_region",
                ])?;
                for c in &cmp.cases {
                    w.write_record([
                        c.name.clone(),
                        c.baseline.class_id.to_string(),
                        c.baseline.out_of_region.to_string(),
                        c.region_loss.out_of_region.to_string(),
                        c.baseline.dice.to_string(),
                        c.region_loss.dice.to_string(),
                        c.baseline.dice_in_region.to_string(),
                        c.region_loss.dice_in_region.to_string(),
                    ])?;
                }
                w.flush()?;
            }
            emit(&cmp, a.out.as_deref())?;
        }
    }
    Ok(())
}

fn is_io(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<std::io::Error>().is_some()
            || e.downcast_ref::<fovguard_core::Error>().is_some_and(|c| c.is_io())
            || e.downcast_ref::<csv::Error>().is_some_and(|c| c.is_io_error())
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(if is_io(&e) { 2 } else { 1 })
        }
    }
}
