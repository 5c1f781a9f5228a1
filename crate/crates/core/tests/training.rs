use fovguard_core::experiment::{from_benchmark, PairedInput};
use fovguard_core::synth::{generate_benchmark, BenchmarkSpec, PhantomSpec};
use fovguard_core::trainer::{train, LossMode, TrainConfig, TrainingCorpus};
use fovguard_core::volio::Shape;

fn small_input() -> PairedInput {
    let spec = BenchmarkSpec {
        seed: 3,
        n_train: 2,
        n_support: 2,
        n_test: 1,
        template: PhantomSpec {
            shape: Shape::new(80, 24, 24),
            ..PhantomSpec::default()
        },
    };
    from_benchmark(&generate_benchmark(&spec).unwrap(), 2.0).unwrap()
}

fn small_config(mode: LossMode) -> TrainConfig {
    TrainConfig {
        seed: 9,
        epochs: 3,
        patch_size: [8, 16, 16],
        patches_per_epoch: 6,
        hidden: 4,
        mode,
        ..TrainConfig::default()
    }
}

fn corpus(input: &PairedInput, mode: LossMode, with_support: bool) -> TrainingCorpus {
    TrainingCorpus {
        labeled: input.train.clone(),
        support: if with_support { input.support.clone() } else { Vec::new() },
        regions: (mode == LossMode::RegionLoss).then(|| input.regions.clone()),
    }
}

#[test]
fn same_seed_gives_identical_parameters() {
    let input = small_input();
    let cfg = small_config(LossMode::RegionLoss);
    let a = train(&cfg, &corpus(&input, LossMode::RegionLoss, true)).unwrap();
    let b = train(&cfg, &corpus(&input, LossMode::RegionLoss, true)).unwrap();
    let bits = |p: Vec<f64>| p.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    assert_eq!(bits(a.model.params()), bits(b.model.params()));
    assert_eq!(a.log, b.log);
    assert!(a.log.iter().all(|l| l.wall_time_ms == 0));
}

#[test]
fn zero_learning_rate_keeps_initial_model() {
    let input = small_input();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..small_config(LossMode::RegionLoss)
    };
    let out = train(&cfg, &corpus(&input, LossMode::RegionLoss, true)).unwrap();
    assert_eq!(out.model.params(), out.initial.params());
}

#[test]
fn baseline_ignores_support_set() {
    let input = small_input();
    let cfg = small_config(LossMode::Baseline);
    let with = train(&cfg, &corpus(&input, LossMode::Baseline, true)).unwrap();
    let without = train(&cfg, &corpus(&input, LossMode::Baseline, false)).unwrap();
    assert_eq!(with.model.params(), without.model.params());
    assert!(with.log.iter().all(|l| l.region_loss == 0.0));
}

#[test]
fn region_loss_mode_sees_support_patches() {
    let input = small_input();
    let cfg = TrainConfig {
        p_support: 0.5,
        ..small_config(LossMode::RegionLoss)
    };
    let out = train(&cfg, &corpus(&input, LossMode::RegionLoss, true)).unwrap();
    assert!(out.log.iter().any(|l| l.region_loss > 0.0));
    assert!(out.log.iter().all(|l| l.supervised_loss.is_finite()));
}

#[test]
fn region_loss_mode_requires_regions() {
    let input = small_input();
    let mut c = corpus(&input, LossMode::RegionLoss, true);
    c.regions = None;
    assert!(train(&small_config(LossMode::RegionLoss), &c).is_err());
}

#[test]
fn unknown_config_keys_are_rejected() {
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 2, "momentum": 0.9}"#).is_err());
    let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 2}"#).unwrap();
    assert_eq!(cfg.epochs, 2);
    assert_eq!(cfg.alpha, TrainConfig::default().alpha);
}
