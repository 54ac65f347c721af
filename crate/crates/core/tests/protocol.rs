//! End-to-end protocol runs on a scaled-down benchmark.

use pifs_core::data::{LabelMask, SyntheticSpec};
use pifs_core::nn::ModelConfig;
use pifs_core::protocol::{
    build_fold_data, poly_lr, relabel_strict, run_base_step, run_experiment, run_trial, MethodSpec, ProtocolConfig, Setting,
    TrainerConfig,
};
use pifs_core::rng::rng_for;
use pifs_core::IGNORE_INDEX;
use rand::Rng as _;

fn tiny() -> ProtocolConfig {
    ProtocolConfig {
        spec: SyntheticSpec { height: 16, width: 16, ..SyntheticSpec::default() },
        model: ModelConfig { channels: vec![3, 8, 8], ..ModelConfig::default() },
        trainer: TrainerConfig { iters_base: 30, iters_fsl: 6, batch_size_base: 4, ..TrainerConfig::default() },
        base_images: 40,
        train_pool: 120,
        val_images: 12,
        trials: 2,
        ..ProtocolConfig::default()
    }
}

/// Scans every few-shot training mask of a strict multi-step run.
pub fn strict_scan_check() -> String {
    let mut scanned = 0;
    let cfg = ProtocolConfig { strict: true, setting: Setting::Multi, ms_steps: 2, ms_classes_per_step: 1, ..tiny() };
    let data = build_fold_data(&cfg, 0).unwrap();
    let (base, _) = run_base_step(&cfg, &data).unwrap();
    for name in ["pifs", "ft", "wi"] {
        let method = MethodSpec::by_name(name).unwrap();
        let run = run_trial(&cfg, &data, &base, &method, 0).unwrap();
        let mut known = base.classes.clone();
        for step in &run.steps {
            for &l in &step.mask_labels {
                assert!(l == 0 || step.new_classes.contains(&l), "{name} step {}: old label {l} in {known:?}", step.step);
            }
            known.extend(&step.new_classes);
            scanned += 1;
        }
    }
    format!("{scanned} strict training steps scanned")
}

#[test]
fn strict_masks_carry_no_old_labels() {
    strict_scan_check();
}

pub fn relabel_idempotence_check() -> String {
    let mut rng = rng_for(17, &[]);
    for _ in 0..1000 {
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let labels: Vec<u8> = (0..h * w).map(|_| if rng.random_bool(0.05) { IGNORE_INDEX } else { rng.random_range(0..9) }).collect();
        let old: Vec<u8> = (1..9).filter(|_| rng.random_bool(0.5)).collect();
        let once = relabel_strict(&LabelMask::new(h, w, labels.clone()).unwrap(), &old);
        assert_eq!(relabel_strict(&once, &old), once);
        for (&a, &b) in labels.iter().zip(once.labels()) {
            assert!(!old.contains(&b));
            assert_eq!(b, if old.contains(&a) { 0 } else { a });
        }
    }
    "1000 masks idempotent".into()
}

#[test]
fn strict_relabel_is_idempotent_on_random_masks() {
    relabel_idempotence_check();
}

#[test]
fn non_strict_masks_keep_old_labels() {
    let cfg = tiny();
    let data = build_fold_data(&cfg, 0).unwrap();
    let (base, _) = run_base_step(&cfg, &data).unwrap();
    let run = run_trial(&cfg, &data, &base, &MethodSpec::by_name("wi").unwrap(), 1).unwrap();
    let old_seen = run.steps[0].mask_labels.iter().any(|l| base.classes[1..].contains(l));
    let raw_has_old = run.steps[0]
        .image_ids
        .iter()
        .any(|id| data.pool.iter().find(|it| it.id == *id).unwrap().mask.labels().iter().any(|l| base.classes[1..].contains(l)));
    assert_eq!(old_seen, raw_has_old);
}

pub fn multi_step_check() -> String {
    let cfg = ProtocolConfig {
        spec: SyntheticSpec { n_classes: 7, ..tiny().spec },
        fold_size: 3,
        setting: Setting::Multi,
        ms_steps: 3,
        ms_classes_per_step: 1,
        trials: 1,
        train_pool: 200,
        ..tiny()
    };
    let data = build_fold_data(&cfg, 0).unwrap();
    let (base, _) = run_base_step(&cfg, &data).unwrap();
    let base_stats: Vec<f64> =
        base.model.extractor.norm_layers().flat_map(|n| n.running_mean.iter().chain(&n.running_std).copied()).collect();
    for name in ["pifs", "wi_ft", "ft"] {
        let run = run_trial(&cfg, &data, &base, &MethodSpec::by_name(name).unwrap(), 0).unwrap();
        assert_eq!(run.steps.len(), 3);
        assert_eq!(run.reports.len(), 3);
        for (i, s) in run.steps.iter().enumerate() {
            assert_eq!(s.step, i + 1);
            assert_eq!(s.new_classes, vec![i as u8 + 1]);
            assert_eq!(s.running_stats, base_stats, "{name} step {}", s.step);
            assert_eq!(s.log.losses.len(), cfg.trainer.iters_fsl);
        }
        assert_eq!(run.final_model.classes(), &[0, 4, 5, 6, 1, 2, 3]);
    }
    format!("{} steps per run, running statistics bit-identical", cfg.ms_steps)
}

#[test]
fn multi_step_runs_every_step_with_frozen_statistics() {
    multi_step_check();
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let cfg = tiny();
    let methods: Vec<MethodSpec> = ["wi", "pifs"].iter().map(|n| MethodSpec::by_name(n).unwrap()).collect();
    let a = run_experiment(&cfg, &methods, 1).unwrap();
    let b = run_experiment(&cfg, &methods, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[0].runs.len(), 2);
}

#[test]
fn methods_share_the_few_shot_sample_of_a_trial() {
    let cfg = tiny();
    let data = build_fold_data(&cfg, 0).unwrap();
    let (base, _) = run_base_step(&cfg, &data).unwrap();
    let ids: Vec<Vec<u64>> = ["wi", "ft", "pifs"]
        .iter()
        .map(|n| run_trial(&cfg, &data, &base, &MethodSpec::by_name(n).unwrap(), 1).unwrap().steps[0].image_ids.clone())
        .collect();
    assert!(ids.windows(2).all(|w| w[0] == w[1]));
}

pub fn poly_law_check() -> String {
    let lr = 0.01;
    assert_eq!(poly_lr(0, 200, lr).unwrap(), lr);
    assert_eq!(poly_lr(200, 200, lr).unwrap(), 0.0);
    assert!((poly_lr(100, 200, lr).unwrap() - lr * 0.5f64.powf(0.9)).abs() < 1e-12);
    assert!(poly_lr(201, 200, lr).is_err());
    "poly_lr(0), poly_lr(max), poly_lr(max/2) exact to 1e-12".into()
}

#[test]
fn poly_schedule_laws() {
    poly_law_check();
}
