//! Recorded runs on a fixed 2000-example dataset. Regenerate with
//! `KDLAPLACE_BLESS=1 cargo test --test golden` after an intended change.

mod common;

use common::{check_golden, golden_data, split_default};
use kdlaplace::distill::{distill_dedier, distill_laplace, train_teacher, StrategyKind, TrainingConfig};
use kdlaplace::metrics::{evaluate_groups, margin_profile, train_probes};
use kdlaplace::numerics::RngStream;
use serde_json::json;

const TOL: f64 = 1e-9;

fn config(strategy: StrategyKind) -> TrainingConfig {
    TrainingConfig {
        strategy,
        ..Default::default()
    }
}

#[test]
fn teacher_test_report() {
    let cfg = config(StrategyKind::Uniform);
    let s = split_default(&golden_data(), &cfg);
    let teacher = train_teacher(&s.train, &cfg).unwrap();
    let report = evaluate_groups(&teacher, &s.test).unwrap();
    assert!(report.worst_group_accuracy <= report.average_accuracy);
    check_golden("teacher_report.json", &json!(report), TOL);
}

#[test]
fn margin_and_laplace_runs() {
    let base = config(StrategyKind::Uniform);
    let s = split_default(&golden_data(), &base);
    let teacher = train_teacher(&s.train, &base).unwrap();

    let cfg = config(StrategyKind::Margin);
    let out = distill_dedier(&teacher, &s.train, &cfg, Some(&s.val)).unwrap();
    let last = out.history.last().unwrap();
    let report = evaluate_groups(&out.student, &s.test).unwrap();
    check_golden("margin_run.json", &json!({ "final_epoch": last, "test": report }), TOL);

    let cfg = config(StrategyKind::LaplaceEntropy);
    let out = distill_laplace(&teacher, &s.train, &cfg, Some(&s.val)).unwrap();
    let last = out.history.last().unwrap();
    assert!(out.final_weights.iter().all(|w| (1.0..=cfg.weight_cap).contains(w)));
    let report = evaluate_groups(&out.student, &s.test).unwrap();
    check_golden("laplace_run.json", &json!({ "final_epoch": last, "test": report }), TOL);
}

#[test]
fn baseline_margin_profile() {
    let cfg = config(StrategyKind::Uniform);
    let s = split_default(&golden_data(), &cfg);
    let teacher = train_teacher(&s.train, &cfg).unwrap();
    let student = distill_dedier(&teacher, &s.train, &cfg, None).unwrap().student;
    let layers: Vec<usize> = (1..student.depth()).collect();
    let probes = train_probes(&student, &s.test, &layers, &cfg.aux_settings(), &RngStream::new(cfg.seed).derive("probes")).unwrap();
    let profile = margin_profile(&student, &probes, &s.test, &layers).unwrap();
    assert_eq!(profile.rows.len(), layers.len() * 3);
    check_golden("margin_profile.json", &json!(profile), TOL);
}
