mod common;

use common::XorShift;
use latent_dml_core::harness::*;
use latent_dml_core::latent::ModelKind;
use latent_dml_core::synthetic::{preset, ScenarioConfig, ScenarioKind};
use latent_dml_core::Error;
use std::time::Duration;

fn quick_scenario() -> ScenarioConfig {
    let mut cfg = preset("figure3-positive").unwrap();
    cfg.n = 120;
    cfg.d = 10;
    cfg
}

fn result(method: Method, theta_hat: Option<f64>, converged: bool) -> RunResult {
    RunResult {
        run_index: 0,
        seed: 1,
        scenario: "test".into(),
        method,
        theta_hat,
        bic: None,
        converged,
        selected: None,
        ascent_violations: 0,
        error: None,
        wall_time: Duration::ZERO,
    }
}

const ALL: [Method; 5] = [
    Method::ElasticnetDirect,
    Method::Dml,
    Method::OutcomeLatent,
    Method::ConfounderLatent,
    Method::BicSelect,
];

#[test]
fn repeated_runs_are_identical() {
    let cfg = quick_scenario();
    let hc = HarnessConfig { workers: 1, ..Default::default() };
    let a = run_monte_carlo(&cfg, &ALL, 2, 9, &hc).unwrap();
    let b = run_monte_carlo(&cfg, &ALL, 2, 9, &hc).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 2 * ALL.len());
    let bic = a.iter().find(|r| r.method == Method::BicSelect).unwrap();
    assert!(bic.selected.is_some());
}

#[test]
fn worker_count_does_not_change_results() {
    let cfg = quick_scenario();
    let serial = run_monte_carlo(&cfg, &[Method::Dml, Method::ConfounderLatent], 5, 3, &HarnessConfig { workers: 1, ..Default::default() }).unwrap();
    let parallel = run_monte_carlo(&cfg, &[Method::Dml, Method::ConfounderLatent], 5, 3, &HarnessConfig { workers: 3, ..Default::default() }).unwrap();
    assert_eq!(serial, parallel);
}

#[test]
fn dml_is_accurate_without_confounding() {
    let mut cfg = ScenarioConfig::new(ScenarioKind::NoLatent);
    cfg.n = 2000;
    cfg.d = 10;
    let rs = run_monte_carlo(&cfg, &[Method::Dml], 3, 1, &HarnessConfig::default()).unwrap();
    for r in rs {
        assert!((r.theta_hat.unwrap() - cfg.theta_true).abs() < 0.05, "{:?}", r.theta_hat);
    }
}

#[test]
fn zero_runs_is_rejected() {
    let err = run_monte_carlo(&quick_scenario(), &[Method::Dml], 0, 1, &HarnessConfig::default()).unwrap_err();
    assert!(matches!(err, Error::InvalidParameter(_)));
}

#[test]
fn aggregate_matches_independent_arithmetic() {
    let mut rng = XorShift(3);
    let mut results = Vec::new();
    let mut kept = Vec::new();
    for i in 0..40 {
        let theta = 1.0 + 0.3 * rng.normal();
        let converged = i % 7 != 0;
        if converged {
            kept.push(theta);
        }
        results.push(result(Method::Dml, Some(theta), converged));
    }
    let stats = aggregate(&results, 1.2);
    let s = stats.iter().find(|s| s.method == Method::Dml).unwrap();
    let n = kept.len() as f64;
    let mean = kept.iter().sum::<f64>() / n;
    let var = kept.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let rmse = (kept.iter().map(|t| (t - 1.2).powi(2)).sum::<f64>() / n).sqrt();
    assert_eq!(s.n_runs, kept.len());
    assert!((s.mean.unwrap() - mean).abs() < 1e-12);
    assert!((s.std.unwrap() - var.sqrt()).abs() < 1e-12);
    assert!((s.bias.unwrap() - (mean - 1.2)).abs() < 1e-12);
    assert!((s.rmse.unwrap() - rmse).abs() < 1e-12);
    assert!((s.ci95.unwrap() - 1.96 * var.sqrt() / n.sqrt()).abs() < 1e-12);
    // rmse^2 = bias^2 + population variance.
    let pop = var * (n - 1.0) / n;
    assert!((s.rmse.unwrap().powi(2) - s.bias.unwrap().powi(2) - pop).abs() < 1e-12);
}

#[test]
fn json_report_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    let rs = run_monte_carlo(&quick_scenario(), &[Method::Dml, Method::BicSelect], 2, 5, &HarnessConfig::default()).unwrap();
    let stats = aggregate(&rs, 1.0);
    write_report(&stats, &rs, &path, ReportFormat::Json).unwrap();
    let back = read_json_report(&path).unwrap();
    assert_eq!(back.stats, stats);
    assert_eq!(back.runs, rs);
    assert!(back.runs.iter().any(|r| r.selected.is_some_and(|k| ModelKind::ALL.contains(&k))));
}

#[test]
fn csv_report_has_fixed_headers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.csv");
    let rs = run_monte_carlo(&quick_scenario(), &[Method::Dml], 2, 5, &HarnessConfig::default()).unwrap();
    write_report(&aggregate(&rs, 1.0), &rs, &path, ReportFormat::Csv).unwrap();
    let stats = std::fs::read_to_string(&path).unwrap();
    assert_eq!(stats.lines().next().unwrap(), "method,n_runs,mean,std,bias,rmse,ci95");
    assert_eq!(stats.lines().count(), 2);
    let runs = std::fs::read_to_string(dir.path().join("bench.runs.csv")).unwrap();
    assert_eq!(runs.lines().next().unwrap(), RUNS_HEADER.join(","));
    assert_eq!(runs.lines().count(), 3);
}

#[test]
fn empty_results_write_header_only_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    write_report(&aggregate(&[], 1.0), &[], &path, ReportFormat::Csv).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap().trim_end(), STATS_HEADER.join(","));
    assert_eq!(std::fs::read_to_string(runs_path(&path)).unwrap().trim_end(), RUNS_HEADER.join(","));

    let json = dir.path().join("empty.json");
    write_report(&[], &[], &json, ReportFormat::Json).unwrap();
    let back = read_json_report(&json).unwrap();
    assert!(back.stats.is_empty() && back.runs.is_empty());
}

#[test]
fn interrupted_sweep_leaves_a_valid_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("partial.runs.csv");
    let mut writer = RunsCsvWriter::create(&path).unwrap();
    let mut done = 0;
    let outcome = run_monte_carlo_with(&quick_scenario(), &[Method::Dml, Method::OutcomeLatent], 5, 2, &HarnessConfig { workers: 1, ..Default::default() }, |batch| {
        if done == 2 {
            return Err(Error::InvalidParameter("interrupted".into()));
        }
        writer.append(batch)?;
        done += 1;
        Ok(())
    });
    assert!(outcome.is_err());
    let mut reader = csv::Reader::from_path(&path).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.len() == RUNS_HEADER.len()));
    assert_eq!(&rows[3][0], "1");
}
