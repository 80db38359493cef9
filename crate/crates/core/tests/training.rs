//! Training loop contracts: determinism, trace consistency, replay.

use vpinn::harness::{self, ExperimentConfig};
use vpinn::network::{init_params, unit_square_multiplier};
use vpinn::problems::poisson_tanh;
use vpinn::testspace::assemble_residuals;
use vpinn::training::{train, TrainConfig, TRACE_HEADER};
use vpinn::{build_structured_unit_square, reference_rule, Execution, NeuralField};

fn config(epochs: usize, every: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        checkpoint_every: every,
        learning_rate: 5e-3,
        keep_snapshots: true,
        ..TrainConfig::default()
    }
}

#[test]
fn identical_runs_give_identical_traces() {
    let mesh = build_structured_unit_square(4).unwrap();
    let init = init_params(&[2, 10, 10, 1], 12).unwrap();
    let a = train(&mesh, &poisson_tanh(), &init, &config(60, 20)).unwrap();
    let b = train(&mesh, &poisson_tanh(), &init, &config(60, 20)).unwrap();
    assert_eq!(a.trace.to_csv_string(), b.trace.to_csv_string());
    assert_eq!(a.params, b.params);
    let seq = TrainConfig {
        execution: Execution::Sequential,
        ..config(60, 20)
    };
    let c = train(&mesh, &poisson_tanh(), &init, &seq).unwrap();
    assert_eq!(a.trace.to_csv_string(), c.trace.to_csv_string());
}

#[test]
fn logged_loss_matches_plain_assembly() {
    let mesh = build_structured_unit_square(4).unwrap();
    let data = poisson_tanh();
    let init = init_params(&[2, 10, 10, 1], 2).unwrap();
    let out = train(&mesh, &data, &init, &config(50, 10)).unwrap();
    let rule = reference_rule(3).unwrap();
    assert_eq!(out.trace.snapshots.len(), out.trace.len());
    for (record, params) in out.trace.records.iter().zip(&out.trace.snapshots) {
        let field = NeuralField::new(params.clone(), unit_square_multiplier(), data.lift.clone());
        let r = assemble_residuals(&mesh, &field, &data, &rule).unwrap();
        assert_eq!(record.r_h, r.loss().sqrt(), "epoch {}", record.epoch);
        assert!(out.best_r_h <= record.r_h);
    }
    let field = NeuralField::new(out.params.clone(), unit_square_multiplier(), data.lift.clone());
    let best = assemble_residuals(&mesh, &field, &data, &rule).unwrap().loss().sqrt();
    assert_eq!(best, out.best_r_h);
}

#[test]
fn trace_csv_schema() {
    let mesh = build_structured_unit_square(4).unwrap();
    let out = train(&mesh, &poisson_tanh(), &init_params(&[2, 6, 1], 1).unwrap(), &config(25, 5)).unwrap();
    let csv = out.trace.to_csv_string();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], TRACE_HEADER);
    assert_eq!(lines.len(), 25 / 5 + 2);
    for line in &lines[1..] {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 8);
        for c in &cols[1..] {
            let v: f64 = c.parse().unwrap();
            assert!(v.is_finite() && v >= 0.0);
        }
    }
}

#[test]
fn convergence_replay_matches_saved_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig {
        meshes: vec![2, 4],
        widths: vec![2, 8, 8, 1],
        out_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.train.epochs = 30;
    let report = harness::run_convergence(&cfg).unwrap();
    assert_eq!(report.rows.len(), 2);
    for row in &report.rows {
        let ckpt = harness::checkpoint_path(&cfg.out_dir, row.n);
        let (b, error) = harness::run_estimate(&cfg, row.n, &ckpt).unwrap();
        assert_eq!(b.eta(), row.eta);
        assert_eq!(b.eta_elementwise(), row.eta_elementwise);
        assert_eq!(error.unwrap(), row.h1_error);
    }
    let csv = std::fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), harness::CONVERGENCE_HEADER);
    assert!(dir.path().join("convergence.svg").exists());

    let again = tempfile::tempdir().unwrap();
    cfg.out_dir = again.path().to_path_buf();
    harness::run_convergence(&cfg).unwrap();
    assert_eq!(csv, std::fs::read_to_string(again.path().join("convergence.csv")).unwrap());
}

#[test]
fn trace_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig {
        trace_mesh: 4,
        widths: vec![2, 8, 1],
        out_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    cfg.train.epochs = 20;
    cfg.train.checkpoint_every = 5;
    let trace = harness::run_trace(&cfg).unwrap();
    assert_eq!(trace.len(), 5);
    let csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(csv, trace.to_csv_string());
    let svg = std::fs::read_to_string(dir.path().join("trace.svg")).unwrap();
    assert!(svg.contains("eta_loss"));
}
