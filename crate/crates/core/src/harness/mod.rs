//! Experiment drivers: mesh convergence study, training trace, checkpoint
//! replay and the built-in self-test.

pub mod config;
pub mod plot;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::ExperimentConfig;
use plot::{color, Plot, Scale, Series};

use crate::error::{Error, Result};
use crate::estimator::{assemble_breakdown, efficiency_index, project, EstimatorBreakdown, EstimatorRules};
use crate::field::{SmoothField, TrialField};
use crate::mesh::{build_structured_unit_square, Mesh};
use crate::network::{init_params, loss_gradient, MlpParams, NeuralField};
use crate::problems::{by_name, h1_error, polynomial_diffusion, poisson_tanh, ProblemSpec};
use crate::quadrature::reference_rule;
use crate::testspace::{assemble_residuals, measure_norm_constants, norm_constant};
use crate::training::{train, TrainingTrace};

/// Least-squares slope of `log(value)` against `log(h)`.
pub fn fit_slope(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::DegenerateFit(format!("need at least two points, got {}", pairs.len())));
    }
    if let Some(&(h, v)) = pairs.iter().find(|(h, v)| !(*h > 0.0 && *v > 0.0 && h.is_finite() && v.is_finite())) {
        return Err(Error::DegenerateFit(format!(
            "log-log fit needs positive finite values, got ({h}, {v})"
        )));
    }
    let n = pairs.len() as f64;
    let xs: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx <= 1e-24 {
        return Err(Error::DegenerateFit("all mesh sizes coincide".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// What is evaluated on each mesh of a convergence study.
#[derive(Debug, Clone)]
pub enum FieldSource {
    /// Train a fresh network per mesh.
    Trained,
    /// Use a fixed analytic field and skip training.
    Injected(SmoothField),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub n: usize,
    pub h: f64,
    /// Number of test functions.
    pub dofs: usize,
    pub r_h: f64,
    pub eta: f64,
    pub eta_res: f64,
    pub eta_loss: f64,
    pub eta_coef: f64,
    pub eta_rhs: f64,
    /// `(sum_E eta(E)^2)^{1/2}`
    pub eta_elementwise: f64,
    pub h1_error: f64,
    /// Absent when the error vanishes.
    pub efficiency: Option<f64>,
}

pub const CONVERGENCE_HEADER: &str =
    "n,h,dofs,R_h,eta,eta_res,eta_loss,eta_coef,eta_rhs,eta_elementwise,h1_error,efficiency";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slopes {
    pub eta: f64,
    pub eta_elementwise: f64,
    pub error: f64,
}

#[derive(Debug)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    pub slopes: Result<Slopes>,
    pub files: Vec<PathBuf>,
}

/// Tail slopes after dropping the `drop` coarsest meshes.
pub fn tail_slopes(rows: &[ConvergenceRow], drop: usize) -> Result<Slopes> {
    let tail = rows.get(drop.min(rows.len())..).unwrap_or(&[]);
    let fit = |get: fn(&ConvergenceRow) -> f64| fit_slope(&tail.iter().map(|r| (r.h, get(r))).collect::<Vec<_>>());
    Ok(Slopes {
        eta: fit(|r| r.eta)?,
        eta_elementwise: fit(|r| r.eta_elementwise)?,
        error: fit(|r| r.h1_error)?,
    })
}

pub fn write_convergence_csv<W: Write>(rows: &[ConvergenceRow], mut out: W) -> Result<()> {
    writeln!(out, "{CONVERGENCE_HEADER}")?;
    for r in rows {
        write!(out, "{},{:.16e},{}", r.n, r.h, r.dofs)?;
        for v in [
            r.r_h,
            r.eta,
            r.eta_res,
            r.eta_loss,
            r.eta_coef,
            r.eta_rhs,
            r.eta_elementwise,
            r.h1_error,
        ] {
            write!(out, ",{v:.16e}")?;
        }
        match r.efficiency {
            Some(e) => writeln!(out, ",{e:.16e}")?,
            None => writeln!(out, ",")?,
        }
    }
    Ok(())
}

fn write_file(path: &Path, write: impl FnOnce(&mut BufWriter<fs::File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn checkpoint_path(out_dir: &Path, n: usize) -> PathBuf {
    out_dir.join(format!("checkpoint_n{n}.txt"))
}

/// Estimator and exact error of `field` on `mesh`.
pub fn evaluate_field(
    cfg: &ExperimentConfig,
    mesh: &Mesh,
    data: &ProblemSpec,
    field: &dyn TrialField,
) -> Result<(EstimatorBreakdown, f64, f64)> {
    let rules = EstimatorRules::new(cfg.assembly_precision)?;
    let r = assemble_residuals(mesh, field, data, rules.assembly())?;
    let c_h = norm_constant(mesh, cfg.ch_mode)?;
    let breakdown = assemble_breakdown(mesh, field, data, &r, c_h, &rules)?;
    let error = h1_error(mesh, field, data)?;
    Ok((breakdown, r.loss().sqrt(), error))
}

/// Trains (or injects) a field on every mesh, writing CSV, SVG and
/// checkpoints to the output directory. The CSV is rewritten after each mesh,
/// so a failure leaves the completed rows on disk.
pub fn run_convergence(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    run_convergence_with(cfg, &FieldSource::Trained, &mut |_| {})
}

pub fn run_convergence_with(
    cfg: &ExperimentConfig,
    source: &FieldSource,
    progress: &mut dyn FnMut(&ConvergenceRow),
) -> Result<ConvergenceReport> {
    cfg.validate()?;
    if cfg.meshes.len() < 2 {
        return Err(Error::InvalidArgument("a convergence study needs at least two meshes".into()));
    }
    let data = by_name(&cfg.problem)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let csv_path = cfg.out_dir.join("convergence.csv");
    let mut files = vec![csv_path.clone()];
    let mut rows = Vec::new();
    for (index, &n) in cfg.meshes.iter().enumerate() {
        let mesh = build_structured_unit_square(n)?;
        let outcome = match source {
            FieldSource::Trained => {
                let mut train_cfg = cfg.training();
                train_cfg.seed = cfg.seed + index as u64;
                train_cfg.trace_estimator = false;
                train_cfg.checkpoint_every = train_cfg.epochs;
                let init = init_params(&cfg.widths, train_cfg.seed)?;
                match train(&mesh, &data, &init, &train_cfg) {
                    Ok(out) => {
                        let path = checkpoint_path(&cfg.out_dir, n);
                        write_file(&path, |w| out.params.write_checkpoint(w))?;
                        files.push(path);
                        let field = NeuralField::for_problem(out.params, &data);
                        evaluate_field(cfg, &mesh, &data, &field)
                    }
                    Err(e) => Err(e),
                }
            }
            FieldSource::Injected(field) => evaluate_field(cfg, &mesh, &data, field),
        };
        let (b, r_h, error) = match outcome {
            Ok(v) => v,
            Err(e) => {
                write_file(&csv_path, |w| write_convergence_csv(&rows, w))?;
                return Err(e);
            }
        };
        let row = ConvergenceRow {
            n,
            h: mesh.meshsize(),
            dofs: mesh.interior_vertices().len(),
            r_h,
            eta: b.eta(),
            eta_res: b.eta_res,
            eta_loss: b.eta_loss,
            eta_coef: b.eta_coef,
            eta_rhs: b.eta_rhs,
            eta_elementwise: b.eta_elementwise(),
            h1_error: error,
            efficiency: if error > 0.0 { Some(efficiency_index(&b, error)?) } else { None },
        };
        progress(&row);
        rows.push(row);
        write_file(&csv_path, |w| write_convergence_csv(&rows, w))?;
    }
    let slopes = tail_slopes(&rows, cfg.tail_drop);
    let svg_path = cfg.out_dir.join("convergence.svg");
    let title = match &slopes {
        Ok(s) => format!("{}: slopes error {:.2}, estimator {:.2}", cfg.problem, s.error, s.eta_elementwise),
        Err(_) => cfg.problem.clone(),
    };
    let curve = |name: &str, i: usize, get: fn(&ConvergenceRow) -> f64| Series {
        name: name.into(),
        points: rows.iter().map(|r| (r.h, get(r))).collect(),
        color: color(i),
    };
    let plot = Plot {
        title,
        x_label: "h".into(),
        y_label: "value".into(),
        x_scale: Scale::Log,
        y_scale: Scale::Log,
        series: vec![
            curve("|u - u_NN|_1", 0, |r| r.h1_error),
            curve("(sum eta(E)^2)^1/2", 1, |r| r.eta_elementwise),
            curve("eta", 2, |r| r.eta),
        ],
    };
    fs::write(&svg_path, plot.render())?;
    files.push(svg_path);
    Ok(ConvergenceReport { rows, slopes, files })
}

/// Trains once on `cfg.trace_mesh`, logging every estimator term at each
/// checkpoint; writes `trace.csv` and `trace.svg`.
pub fn run_trace(cfg: &ExperimentConfig) -> Result<TrainingTrace> {
    cfg.validate()?;
    let data = by_name(&cfg.problem)?;
    let mesh = build_structured_unit_square(cfg.trace_mesh)?;
    let train_cfg = cfg.training();
    let init = init_params(&cfg.widths, train_cfg.seed)?;
    let out = train(&mesh, &data, &init, &train_cfg)?;
    fs::create_dir_all(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join("trace.csv"), |w| out.trace.write_csv(w))?;
    write_file(&checkpoint_path(&cfg.out_dir, cfg.trace_mesh), |w| out.params.write_checkpoint(w))?;
    let records = &out.trace.records;
    let curve = |name: &str, i: usize, get: &dyn Fn(&crate::training::TraceRecord) -> f64| Series {
        name: name.into(),
        points: records.iter().map(|r| (r.epoch as f64, get(r))).collect(),
        color: color(i),
    };
    let plot = Plot {
        title: format!("{} training, n = {}", cfg.problem, cfg.trace_mesh),
        x_label: "epoch".into(),
        y_label: "value".into(),
        x_scale: Scale::Linear,
        y_scale: Scale::Log,
        series: vec![
            curve("eta_rhs", 0, &|r| r.eta_rhs),
            curve("eta_coef", 1, &|r| r.eta_coef),
            curve("eta_res", 2, &|r| r.eta_res),
            curve("eta_loss", 3, &|r| r.eta_loss),
            curve("eta", 4, &|r| r.eta),
            curve("|u - u_NN|_1", 5, &|r| r.h1_error.unwrap_or(f64::NAN)),
        ],
    };
    fs::write(cfg.out_dir.join("trace.svg"), plot.render())?;
    Ok(out.trace)
}

/// Recomputes the estimator breakdown on mesh `n` from a saved checkpoint and
/// writes `breakdown_n{n}.csv`. Returns the breakdown and the exact error when
/// the problem has one.
pub fn run_estimate(cfg: &ExperimentConfig, n: usize, checkpoint: &Path) -> Result<(EstimatorBreakdown, Option<f64>)> {
    cfg.validate()?;
    let data = by_name(&cfg.problem)?;
    let mesh = build_structured_unit_square(n)?;
    let params = MlpParams::read_checkpoint(fs::File::open(checkpoint)?)?;
    let field = NeuralField::for_problem(params, &data);
    let rules = EstimatorRules::new(cfg.assembly_precision)?;
    let r = assemble_residuals(&mesh, &field, &data, rules.assembly())?;
    let c_h = norm_constant(&mesh, cfg.ch_mode)?;
    let b = assemble_breakdown(&mesh, &field, &data, &r, c_h, &rules)?;
    let error = match data.exact {
        Some(_) => Some(h1_error(&mesh, &field, &data)?),
        None => None,
    };
    fs::create_dir_all(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join(format!("breakdown_n{n}.csv")), |w| b.write_csv(w))?;
    Ok((b, error))
}

#[derive(Debug)]
pub struct SelftestReport {
    pub checks: Vec<(String, std::result::Result<(), String>)>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.1.is_ok())
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Quick property checks over every module.
pub fn selftest() -> SelftestReport {
    type Check = fn() -> std::result::Result<(), String>;
    let checks: Vec<(&str, Check)> = vec![
        ("quadrature exactness", selftest_quadrature),
        ("projection reproduction and mean", selftest_projection),
        ("manufactured data consistency", selftest_problems),
        ("zero estimator for exact polynomial field", selftest_zero_estimator),
        ("loss gradient against finite differences", selftest_gradient),
        ("norm constants on the single-vertex mesh", selftest_norm_constants),
        ("slope fit on exact power laws", selftest_slopes),
    ];
    SelftestReport {
        checks: checks.into_iter().map(|(name, f)| (name.to_string(), f())).collect(),
    }
}

fn selftest_quadrature() -> std::result::Result<(), String> {
    let fact = |n: i32| (1..=n).map(f64::from).product::<f64>();
    for p in [3, 7] {
        let rule = reference_rule(p).map_err(|e| e.to_string())?;
        for a in 0..=p as i32 {
            for b in 0..=(p as i32 - a) {
                let exact = fact(a) * fact(b) / fact(a + b + 2);
                let got = rule.reference_integral(|x| x[0].powi(a) * x[1].powi(b));
                check((got - exact).abs() <= 1e-13 * exact, || format!("rule {p}, x^{a} y^{b}: {got} vs {exact}"))?;
            }
        }
    }
    Ok(())
}

fn selftest_projection() -> std::result::Result<(), String> {
    let mesh = build_structured_unit_square(3).map_err(|e| e.to_string())?;
    let rule = reference_rule(7).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let e = rng.gen_range(0..mesh.num_triangles());
        let c: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let p = move |x: [f64; 2]| c[0] + c[1] * x[0] + c[2] * x[1] + c[3] * x[0] * x[0] + c[4] * x[0] * x[1] + c[5] * x[1] * x[1];
        let proj = project(&mesh, e, 2, p, &rule).map_err(|err| err.to_string())?;
        let x = mesh.element_map(e).to_physical([0.3, 0.2]);
        check((proj.eval(x) - p(x)).abs() < 1e-12, || format!("element {e}: reproduction"))?;
        let f = move |x: [f64; 2]| (c[0] * x[0] + c[1] * x[1]).sin();
        let proj = project(&mesh, e, 3, f, &rule).map_err(|err| err.to_string())?;
        let exact = crate::quadrature::integrate(&mesh, e, f, &rule).map_err(|err| err.to_string())?;
        check((proj.integral() - exact).abs() < 1e-12, || format!("element {e}: mean"))?;
    }
    Ok(())
}

fn selftest_problems() -> std::result::Result<(), String> {
    for name in crate::problems::NAMES {
        let p = by_name(name).map_err(|e| e.to_string())?;
        p.check(100, 5, 1e-8).map_err(|e| format!("{name}: {e}"))?;
    }
    Ok(())
}

fn selftest_zero_estimator() -> std::result::Result<(), String> {
    let data = polynomial_diffusion();
    let mesh = build_structured_unit_square(8).map_err(|e| e.to_string())?;
    let u = data.exact.clone().ok_or("missing exact solution")?;
    let rules = EstimatorRules::new(3).map_err(|e| e.to_string())?;
    let r = assemble_residuals(&mesh, &u, &data, rules.assembly()).map_err(|e| e.to_string())?;
    let b = assemble_breakdown(&mesh, &u, &data, &r, 1.0, &rules).map_err(|e| e.to_string())?;
    check(b.eta() <= 1e-8, || format!("eta = {}", b.eta()))
}

fn selftest_gradient() -> std::result::Result<(), String> {
    let data = poisson_tanh();
    let mesh = build_structured_unit_square(4).map_err(|e| e.to_string())?;
    let rule = reference_rule(3).map_err(|e| e.to_string())?;
    let field = NeuralField::for_problem(init_params(&[2, 8, 8, 1], 5).map_err(|e| e.to_string())?, &data);
    let (_, grad) = loss_gradient(&field, &mesh, &data, &rule).map_err(|e| e.to_string())?;
    let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let loss_at = |k: usize, step: f64| {
        let mut f = field.clone();
        f.params.values_mut()[k] += step;
        assemble_residuals(&mesh, &f, &data, &rule).map(|r| r.loss())
    };
    for k in (0..grad.len()).step_by(grad.len() / 10 + 1) {
        let fd = (loss_at(k, 1e-4).map_err(|e| e.to_string())? - loss_at(k, -1e-4).map_err(|e| e.to_string())?) / 2e-4;
        check((fd - grad[k]).abs() <= 1e-4 * grad[k].abs().max(1e-6 * scale), || {
            format!("component {k}: {} vs {fd}", grad[k])
        })?;
    }
    Ok(())
}

fn selftest_norm_constants() -> std::result::Result<(), String> {
    let mesh = build_structured_unit_square(2).map_err(|e| e.to_string())?;
    let c = measure_norm_constants(&mesh).map_err(|e| e.to_string())?;
    check((c.upper - 0.5).abs() < 1e-12 && (c.lower - 0.5).abs() < 1e-12, || format!("{c:?}"))
}

fn selftest_slopes() -> std::result::Result<(), String> {
    let s = fit_slope(&[(1.0, 1.0), (0.5, 1.0 / 16.0), (0.25, 1.0 / 256.0)]).map_err(|e| e.to_string())?;
    check((s - 4.0).abs() < 1e-12, || format!("slope {s}"))?;
    check(fit_slope(&[(1.0, 0.0), (0.5, 1.0)]).is_err(), || "accepted a zero value".into())
}
