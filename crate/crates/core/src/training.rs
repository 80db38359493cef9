//! Full-batch Adam on `R_h^2` with checkpointed estimator traces.
//!
//! The loop is sequential; each loss evaluation parallelises internally with
//! a fixed reduction order, so traces do not depend on the thread count.

use std::io::Write;

use crate::error::{Error, Result};
use crate::estimator::{assemble_breakdown_with, EstimatorRules};
use crate::mesh::Mesh;
use crate::network::{unit_square_multiplier, LossEvaluator, MlpParams, NeuralField};
use crate::par::Execution;
use crate::problems::{h1_error_with, ProblemSpec};
use crate::testspace::{norm_constant, ChMode};

/// Abort once `R_h` exceeds this multiple of its initial value.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Learning rate is multiplied by `decay_factor` every `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Seed for parameter initialisation by callers; the loop itself is deterministic.
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Stop as soon as `R_h <= stop_tolerance`.
    pub stop_tolerance: f64,
    pub precision: usize,
    pub ch_mode: ChMode,
    /// Evaluate the estimator at checkpoints; otherwise only `R_h` is logged.
    pub trace_estimator: bool,
    /// Keep a copy of the parameters at every checkpoint.
    pub keep_snapshots: bool,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10_000,
            learning_rate: 1e-3,
            decay_factor: 0.5,
            decay_every: 2000,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            checkpoint_every: 100,
            stop_tolerance: 0.0,
            precision: 3,
            ch_mode: ChMode::Measured,
            trace_estimator: true,
            keep_snapshots: false,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning rate must be positive");
        }
        if !(self.decay_factor > 0.0) || self.decay_every == 0 {
            return bad("learning-rate decay must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("moment coefficients must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint period must be at least 1");
        }
        if !(self.stop_tolerance >= 0.0) {
            return bad("stopping tolerance must be nonnegative");
        }
        if self.precision < 2 {
            return Err(Error::UnsupportedPrecision(self.precision));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

/// One checkpoint. Estimator entries are zero when not traced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub epoch: usize,
    pub r_h: f64,
    pub eta_rhs: f64,
    pub eta_coef: f64,
    pub eta_res: f64,
    pub eta_loss: f64,
    pub eta: f64,
    pub h1_error: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingTrace {
    pub records: Vec<TraceRecord>,
    /// Parameters at each record, when requested.
    pub snapshots: Vec<MlpParams>,
}

pub const TRACE_HEADER: &str = "epoch,R_h,eta_rhs,eta_coef,eta_res,eta_loss,eta,h1_error";

impl TrainingTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// CSV with 17 significant digits; a missing H1 error is an empty field.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{TRACE_HEADER}")?;
        for r in &self.records {
            write!(out, "{}", r.epoch)?;
            for v in [r.r_h, r.eta_rhs, r.eta_coef, r.eta_res, r.eta_loss, r.eta] {
                write!(out, ",{v:.16e}")?;
            }
            match r.h1_error {
                Some(e) => writeln!(out, ",{e:.16e}")?,
                None => writeln!(out, ",")?,
            }
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii csv")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the smallest observed `R_h`.
    pub params: MlpParams,
    pub best_r_h: f64,
    pub best_epoch: usize,
    pub initial_r_h: f64,
    /// Epochs evaluated, including epoch 0.
    pub epochs_run: usize,
    pub trace: TrainingTrace,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, cfg: &TrainConfig, lr: f64, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
        }
    }
}

/// Minimises `R_h^2` starting from `init`; returns the best iterate.
pub fn train(mesh: &Mesh, data: &ProblemSpec, init: &MlpParams, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if init.widths().first() != Some(&2) || init.widths().last() != Some(&1) {
        return Err(Error::InvalidArgument(format!(
            "network must map R^2 to R, got widths {:?}",
            init.widths()
        )));
    }
    let rules = EstimatorRules::new(cfg.precision)?;
    let multiplier = unit_square_multiplier();
    let evaluator = LossEvaluator::new(mesh, data, rules.assembly(), &multiplier)?.with_execution(cfg.execution);
    let c_h = if cfg.trace_estimator {
        norm_constant(mesh, cfg.ch_mode)?
    } else {
        0.0
    };

    let mut params = init.clone();
    let mut adam = Adam::new(params.len());
    let mut trace = TrainingTrace::default();
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut initial_r_h = f64::NAN;
    let mut epochs_run = 0;

    for epoch in 0..=cfg.epochs {
        let lg = evaluator.evaluate(&params)?;
        let r_h = lg.loss.sqrt();
        epochs_run = epoch + 1;
        if epoch == 0 {
            initial_r_h = r_h;
        } else if r_h > DIVERGENCE_FACTOR * initial_r_h {
            return Err(Error::Diverged {
                epoch,
                r_h,
                guard: DIVERGENCE_FACTOR * initial_r_h,
            });
        }
        if r_h < best.0 {
            best = (r_h, epoch, params.clone());
        }
        let stop = r_h <= cfg.stop_tolerance;
        if epoch % cfg.checkpoint_every == 0 || (stop && epoch != 0) {
            let mut record = TraceRecord {
                epoch,
                r_h,
                eta_rhs: 0.0,
                eta_coef: 0.0,
                eta_res: 0.0,
                eta_loss: 0.0,
                eta: 0.0,
                h1_error: None,
            };
            if cfg.trace_estimator {
                let field = NeuralField::new(params.clone(), multiplier.clone(), data.lift.clone());
                let b = assemble_breakdown_with(cfg.execution, mesh, &field, data, &lg.residuals, c_h, &rules)?;
                record.eta_rhs = b.eta_rhs;
                record.eta_coef = b.eta_coef;
                record.eta_res = b.eta_res;
                record.eta_loss = b.eta_loss;
                record.eta = b.eta();
                if data.exact.is_some() {
                    record.h1_error = Some(h1_error_with(cfg.execution, mesh, &field, data)?);
                }
            }
            trace.records.push(record);
            if cfg.keep_snapshots {
                trace.snapshots.push(params.clone());
            }
        }
        if stop || epoch == cfg.epochs {
            break;
        }
        adam.step(cfg, cfg.learning_rate_at(epoch), params.values_mut(), &lg.gradient);
    }

    let (best_r_h, best_epoch, params) = best;
    Ok(TrainOutcome {
        params,
        best_r_h,
        best_epoch,
        initial_r_h,
        epochs_run,
        trace,
    })
}
