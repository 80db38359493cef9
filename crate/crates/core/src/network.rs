//! The trial manifold: a tanh MLP `w`, the boundary multiplier `Phi` and the
//! Dirichlet lift `g`, combined as `u = Phi * w + g`.
//!
//! Evaluation propagates the value together with both input derivatives
//! through every layer. The loss gradient runs the exact reverse of that
//! propagation, so the dependence of the input gradient on the weights is
//! differentiated analytically.
//!
//! Points are processed in fixed chunks of [`CHUNK`] with one matrix product
//! per layer and chunk; chunk results are reduced in chunk order, so results
//! do not depend on the thread count.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_finite, Error, Result};
use crate::field::{Sample, SmoothField, TrialField};
use crate::mesh::{Mesh, Point};
use crate::par::{self, Execution};
use crate::problems::ProblemSpec;
use crate::quadrature::QuadRule;
use crate::testspace::{AssemblyPlan, ResidualVector};

/// Points per batched matrix product.
pub const CHUNK: usize = 128;

const CHECKPOINT_MAGIC: &str = "vpinn-mlp";
const CHECKPOINT_VERSION: u32 = 1;

/// Weights and biases of a fully connected network, stored flat.
///
/// Layer `l` occupies `W_l` (row-major, `n_l x n_{l-1}`) followed by `b_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    widths: Vec<usize>,
    values: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        validate_widths(widths)?;
        Ok(Self {
            widths: widths.to_vec(),
            values: vec![0.0; parameter_count(widths)],
        })
    }

    pub fn from_values(widths: &[usize], values: Vec<f64>) -> Result<Self> {
        validate_widths(widths)?;
        if values.len() != parameter_count(widths) {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameters, got {}",
                parameter_count(widths),
                values.len()
            )));
        }
        Ok(Self {
            widths: widths.to_vec(),
            values,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Offset of layer `l` (1-based) in the flat vector.
    fn offset(&self, l: usize) -> usize {
        layer_offset(&self.widths, l)
    }

    pub fn weights(&self, l: usize) -> &[f64] {
        let o = self.offset(l);
        &self.values[o..o + self.widths[l] * self.widths[l - 1]]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let o = self.offset(l) + self.widths[l] * self.widths[l - 1];
        &self.values[o..o + self.widths[l]]
    }

    /// Network output and its input gradient at one point.
    pub fn forward_point(&self, x: Point) -> Sample {
        let mut a = x.to_vec();
        let mut jx = vec![1.0, 0.0];
        let mut jy = vec![0.0, 1.0];
        let last = self.num_layers();
        for l in 1..=last {
            let (n_in, n_out) = (self.widths[l - 1], self.widths[l]);
            let w = self.weights(l);
            let b = self.bias(l);
            let mut na = vec![0.0; n_out];
            let mut nx = vec![0.0; n_out];
            let mut ny = vec![0.0; n_out];
            for i in 0..n_out {
                let row = &w[i * n_in..(i + 1) * n_in];
                let (mut z, mut dx, mut dy) = (b[i], 0.0, 0.0);
                for k in 0..n_in {
                    z += row[k] * a[k];
                    dx += row[k] * jx[k];
                    dy += row[k] * jy[k];
                }
                if l == last {
                    na[i] = z;
                    nx[i] = dx;
                    ny[i] = dy;
                } else {
                    let t = z.tanh();
                    let s = 1.0 - t * t;
                    na[i] = t;
                    nx[i] = s * dx;
                    ny[i] = s * dy;
                }
            }
            a = na;
            jx = nx;
            jy = ny;
        }
        Sample {
            value: a[0],
            gradient: [jx[0], jy[0]],
        }
    }

    /// Plain-text checkpoint: magic and version, the widths, then one
    /// parameter per line in shortest round-trip notation.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        let mut s = String::new();
        writeln!(s, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}").unwrap();
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        writeln!(s, "widths {}", widths.join(" ")).unwrap();
        for v in &self.values {
            writeln!(s, "{v:e}").unwrap();
        }
        out.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(input: R) -> Result<Self> {
        let mut lines = BufReader::new(input).lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Parse("truncated checkpoint".into()))?
                .map_err(Error::from)
        };
        let header = next()?;
        let mut it = header.split_whitespace();
        if it.next() != Some(CHECKPOINT_MAGIC) {
            return Err(Error::Parse("not a network checkpoint".into()));
        }
        let version: u32 = it
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Parse("missing checkpoint version".into()))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
        }
        let widths_line = next()?;
        let mut it = widths_line.split_whitespace();
        if it.next() != Some("widths") {
            return Err(Error::Parse("missing widths line".into()));
        }
        let widths = it
            .map(|w| w.parse::<usize>().map_err(|_| Error::Parse(format!("bad width '{w}'"))))
            .collect::<Result<Vec<_>>>()?;
        validate_widths(&widths)?;
        let n = parameter_count(&widths);
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let line = next()?;
            values.push(
                line.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad parameter '{line}'")))?,
            );
        }
        Self::from_values(&widths, values)
    }
}

fn validate_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::InvalidArgument("network needs at least input and output widths".into()));
    }
    if widths[0] != 2 || *widths.last().unwrap() != 1 {
        return Err(Error::InvalidArgument("widths must start with 2 and end with 1".into()));
    }
    if widths.iter().any(|&w| w == 0) {
        return Err(Error::InvalidArgument("layer widths must be positive".into()));
    }
    Ok(())
}

/// `sum_l (n_{l-1} + 1) n_l`
pub fn parameter_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

fn layer_offset(widths: &[usize], l: usize) -> usize {
    parameter_count(&widths[..l])
}

/// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
pub fn init_params(widths: &[usize], seed: u64) -> Result<MlpParams> {
    let mut params = MlpParams::zeros(widths)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in 1..widths.len() {
        let bound = 1.0 / (widths[l - 1] as f64).sqrt();
        let o = layer_offset(widths, l);
        for v in &mut params.values[o..o + widths[l] * widths[l - 1]] {
            *v = rng.gen_range(-bound..=bound);
        }
    }
    Ok(params)
}

/// `Phi(x, y) = x (1 - x) y (1 - y)`, vanishing on the boundary of the unit square.
pub fn unit_square_multiplier() -> SmoothField {
    SmoothField::new(
        |p| p[0] * (1.0 - p[0]) * p[1] * (1.0 - p[1]),
        |p| {
            [
                (1.0 - 2.0 * p[0]) * p[1] * (1.0 - p[1]),
                p[0] * (1.0 - p[0]) * (1.0 - 2.0 * p[1]),
            ]
        },
    )
}

/// `u = Phi * w + g` with `w` the network.
#[derive(Debug, Clone)]
pub struct NeuralField {
    pub params: MlpParams,
    pub multiplier: SmoothField,
    pub lift: SmoothField,
}

impl NeuralField {
    pub fn new(params: MlpParams, multiplier: SmoothField, lift: SmoothField) -> Self {
        Self {
            params,
            multiplier,
            lift,
        }
    }

    /// Network on the unit square with the problem's lift.
    pub fn for_problem(params: MlpParams, problem: &ProblemSpec) -> Self {
        Self::new(params, unit_square_multiplier(), problem.lift.clone())
    }

    pub fn eval_with_gradient(&self, x: Point) -> Sample {
        self.sample(x)
    }
}

#[inline]
fn compose(phi: &Sample, w: &Sample, lift: &Sample) -> Sample {
    Sample {
        value: phi.value * w.value + lift.value,
        gradient: [
            phi.gradient[0] * w.value + phi.value * w.gradient[0] + lift.gradient[0],
            phi.gradient[1] * w.value + phi.value * w.gradient[1] + lift.gradient[1],
        ],
    }
}

impl TrialField for NeuralField {
    fn sample(&self, x: Point) -> Sample {
        let w = self.params.forward_point(x);
        compose(&self.multiplier.sample(x), &w, &self.lift.sample(x))
    }

    fn sample_batch(&self, exec: Execution, points: &[Point]) -> Vec<Sample> {
        let phi: Vec<Sample> = points.iter().map(|&p| self.multiplier.sample(p)).collect();
        let lift: Vec<Sample> = points.iter().map(|&p| self.lift.sample(p)).collect();
        let w = network_batch(exec, &self.params, points);
        (0..points.len()).map(|i| compose(&phi[i], &w[i], &lift[i])).collect()
    }
}

/// Network values and input gradients at many points via the chunked path.
pub fn network_batch(exec: Execution, params: &MlpParams, points: &[Point]) -> Vec<Sample> {
    par::map_chunks(exec, points, CHUNK, |_, chunk| ChunkTape::forward(params, chunk).output())
        .into_iter()
        .flatten()
        .collect()
}

/// `C = A B (+ C when accumulate)` on strided row/column layouts.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    // Slice bounds guarantee every strided access is in range.
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Forward activations of one chunk, kept for the reverse pass.
///
/// Layer state `X_l` is `n_l x 3c` row-major with column blocks
/// `[value | d/dx | d/dy]`.
struct ChunkTape {
    cols: usize,
    /// `X_0 .. X_{L-1}` (inputs of each affine layer).
    states: Vec<Vec<f64>>,
    /// Pre-activation derivative blocks `W_l X_{l-1}` (`n_l x 2c`) of hidden layers.
    pre: Vec<Vec<f64>>,
    /// Output block `1 x 3c`.
    out: Vec<f64>,
}

impl ChunkTape {
    fn forward(params: &MlpParams, points: &[Point]) -> Self {
        let c = points.len();
        let cols = 3 * c;
        let mut x0 = vec![0.0; 2 * cols];
        for (j, p) in points.iter().enumerate() {
            x0[j] = p[0];
            x0[c + j] = 1.0;
            x0[cols + j] = p[1];
            x0[cols + 2 * c + j] = 1.0;
        }
        let widths = params.widths();
        let layers = params.num_layers();
        let mut states = vec![x0];
        let mut pre = Vec::with_capacity(layers - 1);
        for l in 1..layers {
            let (n_in, n_out) = (widths[l - 1], widths[l]);
            let mut y = vec![0.0; n_out * cols];
            gemm(n_out, n_in, cols, params.weights(l), n_in, 1, &states[l - 1], cols, 1, &mut y, cols, 1, false);
            let bias = params.bias(l);
            let mut d = vec![0.0; n_out * 2 * c];
            for i in 0..n_out {
                let row = &mut y[i * cols..(i + 1) * cols];
                d[i * 2 * c..(i + 1) * 2 * c].copy_from_slice(&row[c..]);
                for j in 0..c {
                    let t = (row[j] + bias[i]).tanh();
                    let s = 1.0 - t * t;
                    row[j] = t;
                    row[c + j] *= s;
                    row[2 * c + j] *= s;
                }
            }
            states.push(y);
            pre.push(d);
        }
        let n_in = widths[layers - 1];
        let mut out = vec![0.0; cols];
        gemm(1, n_in, cols, params.weights(layers), n_in, 1, &states[layers - 1], cols, 1, &mut out, cols, 1, false);
        let b = params.bias(layers)[0];
        out[..c].iter_mut().for_each(|v| *v += b);
        Self {
            cols,
            states,
            pre,
            out,
        }
    }

    fn output(&self) -> Vec<Sample> {
        let c = self.cols / 3;
        (0..c)
            .map(|j| Sample {
                value: self.out[j],
                gradient: [self.out[c + j], self.out[2 * c + j]],
            })
            .collect()
    }

    /// Accumulates into `grad` the parameter gradient of
    /// `sum_j seed_j.value * w(x_j) + seed_j.gradient . grad w(x_j)`.
    fn backward(&self, params: &MlpParams, seeds: &[Sample], grad: &mut [f64]) {
        let c = self.cols / 3;
        let cols = self.cols;
        let widths = params.widths();
        let layers = params.num_layers();

        let mut bar = vec![0.0; cols];
        for (j, s) in seeds.iter().enumerate() {
            bar[j] = s.value;
            bar[c + j] = s.gradient[0];
            bar[2 * c + j] = s.gradient[1];
        }
        let mut n_out = 1;
        for l in (1..=layers).rev() {
            let n_in = widths[l - 1];
            let o = layer_offset(widths, l);
            let (gw, gb) = grad[o..o + (n_in + 1) * n_out].split_at_mut(n_in * n_out);
            // dW += bar * X_{l-1}^T
            gemm(n_out, cols, n_in, &bar, cols, 1, &self.states[l - 1], 1, cols, gw, n_in, 1, true);
            for i in 0..n_out {
                gb[i] += bar[i * cols..i * cols + c].iter().sum::<f64>();
            }
            if l == 1 {
                break;
            }
            // bar_{l-1} = W^T bar
            let mut prev = vec![0.0; n_in * cols];
            gemm(n_in, n_out, cols, params.weights(l), 1, n_in, &bar, cols, 1, &mut prev, cols, 1, false);
            // through tanh of layer l-1
            let state = &self.states[l - 1];
            let d = &self.pre[l - 2];
            for i in 0..n_in {
                let row = &mut prev[i * cols..(i + 1) * cols];
                let srow = &state[i * cols..(i + 1) * cols];
                let drow = &d[i * 2 * c..(i + 1) * 2 * c];
                for j in 0..c {
                    let a = srow[j];
                    let s = 1.0 - a * a;
                    let (jx, jy) = (row[c + j], row[2 * c + j]);
                    let s_bar = jx * drow[j] + jy * drow[c + j];
                    row[j] = (row[j] - 2.0 * a * s_bar) * s;
                    row[c + j] = s * jx;
                    row[2 * c + j] = s * jy;
                }
            }
            bar = prev;
            n_out = n_in;
        }
    }
}

/// Loss `R_h^2` and its parameter gradient for a fixed mesh, problem and rule.
///
/// Everything independent of the weights is precomputed at construction.
#[derive(Debug, Clone)]
pub struct LossEvaluator {
    pub plan: AssemblyPlan,
    multiplier: Vec<Sample>,
    lift: Vec<Sample>,
    exec: Execution,
}

/// Result of one loss-and-gradient evaluation.
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub residuals: ResidualVector,
    pub loss: f64,
    pub gradient: Vec<f64>,
}

impl LossEvaluator {
    pub fn new(mesh: &Mesh, problem: &ProblemSpec, rule: &QuadRule, multiplier: &SmoothField) -> Result<Self> {
        let plan = AssemblyPlan::new(mesh, problem, rule)?;
        let multiplier = plan.points().iter().map(|&p| multiplier.sample(p)).collect();
        let lift = plan.points().iter().map(|&p| problem.lift.sample(p)).collect();
        Ok(Self {
            plan,
            multiplier,
            lift,
            exec: Execution::default(),
        })
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    fn samples(&self, outputs: &[Sample]) -> Vec<Sample> {
        outputs
            .iter()
            .enumerate()
            .map(|(i, w)| compose(&self.multiplier[i], w, &self.lift[i]))
            .collect()
    }

    pub fn residuals(&self, params: &MlpParams) -> Result<ResidualVector> {
        let w = network_batch(self.exec, params, self.plan.points());
        self.plan.residuals(self.exec, &self.samples(&w))
    }

    pub fn evaluate(&self, params: &MlpParams) -> Result<LossGradient> {
        let points = self.plan.points();
        let tapes = par::map_chunks(self.exec, points, CHUNK, |_, chunk| ChunkTape::forward(params, chunk));
        let outputs: Vec<Sample> = tapes.iter().flat_map(|t| t.output()).collect();
        let residuals = self.plan.residuals(self.exec, &self.samples(&outputs))?;
        let loss = ensure_finite(residuals.loss(), "loss")?;

        // d/du and d/dgrad(u) per node, pulled back through u = Phi w + g
        let seeds: Vec<Sample> = self
            .plan
            .adjoint_seeds(self.exec, &residuals)
            .iter()
            .zip(&self.multiplier)
            .map(|(s, phi)| Sample {
                value: phi.value * s.value + phi.gradient[0] * s.gradient[0] + phi.gradient[1] * s.gradient[1],
                gradient: [phi.value * s.gradient[0], phi.value * s.gradient[1]],
            })
            .collect();

        let partial = par::map_range(self.exec, tapes.len(), |k| {
            let mut g = vec![0.0; params.len()];
            let lo = k * CHUNK;
            let hi = (lo + CHUNK).min(points.len());
            tapes[k].backward(params, &seeds[lo..hi], &mut g);
            g
        });
        let mut gradient = vec![0.0; params.len()];
        for g in &partial {
            for (acc, v) in gradient.iter_mut().zip(g) {
                *acc += v;
            }
        }
        for g in &gradient {
            ensure_finite(*g, "loss gradient")?;
        }
        Ok(LossGradient {
            residuals,
            loss,
            gradient,
        })
    }
}

/// `R_h^2` and its exact gradient with respect to every weight and bias.
pub fn loss_gradient(
    field: &NeuralField,
    mesh: &Mesh,
    data: &ProblemSpec,
    rule: &QuadRule,
) -> Result<(f64, Vec<f64>)> {
    let mut problem = data.clone();
    problem.lift = field.lift.clone();
    let eval = LossEvaluator::new(mesh, &problem, rule, &field.multiplier)?;
    let out = eval.evaluate(&field.params)?;
    Ok((out.loss, out.gradient))
}
