//! The P1 test space: Lagrange hats at interior vertices, quadrature-based
//! residual assembly, the loss, and the norm-equivalence constants.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_finite, Error, Result};
use crate::field::{Sample, TrialField};
use crate::mesh::{Mesh, Point};
use crate::par::{self, Execution};
use crate::problems::{PointData, ProblemSpec};
use crate::quadrature::QuadRule;

/// Constant gradient of the hat of `vertex` restricted to `element`.
pub fn hat_gradient(mesh: &Mesh, vertex: usize, element: usize) -> Result<[f64; 2]> {
    let local = mesh.triangles()[element]
        .iter()
        .position(|&v| v == vertex)
        .ok_or(Error::VertexNotInElement { vertex, element })?;
    Ok(local_hat_gradients(mesh, element)[local])
}

/// Gradients of the three barycentric coordinates of `element`.
pub fn local_hat_gradients(mesh: &Mesh, element: usize) -> [[f64; 2]; 3] {
    let inv = mesh.element_map(element).inverse;
    let g1 = inv[0];
    let g2 = inv[1];
    [[-g1[0] - g2[0], -g1[1] - g2[1]], g1, g2]
}

/// Numbering of the interior vertices `I_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct DofMap {
    /// Vertex id of each test function, increasing.
    pub vertices: Vec<usize>,
    /// Test function index of each vertex, if interior.
    pub index: Vec<Option<usize>>,
}

impl DofMap {
    pub fn new(mesh: &Mesh) -> Self {
        let vertices = mesh.interior_vertices();
        let mut index = vec![None; mesh.num_vertices()];
        for (i, &v) in vertices.iter().enumerate() {
            index[v] = Some(i);
        }
        Self { vertices, index }
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn element_dofs(&self, mesh: &Mesh, element: usize) -> [Option<usize>; 3] {
        mesh.triangles()[element].map(|v| self.index[v])
    }
}

/// `I_h^E`: test-function indices whose support contains `element`.
pub fn elemental_index_set(mesh: &Mesh, element: usize) -> Vec<usize> {
    let dofs = DofMap::new(mesh);
    dofs.element_dofs(mesh, element).into_iter().flatten().collect()
}

/// Residuals `r_i = F_h(phi_i) - a_h(u, phi_i)` over the interior vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualVector {
    pub values: Vec<f64>,
}

impl ResidualVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `R_h^2 = sum_i r_i^2`
    pub fn loss(&self) -> f64 {
        loss(self)
    }
}

pub fn loss(r: &ResidualVector) -> f64 {
    r.values.iter().map(|v| v * v).sum()
}

/// Everything about the quadrature nodes of the assembly that does not depend
/// on the trial field; built once per (mesh, problem, rule).
#[derive(Debug, Clone)]
pub struct AssemblyPlan {
    pub dofs: DofMap,
    nodes_per_element: usize,
    points: Vec<Point>,
    weights: Vec<f64>,
    /// Barycentric coordinates, i.e. the three local hat values.
    hats: Vec<[f64; 3]>,
    data: Vec<PointData>,
    element_gradients: Vec<[[f64; 2]; 3]>,
    element_dofs: Vec<[Option<usize>; 3]>,
}

impl AssemblyPlan {
    pub fn new(mesh: &Mesh, problem: &ProblemSpec, rule: &QuadRule) -> Result<Self> {
        if rule.precision() < 2 {
            return Err(Error::InvalidArgument("assembly needs precision >= 2".into()));
        }
        let dofs = DofMap::new(mesh);
        let nt = mesh.num_triangles();
        let q = rule.len();
        let mut points = Vec::with_capacity(nt * q);
        let mut weights = Vec::with_capacity(nt * q);
        let mut hats = Vec::with_capacity(nt * q);
        let mut data = Vec::with_capacity(nt * q);
        let mut element_gradients = Vec::with_capacity(nt);
        let mut element_dofs = Vec::with_capacity(nt);
        for t in 0..nt {
            let map = mesh.element_map(t);
            let scale = map.det.abs();
            for (lambda, w) in rule.barycentric().iter().zip(rule.weights()) {
                let x = map.to_physical([lambda[1], lambda[2]]);
                let d = problem.data(x);
                for (v, what) in [(d.mu, "mu"), (d.beta[0], "beta"), (d.beta[1], "beta"), (d.sigma, "sigma"), (d.f, "f")] {
                    ensure_finite(v, what)?;
                }
                points.push(x);
                weights.push(w * scale);
                hats.push(*lambda);
                data.push(d);
            }
            element_gradients.push(local_hat_gradients(mesh, t));
            element_dofs.push(dofs.element_dofs(mesh, t));
        }
        Ok(Self {
            dofs,
            nodes_per_element: q,
            points,
            weights,
            hats,
            data,
            element_gradients,
            element_dofs,
        })
    }

    /// Quadrature nodes, element-major.
    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn num_elements(&self) -> usize {
        self.element_dofs.len()
    }

    /// Residual vector from the field samples at [`points`](Self::points).
    pub fn residuals(&self, exec: Execution, samples: &[Sample]) -> Result<ResidualVector> {
        assert_eq!(samples.len(), self.points.len());
        for s in samples {
            ensure_finite(s.value, "trial field value")?;
            ensure_finite(s.gradient[0], "trial field gradient")?;
            ensure_finite(s.gradient[1], "trial field gradient")?;
        }
        let q = self.nodes_per_element;
        let contributions = par::map_range(exec, self.num_elements(), |t| {
            let grads = &self.element_gradients[t];
            let mut local = [0.0; 3];
            for k in t * q..(t + 1) * q {
                let s = &samples[k];
                let d = &self.data[k];
                let w = self.weights[k];
                let adv = d.beta[0] * s.gradient[0] + d.beta[1] * s.gradient[1];
                for j in 0..3 {
                    let phi = self.hats[k][j];
                    let diff = d.mu * (s.gradient[0] * grads[j][0] + s.gradient[1] * grads[j][1]);
                    local[j] += (d.f * phi - diff - adv * phi - d.sigma * s.value * phi) * w;
                }
            }
            local
        });
        let mut values = vec![0.0; self.dofs.len()];
        for (t, local) in contributions.iter().enumerate() {
            for (j, dof) in self.element_dofs[t].iter().enumerate() {
                if let Some(i) = dof {
                    values[*i] += local[j];
                }
            }
        }
        Ok(ResidualVector { values })
    }

    /// Per-node derivatives of `R_h^2` with respect to the field value and the
    /// field gradient at that node.
    pub fn adjoint_seeds(&self, exec: Execution, r: &ResidualVector) -> Vec<Sample> {
        let q = self.nodes_per_element;
        let per_element = par::map_range(exec, self.num_elements(), |t| {
            let grads = &self.element_gradients[t];
            let rr = self.element_dofs[t].map(|d| d.map_or(0.0, |i| 2.0 * r.values[i]));
            (t * q..(t + 1) * q)
                .map(|k| {
                    let d = &self.data[k];
                    let w = self.weights[k];
                    let mut seed = Sample::default();
                    for j in 0..3 {
                        if rr[j] == 0.0 {
                            continue;
                        }
                        let phi = self.hats[k][j];
                        let c = rr[j] * w;
                        seed.value -= c * d.sigma * phi;
                        seed.gradient[0] -= c * (d.mu * grads[j][0] + d.beta[0] * phi);
                        seed.gradient[1] -= c * (d.mu * grads[j][1] + d.beta[1] * phi);
                    }
                    seed
                })
                .collect::<Vec<_>>()
        });
        per_element.into_iter().flatten().collect()
    }
}

/// Element-loop residual assembly for an arbitrary trial field.
pub fn assemble_residuals(
    mesh: &Mesh,
    field: &dyn TrialField,
    data: &ProblemSpec,
    rule: &QuadRule,
) -> Result<ResidualVector> {
    let exec = Execution::default();
    let plan = AssemblyPlan::new(mesh, data, rule)?;
    let samples = field.sample_batch(exec, plan.points());
    plan.residuals(exec, &samples)
}

/// How the estimator obtains `C_h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ChMode {
    #[default]
    Measured,
    /// `C_h = h^{-1}`
    Asymptotic,
}

impl std::str::FromStr for ChMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "measured" => Ok(ChMode::Measured),
            "asymptotic" => Ok(ChMode::Asymptotic),
            other => Err(Error::Parse(format!("unknown C_h mode '{other}'"))),
        }
    }
}

/// Constants of `c_h |v_h|_1 <= |v|_2 <= C_h |v_h|_1` on the hat basis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormEquivConstants {
    pub lower: f64,
    pub upper: f64,
}

/// Symmetric sparse matrix in compressed-row form.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn dim(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn mul(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[k] * x[self.cols[k]];
            }
            *yi = s;
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let mut d = vec![vec![0.0; n]; n];
        for (i, row) in d.iter_mut().enumerate() {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                row[self.cols[k]] = self.vals[k];
            }
        }
        d
    }
}

/// Exact P1 stiffness (H1-seminorm Gram) matrix on the interior hats.
pub fn stiffness_matrix(mesh: &Mesh) -> CsrMatrix {
    let dofs = DofMap::new(mesh);
    let mut rows: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); dofs.len()];
    for t in 0..mesh.num_triangles() {
        let g = local_hat_gradients(mesh, t);
        let area = mesh.area(t);
        let ld = dofs.element_dofs(mesh, t);
        for a in 0..3 {
            let Some(i) = ld[a] else { continue };
            for b in 0..3 {
                let Some(j) = ld[b] else { continue };
                *rows[i].entry(j).or_default() += area * (g[a][0] * g[b][0] + g[a][1] * g[b][1]);
            }
        }
    }
    let mut row_ptr = vec![0];
    let (mut cols, mut vals) = (Vec::new(), Vec::new());
    for row in rows {
        for (j, v) in row {
            cols.push(j);
            vals.push(v);
        }
        row_ptr.push(cols.len());
    }
    CsrMatrix { row_ptr, cols, vals }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Conjugate gradients for SPD `a`, started from zero.
fn conjugate_gradient(a: &CsrMatrix, b: &[f64], tol: f64) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    let stop = tol * tol * rr;
    for _ in 0..10 * n + 100 {
        if rr <= stop {
            break;
        }
        a.mul(&p, &mut ap);
        let alpha = rr / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    x
}

fn start_vector(n: usize) -> Vec<f64> {
    // seeded noise: structured starts can be exactly orthogonal to an extreme
    // eigenvector on symmetric meshes
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    (0..n).map(|_| rng.gen_range(0.5..1.5)).collect()
}

/// `|s v - lambda v|` for unit `v` with `sv = s v`.
fn eigen_residual(v: &[f64], sv: &[f64], lambda: f64) -> f64 {
    v.iter().zip(sv).map(|(a, b)| (b - lambda * a).powi(2)).sum::<f64>().sqrt()
}

/// Largest eigenvalue of `s` by power iteration with Rayleigh quotients.
fn largest_eigenvalue(s: &CsrMatrix, rel_tol: f64) -> f64 {
    let n = s.dim();
    let mut v = start_vector(n);
    normalize(&mut v);
    let mut sv = vec![0.0; n];
    let mut lambda = 0.0;
    for _ in 0..200_000 {
        s.mul(&v, &mut sv);
        lambda = dot(&v, &sv);
        let converged = eigen_residual(&v, &sv, lambda) <= rel_tol * lambda.abs();
        v.copy_from_slice(&sv);
        normalize(&mut v);
        if converged {
            break;
        }
    }
    lambda
}

/// Smallest eigenvalue of SPD `s` by inverse iteration.
fn smallest_eigenvalue(s: &CsrMatrix, rel_tol: f64) -> f64 {
    let n = s.dim();
    let mut v = start_vector(n);
    normalize(&mut v);
    let mut sv = vec![0.0; n];
    let mut lambda = f64::INFINITY;
    for _ in 0..10_000 {
        let mut w = conjugate_gradient(s, &v, 1e-15);
        normalize(&mut w);
        s.mul(&w, &mut sv);
        lambda = dot(&w, &sv);
        let converged = eigen_residual(&w, &sv, lambda) <= rel_tol * lambda.abs();
        v = w;
        if converged {
            break;
        }
    }
    lambda
}

/// Measures `c_h` and `C_h` from the extreme eigenvalues of the stiffness
/// matrix `S`: `C_h = lambda_min(S)^{-1/2}`, `c_h = lambda_max(S)^{-1/2}`.
pub fn measure_norm_constants(mesh: &Mesh) -> Result<NormEquivConstants> {
    let s = stiffness_matrix(mesh);
    if s.dim() == 0 {
        return Err(Error::InvalidArgument("mesh has no interior vertices".into()));
    }
    let lmax = largest_eigenvalue(&s, 1e-9);
    let lmin = smallest_eigenvalue(&s, 1e-9);
    if !(lmin > 0.0) {
        return Err(Error::NonFinite("stiffness matrix is singular".into()));
    }
    Ok(NormEquivConstants {
        lower: lmax.recip().sqrt(),
        upper: lmin.recip().sqrt(),
    })
}

/// `C_h` according to `mode`.
pub fn norm_constant(mesh: &Mesh, mode: ChMode) -> Result<f64> {
    match mode {
        ChMode::Measured => Ok(measure_norm_constants(mesh)?.upper),
        ChMode::Asymptotic => Ok(mesh.meshsize().recip()),
    }
}
