//! Residual-type a posteriori error estimator for a trained trial field.
//!
//! Every term is computed from mean-preserving elemental projections of the
//! data and of the field's fluxes, see [`projection`]. Per-element work is
//! independent and runs through [`crate::par`]; edge jumps are gathered from
//! the element results, so the breakdown does not depend on the execution
//! policy.

pub mod projection;

use std::io::Write;

use crate::error::{ensure_finite, Error, Result};
use crate::field::TrialField;
use crate::mesh::{Mesh, Point};
use crate::par::{map_range, Execution};
use crate::problems::ProblemSpec;
use crate::quadrature::{gauss_legendre_unit, reference_rule, QuadRule};
use crate::testspace::{elemental_index_set, ResidualVector};

pub use projection::{project, project_samples, project_with, Lattice, Poly, PolyProjection};

/// Rules and lattices shared by every estimator computation for assembly
/// precision `q`.
#[derive(Debug, Clone)]
pub struct EstimatorRules {
    q: usize,
    assembly: QuadRule,
    verification: QuadRule,
    lattice_lo: Lattice,
    lattice_hi: Lattice,
}

impl EstimatorRules {
    pub fn new(q: usize) -> Result<Self> {
        if q < 2 {
            return Err(Error::UnsupportedPrecision(q));
        }
        Ok(Self {
            q,
            assembly: reference_rule(q)?,
            verification: reference_rule(7)?,
            lattice_lo: Lattice::new(q - 1)?,
            lattice_hi: Lattice::new(q)?,
        })
    }

    pub fn precision(&self) -> usize {
        self.q
    }

    pub fn assembly(&self) -> &QuadRule {
        &self.assembly
    }

    pub fn verification(&self) -> &QuadRule {
        &self.verification
    }

    /// Reference points sampled per element, in the order lattice `q-1`,
    /// lattice `q`, verification rule, assembly rule.
    fn reference_points(&self) -> Vec<Point> {
        let mut pts = Vec::with_capacity(self.points_per_element());
        pts.extend_from_slice(self.lattice_lo.nodes());
        pts.extend_from_slice(self.lattice_hi.nodes());
        pts.extend(self.verification.points());
        pts.extend(self.assembly.points());
        pts
    }

    fn points_per_element(&self) -> usize {
        self.lattice_lo.nodes().len() + self.lattice_hi.nodes().len() + self.verification.len() + self.assembly.len()
    }
}

/// Pointwise quantities entering the estimator.
#[derive(Debug, Clone, Copy)]
struct Local {
    f: f64,
    flux: [f64; 2],
    advection: f64,
    reaction: f64,
}

fn local_quantities(field_sample: crate::field::Sample, data: &ProblemSpec, x: Point) -> Local {
    let d = data.data(x);
    let g = field_sample.gradient;
    Local {
        f: d.f,
        flux: [d.mu * g[0], d.mu * g[1]],
        advection: d.beta[0] * g[0] + d.beta[1] * g[1],
        reaction: d.sigma * field_sample.value,
    }
}

/// Projections and elemental terms of one element; jumps are added later.
#[derive(Debug, Clone)]
pub struct ElementAnalysis {
    pub element: usize,
    pub f_lo: PolyProjection,
    pub f_hi: PolyProjection,
    pub flux: [PolyProjection; 2],
    pub advection_lo: PolyProjection,
    pub advection_hi: PolyProjection,
    pub reaction_lo: PolyProjection,
    pub reaction_hi: PolyProjection,
    /// Bulk residual in the element's reference coordinates, degree `q`.
    pub bulk: PolyProjection,
    pub bulk_norm: f64,
    pub eta_coef: [f64; 6],
    pub eta_rhs: [f64; 2],
}

impl ElementAnalysis {
    /// Normal flux `Pi_q(mu grad u) . n` at a physical point.
    pub fn normal_flux(&self, x: Point, normal: [f64; 2]) -> f64 {
        self.flux[0].eval(x) * normal[0] + self.flux[1].eval(x) * normal[1]
    }
}

fn analyze(mesh: &Mesh, element: usize, rules: &EstimatorRules, local: &[Local]) -> Result<ElementAnalysis> {
    let map = mesh.element_map(element);
    let det = map.det.abs();
    let h = mesh.diameter(element);
    let n_lo = rules.lattice_lo.nodes().len();
    let n_hi = rules.lattice_hi.nodes().len();
    let n_ver = rules.verification.len();
    let (lo, rest) = local.split_at(n_lo);
    let (hi, rest) = rest.split_at(n_hi);
    let (ver, asm) = rest.split_at(n_ver);

    let proj = |lattice: &Lattice, nodal: &[Local], get: &dyn Fn(&Local) -> f64| -> Result<PolyProjection> {
        let lv: Vec<f64> = nodal.iter().map(get).collect();
        let rv: Vec<f64> = ver.iter().map(get).collect();
        project_samples(element, &map, lattice, &lv, &rules.verification, &rv)
    };
    let f_lo = proj(&rules.lattice_lo, lo, &|l| l.f)?;
    let f_hi = proj(&rules.lattice_hi, hi, &|l| l.f)?;
    let flux = [
        proj(&rules.lattice_hi, hi, &|l| l.flux[0])?,
        proj(&rules.lattice_hi, hi, &|l| l.flux[1])?,
    ];
    let advection_lo = proj(&rules.lattice_lo, lo, &|l| l.advection)?;
    let advection_hi = proj(&rules.lattice_hi, hi, &|l| l.advection)?;
    let reaction_lo = proj(&rules.lattice_lo, lo, &|l| l.reaction)?;
    let reaction_hi = proj(&rules.lattice_hi, hi, &|l| l.reaction)?;

    let [dxx, _] = flux[0].poly.gradient(&map);
    let [_, dyy] = flux[1].poly.gradient(&map);
    let divergence = dxx.combine(1.0, &dyy, 1.0);
    let bulk_poly = f_lo
        .poly
        .combine(1.0, &divergence, 1.0)
        .combine(1.0, &advection_lo.poly, -1.0)
        .combine(1.0, &reaction_lo.poly, -1.0)
        .promoted(rules.q);
    let bulk = PolyProjection {
        element,
        map,
        poly: bulk_poly,
    };

    // continuous norms on the verification rule, discrete ones on the assembly rule
    let ver_pts: Vec<Point> = rules.verification.points().collect();
    let asm_pts: Vec<Point> = rules.assembly.points().collect();
    let cont = |get: &dyn Fn(usize, Point) -> f64| -> f64 {
        let s: f64 = ver_pts
            .iter()
            .zip(rules.verification.weights())
            .enumerate()
            .map(|(i, (&r, w))| w * get(i, r).powi(2))
            .sum();
        (s * det).sqrt()
    };
    let disc = |get: &dyn Fn(usize, Point) -> f64| -> f64 {
        let s: f64 = asm_pts
            .iter()
            .zip(rules.assembly.weights())
            .enumerate()
            .map(|(i, (&r, w))| w * get(i, r).powi(2))
            .sum();
        (s * det).sqrt()
    };

    let bulk_norm = cont(&|_, r| bulk.poly.eval(r));

    let flux_osc_cont = {
        let a = cont(&|i, r| ver[i].flux[0] - flux[0].poly.eval(r));
        let b = cont(&|i, r| ver[i].flux[1] - flux[1].poly.eval(r));
        a.hypot(b)
    };
    let flux_osc_disc = {
        let a = disc(&|i, r| asm[i].flux[0] - flux[0].poly.eval(r));
        let b = disc(&|i, r| asm[i].flux[1] - flux[1].poly.eval(r));
        a.hypot(b)
    };
    let eta_coef = [
        flux_osc_cont,
        h * cont(&|i, r| ver[i].advection - advection_lo.poly.eval(r)),
        h * cont(&|i, r| ver[i].reaction - reaction_lo.poly.eval(r)),
        flux_osc_disc,
        h * disc(&|i, r| asm[i].advection - advection_lo.poly.eval(r))
            + disc(&|i, r| asm[i].advection - advection_hi.poly.eval(r)),
        h * disc(&|i, r| asm[i].reaction - reaction_lo.poly.eval(r))
            + disc(&|i, r| asm[i].reaction - reaction_hi.poly.eval(r)),
    ];
    let eta_rhs = [
        h * cont(&|i, r| ver[i].f - f_lo.poly.eval(r)),
        h * disc(&|i, r| asm[i].f - f_lo.poly.eval(r)) + disc(&|i, r| asm[i].f - f_hi.poly.eval(r)),
    ];
    for v in eta_coef.iter().chain(&eta_rhs).chain([&bulk_norm]) {
        ensure_finite(*v, "estimator term")?;
    }
    Ok(ElementAnalysis {
        element,
        f_lo,
        f_hi,
        flux,
        advection_lo,
        advection_hi,
        reaction_lo,
        reaction_hi,
        bulk,
        bulk_norm,
        eta_coef,
        eta_rhs,
    })
}

/// Analyses of the listed elements with one batched field evaluation.
fn analyze_elements(
    exec: Execution,
    mesh: &Mesh,
    elements: &[usize],
    field: &dyn TrialField,
    data: &ProblemSpec,
    rules: &EstimatorRules,
) -> Result<Vec<ElementAnalysis>> {
    let per = rules.points_per_element();
    let reference = rules.reference_points();
    let mut points = Vec::with_capacity(per * elements.len());
    for &e in elements {
        let map = mesh.element_map(e);
        points.extend(reference.iter().map(|&r| map.to_physical(r)));
    }
    let samples = field.sample_batch(exec, &points);
    map_range(exec, elements.len(), |k| {
        let range = k * per..(k + 1) * per;
        let local: Vec<Local> = samples[range.clone()]
            .iter()
            .zip(&points[range])
            .map(|(s, &x)| local_quantities(*s, data, x))
            .collect();
        analyze(mesh, elements[k], rules, &local)
    })
    .into_iter()
    .collect()
}

/// Projected normal-flux jump across one edge, a polynomial of degree `q`
/// along the edge. Boundary edges carry no parts and vanish identically.
#[derive(Debug, Clone)]
pub struct EdgeJump {
    pub edge: usize,
    pub endpoints: [Point; 2],
    parts: Vec<([PolyProjection; 2], [f64; 2])>,
}

impl EdgeJump {
    fn from_analyses(mesh: &Mesh, edge: usize, sides: &[&ElementAnalysis]) -> Self {
        let e = &mesh.edges()[edge];
        let v = mesh.vertices();
        let endpoints = [v[e.vertices[0]], v[e.vertices[1]]];
        let parts = if e.is_boundary() {
            Vec::new()
        } else {
            sides
                .iter()
                .map(|a| (a.flux.clone(), mesh.outward_normal(a.element, edge)))
                .collect()
        };
        Self { edge, endpoints, parts }
    }

    /// Value at edge parameter `t` in `[0, 1]`.
    pub fn eval(&self, t: f64) -> f64 {
        let [a, b] = self.endpoints;
        let x = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
        self.parts
            .iter()
            .map(|(flux, n)| flux[0].eval(x) * n[0] + flux[1].eval(x) * n[1])
            .sum()
    }

    pub fn length(&self) -> f64 {
        let [a, b] = self.endpoints;
        (b[0] - a[0]).hypot(b[1] - a[1])
    }

    /// L2 norm on the edge; four Gauss points integrate degree seven exactly.
    pub fn l2_norm(&self) -> f64 {
        if self.parts.is_empty() {
            return 0.0;
        }
        let (nodes, weights) = gauss_legendre_unit();
        let s: f64 = nodes.iter().zip(&weights).map(|(&t, w)| w * self.eval(t).powi(2)).sum();
        (s * self.length()).sqrt()
    }
}

/// Bulk residual on one element as a polynomial of degree `q`.
pub fn bulk_residual(
    mesh: &Mesh,
    element: usize,
    field: &dyn TrialField,
    data: &ProblemSpec,
    rules: &EstimatorRules,
) -> Result<PolyProjection> {
    let a = analyze_elements(Execution::Sequential, mesh, &[element], field, data, rules)?;
    Ok(a.into_iter().next().expect("one element").bulk)
}

/// Jump of the projected flux across `edge`; zero on boundary edges.
pub fn edge_jump(
    mesh: &Mesh,
    edge: usize,
    field: &dyn TrialField,
    data: &ProblemSpec,
    rules: &EstimatorRules,
) -> Result<EdgeJump> {
    let tris = mesh.edges()[edge].triangles.clone();
    let a = analyze_elements(Execution::Sequential, mesh, &tris, field, data, rules)?;
    let sides: Vec<&ElementAnalysis> = a.iter().collect();
    Ok(EdgeJump::from_analyses(mesh, edge, &sides))
}

/// `h_E ||bulk||_{0,E} + h_E^{1/2} sum_e ||jump_e||_{0,e}`
pub fn eta_res(
    mesh: &Mesh,
    element: usize,
    field: &dyn TrialField,
    data: &ProblemSpec,
    rules: &EstimatorRules,
) -> Result<f64> {
    let mut elements = vec![element];
    for &edge in &mesh.triangle_edges(element) {
        for &t in &mesh.edges()[edge].triangles {
            if !elements.contains(&t) {
                elements.push(t);
            }
        }
    }
    let a = analyze_elements(Execution::Sequential, mesh, &elements, field, data, rules)?;
    let jumps: Vec<f64> = mesh
        .triangle_edges(element)
        .iter()
        .map(|&edge| {
            let sides: Vec<&ElementAnalysis> = mesh.edges()[edge]
                .triangles
                .iter()
                .map(|t| &a[elements.iter().position(|x| x == t).expect("neighbour analysed")])
                .collect();
            EdgeJump::from_analyses(mesh, edge, &sides).l2_norm()
        })
        .collect();
    Ok(combine_res(mesh.diameter(element), a[0].bulk_norm, &jumps))
}

fn combine_res(h: f64, bulk_norm: f64, jumps: &[f64]) -> f64 {
    h * bulk_norm + h.sqrt() * jumps.iter().sum::<f64>()
}

/// `(eta_rhs_1, eta_rhs_2)` on one element; depends on the data only.
pub fn eta_rhs(mesh: &Mesh, element: usize, data: &ProblemSpec, rules: &EstimatorRules) -> Result<[f64; 2]> {
    let zero = crate::field::SmoothField::zero();
    let a = analyze_elements(Execution::Sequential, mesh, &[element], &zero, data, rules)?;
    Ok(a[0].eta_rhs)
}

/// `eta_coef_1 ... eta_coef_6` on one element.
pub fn eta_coef(
    mesh: &Mesh,
    element: usize,
    field: &dyn TrialField,
    data: &ProblemSpec,
    rules: &EstimatorRules,
) -> Result<[f64; 6]> {
    let a = analyze_elements(Execution::Sequential, mesh, &[element], field, data, rules)?;
    Ok(a[0].eta_coef)
}

/// `C_h (sum_{i in I_h^E} r_i^2)^{1/2}`
pub fn eta_loss_local(mesh: &Mesh, element: usize, r: &ResidualVector, c_h: f64) -> f64 {
    let dofs = crate::testspace::DofMap::new(mesh);
    eta_loss_local_with(&dofs, mesh, element, r, c_h)
}

fn eta_loss_local_with(
    dofs: &crate::testspace::DofMap,
    mesh: &Mesh,
    element: usize,
    r: &ResidualVector,
    c_h: f64,
) -> f64 {
    let s: f64 = dofs
        .element_dofs(mesh, element)
        .iter()
        .flatten()
        .fold(0.0, |acc, &i| acc + r.values[i].powi(2));
    debug_assert_eq!(
        dofs.element_dofs(mesh, element).iter().flatten().count(),
        elemental_index_set(mesh, element).len()
    );
    c_h * s.sqrt()
}

/// `C_h R_h`
pub fn eta_loss_global(r: &ResidualVector, c_h: f64) -> f64 {
    c_h * r.loss().sqrt()
}

/// Estimator terms of one element.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementEstimate {
    pub eta_res: f64,
    pub eta_loss: f64,
    pub eta_coef: [f64; 6],
    pub eta_rhs: [f64; 2],
}

impl ElementEstimate {
    /// Elemental `eta(E)`: root sum of squares of all ten terms.
    pub fn eta(&self) -> f64 {
        let s: f64 = [self.eta_res, self.eta_loss]
            .iter()
            .chain(&self.eta_coef)
            .chain(&self.eta_rhs)
            .map(|v| v * v)
            .sum();
        s.sqrt()
    }
}

/// Per-element terms and their global aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorBreakdown {
    pub elements: Vec<ElementEstimate>,
    pub eta_res: f64,
    pub eta_loss: f64,
    pub eta_coef: f64,
    pub eta_rhs: f64,
    pub c_h: f64,
}

fn rss(values: impl Iterator<Item = f64>) -> f64 {
    values.map(|v| v * v).sum::<f64>().sqrt()
}

impl EstimatorBreakdown {
    /// `eta_res + eta_loss + eta_coef + eta_rhs`
    pub fn eta(&self) -> f64 {
        self.eta_res + self.eta_loss + self.eta_coef + self.eta_rhs
    }

    /// `(sum_E eta(E)^2)^{1/2}`
    pub fn eta_elementwise(&self) -> f64 {
        rss(self.elements.iter().map(|e| e.eta()))
    }

    /// Root sum of squares over elements of `eta_coef_k`, `k` zero-based.
    pub fn eta_coef_term(&self, k: usize) -> f64 {
        rss(self.elements.iter().map(|e| e.eta_coef[k]))
    }

    pub fn eta_rhs_term(&self, k: usize) -> f64 {
        rss(self.elements.iter().map(|e| e.eta_rhs[k]))
    }

    /// One row per element and a trailing `global` row of root sums of squares
    /// (`eta_loss` there is `C_h R_h`, `eta_E` is the elementwise aggregate).
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "E,eta_res,eta_loss,eta_coef_1,eta_coef_2,eta_coef_3,eta_coef_4,eta_coef_5,eta_coef_6,eta_rhs_1,eta_rhs_2,eta_E"
        )?;
        let row = |label: String, res: f64, loss: f64, coef: [f64; 6], rhs: [f64; 2], eta: f64| {
            let mut s = label;
            for v in [res, loss].iter().chain(&coef).chain(&rhs).chain([&eta]) {
                s.push_str(&format!(",{v:.16e}"));
            }
            s
        };
        for (i, e) in self.elements.iter().enumerate() {
            writeln!(out, "{}", row(i.to_string(), e.eta_res, e.eta_loss, e.eta_coef, e.eta_rhs, e.eta()))?;
        }
        let coef: [f64; 6] = std::array::from_fn(|k| self.eta_coef_term(k));
        let rhs: [f64; 2] = std::array::from_fn(|k| self.eta_rhs_term(k));
        writeln!(
            out,
            "{}",
            row("global".into(), self.eta_res, self.eta_loss, coef, rhs, self.eta_elementwise())
        )?;
        Ok(())
    }
}

/// Every estimator term on every element, with global aggregates.
pub fn assemble_breakdown(
    mesh: &Mesh,
    field: &dyn TrialField,
    data: &ProblemSpec,
    r: &ResidualVector,
    c_h: f64,
    rules: &EstimatorRules,
) -> Result<EstimatorBreakdown> {
    assemble_breakdown_with(Execution::default(), mesh, field, data, r, c_h, rules)
}

pub fn assemble_breakdown_with(
    exec: Execution,
    mesh: &Mesh,
    field: &dyn TrialField,
    data: &ProblemSpec,
    r: &ResidualVector,
    c_h: f64,
    rules: &EstimatorRules,
) -> Result<EstimatorBreakdown> {
    let c_h = ensure_finite(c_h, "norm constant")?;
    if c_h < 0.0 {
        return Err(Error::InvalidArgument(format!("negative norm constant {c_h}")));
    }
    let dofs = crate::testspace::DofMap::new(mesh);
    if r.len() != dofs.len() {
        return Err(Error::InvalidArgument(format!(
            "residual has {} entries, mesh has {} interior vertices",
            r.len(),
            dofs.len()
        )));
    }
    let all: Vec<usize> = (0..mesh.num_triangles()).collect();
    let analyses = analyze_elements(exec, mesh, &all, field, data, rules)?;
    let jump_norms = map_range(exec, mesh.num_edges(), |edge| {
        let sides: Vec<&ElementAnalysis> = mesh.edges()[edge].triangles.iter().map(|&t| &analyses[t]).collect();
        EdgeJump::from_analyses(mesh, edge, &sides).l2_norm()
    });
    let elements: Vec<ElementEstimate> = analyses
        .iter()
        .map(|a| {
            let e = a.element;
            let jumps: Vec<f64> = mesh.triangle_edges(e).iter().map(|&edge| jump_norms[edge]).collect();
            ElementEstimate {
                eta_res: combine_res(mesh.diameter(e), a.bulk_norm, &jumps),
                eta_loss: eta_loss_local_with(&dofs, mesh, e, r, c_h),
                eta_coef: a.eta_coef,
                eta_rhs: a.eta_rhs,
            }
        })
        .collect();
    let breakdown = EstimatorBreakdown {
        eta_res: rss(elements.iter().map(|e| e.eta_res)),
        eta_loss: eta_loss_global(r, c_h),
        eta_coef: rss(elements.iter().flat_map(|e| e.eta_coef)),
        eta_rhs: rss(elements.iter().flat_map(|e| e.eta_rhs)),
        elements,
        c_h,
    };
    ensure_finite(breakdown.eta(), "estimator")?;
    Ok(breakdown)
}

/// `eta / |u - u_NN|_1`
pub fn efficiency_index(breakdown: &EstimatorBreakdown, true_error: f64) -> Result<f64> {
    efficiency_ratio(breakdown.eta(), true_error)
}

pub fn efficiency_ratio(eta: f64, true_error: f64) -> Result<f64> {
    if !(true_error > 0.0) || !true_error.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "efficiency index needs a positive error, got {true_error}"
        )));
    }
    ensure_finite(eta / true_error, "efficiency index")
}
