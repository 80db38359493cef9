//! Estimator terms against hand-built projections, refined quadrature and
//! exactness arguments.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpinn::estimator::{
    assemble_breakdown, assemble_breakdown_with, bulk_residual, edge_jump, efficiency_index, eta_coef, eta_loss_global,
    eta_loss_local, eta_res, eta_rhs, project, EstimatorRules,
};
use vpinn::mesh::ElementMap;
use vpinn::network::init_params;
use vpinn::problems::{advection_reaction, poisson_tanh, ProblemSpec};
use vpinn::quadrature::{integrate, reference_rule};
use vpinn::testspace::{assemble_residuals, ResidualVector};
use vpinn::{build_structured_unit_square, refine_red, Execution, Mesh, NeuralField, Point, SmoothField};

fn rules() -> EstimatorRules {
    EstimatorRules::new(3).unwrap()
}

/// `-Lap u = f` with `u` quartic, so `grad u` is cubic and `f` quadratic.
fn quartic_problem() -> ProblemSpec {
    let u = SmoothField::new(
        |p: Point| p[0].powi(4) + p[0] * p[0] * p[1] * p[1] - p[1].powi(3) * p[0],
        |p: Point| {
            let (x, y) = (p[0], p[1]);
            [4.0 * x.powi(3) + 2.0 * x * y * y - y.powi(3), 2.0 * x * x * y - 3.0 * x * y * y]
        },
    );
    let mut spec = poisson_tanh();
    spec.name = "quartic".into();
    spec.f = Arc::new(|p: Point| -(14.0 * p[0] * p[0] + 2.0 * p[1] * p[1] - 6.0 * p[0] * p[1]));
    spec.g = u.value.clone();
    spec.lift = u.clone();
    spec.exact = Some(u);
    spec
}

#[test]
fn bulk_and_jumps_vanish_for_quartic_solution() {
    let mesh = build_structured_unit_square(4).unwrap();
    let data = quartic_problem();
    let u = data.exact.clone().unwrap();
    for e in 0..mesh.num_triangles() {
        let bulk = bulk_residual(&mesh, e, &u, &data, &rules()).unwrap();
        assert!(bulk.poly.coeffs().iter().all(|c| c.abs() < 1e-11), "element {e}: {:?}", bulk.poly);
        assert!(eta_res(&mesh, e, &u, &data, &rules()).unwrap() < 1e-10);
    }
    for edge in 0..mesh.num_edges() {
        let jump = edge_jump(&mesh, edge, &u, &data, &rules()).unwrap();
        for t in [0.0, 0.3, 0.5, 1.0] {
            assert!(jump.eval(t).abs() < 1e-11);
        }
    }
}

#[test]
fn coefficient_terms_vanish_for_low_degree_gradients() {
    // u quadratic: grad u linear, so every flux projection is exact
    let mut data = advection_reaction();
    data.mu = Arc::new(|_| 1.5);
    data.beta = Arc::new(|_| [0.5, -1.0]);
    data.sigma = Arc::new(|_| 0.0);
    let u = SmoothField::new(|p: Point| p[0] * p[0] - p[0] * p[1], |p: Point| [2.0 * p[0] - p[1], -p[0]]);
    let mesh = build_structured_unit_square(3).unwrap();
    for e in 0..mesh.num_triangles() {
        let c = eta_coef(&mesh, e, &u, &data, &rules()).unwrap();
        assert!(c.iter().all(|v| *v < 1e-11), "{c:?}");
    }
}

#[test]
fn zero_field_has_zero_coefficient_terms() {
    let mesh = build_structured_unit_square(3).unwrap();
    for e in 0..mesh.num_triangles() {
        assert_eq!(eta_coef(&mesh, e, &SmoothField::zero(), &advection_reaction(), &rules()).unwrap(), [0.0; 6]);
    }
}

#[test]
fn eta_res_is_homogeneous_in_the_field() {
    let mesh = build_structured_unit_square(4).unwrap();
    let mut data = poisson_tanh();
    data.f = Arc::new(|_| 0.0);
    let field = NeuralField::for_problem(init_params(&[2, 10, 10, 1], 2).unwrap(), &data);
    let mut doubled = field.clone();
    doubled.lift = field.lift.scaled(2.0);
    doubled.multiplier = field.multiplier.scaled(2.0);
    for e in [0, 7, 19, 31] {
        let a = eta_res(&mesh, e, &field, &data, &rules()).unwrap();
        let b = eta_res(&mesh, e, &doubled, &data, &rules()).unwrap();
        assert!(a > 0.0);
        assert!((b - 2.0 * a).abs() <= 1e-14 * a, "{b} vs {}", 2.0 * a);
    }
}

#[test]
fn doubling_diffusivity_doubles_flux_oscillation() {
    let mesh = build_structured_unit_square(3).unwrap();
    let data = poisson_tanh();
    let mut doubled = data.clone();
    doubled.mu = Arc::new(|_| 2.0);
    let u = data.exact.clone().unwrap();
    for e in 0..mesh.num_triangles() {
        let a = eta_coef(&mesh, e, &u, &data, &rules()).unwrap();
        let b = eta_coef(&mesh, e, &u, &doubled, &rules()).unwrap();
        for k in [0, 3] {
            assert!((b[k] - 2.0 * a[k]).abs() <= 1e-14 * a[k], "term {k}: {} vs {}", b[k], a[k]);
        }
    }
}

/// Quadratic and cubic Lagrange interpolants in barycentric form.
fn lagrange(k: usize, vals: impl Fn(Point) -> f64, map: &ElementMap, lambda: [f64; 3]) -> f64 {
    let at = |l: [f64; 3]| vals(map.to_physical([l[1], l[2]]));
    let mut s = 0.0;
    match k {
        2 => {
            for i in 0..3 {
                let mut vert = [0.0; 3];
                vert[i] = 1.0;
                s += at(vert) * lambda[i] * (2.0 * lambda[i] - 1.0);
                let j = (i + 1) % 3;
                let mut mid = [0.0; 3];
                mid[i] = 0.5;
                mid[j] = 0.5;
                s += at(mid) * 4.0 * lambda[i] * lambda[j];
            }
        }
        3 => {
            for i in 0..3 {
                let mut vert = [0.0; 3];
                vert[i] = 1.0;
                let l = lambda[i];
                s += at(vert) * 0.5 * l * (3.0 * l - 1.0) * (3.0 * l - 2.0);
                for j in 0..3 {
                    if i != j {
                        let mut node = [0.0; 3];
                        node[i] = 2.0 / 3.0;
                        node[j] = 1.0 / 3.0;
                        s += at(node) * 4.5 * lambda[i] * lambda[j] * (3.0 * lambda[i] - 1.0);
                    }
                }
            }
            s += at([1.0 / 3.0; 3]) * 27.0 * lambda[0] * lambda[1] * lambda[2];
        }
        _ => unreachable!(),
    }
    s
}

/// `f - Pi_k f` with the projection built independently of the crate.
fn oscillation(mesh: &Mesh, e: usize, k: usize, f: fn(Point) -> f64) -> impl Fn(Point) -> f64 {
    let map = mesh.element_map(e);
    let rule7 = reference_rule(7).unwrap();
    let interp = move |x: Point| {
        let r = map.to_reference(x);
        lagrange(k, f, &map, [1.0 - r[0] - r[1], r[0], r[1]])
    };
    let defect = integrate(mesh, e, |x| f(x) - interp(x), &rule7).unwrap() / mesh.area(e);
    move |x| f(x) - interp(x) - defect
}

/// L2 norm on element `e` by splitting it into `4^levels` subtriangles.
fn composite_norm(mesh: &Mesh, e: usize, g: &dyn Fn(Point) -> f64, levels: usize) -> f64 {
    let verts = mesh.element_vertices(e).to_vec();
    let mut sub = Mesh::from_parts(verts, vec![[0, 1, 2]]).unwrap();
    for _ in 0..levels {
        sub = refine_red(&sub);
    }
    let rule = reference_rule(7).unwrap();
    (0..sub.num_triangles())
        .map(|t| integrate(&sub, t, |x| g(x).powi(2), &rule).unwrap())
        .sum::<f64>()
        .sqrt()
}

fn discrete_norm(mesh: &Mesh, e: usize, g: &dyn Fn(Point) -> f64) -> f64 {
    let rule = reference_rule(3).unwrap();
    let map = mesh.element_map(e);
    let s: f64 = rule
        .points()
        .zip(rule.weights())
        .map(|(r, w)| w * map.det.abs() * g(map.to_physical(r)).powi(2))
        .sum();
    s.sqrt()
}

#[test]
fn rhs_oscillation_matches_refined_quadrature() {
    let f: fn(Point) -> f64 = |p| (std::f64::consts::PI * p[0]).sin();
    let mut data = poisson_tanh();
    data.f = Arc::new(f);
    // the order-7 norm is itself a quadrature of a non-polynomial; on n = 3
    // elements it is accurate to about 2e-5 relative, and the gap shrinks like h^2
    let mesh = build_structured_unit_square(16).unwrap();
    for e in [0, 151, 403] {
        let h = mesh.diameter(e);
        let got = eta_rhs(&mesh, e, &data, &rules()).unwrap();
        let osc2 = oscillation(&mesh, e, 2, f);
        let osc3 = oscillation(&mesh, e, 3, f);
        let rhs1 = h * composite_norm(&mesh, e, &osc2, 4);
        let rhs2 = h * discrete_norm(&mesh, e, &osc2) + discrete_norm(&mesh, e, &osc3);
        assert!(got[0] > 0.0 && got[1] > 0.0);
        assert!((got[0] - rhs1).abs() <= 1e-6 * rhs1, "element {e}: {} vs {rhs1}", got[0]);
        assert!((got[1] - rhs2).abs() <= 1e-6 * rhs2, "element {e}: {} vs {rhs2}", got[1]);
    }
}

#[test]
fn low_degree_forcing_has_zero_rhs_terms() {
    let mut data = poisson_tanh();
    data.f = Arc::new(|p: Point| 1.0 + p[0] - 3.0 * p[0] * p[1] + p[1] * p[1]);
    let mesh = build_structured_unit_square(3).unwrap();
    for e in 0..mesh.num_triangles() {
        let r = eta_rhs(&mesh, e, &data, &rules()).unwrap();
        assert!(r[0] < 1e-12 && r[1] < 1e-12, "{r:?}");
    }
}

#[test]
fn jump_norm_is_independent_of_element_order() {
    let mesh = build_structured_unit_square(3).unwrap();
    let mut tris = mesh.triangles().to_vec();
    tris.reverse();
    let swapped = Mesh::from_parts(mesh.vertices().to_vec(), tris).unwrap();
    let data = poisson_tanh();
    let field = NeuralField::for_problem(init_params(&[2, 8, 1], 4).unwrap(), &data);
    for (i, e) in mesh.edges().iter().enumerate() {
        let j = swapped.edges().iter().position(|s| s.vertices == e.vertices).unwrap();
        let a = edge_jump(&mesh, i, &field, &data, &rules()).unwrap().l2_norm();
        let b = edge_jump(&swapped, j, &field, &data, &rules()).unwrap().l2_norm();
        assert!((a - b).abs() <= 1e-14 * a.max(1e-300), "edge {i}: {a} vs {b}");
        if e.is_boundary() {
            assert_eq!(a, 0.0);
        } else {
            assert!(a > 0.0);
        }
    }
}

#[test]
fn localized_loss_overcounts_shared_test_functions() {
    let mesh = build_structured_unit_square(4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = ResidualVector {
        values: (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    };
    let global = eta_loss_global(&r, 1.7);
    let local: f64 = (0..mesh.num_triangles()).map(|e| eta_loss_local(&mesh, e, &r, 1.7).powi(2)).sum();
    assert!(global * global < local);
    assert_eq!(eta_loss_global(&ResidualVector { values: vec![0.0; 9] }, 1.7), 0.0);
}

#[test]
fn breakdown_invariants_and_execution_independence() {
    let mesh = build_structured_unit_square(6).unwrap();
    let data = advection_reaction();
    let field = NeuralField::for_problem(init_params(&[2, 12, 12, 1], 8).unwrap(), &data);
    let r = assemble_residuals(&mesh, &field, &data, rules().assembly()).unwrap();
    let seq = assemble_breakdown_with(Execution::Sequential, &mesh, &field, &data, &r, 2.5, &rules()).unwrap();
    let par = assemble_breakdown_with(Execution::Parallel, &mesh, &field, &data, &r, 2.5, &rules()).unwrap();
    assert_eq!(seq, par);
    let b = seq;
    for e in &b.elements {
        assert!(e.eta_res >= 0.0 && e.eta_loss >= 0.0);
        assert!(e.eta_coef.iter().chain(&e.eta_rhs).all(|v| *v >= 0.0 && v.is_finite()));
    }
    let sq = |v: f64| v * v;
    let res: f64 = b.elements.iter().map(|e| sq(e.eta_res)).sum();
    assert!((sq(b.eta_res) - res).abs() <= 1e-12 * res);
    let coef: f64 = b.elements.iter().flat_map(|e| e.eta_coef).map(sq).sum();
    assert!((sq(b.eta_coef) - coef).abs() <= 1e-12 * coef);
    let rhs: f64 = b.elements.iter().flat_map(|e| e.eta_rhs).map(sq).sum();
    assert!((sq(b.eta_rhs) - rhs).abs() <= 1e-12 * rhs);
    let loss: f64 = b.elements.iter().map(|e| sq(e.eta_loss)).sum();
    assert!(sq(b.eta_loss) <= loss);
    assert!(sq(b.eta_elementwise()) >= sq(b.eta_res) + sq(b.eta_coef) + sq(b.eta_rhs) + sq(b.eta_loss));
    assert_eq!(b.eta(), b.eta_res + b.eta_loss + b.eta_coef + b.eta_rhs);

    let mut csv = Vec::new();
    b.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), mesh.num_triangles() + 2);
    assert!(text.lines().all(|l| l.split(',').count() == 12));
    assert!(text.lines().last().unwrap().starts_with("global,"));
}

#[test]
fn efficiency_index_scaling() {
    let mesh = build_structured_unit_square(4).unwrap();
    let data = poisson_tanh();
    let field = NeuralField::for_problem(init_params(&[2, 6, 1], 1).unwrap(), &data);
    let r = assemble_residuals(&mesh, &field, &data, rules().assembly()).unwrap();
    let b = assemble_breakdown(&mesh, &field, &data, &r, 1.0, &rules()).unwrap();
    assert_eq!(efficiency_index(&b, b.eta()).unwrap(), 1.0);
    let mut scaled = b.clone();
    scaled.eta_res *= 2.0;
    scaled.eta_loss *= 2.0;
    scaled.eta_coef *= 2.0;
    scaled.eta_rhs *= 2.0;
    assert_eq!(efficiency_index(&scaled, 0.6).unwrap(), efficiency_index(&b, 0.3).unwrap());
    assert!(efficiency_index(&b, 0.0).is_err());
}

#[test]
fn projection_of_tanh_preserves_mean_but_interpolation_does_not() {
    let mesh = build_structured_unit_square(2).unwrap();
    let rule = reference_rule(7).unwrap();
    let f = |p: Point| p[0].tanh();
    let proj = project(&mesh, 2, 2, f, &rule).unwrap();
    let exact = integrate(&mesh, 2, f, &rule).unwrap();
    assert!((proj.integral() - exact).abs() <= 1e-12);
    let map = mesh.element_map(2);
    let interp = integrate(&mesh, 2, |x| {
        let r = map.to_reference(x);
        lagrange(2, f, &map, [1.0 - r[0] - r[1], r[0], r[1]])
    }, &rule)
    .unwrap();
    assert!((interp - exact).abs() > 1e-9);
}
