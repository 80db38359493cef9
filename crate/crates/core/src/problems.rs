//! Manufactured boundary-value problems
//! `-div(mu grad u) + beta . grad u + sigma u = f` with `u = g` on the boundary.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::{ScalarFn, SmoothField, TrialField, VectorFn};
use crate::mesh::{Mesh, Point};
use crate::par::{self, Execution};
use crate::quadrature::{reference_rule, MappedRule};

/// Coefficients, data and (optionally) the exact solution of a problem on the unit square.
#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub mu: ScalarFn,
    pub beta: VectorFn,
    pub beta_divergence: ScalarFn,
    pub sigma: ScalarFn,
    pub f: ScalarFn,
    pub g: ScalarFn,
    /// Smooth extension of `g` into the domain.
    pub lift: SmoothField,
    pub exact: Option<SmoothField>,
    /// Whether `sigma - div(beta)/2 >= 0` is claimed.
    pub coercive: bool,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("has_exact", &self.exact.is_some())
            .finish()
    }
}

/// Pointwise data at one location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointData {
    pub mu: f64,
    pub beta: [f64; 2],
    pub sigma: f64,
    pub f: f64,
}

impl ProblemSpec {
    pub fn data(&self, x: Point) -> PointData {
        PointData {
            mu: (self.mu)(x),
            beta: (self.beta)(x),
            sigma: (self.sigma)(x),
            f: (self.f)(x),
        }
    }

    /// `-div(mu grad u) + beta . grad u + sigma u - f` at `x` for the exact
    /// solution, with the divergence taken by fourth-order central differences
    /// of the analytic flux.
    pub fn manufactured_defect(&self, x: Point) -> Result<f64> {
        let exact = self.exact.as_ref().ok_or(Error::MissingExactSolution)?;
        let flux = |p: Point, k: usize| (self.mu)(p) * (exact.gradient)(p)[k];
        let h = 2.5e-4;
        let mut div = 0.0;
        for k in 0..2 {
            let at = |s: f64| {
                let mut p = x;
                p[k] += s;
                flux(p, k)
            };
            div += (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
        }
        let grad = (exact.gradient)(x);
        let beta = (self.beta)(x);
        Ok(-div + beta[0] * grad[0] + beta[1] * grad[1] + (self.sigma)(x) * (exact.value)(x) - (self.f)(x))
    }

    /// Spot-checks ellipticity, coercivity (when claimed) and manufactured
    /// consistency at `samples` seeded random interior points.
    pub fn check(&self, samples: usize, seed: u64, tolerance: f64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..samples {
            // keep the difference stencil inside the square
            let x = [rng.gen_range(0.01..0.99), rng.gen_range(0.01..0.99)];
            if !((self.mu)(x) > 0.0) {
                return Err(Error::InvalidArgument(format!("mu is not positive at {x:?}")));
            }
            if self.coercive && (self.sigma)(x) - 0.5 * (self.beta_divergence)(x) < 0.0 {
                return Err(Error::InvalidArgument(format!("coercivity fails at {x:?}")));
            }
            if self.exact.is_some() {
                let d = self.manufactured_defect(x)?;
                if !(d.abs() <= tolerance) {
                    return Err(Error::InvalidArgument(format!(
                        "manufactured data inconsistent at {x:?}: defect {d:e}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn constant(c: f64) -> ScalarFn {
    Arc::new(move |_| c)
}

/// `-Lap u = f` on the unit square with `u = tanh(2 (x^3 - y^4))`.
pub fn poisson_tanh() -> ProblemSpec {
    let value = |p: Point| (2.0 * (p[0].powi(3) - p[1].powi(4))).tanh();
    let gradient = |p: Point| {
        let t = (2.0 * (p[0].powi(3) - p[1].powi(4))).tanh();
        let sech2 = 1.0 - t * t;
        [sech2 * 6.0 * p[0] * p[0], sech2 * -8.0 * p[1].powi(3)]
    };
    let f = |p: Point| {
        let (x, y) = (p[0], p[1]);
        let t = (2.0 * (x.powi(3) - y.powi(4))).tanh();
        let sech2 = 1.0 - t * t;
        let grad_s2 = 36.0 * x.powi(4) + 64.0 * y.powi(6);
        let lap_s = 12.0 * x - 24.0 * y * y;
        -(sech2 * lap_s - 2.0 * sech2 * t * grad_s2)
    };
    let exact = SmoothField::new(value, gradient);
    ProblemSpec {
        name: "poisson_tanh".into(),
        mu: constant(1.0),
        beta: Arc::new(|_| [0.0, 0.0]),
        beta_divergence: constant(0.0),
        sigma: constant(0.0),
        f: Arc::new(f),
        g: Arc::new(value),
        lift: exact.clone(),
        exact: Some(exact),
        coercive: true,
    }
}

/// `-Lap u = -4` with `u = x^2 + y^2`; every estimator term vanishes for the exact field.
pub fn polynomial_diffusion() -> ProblemSpec {
    let exact = SmoothField::new(|p| p[0] * p[0] + p[1] * p[1], |p| [2.0 * p[0], 2.0 * p[1]]);
    ProblemSpec {
        name: "polynomial_diffusion".into(),
        mu: constant(1.0),
        beta: Arc::new(|_| [0.0, 0.0]),
        beta_divergence: constant(0.0),
        sigma: constant(0.0),
        f: constant(-4.0),
        g: exact.value.clone(),
        lift: exact.clone(),
        exact: Some(exact),
        coercive: true,
    }
}

/// Variable diffusion with advection and reaction, homogeneous boundary data:
/// `mu = 1 + x/2`, `beta = (1, 1/2)`, `sigma = 1`, `u = sin(pi x) sin(pi y)`.
pub fn advection_reaction() -> ProblemSpec {
    use std::f64::consts::PI;
    let value = |p: Point| (PI * p[0]).sin() * (PI * p[1]).sin();
    let gradient = |p: Point| {
        [
            PI * (PI * p[0]).cos() * (PI * p[1]).sin(),
            PI * (PI * p[0]).sin() * (PI * p[1]).cos(),
        ]
    };
    let f = move |p: Point| {
        let u = value(p);
        let g = gradient(p);
        let mu = 1.0 + 0.5 * p[0];
        let lap = -2.0 * PI * PI * u;
        -(0.5 * g[0] + mu * lap) + g[0] + 0.5 * g[1] + u
    };
    ProblemSpec {
        name: "advection_reaction".into(),
        mu: Arc::new(|p| 1.0 + 0.5 * p[0]),
        beta: Arc::new(|_| [1.0, 0.5]),
        beta_divergence: constant(0.0),
        sigma: constant(1.0),
        f: Arc::new(f),
        g: constant(0.0),
        lift: SmoothField::zero(),
        exact: Some(SmoothField::new(value, gradient)),
        coercive: true,
    }
}

/// Names accepted by [`by_name`].
pub const NAMES: [&str; 3] = ["poisson_tanh", "polynomial_diffusion", "advection_reaction"];

/// Looks a problem up by name.
pub fn by_name(name: &str) -> Result<ProblemSpec> {
    match name {
        "poisson_tanh" => Ok(poisson_tanh()),
        "polynomial_diffusion" => Ok(polynomial_diffusion()),
        "advection_reaction" => Ok(advection_reaction()),
        other => Err(Error::InvalidArgument(format!("unknown problem '{other}'"))),
    }
}

/// `|u - u_field|_{1,Omega}` with the precision-7 rule on every element.
pub fn h1_error(mesh: &Mesh, field: &dyn TrialField, spec: &ProblemSpec) -> Result<f64> {
    h1_error_with(Execution::default(), mesh, field, spec)
}

pub fn h1_error_with(exec: Execution, mesh: &Mesh, field: &dyn TrialField, spec: &ProblemSpec) -> Result<f64> {
    let exact = spec.exact.as_ref().ok_or(Error::MissingExactSolution)?;
    let rule = reference_rule(7)?;
    let mapped: Vec<MappedRule> = (0..mesh.num_triangles())
        .map(|t| MappedRule::on(mesh, t, &rule))
        .collect();
    let points: Vec<Point> = mapped.iter().flat_map(|m| m.points.iter().copied()).collect();
    let samples = field.sample_batch(exec, &points);
    let per_element = par::map_range(exec, mapped.len(), |t| {
        let m = &mapped[t];
        let offset = t * rule.len();
        m.integrate_indexed(|i, p| {
            let g = (exact.gradient)(p);
            let s = samples[offset + i].gradient;
            (g[0] - s[0]).powi(2) + (g[1] - s[1]).powi(2)
        })
    });
    let mut total = 0.0;
    for v in per_element {
        total += v?;
    }
    Ok(total.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_structured_unit_square, refine_red};
    use approx::assert_relative_eq;

    #[test]
    fn tanh_values() {
        let p = poisson_tanh();
        let u = p.exact.as_ref().unwrap();
        assert_eq!((u.value)([0.0, 0.0]), 0.0);
        assert_relative_eq!((u.value)([1.0, 0.0]), 2f64.tanh(), epsilon = 1e-15);
        assert!(((u.value)([1.0, 0.0]) - 0.9640).abs() < 1e-4);
        assert_eq!((u.gradient)([0.0, 0.0]), [0.0, 0.0]);
    }

    #[test]
    fn tanh_laplacian_matches_finite_differences() {
        let p = poisson_tanh();
        let u = p.exact.as_ref().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 2.5e-4;
        for _ in 0..100 {
            let x = [rng.gen_range(0.01..0.99), rng.gen_range(0.01..0.99)];
            let v = |dx: f64, dy: f64| (u.value)([x[0] + dx, x[1] + dy]);
            let lap = (v(h, 0.0) + v(-h, 0.0) + v(0.0, h) + v(0.0, -h) - 4.0 * v(0.0, 0.0)) / (h * h);
            assert!((lap + (p.f)(x)).abs() < 1e-4 * (1.0 + lap.abs()), "{lap} vs {}", -(p.f)(x));
            assert!(p.manufactured_defect(x).unwrap().abs() < 1e-6);
        }
    }

    #[test]
    fn all_problems_pass_the_spot_check() {
        for p in [poisson_tanh(), polynomial_diffusion(), advection_reaction()] {
            p.check(100, 11, 1e-8).unwrap();
        }
        assert!(polynomial_diffusion().manufactured_defect([0.3, 0.4]).unwrap().abs() < 1e-9);
    }

    #[test]
    fn polynomial_h1_seminorm() {
        let spec = polynomial_diffusion();
        let mesh = build_structured_unit_square(2).unwrap();
        let zero = SmoothField::zero();
        assert_relative_eq!(h1_error(&mesh, &zero, &spec).unwrap(), (8.0f64 / 3.0).sqrt(), max_relative = 1e-13);
        let exact = spec.exact.clone().unwrap();
        assert!(h1_error(&mesh, &exact, &spec).unwrap() <= 1e-12);
    }

    #[test]
    fn refinement_invariance() {
        let spec = poisson_tanh();
        let field = SmoothField::new(|p| p[0] * p[1], |p| [p[1], p[0]]);
        let m = build_structured_unit_square(16).unwrap();
        let e1 = h1_error(&m, &field, &spec).unwrap();
        let e2 = h1_error(&refine_red(&m), &field, &spec).unwrap();
        assert!((e1 - e2).abs() <= 1e-8, "{e1} {e2}");
    }

    #[test]
    fn missing_exact() {
        let mut spec = polynomial_diffusion();
        spec.exact = None;
        let mesh = build_structured_unit_square(1).unwrap();
        assert!(matches!(h1_error(&mesh, &SmoothField::zero(), &spec), Err(Error::MissingExactSolution)));
        assert!(by_name("nope").is_err());
    }
}
