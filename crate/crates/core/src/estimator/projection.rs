//! Polynomials on elements and the mean-preserving interpolation projector.

use crate::error::{ensure_finite, Error, Result};
use crate::mesh::{ElementMap, Mesh, Point};
use crate::quadrature::QuadRule;

/// A bivariate polynomial in the reference coordinates `(s, t)` of an element,
/// stored in the monomial basis `s^a t^b`, `a + b <= degree`, ordered by total
/// degree and then by decreasing `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct Poly {
    degree: usize,
    coeffs: Vec<f64>,
}

fn monomial_count(degree: usize) -> usize {
    (degree + 1) * (degree + 2) / 2
}

fn monomials(degree: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..=degree).flat_map(|d| (0..=d).rev().map(move |a| (a, d - a)))
}

fn monomial_index(a: usize, b: usize) -> usize {
    let d = a + b;
    monomial_count(d) - 1 - a
}

impl Poly {
    pub fn zero(degree: usize) -> Self {
        Self {
            degree,
            coeffs: vec![0.0; monomial_count(degree)],
        }
    }

    pub fn constant(degree: usize, c: f64) -> Self {
        let mut p = Self::zero(degree);
        p.coeffs[0] = c;
        p
    }

    pub fn from_coeffs(degree: usize, coeffs: Vec<f64>) -> Self {
        assert_eq!(coeffs.len(), monomial_count(degree));
        Self { degree, coeffs }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeff(&self, a: usize, b: usize) -> f64 {
        if a + b > self.degree {
            0.0
        } else {
            self.coeffs[monomial_index(a, b)]
        }
    }

    pub fn eval(&self, r: Point) -> f64 {
        monomials(self.degree)
            .zip(&self.coeffs)
            .map(|((a, b), c)| c * r[0].powi(a as i32) * r[1].powi(b as i32))
            .sum()
    }

    /// Same polynomial viewed in a space of higher degree.
    pub fn promoted(&self, degree: usize) -> Self {
        let degree = degree.max(self.degree);
        let mut out = Self::zero(degree);
        for (a, b) in monomials(self.degree) {
            out.coeffs[monomial_index(a, b)] = self.coeff(a, b);
        }
        out
    }

    /// `alpha * self + beta * other`
    pub fn combine(&self, alpha: f64, other: &Poly, beta: f64) -> Self {
        let degree = self.degree.max(other.degree);
        let mut out = Self::zero(degree);
        for (a, b) in monomials(degree) {
            out.coeffs[monomial_index(a, b)] = alpha * self.coeff(a, b) + beta * other.coeff(a, b);
        }
        out
    }

    /// Partial derivatives with respect to `s` and `t`.
    pub fn reference_derivatives(&self) -> (Poly, Poly) {
        let lower = self.degree.saturating_sub(1);
        let (mut ds, mut dt) = (Self::zero(lower), Self::zero(lower));
        for (a, b) in monomials(self.degree) {
            let c = self.coeff(a, b);
            if a > 0 {
                ds.coeffs[monomial_index(a - 1, b)] += a as f64 * c;
            }
            if b > 0 {
                dt.coeffs[monomial_index(a, b - 1)] += b as f64 * c;
            }
        }
        (ds, dt)
    }

    /// Physical gradient `(d/dx, d/dy)` on the element described by `map`.
    pub fn gradient(&self, map: &ElementMap) -> [Poly; 2] {
        let (ds, dt) = self.reference_derivatives();
        let inv = map.inverse;
        [
            ds.combine(inv[0][0], &dt, inv[1][0]),
            ds.combine(inv[0][1], &dt, inv[1][1]),
        ]
    }

    /// Exact integral over the reference triangle.
    pub fn reference_integral(&self) -> f64 {
        let fact = |n: usize| (1..=n).map(|i| i as f64).product::<f64>();
        monomials(self.degree)
            .zip(&self.coeffs)
            .map(|((a, b), c)| c * fact(a) * fact(b) / fact(a + b + 2))
            .sum()
    }
}

/// Principal lattice of degree `k` with the inverse Vandermonde matrix of the
/// monomial basis, for Lagrange interpolation on the reference triangle.
#[derive(Debug, Clone)]
pub struct Lattice {
    degree: usize,
    nodes: Vec<Point>,
    /// Row-major `n x n`, maps nodal values to monomial coefficients.
    inverse: Vec<f64>,
}

impl Lattice {
    pub fn new(degree: usize) -> Result<Self> {
        if degree == 0 {
            // P0 interpolation at the centroid
            return Ok(Self {
                degree,
                nodes: vec![[1.0 / 3.0, 1.0 / 3.0]],
                inverse: vec![1.0],
            });
        }
        let k = degree as f64;
        let nodes: Vec<Point> = (0..=degree)
            .flat_map(|j| (0..=degree - j).map(move |i| [i as f64 / k, j as f64 / k]))
            .collect();
        let n = nodes.len();
        let mut v = vec![0.0; n * n];
        for (r, p) in nodes.iter().enumerate() {
            for (c, (a, b)) in monomials(degree).enumerate() {
                v[r * n + c] = p[0].powi(a as i32) * p[1].powi(b as i32);
            }
        }
        let inverse = invert(&v, n).ok_or_else(|| Error::InvalidArgument("singular lattice".into()))?;
        Ok(Self {
            degree,
            nodes,
            inverse,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    /// Interpolating polynomial from values at [`nodes`](Self::nodes).
    pub fn interpolate(&self, values: &[f64]) -> Poly {
        let n = self.nodes.len();
        assert_eq!(values.len(), n);
        let coeffs = (0..n)
            .map(|r| (0..n).map(|c| self.inverse[r * n + c] * values[c]).sum())
            .collect();
        Poly::from_coeffs(self.degree, coeffs)
    }
}

/// Gauss-Jordan inverse with partial pivoting.
fn invert(m: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut a = m.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs()))?;
        if a[pivot * n + col].abs() < 1e-14 {
            return None;
        }
        for k in 0..n {
            a.swap(col * n + k, pivot * n + k);
            inv.swap(col * n + k, pivot * n + k);
        }
        let d = a[col * n + col];
        for k in 0..n {
            a[col * n + k] /= d;
            inv[col * n + k] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = a[r * n + col];
                if f != 0.0 {
                    for k in 0..n {
                        a[r * n + k] -= f * a[col * n + k];
                        inv[r * n + k] -= f * inv[col * n + k];
                    }
                }
            }
        }
    }
    Some(inv)
}

/// `I_{E,k} phi + (int_E (phi - I_{E,k} phi)) / |E|` on one element.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyProjection {
    pub element: usize,
    pub map: ElementMap,
    pub poly: Poly,
}

impl PolyProjection {
    pub fn degree(&self) -> usize {
        self.poly.degree()
    }

    /// Value at a physical point.
    pub fn eval(&self, x: Point) -> f64 {
        self.poly.eval(self.map.to_reference(x))
    }

    /// Exact integral over the element.
    pub fn integral(&self) -> f64 {
        self.poly.reference_integral() * self.map.det.abs()
    }
}

/// Builds the projection from `phi` sampled at the lattice nodes and at the
/// nodes of the verification rule (both in the lattice's and rule's order).
pub fn project_samples(
    element: usize,
    map: &ElementMap,
    lattice: &Lattice,
    lattice_values: &[f64],
    rule: &QuadRule,
    rule_values: &[f64],
) -> Result<PolyProjection> {
    for &v in lattice_values {
        ensure_finite(v, "projected function at lattice node")?;
    }
    let mut poly = lattice.interpolate(lattice_values);
    // int_E (phi - I phi) / |E|, both integrals with the verification rule
    let mut defect = 0.0;
    for ((p, w), v) in rule.points().zip(rule.weights()).zip(rule_values) {
        defect += (ensure_finite(*v, "projected function at quadrature node")? - poly.eval(p)) * w;
    }
    let area_ref = 0.5;
    let mut c = poly.coeffs.clone();
    c[0] += defect / area_ref;
    poly = Poly::from_coeffs(poly.degree, c);
    Ok(PolyProjection {
        element,
        map: *map,
        poly,
    })
}

/// Mean-preserving projection of `phi` onto `P_k(E)`; the mean correction
/// uses `rule` (the precision-7 rule in the estimator).
pub fn project(
    mesh: &Mesh,
    element: usize,
    k: usize,
    phi: impl Fn(Point) -> f64,
    rule: &QuadRule,
) -> Result<PolyProjection> {
    let lattice = Lattice::new(k)?;
    project_with(mesh, element, &lattice, phi, rule)
}

pub fn project_with(
    mesh: &Mesh,
    element: usize,
    lattice: &Lattice,
    phi: impl Fn(Point) -> f64,
    rule: &QuadRule,
) -> Result<PolyProjection> {
    let map = mesh.element_map(element);
    let lv: Vec<f64> = lattice.nodes().iter().map(|&r| phi(map.to_physical(r))).collect();
    let rv: Vec<f64> = rule.points().map(|r| phi(map.to_physical(r))).collect();
    project_samples(element, &map, lattice, &lv, rule, &rv)
}
