//! Symmetric quadrature rules on triangles and a Gauss rule on edges.
//!
//! Both triangle tables have strictly positive weights and interior nodes.
//! Orbit parameters were polished with extended-precision Newton iteration on
//! the moment equations, so the tables integrate their monomials to roundoff.

use crate::error::{ensure_finite, Error, Result};
use crate::mesh::{ElementMap, Mesh, Point};

/// A quadrature rule on the reference triangle `(0,0), (1,0), (0,1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadRule {
    precision: usize,
    /// Barycentric coordinates of the nodes.
    nodes: Vec<[f64; 3]>,
    /// Weights summing to the reference area 1/2.
    weights: Vec<f64>,
}

impl QuadRule {
    pub fn precision(&self) -> usize {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn barycentric(&self) -> &[[f64; 3]] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Nodes in reference coordinates `(x, y) = (lambda_1, lambda_2)`.
    pub fn points(&self) -> impl Iterator<Item = Point> + '_ {
        self.nodes.iter().map(|l| [l[1], l[2]])
    }

    /// Integral of `f` over the reference triangle.
    pub fn reference_integral(&self, f: impl Fn(Point) -> f64) -> f64 {
        self.points()
            .zip(&self.weights)
            .map(|(p, w)| f(p) * w)
            .sum()
    }

    /// Nodes and weights on a physical element.
    pub fn map(&self, element: usize, map: &ElementMap) -> MappedRule {
        let scale = map.det.abs();
        MappedRule {
            element,
            points: self.points().map(|p| map.to_physical(p)).collect(),
            weights: self.weights.iter().map(|w| w * scale).collect(),
        }
    }
}

/// A rule mapped to a physical element. Weights sum to the element area.
#[derive(Debug, Clone, PartialEq)]
pub struct MappedRule {
    pub element: usize,
    pub points: Vec<Point>,
    pub weights: Vec<f64>,
}

impl MappedRule {
    pub fn on(mesh: &Mesh, element: usize, rule: &QuadRule) -> Self {
        rule.map(element, &mesh.element_map(element))
    }

    pub fn integrate(&self, f: impl Fn(Point) -> f64) -> Result<f64> {
        self.integrate_indexed(|_, p| f(p))
    }

    /// Like [`integrate`](Self::integrate), passing the node index along.
    pub fn integrate_indexed(&self, f: impl Fn(usize, Point) -> f64) -> Result<f64> {
        let mut sum = 0.0;
        for (i, (p, w)) in self.points.iter().zip(&self.weights).enumerate() {
            sum += ensure_finite(f(i, *p), "integrand")? * w;
        }
        Ok(sum)
    }

    pub fn discrete_seminorm(&self, f: impl Fn(Point) -> f64) -> Result<f64> {
        Ok(self.integrate(|p| {
            let v = f(p);
            v * v
        })?
        .sqrt())
    }
}

/// Returns the tabulated rule of the requested precision (3 or 7).
pub fn reference_rule(precision: usize) -> Result<QuadRule> {
    match precision {
        3 => Ok(precision3()),
        7 => Ok(precision7()),
        p => Err(Error::UnsupportedPrecision(p)),
    }
}

/// `sum_i f(x_i) w_i` with the rule mapped to element `element` of `mesh`.
pub fn integrate(mesh: &Mesh, element: usize, f: impl Fn(Point) -> f64, rule: &QuadRule) -> Result<f64> {
    MappedRule::on(mesh, element, rule).integrate(f)
}

/// Quadrature-based discrete seminorm `(sum_i f(x_i)^2 w_i)^(1/2)`.
pub fn discrete_seminorm(
    mesh: &Mesh,
    element: usize,
    f: impl Fn(Point) -> f64,
    rule: &QuadRule,
) -> Result<f64> {
    MappedRule::on(mesh, element, rule).discrete_seminorm(f)
}

fn push_s3(nodes: &mut Vec<[f64; 3]>, weights: &mut Vec<f64>, w: f64) {
    nodes.push([1.0 / 3.0; 3]);
    weights.push(w);
}

fn push_s21(nodes: &mut Vec<[f64; 3]>, weights: &mut Vec<f64>, a: f64, w: f64) {
    let b = 1.0 - 2.0 * a;
    for l in [[b, a, a], [a, b, a], [a, a, b]] {
        nodes.push(l);
        weights.push(w);
    }
}

fn push_s111(nodes: &mut Vec<[f64; 3]>, weights: &mut Vec<f64>, a: f64, b: f64, w: f64) {
    let c = 1.0 - a - b;
    for l in [[a, b, c], [a, c, b], [b, a, c], [b, c, a], [c, a, b], [c, b, a]] {
        nodes.push(l);
        weights.push(w);
    }
}

/// Six-point rule with one fully asymmetric orbit and equal weights.
fn precision3() -> QuadRule {
    let (mut nodes, mut weights) = (Vec::new(), Vec::new());
    push_s111(
        &mut nodes,
        &mut weights,
        0.659_027_622_374_092_215_18,
        0.231_933_368_553_030_572_5,
        1.0 / 12.0,
    );
    QuadRule {
        precision: 3,
        nodes,
        weights,
    }
}

/// Positive-weight rule for precision 7.
fn precision7() -> QuadRule {
    let (mut nodes, mut weights) = (Vec::new(), Vec::new());
    push_s3(&mut nodes, &mut weights, 0.072_157_803_838_893_584_126);
    push_s21(&mut nodes, &mut weights, 0.459_292_588_292_723_156_03, 0.047_545_817_133_642_312_397);
    push_s21(&mut nodes, &mut weights, 0.170_569_307_751_760_206_62, 0.051_608_685_267_359_125_141);
    push_s21(&mut nodes, &mut weights, 0.050_547_228_317_030_975_458, 0.016_229_248_811_599_040_155);
    push_s111(
        &mut nodes,
        &mut weights,
        0.008_394_777_409_957_605_337_2,
        0.263_112_829_634_638_113_42,
        0.013_615_157_087_217_497_132,
    );
    QuadRule {
        precision: 7,
        nodes,
        weights,
    }
}

/// Four-point Gauss-Legendre rule on `[0, 1]`, exact through degree 7.
pub fn gauss_legendre_unit() -> ([f64; 4], [f64; 4]) {
    let x = [0.861_136_311_594_052_6, 0.339_981_043_584_856_3];
    let w = [0.347_854_845_137_453_9, 0.652_145_154_862_546_1];
    (
        [
            0.5 * (1.0 - x[0]),
            0.5 * (1.0 - x[1]),
            0.5 * (1.0 + x[1]),
            0.5 * (1.0 + x[0]),
        ],
        [0.5 * w[0], 0.5 * w[1], 0.5 * w[1], 0.5 * w[0]],
    )
}
