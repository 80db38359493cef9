//! Scalar fields that can be evaluated together with their spatial gradient.

use std::fmt;
use std::sync::Arc;

use crate::mesh::Point;
use crate::par::{self, Execution};

pub type ScalarFn = Arc<dyn Fn(Point) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(Point) -> [f64; 2] + Send + Sync>;

/// Value and gradient at one point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Sample {
    pub value: f64,
    pub gradient: [f64; 2],
}

/// A trial function `u` evaluable with its gradient anywhere in the closed domain.
pub trait TrialField: Sync {
    fn sample(&self, x: Point) -> Sample;

    /// Evaluates at many points. Implementations may batch, but must return
    /// results that depend only on `points`, not on the execution policy.
    fn sample_batch(&self, exec: Execution, points: &[Point]) -> Vec<Sample> {
        par::map_slice(exec, points, |&p| self.sample(p))
    }
}

/// A closed-form scalar field with analytic gradient.
#[derive(Clone)]
pub struct SmoothField {
    pub value: ScalarFn,
    pub gradient: VectorFn,
}

impl SmoothField {
    pub fn new(
        value: impl Fn(Point) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(Point) -> [f64; 2] + Send + Sync + 'static,
    ) -> Self {
        Self {
            value: Arc::new(value),
            gradient: Arc::new(gradient),
        }
    }

    pub fn zero() -> Self {
        Self::new(|_| 0.0, |_| [0.0, 0.0])
    }

    /// `scale * self`
    pub fn scaled(&self, scale: f64) -> Self {
        let (v, g) = (self.value.clone(), self.gradient.clone());
        Self::new(move |p| scale * v(p), move |p| {
            let d = g(p);
            [scale * d[0], scale * d[1]]
        })
    }

    /// `self + other`
    pub fn plus(&self, other: &SmoothField) -> Self {
        let (v1, g1) = (self.value.clone(), self.gradient.clone());
        let (v2, g2) = (other.value.clone(), other.gradient.clone());
        Self::new(move |p| v1(p) + v2(p), move |p| {
            let (a, b) = (g1(p), g2(p));
            [a[0] + b[0], a[1] + b[1]]
        })
    }
}

impl fmt::Debug for SmoothField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SmoothField")
    }
}

impl TrialField for SmoothField {
    fn sample(&self, x: Point) -> Sample {
        Sample {
            value: (self.value)(x),
            gradient: (self.gradient)(x),
        }
    }
}
