//! Variational physics-informed neural networks (VPINNs) on triangular meshes
//! with piecewise-linear test functions, and a residual-type a posteriori
//! error estimator for the trained network.
//!
//! The crate is organised bottom-up:
//!
//! - [`mesh`]: conforming triangulations and red refinement
//! - [`quadrature`]: symmetric triangle rules and edge Gauss rules
//! - [`problems`]: manufactured elliptic problems and the exact H1 error
//! - [`testspace`]: hat functions, residual assembly, loss, norm constants
//! - [`network`]: the tanh MLP trial manifold and the exact loss gradient
//! - [`training`]: deterministic Adam training with checkpoint traces
//! - [`estimator`]: elemental projections and every estimator term
//! - [`harness`]: convergence and trace experiments, CSV/SVG output

pub mod error;
pub mod estimator;
pub mod field;
pub mod harness;
pub mod mesh;
pub mod network;
pub mod par;
pub mod problems;
pub mod quadrature;
pub mod testspace;
pub mod training;

pub use error::{Error, Result};
pub use field::{Sample, SmoothField, TrialField};
pub use mesh::{build_structured_unit_square, refine_red, Mesh, Point};
pub use network::{init_params, MlpParams, NeuralField};
pub use par::Execution;
pub use problems::ProblemSpec;
pub use quadrature::{reference_rule, QuadRule};
