//! Norm-equivalence constants against a dense symmetric eigensolver.

use nalgebra::{DMatrix, SymmetricEigen};
use vpinn::testspace::{measure_norm_constants, norm_constant, stiffness_matrix, ChMode};
use vpinn::{build_structured_unit_square, refine_red, Mesh};

fn dense_constants(mesh: &Mesh) -> (f64, f64) {
    let s = stiffness_matrix(mesh).to_dense();
    let n = s.len();
    let m = DMatrix::from_fn(n, n, |i, j| s[i][j]);
    let eig = SymmetricEigen::new(m).eigenvalues;
    let lmin = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let lmax = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lmax.recip().sqrt(), lmin.recip().sqrt())
}

#[test]
fn measured_constants_match_dense_eigenvalues() {
    for n in [2, 3, 4, 6, 8, 12] {
        let mesh = build_structured_unit_square(n).unwrap();
        let c = measure_norm_constants(&mesh).unwrap();
        let (lower, upper) = dense_constants(&mesh);
        assert!((c.lower - lower).abs() <= 1e-8 * lower, "n={n}: {} vs {lower}", c.lower);
        assert!((c.upper - upper).abs() <= 1e-8 * upper, "n={n}: {} vs {upper}", c.upper);
    }
}

#[test]
fn refined_mesh_matches_dense_eigenvalues() {
    let mesh = refine_red(&build_structured_unit_square(3).unwrap());
    let c = measure_norm_constants(&mesh).unwrap();
    let (lower, upper) = dense_constants(&mesh);
    assert!((c.lower - lower).abs() <= 1e-8 * lower);
    assert!((c.upper - upper).abs() <= 1e-8 * upper);
}

#[test]
fn single_vertex_mesh() {
    // S = [4] on the n=2 mesh
    let mesh = build_structured_unit_square(2).unwrap();
    let c = measure_norm_constants(&mesh).unwrap();
    assert!((c.lower - 0.5).abs() < 1e-14 && (c.upper - 0.5).abs() < 1e-14);
}

#[test]
fn upper_constant_grows_like_inverse_meshsize() {
    let ch: Vec<f64> = [4, 8, 16]
        .iter()
        .map(|&n| norm_constant(&build_structured_unit_square(n).unwrap(), ChMode::Measured).unwrap())
        .collect();
    for w in ch.windows(2) {
        let ratio = w[1] / w[0];
        assert!((1.6..=2.4).contains(&ratio), "ratio {ratio}");
    }
    let mesh = build_structured_unit_square(8).unwrap();
    assert_eq!(norm_constant(&mesh, ChMode::Asymptotic).unwrap(), mesh.meshsize().recip());
}
